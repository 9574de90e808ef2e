//! Checkpoint persistence: a raw little-endian f32 payload with parameters in
//! name-sorted order, plus a JSON sidecar holding metadata, array shapes and
//! a payload digest. Load-then-save reproduces identical bytes.

use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use flowdistill_core::params::Params;
use flowdistill_core::{Error, ModelDims, NetConfig, Result, Schedule};

/// Pipeline stage tags: -1 teacher, 0 distribution matching, 1..=3 the
/// adversarial phases.
pub const STAGE_TEACHER: i32 = -1;
pub const STAGE_DMD: i32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub stage: i32,
    pub step: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub config_hash: String,
    pub created_at: String,
    pub net: NetConfig,
    pub dims: ModelDims,
    pub params: Vec<ParamEntry>,
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub meta: Sidecar,
}

fn sidecar_path(payload: &Path) -> PathBuf {
    payload.with_extension("json")
}

fn digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn payload_bytes(params: &Params) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(params.num_values() * 4);
    for (_, value) in params.iter() {
        for &v in value.iter() {
            bytes.write_f32::<LittleEndian>(v as f32).expect("vec write");
        }
    }
    bytes
}

/// Serialize parameters (quantized to f32) and the sidecar metadata. The
/// sidecar digest binds it to the payload.
pub fn save_checkpoint(path: &Path, params: &Params, meta: &SidecarDraft) -> Result<()> {
    let bytes = payload_bytes(params);
    let sidecar = Sidecar {
        stage: meta.stage,
        step: meta.step,
        schedule: meta.schedule.clone(),
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
        created_at: chrono::Utc::now().to_rfc3339(),
        net: meta.net,
        dims: meta.dims,
        params: params
            .iter()
            .map(|(name, v)| ParamEntry { name: name.clone(), shape: v.shape().to_vec() })
            .collect(),
        payload_sha256: digest(&bytes),
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, &bytes)?;
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Everything the caller provides for a save; `created_at` and the digest
/// are filled in.
#[derive(Debug, Clone)]
pub struct SidecarDraft {
    pub stage: i32,
    pub step: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub config_hash: String,
    pub net: NetConfig,
    pub dims: ModelDims,
}

/// Load and validate a checkpoint: sidecar digest must match the payload and
/// shapes must account for every byte.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let sc_path = sidecar_path(path);
    let sidecar_text = std::fs::read_to_string(&sc_path)
        .map_err(|e| Error::data(format!("cannot read sidecar {}: {e}", sc_path.display())))?;
    let meta: Sidecar = serde_json::from_str(&sidecar_text)
        .map_err(|e| Error::data(format!("invalid sidecar: {e}")))?;

    if digest(&bytes) != meta.payload_sha256 {
        return Err(Error::data("payload digest does not match sidecar"));
    }
    let expected: usize = meta.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if bytes.len() != expected * 4 {
        return Err(Error::data(format!(
            "payload holds {} bytes, sidecar shapes imply {}",
            bytes.len(),
            expected * 4
        )));
    }

    let mut r = std::io::Cursor::new(&bytes);
    let mut params = Params::new();
    let mut names = meta.params.clone();
    names.sort_by(|a, b| a.name.cmp(&b.name));
    if names != meta.params {
        return Err(Error::data("sidecar parameter list is not name-sorted"));
    }
    for entry in &meta.params {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = r
                .read_f32::<LittleEndian>()
                .map_err(|_| Error::data("truncated checkpoint payload"))?;
            data.push(v as f64);
        }
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), data)
            .map_err(|e| Error::data(format!("bad shape for {}: {e}", entry.name)))?;
        params.insert(entry.name.clone(), arr);
    }
    Ok(Checkpoint { params, meta })
}
