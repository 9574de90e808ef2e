//! Run configuration: one JSON document drives every pipeline phase. All
//! stream seeds derive from the single `seed` field, so runs with the same
//! config are bit-reproducible.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use flowdistill_core::pad::StageConfig;
use flowdistill_core::toydata::DataSpec;
use flowdistill_core::{DmdConfig, Error, NetConfig, Result, TeacherConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    /// Evaluation budgets (denoiser evaluations per sample).
    #[serde(default = "default_nfe_list")]
    pub nfe_list: Vec<usize>,
}

fn default_n_eval() -> usize {
    256
}
fn default_nfe_list() -> Vec<usize> {
    vec![1]
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_eval: default_n_eval(), nfe_list: default_nfe_list() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub data_path: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default = "default_data_spec")]
    pub data: DataSpec,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub dmd: DmdConfig,
    #[serde(default = "default_stages")]
    pub pad: Vec<StageConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_seed() -> u64 {
    42
}

fn default_out_dir() -> String {
    "out".to_string()
}

fn default_data_spec() -> DataSpec {
    DataSpec {
        frames: 16,
        feature_dim: 4,
        cond_len: 64,
        cond_channels: 1,
        count: 4096,
        seed: default_seed(),
        noise_sigma: 0.05,
    }
}

fn default_stages() -> Vec<StageConfig> {
    (1..=3).map(|k| StageConfig::canonical(k).expect("canonical stage")).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl RunConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.net.validate()?;
        self.teacher.validate()?;
        self.dmd.validate()?;
        if self.pad.is_empty() {
            return Err(Error::config("pad stage list must be nonempty"));
        }
        let mut prev_k = 0;
        for stage in &self.pad {
            stage.validate()?;
            if stage.k <= prev_k {
                return Err(Error::config("pad stages must be ordered by ascending k"));
            }
            prev_k = stage.k;
        }
        if self.eval.n_eval < 64 {
            return Err(Error::config("eval.n_eval must be >= 64"));
        }
        if self.eval.nfe_list.is_empty() {
            return Err(Error::config("eval.nfe_list must be nonempty"));
        }
        Ok(())
    }

    /// Stable hex digest of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}
