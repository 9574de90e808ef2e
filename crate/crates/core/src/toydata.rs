//! Synthetic conditional dataset: a nonnegative "envelope" signal drives one
//! feature channel of a short frame sequence, while other channels carry
//! condition-independent motion, so the conditional distribution is
//! multi-modal and a sync metric is well defined.
//!
//! Dataset files: magic `STPD`, a version byte, the little-endian spec header
//! and per-sample seeds, then a row-major little-endian f32 payload. The
//! layout is fixed so round-trips are bitwise across implementations.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, Stream};

const MAGIC: &[u8; 4] = b"STPD";
const VERSION: u8 = 1;

/// Shape and generation parameters of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    /// Frames per sample (F).
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Feature channels per frame (D).
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Conditioning sequence length (L); must be a multiple of F.
    #[serde(default = "default_cond_len")]
    pub cond_len: usize,
    /// Conditioning channels (C).
    #[serde(default = "default_cond_channels")]
    pub cond_channels: usize,
    /// Number of samples.
    pub count: usize,
    /// Root seed; per-sample seeds derive from it by index.
    pub seed: u64,
    /// Standard deviation of the mouth-channel observation noise.
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
}

fn default_frames() -> usize {
    16
}
fn default_feature_dim() -> usize {
    4
}
fn default_cond_len() -> usize {
    64
}
fn default_cond_channels() -> usize {
    1
}
fn default_noise_sigma() -> f64 {
    0.05
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.feature_dim == 0 || self.cond_len == 0 || self.cond_channels == 0 {
            return Err(Error::config("all dataset dimensions must be >= 1"));
        }
        if self.count == 0 {
            return Err(Error::config("dataset count must be >= 1"));
        }
        if self.cond_len % self.frames != 0 {
            return Err(Error::config(format!(
                "cond_len {} must be a multiple of frames {}",
                self.cond_len, self.frames
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be >= 0"));
        }
        Ok(())
    }

    /// Floats per sample in the file payload.
    fn floats_per_sample(&self) -> usize {
        self.frames * self.feature_dim + self.cond_len * self.cond_channels
    }
}

/// One item: an F x D frame sequence, its L x C conditioning signal and the
/// seed it was synthesized from. Arrays are stored at file precision (f32) so
/// persisted datasets round-trip bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frames: Array2<f32>,
    pub cond: Array2<f32>,
    pub seed: u64,
}

/// A spec together with its samples; the unit of dataset IO.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DataSpec,
    pub samples: Vec<Sample>,
}

/// All random draws behind one sample, split out so tests can pin them.
#[derive(Debug, Clone)]
pub struct SampleDraws {
    /// Per cond channel: three (amplitude, frequency, phase) triples.
    pub tones: Vec<[(f64, f64, f64); 3]>,
    /// Mouth observation noise, one per frame.
    pub mouth_noise: Vec<f64>,
    /// Head motion amplitude in U(0, 0.3).
    pub head_amp: f64,
    /// Head motion phase in U(0, 2 pi).
    pub head_phase: f64,
    /// Per extra channel (index >= 3), one draw per frame, N(0,1) scaled later.
    pub extra_noise: Vec<Vec<f64>>,
}

/// Draw everything a sample needs, in a fixed order.
pub fn sample_draws(rng: &mut Stream, spec: &DataSpec) -> SampleDraws {
    let mut tones = Vec::with_capacity(spec.cond_channels);
    for _ in 0..spec.cond_channels {
        let mut t = [(0.0, 0.0, 0.0); 3];
        for slot in t.iter_mut() {
            let alpha = 0.5 + 0.5 * rng.gen::<f64>();
            let freq = 1.0 + 3.0 * rng.gen::<f64>();
            let phase = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
            *slot = (alpha, freq, phase);
        }
        tones.push(t);
    }
    let mouth_noise = (0..spec.frames).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let head_amp = 0.3 * rng.gen::<f64>();
    let head_phase = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
    let extra = spec.feature_dim.saturating_sub(3);
    let extra_noise = (0..extra)
        .map(|_| (0..spec.frames).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    SampleDraws { tones, mouth_noise, head_amp, head_phase, extra_noise }
}

/// Deterministically assemble a sample from its draws.
pub fn build_sample(draws: &SampleDraws, spec: &DataSpec, seed: u64) -> Sample {
    let l = spec.cond_len;
    let f = spec.frames;
    let d = spec.feature_dim;
    let c = spec.cond_channels;
    let tau = 2.0 * std::f64::consts::PI;

    let mut cond64 = Array2::<f64>::zeros((l, c));
    for ch in 0..c {
        for j in 0..l {
            let mut v = 0.0;
            for &(alpha, freq, phase) in &draws.tones[ch] {
                v += alpha * (tau * freq * j as f64 / l as f64 + phase).sin();
            }
            cond64[[j, ch]] = v.abs();
        }
    }

    let envelope = frame_align_f64(&cond64.view(), f).expect("spec validated");
    let mut frames64 = Array2::<f64>::zeros((f, d));
    for i in 0..f {
        frames64[[i, 0]] = envelope[i] + spec.noise_sigma * draws.mouth_noise[i];
        if d > 1 {
            frames64[[i, 1]] = draws.head_amp * (tau * i as f64 / f as f64 + draws.head_phase).sin();
        }
        if d > 2 {
            frames64[[i, 2]] = draws.head_amp * (tau * i as f64 / f as f64 + draws.head_phase).cos();
        }
        for ch in 3..d {
            frames64[[i, ch]] = 0.1 * draws.extra_noise[ch - 3][i];
        }
    }

    Sample {
        frames: frames64.mapv(|e| e as f32),
        cond: cond64.mapv(|e| e as f32),
        seed,
    }
}

/// Synthesize one sample from an explicit stream.
pub fn synthesize_sample(rng: &mut Stream, spec: &DataSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let draws = sample_draws(rng, spec);
    Ok(build_sample(&draws, spec, seed))
}

/// Synthesize sample `index`; a pure function of `(spec.seed, index)`.
pub fn synthesize_indexed(spec: &DataSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let seed = derive_seed(spec.seed, index);
    let mut rng = stream(spec.seed, index);
    let draws = sample_draws(&mut rng, spec);
    Ok(build_sample(&draws, spec, seed))
}

/// Generate the full dataset described by `spec`.
pub fn generate(spec: &DataSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.count as u64)
        .map(|i| synthesize_indexed(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec: spec.clone(), samples })
}

fn frame_align_f64(cond: &ArrayView2<f64>, frames: usize) -> Result<Array1<f64>> {
    let (l, c) = cond.dim();
    if frames == 0 || l % frames != 0 {
        return Err(Error::shape(format!("cond length {l} not divisible by frame count {frames}")));
    }
    let block = l / frames;
    let mut out = Array1::<f64>::zeros(frames);
    for i in 0..frames {
        let mut sum = 0.0;
        for j in i * block..(i + 1) * block {
            for ch in 0..c {
                sum += cond[[j, ch]];
            }
        }
        out[i] = sum / (block * c) as f64;
    }
    Ok(out)
}

/// Channel-averaged blockwise mean of the conditioning signal: entry `i` is
/// the mean of `cond` over the L/F points covering frame `i`.
pub fn frame_align(cond: &ArrayView2<f64>, frames: usize) -> Result<Array1<f64>> {
    frame_align_f64(cond, frames)
}

impl Sample {
    pub fn cond_f64(&self) -> Array2<f64> {
        self.cond.mapv(|e| e as f64)
    }

    pub fn frames_f64(&self) -> Array2<f64> {
        self.frames.mapv(|e| e as f64)
    }
}

/// Stack selected samples' frames into a `[B, F, D]` batch.
pub fn frames_batch(samples: &[Sample], idx: &[usize]) -> Array3<f64> {
    let f = samples[idx[0]].frames.nrows();
    let d = samples[idx[0]].frames.ncols();
    let mut out = Array3::<f64>::zeros((idx.len(), f, d));
    for (b, &i) in idx.iter().enumerate() {
        for r in 0..f {
            for cch in 0..d {
                out[[b, r, cch]] = samples[i].frames[[r, cch]] as f64;
            }
        }
    }
    out
}

/// Stack selected samples' conditioning signals into `[B, L, C]`.
pub fn cond_batch(samples: &[Sample], idx: &[usize]) -> Array3<f64> {
    let l = samples[idx[0]].cond.nrows();
    let c = samples[idx[0]].cond.ncols();
    let mut out = Array3::<f64>::zeros((idx.len(), l, c));
    for (b, &i) in idx.iter().enumerate() {
        for r in 0..l {
            for cch in 0..c {
                out[[b, r, cch]] = samples[i].cond[[r, cch]] as f64;
            }
        }
    }
    out
}

/// Write a dataset; the header encodes the spec, the payload is pure f32.
pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let spec = &dataset.spec;
    spec.validate().map_err(|e| Error::data(format!("invalid spec on write: {e}")))?;
    if dataset.samples.len() != spec.count {
        return Err(Error::data(format!(
            "spec count {} disagrees with sample count {}",
            spec.count,
            dataset.samples.len()
        )));
    }
    for s in &dataset.samples {
        if s.frames.dim() != (spec.frames, spec.feature_dim) || s.cond.dim() != (spec.cond_len, spec.cond_channels) {
            return Err(Error::data("sample shape disagrees with spec".to_string()));
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u8(VERSION)?;
    w.write_u32::<LittleEndian>(spec.frames as u32)?;
    w.write_u32::<LittleEndian>(spec.feature_dim as u32)?;
    w.write_u32::<LittleEndian>(spec.cond_len as u32)?;
    w.write_u32::<LittleEndian>(spec.cond_channels as u32)?;
    w.write_u64::<LittleEndian>(spec.count as u64)?;
    w.write_u64::<LittleEndian>(spec.seed)?;
    w.write_f64::<LittleEndian>(spec.noise_sigma)?;
    for s in &dataset.samples {
        w.write_u64::<LittleEndian>(s.seed)?;
    }
    for s in &dataset.samples {
        for &v in s.frames.iter() {
            w.write_f32::<LittleEndian>(v)?;
        }
        for &v in s.cond.iter() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset, validating the header against the payload length.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = std::fs::read(&path)?;
    let mut r = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::data("file too short for header"))?;
    if &magic != MAGIC {
        return Err(Error::data("bad magic bytes"));
    }
    let version = r.read_u8().map_err(|_| Error::data("truncated header"))?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported dataset version {version}")));
    }
    let read_u32 = |r: &mut std::io::Cursor<&Vec<u8>>| {
        r.read_u32::<LittleEndian>().map_err(|_| Error::data("truncated header"))
    };
    let frames = read_u32(&mut r)? as usize;
    let feature_dim = read_u32(&mut r)? as usize;
    let cond_len = read_u32(&mut r)? as usize;
    let cond_channels = read_u32(&mut r)? as usize;
    let count = r.read_u64::<LittleEndian>().map_err(|_| Error::data("truncated header"))? as usize;
    let seed = r.read_u64::<LittleEndian>().map_err(|_| Error::data("truncated header"))?;
    let noise_sigma = r.read_f64::<LittleEndian>().map_err(|_| Error::data("truncated header"))?;
    let spec = DataSpec { frames, feature_dim, cond_len, cond_channels, count, seed, noise_sigma };
    spec.validate().map_err(|e| Error::data(format!("corrupt header: {e}")))?;

    let header_len = r.position() as usize;
    let expected = header_len + count * 8 + count * spec.floats_per_sample() * 4;
    if bytes.len() != expected {
        return Err(Error::data(format!(
            "header spec implies {expected} bytes, file has {}",
            bytes.len()
        )));
    }

    let mut seeds = Vec::with_capacity(count);
    for _ in 0..count {
        seeds.push(r.read_u64::<LittleEndian>().map_err(|_| Error::data("truncated seeds"))?);
    }
    let mut samples = Vec::with_capacity(count);
    for sample_seed in seeds {
        let mut frames_arr = Array2::<f32>::zeros((spec.frames, spec.feature_dim));
        for v in frames_arr.iter_mut() {
            *v = r.read_f32::<LittleEndian>().map_err(|_| Error::data("truncated payload"))?;
        }
        let mut cond_arr = Array2::<f32>::zeros((spec.cond_len, spec.cond_channels));
        for v in cond_arr.iter_mut() {
            *v = r.read_f32::<LittleEndian>().map_err(|_| Error::data("truncated payload"))?;
        }
        samples.push(Sample { frames: frames_arr, cond: cond_arr, seed: sample_seed });
    }
    Ok(Dataset { spec, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(count: usize) -> DataSpec {
        DataSpec { frames: 16, feature_dim: 4, cond_len: 64, cond_channels: 1, count, seed: 11, noise_sigma: 0.05 }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            num += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        num / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn zero_amplitude_gives_zero_cond_and_mouth() {
        let mut spec = small_spec(1);
        spec.noise_sigma = 0.0;
        let mut rng = stream(1, 1);
        let mut draws = sample_draws(&mut rng, &spec);
        for t in draws.tones.iter_mut() {
            for slot in t.iter_mut() {
                slot.0 = 0.0;
            }
        }
        let s = build_sample(&draws, &spec, 0);
        assert!(s.cond.iter().all(|&v| v == 0.0));
        assert!(s.frames.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_index_is_bitwise_identical() {
        let spec = small_spec(4);
        let a = synthesize_indexed(&spec, 2).unwrap();
        let b = synthesize_indexed(&spec, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn head_amplitude_mean_matches_uniform_oracle() {
        // E[A] for A ~ U(0, 0.3) is 0.15; Monte Carlo over 1e5 draws.
        let spec = small_spec(1);
        let mut rng = stream(5, 5);
        let mut acc = 0.0;
        let n = 100_000;
        for _ in 0..n {
            acc += sample_draws(&mut rng, &spec).head_amp;
        }
        let mean = acc / n as f64;
        assert!((mean - 0.15).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn cond_is_nonnegative() {
        let ds = generate(&small_spec(64)).unwrap();
        for s in &ds.samples {
            assert!(s.cond.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn frame_align_constant_is_identity() {
        let cond = Array2::from_elem((12, 2), 0.7);
        let out = frame_align(&cond.view(), 3).unwrap();
        assert!(out.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn frame_align_hand_case() {
        let cond = Array2::from_shape_vec((8, 1), (1..=8).map(|v| v as f64).collect()).unwrap();
        let out = frame_align(&cond.view(), 2).unwrap();
        assert_eq!(out.as_slice().unwrap(), &[2.5, 6.5]);
    }

    #[test]
    fn frame_align_rejects_indivisible_length() {
        let cond = Array2::<f64>::zeros((10, 1));
        assert!(matches!(frame_align(&cond.view(), 3), Err(Error::Shape(_))));
    }

    #[test]
    fn frame_align_matches_blockwise_oracle() {
        let mut rng = stream(9, 9);
        let cond = Array2::from_shape_fn((24, 3), |_| rng.gen::<f64>());
        let out = frame_align(&cond.view(), 6).unwrap();
        let block = 24 / 6;
        for i in 0..6 {
            let mut vals = Vec::new();
            for j in i * block..(i + 1) * block {
                for c in 0..3 {
                    vals.push(cond[[j, c]]);
                }
            }
            let oracle = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((out[i] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn mouth_tracks_envelope() {
        let ds = generate(&small_spec(1000)).unwrap();
        let mut mouth = Vec::new();
        let mut env = Vec::new();
        for s in &ds.samples {
            let aligned = frame_align(&s.cond_f64().view(), 16).unwrap();
            for i in 0..16 {
                mouth.push(s.frames[[i, 0]] as f64);
                env.push(aligned[i]);
            }
        }
        let r = pearson(&mouth, &env);
        assert!(r > 0.95, "sync correlation {r}");
    }

    #[test]
    fn head_channels_independent_of_cond() {
        let ds = generate(&small_spec(10_000)).unwrap();
        for ch in [1usize, 2] {
            let mut head = Vec::new();
            let mut env = Vec::new();
            for s in &ds.samples {
                let aligned = frame_align(&s.cond_f64().view(), 16).unwrap();
                for i in 0..16 {
                    head.push(s.frames[[i, ch]] as f64);
                    env.push(aligned[i]);
                }
            }
            let r = pearson(&head, &env).abs();
            assert!(r < 0.05, "head channel {ch} correlation {r}");
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ds = generate(&small_spec(17)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
        // Write the re-read dataset again: identical bytes.
        let path2 = dir.path().join("d2.bin");
        write_dataset(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_a_data_error() {
        let ds = generate(&small_spec(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Data(_))));
    }

    #[test]
    fn header_payload_mismatch_is_a_data_error() {
        let ds = generate(&small_spec(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Bump the count field (offset 4+1+16 = 21) without adding payload.
        bytes[21] = bytes[21].wrapping_add(1);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Data(_))));
    }

    #[test]
    fn corrupt_magic_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Data(_))));
    }

    #[test]
    fn invalid_spec_is_a_config_error() {
        let mut spec = small_spec(1);
        spec.cond_len = 63;
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }
}
