//! Conditioning pipeline and the velocity network shared by the teacher,
//! the students, the critic and the discriminator backbone.
//!
//! The raw conditioning signal is windowed into per-position temporal context
//! (`build_context`), then compressed 4x in time by a small adapter into one
//! token per frame. The backbone treats frames as tokens: each block applies
//! self-attention, cross-attention to the condition tokens and a feed-forward
//! map, all pre-normalized with residual connections; the timestep enters as
//! a sinusoidal embedding added to every token.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init_linear, ones1, zeros1, ParamNodes, Params};
use crate::rng::Stream;
use crate::tape::{NodeId, Tape};
use crate::toydata::DataSpec;

/// Temporal context window length (odd).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    #[serde(default = "default_context_k")]
    pub k: usize,
}

fn default_context_k() -> usize {
    5
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig { k: default_context_k() }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::config(format!("context length k={} must be odd and >= 1", self.k)));
        }
        Ok(())
    }
}

/// Backbone width/depth settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_time_embed")]
    pub time_embed_dim: usize,
    #[serde(default)]
    pub context: ContextConfig,
}

fn default_hidden() -> usize {
    64
}
fn default_blocks() -> usize {
    2
}
fn default_heads() -> usize {
    2
}
fn default_time_embed() -> usize {
    32
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: default_hidden(),
            blocks: default_blocks(),
            heads: default_heads(),
            time_embed_dim: default_time_embed(),
            context: ContextConfig::default(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        self.context.validate()?;
        if self.hidden == 0 || self.blocks == 0 || self.heads == 0 {
            return Err(Error::config("hidden, blocks and heads must be >= 1"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden {} must be divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.hidden % 2 != 0 {
            return Err(Error::config("hidden must be even"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim must be even and >= 2"));
        }
        Ok(())
    }
}

/// Input/output dimensions the network is wired for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub frames: usize,
    pub feature_dim: usize,
    pub cond_len: usize,
    pub cond_channels: usize,
}

impl From<&DataSpec> for ModelDims {
    fn from(s: &DataSpec) -> Self {
        ModelDims {
            frames: s.frames,
            feature_dim: s.feature_dim,
            cond_len: s.cond_len,
            cond_channels: s.cond_channels,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.feature_dim == 0 || self.cond_len == 0 || self.cond_channels == 0 {
            return Err(Error::config("all model dimensions must be >= 1"));
        }
        if self.cond_len != 4 * self.frames {
            return Err(Error::shape(format!(
                "cond_len {} must equal 4 * frames ({})",
                self.cond_len,
                4 * self.frames
            )));
        }
        Ok(())
    }
}

/// One condition token per frame, `[B, F, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondTokens {
    pub tokens: Array3<f64>,
}

impl CondTokens {
    pub fn zeros(batch: usize, frames: usize, hidden: usize) -> Self {
        CondTokens { tokens: Array3::zeros((batch, frames, hidden)) }
    }
}

/// Window each position with its k neighbors (replicate padding at the
/// boundaries): `[B, L, C] -> [B, L, k*C]`.
pub fn build_context(a: &Array3<f64>, cfg: &ContextConfig) -> Result<Array3<f64>> {
    cfg.validate()?;
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite conditioning input"));
    }
    let (bsz, l, c) = a.dim();
    let half = cfg.k / 2;
    let mut out = Array3::<f64>::zeros((bsz, l, cfg.k * c));
    for b in 0..bsz {
        for i in 0..l {
            for (w, off) in (-(half as isize)..=half as isize).enumerate() {
                let j = (i as isize + off).clamp(0, l as isize - 1) as usize;
                for ch in 0..c {
                    out[[b, i, w * c + ch]] = a[[b, j, ch]];
                }
            }
        }
    }
    Ok(out)
}

/// Pooling layout of the adapter: position 0 is encoded on its own, the rest
/// of the sequence is average-pooled with stride 4 so that the first block
/// covers rows 1..4 and block `i >= 1` covers rows `4i..4i+4`. This yields
/// exactly one pooled block per frame.
fn adapter_blocks(frames: usize) -> Vec<(usize, usize)> {
    (0..frames).map(|i| (if i == 0 { 1 } else { 4 * i }, 4 * (i + 1))).collect()
}

/// Parameter names and initialization for the full network (adapter + trunk).
fn init_params(cfg: &NetConfig, dims: &ModelDims, rng: &mut Stream) -> Params {
    let h = cfg.hidden;
    let ha = h / 2;
    let kc = cfg.context.k * dims.cond_channels;
    let mut p = Params::new();
    p.insert("adapter.first.w", init_linear(rng, kc, ha));
    p.insert("adapter.first.b", zeros1(ha));
    p.insert("adapter.pool.w", init_linear(rng, kc, ha));
    p.insert("adapter.pool.b", zeros1(ha));
    p.insert("adapter.out.w", init_linear(rng, 2 * ha, h));
    p.insert("adapter.out.b", zeros1(h));
    p.insert("embed.w", init_linear(rng, dims.feature_dim, h));
    p.insert("embed.b", zeros1(h));
    p.insert("pos.frame", init_linear(rng, dims.frames, h));
    p.insert("pos.cond", init_linear(rng, dims.frames, h));
    p.insert("time.w", init_linear(rng, cfg.time_embed_dim, h));
    p.insert("time.b", zeros1(h));
    for blk in 0..cfg.blocks {
        let pre = format!("blk{blk}");
        p.insert(format!("{pre}.ln1.g"), ones1(h));
        p.insert(format!("{pre}.ln1.b"), zeros1(h));
        for name in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("{pre}.attn.{name}"), init_linear(rng, h, h));
        }
        p.insert(format!("{pre}.ln2.g"), ones1(h));
        p.insert(format!("{pre}.ln2.b"), zeros1(h));
        for name in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("{pre}.xattn.{name}"), init_linear(rng, h, h));
        }
        p.insert(format!("{pre}.ln3.g"), ones1(h));
        p.insert(format!("{pre}.ln3.b"), zeros1(h));
        p.insert(format!("{pre}.ff.w1"), init_linear(rng, h, 4 * h));
        p.insert(format!("{pre}.ff.b1"), zeros1(4 * h));
        p.insert(format!("{pre}.ff.w2"), init_linear(rng, 4 * h, h));
        p.insert(format!("{pre}.ff.b2"), zeros1(h));
    }
    p.insert("out.ln.g", ones1(h));
    p.insert("out.ln.b", zeros1(h));
    p.insert("head.w", init_linear(rng, h, dims.feature_dim));
    p.insert("head.b", zeros1(dims.feature_dim));
    p
}

/// Sinusoidal features of per-sample timesteps, `[B, 1, TE]`.
pub fn time_features(ts: &[f64], te: usize) -> Array3<f64> {
    let half = te / 2;
    let mut out = Array3::<f64>::zeros((ts.len(), 1, te));
    for (b, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = 10_000f64.powf(-(i as f64) / half as f64);
            let arg = 1000.0 * t * freq;
            out[[b, 0, 2 * i]] = arg.sin();
            out[[b, 0, 2 * i + 1]] = arg.cos();
        }
    }
    out
}

/// Anything that evaluates a conditional velocity field.
///
/// `velocity_node` builds the evaluation on a tape so callers decide whether
/// parameters are tracked; `velocity` is the untracked convenience wrapper
/// and runs the exact same kernels through constant leaves.
pub trait VelocityField {
    fn params(&self) -> &Params;

    fn velocity_node(
        &self,
        tape: &mut Tape,
        pn: &ParamNodes,
        z: NodeId,
        ts: &[f64],
        cond: NodeId,
    ) -> NodeId;

    fn velocity(&self, z: &Array3<f64>, ts: &[f64], cond: &CondTokens) -> Array3<f64> {
        let mut tape = Tape::new();
        let pn = tape.bind(self.params(), false);
        let zc = tape.constant(z.clone().into_dyn());
        let cc = tape.constant(cond.tokens.clone().into_dyn());
        let out = self.velocity_node(&mut tape, &pn, zc, ts, cc);
        tape.value(out).clone().into_dimensionality().expect("velocity is 3-D")
    }
}

/// The transformer velocity network (adapter + trunk + linear head).
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    pub cfg: NetConfig,
    pub dims: ModelDims,
    pub params: Params,
}

impl VelocityNet {
    pub fn init(cfg: NetConfig, dims: ModelDims, rng: &mut Stream) -> Result<Self> {
        cfg.validate()?;
        dims.validate()?;
        let params = init_params(&cfg, &dims, rng);
        Ok(VelocityNet { cfg, dims, params })
    }

    pub fn from_params(cfg: NetConfig, dims: ModelDims, params: Params) -> Result<Self> {
        cfg.validate()?;
        dims.validate()?;
        let expect = {
            let mut rng = crate::rng::stream(0, 0);
            init_params(&cfg, &dims, &mut rng)
        };
        if expect.len() != params.len() {
            return Err(Error::data(format!(
                "parameter container has {} arrays, architecture needs {}",
                params.len(),
                expect.len()
            )));
        }
        for (name, v) in expect.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::data(format!("missing parameter {name}")))?;
            if got.shape() != v.shape() {
                return Err(Error::data(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    v.shape()
                )));
            }
        }
        Ok(VelocityNet { cfg, dims, params })
    }

    /// Compress a windowed conditioning signal into per-frame tokens on the
    /// tape: the first position and the stride-4 pooled remainder are encoded
    /// separately, concatenated, and mapped to width H.
    pub fn adapt_node(&self, tape: &mut Tape, pn: &ParamNodes, a_ctx: NodeId) -> NodeId {
        let f = self.dims.frames;
        let first = tape.select_row(a_ctx, 0);
        let w = pn.id("adapter.first.w");
        let b = pn.id("adapter.first.b");
        let first = tape.linear(first, w);
        let first = tape.add_bias(first, b);
        let first = tape.silu(first);
        let first = tape.broadcast_rows(first, f);

        let pooled = tape.pool_rows(a_ctx, adapter_blocks(f));
        let w = pn.id("adapter.pool.w");
        let b = pn.id("adapter.pool.b");
        let pooled = tape.linear(pooled, w);
        let pooled = tape.add_bias(pooled, b);
        let pooled = tape.silu(pooled);

        let cat = tape.concat_last(first, pooled);
        let w = pn.id("adapter.out.w");
        let b = pn.id("adapter.out.b");
        let out = tape.linear(cat, w);
        tape.add_bias(out, b)
    }

    /// Apply the window + adapter to a raw conditioning batch, untracked.
    pub fn cond_tokens(&self, cond: &Array3<f64>) -> Result<CondTokens> {
        let a_ctx = build_context(cond, &self.cfg.context)?;
        if a_ctx.dim().1 != self.dims.cond_len {
            return Err(Error::shape(format!(
                "conditioning length {} does not match model ({})",
                a_ctx.dim().1,
                self.dims.cond_len
            )));
        }
        let mut tape = Tape::new();
        let pn = tape.bind(&self.params, false);
        let a = tape.constant(a_ctx.into_dyn());
        let out = self.adapt_node(&mut tape, &pn, a);
        let tokens: Array3<f64> = tape.value(out).clone().into_dimensionality().expect("tokens 3-D");
        if !tokens.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("adapter produced non-finite tokens"));
        }
        Ok(CondTokens { tokens })
    }

    fn attention(
        &self,
        tape: &mut Tape,
        pn: &ParamNodes,
        prefix: &str,
        q_in: NodeId,
        kv_in: NodeId,
    ) -> NodeId {
        let heads = self.cfg.heads;
        let dh = self.cfg.hidden / heads;
        let wq = pn.id(&format!("{prefix}.wq"));
        let wk = pn.id(&format!("{prefix}.wk"));
        let wv = pn.id(&format!("{prefix}.wv"));
        let wo = pn.id(&format!("{prefix}.wo"));
        let q = tape.linear(q_in, wq);
        let k = tape.linear(kv_in, wk);
        let v = tape.linear(kv_in, wv);
        let q = tape.split_heads(q, heads);
        let k = tape.split_heads(k, heads);
        let v = tape.split_heads(v, heads);
        let scores = tape.bmm(q, k, false, true);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_last(scores);
        let ctx = tape.bmm(attn, v, false, false);
        let ctx = tape.merge_heads(ctx, heads);
        tape.linear(ctx, wo)
    }

    /// Trunk: everything up to (and including) the final layer norm, yielding
    /// the `[B, F, H]` frame tokens the heads read from.
    pub fn tokens_node(
        &self,
        tape: &mut Tape,
        pn: &ParamNodes,
        z: NodeId,
        ts: &[f64],
        cond: NodeId,
    ) -> NodeId {
        let f = self.dims.frames;
        let ew = pn.id("embed.w");
        let eb = pn.id("embed.b");
        let mut x = tape.linear(z, ew);
        x = tape.add_bias(x, eb);
        let pf = pn.id("pos.frame");
        x = tape.add_rows(x, pf);

        let feats = tape.constant(time_features(ts, self.cfg.time_embed_dim).into_dyn());
        let tw = pn.id("time.w");
        let tb = pn.id("time.b");
        let temb = tape.linear(feats, tw);
        let temb = tape.add_bias(temb, tb);
        let temb = tape.broadcast_rows(temb, f);
        x = tape.add(x, temb);

        // Positional table on the condition tokens keeps cross-attention
        // sensitive to token order.
        let pc = pn.id("pos.cond");
        let cond = tape.add_rows(cond, pc);

        for blk in 0..self.cfg.blocks {
            let pre = format!("blk{blk}");
            let g = pn.id(&format!("{pre}.ln1.g"));
            let b = pn.id(&format!("{pre}.ln1.b"));
            let h = tape.layer_norm(x, g, b);
            let o = self.attention(tape, pn, &format!("{pre}.attn"), h, h);
            x = tape.add(x, o);

            let g = pn.id(&format!("{pre}.ln2.g"));
            let b = pn.id(&format!("{pre}.ln2.b"));
            let h = tape.layer_norm(x, g, b);
            let o = self.attention(tape, pn, &format!("{pre}.xattn"), h, cond);
            x = tape.add(x, o);

            let g = pn.id(&format!("{pre}.ln3.g"));
            let b = pn.id(&format!("{pre}.ln3.b"));
            let h = tape.layer_norm(x, g, b);
            let w1 = pn.id(&format!("{pre}.ff.w1"));
            let b1 = pn.id(&format!("{pre}.ff.b1"));
            let w2 = pn.id(&format!("{pre}.ff.w2"));
            let b2 = pn.id(&format!("{pre}.ff.b2"));
            let ff = tape.linear(h, w1);
            let ff = tape.add_bias(ff, b1);
            let ff = tape.silu(ff);
            let ff = tape.linear(ff, w2);
            let ff = tape.add_bias(ff, b2);
            x = tape.add(x, ff);
        }

        let g = pn.id("out.ln.g");
        let b = pn.id("out.ln.b");
        tape.layer_norm(x, g, b)
    }

    /// Untracked forward pass; the spec-level `velocity_net_forward`.
    pub fn forward(&self, z: &Array3<f64>, ts: &[f64], cond: &CondTokens) -> Result<Array3<f64>> {
        let out = self.velocity(z, ts, cond);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("velocity network produced non-finite output"));
        }
        Ok(out)
    }
}

impl VelocityField for VelocityNet {
    fn params(&self) -> &Params {
        &self.params
    }

    fn velocity_node(
        &self,
        tape: &mut Tape,
        pn: &ParamNodes,
        z: NodeId,
        ts: &[f64],
        cond: NodeId,
    ) -> NodeId {
        let tokens = self.tokens_node(tape, pn, z, ts, cond);
        let hw = pn.id("head.w");
        let hb = pn.id("head.b");
        let out = tape.linear(tokens, hw);
        tape.add_bias(out, hb)
    }
}
