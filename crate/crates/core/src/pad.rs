//! Stage 2: progressive adversarial distillation. Three phases shrink the
//! student's schedule 4 -> 3 -> 2 -> 1. Each phase trains a relativistic
//! discriminator (with R1/R2/R3 perturbation penalties) against the student's
//! final-step-gradient samples, randomly perturbs the last timestep during a
//! warm-up window, and regularizes the generator against frozen 4-step
//! reference samples.

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condnet::{build_context, CondTokens, ModelDims, NetConfig, VelocityNet};
use crate::error::{Error, Result, TrainEnd};
use crate::flowcore::{batch_indices, sample, sample_final_step_grad, NfeCounter, Schedule};
use crate::params::{init_linear, zeros1, Adam, ParamNodes, Params};
use crate::rng::{labels, stream, Stream};
use crate::tape::{NodeId, Tape};
use crate::toydata::{cond_batch, frames_batch, Dataset};

/// Adversarial objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    R3gan,
    NonSaturating,
    Hinge,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LossKind::R3gan => "r3gan",
            LossKind::NonSaturating => "nonsaturating",
            LossKind::Hinge => "hinge",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r3gan" => Ok(LossKind::R3gan),
            "nonsaturating" => Ok(LossKind::NonSaturating),
            "hinge" => Ok(LossKind::Hinge),
            other => Err(Error::config(format!("unknown loss kind {other}"))),
        }
    }
}

/// Per-phase settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Phase index, 1..=3.
    pub k: usize,
    pub target_schedule: Vec<f64>,
    /// Final timestep of the previous phase's schedule; lower edge of the
    /// warm-up perturbation range.
    pub prev_final_t: f64,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_stage_steps")]
    pub steps: usize,
    /// Self-compare weight in [0, 1].
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Discriminator regularization strength.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Perturbation magnitude for the R1/R2/R3 penalties.
    #[serde(default = "default_sigma_r")]
    pub sigma_r: f64,
    #[serde(default = "default_loss_kind")]
    pub loss_kind: LossKind,
    #[serde(default = "default_lr_gen")]
    pub lr_gen: f64,
    #[serde(default = "default_lr_disc")]
    pub lr_disc: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_warmup() -> usize {
    500
}
fn default_stage_steps() -> usize {
    500
}
fn default_lambda() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    100.0
}
fn default_sigma_r() -> f64 {
    0.1
}
fn default_loss_kind() -> LossKind {
    LossKind::R3gan
}
fn default_lr_gen() -> f64 {
    2e-5
}
fn default_lr_disc() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    16
}

impl StageConfig {
    /// The fixed phase schedules: T1 = {1.0, 0.75, 0.5}, T2 = {1.0, 0.75},
    /// T3 = {1.0}, each warm-started from the previous phase's final
    /// timestep (0.25, 0.5, 0.75 respectively).
    pub fn canonical(k: usize) -> Result<Self> {
        let (target_schedule, prev_final_t) = match k {
            1 => (vec![1.0, 0.75, 0.5], 0.25),
            2 => (vec![1.0, 0.75], 0.5),
            3 => (vec![1.0], 0.75),
            other => return Err(Error::config(format!("stage index {other} outside 1..=3"))),
        };
        Ok(StageConfig {
            k,
            target_schedule,
            prev_final_t,
            warmup: default_warmup(),
            steps: default_stage_steps(),
            lambda: default_lambda(),
            gamma: default_gamma(),
            sigma_r: default_sigma_r(),
            loss_kind: default_loss_kind(),
            lr_gen: default_lr_gen(),
            lr_disc: default_lr_disc(),
            batch_size: default_batch(),
        })
    }

    pub fn target(&self) -> Result<Schedule> {
        Schedule::new(self.target_schedule.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.k) {
            return Err(Error::config(format!("stage index {} outside 1..=3", self.k)));
        }
        let target = self.target()?;
        if !(self.prev_final_t > 0.0 && self.prev_final_t < target.last()) {
            return Err(Error::config(format!(
                "prev_final_t {} must lie in (0, {})",
                self.prev_final_t,
                target.last()
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("gamma must be >= 0"));
        }
        if !(self.sigma_r >= 0.0) {
            return Err(Error::config("sigma_r must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("stage batch_size must be >= 1"));
        }
        if !(self.lr_gen > 0.0 && self.lr_disc > 0.0) {
            return Err(Error::config("stage learning rates must be positive"));
        }
        Ok(())
    }
}

/// During the warm-up window the final schedule entry is drawn uniformly from
/// `[prev_final_t, last(target))`; afterwards the target schedule is fixed.
pub fn dynamic_sample(
    target: &Schedule,
    prev_final_t: f64,
    s: usize,
    warmup: usize,
    rng: &mut Stream,
) -> Result<Schedule> {
    if prev_final_t >= target.last() {
        return Err(Error::config(format!(
            "prev_final_t {} must be below the target's final timestep {}",
            prev_final_t,
            target.last()
        )));
    }
    if s < warmup {
        let u: f64 = rng.gen();
        let t = prev_final_t + u * (target.last() - prev_final_t);
        target.with_last(t)
    } else {
        Ok(target.clone())
    }
}

/// Discriminator: the velocity-network backbone (including its conditioning
/// adapter) plus a small zero-initialized readout head over mean-pooled frame
/// tokens. All parameters live in one container; the backbone subset shares
/// names with [`VelocityNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorState {
    pub cfg: NetConfig,
    pub dims: ModelDims,
    pub params: Params,
}

impl DiscriminatorState {
    /// Initialize from a trained backbone; the head's final layer starts at
    /// zero so the initial logit is exactly 0 for every input.
    pub fn init_from(backbone: &VelocityNet, rng: &mut Stream) -> Self {
        let h = backbone.cfg.hidden;
        let mut params = backbone.params.clone();
        params.insert("dhead.w1", init_linear(rng, h, h / 2));
        params.insert("dhead.b1", zeros1(h / 2));
        params.insert("dhead.w2", ndarray::ArrayD::zeros(ndarray::IxDyn(&[h / 2, 1])));
        params.insert("dhead.b2", zeros1(1));
        DiscriminatorState { cfg: backbone.cfg, dims: backbone.dims, params }
    }

    /// Backbone shell for building tape graphs; parameters flow through the
    /// tape binding, not through this value.
    fn shell(&self) -> VelocityNet {
        VelocityNet { cfg: self.cfg, dims: self.dims, params: Params::new() }
    }

    /// Condition tokens through the discriminator's own adapter, untracked.
    pub fn cond_tokens(&self, cond_raw: &Array3<f64>) -> Result<CondTokens> {
        let shell = VelocityNet { cfg: self.cfg, dims: self.dims, params: self.params.clone() };
        shell.cond_tokens(cond_raw)
    }

    /// Build the scalar logit on a tape: backbone tokens at t = 0,
    /// mean-pooled, then the feed-forward head. Returns `[B, 1, 1]`.
    pub fn logit_node(&self, tape: &mut Tape, pn: &ParamNodes, x: NodeId, cond: NodeId) -> NodeId {
        let bsz = tape.value(x).shape()[0];
        let shell = self.shell();
        let tokens = shell.tokens_node(tape, pn, x, &vec![0.0; bsz], cond);
        let pooled = tape.mean_rows(tokens);
        let w1 = pn.id("dhead.w1");
        let b1 = pn.id("dhead.b1");
        let h = tape.linear(pooled, w1);
        let h = tape.add_bias(h, b1);
        let h = tape.silu(h);
        let w2 = pn.id("dhead.w2");
        let b2 = pn.id("dhead.b2");
        let out = tape.linear(h, w2);
        tape.add_bias(out, b2)
    }

    /// Untracked per-sample logits.
    pub fn logits(&self, x: &Array3<f64>, cond: &CondTokens) -> Result<Array1<f64>> {
        let mut tape = Tape::new();
        let pn = tape.bind(&self.params, false);
        let xc = tape.constant(x.clone().into_dyn());
        let cc = tape.constant(cond.tokens.clone().into_dyn());
        let node = self.logit_node(&mut tape, &pn, xc, cc);
        let v = tape.value(node);
        let out = Array1::from_iter(v.iter().copied());
        if !out.iter().all(|e| e.is_finite()) {
            return Err(Error::numeric("discriminator produced non-finite logit"));
        }
        Ok(out)
    }
}

/// Frozen copy of the stage-0 generator used for reference samples.
#[derive(Debug, Clone)]
pub struct RefGenerator {
    pub net: VelocityNet,
    pub schedule: Schedule,
}

impl RefGenerator {
    pub fn new(net: VelocityNet, schedule: Schedule) -> Self {
        RefGenerator { net, schedule }
    }
}

/// Reference sample from the frozen stage-0 generator: unguided, fully
/// detached, same `z0` and condition as the student's batch.
pub fn gen_reference(refgen: &RefGenerator, z0: &Array3<f64>, cond_raw: &Array3<f64>) -> Result<Array3<f64>> {
    let tokens = refgen.net.cond_tokens(cond_raw)?;
    let mut counter = NfeCounter::new();
    sample(&refgen.net, &refgen.schedule, z0, &tokens, None, &mut counter)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Scalar-logit forms of the three objectives; returns `(L_D, L_G)`.
pub fn adv_losses(kind: LossKind, d_real: f64, d_fake: f64) -> (f64, f64) {
    match kind {
        LossKind::R3gan => (softplus(d_fake - d_real), softplus(d_real - d_fake)),
        LossKind::NonSaturating => (softplus(-d_real) + softplus(d_fake), softplus(-d_fake)),
        LossKind::Hinge => ((1.0 - d_real).max(0.0) + (1.0 + d_fake).max(0.0), -d_fake),
    }
}

fn d_core_node(tape: &mut Tape, kind: LossKind, d_real: NodeId, d_fake: NodeId) -> NodeId {
    match kind {
        LossKind::R3gan => {
            let diff = tape.sub(d_fake, d_real);
            let sp = tape.softplus(diff);
            tape.mean_all(sp)
        }
        LossKind::NonSaturating => {
            let nr = tape.neg(d_real);
            let sp_r = tape.softplus(nr);
            let a = tape.mean_all(sp_r);
            let sp_f = tape.softplus(d_fake);
            let b = tape.mean_all(sp_f);
            tape.add(a, b)
        }
        LossKind::Hinge => {
            let r = tape.affine(d_real, -1.0, 1.0);
            let r = tape.relu(r);
            let a = tape.mean_all(r);
            let f = tape.affine(d_fake, 1.0, 1.0);
            let f = tape.relu(f);
            let b = tape.mean_all(f);
            tape.add(a, b)
        }
    }
}

/// Generator loss against an opponent logit (real or self-compare reference;
/// the non-relativistic kinds ignore the opponent).
fn g_core_node(tape: &mut Tape, kind: LossKind, d_fake: NodeId, d_opponent: NodeId) -> NodeId {
    match kind {
        LossKind::R3gan => {
            let diff = tape.sub(d_opponent, d_fake);
            let sp = tape.softplus(diff);
            tape.mean_all(sp)
        }
        LossKind::NonSaturating => {
            let nf = tape.neg(d_fake);
            let sp = tape.softplus(nf);
            tape.mean_all(sp)
        }
        LossKind::Hinge => {
            let nf = tape.neg(d_fake);
            tape.mean_all(nf)
        }
    }
}

/// Squared logit response to an input perturbation: the same operation
/// applied to real, student and reference batches yields R1, R2 and R3.
pub fn reg_penalty_with(
    disc: &DiscriminatorState,
    x: &Array3<f64>,
    cond: &CondTokens,
    sigma_r: f64,
    eps: &Array3<f64>,
) -> Result<f64> {
    let base = disc.logits(x, cond)?;
    let jittered = disc.logits(&(x + &eps.mapv(|e| sigma_r * e)), cond)?;
    let diff = &jittered - &base;
    Ok(diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
}

/// Fresh-noise wrapper over [`reg_penalty_with`].
pub fn reg_penalty(
    disc: &DiscriminatorState,
    x: &Array3<f64>,
    cond: &CondTokens,
    sigma_r: f64,
    rng: &mut Stream,
) -> Result<f64> {
    let eps = Array3::from_shape_fn(x.dim(), |_| rng.sample::<f64, _>(StandardNormal));
    reg_penalty_with(disc, x, cond, sigma_r, &eps)
}

/// Breakdown of one discriminator update.
#[derive(Debug, Clone, Copy, Default)]
pub struct DLossParts {
    pub core: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub total: f64,
}

/// Total discriminator loss `L_D + (gamma/3)(R1 + R2 + R3)` with frozen
/// perturbation noise; returns the named gradients of all discriminator
/// parameters. Every input batch is detached from the generator.
pub fn d_loss_total_with(
    disc: &DiscriminatorState,
    x_real: &Array3<f64>,
    x_fake: &Array3<f64>,
    x_ref: &Array3<f64>,
    cond_raw: &Array3<f64>,
    cfg: &StageConfig,
    eps: &[Array3<f64>; 3],
) -> Result<(DLossParts, Params)> {
    let mut tape = Tape::new();
    let pn = tape.bind(&disc.params, true);
    let a_ctx = build_context(cond_raw, &disc.cfg.context)?;
    let a = tape.constant(a_ctx.into_dyn());
    let shell = disc.shell();
    let cond = shell.adapt_node(&mut tape, &pn, a);

    let xr = tape.constant(x_real.clone().into_dyn());
    let xf = tape.constant(x_fake.clone().into_dyn());
    let d_real = disc.logit_node(&mut tape, &pn, xr, cond);
    let d_fake = disc.logit_node(&mut tape, &pn, xf, cond);
    let core = d_core_node(&mut tape, cfg.loss_kind, d_real, d_fake);

    let mut parts = DLossParts { core: tape.scalar(core), ..Default::default() };
    let total = if cfg.gamma > 0.0 {
        let mut pens = Vec::with_capacity(3);
        for (i, (x, base)) in [(x_real, Some(d_real)), (x_fake, Some(d_fake)), (x_ref, None)]
            .into_iter()
            .enumerate()
        {
            let base = match base {
                Some(b) => b,
                None => {
                    let xn = tape.constant(x.clone().into_dyn());
                    disc.logit_node(&mut tape, &pn, xn, cond)
                }
            };
            let jittered = x + &eps[i].mapv(|e| cfg.sigma_r * e);
            let xj = tape.constant(jittered.into_dyn());
            let d_j = disc.logit_node(&mut tape, &pn, xj, cond);
            let diff = tape.sub(d_j, base);
            let sq = tape.square(diff);
            pens.push(tape.mean_all(sq));
        }
        parts.r1 = tape.scalar(pens[0]);
        parts.r2 = tape.scalar(pens[1]);
        parts.r3 = tape.scalar(pens[2]);
        let p12 = tape.add(pens[0], pens[1]);
        let p = tape.add(p12, pens[2]);
        let scaled = tape.scale(p, cfg.gamma / 3.0);
        tape.add(core, scaled)
    } else {
        core
    };
    parts.total = tape.scalar(total);
    if !parts.total.is_finite() {
        return Err(Error::numeric("discriminator loss is not finite"));
    }
    let grads = tape.backward(total);
    let named = pn.grads(&disc.params, &grads);
    Ok((parts, named))
}

/// Breakdown of one generator update.
#[derive(Debug, Clone, Copy, Default)]
pub struct GLossParts {
    pub real: f64,
    pub self_compare: f64,
    pub total: f64,
}

/// Total generator loss `(1-lambda) L_G^real + lambda L_G^self` built on the
/// caller's tape so gradients flow into the student's final step. The
/// discriminator is bound as constants (no gradients into its parameters).
pub fn g_loss_total_node(
    tape: &mut Tape,
    disc: &DiscriminatorState,
    x_fake: NodeId,
    x_real: &Array3<f64>,
    x_ref: &Array3<f64>,
    cond_raw: &Array3<f64>,
    lambda: f64,
    kind: LossKind,
) -> Result<(GLossParts, NodeId)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda {lambda} outside [0, 1]")));
    }
    let pn = tape.bind(&disc.params, false);
    let a_ctx = build_context(cond_raw, &disc.cfg.context)?;
    let a = tape.constant(a_ctx.into_dyn());
    let shell = disc.shell();
    let cond = shell.adapt_node(tape, &pn, a);

    let d_fake = disc.logit_node(tape, &pn, x_fake, cond);
    let mut parts = GLossParts::default();
    let real_term = |tape: &mut Tape, parts: &mut GLossParts| -> NodeId {
        let xr = tape.constant(x_real.clone().into_dyn());
        let d_real = disc.logit_node(tape, &pn, xr, cond);
        let l = g_core_node(tape, kind, d_fake, d_real);
        parts.real = tape.scalar(l);
        l
    };
    let self_term = |tape: &mut Tape, parts: &mut GLossParts| -> NodeId {
        let xs = tape.constant(x_ref.clone().into_dyn());
        let d_ref = disc.logit_node(tape, &pn, xs, cond);
        let l = g_core_node(tape, kind, d_fake, d_ref);
        parts.self_compare = tape.scalar(l);
        l
    };
    let total = if lambda == 0.0 {
        real_term(tape, &mut parts)
    } else if lambda == 1.0 {
        self_term(tape, &mut parts)
    } else {
        let lr = real_term(tape, &mut parts);
        let ls = self_term(tape, &mut parts);
        let a = tape.scale(lr, 1.0 - lambda);
        let b = tape.scale(ls, lambda);
        tape.add(a, b)
    };
    parts.total = tape.scalar(total);
    if !parts.total.is_finite() {
        return Err(Error::numeric("generator loss is not finite"));
    }
    Ok((parts, total))
}

/// Per-step scalars streamed out of a stage run.
#[derive(Debug, Clone, Copy)]
pub struct StageLog {
    pub step: usize,
    pub d: DLossParts,
    pub g: GLossParts,
}

/// One trained stage.
#[derive(Debug, Clone)]
pub struct StageArtifact {
    pub generator: VelocityNet,
    pub k: usize,
    pub schedule: Schedule,
}

/// Output of the progressive loop: one artifact per stage plus the final
/// discriminator.
#[derive(Debug, Clone)]
pub struct PadOutput {
    pub stages: Vec<StageArtifact>,
    pub disc: DiscriminatorState,
}

/// Run one adversarial phase: per training step, build the dynamic schedule,
/// sample the student with final-step gradients, draw the frozen 4-step
/// reference, update the discriminator, then update the generator.
pub fn run_stage(
    mut gen: VelocityNet,
    mut disc: DiscriminatorState,
    refgen: &RefGenerator,
    data: &Dataset,
    cfg: &StageConfig,
    rng: &mut Stream,
    mut on_step: impl FnMut(&StageLog),
) -> Result<TrainEnd<(VelocityNet, DiscriminatorState)>> {
    cfg.validate()?;
    let target = cfg.target()?;
    let mut opt_gen = Adam::new(cfg.lr_gen);
    let mut opt_disc = Adam::new(cfg.lr_disc);
    let n = data.samples.len();
    let (f, d) = (gen.dims.frames, gen.dims.feature_dim);

    for step in 0..cfg.steps {
        let sched = dynamic_sample(&target, cfg.prev_final_t, step, cfg.warmup, rng)?;
        let idx = batch_indices(rng, n, cfg.batch_size);
        let x_real = frames_batch(&data.samples, &idx);
        let cond = cond_batch(&data.samples, &idx);
        let z0 = Array3::from_shape_fn((cfg.batch_size, f, d), |_| rng.sample::<f64, _>(StandardNormal));
        let eps: [Array3<f64>; 3] = std::array::from_fn(|_| {
            Array3::from_shape_fn((cfg.batch_size, f, d), |_| rng.sample::<f64, _>(StandardNormal))
        });

        let gen_before = gen.params.clone();
        let disc_before = disc.params.clone();
        let diverge = |gen: VelocityNet, disc: DiscriminatorState, step: usize| TrainEnd::Diverged {
            state: (gen, disc),
            step,
        };

        // Student sample with gradients through the final step only.
        let mut tape = Tape::new();
        let pn = tape.bind(&gen.params, true);
        let a_ctx = build_context(&cond, &gen.cfg.context)?;
        let a = tape.constant(a_ctx.into_dyn());
        let gen_cond = gen.adapt_node(&mut tape, &pn, a);
        let x_fake_node = match sample_final_step_grad(&mut tape, &gen, &pn, &sched, &z0, gen_cond) {
            Ok(x) => x,
            Err(Error::Numeric(_)) => return Ok(diverge(gen, disc, step)),
            Err(e) => return Err(e),
        };
        let x_fake: Array3<f64> = tape.value(x_fake_node).clone().into_dimensionality().expect("3-D");

        let x_ref = match gen_reference(refgen, &z0, &cond) {
            Ok(x) => x,
            Err(Error::Numeric(_)) => return Ok(diverge(gen, disc, step)),
            Err(e) => return Err(e),
        };

        // Discriminator update on detached batches.
        let d_parts = match d_loss_total_with(&disc, &x_real, &x_fake, &x_ref, &cond, cfg, &eps) {
            Ok((parts, grads)) => {
                opt_disc.update(&mut disc.params, &grads)?;
                if !disc.params.all_finite() {
                    disc.params = disc_before;
                    return Ok(diverge(gen, disc, step));
                }
                parts
            }
            Err(Error::Numeric(_)) => return Ok(diverge(gen, disc, step)),
            Err(e) => return Err(e),
        };

        // Generator update against the refreshed discriminator.
        let g_parts = match g_loss_total_node(
            &mut tape, &disc, x_fake_node, &x_real, &x_ref, &cond, cfg.lambda, cfg.loss_kind,
        ) {
            Ok((parts, total)) => {
                let grads = tape.backward(total);
                let named = pn.grads(&gen.params, &grads);
                opt_gen.update(&mut gen.params, &named)?;
                if !gen.params.all_finite() {
                    gen.params = gen_before;
                    return Ok(diverge(gen, disc, step));
                }
                parts
            }
            Err(Error::Numeric(_)) => return Ok(diverge(gen, disc, step)),
            Err(e) => return Err(e),
        };

        on_step(&StageLog { step, d: d_parts, g: g_parts });
    }
    Ok(TrainEnd::Completed((gen, disc)))
}

/// Chain the configured stages. The discriminator backbone initializes from
/// the stage-0 generator at the first stage and carries across stages; the
/// reference generator stays frozen throughout.
pub fn run_progressive(
    init: &VelocityNet,
    init_schedule: &Schedule,
    data: &Dataset,
    cfgs: &[StageConfig],
    seed: u64,
    mut on_step: impl FnMut(usize, &StageLog),
) -> Result<TrainEnd<PadOutput>> {
    if cfgs.is_empty() {
        return Err(Error::config("at least one stage config required"));
    }
    for cfg in cfgs {
        cfg.validate()?;
    }
    let refgen = RefGenerator::new(init.clone(), init_schedule.clone());
    let mut disc = DiscriminatorState::init_from(init, &mut stream(seed, labels::INIT));
    let mut gen = init.clone();
    let mut stages = Vec::with_capacity(cfgs.len());

    for cfg in cfgs {
        let mut rng = stream(seed, labels::PAD_STAGE_BASE + cfg.k as u64);
        let k = cfg.k;
        match run_stage(gen, disc, &refgen, data, cfg, &mut rng, |log| on_step(k, log))? {
            TrainEnd::Completed((g, d)) => {
                stages.push(StageArtifact { generator: g.clone(), k: cfg.k, schedule: cfg.target()? });
                gen = g;
                disc = d;
            }
            TrainEnd::Diverged { state: (g, d), step } => {
                stages.push(StageArtifact { generator: g.clone(), k: cfg.k, schedule: cfg.target()? });
                return Ok(TrainEnd::Diverged { state: PadOutput { stages, disc: d }, step });
            }
        }
    }
    Ok(TrainEnd::Completed(PadOutput { stages, disc }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condnet::ContextConfig;
    use crate::rng::stream;
    use crate::toydata::{generate, DataSpec};

    const LN2: f64 = std::f64::consts::LN_2;

    fn mini_net(seed: u64) -> VelocityNet {
        let cfg = NetConfig { hidden: 8, blocks: 1, heads: 2, time_embed_dim: 8, context: ContextConfig { k: 3 } };
        let dims = ModelDims { frames: 2, feature_dim: 2, cond_len: 8, cond_channels: 1 };
        VelocityNet::init(cfg, dims, &mut stream(seed, 0)).unwrap()
    }

    fn mini_data(count: usize) -> Dataset {
        generate(&DataSpec {
            frames: 2,
            feature_dim: 2,
            cond_len: 8,
            cond_channels: 1,
            count,
            seed: 21,
            noise_sigma: 0.05,
        })
        .unwrap()
    }

    fn mini_stage() -> StageConfig {
        StageConfig { batch_size: 3, steps: 2, warmup: 1, ..StageConfig::canonical(1).unwrap() }
    }

    #[test]
    fn canonical_schedules() {
        assert_eq!(StageConfig::canonical(1).unwrap().target_schedule, vec![1.0, 0.75, 0.5]);
        assert_eq!(StageConfig::canonical(2).unwrap().target_schedule, vec![1.0, 0.75]);
        assert_eq!(StageConfig::canonical(3).unwrap().target_schedule, vec![1.0]);
        assert_eq!(StageConfig::canonical(1).unwrap().prev_final_t, 0.25);
        assert_eq!(StageConfig::canonical(2).unwrap().prev_final_t, 0.5);
        assert_eq!(StageConfig::canonical(3).unwrap().prev_final_t, 0.75);
        assert_eq!(StageConfig::canonical(1).unwrap().warmup, 500);
        assert!(StageConfig::canonical(0).is_err());
        assert!(StageConfig::canonical(4).is_err());
    }

    #[test]
    fn dynamic_sample_warmup_and_fixed() {
        let target = Schedule::new(vec![1.0, 0.75, 0.5]).unwrap();
        let mut rng = stream(1, 1);
        for s in 0..200 {
            let sched = dynamic_sample(&target, 0.25, s, 500, &mut rng).unwrap();
            assert_eq!(&sched.steps()[..2], &[1.0, 0.75]);
            let last = sched.last();
            assert!((0.25..0.5).contains(&last), "warm-up draw {last}");
        }
        let fixed = dynamic_sample(&target, 0.25, 500, 500, &mut rng).unwrap();
        assert_eq!(fixed.steps(), target.steps());
    }

    #[test]
    fn dynamic_sample_uniformity() {
        // Stage 2: draws in [0.5, 0.75) with ECDF close to uniform.
        let target = Schedule::new(vec![1.0, 0.75]).unwrap();
        let mut rng = stream(2, 2);
        let n = 10_000;
        let mut draws: Vec<f64> = (0..n)
            .map(|s| dynamic_sample(&target, 0.5, s % 499, 500, &mut rng).unwrap().last())
            .collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(draws[0] >= 0.5);
        assert!(*draws.last().unwrap() <= 0.75);
        let mut worst = 0.0f64;
        for (i, &v) in draws.iter().enumerate() {
            let cdf = (v - 0.5) / 0.25;
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            worst = worst.max((cdf - emp_lo).abs()).max((cdf - emp_hi).abs());
        }
        assert!(worst < 0.02, "ECDF deviation {worst}");
    }

    #[test]
    fn dynamic_sample_rejects_bad_prev() {
        let target = Schedule::new(vec![1.0, 0.75, 0.5]).unwrap();
        let mut rng = stream(3, 3);
        assert!(matches!(
            dynamic_sample(&target, 0.5, 0, 500, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn adv_loss_unit_values() {
        let (d, g) = adv_losses(LossKind::R3gan, 0.7, 0.7);
        assert!((d - LN2).abs() < 1e-12);
        assert!((g - LN2).abs() < 1e-12);
        let (d, _) = adv_losses(LossKind::Hinge, 2.0, -2.0);
        assert_eq!(d, 0.0);
        let (d, _) = adv_losses(LossKind::NonSaturating, 0.0, 0.0);
        assert!((d - 2.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn r3gan_symmetry_and_lower_bound() {
        // L_D(dr, df) equals L_G with swapped logits; L_D + L_G >= 2 ln 2
        // with equality iff the logits agree.
        for dr in [-3.0, -0.5, 0.0, 1.0, 2.5] {
            for df in [-2.0, 0.0, 0.4, 3.0] {
                let (l_d, l_g) = adv_losses(LossKind::R3gan, dr, df);
                let (l_d_swap, _) = adv_losses(LossKind::R3gan, df, dr);
                assert!((l_g - l_d_swap).abs() < 1e-12);
                assert!(l_d + l_g >= 2.0 * LN2 - 1e-12);
                if (dr - df).abs() > 1e-9 {
                    assert!(l_d + l_g > 2.0 * LN2);
                }
            }
        }
    }

    #[test]
    fn generator_losses_decrease_in_d_fake() {
        for kind in [LossKind::R3gan, LossKind::NonSaturating, LossKind::Hinge] {
            for df in [-2.0, -0.3, 0.0, 0.9, 2.0] {
                let h = 1e-5;
                let (_, lo) = adv_losses(kind, 0.2, df - h);
                let (_, hi) = adv_losses(kind, 0.2, df + h);
                assert!(hi < lo, "{kind}: not decreasing at {df}");
            }
        }
    }

    #[test]
    fn fresh_head_logit_is_zero() {
        let net = mini_net(4);
        let disc = DiscriminatorState::init_from(&net, &mut stream(5, 5));
        let data = mini_data(4);
        let cond_raw = cond_batch(&data.samples, &[0, 1]);
        let tokens = disc.cond_tokens(&cond_raw).unwrap();
        let mut rng = stream(6, 6);
        let x = Array3::from_shape_fn((2, 2, 2), |_| rng.gen::<f64>());
        let logits = disc.logits(&x, &tokens).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_becomes_sensitive_after_update() {
        let net = mini_net(7);
        let mut disc = DiscriminatorState::init_from(&net, &mut stream(8, 8));
        let data = mini_data(4);
        let cond_raw = cond_batch(&data.samples, &[0, 1]);
        // One nonzero head update.
        disc.params.get_mut("dhead.w2").unwrap().fill(0.05);
        let tokens = disc.cond_tokens(&cond_raw).unwrap();
        let mut rng = stream(9, 9);
        let x = Array3::from_shape_fn((2, 2, 2), |_| rng.gen::<f64>());
        let y = &x + 0.5;
        let a = disc.logits(&x, &tokens).unwrap();
        let b = disc.logits(&y, &tokens).unwrap();
        assert!(a.iter().zip(b.iter()).any(|(p, q)| (p - q).abs() > 1e-9));
    }

    #[test]
    fn disc_logit_input_gradient_matches_fd() {
        let net = mini_net(10);
        let mut disc = DiscriminatorState::init_from(&net, &mut stream(11, 11));
        // Nonzero head so the logit depends on the input.
        let mut rng = stream(12, 12);
        for v in disc.params.get_mut("dhead.w2").unwrap().iter_mut() {
            *v = rng.gen::<f64>() - 0.5;
        }
        let data = mini_data(4);
        let cond_raw = cond_batch(&data.samples, &[0]);
        let tokens = disc.cond_tokens(&cond_raw).unwrap();
        let x = Array3::from_shape_fn((1, 2, 2), |_| rng.gen::<f64>());

        let mut tape = Tape::new();
        let pn = tape.bind(&disc.params, false);
        let xn = tape.param(x.clone().into_dyn());
        let cn = tape.constant(tokens.tokens.clone().into_dyn());
        let logit = disc.logit_node(&mut tape, &pn, xn, cn);
        let root = tape.mean_all(logit);
        let grads = tape.backward(root);
        let g = grads.get(xn).unwrap().clone();

        let eval = |x: &Array3<f64>| disc.logits(x, &tokens).unwrap()[0];
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.as_slice_mut().unwrap()[i] += eps;
            let mut minus = x.clone();
            minus.as_slice_mut().unwrap()[i] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = g.as_slice().unwrap()[i];
            assert!((fd - a).abs() / fd.abs().max(a.abs()).max(1e-8) < 1e-4, "{a} vs {fd}");
        }
    }

    #[test]
    fn penalty_zero_cases() {
        let net = mini_net(13);
        let disc = DiscriminatorState::init_from(&net, &mut stream(14, 14));
        let data = mini_data(4);
        let cond_raw = cond_batch(&data.samples, &[0, 1]);
        let tokens = disc.cond_tokens(&cond_raw).unwrap();
        let mut rng = stream(15, 15);
        let x = Array3::from_shape_fn((2, 2, 2), |_| rng.gen::<f64>());
        // sigma_r = 0: exactly zero.
        let p = reg_penalty(&disc, &x, &tokens, 0.0, &mut rng).unwrap();
        assert_eq!(p, 0.0);
        // Zero-initialized head: constant logit, zero for any sigma.
        let p = reg_penalty(&disc, &x, &tokens, 0.5, &mut rng).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn penalty_matches_linear_closed_form() {
        // For a linear logit D(x) = w . x the penalty is (sigma w . eps)^2
        // with expectation sigma^2 ||w||^2; compare Monte Carlo to the
        // closed form within 3 standard errors.
        let mut rng = stream(16, 16);
        let w = Array3::from_shape_fn((1, 2, 2), |_| rng.gen::<f64>() - 0.5);
        let sigma = 0.1;
        let d = |x: &Array3<f64>| (x * &w).sum();
        let n = 20_000;
        let mut vals = Vec::with_capacity(n);
        let x = Array3::from_shape_fn((1, 2, 2), |_| rng.gen::<f64>());
        for _ in 0..n {
            let eps = Array3::from_shape_fn((1, 2, 2), |_| rng.sample::<f64, _>(StandardNormal));
            let diff = d(&(&x + &eps.mapv(|e| sigma * e))) - d(&x);
            vals.push(diff * diff);
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let se = (var / n as f64).sqrt();
        let closed = sigma * sigma * (&w * &w).sum();
        assert!((mean - closed).abs() < 3.0 * se, "{mean} vs {closed} (se {se})");
    }

    #[test]
    fn d_loss_gamma_zero_equals_core_and_zero_head_is_ln2() {
        let net = mini_net(17);
        let disc = DiscriminatorState::init_from(&net, &mut stream(18, 18));
        let data = mini_data(8);
        let cond_raw = cond_batch(&data.samples, &[0, 1, 2]);
        let mut rng = stream(19, 19);
        let x_real = Array3::from_shape_fn((3, 2, 2), |_| rng.gen::<f64>());
        let x_fake = Array3::from_shape_fn((3, 2, 2), |_| rng.gen::<f64>());
        let x_ref = Array3::from_shape_fn((3, 2, 2), |_| rng.gen::<f64>());
        let eps: [Array3<f64>; 3] =
            std::array::from_fn(|_| Array3::from_shape_fn((3, 2, 2), |_| rng.sample::<f64, _>(StandardNormal)));

        let mut cfg = mini_stage();
        cfg.gamma = 0.0;
        let (parts, _) = d_loss_total_with(&disc, &x_real, &x_fake, &x_ref, &cond_raw, &cfg, &eps).unwrap();
        assert_eq!(parts.total, parts.core);

        // Zero-init head, r3gan, default gamma: core = ln 2, penalties = 0.
        let cfg = mini_stage();
        let (parts, _) = d_loss_total_with(&disc, &x_real, &x_fake, &x_ref, &cond_raw, &cfg, &eps).unwrap();
        assert!((parts.core - LN2).abs() < 1e-12);
        assert_eq!(parts.r1, 0.0);
        assert_eq!(parts.r2, 0.0);
        assert_eq!(parts.r3, 0.0);
        assert!((parts.total - LN2).abs() < 1e-12);
    }

    #[test]
    fn g_loss_lambda_endpoints() {
        let net = mini_net(20);
        let mut disc = DiscriminatorState::init_from(&net, &mut stream(21, 21));
        let mut rng = stream(22, 22);
        for v in disc.params.get_mut("dhead.w2").unwrap().iter_mut() {
            *v = rng.gen::<f64>() - 0.5;
        }
        let data = mini_data(8);
        let cond_raw = cond_batch(&data.samples, &[0, 1, 2]);
        let x_real = Array3::from_shape_fn((3, 2, 2), |_| rng.gen::<f64>());
        let x_ref = Array3::from_shape_fn((3, 2, 2), |_| rng.gen::<f64>());
        let x_fake = Array3::from_shape_fn((3, 2, 2), |_| rng.gen::<f64>());

        // lambda = 0: bitwise equal to the pure real term.
        let mut tape = Tape::new();
        let xf = tape.constant(x_fake.clone().into_dyn());
        let (parts, total) =
            g_loss_total_node(&mut tape, &disc, xf, &x_real, &x_ref, &cond_raw, 0.0, LossKind::R3gan).unwrap();
        assert_eq!(tape.scalar(total).to_bits(), parts.real.to_bits());

        // lambda = 1 with x_ref == x_fake: D(fake) == D(ref), so ln 2.
        let mut tape = Tape::new();
        let xf = tape.constant(x_fake.clone().into_dyn());
        let (_, total) =
            g_loss_total_node(&mut tape, &disc, xf, &x_real, &x_fake, &cond_raw, 1.0, LossKind::R3gan).unwrap();
        assert!((tape.scalar(total) - LN2).abs() < 1e-12);

        // Invalid lambda rejected.
        let mut tape = Tape::new();
        let xf = tape.constant(x_fake.clone().into_dyn());
        assert!(g_loss_total_node(&mut tape, &disc, xf, &x_real, &x_ref, &cond_raw, 1.5, LossKind::R3gan).is_err());
    }

    #[test]
    fn d_loss_gradient_matches_finite_differences() {
        let net = mini_net(23);
        let mut disc = DiscriminatorState::init_from(&net, &mut stream(24, 24));
        let mut rng = stream(25, 25);
        for v in disc.params.get_mut("dhead.w2").unwrap().iter_mut() {
            *v = rng.gen::<f64>() - 0.5;
        }
        let data = mini_data(8);
        let cond_raw = cond_batch(&data.samples, &[0, 1]);
        let x_real = Array3::from_shape_fn((2, 2, 2), |_| rng.gen::<f64>());
        let x_fake = Array3::from_shape_fn((2, 2, 2), |_| rng.gen::<f64>());
        let x_ref = Array3::from_shape_fn((2, 2, 2), |_| rng.gen::<f64>());
        let eps: [Array3<f64>; 3] =
            std::array::from_fn(|_| Array3::from_shape_fn((2, 2, 2), |_| rng.sample::<f64, _>(StandardNormal)));
        let cfg = StageConfig { gamma: 2.0, sigma_r: 0.3, ..mini_stage() };

        let (_, grads) = d_loss_total_with(&disc, &x_real, &x_fake, &x_ref, &cond_raw, &cfg, &eps).unwrap();

        let eval = |params: &Params| -> f64 {
            let d2 = DiscriminatorState { cfg: disc.cfg, dims: disc.dims, params: params.clone() };
            d_loss_total_with(&d2, &x_real, &x_fake, &x_ref, &cond_raw, &cfg, &eps).unwrap().0.total
        };
        let mut dot = 0.0;
        let mut plus = disc.params.clone();
        let mut minus = disc.params.clone();
        let epsfd = 1e-6;
        for (name, value) in disc.params.iter() {
            let d = ndarray::ArrayD::from_shape_fn(value.raw_dim(), |_| rng.gen::<f64>() * 2.0 - 1.0);
            dot += (&d * grads.get(name).unwrap()).sum();
            *plus.get_mut(name).unwrap() += &(&d * epsfd);
            *minus.get_mut(name).unwrap() -= &(&d * epsfd);
        }
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * epsfd);
        assert!((fd - dot).abs() / fd.abs().max(dot.abs()).max(1e-8) < 1e-4, "{dot} vs {fd}");
    }

    #[test]
    fn updates_do_not_cross_parameter_sets() {
        let net = mini_net(26);
        let data = mini_data(16);
        let refgen = RefGenerator::new(net.clone(), Schedule::new(vec![1.0, 0.75, 0.5, 0.25]).unwrap());
        let disc = DiscriminatorState::init_from(&net, &mut stream(27, 27));
        let cfg = mini_stage();
        let mut rng = stream(28, 28);
        let ref_before = refgen.net.params.clone();
        let out = run_stage(net.clone(), disc, &refgen, &data, &cfg, &mut rng, |_| {}).unwrap();
        let (gen_after, disc_after) = out.into_state();
        // Backbone subset of the discriminator evolved independently.
        assert!(gen_after.params.all_finite());
        assert!(disc_after.params.all_finite());
        // The frozen reference never changes.
        assert_eq!(refgen.net.params, ref_before);
        // Discriminator kept its extra head names, generator kept its own.
        assert_eq!(disc_after.params.len(), gen_after.params.len() + 4);
    }

    #[test]
    fn zero_steps_leaves_generator_unchanged() {
        let net = mini_net(29);
        let data = mini_data(8);
        let refgen = RefGenerator::new(net.clone(), Schedule::new(vec![1.0, 0.75, 0.5, 0.25]).unwrap());
        let disc = DiscriminatorState::init_from(&net, &mut stream(30, 30));
        let cfg = StageConfig { steps: 0, ..mini_stage() };
        let mut rng = stream(31, 31);
        let out = run_stage(net.clone(), disc, &refgen, &data, &cfg, &mut rng, |_| {}).unwrap();
        assert_eq!(out.state().0.params, net.params);
    }

    #[test]
    fn gen_reference_zero_velocity_returns_z0_and_is_deterministic() {
        let mut net = mini_net(32);
        net.params.get_mut("head.w").unwrap().fill(0.0);
        net.params.get_mut("head.b").unwrap().fill(0.0);
        let refgen = RefGenerator::new(net, Schedule::new(vec![1.0, 0.75, 0.5, 0.25]).unwrap());
        let data = mini_data(4);
        let cond = cond_batch(&data.samples, &[0, 1]);
        let mut rng = stream(33, 33);
        let z0 = Array3::from_shape_fn((2, 2, 2), |_| rng.gen::<f64>());
        let a = gen_reference(&refgen, &z0, &cond).unwrap();
        assert_eq!(a, z0);
        let b = gen_reference(&refgen, &z0, &cond).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn progressive_records_stage_schedules_and_single_nfe() {
        let net = mini_net(34);
        let data = mini_data(16);
        let cfgs: Vec<StageConfig> = (1..=3)
            .map(|k| StageConfig { steps: 1, batch_size: 2, ..StageConfig::canonical(k).unwrap() })
            .collect();
        let init_schedule = Schedule::new(vec![1.0, 0.75, 0.5, 0.25]).unwrap();
        let out = run_progressive(&net, &init_schedule, &data, &cfgs, 9, |_, _| {})
            .unwrap()
            .into_result()
            .unwrap();
        assert_eq!(out.stages.len(), 3);
        assert_eq!(out.stages[0].schedule.steps(), &[1.0, 0.75, 0.5]);
        assert_eq!(out.stages[1].schedule.steps(), &[1.0, 0.75]);
        assert_eq!(out.stages[2].schedule.steps(), &[1.0]);

        // The final artifact samples with exactly one evaluation.
        let last = &out.stages[2];
        let tokens = last.generator.cond_tokens(&cond_batch(&data.samples, &[0])).unwrap();
        let mut counter = NfeCounter::new();
        let z0 = Array3::zeros((1, 2, 2));
        sample(&last.generator, &last.schedule, &z0, &tokens, None, &mut counter).unwrap();
        assert_eq!(counter.count(), 1);
    }
}
