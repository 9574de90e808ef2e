//! Rectified-flow core: forward diffusion, timestep schedules, the Euler
//! sampler (optionally guided), the final-step-gradient sampler, the
//! flow-matching loss and evaluation counting.
//!
//! The path is `z_t = (1-t) x + t eps` with velocity target `eps - x`, so the
//! Euler update `z <- z - v (t_i - t_{i+1})` integrates from pure noise at
//! t = 1 down to the implicit terminal timestep 0.

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condnet::{CondTokens, VelocityField, VelocityNet};
use crate::error::{Error, Result, TrainEnd};
use crate::params::{Adam, ParamNodes};
use crate::rng::{labels, stream, Stream};
use crate::tape::{NodeId, Tape};
use crate::toydata::{cond_batch, frames_batch, Dataset};

/// A point on the noise path; 1 is pure noise, 0 is clean.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Timestep(f64);

impl Timestep {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::config(format!("timestep {t} outside [0, 1]")));
        }
        Ok(Timestep(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Strictly decreasing timesteps in (0, 1]; the terminal timestep 0 is
/// implicit and never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Schedule {
    steps: Vec<f64>,
}

impl Schedule {
    pub fn new(steps: Vec<f64>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::config("schedule must be nonempty"));
        }
        for &t in &steps {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::config(format!("schedule entry {t} outside (0, 1]")));
            }
        }
        for w in steps.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::config(format!(
                    "schedule must be strictly decreasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Schedule { steps })
    }

    /// `n` equispaced timesteps `1 - j/n`, ending at the implicit 0.
    pub fn uniform(n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::config("schedule length must be >= 1"));
        }
        Schedule::new((0..n).map(|j| 1.0 - j as f64 / n as f64).collect())
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn first(&self) -> f64 {
        self.steps[0]
    }

    pub fn last(&self) -> f64 {
        *self.steps.last().unwrap()
    }

    /// Replace the final entry; used by dynamic timestep sampling.
    pub fn with_last(&self, t: f64) -> Result<Self> {
        let mut steps = self.steps.clone();
        *steps.last_mut().unwrap() = t;
        Schedule::new(steps)
    }
}

impl TryFrom<Vec<f64>> for Schedule {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Schedule::new(v)
    }
}

impl From<Schedule> for Vec<f64> {
    fn from(s: Schedule) -> Vec<f64> {
        s.steps
    }
}

/// Counts model forward evaluations inside one sampling call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NfeCounter {
    evals: u64,
}

impl NfeCounter {
    pub fn new() -> Self {
        NfeCounter::default()
    }

    pub fn tick(&mut self) {
        self.evals += 1;
    }

    pub fn count(&self) -> u64 {
        self.evals
    }
}

/// `(1-t) x + t eps` with a single timestep for the whole batch.
pub fn forward_diffuse(x: &Array3<f64>, t: Timestep, eps: &Array3<f64>) -> Result<Array3<f64>> {
    if x.dim() != eps.dim() {
        return Err(Error::shape(format!(
            "x has shape {:?}, eps has shape {:?}",
            x.dim(),
            eps.dim()
        )));
    }
    let t = t.value();
    Ok(x.mapv(|e| (1.0 - t) * e) + &eps.mapv(|e| t * e))
}

/// Per-sample variant used by training losses.
pub fn forward_diffuse_per_sample(x: &Array3<f64>, ts: &[f64], eps: &Array3<f64>) -> Result<Array3<f64>> {
    if x.dim() != eps.dim() {
        return Err(Error::shape("x/eps shape mismatch".to_string()));
    }
    if ts.len() != x.dim().0 {
        return Err(Error::shape("one timestep per sample required".to_string()));
    }
    let mut out = Array3::<f64>::zeros(x.dim());
    for (b, &t) in ts.iter().enumerate() {
        let xb = x.index_axis(ndarray::Axis(0), b);
        let eb = eps.index_axis(ndarray::Axis(0), b);
        let mut ob = out.index_axis_mut(ndarray::Axis(0), b);
        ndarray::Zip::from(&mut ob).and(&xb).and(&eb).for_each(|o, &x, &e| {
            *o = (1.0 - t) * x + t * e;
        });
    }
    Ok(out)
}

/// Frozen randomness of one flow-matching loss evaluation.
#[derive(Debug, Clone)]
pub struct FmDraws {
    /// Per-sample t in U(0.001, 1).
    pub ts: Vec<f64>,
    pub eps: Array3<f64>,
}

pub fn fm_draws(rng: &mut Stream, batch: usize, frames: usize, dim: usize) -> FmDraws {
    let ts = (0..batch).map(|_| 0.001 + 0.999 * rng.gen::<f64>()).collect();
    let eps = Array3::from_shape_fn((batch, frames, dim), |_| rng.sample::<f64, _>(StandardNormal));
    FmDraws { ts, eps }
}

/// Flow-matching regression with frozen draws:
/// `mean ||v(z_t, t, c) - (eps - x)||^2 / (F D)`.
pub fn fm_loss_with(
    tape: &mut Tape,
    model: &dyn VelocityField,
    pn: &ParamNodes,
    x: &Array3<f64>,
    cond: NodeId,
    draws: &FmDraws,
) -> Result<NodeId> {
    let z = forward_diffuse_per_sample(x, &draws.ts, &draws.eps)?;
    let zc = tape.constant(z.into_dyn());
    let v = model.velocity_node(tape, pn, zc, &draws.ts, cond);
    let target = tape.constant((&draws.eps - x).into_dyn());
    let diff = tape.sub(v, target);
    let sq = tape.square(diff);
    let loss = tape.mean_all(sq);
    if !tape.scalar(loss).is_finite() {
        return Err(Error::numeric("flow-matching loss is not finite"));
    }
    Ok(loss)
}

/// Flow-matching loss with fresh draws from `rng`.
pub fn fm_loss(
    tape: &mut Tape,
    model: &dyn VelocityField,
    pn: &ParamNodes,
    x: &Array3<f64>,
    cond: NodeId,
    rng: &mut Stream,
) -> Result<NodeId> {
    let (b, f, d) = x.dim();
    let draws = fm_draws(rng, b, f, d);
    fm_loss_with(tape, model, pn, x, cond, &draws)
}

fn euler_step(z: &Array3<f64>, v: &Array3<f64>, dt: f64) -> Array3<f64> {
    z - &v.mapv(|e| e * dt)
}

/// Euler sampler over a schedule, with optional classifier-free guidance
/// `v = v_uncond + w (v_cond - v_uncond)` costing two evaluations per step.
/// Unguided sampling is a single conditional evaluation per step.
pub fn sample(
    model: &dyn VelocityField,
    schedule: &Schedule,
    z0: &Array3<f64>,
    cond: &CondTokens,
    guidance: Option<f64>,
    counter: &mut NfeCounter,
) -> Result<Array3<f64>> {
    if !z0.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite z0"));
    }
    let (bsz, frames, _) = z0.dim();
    let zero_cond = CondTokens::zeros(bsz, cond.tokens.dim().1, cond.tokens.dim().2);
    let mut z = z0.clone();
    let n = schedule.len();
    for (i, &t) in schedule.steps().iter().enumerate() {
        let t_next = if i + 1 < n { schedule.steps()[i + 1] } else { 0.0 };
        let ts = vec![t; bsz];
        let v_c = model.velocity(&z, &ts, cond);
        counter.tick();
        let v = match guidance {
            Some(w) => {
                let v_u = model.velocity(&z, &ts, &zero_cond);
                counter.tick();
                &v_u + &(&v_c - &v_u).mapv(|e| w * e)
            }
            None => v_c,
        };
        z = euler_step(&z, &v, t - t_next);
        if !z.iter().all(|e| e.is_finite()) {
            return Err(Error::numeric(format!("sampler diverged at t = {t}")));
        }
        debug_assert_eq!(z.dim().1, frames);
    }
    Ok(z)
}

/// Euler sampler whose output carries gradients only through the final step:
/// earlier velocity evaluations are executed forward but feed the tape as
/// constants, so the gradient of the output with respect to model parameters
/// is exactly the gradient of the last update term `-v(z, t_last) * t_last`.
/// Forward values are bit-identical to [`sample`] without guidance.
pub fn sample_final_step_grad(
    tape: &mut Tape,
    model: &dyn VelocityField,
    pn: &ParamNodes,
    schedule: &Schedule,
    z0: &Array3<f64>,
    cond: NodeId,
) -> Result<NodeId> {
    if !z0.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite z0"));
    }
    let bsz = z0.dim().0;
    let cond_tokens = CondTokens {
        tokens: tape.value(cond).clone().into_dimensionality().expect("cond tokens 3-D"),
    };
    let mut z = z0.clone();
    let n = schedule.len();
    for (i, &t) in schedule.steps().iter().enumerate().take(n - 1) {
        let t_next = schedule.steps()[i + 1];
        let ts = vec![t; bsz];
        let v = model.velocity(&z, &ts, &cond_tokens);
        z = euler_step(&z, &v, t - t_next);
        if !z.iter().all(|e| e.is_finite()) {
            return Err(Error::numeric(format!("sampler diverged at t = {t}")));
        }
    }
    let t_last = schedule.last();
    let zc = tape.constant(z.into_dyn());
    let v = model.velocity_node(tape, pn, zc, &vec![t_last; bsz], cond);
    let update = tape.scale(v, t_last);
    let out = tape.sub(zc, update);
    if !tape.value(out).iter().all(|e| e.is_finite()) {
        return Err(Error::numeric("final step produced non-finite output"));
    }
    Ok(out)
}

/// Teacher-phase settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    #[serde(default = "default_teacher_steps")]
    pub steps: usize,
    #[serde(default = "default_teacher_lr")]
    pub lr: f64,
    /// Guidance scale used when sampling from the trained teacher.
    #[serde(default = "default_guidance")]
    pub guidance_w: f64,
    /// Probability of replacing a sample's condition tokens with zeros.
    #[serde(default = "default_cond_dropout")]
    pub cond_dropout: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Evaluation schedule length for the teacher (unguided count).
    #[serde(default = "default_teacher_sample_steps")]
    pub sample_steps: usize,
}

fn default_teacher_steps() -> usize {
    3000
}
fn default_teacher_lr() -> f64 {
    3e-4
}
fn default_guidance() -> f64 {
    2.0
}
fn default_cond_dropout() -> f64 {
    0.1
}
fn default_batch() -> usize {
    16
}
fn default_teacher_sample_steps() -> usize {
    50
}

impl Default for TeacherConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("teacher batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::config("cond_dropout must lie in [0, 1]"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("teacher lr must be positive"));
        }
        if self.sample_steps == 0 {
            return Err(Error::config("teacher sample_steps must be >= 1"));
        }
        Ok(())
    }
}

/// Draw a batch of dataset indices.
pub fn batch_indices(rng: &mut Stream, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

/// Train a velocity network with the flow-matching objective and per-sample
/// condition dropout. Initialization and batch order derive from `seed`.
pub fn train_teacher(net: VelocityNet, data: &Dataset, cfg: &TeacherConfig, seed: u64) -> Result<TrainEnd<VelocityNet>> {
    cfg.validate()?;
    let mut net = net;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = stream(seed, labels::TEACHER);
    let n = data.samples.len();
    for step in 0..cfg.steps {
        let idx = batch_indices(&mut rng, n, cfg.batch_size);
        let x = frames_batch(&data.samples, &idx);
        let cond = cond_batch(&data.samples, &idx);
        let a_ctx = crate::condnet::build_context(&cond, &net.cfg.context)?;
        let mask =
            ndarray::Array1::from_iter((0..cfg.batch_size).map(|_| {
                if rng.gen::<f64>() < cfg.cond_dropout {
                    0.0
                } else {
                    1.0
                }
            }));
        let draws = fm_draws(&mut rng, cfg.batch_size, net.dims.frames, net.dims.feature_dim);

        let before = net.params.clone();
        let mut tape = Tape::new();
        let pn = tape.bind(&net.params, true);
        let a = tape.constant(a_ctx.into_dyn());
        let tok = net.adapt_node(&mut tape, &pn, a);
        let tok = tape.scale_batch(tok, mask);
        let loss = match fm_loss_with(&mut tape, &net, &pn, &x, tok, &draws) {
            Ok(l) => l,
            Err(Error::Numeric(_)) => return Ok(TrainEnd::Diverged { state: VelocityNet { params: before, ..net }, step }),
            Err(e) => return Err(e),
        };
        let grads = tape.backward(loss);
        let named = pn.grads(&net.params, &grads);
        opt.update(&mut net.params, &named)?;
        if !net.params.all_finite() {
            net.params = before;
            return Ok(TrainEnd::Diverged { state: net, step });
        }
    }
    Ok(TrainEnd::Completed(net))
}
