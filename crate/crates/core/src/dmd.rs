//! Stage 1: distribution-matching distillation of the teacher into a 4-step
//! student. A critic with the student's architecture regresses the student
//! distribution's velocity field; the generator gradient is the difference
//! between the teacher's and the critic's clean-sample predictions, applied
//! through the final denoising step only.

use ndarray::{Array1, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condnet::{build_context, VelocityField, VelocityNet};
use crate::error::{Error, Result, TrainEnd};
use crate::flowcore::{
    fm_draws, fm_loss_with, forward_diffuse_per_sample, sample, sample_final_step_grad, FmDraws,
    NfeCounter, Schedule,
};
use crate::params::{Adam, Params};
use crate::rng::{labels, stream, Stream};
use crate::tape::Tape;
use crate::toydata::{cond_batch, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmdConfig {
    /// Student sampling schedule; the 4-step default extends the printed
    /// stage schedules uniformly.
    #[serde(default = "default_student_schedule")]
    pub student_schedule: Vec<f64>,
    /// Renoising range (lo, hi) for the distribution-matching step.
    #[serde(default = "default_renoise_lo")]
    pub renoise_lo: f64,
    #[serde(default = "default_renoise_hi")]
    pub renoise_hi: f64,
    /// Teacher guidance scale for the distillation target; 0 disables
    /// guidance (single conditional evaluation).
    #[serde(default = "default_guidance_w")]
    pub guidance_w: f64,
    /// Critic updates per generator update.
    #[serde(default = "default_critic_per_gen")]
    pub critic_per_gen: usize,
    /// Number of generator updates.
    #[serde(default = "default_dmd_steps")]
    pub steps: usize,
    #[serde(default = "default_lr_gen")]
    pub lr_gen: f64,
    #[serde(default = "default_lr_critic")]
    pub lr_critic: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_student_schedule() -> Vec<f64> {
    vec![1.0, 0.75, 0.5, 0.25]
}
fn default_renoise_lo() -> f64 {
    0.02
}
fn default_renoise_hi() -> f64 {
    0.98
}
fn default_guidance_w() -> f64 {
    2.0
}
fn default_critic_per_gen() -> usize {
    5
}
fn default_dmd_steps() -> usize {
    1000
}
fn default_lr_gen() -> f64 {
    1e-4
}
fn default_lr_critic() -> f64 {
    3e-4
}
fn default_batch() -> usize {
    16
}

impl Default for DmdConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl DmdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.renoise_lo > 0.0 && self.renoise_lo < self.renoise_hi && self.renoise_hi < 1.0) {
            return Err(Error::config(format!(
                "renoise range ({}, {}) must satisfy 0 < lo < hi < 1",
                self.renoise_lo, self.renoise_hi
            )));
        }
        if self.critic_per_gen < 1 {
            return Err(Error::config("critic_per_gen must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("dmd batch_size must be >= 1"));
        }
        if !(self.lr_gen > 0.0 && self.lr_critic > 0.0) {
            return Err(Error::config("dmd learning rates must be positive"));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.student_schedule.clone())
    }
}

/// Output of the distillation stage; both networks start from the teacher.
#[derive(Debug, Clone)]
pub struct DmdOutput {
    pub generator: VelocityNet,
    pub critic: VelocityNet,
    pub schedule: Schedule,
    pub steps_done: usize,
}

/// Invert the rectified-flow parameterization: with `z = (1-t) x + t eps` and
/// `v = eps - x`, the clean sample is `x = z - t v`.
pub fn x0_from_v(z: &Array3<f64>, t: f64, v: &Array3<f64>) -> Result<Array3<f64>> {
    if z.dim() != v.dim() {
        return Err(Error::shape("z/v shape mismatch".to_string()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!("timestep {t} outside [0, 1]")));
    }
    Ok(z - &v.mapv(|e| t * e))
}

fn x0_from_v_per_sample(z: &Array3<f64>, ts: &[f64], v: &Array3<f64>) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros(z.dim());
    for (b, &t) in ts.iter().enumerate() {
        let zb = z.index_axis(Axis(0), b);
        let vb = v.index_axis(Axis(0), b);
        let mut ob = out.index_axis_mut(Axis(0), b);
        ndarray::Zip::from(&mut ob).and(&zb).and(&vb).for_each(|o, &z, &v| *o = z - t * v);
    }
    out
}

/// Teacher prediction with classifier-free guidance; `w == 0` disables
/// guidance and evaluates the conditional path once.
pub fn guided_velocity(
    net: &VelocityNet,
    z: &Array3<f64>,
    ts: &[f64],
    cond: &crate::condnet::CondTokens,
    w: f64,
) -> Array3<f64> {
    if w == 0.0 {
        return net.velocity(z, ts, cond);
    }
    let zero = crate::condnet::CondTokens::zeros(z.dim().0, cond.tokens.dim().1, cond.tokens.dim().2);
    let v_u = net.velocity(z, ts, &zero);
    let v_c = net.velocity(z, ts, cond);
    &v_u + &(&v_c - &v_u).mapv(|e| w * e)
}

/// Frozen randomness of one generator update.
#[derive(Debug, Clone)]
pub struct GenDraws {
    pub z0: Array3<f64>,
    pub t_prime: Vec<f64>,
    pub eps_prime: Array3<f64>,
}

pub fn gen_draws(rng: &mut Stream, cfg: &DmdConfig, batch: usize, frames: usize, dim: usize) -> GenDraws {
    let z0 = Array3::from_shape_fn((batch, frames, dim), |_| rng.sample::<f64, _>(StandardNormal));
    let t_prime = (0..batch)
        .map(|_| cfg.renoise_lo + (cfg.renoise_hi - cfg.renoise_lo) * rng.gen::<f64>())
        .collect();
    let eps_prime = Array3::from_shape_fn((batch, frames, dim), |_| rng.sample::<f64, _>(StandardNormal));
    GenDraws { z0, t_prime, eps_prime }
}

/// One generator update with frozen draws. Returns the surrogate loss and the
/// named gradients for the generator parameters.
///
/// The surrogate is `0.5 ||x_hat - detach(x_hat - g)||^2` with
/// `g = (x_f - x_r) / eta` and a per-sample normalizer
/// `eta = mean |x_r - x_f| + 1e-8`, so its gradient with respect to the
/// student output is exactly `g`.
pub fn dmd_generator_step_with(
    gen: &VelocityNet,
    teacher: &VelocityNet,
    critic: &VelocityNet,
    cond_raw: &Array3<f64>,
    cfg: &DmdConfig,
    draws: &GenDraws,
) -> Result<(f64, Params)> {
    let schedule = cfg.schedule()?;

    let mut tape = Tape::new();
    let pn = tape.bind(&gen.params, true);
    let a_ctx = build_context(cond_raw, &gen.cfg.context)?;
    let a = tape.constant(a_ctx.into_dyn());
    let cond_node = gen.adapt_node(&mut tape, &pn, a);
    let x_hat_node = sample_final_step_grad(&mut tape, gen, &pn, &schedule, &draws.z0, cond_node)?;
    let x_hat: Array3<f64> = tape.value(x_hat_node).clone().into_dimensionality().expect("3-D");

    // Renoise the student output and compare teacher vs critic predictions,
    // both detached.
    let z_prime = forward_diffuse_per_sample(&x_hat, &draws.t_prime, &draws.eps_prime)?;
    let teacher_tokens = teacher.cond_tokens(cond_raw)?;
    let v_r = guided_velocity(teacher, &z_prime, &draws.t_prime, &teacher_tokens, cfg.guidance_w);
    let x_r = x0_from_v_per_sample(&z_prime, &draws.t_prime, &v_r);
    let critic_tokens = critic.cond_tokens(cond_raw)?;
    let v_f = critic.velocity(&z_prime, &draws.t_prime, &critic_tokens);
    let x_f = x0_from_v_per_sample(&z_prime, &draws.t_prime, &v_f);

    let mut g = &x_f - &x_r;
    let per = (x_hat.dim().1 * x_hat.dim().2) as f64;
    let eta = Array1::from_iter(
        g.axis_iter(Axis(0)).map(|d| d.iter().map(|e| e.abs()).sum::<f64>() / per + 1e-8),
    );
    for (b, mut gb) in g.axis_iter_mut(Axis(0)).enumerate() {
        gb.mapv_inplace(|e| e / eta[b]);
    }

    let target = tape.constant((&x_hat - &g).into_dyn());
    let diff = tape.sub(x_hat_node, target);
    let sq = tape.square(diff);
    let sum = tape.sum_all(sq);
    let loss = tape.scale(sum, 0.5);
    let loss_val = tape.scalar(loss);
    if !loss_val.is_finite() {
        return Err(Error::numeric("dmd surrogate loss is not finite"));
    }
    let grads = tape.backward(loss);
    let named = pn.grads(&gen.params, &grads);
    Ok((loss_val, named))
}

/// One critic update with frozen draws: the critic regresses the velocity
/// field of the (fully detached) student distribution.
pub fn critic_step_with(
    critic: &VelocityNet,
    gen: &VelocityNet,
    cond_raw: &Array3<f64>,
    cfg: &DmdConfig,
    z0: &Array3<f64>,
    fm: &FmDraws,
) -> Result<(f64, Params)> {
    let schedule = cfg.schedule()?;
    let gen_tokens = gen.cond_tokens(cond_raw)?;
    let mut counter = NfeCounter::new();
    let x_hat = sample(gen, &schedule, z0, &gen_tokens, None, &mut counter)?;

    let mut tape = Tape::new();
    let pn = tape.bind(&critic.params, true);
    let a_ctx = build_context(cond_raw, &critic.cfg.context)?;
    let a = tape.constant(a_ctx.into_dyn());
    let cond_node = critic.adapt_node(&mut tape, &pn, a);
    let loss = fm_loss_with(&mut tape, critic, &pn, &x_hat, cond_node, fm)?;
    let loss_val = tape.scalar(loss);
    let grads = tape.backward(loss);
    let named = pn.grads(&critic.params, &grads);
    Ok((loss_val, named))
}

/// Run the full distillation loop: generator and critic both initialized from
/// the teacher, `critic_per_gen` critic updates per generator update.
pub fn run_dmd(teacher: &VelocityNet, data: &Dataset, cfg: &DmdConfig, seed: u64) -> Result<TrainEnd<DmdOutput>> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let mut gen = teacher.clone();
    let mut critic = teacher.clone();
    let mut opt_gen = Adam::new(cfg.lr_gen);
    let mut opt_critic = Adam::new(cfg.lr_critic);
    let mut rng = stream(seed, labels::DMD);
    let n = data.samples.len();
    let (f, d) = (gen.dims.frames, gen.dims.feature_dim);

    for step in 0..cfg.steps {
        let finish = |gen: VelocityNet, critic: VelocityNet, step: usize| TrainEnd::Diverged {
            state: DmdOutput { generator: gen, critic, schedule: schedule.clone(), steps_done: step },
            step,
        };
        for _ in 0..cfg.critic_per_gen {
            let idx = crate::flowcore::batch_indices(&mut rng, n, cfg.batch_size);
            let cond = cond_batch(&data.samples, &idx);
            let z0 = Array3::from_shape_fn((cfg.batch_size, f, d), |_| rng.sample::<f64, _>(StandardNormal));
            let fm = fm_draws(&mut rng, cfg.batch_size, f, d);
            let before = critic.params.clone();
            match critic_step_with(&critic, &gen, &cond, cfg, &z0, &fm) {
                Ok((_, grads)) => {
                    opt_critic.update(&mut critic.params, &grads)?;
                    if !critic.params.all_finite() {
                        critic.params = before;
                        return Ok(finish(gen, critic, step));
                    }
                }
                Err(Error::Numeric(_)) => {
                    critic.params = before;
                    return Ok(finish(gen, critic, step));
                }
                Err(e) => return Err(e),
            }
        }
        let idx = crate::flowcore::batch_indices(&mut rng, n, cfg.batch_size);
        let cond = cond_batch(&data.samples, &idx);
        let draws = gen_draws(&mut rng, cfg, cfg.batch_size, f, d);
        let before = gen.params.clone();
        match dmd_generator_step_with(&gen, teacher, &critic, &cond, cfg, &draws) {
            Ok((_, grads)) => {
                opt_gen.update(&mut gen.params, &grads)?;
                if !gen.params.all_finite() {
                    gen.params = before;
                    return Ok(finish(gen, critic, step));
                }
            }
            Err(Error::Numeric(_)) => {
                gen.params = before;
                return Ok(finish(gen, critic, step));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainEnd::Completed(DmdOutput {
        generator: gen,
        critic,
        schedule,
        steps_done: cfg.steps,
    }))
}
