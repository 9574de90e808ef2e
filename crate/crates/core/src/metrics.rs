//! Evaluation suite: Fréchet distance between Gaussian fits of flattened
//! frame features, energy distance, a sync-correlation proxy, and exact
//! evaluation counting with wall-clock accounting.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condnet::VelocityNet;
use crate::error::{Error, Result};
use crate::flowcore::{sample, NfeCounter, Schedule};
use crate::rng::{labels, stream};
use crate::toydata::{frame_align, Dataset};

/// Moments of a feature cloud.
#[derive(Debug, Clone)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianFit {
    /// Mean and unbiased covariance, plus a small ridge on the diagonal.
    pub fn from_samples(x: &ArrayView2<f64>, ridge: f64) -> Result<Self> {
        let (n, d) = x.dim();
        if n < 2 {
            return Err(Error::data("need at least 2 samples for a Gaussian fit"));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::data("non-finite features"));
        }
        let mean = x.mean_axis(Axis(0)).unwrap();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for row in x.rows() {
            let c: Vec<f64> = row.iter().zip(mean.iter()).map(|(a, b)| a - b).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        cov /= (n - 1) as f64;
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
        Ok(GaussianFit {
            mean: DVector::from_iterator(d, mean.iter().copied()),
            cov,
            n,
        })
    }
}

/// Symmetric PSD square root by eigendecomposition, eigenvalues clamped at 0.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Squared 2-Wasserstein distance between two Gaussian fits:
/// `||m1 - m2||^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})`,
/// with the trace term clamped at zero against rounding.
pub fn frechet_from_fits(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape(format!(
            "fit dimensions disagree: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let dmean = (&a.mean - &b.mean).norm_squared();
    let s1h = sqrtm_psd(&a.cov);
    let inner = &s1h * &b.cov * &s1h;
    let cross = sqrtm_psd(&inner);
    let trace_term = (a.cov.trace() + b.cov.trace() - 2.0 * cross.trace()).max(0.0);
    Ok(dmean + trace_term)
}

/// Fréchet distance between Gaussian fits of two feature clouds
/// `[n, d]` / `[m, d]`; covariances are regularized by `1e-6 I`.
pub fn frechet_distance(x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return Err(Error::shape(format!(
            "feature dimensions disagree: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let a = GaussianFit::from_samples(x, 1e-6)?;
    let b = GaussianFit::from_samples(y, 1e-6)?;
    frechet_from_fits(&a, &b)
}

const ENERGY_MAX_PAIRS: usize = 1 << 22;

fn mean_pair_distance(
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    rng: &mut crate::rng::Stream,
) -> f64 {
    let (n, m) = (x.nrows(), y.nrows());
    let dist = |i: usize, j: usize| -> f64 {
        x.row(i)
            .iter()
            .zip(y.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    if n * m <= ENERGY_MAX_PAIRS {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..m {
                acc += dist(i, j);
            }
        }
        acc / (n * m) as f64
    } else {
        let mut acc = 0.0;
        for _ in 0..ENERGY_MAX_PAIRS {
            acc += dist(rng.gen_range(0..n), rng.gen_range(0..m));
        }
        acc / ENERGY_MAX_PAIRS as f64
    }
}

/// Energy distance `2 E||x-y|| - E||x-x'|| - E||y-y'||` over all pairs
/// (V-statistic, diagonal included), subsampled above a pair budget.
pub fn energy_distance(
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    rng: &mut crate::rng::Stream,
) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return Err(Error::shape("feature dimensions disagree".to_string()));
    }
    if x.nrows() < 2 || y.nrows() < 2 {
        return Err(Error::data("need at least 2 samples per side"));
    }
    if !x.iter().all(|v| v.is_finite()) || !y.iter().all(|v| v.is_finite()) {
        return Err(Error::data("non-finite features"));
    }
    let xy = mean_pair_distance(x, y, rng);
    let xx = mean_pair_distance(x, x, rng);
    let yy = mean_pair_distance(y, y, rng);
    Ok((2.0 * xy - xx - yy).max(0.0))
}

fn pearson(a: &Array1<f64>, b: &Array1<f64>) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(num / (va.sqrt() * vb.sqrt()))
}

/// Mean per-sample Pearson correlation between the frame-aligned conditioning
/// envelope and the generated mouth channel (feature 0). A sample with a
/// constant series contributes 0 and logs a warning.
pub fn sync_correlation(gen_frames: &Array3<f64>, conds: &Array3<f64>) -> Result<f64> {
    let (b, frames, _) = gen_frames.dim();
    if b == 0 {
        return Err(Error::data("empty batch"));
    }
    if frames < 2 {
        return Err(Error::shape("need at least 2 frames per sample"));
    }
    if conds.dim().0 != b {
        return Err(Error::shape("frames/conds batch mismatch".to_string()));
    }
    let mut acc = 0.0;
    for i in 0..b {
        let cond = conds.index_axis(Axis(0), i).to_owned();
        let env = frame_align(&cond.view(), frames)?;
        let mouth = gen_frames.slice(ndarray::s![i, .., 0]).to_owned();
        match pearson(&env, &mouth) {
            Some(r) => acc += r,
            None => {
                log::warn!("constant series in sync correlation; sample {i} contributes 0");
            }
        }
    }
    Ok(acc / b as f64)
}

/// One evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fd: f64,
    pub energy: f64,
    pub sync: f64,
    /// Total model evaluations across the run.
    pub nfe: u64,
    /// Evaluations per generated sample (exact integer accounting).
    pub nfe_per_sample: u64,
    /// Median wall-clock per generated sample, milliseconds.
    pub wall_ms: f64,
}

fn flatten_frames(frames: &Array3<f64>) -> Array2<f64> {
    let (b, f, d) = frames.dim();
    let mut out = Array2::<f64>::zeros((b, f * d));
    for i in 0..b {
        for r in 0..f {
            for c in 0..d {
                out[[i, r * d + c]] = frames[[i, r, c]];
            }
        }
    }
    out
}

/// Generate `n_eval` samples conditioned on held-out data (one at a time so
/// evaluation counts and wall-clock are per sample), then score them against
/// the held-out real frames.
pub fn measure(
    model: &VelocityNet,
    schedule: &Schedule,
    guidance: Option<f64>,
    data: &Dataset,
    n_eval: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if n_eval < 64 {
        return Err(Error::config("n_eval must be >= 64"));
    }
    if data.samples.len() < n_eval {
        return Err(Error::data(format!(
            "held-out set has {} samples, need {n_eval}",
            data.samples.len()
        )));
    }
    let mut rng = stream(seed, labels::EVAL);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    order.shuffle(&mut rng);
    let chosen = &order[..n_eval];

    let (f, d) = (model.dims.frames, model.dims.feature_dim);
    let mut gen_frames = Array3::<f64>::zeros((n_eval, f, d));
    let mut conds = Array3::<f64>::zeros((n_eval, data.spec.cond_len, data.spec.cond_channels));
    let mut walls = Vec::with_capacity(n_eval);
    let mut nfe_per_sample = None;
    let mut total_evals = 0u64;

    for (slot, &i) in chosen.iter().enumerate() {
        let cond = crate::toydata::cond_batch(&data.samples, &[i]);
        let z0 = Array3::from_shape_fn((1, f, d), |_| rng.sample::<f64, _>(StandardNormal));
        let t0 = Instant::now();
        let tokens = model.cond_tokens(&cond)?;
        let mut counter = NfeCounter::new();
        let out = sample(model, schedule, &z0, &tokens, guidance, &mut counter)?;
        walls.push(t0.elapsed().as_secs_f64() * 1e3);
        total_evals += counter.count();
        match nfe_per_sample {
            None => nfe_per_sample = Some(counter.count()),
            Some(k) => debug_assert_eq!(k, counter.count()),
        }
        gen_frames.index_axis_mut(Axis(0), slot).assign(&out.index_axis(Axis(0), 0));
        conds.index_axis_mut(Axis(0), slot).assign(&cond.index_axis(Axis(0), 0));
    }

    let real_idx: Vec<usize> = (0..data.samples.len()).collect();
    let real = crate::toydata::frames_batch(&data.samples, &real_idx);
    let real_flat = flatten_frames(&real);
    let gen_flat = flatten_frames(&gen_frames);

    let fd = frechet_distance(&gen_flat.view(), &real_flat.view())?;
    let energy = energy_distance(&gen_flat.view(), &real_flat.view(), &mut rng)?;
    let sync = sync_correlation(&gen_frames, &conds)?;

    walls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let wall_ms = walls[walls.len() / 2];

    Ok(MetricsReport {
        fd,
        energy,
        sync,
        nfe: total_evals,
        nfe_per_sample: nfe_per_sample.unwrap_or(0),
        wall_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array2;

    /// Independent closed-form oracle with its own Jacobi eigendecomposition,
    /// sharing no code with the implementation path.
    mod oracle {
        pub fn jacobi_eigen(a: &Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
            let n = a.len();
            let mut m: Vec<Vec<f64>> = a.clone();
            let mut v = vec![vec![0.0; n]; n];
            for (i, row) in v.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            for _ in 0..200 {
                let mut p = 0;
                let mut q = 1;
                let mut off = 0.0;
                for i in 0..n {
                    for j in i + 1..n {
                        if m[i][j].abs() > off {
                            off = m[i][j].abs();
                            p = i;
                            q = j;
                        }
                    }
                }
                if off < 1e-14 {
                    break;
                }
                let theta = 0.5 * (m[q][q] - m[p][p]) / m[p][q];
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
            let vals = (0..n).map(|i| m[i][i]).collect();
            (vals, v)
        }

        pub fn sqrtm(a: &Vec<Vec<f64>>) -> Vec<Vec<f64>> {
            let n = a.len();
            let (vals, vecs) = jacobi_eigen(a);
            let mut out = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        out[i][j] += vecs[i][k] * vals[k].max(0.0).sqrt() * vecs[j][k];
                    }
                }
            }
            out
        }

        pub fn matmul(a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>) -> Vec<Vec<f64>> {
            let n = a.len();
            let mut out = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        out[i][j] += a[i][k] * b[k][j];
                    }
                }
            }
            out
        }

        pub fn frechet(mu1: &[f64], s1: &Vec<Vec<f64>>, mu2: &[f64], s2: &Vec<Vec<f64>>) -> f64 {
            let n = mu1.len();
            let dm: f64 = mu1.iter().zip(mu2.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            let s1h = sqrtm(s1);
            let inner = matmul(&matmul(&s1h, s2), &s1h);
            let cross = sqrtm(&inner);
            let tr = |m: &Vec<Vec<f64>>| (0..n).map(|i| m[i][i]).sum::<f64>();
            dm + tr(s1) + tr(s2) - 2.0 * tr(&cross)
        }
    }

    fn fit_from_moments(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> GaussianFit {
        let d = mean.len();
        GaussianFit {
            mean: DVector::from_vec(mean),
            cov: DMatrix::from_fn(d, d, |i, j| cov[i][j]),
            n: 1000,
        }
    }

    #[test]
    fn frechet_identical_sets_is_zero() {
        let mut rng = stream(1, 1);
        let x = Array2::from_shape_fn((200, 4), |_| rng.gen::<f64>());
        let fd = frechet_distance(&x.view(), &x.view()).unwrap();
        assert!(fd.abs() < 1e-8, "fd {fd}");
    }

    #[test]
    fn frechet_unit_shift_closed_form() {
        // N(0,1) vs N(1,1) in 1-D, moments injected directly: exactly 1.
        let a = fit_from_moments(vec![0.0], vec![vec![1.0]]);
        let b = fit_from_moments(vec![1.0], vec![vec![1.0]]);
        let fd = frechet_from_fits(&a, &b).unwrap();
        assert!((fd - 1.0).abs() < 1e-9, "fd {fd}");
    }

    #[test]
    fn frechet_matches_independent_oracle_in_3d() {
        let mut rng = stream(2, 2);
        for _ in 0..5 {
            let mu1: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            let mu2: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            // Random PSD covariances A A^T + small diag.
            let mk = |rng: &mut crate::rng::Stream| {
                let a: Vec<Vec<f64>> =
                    (0..3).map(|_| (0..3).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
                let mut s = vec![vec![0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        for k in 0..3 {
                            s[i][j] += a[i][k] * a[j][k];
                        }
                    }
                    s[i][i] += 0.1;
                }
                s
            };
            let s1 = mk(&mut rng);
            let s2 = mk(&mut rng);
            let got = frechet_from_fits(
                &fit_from_moments(mu1.clone(), s1.clone()),
                &fit_from_moments(mu2.clone(), s2.clone()),
            )
            .unwrap();
            let want = oracle::frechet(&mu1, &s1, &mu2, &s2);
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn frechet_is_symmetric_and_dominates_mean_term() {
        let mut rng = stream(3, 3);
        let x = Array2::from_shape_fn((300, 3), |_| rng.gen::<f64>());
        let y = Array2::from_shape_fn((280, 3), |_| rng.gen::<f64>() * 1.5 + 0.3);
        let ab = frechet_distance(&x.view(), &y.view()).unwrap();
        let ba = frechet_distance(&y.view(), &x.view()).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        let fx = GaussianFit::from_samples(&x.view(), 1e-6).unwrap();
        let fy = GaussianFit::from_samples(&y.view(), 1e-6).unwrap();
        let mean_term = (&fx.mean - &fy.mean).norm_squared();
        assert!(ab >= mean_term - 1e-12);
    }

    #[test]
    fn frechet_rejects_dim_mismatch_and_nonfinite() {
        let x = Array2::<f64>::zeros((10, 3));
        let y = Array2::<f64>::zeros((10, 4));
        assert!(matches!(frechet_distance(&x.view(), &y.view()), Err(Error::Shape(_))));
        let mut bad = Array2::<f64>::zeros((10, 3));
        bad[[0, 0]] = f64::NAN;
        assert!(matches!(frechet_distance(&bad.view(), &x.view()), Err(Error::Data(_))));
    }

    #[test]
    fn energy_zero_on_identical_multisets() {
        let mut rng = stream(4, 4);
        let x = Array2::from_shape_fn((64, 3), |_| rng.gen::<f64>());
        let e = energy_distance(&x.view(), &x.view(), &mut stream(5, 5)).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn energy_point_masses() {
        let x = Array2::<f64>::zeros((8, 1));
        let y = Array2::<f64>::ones((8, 1));
        let e = energy_distance(&x.view(), &y.view(), &mut stream(6, 6)).unwrap();
        assert!((e - 2.0).abs() < 1e-12);
    }

    #[test]
    fn energy_matches_monte_carlo_oracle() {
        // Two fixed 2-D Gaussians; V-statistic on 4096 draws vs a 1e6-pair
        // Monte Carlo oracle, within 3 combined standard errors.
        let mut rng = stream(7, 7);
        let draw_x = |rng: &mut crate::rng::Stream| {
            [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)]
        };
        let draw_y = |rng: &mut crate::rng::Stream| {
            [
                rng.sample::<f64, _>(StandardNormal) * 1.3 + 0.8,
                rng.sample::<f64, _>(StandardNormal) * 0.7 - 0.2,
            ]
        };
        let n = 4096;
        let mut x = Array2::<f64>::zeros((n, 2));
        let mut y = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            let a = draw_x(&mut rng);
            let b = draw_y(&mut rng);
            x[[i, 0]] = a[0];
            x[[i, 1]] = a[1];
            y[[i, 0]] = b[0];
            y[[i, 1]] = b[1];
        }
        let impl_val = energy_distance(&x.view(), &y.view(), &mut stream(8, 8)).unwrap();

        // Monte Carlo oracle with pair-level standard errors.
        let pairs = 1_000_000;
        let mut term = |f: &mut dyn FnMut(&mut crate::rng::Stream) -> f64| {
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            for _ in 0..pairs {
                let v = f(&mut rng);
                acc += v;
                acc2 += v * v;
            }
            let mean = acc / pairs as f64;
            let var = acc2 / pairs as f64 - mean * mean;
            (mean, (var / pairs as f64).sqrt())
        };
        let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let (xy, se_xy) = term(&mut |r| dist(draw_x(r), draw_y(r)));
        let (xx, se_xx) = term(&mut |r| dist(draw_x(r), draw_x(r)));
        let (yy, se_yy) = term(&mut |r| dist(draw_y(r), draw_y(r)));
        let oracle = 2.0 * xy - xx - yy;
        let se_oracle = (4.0 * se_xy * se_xy + se_xx * se_xx + se_yy * se_yy).sqrt();
        // The implementation's own sampling error at n = 4096 dominates; a
        // conservative bound is c/sqrt(n) with c from the pair variance.
        let se_impl = 3.0 / (n as f64).sqrt();
        let tol = 3.0 * (se_oracle * se_oracle + se_impl * se_impl).sqrt();
        assert!((impl_val - oracle).abs() < tol, "{impl_val} vs {oracle} (tol {tol})");
    }

    #[test]
    fn sync_perfect_and_constant_cases() {
        let spec = crate::toydata::DataSpec {
            frames: 8,
            feature_dim: 2,
            cond_len: 32,
            cond_channels: 1,
            count: 4,
            seed: 9,
            noise_sigma: 0.0,
        };
        let ds = crate::toydata::generate(&spec).unwrap();
        let idx: Vec<usize> = (0..4).collect();
        let frames = crate::toydata::frames_batch(&ds.samples, &idx);
        let conds = crate::toydata::cond_batch(&ds.samples, &idx);
        // Mouth equals the envelope exactly at zero noise: correlation 1.
        let r = sync_correlation(&frames, &conds).unwrap();
        assert!((r - 1.0).abs() < 1e-12, "r {r}");

        // Constant mouth: contributes zero.
        let mut flat = frames.clone();
        flat.slice_mut(ndarray::s![.., .., 0]).fill(0.3);
        let r = sync_correlation(&flat, &conds).unwrap();
        assert_eq!(r, 0.0);

        let empty = Array3::<f64>::zeros((0, 8, 2));
        let e = Array3::<f64>::zeros((0, 32, 1));
        assert!(matches!(sync_correlation(&empty, &e), Err(Error::Data(_))));
    }

    #[test]
    fn sync_matches_pearson_oracle_on_noisy_data() {
        let spec = crate::toydata::DataSpec {
            frames: 16,
            feature_dim: 4,
            cond_len: 64,
            cond_channels: 1,
            count: 64,
            seed: 10,
            noise_sigma: 0.05,
        };
        let ds = crate::toydata::generate(&spec).unwrap();
        let idx: Vec<usize> = (0..64).collect();
        let frames = crate::toydata::frames_batch(&ds.samples, &idx);
        let conds = crate::toydata::cond_batch(&ds.samples, &idx);
        let got = sync_correlation(&frames, &conds).unwrap();

        // Brute-force per-sample Pearson, averaged.
        let mut acc = 0.0;
        for (i, s) in ds.samples.iter().enumerate() {
            let env = frame_align(&s.cond_f64().view(), 16).unwrap();
            let mouth: Vec<f64> = (0..16).map(|r| frames[[i, r, 0]]).collect();
            let n = 16.0;
            let me = env.sum() / n;
            let mm = mouth.iter().sum::<f64>() / n;
            let mut num = 0.0;
            let mut ve = 0.0;
            let mut vm = 0.0;
            for r in 0..16 {
                num += (env[r] - me) * (mouth[r] - mm);
                ve += (env[r] - me) * (env[r] - me);
                vm += (mouth[r] - mm) * (mouth[r] - mm);
            }
            acc += num / (ve.sqrt() * vm.sqrt());
        }
        let want = acc / 64.0;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}
