//! Noise schedule, forward corruption, training objectives, and reverse
//! samplers (ancestral, strided deterministic, and Euler flow integration).

use ndarray::{Array4, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Graph};
use crate::denoiser::{require_finite, DenoiseModel, PredictionRegime};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

/// Variance-preserving noise schedule constants.
///
/// The forward marginal uses the sqrt convention:
/// `y_t = sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    t_d: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn make(t_d: usize, kind: ScheduleKind, beta_range: (f64, f64)) -> Result<Self> {
        let (beta_min, beta_max) = beta_range;
        if t_d < 2 {
            return Err(Error::parameter(format!("need at least 2 diffusion steps, got {t_d}")));
        }
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::parameter(format!(
                "beta range ({beta_min}, {beta_max}) must satisfy 0 < min < max < 1"
            )));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..t_d)
                .map(|t| beta_min + (beta_max - beta_min) * t as f64 / (t_d - 1) as f64)
                .collect(),
            ScheduleKind::Cosine => {
                // Squared-cosine alpha_bar curve, betas clamped into the range.
                let s = 0.008;
                let f = |t: f64| ((t / t_d as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2);
                let f0 = f(0.0);
                (0..t_d)
                    .map(|t| {
                        let a_prev = f(t as f64) / f0;
                        let a_next = f((t + 1) as f64) / f0;
                        (1.0 - a_next / a_prev).clamp(beta_min, beta_max)
                    })
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(t_d);
        let mut prod = 1.0;
        for &b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        let sched = Self { t_d, beta, alpha_bar, sigma };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        for &b in &self.beta {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::parameter(format!("beta {b} outside (0, 1)")));
            }
        }
        for w in self.alpha_bar.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::parameter("alpha_bar must be strictly decreasing"));
            }
        }
        Ok(())
    }

    pub fn t_d(&self) -> usize {
        self.t_d
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Signal-to-noise ratio at step t under the sqrt convention.
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / (1.0 - self.alpha_bar[t])
    }
}

/// A corrupted sample together with the noise that produced it.
#[derive(Debug, Clone)]
pub struct NoisySample {
    pub y_t: ArrayD<f64>,
    pub t: usize,
    pub eps: ArrayD<f64>,
}

/// Applies the forward marginal at step `t`.
pub fn forward_noise(
    y0: &ArrayD<f64>,
    t: usize,
    eps: &ArrayD<f64>,
    sched: &DiffusionSchedule,
) -> Result<NoisySample> {
    if y0.shape() != eps.shape() {
        return Err(Error::parameter(format!(
            "shape mismatch: y0 {:?} vs eps {:?}",
            y0.shape(),
            eps.shape()
        )));
    }
    if t >= sched.t_d() {
        return Err(Error::parameter(format!("step {t} out of range [0, {})", sched.t_d())));
    }
    let a = sched.alpha_bar(t).sqrt();
    let s = (1.0 - sched.alpha_bar(t)).sqrt();
    let y_t = y0.mapv(|v| v * a) + &eps.mapv(|v| v * s);
    Ok(NoisySample { y_t, t, eps: eps.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    #[default]
    Ddim,
    EulerFlow,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub sampler: SamplerKind,
    pub n_steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { sampler: SamplerKind::Ddim, n_steps: 20, eta: 0.0, seed: 0 }
    }
}

/// Scalar loss value plus parameter gradients.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Grads,
}

pub fn standard_normal_like(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.sample(StandardNormal))
}

/// Noise-prediction loss at explicit draws: per-element timesteps `t` and a
/// fixed noise tensor. The randomized wrapper is [`ddpm_loss`].
pub fn ddpm_loss_at<M: DenoiseModel>(
    model: &M,
    y0: &Array4<f64>,
    context: &Array4<f64>,
    t: &[usize],
    eps: &Array4<f64>,
    sched: &DiffusionSchedule,
) -> Result<LossOutput> {
    if y0.dim() != eps.dim() {
        return Err(Error::parameter("y0/eps shape mismatch"));
    }
    let b = y0.dim().0;
    if t.len() != b {
        return Err(Error::parameter("one timestep per batch element required"));
    }
    let mut y_t = Array4::<f64>::zeros(y0.dim());
    for (bi, &tb) in t.iter().enumerate() {
        if tb >= sched.t_d() {
            return Err(Error::parameter(format!("step {tb} out of range")));
        }
        let a = sched.alpha_bar(tb).sqrt();
        let s = (1.0 - sched.alpha_bar(tb)).sqrt();
        let mut dst = y_t.slice_mut(ndarray::s![bi, .., .., ..]);
        let src_y = y0.slice(ndarray::s![bi, .., .., ..]);
        let src_e = eps.slice(ndarray::s![bi, .., .., ..]);
        ndarray::Zip::from(&mut dst).and(&src_y).and(&src_e).for_each(|d, &y, &e| {
            *d = a * y + s * e;
        });
    }
    let t_f: Vec<f64> = t.iter().map(|&v| v as f64).collect();
    let mut g = Graph::new();
    let y_t_node = g.constant(y_t.into_dyn());
    let pred = model.predict_into(&mut g, y_t_node, &t_f, context, true)?;
    g.check_finite(pred, t[0], "model output")?;
    let eps_node = g.constant(eps.clone().into_dyn());
    let diff = g.sub(eps_node, pred);
    let sq = g.square(diff);
    let loss = g.mean_all(sq);
    g.backward(loss)?;
    Ok(LossOutput { value: g.scalar(loss), grads: g.param_grads() })
}

/// Samples per-element `t ~ U{0..T_d}` and `eps ~ N(0, I)`, then evaluates
/// the noise-prediction loss.
pub fn ddpm_loss<M: DenoiseModel>(
    model: &M,
    y0: &Array4<f64>,
    context: &Array4<f64>,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<LossOutput> {
    let b = y0.dim().0;
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..sched.t_d())).collect();
    let eps4: Array4<f64> = Array4::from_shape_fn(y0.dim(), |_| rng.sample(StandardNormal));
    ddpm_loss_at(model, y0, context, &t, &eps4, sched)
}

/// Flow-matching loss at explicit draws: per-element times in [0,1] and a
/// fixed noise tensor.
pub fn flow_match_loss_at<M: DenoiseModel>(
    model: &M,
    y0: &Array4<f64>,
    context: &Array4<f64>,
    t: &[f64],
    eps: &Array4<f64>,
) -> Result<LossOutput> {
    if y0.dim() != eps.dim() {
        return Err(Error::parameter("y0/eps shape mismatch"));
    }
    let b = y0.dim().0;
    if t.len() != b {
        return Err(Error::parameter("one time value per batch element required"));
    }
    // x_t = (1 - t) eps + t y0; target velocity v = y0 - eps.
    let mut x_t = Array4::<f64>::zeros(y0.dim());
    let mut v = Array4::<f64>::zeros(y0.dim());
    for (bi, &tb) in t.iter().enumerate() {
        if !(0.0..=1.0).contains(&tb) {
            return Err(Error::parameter(format!("flow time {tb} outside [0, 1]")));
        }
        let mut dst_x = x_t.slice_mut(ndarray::s![bi, .., .., ..]);
        let mut dst_v = v.slice_mut(ndarray::s![bi, .., .., ..]);
        let src_y = y0.slice(ndarray::s![bi, .., .., ..]);
        let src_e = eps.slice(ndarray::s![bi, .., .., ..]);
        ndarray::Zip::from(&mut dst_x)
            .and(&mut dst_v)
            .and(&src_y)
            .and(&src_e)
            .for_each(|x, vv, &y, &e| {
                *x = (1.0 - tb) * e + tb * y;
                *vv = y - e;
            });
    }
    let mut g = Graph::new();
    let x_node = g.constant(x_t.into_dyn());
    let pred = model.predict_into(&mut g, x_node, t, context, true)?;
    g.check_finite(pred, 0, "model output")?;
    let v_node = g.constant(v.into_dyn());
    let diff = g.sub(v_node, pred);
    let sq = g.square(diff);
    let loss = g.mean_all(sq);
    g.backward(loss)?;
    Ok(LossOutput { value: g.scalar(loss), grads: g.param_grads() })
}

pub fn flow_match_loss<M: DenoiseModel>(
    model: &M,
    y0: &Array4<f64>,
    context: &Array4<f64>,
    rng: &mut ChaCha12Rng,
) -> Result<LossOutput> {
    let b = y0.dim().0;
    let t: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
    let eps4: Array4<f64> = Array4::from_shape_fn(y0.dim(), |_| rng.sample(StandardNormal));
    flow_match_loss_at(model, y0, context, &t, &eps4)
}

/// Ancestral sampling: iterates the learned reverse kernel from pure noise,
/// adding `sigma_t` noise at every step except the last.
pub fn ddpm_sample<M: DenoiseModel>(
    model: &M,
    context: &Array4<f64>,
    sched: &DiffusionSchedule,
    config: &TrajectoryConfig,
) -> Result<Array4<f64>> {
    if config.sampler != SamplerKind::Ddpm {
        return Err(Error::parameter("trajectory config is not ddpm"));
    }
    let (f, h, w) = model.target_shape();
    let b = context.dim().0;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut y = Array4::<f64>::from_shape_fn((b, f, h, w), |_| rng.sample(StandardNormal));
    for t in (0..sched.t_d()).rev() {
        let t_f: Vec<f64> = vec![t as f64; b];
        let eps_hat = predict(model, &y, &t_f, context)?;
        let beta = sched.beta(t);
        let alpha = 1.0 - beta;
        let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        ndarray::Zip::from(&mut y).and(&eps_hat).for_each(|yv, &ev| {
            *yv = inv_sqrt_alpha * (*yv - coef * ev);
        });
        if t > 0 {
            let sigma = sched.sigma(t);
            for v in y.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
        }
        require_finite(&y.clone().into_dyn(), t, "sampler state")?;
    }
    Ok(y)
}

/// Strided deterministic sampler over an evenly spaced sub-schedule;
/// `eta = 0` is a deterministic map from the initial noise, `eta > 0`
/// interpolates toward ancestral sampling.
pub fn ddim_sample<M: DenoiseModel>(
    model: &M,
    context: &Array4<f64>,
    sched: &DiffusionSchedule,
    config: &TrajectoryConfig,
) -> Result<Array4<f64>> {
    if config.sampler != SamplerKind::Ddim {
        return Err(Error::parameter("trajectory config is not ddim"));
    }
    if config.n_steps == 0 || config.n_steps > sched.t_d() {
        return Err(Error::parameter(format!(
            "n_steps {} must be in [1, {}]",
            config.n_steps,
            sched.t_d()
        )));
    }
    if config.eta < 0.0 {
        return Err(Error::parameter("eta must be non-negative"));
    }
    let s = config.n_steps;
    let taus: Vec<usize> = (0..s)
        .map(|j| ((j + 1) * sched.t_d()) / s - 1)
        .collect();
    let (f, h, w) = model.target_shape();
    let b = context.dim().0;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut y = Array4::<f64>::from_shape_fn((b, f, h, w), |_| rng.sample(StandardNormal));
    for j in (0..s).rev() {
        let t = taus[j];
        let a_t = sched.alpha_bar(t);
        let a_prev = if j > 0 { sched.alpha_bar(taus[j - 1]) } else { 1.0 };
        let t_f: Vec<f64> = vec![t as f64; b];
        let eps_hat = predict(model, &y, &t_f, context)?;
        let sigma = if j > 0 {
            config.eta
                * ((1.0 - a_prev) / (1.0 - a_t)).sqrt()
                * (1.0 - a_t / a_prev).sqrt()
        } else {
            0.0
        };
        let dir_coef = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
        let inv_sqrt_at = 1.0 / a_t.sqrt();
        let sqrt_one_minus_at = (1.0 - a_t).sqrt();
        let sqrt_a_prev = a_prev.sqrt();
        ndarray::Zip::from(&mut y).and(&eps_hat).for_each(|yv, &ev| {
            let x0 = (*yv - sqrt_one_minus_at * ev) * inv_sqrt_at;
            *yv = sqrt_a_prev * x0 + dir_coef * ev;
        });
        if sigma > 0.0 {
            for v in y.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
        }
        require_finite(&y.clone().into_dyn(), t, "sampler state")?;
    }
    Ok(y)
}

/// Euler integration of the learned velocity field from noise at t = 0 to
/// data at t = 1.
pub fn euler_flow_sample<M: DenoiseModel>(
    model: &M,
    context: &Array4<f64>,
    n_steps: usize,
    seed: u64,
) -> Result<Array4<f64>> {
    if n_steps == 0 {
        return Err(Error::parameter("n_steps must be >= 1"));
    }
    let (f, h, w) = model.target_shape();
    let b = context.dim().0;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut x = Array4::<f64>::from_shape_fn((b, f, h, w), |_| rng.sample(StandardNormal));
    let dt = 1.0 / n_steps as f64;
    for i in 0..n_steps {
        let t = i as f64 * dt;
        let t_f: Vec<f64> = vec![t; b];
        let v = predict(model, &x, &t_f, context)?;
        ndarray::Zip::from(&mut x).and(&v).for_each(|xv, &vv| {
            *xv += dt * vv;
        });
        require_finite(&x.clone().into_dyn(), i, "flow state")?;
    }
    Ok(x)
}

/// Dispatches on the configured sampler.
pub fn sample<M: DenoiseModel>(
    model: &M,
    context: &Array4<f64>,
    sched: &DiffusionSchedule,
    config: &TrajectoryConfig,
    regime: PredictionRegime,
) -> Result<Array4<f64>> {
    match (config.sampler, regime) {
        (SamplerKind::Ddpm, PredictionRegime::Epsilon) => ddpm_sample(model, context, sched, config),
        (SamplerKind::Ddim, PredictionRegime::Epsilon) => ddim_sample(model, context, sched, config),
        (SamplerKind::EulerFlow, PredictionRegime::Velocity) => {
            euler_flow_sample(model, context, config.n_steps, config.seed)
        }
        (s, r) => Err(Error::config(format!("sampler {s:?} incompatible with regime {r:?}"))),
    }
}

fn predict<M: DenoiseModel>(
    model: &M,
    y: &Array4<f64>,
    t: &[f64],
    context: &Array4<f64>,
) -> Result<Array4<f64>> {
    let mut g = Graph::new();
    let yn = g.constant(y.clone().into_dyn());
    let out = model.predict_into(&mut g, yn, t, context, false)?;
    g.value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|e| Error::parameter(format!("model output shape: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::NodeId;
    use crate::denoiser::{Denoiser, DenoiserConfig};
    use crate::nn::{AdamW, ParamStore};
    use ndarray::Array4;

    #[test]
    fn schedule_invariants_and_tail() {
        let s = DiffusionSchedule::make(1000, ScheduleKind::Linear, (1e-4, 2e-2)).unwrap();
        // Direct product oracle.
        let mut prod = 1.0;
        for t in 0..1000 {
            prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * t as f64 / 999.0);
        }
        assert!((s.alpha_bar(999) - prod).abs() < 1e-12);
        assert!(s.alpha_bar(999) < 0.01, "terminal alpha_bar {}", s.alpha_bar(999));
        for t in 1..1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!((s.sigma(10) - s.beta(10).sqrt()).abs() < 1e-15);

        let c = DiffusionSchedule::make(200, ScheduleKind::Cosine, (1e-5, 0.999)).unwrap();
        for t in 1..200 {
            assert!(c.alpha_bar(t) < c.alpha_bar(t - 1));
        }
    }

    #[test]
    fn schedule_rejects_bad_input() {
        assert!(DiffusionSchedule::make(1, ScheduleKind::Linear, (1e-4, 2e-2)).is_err());
        assert!(DiffusionSchedule::make(10, ScheduleKind::Linear, (0.0, 0.5)).is_err());
        assert!(DiffusionSchedule::make(10, ScheduleKind::Linear, (0.5, 0.2)).is_err());
        assert!(DiffusionSchedule::make(10, ScheduleKind::Linear, (0.5, 1.0)).is_err());
    }

    #[test]
    fn forward_noise_identities() {
        let sched = DiffusionSchedule::make(100, ScheduleKind::Linear, (1e-3, 0.1)).unwrap();
        let y0 = ArrayD::from_elem(ndarray::IxDyn(&[2, 3]), 0.7);
        let zero = ArrayD::zeros(ndarray::IxDyn(&[2, 3]));
        let s = forward_noise(&y0, 42, &zero, &sched).unwrap();
        let a = sched.alpha_bar(42).sqrt();
        for v in s.y_t.iter() {
            assert!((v - a * 0.7).abs() < 1e-14);
        }
        assert!(forward_noise(&y0, 100, &zero, &sched).is_err());
        let bad = ArrayD::zeros(ndarray::IxDyn(&[2, 4]));
        assert!(forward_noise(&y0, 2, &bad, &sched).is_err());
    }

    #[test]
    fn forward_noise_monte_carlo_statistics() {
        let sched = DiffusionSchedule::make(100, ScheduleKind::Linear, (1e-3, 0.1)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let y0 = ArrayD::from_shape_fn(ndarray::IxDyn(&[4, 4]), |_| rng.random_range(0.0..1.0));
        let draws = 10_000;
        for &t in &[5usize, 50, 95] {
            let a = sched.alpha_bar(t).sqrt();
            let var_expect = 1.0 - sched.alpha_bar(t);
            let mut sums = vec![0.0; 16];
            let mut sq_sums = vec![0.0; 16];
            for _ in 0..draws {
                let eps = standard_normal_like(&mut rng, &[4, 4]);
                let s = forward_noise(&y0, t, &eps, &sched).unwrap();
                for (i, v) in s.y_t.iter().enumerate() {
                    sums[i] += v;
                    sq_sums[i] += v * v;
                }
            }
            // Aggregate over the 16 pixels for tighter standard errors.
            let n = (draws * 16) as f64;
            let mean_dev: f64 = sums
                .iter()
                .enumerate()
                .map(|(i, s)| s / draws as f64 - a * y0.as_slice().unwrap()[i])
                .sum::<f64>()
                / 16.0;
            let se_mean = (var_expect / n).sqrt();
            assert!(
                mean_dev.abs() < 3.0 * se_mean,
                "t={t}: mean dev {mean_dev} exceeds 3 SE {se_mean}"
            );
            let var_est: f64 = sq_sums
                .iter()
                .enumerate()
                .map(|(i, sq)| {
                    let m = sums[i] / draws as f64;
                    sq / draws as f64 - m * m
                })
                .sum::<f64>()
                / 16.0;
            // SE of the sample variance of a normal: var * sqrt(2/(n-1)).
            let se_var = var_expect * (2.0 / (n - 1.0)).sqrt();
            assert!(
                (var_est - var_expect).abs() < 3.0 * se_var,
                "t={t}: var {var_est} vs {var_expect} (3 SE = {})",
                3.0 * se_var
            );
        }
    }

    /// Stub predicting a fixed tensor regardless of input.
    struct FixedOutput(Array4<f64>);
    impl DenoiseModel for FixedOutput {
        fn predict_into(
            &self,
            g: &mut Graph,
            _y_t: NodeId,
            _t: &[f64],
            _context: &Array4<f64>,
            _trainable: bool,
        ) -> Result<NodeId> {
            Ok(g.constant(self.0.clone().into_dyn()))
        }
        fn target_shape(&self) -> (usize, usize, usize) {
            let d = self.0.dim();
            (d.1, d.2, d.3)
        }
    }

    use crate::testkit::LinearStub;

    fn small_batch(seed: u64) -> (Array4<f64>, Array4<f64>, Array4<f64>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let y0 = Array4::from_shape_fn((2, 2, 4, 4), |_| rng.random_range(0.0..1.0));
        let ctx = Array4::from_shape_fn((2, 2, 4, 4), |_| rng.random_range(0.0..1.0));
        let eps = Array4::from_shape_fn((2, 2, 4, 4), |_| rng.sample(StandardNormal));
        (y0, ctx, eps)
    }

    #[test]
    fn ddpm_loss_oracle_and_zero_stub() {
        let sched = DiffusionSchedule::make(100, ScheduleKind::Linear, (1e-3, 0.1)).unwrap();
        let (y0, ctx, eps) = small_batch(1);
        let t = vec![3usize, 77];
        // Oracle predicting the injected noise has zero loss.
        let oracle = FixedOutput(eps.clone());
        let out = ddpm_loss_at(&oracle, &y0, &ctx, &t, &eps, &sched).unwrap();
        assert!(out.value.abs() < 1e-24);
        // Zero predictor pays the noise energy exactly.
        let zero = FixedOutput(Array4::zeros((2, 2, 4, 4)));
        let out = ddpm_loss_at(&zero, &y0, &ctx, &t, &eps, &sched).unwrap();
        let expect = eps.iter().map(|v| v * v).sum::<f64>() / eps.len() as f64;
        assert!((out.value - expect).abs() < 1e-12);
        // And over random draws it is close to 1 per element.
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut acc = 0.0;
        let n = 200;
        for _ in 0..n {
            acc += ddpm_loss(&zero, &y0, &ctx, &sched, &mut rng).unwrap().value;
        }
        let mean = acc / n as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean loss {mean}");
    }

    fn fd_check_loss<F>(eval: F, params: &ParamStore, analytic: &Grads, tol: f64)
    where
        F: Fn(&ParamStore) -> f64,
    {
        let h = 1e-4;
        for (name, value) in params.iter() {
            for flat in 0..value.len() {
                let mut plus = params.clone();
                plus.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] += h;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic[name].as_slice().unwrap()[flat];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    ((fd - an) / denom).abs() < tol,
                    "{name}[{flat}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn ddpm_loss_gradient_matches_finite_differences() {
        let sched = DiffusionSchedule::make(100, ScheduleKind::Linear, (1e-3, 0.1)).unwrap();
        let (y0, ctx, eps) = small_batch(3);
        let t = vec![10usize, 60];
        let stub = LinearStub::new(0.4, -0.2, (2, 4, 4));
        let out = ddpm_loss_at(&stub, &y0, &ctx, &t, &eps, &sched).unwrap();
        fd_check_loss(
            |p| {
                let s = LinearStub::with_params(p.clone(), (2, 4, 4));
                ddpm_loss_at(&s, &y0, &ctx, &t, &eps, &sched).unwrap().value
            },
            &stub.params,
            &out.grads,
            1e-3,
        );
    }

    #[test]
    fn flow_match_oracle_and_zero() {
        let (y0, ctx, eps) = small_batch(4);
        let t = vec![0.3, 0.8];
        let oracle = FixedOutput(&y0 - &eps);
        let out = flow_match_loss_at(&oracle, &y0, &ctx, &t, &eps).unwrap();
        assert!(out.value.abs() < 1e-24);
        let zero = FixedOutput(Array4::zeros((2, 2, 4, 4)));
        let out = flow_match_loss_at(&zero, &y0, &ctx, &t, &eps).unwrap();
        let expect = (&y0 - &eps).iter().map(|v| v * v).sum::<f64>() / y0.len() as f64;
        assert!((out.value - expect).abs() < 1e-12);
        // Monte-Carlo: zero predictor loss approaches E||y0 - eps||^2.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut acc = 0.0;
        let n = 300;
        for _ in 0..n {
            acc += flow_match_loss(&zero, &y0, &ctx, &mut rng).unwrap().value;
        }
        let mean = acc / n as f64;
        let y0_sq = y0.iter().map(|v| v * v).sum::<f64>() / y0.len() as f64;
        // E||y0 - eps||^2 per element = E[y0^2] + 1.
        assert!((mean - (y0_sq + 1.0)).abs() < 0.1, "mean {mean} vs {}", y0_sq + 1.0);
    }

    #[test]
    fn flow_match_gradient_matches_finite_differences() {
        let (y0, ctx, eps) = small_batch(6);
        let t = vec![0.25, 0.6];
        let stub = LinearStub::new(-0.3, 0.5, (2, 4, 4));
        let out = flow_match_loss_at(&stub, &y0, &ctx, &t, &eps).unwrap();
        fd_check_loss(
            |p| {
                let s = LinearStub::with_params(p.clone(), (2, 4, 4));
                flow_match_loss_at(&s, &y0, &ctx, &t, &eps).unwrap().value
            },
            &stub.params,
            &out.grads,
            1e-3,
        );
    }

    #[test]
    fn euler_flow_constant_velocity_is_exact() {
        let c = 0.37;
        let stub = FixedOutput(Array4::from_elem((1, 2, 4, 4), c));
        let ctx = Array4::zeros((1, 2, 4, 4));
        for n_steps in [1usize, 3, 10] {
            let out = euler_flow_sample(&stub, &ctx, n_steps, 7).unwrap();
            // Output must equal initial noise + c exactly.
            let mut rng = ChaCha12Rng::seed_from_u64(7);
            let x0 = Array4::<f64>::from_shape_fn((1, 2, 4, 4), |_| rng.sample(StandardNormal));
            for (o, x) in out.iter().zip(x0.iter()) {
                assert!((o - (x + c)).abs() < 1e-12);
            }
        }
        assert!(euler_flow_sample(&stub, &ctx, 0, 7).is_err());
    }

    /// Velocity that depends on time only: v(t) = cos(3t), so Euler error
    /// decays at first order.
    struct CosVelocity;
    impl DenoiseModel for CosVelocity {
        fn predict_into(
            &self,
            g: &mut Graph,
            _y_t: NodeId,
            t: &[f64],
            _context: &Array4<f64>,
            _trainable: bool,
        ) -> Result<NodeId> {
            let v = Array4::from_elem((t.len(), 2, 4, 4), (3.0 * t[0]).cos());
            Ok(g.constant(v.into_dyn()))
        }
        fn target_shape(&self) -> (usize, usize, usize) {
            (2, 4, 4)
        }
    }

    #[test]
    fn euler_flow_first_order_convergence() {
        let ctx = Array4::zeros((1, 2, 4, 4));
        let at = |n: usize| euler_flow_sample(&CosVelocity, &ctx, n, 3).unwrap();
        let d = |a: &Array4<f64>, b: &Array4<f64>| -> f64 {
            a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
        };
        let coarse = at(8);
        let mid = at(16);
        let fine = at(32);
        let change_coarse = d(&mid, &coarse);
        let change_fine = d(&fine, &mid);
        assert!(
            change_fine < change_coarse,
            "halving the step did not shrink the update: {change_fine} vs {change_coarse}"
        );
        // Empirical order >= 1 within slack.
        let order = (change_coarse / change_fine).log2();
        assert!(order > 0.8, "empirical order {order}");
    }

    #[test]
    fn samplers_are_deterministic_given_seed() {
        let model = Denoiser::init(DenoiserConfig::micro(), 50).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        let ctx = Array4::from_shape_fn((1, 2, 8, 8), |_| rng.random_range(0.0..1.0));
        let sched = DiffusionSchedule::make(40, ScheduleKind::Linear, (1e-3, 0.1)).unwrap();

        let ddim_cfg = TrajectoryConfig { sampler: SamplerKind::Ddim, n_steps: 10, eta: 0.0, seed: 9 };
        let a = ddim_sample(&model, &ctx, &sched, &ddim_cfg).unwrap();
        let b = ddim_sample(&model, &ctx, &sched, &ddim_cfg).unwrap();
        assert_eq!(a, b, "ddim eta=0 must be bit-identical");

        let ddpm_cfg = TrajectoryConfig { sampler: SamplerKind::Ddpm, n_steps: 40, eta: 1.0, seed: 9 };
        let a = ddpm_sample(&model, &ctx, &sched, &ddpm_cfg).unwrap();
        let b = ddpm_sample(&model, &ctx, &sched, &ddpm_cfg).unwrap();
        assert_eq!(a, b, "ddpm must be bit-identical for a fixed seed");
        let c = ddpm_sample(
            &model,
            &ctx,
            &sched,
            &TrajectoryConfig { seed: 10, ..ddpm_cfg },
        )
        .unwrap();
        assert_ne!(a, c, "different seeds should differ");

        let mut flow_cfg = DenoiserConfig::micro();
        flow_cfg.regime = PredictionRegime::Velocity;
        let fmodel = Denoiser::init(flow_cfg, 52).unwrap();
        let a = euler_flow_sample(&fmodel, &ctx, 8, 3).unwrap();
        let b = euler_flow_sample(&fmodel, &ctx, 8, 3).unwrap();
        assert_eq!(a, b, "euler flow must be bit-identical");
    }

    #[test]
    fn ddim_rejects_too_many_steps() {
        let model = Denoiser::init(DenoiserConfig::micro(), 53).unwrap();
        let ctx = Array4::zeros((1, 2, 8, 8));
        let sched = DiffusionSchedule::make(10, ScheduleKind::Linear, (1e-3, 0.1)).unwrap();
        let cfg = TrajectoryConfig { sampler: SamplerKind::Ddim, n_steps: 11, eta: 0.0, seed: 0 };
        assert!(ddim_sample(&model, &ctx, &sched, &cfg).is_err());
    }

    /// Trains a micro model on a single fixed (context, target) pair.
    fn fit_delta_model(steps: usize, seed: u64) -> (Denoiser, Array4<f64>, Array4<f64>, DiffusionSchedule) {
        let mut cfg = DenoiserConfig::micro();
        cfg.norm_groups = 2;
        let mut model = Denoiser::init(cfg, seed).unwrap();
        let sched = DiffusionSchedule::make(100, ScheduleKind::Linear, (1e-3, 0.1)).unwrap();
        // A fixed blob target and a fixed context.
        let target = Array4::from_shape_fn((1, 2, 8, 8), |(_, f, y, x)| {
            let dy = y as f64 - 4.0;
            let dx = x as f64 - 3.0 - f as f64;
            (0.9 * (-(dx * dx + dy * dy) / 6.0).exp()).clamp(0.0, 1.0)
        });
        let ctx = Array4::from_shape_fn((1, 2, 8, 8), |(_, f, y, x)| {
            let dy = y as f64 - 4.0;
            let dx = x as f64 - 1.0 - f as f64;
            (0.9 * (-(dx * dx + dy * dy) / 6.0).exp()).clamp(0.0, 1.0)
        });
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xabcd);
        let mut opt = AdamW::new(2e-3, 0.9, 0.95, 0.0);
        for _ in 0..steps {
            let out = ddpm_loss(&model, &target, &ctx, &sched, &mut rng).unwrap();
            opt.update(&mut model.params, &out.grads).unwrap();
        }
        (model, target, ctx, sched)
    }

    fn mae(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn trained_model_concentrates_near_delta_target() {
        let (trained, target, ctx, sched) = fit_delta_model(350, 60);
        let (untrained, _, _, _) = fit_delta_model(0, 60);
        let cfg = TrajectoryConfig { sampler: SamplerKind::Ddpm, n_steps: 100, eta: 1.0, seed: 61 };
        let mut mae_trained = 0.0;
        let mut mae_untrained = 0.0;
        for s in 0..4u64 {
            let c = TrajectoryConfig { seed: 61 + s, ..cfg.clone() };
            mae_trained += mae(&ddpm_sample(&trained, &ctx, &sched, &c).unwrap(), &target);
            mae_untrained += mae(&ddpm_sample(&untrained, &ctx, &sched, &c).unwrap(), &target);
        }
        assert!(
            mae_trained < 0.5 * mae_untrained,
            "training did not concentrate samples: {mae_trained} vs {mae_untrained}"
        );
    }

    #[test]
    fn ddim_full_depth_consistent_with_ddpm() {
        let (trained, target, ctx, sched) = fit_delta_model(350, 62);
        let n = 8u64;
        let mut ddpm_mae = 0.0;
        let mut ddim_mae = 0.0;
        for s in 0..n {
            let pcfg = TrajectoryConfig { sampler: SamplerKind::Ddpm, n_steps: 100, eta: 1.0, seed: 70 + s };
            ddpm_mae += mae(&ddpm_sample(&trained, &ctx, &sched, &pcfg).unwrap(), &target);
            let icfg = TrajectoryConfig { sampler: SamplerKind::Ddim, n_steps: 100, eta: 1.0, seed: 70 + s };
            ddim_mae += mae(&ddim_sample(&trained, &ctx, &sched, &icfg).unwrap(), &target);
        }
        ddpm_mae /= n as f64;
        ddim_mae /= n as f64;
        let rel = (ddim_mae - ddpm_mae).abs() / ddpm_mae;
        assert!(rel < 0.10, "ddim {ddim_mae} vs ddpm {ddpm_mae} (rel {rel})");
    }
}
