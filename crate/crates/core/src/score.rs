//! Diffusion-side machinery: variance-preserving noise schedule, forward
//! perturbation, classifier-free guidance arithmetic, timestep selection,
//! analytic score providers, and the score-distillation image gradient.
//!
//! The analytic point-mass provider is the optimal denoiser for a
//! point-mass data distribution at a target image; it stands in for a
//! pretrained 2D model. The unconditional branch assumes a standard-normal
//! data prior so classifier-free guidance has a nontrivial difference term.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::Image;
use crate::{Error, Result};

/// Variance-preserving schedule: alpha_t^2 + sigma_t^2 = 1 for t in 1..=T,
/// with alpha strictly decreasing and sigma strictly increasing.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// 1-indexed, matching the diffusion step convention.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.alpha.len(), "step {t} out of range");
        self.alpha[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.sigma.len(), "step {t} out of range");
        self.sigma[t - 1]
    }
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear beta ramp; alpha_t = sqrt(prod(1 - beta_s)), sigma_t =
/// sqrt(1 - alpha_t^2).
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config {
            key: "score.steps".into(),
            message: "step count must be >= 1".into(),
        });
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config {
            key: "score.beta".into(),
            message: format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"),
        });
    }
    let mut alpha = Vec::with_capacity(steps);
    let mut sigma = Vec::with_capacity(steps);
    let mut alpha_bar = 1.0;
    for t in 0..steps {
        let frac = if steps == 1 {
            0.0
        } else {
            t as f64 / (steps - 1) as f64
        };
        let beta = beta_start + (beta_end - beta_start) * frac;
        alpha_bar *= 1.0 - beta;
        alpha.push(alpha_bar.sqrt());
        sigma.push((1.0 - alpha_bar).sqrt());
    }
    Ok(DiffusionSchedule { alpha, sigma })
}

pub fn default_schedule() -> DiffusionSchedule {
    make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
}

/// Conditioning signal: EMPTY selects the unconditional branch; analytic
/// providers condition on a target image carried by the token.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionToken {
    Empty,
    Target(Arc<Image>),
}

impl ConditionToken {
    pub fn target(image: Image) -> Self {
        ConditionToken::Target(Arc::new(image))
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, ConditionToken::Empty)
    }
}

/// Noise-prediction interface standing in for the 2D diffusion model.
pub trait ScoreProvider: Send + Sync {
    fn predict_noise(&self, z_t: &Image, t: usize, y: &ConditionToken) -> Result<Image>;
}

/// Optimal denoiser for a point mass at the token's target image;
/// unconditional branch is the optimal denoiser for a standard-normal data
/// prior: z_t * sigma_t / (alpha_t^2 + sigma_t^2).
#[derive(Clone)]
pub struct PointMassProvider {
    pub schedule: Arc<DiffusionSchedule>,
}

impl PointMassProvider {
    pub fn new(schedule: Arc<DiffusionSchedule>) -> Self {
        PointMassProvider { schedule }
    }
}

impl ScoreProvider for PointMassProvider {
    fn predict_noise(&self, z_t: &Image, t: usize, y: &ConditionToken) -> Result<Image> {
        let alpha = self.schedule.alpha(t);
        let sigma = self.schedule.sigma(t);
        match y {
            ConditionToken::Empty => {
                let scale = sigma / (alpha * alpha + sigma * sigma);
                let mut out = z_t.clone();
                out.scale(scale);
                Ok(out)
            }
            ConditionToken::Target(x_star) => {
                z_t.check_same_shape(x_star, "point-mass target")?;
                let mut out = z_t.clone();
                for (o, &x) in out.data.iter_mut().zip(&x_star.data) {
                    *o = (*o - alpha * x) / sigma;
                }
                Ok(out)
            }
        }
    }
}

/// Forward perturbation: z_t = alpha_t x + sigma_t eps.
pub fn perturb(x: &Image, t: usize, eps: &Image, schedule: &DiffusionSchedule) -> Result<Image> {
    x.check_same_shape(eps, "perturb noise")?;
    let alpha = schedule.alpha(t);
    let sigma = schedule.sigma(t);
    let mut out = x.clone();
    for (o, &e) in out.data.iter_mut().zip(&eps.data) {
        *o = alpha * *o + sigma * e;
    }
    Ok(out)
}

/// Classifier-free guidance blend: (1+s) e_cond - s e_uncond, evaluated
/// as e_cond + s (e_cond - e_uncond) so equal inputs return exactly.
pub fn cfg_combine(e_cond: &Image, e_uncond: &Image, s: f64) -> Result<Image> {
    e_cond.check_same_shape(e_uncond, "cfg combine")?;
    let mut out = e_cond.clone();
    for (o, &u) in out.data.iter_mut().zip(&e_uncond.data) {
        *o += s * (*o - u);
    }
    Ok(out)
}

/// Nonnegative weighting over diffusion steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightSchedule {
    Constant(f64),
    SigmaSquared,
    /// Ramp in t, clamped to [0,1] between the two endpoints, then scaled.
    TruncatedRamp { t_lo: usize, t_hi: usize, scale: f64 },
}

impl WeightSchedule {
    pub fn eval(&self, t: usize, schedule: &DiffusionSchedule) -> f64 {
        match *self {
            WeightSchedule::Constant(c) => c,
            WeightSchedule::SigmaSquared => {
                let s = schedule.sigma(t);
                s * s
            }
            WeightSchedule::TruncatedRamp { t_lo, t_hi, scale } => {
                if t_hi <= t_lo {
                    return scale;
                }
                let f = (t as f64 - t_lo as f64) / (t_hi as f64 - t_lo as f64);
                scale * f.clamp(0.0, 1.0)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            WeightSchedule::Constant(c) => c >= 0.0,
            WeightSchedule::SigmaSquared => true,
            WeightSchedule::TruncatedRamp { scale, .. } => scale >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config {
                key: "score.weight".into(),
                message: "weights must be nonnegative".into(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestepStrategy {
    UniformRandom,
    /// Deterministic ramp from 0.98 T down to 0.02 T across the run.
    LinearDescending,
}

/// Select the diffusion step for one iteration; deterministic given seed.
pub fn sample_timestep(
    strategy: TimestepStrategy,
    iteration: usize,
    total_iterations: usize,
    steps: usize,
    seed: u64,
) -> usize {
    assert!(iteration < total_iterations.max(1));
    match strategy {
        TimestepStrategy::UniformRandom => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_add((iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            rng.random_range(1..=steps)
        }
        TimestepStrategy::LinearDescending => {
            let frac = if total_iterations <= 1 {
                0.0
            } else {
                iteration as f64 / (total_iterations - 1) as f64
            };
            let tf = (0.98 - 0.96 * frac) * steps as f64;
            (tf.round() as usize).clamp(1, steps)
        }
    }
}

/// The score-distillation gradient with respect to the rendered image:
/// w(t) (e_hat - eps), where e_hat is the CFG-combined prediction at
/// z_t = perturb(x, t, eps). The latent encoder is the identity, so this
/// is also the gradient with respect to the render; callers chain it
/// through the rasterizer and marching-tet adjoints.
#[allow(clippy::too_many_arguments)]
pub fn sds_image_gradient(
    provider: &dyn ScoreProvider,
    x: &Image,
    y: &ConditionToken,
    t: usize,
    eps: &Image,
    cfg_scale: f64,
    weight: &WeightSchedule,
    schedule: &DiffusionSchedule,
) -> Result<Image> {
    let z_t = perturb(x, t, eps, schedule)?;
    let e_cond = provider.predict_noise(&z_t, t, y)?;
    e_cond.check_same_shape(x, "provider output")?;
    let e_uncond = provider.predict_noise(&z_t, t, &ConditionToken::Empty)?;
    e_uncond.check_same_shape(x, "provider output")?;
    let mut grad = cfg_combine(&e_cond, &e_uncond, cfg_scale)?;
    let w = weight.eval(t, schedule);
    for (g, &e) in grad.data.iter_mut().zip(&eps.data) {
        *g = w * (*g - e);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_from(vals: &[f64], h: usize, w: usize) -> Image {
        Image {
            height: h,
            width: w,
            channels: 1,
            data: vals.to_vec(),
        }
    }

    #[test]
    fn schedule_endpoints_and_identity() {
        let s = default_schedule();
        assert_eq!(s.len(), 1000);
        // alpha_1 = sqrt(1 - beta_start)
        assert!((s.alpha(1) - (1.0f64 - 1e-4).sqrt()).abs() < 1e-12);
        for t in 1..=s.len() {
            let a = s.alpha(t);
            let sg = s.sigma(t);
            assert!((a * a + sg * sg - 1.0).abs() <= 1e-9);
        }
        for t in 2..=s.len() {
            assert!(s.alpha(t) < s.alpha(t - 1));
            assert!(s.sigma(t) > s.sigma(t - 1));
        }
    }

    #[test]
    fn make_schedule_rejects_bad_betas() {
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn perturb_and_reconstruct() {
        let s = default_schedule();
        let x = image_from(&[0.2, -0.4, 0.9, 0.0], 2, 2);
        let zero = image_from(&[0.0; 4], 2, 2);
        let eps = image_from(&[1.0, -0.5, 0.25, 2.0], 2, 2);
        let t = 400;
        // eps = 0 gives the Gaussian mean alpha_t x
        let z0 = perturb(&x, t, &zero, &s).unwrap();
        for (z, &xv) in z0.data.iter().zip(&x.data) {
            assert!((z - s.alpha(t) * xv).abs() < 1e-15);
        }
        // algebraic inversion
        let z = perturb(&x, t, &eps, &s).unwrap();
        for ((zv, &ev), &xv) in z.data.iter().zip(&eps.data).zip(&x.data) {
            let back = (zv - s.sigma(t) * ev) / s.alpha(t);
            assert!((back - xv).abs() <= 1e-9);
        }
        // near-terminal step is almost pure noise
        let zt = perturb(&x, 1000, &eps, &s).unwrap();
        for (zv, &ev) in zt.data.iter().zip(&eps.data) {
            assert!((zv - ev).abs() < 0.05);
        }
    }

    #[test]
    fn cfg_combine_identities() {
        let a = image_from(&[0.5, -1.0, 2.0], 1, 3);
        let b = image_from(&[1.0, 0.0, -2.0], 1, 3);
        let off = cfg_combine(&a, &b, 0.0).unwrap();
        assert_eq!(off, a);
        let same = cfg_combine(&a, &a, 50.0).unwrap();
        assert_eq!(same, a);
        let mixed = cfg_combine(&a, &b, 2.0).unwrap();
        for i in 0..3 {
            assert!((mixed.data[i] - (3.0 * a.data[i] - 2.0 * b.data[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn point_mass_recovers_injected_noise() {
        let s = Arc::new(default_schedule());
        let provider = PointMassProvider::new(s.clone());
        let x_star = image_from(&[0.3, 0.7, -0.2, 0.05], 2, 2);
        let eps = image_from(&[0.9, -1.3, 0.4, 0.0], 2, 2);
        for t in [1, 250, 999] {
            let z = perturb(&x_star, t, &eps, &s).unwrap();
            let pred = provider
                .predict_noise(&z, t, &ConditionToken::target(x_star.clone()))
                .unwrap();
            for (p, &e) in pred.data.iter().zip(&eps.data) {
                assert!((p - e).abs() <= 1e-12, "t={t}: {p} vs {e}");
            }
        }
    }

    #[test]
    fn point_mass_zero_target_is_scaled_z() {
        let s = Arc::new(default_schedule());
        let provider = PointMassProvider::new(s.clone());
        let z = image_from(&[0.5, -0.25], 1, 2);
        let t = 100;
        let pred = provider
            .predict_noise(&z, t, &ConditionToken::target(image_from(&[0.0, 0.0], 1, 2)))
            .unwrap();
        for (p, &zv) in pred.data.iter().zip(&z.data) {
            assert!((p - zv / s.sigma(t)).abs() < 1e-15);
        }
    }

    #[test]
    fn unconditional_matches_score_relation() {
        // -prediction / sigma must equal the true score of the perturbed
        // standard-normal prior: -z / (alpha^2 + sigma^2)
        let s = Arc::new(default_schedule());
        let provider = PointMassProvider::new(s.clone());
        let z = image_from(&[0.8, -0.1, 0.33], 1, 3);
        let t = 321;
        let pred = provider.predict_noise(&z, t, &ConditionToken::Empty).unwrap();
        let var = s.alpha(t).powi(2) + s.sigma(t).powi(2);
        for (p, &zv) in pred.data.iter().zip(&z.data) {
            let score_from_pred = -p / s.sigma(t);
            let true_score = -zv / var;
            assert!((score_from_pred - true_score).abs() <= 1e-12);
        }
    }

    #[test]
    fn sds_residual_vanishes_at_target_with_zero_cfg() {
        let s = Arc::new(default_schedule());
        let provider = PointMassProvider::new(s.clone());
        let x_star = image_from(&[0.6, 0.1, -0.8, 0.2], 2, 2);
        let eps = image_from(&[1.1, -0.4, 0.0, 0.7], 2, 2);
        let grad = sds_image_gradient(
            &provider,
            &x_star,
            &ConditionToken::target(x_star.clone()),
            500,
            &eps,
            0.0,
            &WeightSchedule::SigmaSquared,
            &s,
        )
        .unwrap();
        assert!(grad.norm_l2() <= 1e-12);
    }

    #[test]
    fn sds_gradient_closed_form_with_zero_cfg() {
        // for the point-mass provider at s=0:
        // grad = w(t) (alpha/sigma) (x - x_star)
        let s = Arc::new(default_schedule());
        let provider = PointMassProvider::new(s.clone());
        let x = image_from(&[0.9, -0.3, 0.0, 0.5], 2, 2);
        let x_star = image_from(&[0.1, 0.2, 0.3, 0.4], 2, 2);
        let eps = image_from(&[0.33, -1.0, 0.5, 0.0], 2, 2);
        let t = 700;
        let w = WeightSchedule::SigmaSquared;
        let grad = sds_image_gradient(
            &provider,
            &x,
            &ConditionToken::target(x_star.clone()),
            t,
            &eps,
            0.0,
            &w,
            &s,
        )
        .unwrap();
        let coeff = w.eval(t, &s) * s.alpha(t) / s.sigma(t);
        for ((g, &xv), &xs) in grad.data.iter().zip(&x.data).zip(&x_star.data) {
            assert!((g - coeff * (xv - xs)).abs() <= 1e-12);
        }
    }

    #[test]
    fn timestep_strategies() {
        let t0 = sample_timestep(TimestepStrategy::LinearDescending, 0, 300, 1000, 0);
        assert_eq!(t0, 980);
        let t_last = sample_timestep(TimestepStrategy::LinearDescending, 299, 300, 1000, 0);
        assert_eq!(t_last, 20);
        let a: Vec<usize> = (0..20)
            .map(|i| sample_timestep(TimestepStrategy::UniformRandom, i, 20, 1000, 7))
            .collect();
        let b: Vec<usize> = (0..20)
            .map(|i| sample_timestep(TimestepStrategy::UniformRandom, i, 20, 1000, 7))
            .collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|&t| (1..=1000).contains(&t)));
    }

    #[test]
    fn weight_schedules_nonnegative() {
        let s = default_schedule();
        for t in [1, 500, 1000] {
            assert!(WeightSchedule::SigmaSquared.eval(t, &s) >= 0.0);
            assert!(WeightSchedule::Constant(2.0).eval(t, &s) == 2.0);
            let r = WeightSchedule::TruncatedRamp {
                t_lo: 200,
                t_hi: 800,
                scale: 3.0,
            };
            let v = r.eval(t, &s);
            assert!((0.0..=3.0).contains(&v));
        }
    }
}
