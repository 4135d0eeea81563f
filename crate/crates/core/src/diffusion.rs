//! Noise schedules, the forward noising process, timestep sampling and the
//! deterministic DDIM reverse update.

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ScheduleKind {
    /// Betas linearly spaced in `[beta_start, beta_end]`.
    Linear { beta_start: f64, beta_end: f64 },
    /// Squared-cosine cumulative schedule with offset `s`; betas clipped at
    /// 0.999.
    Cosine { s: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Linear {
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::default(),
        }
    }
}

/// Cumulative signal fractions `alpha_t` for `t = 1..=T`, strictly
/// decreasing. `alpha_0 = 1` by convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    alpha_cum: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        make_schedule(config.steps, config.kind)
    }

    pub fn steps(&self) -> usize {
        self.alpha_cum.len()
    }

    /// `alpha_t`; `t = 0` returns 1.
    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_cum[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha_cum
    }

    /// Builds a schedule directly from cumulative alphas, validating them.
    pub fn from_alphas(kind: ScheduleKind, alpha_cum: Vec<f64>) -> Result<Self> {
        ensure!(!alpha_cum.is_empty(), Config, "schedule needs at least one step");
        for (i, &a) in alpha_cum.iter().enumerate() {
            ensure!(a > 0.0 && a < 1.0 && a.is_finite(), Config, "alpha_{} = {a} is outside (0, 1)", i + 1);
            if i > 0 {
                ensure!(a < alpha_cum[i - 1], Config, "schedule is not strictly decreasing at t = {}", i + 1);
            }
        }
        Ok(Self { kind, alpha_cum })
    }

    /// `steps` evenly spaced inference timesteps in descending order,
    /// e.g. `T = 1000, steps = 50 -> [981, 961, ..., 1]`.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        ensure!(steps >= 1 && steps <= t, InvalidArgument, "inference steps {steps} must be in 1..={t}");
        let ratio = t / steps;
        Ok((0..steps).rev().map(|k| 1 + k * ratio).collect())
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    ensure!(steps >= 1, Config, "schedule.steps must be >= 1");
    let alphas = match kind {
        ScheduleKind::Linear { beta_start, beta_end } => {
            let mut acc = 1.0;
            (0..steps)
                .map(|i| {
                    let beta = if steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                    };
                    acc *= 1.0 - beta;
                    acc
                })
                .collect()
        }
        ScheduleKind::Cosine { s } => {
            let f = |t: f64| (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            let mut acc = 1.0;
            (1..=steps)
                .map(|t| {
                    let beta = (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(0.0, 0.999);
                    acc *= 1.0 - beta;
                    acc
                })
                .collect()
        }
    };
    NoiseSchedule::from_alphas(kind, alphas)
}

/// `x_t = sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps`, elementwise.
pub fn diffuse<F: Float>(x0: &[F], t: usize, eps: &[F], sched: &NoiseSchedule) -> Result<Vec<F>> {
    ensure!(x0.len() == eps.len(), Shape, "x0 has {} elements, eps {}", x0.len(), eps.len());
    ensure!(t >= 1 && t <= sched.steps(), InvalidArgument, "timestep {t} outside 1..={}", sched.steps());
    Ok(diffuse_with_alpha(x0, eps, sched.alpha(t)))
}

pub(crate) fn diffuse_with_alpha<F: Float>(x0: &[F], eps: &[F], alpha: f64) -> Vec<F> {
    let a = F::from(alpha.sqrt()).unwrap();
    let b = F::from((1.0 - alpha).sqrt()).unwrap();
    x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect()
}

/// Draws `t` uniformly from `1..=T`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, sched: &NoiseSchedule) -> usize {
    rng.gen_range(1..=sched.steps())
}

/// Deterministic DDIM update from `t` to `t_prev` (`t_prev = 0` yields the
/// clean estimate). Only `eta = 0` is supported.
pub fn ddim_step<F: Float>(
    x_t: &[F],
    eps_pred: &[F],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
) -> Result<Vec<F>> {
    ensure!(x_t.len() == eps_pred.len(), Shape, "x_t has {} elements, eps_pred {}", x_t.len(), eps_pred.len());
    ensure!(t_prev < t, InvalidArgument, "t_prev ({t_prev}) must be < t ({t})");
    ensure!(t <= sched.steps(), InvalidArgument, "timestep {t} outside 1..={}", sched.steps());
    ensure!((0.0..=1.0).contains(&eta), InvalidArgument, "eta must be in [0, 1], got {eta}");
    ensure!(eta == 0.0, InvalidArgument, "stochastic DDIM (eta > 0) is not supported");
    let at = sched.alpha(t);
    let ap = sched.alpha(t_prev);
    let sa = F::from(at.sqrt()).unwrap();
    let sb = F::from((1.0 - at).sqrt()).unwrap();
    let pa = F::from(ap.sqrt()).unwrap();
    let pb = F::from((1.0 - ap).sqrt()).unwrap();
    Ok(x_t
        .iter()
        .zip(eps_pred)
        .map(|(&x, &e)| {
            let x0_hat = (x - sb * e) / sa;
            pa * x0_hat + pb * e
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::new(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn linear_default_first_alpha() {
        let s = default_schedule();
        assert!((s.alpha(1) - (1.0 - 1e-4)).abs() < 1e-15);
        assert!(s.alphas().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn single_step_schedules() {
        for kind in [ScheduleKind::default(), ScheduleKind::Cosine { s: 0.008 }] {
            let s = make_schedule(1, kind).unwrap();
            assert_eq!(s.steps(), 1);
        }
        assert!(make_schedule(0, ScheduleKind::default()).is_err());
    }

    #[test]
    fn cosine_and_linear_at_fifty_are_monotone() {
        for kind in [ScheduleKind::default(), ScheduleKind::Cosine { s: 0.008 }] {
            let s = make_schedule(50, kind).unwrap();
            assert!(s.alphas().windows(2).all(|w| w[1] < w[0]));
            assert!(s.alphas().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn bad_betas_are_rejected() {
        let kind = ScheduleKind::Linear { beta_start: 0.0, beta_end: 0.02 };
        assert!(make_schedule(10, kind).is_err());
        let kind = ScheduleKind::Linear { beta_start: 0.5, beta_end: 1.5 };
        assert!(make_schedule(10, kind).is_err());
    }

    #[test]
    fn diffuse_arithmetic() {
        let s = NoiseSchedule::from_alphas(ScheduleKind::default(), vec![0.25]).unwrap();
        let xt = diffuse(&[1.0f64], 1, &[1.0], &s).unwrap();
        assert!((xt[0] - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);
        let xt = diffuse(&[0.8f64], 1, &[0.0], &s).unwrap();
        assert!((xt[0] - 0.4).abs() < 1e-12);
        let near_one = NoiseSchedule::from_alphas(ScheduleKind::default(), vec![1.0 - 1e-12]).unwrap();
        let xt = diffuse(&[0.3f64], 1, &[2.0], &near_one).unwrap();
        assert!((xt[0] - 0.3).abs() < 1e-5);
        assert!(diffuse(&[0.0f64; 2], 1, &[0.0], &s).is_err());
        assert!(diffuse(&[0.0f64], 2, &[0.0], &s).is_err());
        assert!(diffuse(&[0.0f64], 0, &[0.0], &s).is_err());
    }

    #[test]
    fn timestep_frequencies_pass_chi_square() {
        let s = make_schedule(10, ScheduleKind::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut bins = [0usize; 10];
        for _ in 0..n {
            bins[sample_timestep(&mut rng, &s) - 1] += 1;
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 = bins.iter().map(|&b| (b as f64 - expected).powi(2) / expected).sum();
        // 9 degrees of freedom, p = 0.001 critical value.
        assert!(chi2 < 27.88, "chi2 = {chi2}");
        for b in bins {
            assert!((b as f64 / n as f64 - 0.1).abs() <= 0.01);
        }
        let one = make_schedule(1, ScheduleKind::default()).unwrap();
        assert!((0..100).all(|_| sample_timestep(&mut rng, &one) == 1));
        let a: Vec<usize> = (0..5).map(|_| sample_timestep(&mut ChaCha8Rng::seed_from_u64(3), &s)).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn ddim_inverts_perfect_noise() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
        for t in [1, 500, 1000] {
            let xt = diffuse(&x0, t, &eps, &s).unwrap();
            let back = ddim_step(&xt, &eps, t, 0, &s, 0.0).unwrap();
            let err = back.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-6, "t = {t}: {err}");
        }
        let xt = diffuse(&x0, 700, &eps, &s).unwrap();
        assert_eq!(
            ddim_step(&xt, &eps, 700, 300, &s, 0.0).unwrap(),
            ddim_step(&xt, &eps, 700, 300, &s, 0.0).unwrap()
        );
        assert!(ddim_step(&xt, &eps, 300, 300, &s, 0.0).is_err());
        assert!(ddim_step(&xt, &eps, 300, 100, &s, 0.5).is_err());
    }

    #[test]
    fn inference_timesteps_are_evenly_spaced() {
        let s = default_schedule();
        let ts = s.inference_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[1], ts[49]), (981, 961, 1));
    }

    #[test]
    fn forward_moments_match_schedule() {
        let s = default_schedule();
        let t = 400;
        let x0 = 0.7f64;
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<f64> = (0..n)
            .map(|_| diffuse(&[x0], t, &[rng.sample(StandardNormal)], &s).unwrap()[0])
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let a = s.alpha(t);
        let sd_mean = ((1.0 - a) / n as f64).sqrt();
        assert!((mean - a.sqrt() * x0).abs() < 3.0 * sd_mean);
        // Var of the sample variance for a Gaussian: 2 sigma^4 / (n - 1).
        let sd_var = (2.0 * (1.0 - a).powi(2) / (n - 1) as f64).sqrt();
        assert!((var - (1.0 - a)).abs() < 3.0 * sd_var);
    }
}
