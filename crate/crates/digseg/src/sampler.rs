//! Reverse-process inference: DDPM ancestral steps, DDIM steps over a
//! timestep plan (leading or trailing), and latent-space test-time
//! ensembling.
//!
//! Timestep conventions follow the schedule module: `ddpm_step` takes the
//! 1-based diffusion step `t` (its final step is `t = 1`, taken noiseless),
//! while `ddim_step` works on 0-based plan indices where `t_prev = -1`
//! denotes the terminal clean output (`alpha_bar = 1`).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::TextEmbedding;
use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, Space};
use crate::rng;
use crate::schedule::{NoiseSchedule, TimestepPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(Error::parameter(format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// DDIM stochasticity; 0 is fully deterministic.
    pub eta: f64,
    pub plan: TimestepPlan,
    /// Ensemble size.
    pub ensemble: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.ensemble < 1 {
            return Err(Error::parameter("ensemble size must be >= 1"));
        }
        if self.eta < 0.0 {
            return Err(Error::parameter(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.kind == SamplerKind::Ddpm && self.plan.steps.len() != schedule.t_max() {
            return Err(Error::parameter(format!(
                "ddpm requires a full {}-step plan, got {} steps",
                schedule.t_max(),
                self.plan.steps.len()
            )));
        }
        Ok(())
    }
}

/// Deterministic mean of the DDPM ancestral update (Gaussian part omitted):
/// `(z_t - (1-alpha_t)/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)`.
pub fn ddpm_mean(
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    if t < 1 || t > schedule.t_max() {
        return Err(Error::parameter(format!("ddpm step t={t} out of 1..={}", schedule.t_max())));
    }
    let alpha = schedule.alpha(t);
    let abar = schedule.alpha_bar(t);
    let coeff = (1.0 - alpha) / (1.0 - abar).sqrt();
    let mean = (&z_t.data - &(&eps_hat.data * coeff)) / alpha.sqrt();
    LatentGrid::new(mean, Space::Latent)
}

/// Posterior standard deviation `sqrt(beta_t (1-abar_{t-1}) / (1-abar_t))`;
/// zero at the final step.
pub fn ddpm_sigma(t: usize, schedule: &NoiseSchedule) -> f64 {
    if t <= 1 {
        return 0.0;
    }
    let beta = schedule.beta(t);
    (beta * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - schedule.alpha_bar(t))).sqrt()
}

/// One stochastic ancestral step from `t` to `t-1` (1-based `t`).
pub fn ddpm_step(
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LatentGrid> {
    let mut out = ddpm_mean(z_t, eps_hat, t, schedule)?;
    let sigma = ddpm_sigma(t, schedule);
    if sigma > 0.0 {
        for v in out.data.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}

/// One DDIM step from plan index `t` down to `t_prev` (`-1` = terminal).
pub fn ddim_step(
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: i64,
    t_prev: i64,
    eta: f64,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LatentGrid> {
    if !(t > t_prev && t_prev >= -1) {
        return Err(Error::parameter(format!("ddim step needs t > t_prev >= -1, got {t} -> {t_prev}")));
    }
    let abar_t = schedule.alpha_bar_at(t);
    let abar_prev = schedule.alpha_bar_at(t_prev);
    let x0 = (&z_t.data - &(&eps_hat.data * (1.0 - abar_t).sqrt())) / abar_t.sqrt();
    let sigma = eta * ((1.0 - abar_prev) / (1.0 - abar_t)).sqrt() * (1.0 - abar_t / abar_prev).sqrt();
    let mut dir_sq = 1.0 - abar_prev - sigma * sigma;
    if dir_sq < 0.0 {
        eprintln!("ddim: direction coefficient clamped to 0 at t={t} (eta={eta})");
        dir_sq = 0.0;
    }
    let mut out = x0 * abar_prev.sqrt() + &eps_hat.data * dir_sq.sqrt();
    if sigma > 0.0 {
        for v in out.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    LatentGrid::new(out, Space::Latent)
}

/// Run one full reverse trajectory from the given initial latent.
fn run_trajectory(
    z_init: LatentGrid,
    z_x: &LatentGrid,
    t_clip: &TextEmbedding,
    model: &dyn NoisePredictor,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LatentGrid> {
    let mut z = z_init;
    match cfg.kind {
        SamplerKind::Ddpm => {
            for &tau in &cfg.plan.steps {
                let eps_hat = model.predict_noise(&z, z_x, tau, t_clip)?;
                z = ddpm_step(&z, &eps_hat, tau + 1, schedule, rng)?;
            }
        }
        SamplerKind::Ddim => {
            for (i, &tau) in cfg.plan.steps.iter().enumerate() {
                let t_prev = cfg.plan.steps.get(i + 1).map_or(-1, |&p| p as i64);
                let eps_hat = model.predict_noise(&z, z_x, tau, t_clip)?;
                z = ddim_step(&z, &eps_hat, tau as i64, t_prev, cfg.eta, schedule, rng)?;
            }
        }
    }
    Ok(z)
}

/// Gaussian initial latent for one ensemble member.
fn init_latent(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> LatentGrid {
    let mut z = LatentGrid::zeros(shape.0, shape.1, shape.2, Space::Latent);
    for v in z.data.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    z
}

/// Full conditional sampling with test-time ensembling: E independent
/// trajectories from distinct member streams, averaged in latent space
/// before any decoding.
pub fn sample(
    z_x: &LatentGrid,
    t_clip: &TextEmbedding,
    model: &dyn NoisePredictor,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    cfg.validate(schedule)?;
    let mut terminals = Vec::with_capacity(cfg.ensemble);
    for member in 0..cfg.ensemble {
        let mut member_rng = rng::stream(cfg.seed, "ensemble-member", member as u64);
        let z0 = init_latent(z_x.shape(), &mut member_rng);
        terminals.push(run_trajectory(z0, z_x, t_clip, model, cfg, schedule, &mut member_rng)?);
    }
    LatentGrid::mean_of(&terminals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::forward_noising;
    use crate::denoiser::oracles::{LinearOracle, TrueNoiseOracle, ZeroOracle};
    use crate::schedule::{build_schedule, plan_timesteps, Spacing};
    use ndarray::Array3;

    fn rnd_grid(seed: u64, c: usize, h: usize, w: usize) -> LatentGrid {
        let mut r = rng::stream(seed, "sampler-test", 0);
        let mut a = Array3::zeros((c, h, w));
        for v in a.iter_mut() {
            *v = r.sample::<f64, _>(StandardNormal);
        }
        LatentGrid::new(a, Space::Latent).unwrap()
    }

    fn embedding() -> TextEmbedding {
        let mut v = ndarray::Array1::zeros(8);
        v[0] = 1.0;
        TextEmbedding { vector: v }
    }

    #[test]
    fn ddpm_mean_inverts_forward_noising() {
        // sigma_t = 0 and the true eps recover the exact pre-step mean:
        // sqrt(abar_{t-1}) z0 + sqrt(alpha_t) (1-abar_{t-1})/sqrt(1-abar_t) eps.
        let schedule = build_schedule(1000, 1e-4, 0.02).unwrap();
        let z0 = rnd_grid(1, 2, 4, 4);
        let eps = rnd_grid(2, 2, 4, 4);
        for t in [1usize, 7, 300, 1000] {
            let z_t = forward_noising(&z0, &eps, t, &schedule).unwrap();
            let got = ddpm_mean(&z_t, &eps, t, &schedule).unwrap();
            let ab_prev = schedule.alpha_bar(t - 1);
            let coeff = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - schedule.alpha_bar(t)).sqrt();
            let want = &z0.data * ab_prev.sqrt() + &eps.data * coeff;
            let max = (&got.data - &want).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
            assert!(max < 1e-12, "t={t}: max abs err {max}");
        }
    }

    #[test]
    fn ddpm_final_step_with_perfect_eps_recovers_z0_exactly() {
        let schedule = build_schedule(1000, 1e-4, 0.02).unwrap();
        let z0 = rnd_grid(3, 2, 4, 4);
        let eps = rnd_grid(4, 2, 4, 4);
        let z_1 = forward_noising(&z0, &eps, 1, &schedule).unwrap();
        let mut r = rng::stream(0, "x", 0);
        let out = ddpm_step(&z_1, &eps, 1, &schedule, &mut r).unwrap();
        let max = (&out.data - &z0.data).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(max < 1e-12, "max abs err {max}");
    }

    #[test]
    fn ddpm_noise_variance_matches_sigma_sq() {
        // Monte Carlo oracle over ~1e5 draws.
        let schedule = build_schedule(1000, 1e-4, 0.02).unwrap();
        let z_t = rnd_grid(5, 1, 16, 16);
        let eps_hat = rnd_grid(6, 1, 16, 16);
        let t = 500;
        let mean = ddpm_mean(&z_t, &eps_hat, t, &schedule).unwrap();
        let sigma = ddpm_sigma(t, &schedule);
        let mut r = rng::stream(7, "mc", 0);
        let (mut sum_sq, mut n) = (0.0, 0.0);
        for _ in 0..400 {
            let out = ddpm_step(&z_t, &eps_hat, t, &schedule, &mut r).unwrap();
            for (a, b) in out.data.iter().zip(mean.data.iter()) {
                sum_sq += (a - b) * (a - b);
                n += 1.0;
            }
        }
        let var = sum_sq / n;
        assert!(
            (var / (sigma * sigma) - 1.0).abs() < 0.02,
            "var {var} vs sigma^2 {}",
            sigma * sigma
        );
    }

    #[test]
    fn single_trailing_ddim_step_with_oracle_recovers_z0() {
        let schedule = build_schedule(1000, 1e-4, 0.02).unwrap();
        let z0 = rnd_grid(8, 2, 4, 4);
        let oracle = TrueNoiseOracle { z_y0: z0.clone(), schedule: schedule.clone() };
        // From any plan timestep tau, one eta=0 step to -1 must invert Eq. 1.
        for tau in [0i64, 9, 499, 999] {
            let eps = rnd_grid(9 + tau as u64, 2, 4, 4);
            let z_t = forward_noising(&z0, &eps, tau as usize + 1, &schedule).unwrap();
            let eps_hat = oracle
                .predict_noise(&z_t, &z0, tau as usize, &embedding())
                .unwrap();
            let mut r = rng::stream(1, "none", 0);
            let out = ddim_step(&z_t, &eps_hat, tau, -1, 0.0, &schedule, &mut r).unwrap();
            let max = (&out.data - &z0.data).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
            assert!(max < 1e-10, "tau={tau}: max abs err {max}");
        }
    }

    #[test]
    fn ddim_eta_zero_is_seed_independent() {
        let schedule = build_schedule(100, 1e-4, 0.02).unwrap();
        let z0 = rnd_grid(10, 1, 4, 4);
        let oracle = TrueNoiseOracle { z_y0: z0.clone(), schedule: schedule.clone() };
        let plan = plan_timesteps(&schedule, 5, Spacing::Trailing).unwrap();
        let run = |seed: u64| {
            let cfg = SamplerConfig {
                kind: SamplerKind::Ddim,
                eta: 0.0,
                plan: plan.clone(),
                ensemble: 1,
                seed,
            };
            sample(&z0, &embedding(), &oracle, &cfg, &schedule).unwrap()
        };
        // Different seeds still agree step-by-step except for the initial
        // noise, so compare full trajectories from identical inits instead:
        // drive ddim_step directly with two rngs.
        let z_t = rnd_grid(11, 1, 4, 4);
        let eps_hat = rnd_grid(12, 1, 4, 4);
        let mut r1 = rng::stream(1, "a", 0);
        let mut r2 = rng::stream(2, "b", 0);
        let a = ddim_step(&z_t, &eps_hat, 40, 20, 0.0, &schedule, &mut r1).unwrap();
        let b = ddim_step(&z_t, &eps_hat, 40, 20, 0.0, &schedule, &mut r2).unwrap();
        assert_eq!(a.data, b.data);
        // And identical seeds give bit-identical full runs.
        assert_eq!(run(5).data, run(5).data);
    }

    #[test]
    fn ddim_eta_one_matches_ddpm_per_step_moments() {
        // Algebraic identity + distributional Monte Carlo on a linear
        // denoiser: consecutive-step DDIM at eta = 1 equals the ancestral
        // update in mean and standard deviation.
        let schedule = build_schedule(200, 1e-4, 0.02).unwrap();
        let model = LinearOracle { gain: 0.3 };
        let z_t = rnd_grid(13, 1, 8, 8);
        let e = embedding();
        for tau in [5i64, 60, 199] {
            let eps_hat = model.predict_noise(&z_t, &z_t, tau as usize, &e).unwrap();
            // Exact mean comparison (sigma terms omitted on both sides).
            let ddim_mean = {
                let abar_t = schedule.alpha_bar_at(tau);
                let abar_prev = schedule.alpha_bar_at(tau - 1);
                let sigma = ((1.0 - abar_prev) / (1.0 - abar_t)).sqrt()
                    * (1.0 - abar_t / abar_prev).sqrt();
                let x0 = (&z_t.data - &(&eps_hat.data * (1.0 - abar_t).sqrt())) / abar_t.sqrt();
                x0 * abar_prev.sqrt()
                    + &eps_hat.data * (1.0 - abar_prev - sigma * sigma).max(0.0).sqrt()
            };
            let ddpm = ddpm_mean(&z_t, &eps_hat, tau as usize + 1, &schedule).unwrap();
            let mean_gap =
                (&ddim_mean - &ddpm.data).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
            assert!(mean_gap < 1e-9, "tau={tau}: mean gap {mean_gap}");

            // Sigma agreement.
            let abar_t = schedule.alpha_bar_at(tau);
            let abar_prev = schedule.alpha_bar_at(tau - 1);
            let sigma_ddim = ((1.0 - abar_prev) / (1.0 - abar_t)).sqrt()
                * (1.0 - abar_t / abar_prev).sqrt();
            let sigma_ddpm = ddpm_sigma(tau as usize + 1, &schedule);
            assert!((sigma_ddim - sigma_ddpm).abs() < 1e-12);

            // Monte Carlo variance agreement.
            let mut r = rng::stream(50 + tau as u64, "mc", 0);
            let (mut s1, mut s2, mut n) = (0.0, 0.0, 0.0);
            for _ in 0..200 {
                let a = ddim_step(&z_t, &eps_hat, tau, tau - 1, 1.0, &schedule, &mut r).unwrap();
                for (x, m) in a.data.iter().zip(ddpm.data.iter()) {
                    s1 += x - m;
                    s2 += (x - m) * (x - m);
                    n += 1.0;
                }
            }
            let var = s2 / n - (s1 / n) * (s1 / n);
            assert!(
                (var / (sigma_ddpm * sigma_ddpm) - 1.0).abs() < 0.05,
                "tau={tau}: var {var} vs {}",
                sigma_ddpm * sigma_ddpm
            );
        }
    }

    #[test]
    fn ensemble_of_one_equals_single_trajectory() {
        let schedule = build_schedule(50, 1e-4, 0.02).unwrap();
        let plan = plan_timesteps(&schedule, 3, Spacing::Trailing).unwrap();
        let z_x = rnd_grid(20, 1, 4, 4);
        let model = ZeroOracle;
        let mk = |ensemble| SamplerConfig {
            kind: SamplerKind::Ddim,
            eta: 0.0,
            plan: plan.clone(),
            ensemble,
            seed: 3,
        };
        let one = sample(&z_x, &embedding(), &model, &mk(1), &schedule).unwrap();
        // Manual single trajectory with the member-0 stream.
        let mut member = rng::stream(3, "ensemble-member", 0);
        let z0 = init_latent(z_x.shape(), &mut member);
        let manual = run_trajectory(z0, &z_x, &embedding(), &model, &mk(1), &schedule, &mut member)
            .unwrap();
        assert_eq!(one.data, manual.data);
    }

    #[test]
    fn averaging_identical_members_is_identity() {
        let g = rnd_grid(30, 2, 3, 3);
        let mean = LatentGrid::mean_of(&[g.clone(), g.clone(), g.clone(), g.clone()]).unwrap();
        let max = (&mean.data - &g.data).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(max < 1e-15);
    }

    #[test]
    fn ensemble_variance_shrinks_like_one_over_e() {
        // Linear stub: terminal latent is a fixed linear map of the initial
        // noise, so the ensemble mean's per-pixel variance is var_1 / E.
        let schedule = build_schedule(100, 1e-4, 0.02).unwrap();
        let plan = plan_timesteps(&schedule, 1, Spacing::Trailing).unwrap();
        let z_x = rnd_grid(40, 1, 8, 8);
        let model = LinearOracle { gain: 0.2 };
        let var_for = |ensemble: usize| {
            let (mut s1, mut s2, mut n) = (0.0, 0.0, 0.0);
            for seed in 0..300 {
                let cfg = SamplerConfig {
                    kind: SamplerKind::Ddim,
                    eta: 0.0,
                    plan: plan.clone(),
                    ensemble,
                    seed,
                };
                let out = sample(&z_x, &embedding(), &model, &cfg, &schedule).unwrap();
                for v in out.data.iter() {
                    s1 += v;
                    s2 += v * v;
                    n += 1.0;
                }
            }
            s2 / n - (s1 / n) * (s1 / n)
        };
        let v1 = var_for(1);
        let v8 = var_for(8);
        let ratio = v8 / v1;
        assert!((ratio - 1.0 / 8.0).abs() < 0.125 * 0.3, "ratio {ratio}");
    }

    #[test]
    fn ddpm_demands_full_plans() {
        let schedule = build_schedule(50, 1e-4, 0.02).unwrap();
        let short = plan_timesteps(&schedule, 10, Spacing::Trailing).unwrap();
        let cfg = SamplerConfig { kind: SamplerKind::Ddpm, eta: 0.0, plan: short, ensemble: 1, seed: 0 };
        assert!(cfg.validate(&schedule).is_err());
        let full = plan_timesteps(&schedule, 50, Spacing::Trailing).unwrap();
        let cfg = SamplerConfig { kind: SamplerKind::Ddpm, eta: 0.0, plan: full, ensemble: 1, seed: 0 };
        assert!(cfg.validate(&schedule).is_ok());
    }
}
