//! DDPM noise-schedule mathematics: cosine schedule construction, the
//! closed-form forward process, the reverse transition, and full ancestral
//! sampling.
//!
//! Everything here is parameterization-agnostic plumbing: the denoiser is an
//! injected function, so the same loop serves the trained nets and the exact
//! oracle denoisers used in tests.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::contract;
use crate::error::Result;
use crate::LatentFeature;

/// Per-timestep schedule variables for `t = 1..=T` (index 0 unused, stored
/// shifted: `alpha[t-1]` is α_t).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// ᾱ_{t−1} with the convention ᾱ_0 = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    /// Posterior variance σ̃²_t = (1−ᾱ_{t−1})/(1−ᾱ_t)·(1−α_t); zero at t = 1.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    /// Dumps `t, alpha, alpha_bar, posterior_var` rows for inspection.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,alpha,alpha_bar,posterior_var")?;
        for t in 1..=self.t_max() {
            writeln!(
                w,
                "{t},{},{},{}",
                self.alpha(t),
                self.alpha_bar(t),
                self.posterior_var(t)
            )?;
        }
        Ok(())
    }
}

/// Builds the cosine schedule: ᾱ_t ∝ cos²((t/T + s)/(1 + s)·π/2) with
/// s = 0.008, per-step β_t clipped to ≤ 0.999, and ᾱ recomputed as the exact
/// running product of the clipped α so the telescoping identity holds to
/// machine precision.
pub fn make_cosine_schedule(t_max: usize) -> Result<NoiseSchedule> {
    contract!(t_max >= 1, "schedule needs at least one step, got T={t_max}");
    const S: f64 = 0.008;
    let f = |t: f64| {
        let arg = (t / t_max as f64 + S) / (1.0 + S) * std::f64::consts::FRAC_PI_2;
        arg.cos().powi(2)
    };
    let f0 = f(0.0);
    let mut alpha = Vec::with_capacity(t_max);
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut posterior_var = Vec::with_capacity(t_max);
    let mut prev_raw = 1.0;
    let mut bar = 1.0;
    for t in 1..=t_max {
        let raw = f(t as f64) / f0;
        let beta = (1.0 - raw / prev_raw).min(0.999);
        prev_raw = raw;
        let a = 1.0 - beta;
        let bar_prev = bar;
        bar *= a;
        alpha.push(a);
        alpha_bar.push(bar);
        posterior_var.push((1.0 - bar_prev) / (1.0 - bar) * (1.0 - a));
    }
    Ok(NoiseSchedule {
        alpha,
        alpha_bar,
        posterior_var,
    })
}

/// Closed-form forward diffusion: √ᾱ_t·z0 + √(1−ᾱ_t)·eta.
pub fn q_sample(
    z0: &LatentFeature,
    t: usize,
    eta: &LatentFeature,
    sched: &NoiseSchedule,
) -> Result<LatentFeature> {
    contract!(
        (1..=sched.t_max()).contains(&t),
        "timestep {t} outside 1..={}",
        sched.t_max()
    );
    contract!(
        z0.shape() == eta.shape(),
        "noise shape {:?} != latent shape {:?}",
        eta.shape(),
        z0.shape()
    );
    let ab = sched.alpha_bar(t);
    Ok(ab.sqrt() * z0 + (1.0 - ab).sqrt() * eta)
}

/// Algebraic inverse of `q_sample`: the clean latent implied by a noisy one
/// and a noise estimate.
pub fn predict_z0(
    z_t: &LatentFeature,
    t: usize,
    eps_hat: &LatentFeature,
    sched: &NoiseSchedule,
) -> Result<LatentFeature> {
    contract!(
        (1..=sched.t_max()).contains(&t),
        "timestep {t} outside 1..={}",
        sched.t_max()
    );
    let ab = sched.alpha_bar(t);
    Ok((z_t - &((1.0 - ab).sqrt() * eps_hat)) / ab.sqrt())
}

/// One reverse transition z_t → z_{t−1}.
pub struct DiffusionStepInput<'a> {
    pub z_t: &'a LatentFeature,
    pub t: usize,
    pub eps_hat: &'a LatentFeature,
    /// Fresh standard Gaussian sample; `None` means zero. Must be zero at
    /// t = 1, where the transition is deterministic.
    pub eta: Option<&'a LatentFeature>,
}

/// (1/√α_t)·(z_t − ((1−α_t)/√(1−ᾱ_t))·eps_hat) + σ_t·eta with
/// σ_t = √posterior_var_t.
pub fn reverse_step(input: &DiffusionStepInput<'_>, sched: &NoiseSchedule) -> Result<LatentFeature> {
    let DiffusionStepInput { z_t, t, eps_hat, eta } = *input;
    contract!(
        (1..=sched.t_max()).contains(&t),
        "timestep {t} outside 1..={}",
        sched.t_max()
    );
    contract!(
        z_t.shape() == eps_hat.shape(),
        "eps_hat shape {:?} != latent shape {:?}",
        eps_hat.shape(),
        z_t.shape()
    );
    if t == 1 {
        let nonzero = eta.is_some_and(|e| e.iter().any(|&v| v != 0.0));
        contract!(!nonzero, "reverse step at t=1 is deterministic; eta must be zero");
    }
    let a = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let mut out = (z_t - &((1.0 - a) / (1.0 - ab).sqrt() * eps_hat)) / a.sqrt();
    if let Some(eta) = eta {
        contract!(
            eta.shape() == z_t.shape(),
            "eta shape {:?} != latent shape {:?}",
            eta.shape(),
            z_t.shape()
        );
        out = out + sched.posterior_var(t).sqrt() * eta;
    }
    Ok(out)
}

/// Draws a standard Gaussian latent of the given shape.
pub fn gaussian_latent(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> LatentFeature {
    LatentFeature::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

/// Full ancestral sampling loop: starts from a standard Gaussian latent and
/// applies `reverse_step` for t = T..1. The denoiser is called exactly T
/// times with `(z_t, t, cond, aux)`.
pub fn sample_loop<C, A, F>(
    mut denoiser: F,
    cond: &C,
    aux: &A,
    shape: (usize, usize, usize),
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LatentFeature>
where
    F: FnMut(&LatentFeature, usize, &C, &A) -> Result<LatentFeature>,
{
    let mut z = gaussian_latent(shape, rng);
    for t in (1..=sched.t_max()).rev() {
        let eps_hat = denoiser(&z, t, cond, aux)?;
        contract!(
            eps_hat.shape() == z.shape(),
            "denoiser returned shape {:?}, expected {:?}",
            eps_hat.shape(),
            z.shape()
        );
        let eta = if t > 1 {
            Some(gaussian_latent(shape, rng))
        } else {
            None
        };
        z = reverse_step(
            &DiffusionStepInput {
                z_t: &z,
                t,
                eps_hat: &eps_hat,
                eta: eta.as_ref(),
            },
            sched,
        )?;
    }
    Ok(z)
}
