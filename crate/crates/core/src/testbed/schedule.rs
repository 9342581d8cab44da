//! Forward noising, clean-image prediction and the deterministic sampler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nursing::Latent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Parameter("noise schedule needs at least one step".into()));
        }
        for (t, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Parameter(format!("beta[{t}] = {b} is outside (0, 1)")));
            }
            if t > 0 && b < betas[t - 1] {
                return Err(Error::Parameter(format!("betas must be nondecreasing; beta[{t}] = {b}")));
            }
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if alpha_bars.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::DegenerateSchedule("cumulative alpha underflows to zero".into()));
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Betas spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_steps == 0 {
            return Err(Error::Parameter("noise schedule needs at least one step".into()));
        }
        let betas = (0..train_steps)
            .map(|t| {
                if train_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (train_steps - 1) as f64
                }
            })
            .collect();
        Self::new(betas)
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            Error::Index(format!("timestep {t} outside [0, {})", self.alpha_bars.len()))
        })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

fn check_same(a: &Latent, b: &Latent) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("latent shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `sqrt(ab) * z0 + sqrt(1 - ab) * eps` for an explicit cumulative alpha.
pub fn add_noise_at(z0: &Latent, epsilon: &Latent, alpha_bar: f64) -> Result<Latent> {
    check_same(z0, epsilon)?;
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::Parameter(format!("alpha-bar {alpha_bar} is outside [0, 1]")));
    }
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    let values = z0.values().iter().zip(epsilon.values()).map(|(x, e)| a * x + b * e).collect();
    let (c, h, w) = z0.shape();
    Latent::new(c, h, w, values)
}

pub fn add_noise(z0: &Latent, epsilon: &Latent, t: usize, schedule: &NoiseSchedule) -> Result<Latent> {
    add_noise_at(z0, epsilon, schedule.alpha_bar(t)?)
}

/// `(z_t - sqrt(1 - ab) * eps_hat) / sqrt(ab)` for an explicit cumulative alpha.
pub fn predict_clean_at(z_t: &Latent, noise_estimate: &Latent, alpha_bar: f64) -> Result<Latent> {
    check_same(z_t, noise_estimate)?;
    if !(alpha_bar > 0.0) || alpha_bar > 1.0 {
        return Err(Error::DegenerateSchedule(format!(
            "cannot invert the forward process at alpha-bar {alpha_bar}"
        )));
    }
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    let values = z_t.values().iter().zip(noise_estimate.values()).map(|(x, e)| (x - b * e) / a).collect();
    let (c, h, w) = z_t.shape();
    Latent::new(c, h, w, values)
}

pub fn predict_clean(z_t: &Latent, noise_estimate: &Latent, t: usize, schedule: &NoiseSchedule) -> Result<Latent> {
    predict_clean_at(z_t, noise_estimate, schedule.alpha_bar(t)?)
}

/// Deterministic sampler over a strided subset of the training timesteps.
///
/// Sampling index `t` in `1..=T` maps to training timestep `t * (T_train / T) - 1`,
/// so the first step starts at the noisiest training level. Stepping from
/// `t` to `t - 1` at `t = 1` lands on the clean estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DdimSampler {
    schedule: NoiseSchedule,
    steps: usize,
}

impl DdimSampler {
    pub fn new(schedule: NoiseSchedule, steps: usize) -> Result<Self> {
        if steps == 0 || steps > schedule.train_steps() {
            return Err(Error::Parameter(format!(
                "sampling steps must be in [1, {}], got {steps}",
                schedule.train_steps()
            )));
        }
        Ok(Self { schedule, steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Training timestep used at sampling index `t` (1-based).
    pub fn train_timestep(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(Error::Index(format!("sampling index {t} outside [1, {}]", self.steps)));
        }
        let stride = self.schedule.train_steps() / self.steps;
        Ok(t * stride - 1)
    }

    fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            self.schedule.alpha_bar(self.train_timestep(t)?)
        }
    }

    /// One update from index `t` to `t - 1`; returns `(z_{t-1}, x0_hat)`.
    pub fn step(&self, z_t: &Latent, noise_estimate: &Latent, t: usize) -> Result<(Latent, Latent)> {
        if t == 0 {
            return Err(Error::Index("cannot step below index 0".into()));
        }
        let ab_t = self.alpha_bar_at(t)?;
        let ab_prev = self.alpha_bar_at(t - 1)?;
        let x0 = predict_clean_at(z_t, noise_estimate, ab_t)?;
        let z_prev = add_noise_at(&x0, noise_estimate, ab_prev)?;
        Ok((z_prev, x0))
    }
}
