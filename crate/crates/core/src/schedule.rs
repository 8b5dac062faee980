//! Diffusion variance schedule and derived quantities.
//!
//! Schedules are always computed and stored in f64; the diffusion code
//! converts per use so f32 training shares one exact schedule with f64
//! verification paths.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    /// sqrt(beta) interpolated linearly between the endpoints.
    #[default]
    Quadratic,
    /// beta interpolated linearly; kept for ablation runs only.
    Linear,
}

/// Variance schedule: betas, per-step alphas, their cumulative products, and
/// the posterior variances, all 1-indexed via accessors.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha_hat: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

pub fn make_quadratic_schedule(n: usize, beta_1: f64, beta_n: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleKind::Quadratic, n, beta_1, beta_n)
}

pub fn make_linear_schedule(n: usize, beta_1: f64, beta_n: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleKind::Linear, n, beta_1, beta_n)
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, n: usize, beta_1: f64, beta_n: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Invalid(format!("schedule needs at least 2 steps, got {}", n)));
        }
        if !(0.0 < beta_1 && beta_1 <= beta_n && beta_n < 1.0) {
            return Err(Error::Invalid(format!(
                "schedule bounds must satisfy 0 < beta_1 <= beta_N < 1, got ({}, {})",
                beta_1, beta_n
            )));
        }
        let denom = (n - 1) as f64;
        let (sq1, sqn) = (beta_1.sqrt(), beta_n.sqrt());
        let beta: Vec<f64> = (1..=n)
            .map(|i| {
                let frac = (i - 1) as f64 / denom;
                match kind {
                    ScheduleKind::Quadratic => {
                        let root = (1.0 - frac) * sq1 + frac * sqn;
                        root * root
                    }
                    ScheduleKind::Linear => (1.0 - frac) * beta_1 + frac * beta_n,
                }
            })
            .collect();
        Self::from_betas(kind, beta)
    }

    /// Schedule from explicit betas; unlike the interpolating constructors
    /// this accepts a single step.
    pub fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Invalid("schedule needs at least 1 beta".to_string()));
        }
        if let Some(&b) = beta.iter().find(|&&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::Invalid(format!("beta {} outside (0, 1)", b)));
        }
        let n = beta.len();
        let alpha_hat: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(n);
        let mut prod = 1.0;
        for &a in &alpha_hat {
            prod *= a;
            alpha_bar.push(prod);
        }
        // Posterior variance; the first step takes the conventional value
        // beta_1 (the formula's numerator 1 - alpha_bar(0) vanishes there).
        let mut beta_tilde = Vec::with_capacity(n);
        for i in 0..n {
            if i == 0 {
                beta_tilde.push(beta[0]);
            } else {
                beta_tilde.push((1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]);
            }
        }

        let s = Self { kind, beta, alpha_hat, alpha_bar, beta_tilde };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        for i in 1..n {
            if self.beta[i] < self.beta[i - 1] {
                return Err(Error::Invalid(format!("beta not monotone at step {}", i + 1)));
            }
        }
        for i in 0..n {
            if !(self.alpha_bar[i] > 0.0 && self.alpha_bar[i] < 1.0) {
                return Err(Error::Invalid(format!("alpha_bar out of (0,1) at step {}", i + 1)));
            }
            if i > 0 && self.alpha_bar[i] >= self.alpha_bar[i - 1] {
                return Err(Error::Invalid(format!("alpha_bar not strictly decreasing at step {}", i + 1)));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps N.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.len() {
            return Err(Error::Invalid(format!("diffusion step {} out of 1..={}", n, self.len())));
        }
        Ok(())
    }

    pub fn beta(&self, n: usize) -> Result<f64> {
        self.check_step(n)?;
        Ok(self.beta[n - 1])
    }

    pub fn alpha_hat(&self, n: usize) -> Result<f64> {
        self.check_step(n)?;
        Ok(self.alpha_hat[n - 1])
    }

    /// Cumulative product of (1 - beta_i) up to step n.
    pub fn alpha_bar(&self, n: usize) -> Result<f64> {
        self.check_step(n)?;
        Ok(self.alpha_bar[n - 1])
    }

    /// alpha_bar extended with the step-0 convention alpha_bar(0) = 1.
    pub fn alpha_bar_ext(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Ok(1.0);
        }
        self.alpha_bar(n)
    }

    /// Posterior variance of the forward process conditioned on the clean
    /// signal; equals beta_1 at n = 1 by convention.
    pub fn beta_tilde(&self, n: usize) -> Result<f64> {
        self.check_step(n)?;
        Ok(self.beta_tilde[n - 1])
    }

    /// Reverse-transition variance recomputed from first principles
    /// (fresh cumulative products), used to cross-check `beta_tilde`.
    pub fn reverse_sigma_sq(&self, n: usize) -> Result<f64> {
        self.check_step(n)?;
        if n == 1 {
            return Ok(self.beta[0]);
        }
        let mut prod_prev = 1.0;
        for i in 0..n - 1 {
            prod_prev *= 1.0 - self.beta[i];
        }
        let prod_cur = prod_prev * (1.0 - self.beta[n - 1]);
        Ok((1.0 - prod_prev) / (1.0 - prod_cur) * self.beta[n - 1])
    }

    /// Noise scale that makes the subset reverse process match ancestral
    /// sampling: sigma^2 = (1 - abar_prev)/(1 - abar_cur) * (1 - abar_cur/abar_prev),
    /// where `prev` may be 0 (then sigma = 0 and the last update is noiseless).
    pub fn ddim_sigma(&self, prev: usize, cur: usize) -> Result<f64> {
        self.check_step(cur)?;
        if prev >= cur {
            return Err(Error::Invalid(format!("ddim_sigma needs prev < cur, got ({}, {})", prev, cur)));
        }
        let ab_prev = self.alpha_bar_ext(prev)?;
        let ab_cur = self.alpha_bar(cur)?;
        let s2 = (1.0 - ab_prev) / (1.0 - ab_cur) * (1.0 - ab_cur / ab_prev);
        Ok(s2.max(0.0).sqrt())
    }
}
