//! Closed-form diffusion quantities and conversions between the noise,
//! clean-sample and posterior-mean parameterizations.
//!
//! Timesteps are 1-based (`1..=T`) everywhere in the public API, with the
//! convention `alpha_bar(0) = 1`.

use crate::error::{Error, Result};
use crate::numerics::FloatGrid;

/// Per-timestep constants of a variance schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    beta_tildes: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 30;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl NoiseSchedule {
    /// Linear ramp of `beta` from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::range("T", 0.0, ">= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::range(
                "beta_start",
                beta_start,
                format!("0 < beta_start <= beta_end ({beta_end}) < 1"),
            ));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let beta_tildes = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            beta_tildes,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::range("t", t as f64, format!("1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.idx(t)?])
    }

    /// Cumulative product of `alpha` up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.idx(t)?])
    }

    /// Posterior variance of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        Ok(self.beta_tildes[self.idx(t)?])
    }

    /// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn forward_sample(&self, x0: &FloatGrid, t: usize, eps: &FloatGrid) -> Result<FloatGrid> {
        let ab = self.alpha_bars[self.idx(t)?];
        x0.expect_same_shape("forward_sample", eps)?;
        x0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean,
    /// `sqrt(abar_{t-1}) beta_t / (1 - abar_t)` and
    /// `sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t)`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let i = self.idx(t)?;
        let ab = self.alpha_bars[i];
        let ab_prev = self.alpha_bar(t - 1)?;
        let beta = self.betas[i];
        Ok((
            ab_prev.sqrt() * beta / (1.0 - ab),
            self.alphas[i].sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        ))
    }

    pub fn posterior_mean(&self, x_t: &FloatGrid, x0: &FloatGrid, t: usize) -> Result<FloatGrid> {
        let (c0, ct) = self.posterior_coefficients(t)?;
        x0.lincomb(c0, x_t, ct)
    }

    /// Inverts [`forward_sample`](Self::forward_sample) for a given noise estimate.
    pub fn predict_x0_from_eps(
        &self,
        z_t: &FloatGrid,
        eps_hat: &FloatGrid,
        t: usize,
    ) -> Result<FloatGrid> {
        let ab = self.alpha_bars[self.idx(t)?];
        let inv = 1.0 / ab.sqrt();
        z_t.lincomb(inv, eps_hat, -(1.0 - ab).sqrt() * inv)
    }

    /// `(t, beta, alpha_bar, beta_tilde)` rows.
    pub fn table(&self) -> impl Iterator<Item = (usize, f64, f64, f64)> + '_ {
        (0..self.steps()).map(|i| (i + 1, self.betas[i], self.alpha_bars[i], self.beta_tildes[i]))
    }

    /// CSV rendering of [`table`](Self::table) with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha_bar,beta_tilde\n");
        for (t, b, ab, bt) in self.table() {
            s.push_str(&format!("{t},{b:.10e},{ab:.10e},{bt:.10e}\n"));
        }
        s
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}
