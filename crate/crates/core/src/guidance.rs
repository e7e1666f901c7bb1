//! Classifier-free guidance and three-condition score composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::FloatGrid;

/// Scales for content (`s_i`), style (`s_t`) and mask (`s_m`) guidance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceScales {
    #[serde(rename = "s_I")]
    pub s_i: f64,
    #[serde(rename = "s_T")]
    pub s_t: f64,
    #[serde(rename = "s_M")]
    pub s_m: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self {
            s_i: 1.2,
            s_t: 1.5,
            s_m: 0.5,
        }
    }
}

impl GuidanceScales {
    pub fn new(s_i: f64, s_t: f64, s_m: f64) -> Self {
        Self { s_i, s_t, s_m }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s_I", self.s_i), ("s_T", self.s_t), ("s_M", self.s_m)] {
            if !v.is_finite() {
                return Err(Error::range(name, v, "finite"));
            }
            if v < 0.0 {
                log::warn!("negative guidance scale {name} = {v}");
            }
        }
        Ok(())
    }

    /// Weight on the unconditional estimate.
    pub fn null_weight(&self) -> f64 {
        1.0 - self.s_i - self.s_t - self.s_m
    }
}

/// `eps_uncond + s (eps_cond - eps_uncond)`, evaluated as
/// `(1 - s) eps_uncond + s eps_cond` so that `s = 1` returns `eps_cond` bit for bit.
pub fn cfg(eps_cond: &FloatGrid, eps_uncond: &FloatGrid, s: f64) -> Result<FloatGrid> {
    eps_uncond.zip_map(eps_cond, |u, c| (1.0 - s) * u + s * c)
}

/// `(1 - s_I - s_T - s_M) eps_null + s_I eps_I + s_T eps_T + s_M eps_M`.
pub fn composed_guidance(
    eps_null: &FloatGrid,
    eps_i: &FloatGrid,
    eps_t: &FloatGrid,
    eps_m: &FloatGrid,
    scales: &GuidanceScales,
) -> Result<FloatGrid> {
    for e in [eps_i, eps_t, eps_m] {
        eps_null.expect_same_shape("composed_guidance", e)?;
    }
    let w0 = scales.null_weight();
    let data = eps_null
        .data()
        .iter()
        .zip(eps_i.data())
        .zip(eps_t.data())
        .zip(eps_m.data())
        .map(|(((n, i), t), m)| w0 * n + scales.s_i * i + scales.s_t * t + scales.s_m * m)
        .collect();
    FloatGrid::new(eps_null.shape().to_vec(), data)
}
