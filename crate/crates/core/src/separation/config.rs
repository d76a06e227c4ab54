use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::PATCH_DIM;

/// Base half-quadratic penalties, scaled by `stride² / 64`.
pub const BASE_BETAS: [f64; 6] = [1.0, 4.0, 16.0, 64.0, 256.0, 1024.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparationConfig {
    pub lambda_c: f64,
    /// Weight of the derivative-filter penalty used by filter annotations.
    pub lambda_f: f64,
    /// `None` selects [`BASE_BETAS`] scaled for the stride.
    pub beta_schedule: Option<Vec<f64>>,
    pub outer_iters_per_beta: usize,
    pub stride: usize,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub clip_to_physical: bool,
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig {
            lambda_c: 64.0,
            lambda_f: 1.0,
            beta_schedule: None,
            outer_iters_per_beta: 2,
            stride: 1,
            cg_tol: 1e-10,
            cg_max_iters: 1000,
            clip_to_physical: false,
            n_candidates: 100,
            seed: 0,
        }
    }
}

impl SeparationConfig {
    pub fn betas(&self) -> Vec<f64> {
        match &self.beta_schedule {
            Some(b) => b.clone(),
            None => {
                let scale = (self.stride * self.stride) as f64 / PATCH_DIM as f64;
                BASE_BETAS.iter().map(|b| b * scale).collect()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if !(self.lambda_c > 0.0 && self.lambda_c.is_finite()) {
            return bad("lambda_c must be positive");
        }
        if !(self.lambda_f > 0.0 && self.lambda_f.is_finite()) {
            return bad("lambda_f must be positive");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        if self.outer_iters_per_beta == 0 {
            return bad("outer_iters_per_beta must be at least 1");
        }
        if !(self.cg_tol > 0.0) || self.cg_max_iters == 0 {
            return bad("cg_tol and cg_max_iters must be positive");
        }
        if self.n_candidates == 0 {
            return bad("n_candidates must be at least 1");
        }
        let betas = self.betas();
        if betas.is_empty() {
            return bad("beta schedule is empty");
        }
        if betas.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return bad("beta schedule entries must be positive");
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return bad("beta schedule must be strictly increasing");
        }
        Ok(())
    }
}
