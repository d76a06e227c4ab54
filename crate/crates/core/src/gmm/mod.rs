//! Gaussian mixture prior over vectorized 8×8 patches.
//!
//! Patches are modeled in raw intensity, DC included.

mod em;
mod format;

pub use em::{train_em, train_em_flat, EmFit, InitMethod, TrainConfig};
pub use format::{read_gmm1, write_gmm1, GMM1_MAGIC, GMM1_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};
use crate::patch::{Patch, PATCH_DIM};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5; // ln(2π)

/// One mixture component with its cached factorizations.
#[derive(Debug, Clone)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    pub cholesky: Cholesky,
    pub precision: Vec<f64>,
    /// `log w − ½(d ln 2π + log det Σ)`.
    log_norm: f64,
}

impl Component {
    pub fn log_det(&self) -> f64 {
        self.cholesky.log_det()
    }

    pub fn log_weight(&self) -> f64 {
        self.weight.ln()
    }

    /// `log(w N(x; μ, Σ))`; `scratch` has the model dimension.
    fn weighted_log_density(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        for ((s, xv), m) in scratch.iter_mut().zip(x).zip(&self.mean) {
            *s = xv - m;
        }
        self.cholesky.solve_lower_in_place(scratch);
        let quad: f64 = scratch.iter().map(|v| v * v).sum();
        self.log_norm - 0.5 * quad
    }
}

/// Immutable mixture prior `Σₖ πₖ N(x; μₖ, Σₖ)`.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    dim: usize,
    components: Vec<Component>,
    id: String,
}

impl GmmPrior {
    /// Build a prior from raw parameters, validating every invariant.
    ///
    /// Weights must be positive and sum to one (within 1e-6; they are then
    /// renormalized exactly). Covariances must be symmetric within 1e-10 and
    /// positive definite.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::invalid("a mixture needs at least one component"));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::invalid("weights, means and covariances disagree on K"));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::invalid("zero-dimensional mixture"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("mixture weights must be strictly positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        let mut components = Vec::with_capacity(k);
        for (idx, ((w, mean), mut cov)) in weights.iter().zip(means).zip(covariances).enumerate() {
            if mean.len() != dim || cov.len() != dim * dim {
                return Err(Error::invalid(format!("component {idx} has the wrong shape")));
            }
            if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("component {idx} has non-finite parameters")));
            }
            let asym = linalg::max_asymmetry(&cov, dim);
            if asym > 1e-10 {
                return Err(Error::invalid(format!(
                    "covariance {idx} is not symmetric (max asymmetry {asym:e})"
                )));
            }
            linalg::symmetrize(&mut cov, dim);
            let cholesky = Cholesky::factor(&cov, dim)
                .map_err(|e| Error::NotPositiveDefinite(format!("covariance {idx}: {e}")))?;
            let precision = cholesky.inverse();
            let weight = w / total;
            let log_norm = weight.ln() - 0.5 * (dim as f64 * LN_2PI + cholesky.log_det());
            components.push(Component { weight, mean, covariance: cov, cholesky, precision, log_norm });
        }
        let mut prior = GmmPrior { dim, components, id: String::new() };
        prior.id = crate::io::sha256_hex(&format::to_bytes(&prior))[..16].to_string();
        Ok(prior)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn component(&self, k: usize) -> &Component {
        &self.components[k]
    }

    /// Short content hash identifying this prior (hex prefix of the SHA-256
    /// of its GMM1 encoding).
    pub fn id(&self) -> &str {
        &self.id
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "expected a {}-vector, got {}",
                self.dim,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input contains non-finite values"));
        }
        Ok(())
    }

    /// Per-component `log(πₖ N(x; μₖ, Σₖ))` into `out`.
    pub fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        let mut scratch = vec![0.0; self.dim];
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.weighted_log_density(x, &mut scratch);
        }
    }

    /// `log P(x)` in nats.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.log_density_unchecked(x))
    }

    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let mut terms = vec![0.0; self.k()];
        self.component_log_densities(x, &mut terms);
        linalg::log_sum_exp(&terms)
    }

    /// `log P(x)` and its gradient `−Σₖ γₖ(x) Σₖ⁻¹ (x − μₖ)`.
    pub fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.k();
        let mut terms = vec![0.0; k];
        self.component_log_densities(x, &mut terms);
        let total = linalg::log_sum_exp(&terms);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut diff = vec![0.0; self.dim];
        for (c, t) in self.components.iter().zip(&terms) {
            let gamma = (t - total).exp();
            if gamma == 0.0 {
                continue;
            }
            for ((d, xv), m) in diff.iter_mut().zip(x).zip(&c.mean) {
                *d = xv - m;
            }
            for (r, g) in grad.iter_mut().enumerate() {
                let row = &c.precision[r * self.dim..(r + 1) * self.dim];
                let s: f64 = row.iter().zip(&diff).map(|(p, d)| p * d).sum();
                *g -= gamma * s;
            }
        }
        total
    }

    /// Posterior component responsibilities `γₖ(x)`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut terms = vec![0.0; self.k()];
        self.component_log_densities(x, &mut terms);
        let total = linalg::log_sum_exp(&terms);
        Ok(terms.iter().map(|t| (t - total).exp()).collect())
    }

    /// Draw `n` i.i.d. vectors, returning each with its component label.
    pub fn sample_labeled(&self, n: usize, seed: u64) -> Vec<(usize, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = vec![0.0; self.dim];
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut label = self.k() - 1;
                for (idx, c) in self.components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        label = idx;
                        break;
                    }
                }
                for v in z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let c = &self.components[label];
                let mut x = vec![0.0; self.dim];
                c.cholesky.lower_mul(&z, &mut x);
                for (xv, m) in x.iter_mut().zip(&c.mean) {
                    *xv += m;
                }
                (label, x)
            })
            .collect()
    }

    /// Draw `n` i.i.d. patches. Requires a 64-dimensional prior.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Patch>> {
        if self.dim != PATCH_DIM {
            return Err(Error::invalid("patch sampling needs a 64-dimensional prior"));
        }
        self.sample_labeled(n, seed)
            .into_iter()
            .map(|(_, x)| Patch::from_slice(&x))
            .collect()
    }

    /// Same model with components reordered by `perm` (`new[k] = old[perm[k]]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<GmmPrior> {
        if perm.len() != self.k() {
            return Err(Error::invalid("permutation length mismatch"));
        }
        GmmPrior::new(
            perm.iter().map(|&p| self.components[p].weight).collect(),
            perm.iter().map(|&p| self.components[p].mean.clone()).collect(),
            perm.iter().map(|&p| self.components[p].covariance.clone()).collect(),
        )
    }

    /// Isotropic single-component prior `N(mean·1, σ² I)` in `dim` dimensions.
    pub fn isotropic(dim: usize, mean: f64, variance: f64) -> Result<GmmPrior> {
        let mut cov = vec![0.0; dim * dim];
        for d in 0..dim {
            cov[d * dim + d] = variance;
        }
        GmmPrior::new(vec![1.0], vec![vec![mean; dim]], vec![cov])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_at_mean() {
        let prior = GmmPrior::isotropic(64, 0.0, 1.0).unwrap();
        let v = prior.log_density(&[0.0; 64]).unwrap();
        assert!((v - (-32.0 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((v + 58.8125).abs() < 1e-3);
    }

    #[test]
    fn duplicate_components_collapse() {
        let eye = linalg::identity(64);
        let prior = GmmPrior::new(vec![0.5, 0.5], vec![vec![0.0; 64]; 2], vec![eye.clone(), eye]).unwrap();
        let v = prior.log_density(&[0.0; 64]).unwrap();
        assert!((v - (-32.0 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let prior = GmmPrior::isotropic(64, 0.0, 1.0).unwrap();
        let mut x = [0.0; 64];
        x[5] = f64::NAN;
        assert!(matches!(prior.log_density(&x), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let eye = linalg::identity(2);
        assert!(GmmPrior::new(vec![0.7, 0.7], vec![vec![0.0; 2]; 2], vec![eye.clone(), eye.clone()]).is_err());
        assert!(GmmPrior::new(vec![1.0, 0.0], vec![vec![0.0; 2]; 2], vec![eye.clone(), eye.clone()]).is_err());
        let asym = vec![1.0, 0.1, 0.0, 1.0];
        assert!(GmmPrior::new(vec![1.0], vec![vec![0.0; 2]], vec![asym]).is_err());
        let indefinite = vec![1.0, 2.0, 2.0, 1.0];
        assert!(matches!(
            GmmPrior::new(vec![1.0], vec![vec![0.0; 2]], vec![indefinite]),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn precision_inverts_covariance() {
        let mut cov = linalg::identity(3);
        cov[1] = 0.4;
        cov[3] = 0.4;
        cov[8] = 2.5;
        let prior = GmmPrior::new(vec![1.0], vec![vec![0.1, 0.2, 0.3]], vec![cov.clone()]).unwrap();
        let c = prior.component(0);
        let mut prod = vec![0.0; 9];
        linalg::gemm(3, 3, 3, 1.0, &c.precision, &cov, 0.0, &mut prod);
        for (p, e) in prod.iter().zip(linalg::identity(3)) {
            assert!((p - e).abs() < 1e-8);
        }
    }

    #[test]
    fn near_degenerate_samples_hug_the_mean() {
        let prior = GmmPrior::isotropic(64, 0.3, 1e-12).unwrap();
        for p in prior.sample(200, 9).unwrap() {
            assert!(p.iter().all(|v| (v - 0.3).abs() < 1e-4));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let prior = GmmPrior::new(
            vec![0.4, 0.6],
            vec![vec![0.0, 0.5], vec![1.0, -0.2]],
            vec![vec![0.5, 0.1, 0.1, 0.3], vec![0.2, 0.0, 0.0, 0.8]],
        )
        .unwrap();
        let x = [0.3, 0.1];
        let mut g = [0.0; 2];
        prior.log_density_and_gradient(&x, &mut g);
        let h = 1e-6;
        for d in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[d] += h;
            xm[d] -= h;
            let fd = (prior.log_density(&xp).unwrap() - prior.log_density(&xm).unwrap()) / (2.0 * h);
            assert!((fd - g[d]).abs() < 1e-6);
        }
    }
}
