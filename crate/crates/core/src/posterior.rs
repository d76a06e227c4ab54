//! Exact posterior over one layer's patch given the summed patch.
//!
//! For `y = x1 + x2` with both layers drawn from the prior, the posterior of
//! `x1` is a mixture with one component per ordered pair `(i, j)`:
//!
//! ```text
//! Σᵢⱼ   = (Σᵢ⁻¹ + Σⱼ⁻¹)⁻¹ = Σᵢ (Σᵢ + Σⱼ)⁻¹ Σⱼ
//! μᵢⱼ(y) = Σᵢⱼ[Σᵢ⁻¹μᵢ + Σⱼ⁻¹(y − μⱼ)] = μᵢ + Σᵢ (Σᵢ + Σⱼ)⁻¹ (y − μᵢ − μⱼ)
//! πᵢⱼ(y) ∝ πᵢ πⱼ N(y; μᵢ + μⱼ, Σᵢ + Σⱼ)
//! ```
//!
//! Everything except the weights and means is input-independent and lives in
//! a [`PairTable`]. Weights are handled in log space throughout: with a few
//! hundred prior components most raw cross-term weights underflow.

use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{GmmPrior, LN_2PI};
use crate::linalg::{self, packed_index, packed_len, Cholesky};
use crate::metrics::{exact_split, psnr_slices};
use crate::patch::Patch;

/// Jitter added once to a pair covariance whose factorization fails.
const PAIR_JITTER: f64 = 1e-10;

/// Which per-pair matrices a [`PairTable`] keeps resident.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairCaching {
    /// Pair covariances and their factors are stored (`2 × K(K+1)/2` dense
    /// matrices on top of the sum factors).
    Full,
    /// Only the `Σᵢ + Σⱼ` factors are stored; pair covariances are rebuilt on
    /// demand.
    LowMemory,
    /// `Full` up to [`AUTO_FULL_MAX_K`] components, `LowMemory` above.
    Auto,
}

pub const AUTO_FULL_MAX_K: usize = 64;

#[derive(Debug, Clone)]
struct PairEntry {
    covariance: Vec<f64>,
    factor: Cholesky,
}

/// Input-independent per-pair quantities. Entries are shared between `(i, j)`
/// and `(j, i)`, so `Σᵢⱼ = Σⱼᵢ` holds exactly.
#[derive(Debug, Clone)]
pub struct PairTable {
    prior_id: String,
    k: usize,
    dim: usize,
    sum_factors: Vec<Cholesky>,
    pairs: Option<Vec<PairEntry>>,
}

#[inline]
fn unordered(i: usize, j: usize) -> usize {
    if i >= j {
        packed_index(i, j)
    } else {
        packed_index(j, i)
    }
}

impl PairTable {
    pub fn build(prior: &GmmPrior, caching: PairCaching) -> Result<Self> {
        let k = prior.k();
        let dim = prior.dim();
        let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
        let sum_factors = pairs
            .par_iter()
            .map(|&(i, j)| {
                let a = &prior.component(i).covariance;
                let b = &prior.component(j).covariance;
                let sum: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                Cholesky::factor_with_jitter(&sum, dim, PAIR_JITTER).map_err(|e| {
                    Error::NotPositiveDefinite(format!("Σ{i} + Σ{j}: {e}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut table = PairTable { prior_id: prior.id().to_string(), k, dim, sum_factors, pairs: None };
        let full = match caching {
            PairCaching::Full => true,
            PairCaching::LowMemory => false,
            PairCaching::Auto => k <= AUTO_FULL_MAX_K,
        };
        if full {
            let entries = pairs
                .par_iter()
                .map(|&(i, j)| table.compute_pair(prior, i, j))
                .collect::<Result<Vec<_>>>()?;
            table.pairs = Some(entries);
        }
        Ok(table)
    }

    pub fn prior_id(&self) -> &str {
        &self.prior_id
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_fully_cached(&self) -> bool {
        self.pairs.is_some()
    }

    pub fn check_prior(&self, prior: &GmmPrior) -> Result<()> {
        if prior.id() != self.prior_id {
            return Err(Error::invalid(format!(
                "pair table was built for prior {}, not {}",
                self.prior_id,
                prior.id()
            )));
        }
        Ok(())
    }

    /// Cholesky factor of `Σᵢ + Σⱼ`.
    pub fn sum_factor(&self, i: usize, j: usize) -> &Cholesky {
        &self.sum_factors[unordered(i, j)]
    }

    fn compute_pair(&self, prior: &GmmPrior, i: usize, j: usize) -> Result<PairEntry> {
        let n = self.dim;
        let s = self.sum_factor(i, j);
        // Σᵢⱼ = (L⁻¹Σᵢ)ᵀ (L⁻¹Σⱼ) with L Lᵀ = Σᵢ + Σⱼ.
        let mut v = prior.component(i).covariance.clone();
        let mut w = prior.component(j).covariance.clone();
        s.solve_lower_block(&mut v, n);
        s.solve_lower_block(&mut w, n);
        let vt = linalg::transpose(&v, n, n);
        let mut cov = vec![0.0; n * n];
        linalg::gemm(n, n, n, 1.0, &vt, &w, 0.0, &mut cov);
        linalg::symmetrize(&mut cov, n);
        let factor = Cholesky::factor_with_jitter(&cov, n, PAIR_JITTER)
            .map_err(|e| Error::NotPositiveDefinite(format!("pair covariance ({i},{j}): {e}")))?;
        Ok(PairEntry { covariance: cov, factor })
    }

    fn entry(&self, prior: &GmmPrior, i: usize, j: usize) -> Result<Cow<'_, PairEntry>> {
        self.check_index(i, j)?;
        match &self.pairs {
            Some(p) => Ok(Cow::Borrowed(&p[unordered(i, j)])),
            None => {
                self.check_prior(prior)?;
                Ok(Cow::Owned(self.compute_pair(prior, i, j)?))
            }
        }
    }

    pub fn check_index(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.k || j >= self.k {
            return Err(Error::invalid(format!(
                "pair ({i},{j}) out of range for K={}",
                self.k
            )));
        }
        Ok(())
    }

    /// `Σᵢⱼ` as a dense row-major matrix.
    pub fn pair_covariance(&self, prior: &GmmPrior, i: usize, j: usize) -> Result<Vec<f64>> {
        Ok(self.entry(prior, i, j)?.covariance.clone())
    }

    /// Cholesky factor of `Σᵢⱼ`.
    pub fn pair_factor(&self, prior: &GmmPrior, i: usize, j: usize) -> Result<Cholesky> {
        Ok(match self.entry(prior, i, j)? {
            Cow::Borrowed(e) => e.factor.clone(),
            Cow::Owned(e) => e.factor,
        })
    }

    /// `(Aᵢⱼ, Bᵢⱼ) = (Σᵢⱼ Σᵢ⁻¹, Σᵢⱼ Σⱼ⁻¹) = (Σⱼ S⁻¹, Σᵢ S⁻¹)` with
    /// `S = Σᵢ + Σⱼ`, so that `μᵢⱼ = Aᵢⱼ μᵢ + Bᵢⱼ (y − μⱼ)`.
    pub fn gain_matrices(&self, prior: &GmmPrior, i: usize, j: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_index(i, j)?;
        let n = self.dim;
        let s = self.sum_factor(i, j);
        // Row r of M S⁻¹ is S⁻¹ M[:, r] since both are symmetric.
        let solve_t = |m: &[f64]| {
            let mut out = m.to_vec();
            for row in out.chunks_exact_mut(n) {
                s.solve_in_place(row);
            }
            out
        };
        let a = solve_t(&prior.component(j).covariance);
        let b = solve_t(&prior.component(i).covariance);
        Ok((a, b))
    }
}

/// Unnormalized `log(πᵢ πⱼ N(y; μᵢ + μⱼ, Σᵢ + Σⱼ))`.
pub fn pair_log_weight(prior: &GmmPrior, table: &PairTable, y: &[f64], i: usize, j: usize) -> f64 {
    let ci = prior.component(i);
    let cj = prior.component(j);
    let s = table.sum_factor(i, j);
    let mut r: Vec<f64> = y
        .iter()
        .zip(&ci.mean)
        .zip(&cj.mean)
        .map(|((yv, a), b)| yv - a - b)
        .collect();
    s.solve_lower_in_place(&mut r);
    let quad: f64 = r.iter().map(|v| v * v).sum();
    ci.log_weight() + cj.log_weight() - 0.5 * (y.len() as f64 * LN_2PI + s.log_det() + quad)
}

/// All `K²` unnormalized log-weights, `i`-major.
fn unnormalized_log_weights(prior: &GmmPrior, table: &PairTable, y: &[f64]) -> Vec<f64> {
    let k = prior.k();
    let lower: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|i| (0..=i).map(|j| pair_log_weight(prior, table, y, i, j)).collect())
        .collect();
    let mut out = vec![0.0; k * k];
    for (i, row) in lower.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            out[i * k + j] = w;
            out[j * k + i] = w;
        }
    }
    out
}

/// `log Z(y) = log Σᵢⱼ πᵢ πⱼ N(y; μᵢ + μⱼ, Σᵢ + Σⱼ)`, the density of the sum.
pub fn log_evidence(prior: &GmmPrior, table: &PairTable, y: &[f64]) -> f64 {
    linalg::log_sum_exp(&unnormalized_log_weights(prior, table, y))
}

/// Heaviest unordered pairs of one patch by unnormalized log-weight.
#[derive(Debug, Clone)]
pub(crate) struct PairShortlist {
    /// `(log weight, i, j)` with `i ≥ j`, heaviest first.
    pub pairs: Vec<(f64, u32, u32)>,
    /// Largest log-weight left out; `−∞` when every pair is listed.
    pub rest: f64,
}

/// `log Z(y)` together with the `len` heaviest unordered pairs.
#[cfg(test)]
pub(crate) fn evidence_and_shortlist(
    prior: &GmmPrior,
    table: &PairTable,
    y: &[f64],
    len: usize,
) -> (f64, PairShortlist) {
    evidence_and_shortlists(prior, table, y, 1, len).remove(0)
}

/// [`evidence_and_shortlist`] for `pb` patches stored as the columns of a
/// row-major `dim × pb` block.
pub(crate) fn evidence_and_shortlists(
    prior: &GmmPrior,
    table: &PairTable,
    y_cols: &[f64],
    pb: usize,
    len: usize,
) -> Vec<(f64, PairShortlist)> {
    let k = prior.k();
    let dim = prior.dim();
    let pairs = packed_len(k);
    let mut weights = vec![0.0; pb * pairs];
    let mut r = vec![0.0; dim * pb];
    for i in 0..k {
        for j in 0..=i {
            let (ci, cj) = (prior.component(i), prior.component(j));
            for d in 0..dim {
                let m = ci.mean[d] + cj.mean[d];
                for (dst, src) in r[d * pb..(d + 1) * pb].iter_mut().zip(&y_cols[d * pb..(d + 1) * pb]) {
                    *dst = src - m;
                }
            }
            let s = table.sum_factor(i, j);
            s.solve_lower_block(&mut r, pb);
            let base = ci.log_weight() + cj.log_weight() - 0.5 * (dim as f64 * LN_2PI + s.log_det());
            let u = packed_index(i, j);
            for c in 0..pb {
                let quad: f64 = (0..dim).map(|d| r[d * pb + c] * r[d * pb + c]).sum();
                weights[c * pairs + u] = base - 0.5 * quad;
            }
        }
    }
    let order = |a: &(f64, u32, u32), b: &(f64, u32, u32)| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2)));
    weights
        .chunks_exact(pairs)
        .map(|w| {
            // Off-diagonal pairs occur twice among the K² ordered pairs.
            let doubled: Vec<f64> = (0..k)
                .flat_map(|i| (0..=i).map(move |j| (i, j)))
                .map(|(i, j)| w[packed_index(i, j)] + if i == j { 0.0 } else { std::f64::consts::LN_2 })
                .collect();
            let log_z = linalg::log_sum_exp(&doubled);
            let mut lower: Vec<(f64, u32, u32)> = (0..k)
                .flat_map(|i| (0..=i).map(move |j| (i, j)))
                .map(|(i, j)| (w[packed_index(i, j)], i as u32, j as u32))
                .collect();
            let rest = if lower.len() > len {
                lower.select_nth_unstable_by(len, order);
                let rest = lower[len].0;
                lower.truncate(len);
                rest
            } else {
                f64::NEG_INFINITY
            };
            lower.sort_by(order);
            (log_z, PairShortlist { pairs: lower, rest })
        })
        .collect()
}

/// `μᵢⱼ(y) = μᵢ + Σᵢ (Σᵢ + Σⱼ)⁻¹ (y − μᵢ − μⱼ)`.
pub fn pair_mean(prior: &GmmPrior, table: &PairTable, y: &[f64], i: usize, j: usize) -> Vec<f64> {
    let ci = prior.component(i);
    let cj = prior.component(j);
    let n = y.len();
    let mut t: Vec<f64> = y
        .iter()
        .zip(&ci.mean)
        .zip(&cj.mean)
        .map(|((yv, a), b)| yv - a - b)
        .collect();
    table.sum_factor(i, j).solve_in_place(&mut t);
    let mut out = ci.mean.clone();
    for (r, o) in out.iter_mut().enumerate() {
        *o += ci.covariance[r * n..(r + 1) * n].iter().zip(&t).map(|(a, b)| a * b).sum::<f64>();
    }
    out
}

/// Posterior mixture over `x1` for one observed patch. Means are
/// materialized on demand.
#[derive(Debug, Clone)]
pub struct PosteriorGmm<'a> {
    prior: &'a GmmPrior,
    table: &'a PairTable,
    y: Patch,
    log_weights: Vec<f64>,
    log_normalizer: f64,
}

/// Build the posterior mixture for `y`.
pub fn posterior_components<'a>(
    y: &Patch,
    prior: &'a GmmPrior,
    table: &'a PairTable,
) -> Result<PosteriorGmm<'a>> {
    table.check_prior(prior)?;
    if prior.dim() != y.len() {
        return Err(Error::invalid("prior dimension does not match the patch"));
    }
    let mut log_weights = unnormalized_log_weights(prior, table, y);
    let log_normalizer = linalg::log_sum_exp(&log_weights);
    log_weights.iter_mut().for_each(|w| *w -= log_normalizer);
    Ok(PosteriorGmm { prior, table, y: y.clone(), log_weights, log_normalizer })
}

impl<'a> PosteriorGmm<'a> {
    pub fn y(&self) -> &Patch {
        &self.y
    }

    pub fn k(&self) -> usize {
        self.prior.k()
    }

    /// `log Z(y)`.
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    /// Normalized log-weights, `i`-major (`index = i·K + j`).
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn log_weight(&self, i: usize, j: usize) -> f64 {
        self.log_weights[i * self.k() + j]
    }

    pub fn mean(&self, i: usize, j: usize) -> Patch {
        Patch::from_slice(&pair_mean(self.prior, self.table, &self.y, i, j))
            .expect("finite inputs give finite means")
    }

    /// Log-density of the posterior at `x1` via the factorization
    /// `log P(x1) + log P(y − x1) − log Z(y)`.
    pub fn log_density(&self, x1: &[f64]) -> Result<f64> {
        let b: Vec<f64> = self.y.iter().zip(x1).map(|(y, a)| y - a).collect();
        Ok(self.prior.log_density(x1)? + self.prior.log_density(&b)? - self.log_normalizer)
    }

    /// Log-density of the posterior at `x1` evaluated directly as the
    /// `K²`-component mixture. Much slower than [`Self::log_density`].
    pub fn log_density_mixture(&self, x1: &[f64]) -> Result<f64> {
        let k = self.k();
        let n = x1.len();
        let mut terms = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                let f = self.table.pair_factor(self.prior, i, j)?;
                let m = pair_mean(self.prior, self.table, &self.y, i, j);
                let d: Vec<f64> = x1.iter().zip(&m).map(|(a, b)| a - b).collect();
                let quad = f.mahalanobis_sq(&d);
                terms.push(
                    self.log_weight(i, j) - 0.5 * (n as f64 * LN_2PI + f.log_det() + quad),
                );
            }
        }
        Ok(linalg::log_sum_exp(&terms))
    }

    /// The `min(n, K²)` highest-weight components with materialized means.
    pub fn top_candidates(&self, n: usize) -> CandidateSet {
        let k = self.k();
        let order = top_indices(&self.log_weights, n);
        let entries = order
            .into_iter()
            .enumerate()
            .map(|(rank, idx)| {
                let (i, j) = (idx / k, idx % k);
                let mean = pair_mean(self.prior, self.table, &self.y, i, j);
                let (x1, x2): (Vec<f64>, Vec<f64>) =
                    self.y.iter().zip(&mean).map(|(&y, &m)| exact_split(y, m)).unzip();
                Candidate {
                    rank,
                    i,
                    j,
                    log_weight: self.log_weights[idx],
                    x1: Patch::from_slice(&x1).expect("finite"),
                    x2: Patch::from_slice(&x2).expect("finite"),
                }
            })
            .collect();
        CandidateSet { y: self.y.clone(), entries }
    }
}

/// Ordering used for candidates: weight descending, then `(i, j)` ascending.
fn candidate_order(weights: &[f64], a: usize, b: usize) -> std::cmp::Ordering {
    weights[b].total_cmp(&weights[a]).then(a.cmp(&b))
}

/// Indices of the `n` largest weights in candidate order, by partial
/// selection.
fn top_indices(weights: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    let n = n.min(idx.len());
    if n == 0 {
        return Vec::new();
    }
    if n < idx.len() {
        idx.select_nth_unstable_by(n - 1, |&a, &b| candidate_order(weights, a, b));
        idx.truncate(n);
    }
    idx.sort_by(|&a, &b| candidate_order(weights, a, b));
    idx
}

/// One proposed local decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub rank: usize,
    pub i: usize,
    pub j: usize,
    pub log_weight: f64,
    pub x1: Patch,
    pub x2: Patch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub y: Patch,
    pub entries: Vec<Candidate>,
}

/// JSON export record, in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub rank: usize,
    pub i: usize,
    pub j: usize,
    pub log_weight: f64,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

impl From<&Candidate> for CandidateRecord {
    fn from(c: &Candidate) -> Self {
        CandidateRecord {
            rank: c.rank,
            i: c.i,
            j: c.j,
            log_weight: c.log_weight,
            x1: c.x1.to_vec(),
            x2: c.x2.to_vec(),
        }
    }
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn records(&self) -> Vec<CandidateRecord> {
        self.entries.iter().map(CandidateRecord::from).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.records())?)
    }
}

/// Build the posterior for `y` and return its top `n` candidates.
pub fn top_candidates(post: &PosteriorGmm<'_>, n: usize) -> Result<CandidateSet> {
    if n == 0 {
        return Err(Error::invalid("candidate count must be at least 1"));
    }
    Ok(post.top_candidates(n))
}

/// Best PSNR (peak 1.0, capped) of any candidate mean against the truth.
pub fn best_candidate_psnr(x1_true: &Patch, cands: &CandidateSet) -> Result<f64> {
    if cands.is_empty() {
        return Err(Error::invalid("empty candidate set"));
    }
    Ok(cands
        .entries
        .iter()
        .map(|c| psnr_slices(x1_true, &c.x1))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Packed storage size for `K` components' unordered pairs.
pub fn unordered_pair_count(k: usize) -> usize {
    packed_len(k)
}
