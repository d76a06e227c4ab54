//! Expectation-maximization training of the patch prior.
//!
//! The E-step runs over fixed-size data chunks (in parallel); chunk
//! statistics are merged in chunk order so results do not depend on the
//! number of worker threads.

use std::collections::HashSet;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::GmmPrior;
use crate::error::{Error, Result};
use crate::linalg;
use crate::patch::{Patch, PATCH_DIM};

const CHUNK: usize = 1024;
const KMEANS_SUBSAMPLE: usize = 20_000;
const KMEANS_ITERS: usize = 15;
/// Relative log-likelihood drop tolerated as rounding.
const MONOTONE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    RandomResponsibility,
    Kmeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop when the relative log-likelihood gain drops below this.
    pub tol: f64,
    /// Added to every covariance diagonal in each M-step.
    pub cov_floor: f64,
    pub seed: u64,
    pub init: InitMethod,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 50,
            max_iters: 100,
            tol: 1e-6,
            cov_floor: 1e-6,
            seed: 0,
            init: InitMethod::Kmeans,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if !(self.cov_floor > 0.0) {
            return Err(Error::invalid("cov_floor must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub prior: GmmPrior,
    /// Total training log-likelihood of each E-step; the last entry belongs to
    /// the returned model.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Fit a `cfg.k`-component mixture to `patches`.
pub fn train_em(patches: &[Patch], cfg: &TrainConfig) -> Result<EmFit> {
    let mut flat = Vec::with_capacity(patches.len() * PATCH_DIM);
    for p in patches {
        flat.extend_from_slice(p);
    }
    train_em_flat(&flat, PATCH_DIM, cfg)
}

/// Fit a mixture to row-major `data` (`n × dim`).
pub fn train_em_flat(data: &[f64], dim: usize, cfg: &TrainConfig) -> Result<EmFit> {
    cfg.validate()?;
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::invalid("data length is not a multiple of the dimension"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("training data contains non-finite values"));
    }
    let n = data.len() / dim;
    if count_distinct(data, dim, cfg.k) < cfg.k {
        return Err(Error::invalid(format!(
            "need at least K={} distinct training vectors",
            cfg.k
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut warnings = Vec::new();

    let global = accumulate_all(data, dim, 1, |_, chunk_n, resp| resp[..chunk_n].fill(1.0));
    let global_cov = global.covariance(0, cfg.cov_floor);

    let init_stats = match cfg.init {
        InitMethod::RandomResponsibility => {
            let seed = cfg.seed;
            let k = cfg.k;
            accumulate_all(data, dim, k, move |chunk_idx, chunk_n, resp| {
                let mut crng = ChaCha8Rng::seed_from_u64(seed);
                crng.set_stream(chunk_idx as u64 + 1);
                for j in 0..chunk_n {
                    let mut total = 0.0;
                    for c in 0..k {
                        let u: f64 = crng.random::<f64>() + 1e-3;
                        resp[c * chunk_n + j] = u;
                        total += u;
                    }
                    for c in 0..k {
                        resp[c * chunk_n + j] /= total;
                    }
                }
            })
        }
        InitMethod::Kmeans => {
            let centers = kmeans(data, dim, cfg.k, &mut rng);
            let k = cfg.k;
            accumulate_all(data, dim, k, |chunk_idx, chunk_n, resp| {
                resp.fill(0.0);
                let base = chunk_idx * CHUNK;
                for j in 0..chunk_n {
                    let x = &data[(base + j) * dim..(base + j + 1) * dim];
                    let best = nearest(&centers, dim, x);
                    resp[best * chunk_n + j] = 1.0;
                }
            })
        }
    };

    let mut prior = m_step(&init_stats, n, cfg, &global_cov, data, dim, &mut rng, &mut warnings)?;
    let mut previous: Option<GmmPrior> = None;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for iter in 0..cfg.max_iters {
        let stats = e_step(&prior, data, dim);
        let ll = stats.log_likelihood;
        if let Some(&prev) = trace.last() {
            // The floored M-step is not an exact maximizer and can overshoot.
            if ll < prev - MONOTONE_SLACK * prev.abs() {
                if let Some(p) = previous.take() {
                    prior = p;
                }
                warnings.push(format!(
                    "iteration {iter}: floored update lowered the log-likelihood ({prev} to {ll}); kept the previous model"
                ));
                converged = true;
                break;
            }
            trace.push(ll);
            if ll - prev <= cfg.tol * prev.abs() {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        if iter + 1 == cfg.max_iters {
            break;
        }
        let next = m_step(&stats, n, cfg, &global_cov, data, dim, &mut rng, &mut warnings)?;
        previous = Some(std::mem::replace(&mut prior, next));
    }
    Ok(EmFit { prior, log_likelihood: trace, converged, warnings })
}

fn count_distinct(data: &[f64], dim: usize, needed: usize) -> usize {
    let mut seen = HashSet::new();
    for row in data.chunks_exact(dim) {
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        seen.insert(key);
        if seen.len() >= needed {
            break;
        }
    }
    seen.len()
}

/// Sufficient statistics `(Nₖ, Σ r x, Σ r x xᵀ)` plus the log-likelihood.
struct Stats {
    k: usize,
    dim: usize,
    nk: Vec<f64>,
    sx: Vec<f64>,
    sxx: Vec<f64>,
    log_likelihood: f64,
}

impl Stats {
    fn zeros(k: usize, dim: usize) -> Self {
        Stats {
            k,
            dim,
            nk: vec![0.0; k],
            sx: vec![0.0; k * dim],
            sxx: vec![0.0; k * dim * dim],
            log_likelihood: 0.0,
        }
    }

    fn merge(&mut self, other: &Stats) {
        self.nk.iter_mut().zip(&other.nk).for_each(|(a, b)| *a += b);
        self.sx.iter_mut().zip(&other.sx).for_each(|(a, b)| *a += b);
        self.sxx.iter_mut().zip(&other.sxx).for_each(|(a, b)| *a += b);
        self.log_likelihood += other.log_likelihood;
    }

    fn mean(&self, c: usize) -> Vec<f64> {
        let d = self.dim;
        self.sx[c * d..(c + 1) * d].iter().map(|v| v / self.nk[c]).collect()
    }

    /// Weighted covariance of component `c` with `floor` added to the diagonal.
    fn covariance(&self, c: usize, floor: f64) -> Vec<f64> {
        let d = self.dim;
        let mean = self.mean(c);
        let block = &self.sxx[c * d * d..(c + 1) * d * d];
        let mut cov: Vec<f64> = (0..d * d)
            .map(|idx| block[idx] / self.nk[c] - mean[idx / d] * mean[idx % d])
            .collect();
        linalg::symmetrize(&mut cov, d);
        for i in 0..d {
            cov[i * d + i] += floor;
        }
        cov
    }

    /// Add one chunk's contribution. `dt` is the chunk transposed
    /// (`dim × n`), `resp` is `k × n`.
    fn accumulate(&mut self, dt: &[f64], n: usize, resp: &[f64]) {
        let d = self.dim;
        let mut weighted = vec![0.0; d * n];
        for c in 0..self.k {
            let r = &resp[c * n..(c + 1) * n];
            let total: f64 = r.iter().sum();
            if total == 0.0 {
                continue;
            }
            self.nk[c] += total;
            let sx = &mut self.sx[c * d..(c + 1) * d];
            for (row, s) in sx.iter_mut().enumerate() {
                *s += dt[row * n..(row + 1) * n].iter().zip(r).map(|(x, w)| x * w).sum::<f64>();
            }
            for row in 0..d {
                for j in 0..n {
                    weighted[row * n + j] = dt[row * n + j] * r[j].sqrt();
                }
            }
            linalg::gram(d, n, 1.0, &weighted, 1.0, &mut self.sxx[c * d * d..(c + 1) * d * d]);
        }
    }
}

fn transpose_chunk(chunk: &[f64], dim: usize) -> (Vec<f64>, usize) {
    let n = chunk.len() / dim;
    (linalg::transpose(chunk, n, dim), n)
}

/// Statistics for responsibilities produced by `fill(chunk_idx, n, resp)`.
fn accumulate_all<F>(data: &[f64], dim: usize, k: usize, fill: F) -> Stats
where
    F: Fn(usize, usize, &mut [f64]) + Sync,
{
    reduce_chunks(data, dim, k, |idx, chunk| {
        let (dt, n) = transpose_chunk(chunk, dim);
        let mut resp = vec![0.0; k * n];
        fill(idx, n, &mut resp);
        let mut s = Stats::zeros(k, dim);
        s.accumulate(&dt, n, &resp);
        s
    })
}

/// Map every chunk to statistics and merge them in chunk order.
fn reduce_chunks<F>(data: &[f64], dim: usize, k: usize, map: F) -> Stats
where
    F: Fn(usize, &[f64]) -> Stats + Sync,
{
    let chunks: Vec<&[f64]> = data.chunks(CHUNK * dim).collect();
    let wave = (rayon::current_num_threads() * 2).max(1);
    let mut total = Stats::zeros(k, dim);
    for (wave_idx, group) in chunks.chunks(wave).enumerate() {
        let parts: Vec<Stats> = group
            .par_iter()
            .enumerate()
            .map(|(off, chunk)| map(wave_idx * wave + off, chunk))
            .collect();
        for p in &parts {
            total.merge(p);
        }
    }
    total
}

fn e_step(prior: &GmmPrior, data: &[f64], dim: usize) -> Stats {
    let k = prior.k();
    reduce_chunks(data, dim, k, |_, chunk| {
        let (dt, n) = transpose_chunk(chunk, dim);
        let mut logp = vec![0.0; k * n];
        let mut centered = vec![0.0; dim * n];
        for (c, comp) in prior.components().iter().enumerate() {
            for row in 0..dim {
                let m = comp.mean[row];
                for j in 0..n {
                    centered[row * n + j] = dt[row * n + j] - m;
                }
            }
            comp.cholesky.solve_lower_block(&mut centered, n);
            let out = &mut logp[c * n..(c + 1) * n];
            out.fill(comp.log_norm);
            for row in 0..dim {
                for (o, v) in out.iter_mut().zip(&centered[row * n..(row + 1) * n]) {
                    *o -= 0.5 * v * v;
                }
            }
        }
        let mut ll = 0.0;
        let mut column = vec![0.0; k];
        for j in 0..n {
            for c in 0..k {
                column[c] = logp[c * n + j];
            }
            let lse = linalg::log_sum_exp(&column);
            ll += lse;
            for c in 0..k {
                logp[c * n + j] = (column[c] - lse).exp();
            }
        }
        let mut s = Stats::zeros(k, dim);
        s.accumulate(&dt, n, &logp);
        s.log_likelihood = ll;
        s
    })
}

#[allow(clippy::too_many_arguments)]
fn m_step(
    stats: &Stats,
    n: usize,
    cfg: &TrainConfig,
    global_cov: &[f64],
    data: &[f64],
    dim: usize,
    rng: &mut ChaCha8Rng,
    warnings: &mut Vec<String>,
) -> Result<GmmPrior> {
    let k = stats.k;
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for c in 0..k {
        if !(stats.nk[c] > 1e-12) {
            let pick = rng.random_range(0..n);
            let msg = format!("component {c} collapsed; re-seeded from training vector {pick}");
            warn!("{msg}");
            warnings.push(msg);
            weights.push(1.0 / k as f64);
            means.push(data[pick * dim..(pick + 1) * dim].to_vec());
            covs.push(global_cov.to_vec());
        } else {
            weights.push(stats.nk[c] / n as f64);
            means.push(stats.mean(c));
            covs.push(stats.covariance(c, cfg.cov_floor));
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GmmPrior::new(weights, means, covs)
}

fn nearest(centers: &[f64], dim: usize, x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        let d: f64 = center.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// k-means++ seeding plus Lloyd iterations on a seeded subsample.
fn kmeans(data: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let sample: Vec<usize> = if n <= KMEANS_SUBSAMPLE {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, KMEANS_SUBSAMPLE).into_vec()
    };
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centers = Vec::with_capacity(k * dim);
    centers.extend_from_slice(row(sample[rng.random_range(0..sample.len())]));
    let mut d2: Vec<f64> = sample
        .iter()
        .map(|&i| row(i).iter().zip(&centers[..dim]).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = sample.len() - 1;
            for (s, d) in d2.iter().enumerate() {
                if u < *d {
                    chosen = s;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..sample.len())
        };
        let start = centers.len();
        centers.extend_from_slice(row(sample[pick]));
        for (s, &i) in sample.iter().enumerate() {
            let d: f64 = row(i).iter().zip(&centers[start..]).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[s] = d2[s].min(d);
        }
    }
    for _ in 0..KMEANS_ITERS {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for &i in &sample {
            let c = nearest(&centers, dim, row(i));
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centers[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            }
        }
    }
    centers
}
