//! Half-quadratic splitting: auxiliary patches `zₚ` coupled to `Pₚx₁` by
//! `β/2 ‖Pₚx₁ − zₚ‖²`, alternating a per-patch MAP pair selection with Wiener
//! update and a global least-squares solve for `x₁`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::objective::{FilterTerm, Problem, QuadraticTerm};
use crate::error::{Error, Result};
use crate::gmm::{GmmPrior, LN_2PI};
use crate::linalg::{self, packed_index, packed_len, Cholesky};
use crate::patch::{Image, PATCH_DIM, PATCH_SIDE};
use crate::posterior::{pair_log_weight, pair_mean, PairShortlist, PairTable};

const D: usize = PATCH_DIM;
const BLOCK: usize = 32;

/// Pair chosen for one patch in one alternation. `tie` marks an exact score
/// tie with the swapped pair, in which case both Wiener estimates are
/// averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub i: u32,
    pub j: u32,
    pub tie: bool,
}

/// Selections of every alternation, stage-major.
pub type SelectionLog = Vec<Vec<Selection>>;

/// Per-`β` quantities for every unordered pair: `L⁻¹` with
/// `L Lᵀ = βI + Σᵢ⁻¹ + Σⱼ⁻¹`, the score constant, and
/// `log det(Σᵢⱼ + I/β)`.
pub(crate) struct StageTable {
    k: usize,
    linv: Vec<f64>,
    constant: Vec<f64>,
    logdet_smoothed: Vec<f64>,
    /// `score(i, j) ≤ log wᵢⱼ(y) + bound_offset` for every ordered pair.
    bound_offset: f64,
}

impl StageTable {
    pub fn build(prior: &GmmPrior, table: &PairTable, beta: f64) -> Result<Self> {
        let k = prior.k();
        let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
        let d = D as f64;
        let parts = pairs
            .par_iter()
            .map(|&(i, j)| {
                let (ci, cj) = (prior.component(i), prior.component(j));
                let mut m: Vec<f64> = ci.precision.iter().zip(&cj.precision).map(|(a, b)| a + b).collect();
                for r in 0..D {
                    m[r * D + r] += beta;
                }
                linalg::symmetrize(&mut m, D);
                let chol = Cholesky::factor(&m, D)
                    .map_err(|e| Error::NotPositiveDefinite(format!("stage matrix ({i},{j}): {e}")))?;
                let mut linv = linalg::identity(D);
                chol.solve_lower_block(&mut linv, D);
                let ldm = chol.log_det();
                let constant = ci.log_weight() + cj.log_weight()
                    - 0.5 * (2.0 * d * LN_2PI + ci.log_det() + cj.log_det() - d * beta.ln() + ldm);
                let smoothed = ci.log_det() + cj.log_det() - table.sum_factor(i, j).log_det() + ldm
                    - d * beta.ln();
                Ok((linv, constant, smoothed))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut linv = Vec::with_capacity(packed_len(k) * D * D);
        let mut constant = Vec::with_capacity(packed_len(k));
        let mut logdet_smoothed = Vec::with_capacity(packed_len(k));
        for (l, c, s) in parts {
            linv.extend_from_slice(&l);
            constant.push(c);
            logdet_smoothed.push(s);
        }
        let bound_offset = 0.5 * d * (beta.ln() - LN_2PI);
        Ok(StageTable { k, linv, constant, logdet_smoothed, bound_offset })
    }

    fn unordered(&self, i: usize, j: usize) -> usize {
        if i >= j {
            packed_index(i, j)
        } else {
            packed_index(j, i)
        }
    }

    fn linv(&self, u: usize) -> &[f64] {
        &self.linv[u * D * D..(u + 1) * D * D]
    }

    /// Wiener estimate `(βI + Q)⁻¹(Q μᵢⱼ + β a)` written as `a − M⁻¹ s` with
    /// `s = Σᵢ⁻¹(a − μᵢ) − Σⱼ⁻¹(y − a − μⱼ)`.
    fn wiener(&self, prior: &GmmPrior, a: &[f64], y: &[f64], i: usize, j: usize) -> [f64; D] {
        let (ci, cj) = (prior.component(i), prior.component(j));
        let mut da = [0.0; D];
        let mut db = [0.0; D];
        for r in 0..D {
            da[r] = a[r] - ci.mean[r];
            db[r] = y[r] - a[r] - cj.mean[r];
        }
        let mut g = [0.0; D];
        let mut h = [0.0; D];
        linalg::matvec(&ci.precision, &da, &mut g);
        linalg::matvec(&cj.precision, &db, &mut h);
        for r in 0..D {
            g[r] -= h[r];
        }
        let l = self.linv(self.unordered(i, j));
        let mut t = [0.0; D];
        for r in 0..D {
            t[r] = l[r * D..r * D + r + 1].iter().zip(&g).map(|(x, y)| x * y).sum();
        }
        let mut z = [0.0; D];
        z.copy_from_slice(a);
        for r in 0..D {
            let tr = t[r];
            for c in 0..=r {
                z[c] -= l[r * D + c] * tr;
            }
        }
        z
    }

    fn estimate(&self, prior: &GmmPrior, a: &[f64], y: &[f64], s: Selection) -> [f64; D] {
        let (i, j) = (s.i as usize, s.j as usize);
        let mut z = self.wiener(prior, a, y, i, j);
        if s.tie {
            let w = self.wiener(prior, a, y, j, i);
            for (zv, wv) in z.iter_mut().zip(&w) {
                *zv = 0.5 * (*zv + wv);
            }
        }
        z
    }

    /// MAP pair under the β-smoothed posterior for `pb` patches given
    /// patch-major `a` and `y`.
    fn select(&self, prior: &GmmPrior, a_pm: &[f64], y_pm: &[f64], pb: usize) -> Vec<Selection> {
        let k = self.k;
        let b_pm: Vec<f64> = y_pm.iter().zip(a_pm).map(|(y, a)| y - a).collect();
        let a_rm = linalg::transpose(a_pm, pb, D);
        let b_rm = linalg::transpose(&b_pm, pb, D);
        // G_k = Σₖ⁻¹(A − μₖ), αₖ = column sums of (A − μₖ) ∘ G_k; same for B.
        let centered = |x: &[f64], m: usize| {
            let c = prior.component(m);
            let mut dx = x.to_vec();
            for r in 0..D {
                dx[r * pb..(r + 1) * pb].iter_mut().for_each(|v| *v -= c.mean[r]);
            }
            let mut g = vec![0.0; D * pb];
            linalg::gemm(D, D, pb, 1.0, &c.precision, &dx, 0.0, &mut g);
            let mut alpha = vec![0.0; pb];
            for r in 0..D {
                for col in 0..pb {
                    alpha[col] += dx[r * pb + col] * g[r * pb + col];
                }
            }
            (g, alpha)
        };
        let (ga, aa): (Vec<_>, Vec<_>) = (0..k).map(|m| centered(&a_rm, m)).unzip();
        let (hb, ab): (Vec<_>, Vec<_>) = (0..k).map(|m| centered(&b_rm, m)).unzip();

        let mut best = vec![f64::NEG_INFINITY; pb];
        let mut best_idx = vec![usize::MAX; pb];
        let mut best_swap = vec![f64::NEG_INFINITY; pb];
        let mut update = |c: usize, sc: f64, idx: usize, swap: f64| {
            if sc > best[c] || (sc == best[c] && idx < best_idx[c]) {
                best[c] = sc;
                best_idx[c] = idx;
                best_swap[c] = swap;
            }
        };
        let mut s = vec![0.0; D * 2 * pb];
        let mut t = vec![0.0; D * 2 * pb];
        let mut norms = vec![0.0; 2 * pb];
        for i in 0..k {
            for j in 0..=i {
                let u = packed_index(i, j);
                let width = if i == j { pb } else { 2 * pb };
                for r in 0..D {
                    let row = &mut s[r * width..(r + 1) * width];
                    let gi = &ga[i][r * pb..(r + 1) * pb];
                    let hj = &hb[j][r * pb..(r + 1) * pb];
                    for col in 0..pb {
                        row[col] = gi[col] - hj[col];
                    }
                    if i != j {
                        let gj = &ga[j][r * pb..(r + 1) * pb];
                        let hi = &hb[i][r * pb..(r + 1) * pb];
                        for col in 0..pb {
                            row[pb + col] = gj[col] - hi[col];
                        }
                    }
                }
                linalg::gemm(D, D, width, 1.0, self.linv(u), &s[..D * width], 0.0, &mut t[..D * width]);
                norms[..width].iter_mut().for_each(|n| *n = 0.0);
                for r in 0..D {
                    for (n, v) in norms[..width].iter_mut().zip(&t[r * width..(r + 1) * width]) {
                        *n += v * v;
                    }
                }
                let cst = self.constant[u];
                for col in 0..pb {
                    let sij = cst - 0.5 * (aa[i][col] + ab[j][col] - norms[col]);
                    if i == j {
                        update(col, sij, i * k + i, sij);
                    } else {
                        let sji = cst - 0.5 * (aa[j][col] + ab[i][col] - norms[pb + col]);
                        update(col, sij, i * k + j, sji);
                        update(col, sji, j * k + i, sij);
                    }
                }
            }
        }
        (0..pb)
            .map(|c| {
                let idx = if best_idx[c] == usize::MAX { 0 } else { best_idx[c] };
                let (i, j) = (idx / k, idx % k);
                Selection { i: i as u32, j: j as u32, tie: i != j && best_swap[c] == best[c] }
            })
            .collect()
    }

    /// MAP pair for one patch, scoring shortlisted pairs heaviest first and
    /// stopping once the weight bound rules out every remaining pair.
    /// `None` when the shortlist runs out first.
    fn select_shortlisted(&self, prior: &GmmPrior, a: &[f64], y: &[f64], list: &PairShortlist) -> Option<Selection> {
        let k = self.k;
        let b: Vec<f64> = y.iter().zip(a).map(|(p, q)| p - q).collect();
        let mut cache: Vec<ComponentTerms> = Vec::new();
        let slot = |cache: &mut Vec<ComponentTerms>, m: usize| -> usize {
            if let Some(p) = cache.iter().position(|c| c.index == m) {
                return p;
            }
            cache.push(ComponentTerms::new(prior, m, a, &b));
            cache.len() - 1
        };
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = usize::MAX;
        let mut best_swap = f64::NEG_INFINITY;
        for (pos, &(_, i, j)) in list.pairs.iter().enumerate() {
            let (i, j) = (i as usize, j as usize);
            let (si, sj) = (slot(&mut cache, i), slot(&mut cache, j));
            let u = packed_index(i, j);
            let l = self.linv(u);
            let score = |first: usize, second: usize| {
                let (g, alpha_a) = (&cache[first].ga, cache[first].alpha_a);
                let (h, alpha_b) = (&cache[second].gb, cache[second].alpha_b);
                let mut norm = 0.0;
                for r in 0..D {
                    let t: f64 = l[r * D..r * D + r + 1].iter().zip(g.iter().zip(h)).map(|(lv, (p, q))| lv * (p - q)).sum();
                    norm += t * t;
                }
                self.constant[u] - 0.5 * (alpha_a + alpha_b - norm)
            };
            let sij = score(si, sj);
            let sji = if i == j { sij } else { score(sj, si) };
            for (sc, idx, swap) in [(sij, i * k + j, sji), (sji, j * k + i, sij)] {
                if sc > best || (sc == best && idx < best_idx) {
                    best = sc;
                    best_idx = idx;
                    best_swap = swap;
                }
            }
            let next = list.pairs.get(pos + 1).map_or(list.rest, |p| p.0);
            let margin = 1e-9 * (1.0 + best.abs());
            if best >= next + self.bound_offset + margin {
                let (i, j) = (best_idx / k, best_idx % k);
                return Some(Selection { i: i as u32, j: j as u32, tie: i != j && best_swap == best });
            }
        }
        None
    }

    /// Surrogate contribution of one patch that does not depend on `x₁`:
    /// `½(z − μ)ᵀQ(z − μ) − log πᵢⱼ(y) + ½ log det 2π(Σᵢⱼ + I/β)`.
    fn z_term(&self, prior: &GmmPrior, table: &PairTable, z: &[f64], y: &[f64], log_z: f64, s: Selection) -> f64 {
        let (i, j) = (s.i as usize, s.j as usize);
        let mu = pair_mean(prior, table, y, i, j);
        let d: Vec<f64> = z.iter().zip(&mu).map(|(a, b)| a - b).collect();
        let quad = prior.component(i).cholesky.mahalanobis_sq(&d) + prior.component(j).cholesky.mahalanobis_sq(&d);
        let lw = pair_log_weight(prior, table, y, i, j) - log_z;
        0.5 * quad - lw + 0.5 * (D as f64 * LN_2PI + self.logdet_smoothed[self.unordered(i, j)])
    }
}

/// `Σₘ⁻¹(a − μₘ)` and `(a − μₘ)ᵀΣₘ⁻¹(a − μₘ)`, likewise for `b`.
struct ComponentTerms {
    index: usize,
    ga: [f64; D],
    alpha_a: f64,
    gb: [f64; D],
    alpha_b: f64,
}

impl ComponentTerms {
    fn new(prior: &GmmPrior, m: usize, a: &[f64], b: &[f64]) -> Self {
        let c = prior.component(m);
        let centered = |x: &[f64]| {
            let mut dx = [0.0; D];
            for r in 0..D {
                dx[r] = x[r] - c.mean[r];
            }
            let mut g = [0.0; D];
            linalg::matvec(&c.precision, &dx, &mut g);
            let alpha = dx.iter().zip(&g).map(|(p, q)| p * q).sum::<f64>();
            (g, alpha)
        };
        let (ga, alpha_a) = centered(a);
        let (gb, alpha_b) = centered(b);
        ComponentTerms { index: m, ga, alpha_a, gb, alpha_b }
    }
}

/// Result of one auxiliary pass over all patches.
pub(crate) struct AuxPass {
    pub selections: Vec<Selection>,
    /// Patch-major Wiener estimates.
    pub z: Vec<f64>,
}

pub(crate) fn auxiliary_pass(
    problem: &Problem<'_>,
    stage: &StageTable,
    x1: &Image,
    frozen: Option<&[Selection]>,
) -> AuxPass {
    let prior = problem.prior;
    let origins = &problem.origins;
    let blocks: Vec<(Vec<Selection>, Vec<f64>)> = origins
        .par_chunks(BLOCK)
        .enumerate()
        .map(|(bi, chunk)| {
            let pb = chunk.len();
            let mut a = vec![0.0; pb * D];
            let mut y = vec![0.0; pb * D];
            for (n, &(ox, oy)) in chunk.iter().enumerate() {
                x1.patch_into(ox, oy, &mut a[n * D..(n + 1) * D]);
                problem.y.patch_into(ox, oy, &mut y[n * D..(n + 1) * D]);
            }
            let sels = match frozen {
                Some(f) => f[bi * BLOCK..bi * BLOCK + pb].to_vec(),
                None => select_block(stage, prior, &a, &y, &problem.shortlists[bi * BLOCK..bi * BLOCK + pb]),
            };
            let mut z = vec![0.0; pb * D];
            for n in 0..pb {
                let zn = stage.estimate(prior, &a[n * D..(n + 1) * D], &y[n * D..(n + 1) * D], sels[n]);
                z[n * D..(n + 1) * D].copy_from_slice(&zn);
            }
            (sels, z)
        })
        .collect();
    let mut selections = Vec::with_capacity(origins.len());
    let mut z = Vec::with_capacity(origins.len() * D);
    for (s, zz) in blocks {
        selections.extend(s);
        z.extend(zz);
    }
    AuxPass { selections, z }
}

/// MAP pairs for a block of patches; full scans only where the shortlist
/// cannot certify the winner.
fn select_block(stage: &StageTable, prior: &GmmPrior, a: &[f64], y: &[f64], lists: &[PairShortlist]) -> Vec<Selection> {
    let mut out: Vec<Option<Selection>> = lists
        .iter()
        .enumerate()
        .map(|(n, list)| stage.select_shortlisted(prior, &a[n * D..(n + 1) * D], &y[n * D..(n + 1) * D], list))
        .collect();
    let missing: Vec<usize> = (0..out.len()).filter(|&n| out[n].is_none()).collect();
    if !missing.is_empty() {
        let gather = |src: &[f64]| -> Vec<f64> { missing.iter().flat_map(|&n| src[n * D..(n + 1) * D].to_vec()).collect() };
        let full = stage.select(prior, &gather(a), &gather(y), missing.len());
        for (&n, sel) in missing.iter().zip(full) {
            out[n] = Some(sel);
        }
    }
    out.into_iter().map(|s| s.expect("every patch selected")).collect()
}

/// Sum of the `x₁`-independent surrogate terms of a pass.
pub(crate) fn pass_z_terms(problem: &Problem<'_>, stage: &StageTable, pass: &AuxPass) -> f64 {
    let terms: Vec<f64> = problem
        .origins
        .par_iter()
        .enumerate()
        .map(|(n, &(ox, oy))| {
            let y = problem.y.patch(ox, oy);
            stage.z_term(
                problem.prior,
                problem.table,
                &pass.z[n * D..(n + 1) * D],
                &y,
                problem.log_z[n],
                pass.selections[n],
            )
        })
        .collect();
    terms.iter().sum()
}

/// `β/2 Σ ‖Pₚx₁ − zₚ‖²`.
pub(crate) fn coupling_term(origins: &[(usize, usize)], z: &[f64], beta: f64, x1: &Image) -> f64 {
    let mut a = [0.0; D];
    let mut s = 0.0;
    for (n, &(ox, oy)) in origins.iter().enumerate() {
        x1.patch_into(ox, oy, &mut a);
        s += a.iter().zip(&z[n * D..(n + 1) * D]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    0.5 * beta * s
}

/// Single-patch auxiliary update: MAP pair under the β-smoothed posterior of
/// `x1_patch`, then its Wiener estimate.
pub fn auxiliary_update(
    y_patch: &[f64],
    x1_patch: &[f64],
    beta: f64,
    prior: &GmmPrior,
    table: &PairTable,
) -> Result<(Vec<f64>, Selection)> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid("beta must be positive"));
    }
    if y_patch.len() != D || x1_patch.len() != D || prior.dim() != D {
        return Err(Error::invalid("auxiliary_update works on 64-dimensional patches"));
    }
    table.check_prior(prior)?;
    let stage = StageTable::build(prior, table, beta)?;
    let sel = stage.select(prior, x1_patch, y_patch, 1)[0];
    Ok((stage.estimate(prior, x1_patch, y_patch, sel).to_vec(), sel))
}

/// Normal equations of the `x₁` step:
/// `(β Σ PₚᵀPₚ + λ_C Σ PₒᵀQPₒ + λ_F Σ ffᵀ) x = β Σ Pₚᵀzₚ + λ_C Σ PₒᵀQμ + λ_F Σ f·t`.
pub struct NormalEquations<'a> {
    pub width: usize,
    pub height: usize,
    pub beta: f64,
    pub origins: &'a [(usize, usize)],
    /// Patch-major, one 64-vector per origin.
    pub z: &'a [f64],
    pub lambda_c: f64,
    pub quadratics: &'a [QuadraticTerm],
    pub lambda_f: f64,
    pub filters: &'a [FilterTerm],
    pub cg_tol: f64,
    pub cg_max_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgInfo {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

impl NormalEquations<'_> {
    fn scatter_patch(&self, out: &mut [f64], origin: (usize, usize), v: &[f64], scale: f64) {
        let (ox, oy) = origin;
        for r in 0..PATCH_SIDE {
            let dst = (oy + r) * self.width + ox;
            for (o, s) in out[dst..dst + PATCH_SIDE].iter_mut().zip(&v[r * PATCH_SIDE..(r + 1) * PATCH_SIDE]) {
                *o += scale * s;
            }
        }
    }

    fn gather_patch(&self, x: &[f64], origin: (usize, usize), out: &mut [f64]) {
        let (ox, oy) = origin;
        for r in 0..PATCH_SIDE {
            let src = (oy + r) * self.width + ox;
            out[r * PATCH_SIDE..(r + 1) * PATCH_SIDE].copy_from_slice(&x[src..src + PATCH_SIDE]);
        }
    }

    fn apply(&self, coverage: &[f64], v: &[f64], out: &mut [f64]) {
        for ((o, c), x) in out.iter_mut().zip(coverage).zip(v) {
            *o = self.beta * c * x;
        }
        let mut pv = [0.0; D];
        let mut qv = [0.0; D];
        for q in self.quadratics {
            self.gather_patch(v, q.origin, &mut pv);
            linalg::matvec(&q.precision, &pv, &mut qv);
            self.scatter_patch(out, q.origin, &qv, self.lambda_c);
        }
        for f in self.filters {
            let r = f.response(v);
            for &(p, c) in &f.taps {
                out[p] += self.lambda_f * c * r;
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.z.len() != self.origins.len() * D {
            return Err(Error::invalid("one z patch is needed per origin"));
        }
        let fits = |(x, y): (usize, usize)| x + PATCH_SIDE <= self.width && y + PATCH_SIDE <= self.height;
        if !self.origins.iter().all(|&o| fits(o)) || !self.quadratics.iter().all(|q| fits(q.origin)) {
            return Err(Error::invalid("patch leaves the image"));
        }
        if self.filters.iter().any(|f| f.taps.iter().any(|&(p, _)| p >= n)) {
            return Err(Error::invalid("filter tap leaves the image"));
        }
        if !(self.beta > 0.0) || !(self.lambda_c > 0.0) || !(self.lambda_f > 0.0) {
            return Err(Error::invalid("beta, lambda_c and lambda_f must be positive"));
        }
        Ok(())
    }

    /// Jacobi-preconditioned conjugate gradients from `x0`. Pixels the system
    /// does not touch keep their `x0` value.
    pub fn solve(&self, x0: &Image) -> Result<(Image, CgInfo)> {
        self.validate()?;
        if x0.width() != self.width || x0.height() != self.height {
            return Err(Error::invalid("initial image has the wrong size"));
        }
        let n = self.width * self.height;
        // Coverage on the actual origin list, which need not be a full grid.
        let coverage = {
            let mut c = vec![0.0; n];
            let ones = [1.0; D];
            for &o in self.origins {
                self.scatter_patch(&mut c, o, &ones, 1.0);
            }
            c
        };
        let mut diag: Vec<f64> = coverage.iter().map(|c| self.beta * c).collect();
        for q in self.quadratics {
            let d: Vec<f64> = (0..D).map(|r| q.precision[r * D + r]).collect();
            self.scatter_patch(&mut diag, q.origin, &d, self.lambda_c);
        }
        for f in self.filters {
            for &(p, c) in &f.taps {
                diag[p] += self.lambda_f * c * c;
            }
        }
        let mut b = vec![0.0; n];
        for (k, &o) in self.origins.iter().enumerate() {
            self.scatter_patch(&mut b, o, &self.z[k * D..(k + 1) * D], self.beta);
        }
        let mut qm = [0.0; D];
        for q in self.quadratics {
            linalg::matvec(&q.precision, &q.mean, &mut qm);
            self.scatter_patch(&mut b, q.origin, &qm, self.lambda_c);
        }
        for f in self.filters {
            for &(p, c) in &f.taps {
                b[p] += self.lambda_f * c * f.target;
            }
        }
        let active: Vec<bool> = diag.iter().map(|d| *d > 0.0).collect();
        let mut x = x0.pixels().to_vec();
        let mut ax = vec![0.0; n];
        self.apply(&coverage, &x, &mut ax);
        let mut r: Vec<f64> = (0..n).map(|p| if active[p] { b[p] - ax[p] } else { 0.0 }).collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let bnorm = {
            let masked: Vec<f64> = (0..n).map(|p| if active[p] { b[p] } else { 0.0 }).collect();
            norm(&masked).max(f64::MIN_POSITIVE)
        };
        let precond = |r: &[f64]| -> Vec<f64> {
            r.iter().zip(&diag).zip(&active).map(|((v, d), a)| if *a { v / d } else { 0.0 }).collect()
        };
        let mut zv = precond(&r);
        let mut p = zv.clone();
        let mut rz: f64 = r.iter().zip(&zv).map(|(a, b)| a * b).sum();
        let mut ap = vec![0.0; n];
        let mut rel = norm(&r) / bnorm;
        let mut iters = 0;
        while rel > self.cg_tol && iters < self.cg_max_iters {
            self.apply(&coverage, &p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if !(pap > 0.0) {
                break;
            }
            let alpha = rz / pap;
            for k in 0..n {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            iters += 1;
            rel = norm(&r) / bnorm;
            zv = precond(&r);
            let rz_new: f64 = r.iter().zip(&zv).map(|(a, b)| a * b).sum();
            let gamma = rz_new / rz;
            rz = rz_new;
            for k in 0..n {
                p[k] = zv[k] + gamma * p[k];
            }
        }
        let info = CgInfo { iterations: iters, relative_residual: rel, converged: rel <= self.cg_tol };
        Ok((Image::new(self.width, self.height, x)?, info))
    }
}

/// Solve the `x₁` step for an explicit list of stride-grid `z` patches.
pub fn solve_x1(eq: &NormalEquations<'_>, x0: &Image) -> Result<(Image, CgInfo)> {
    eq.solve(x0)
}
