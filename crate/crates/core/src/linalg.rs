//! Small dense linear algebra for the 64-dimensional patch space.
//!
//! Matrices are row-major `Vec<f64>`. Cholesky factors are stored in packed
//! lower-triangular form (row `r` holds `r + 1` entries), which halves the
//! footprint of the per-pair factor tables.

use crate::error::{Error, Result};

/// Offset of entry `(r, c)`, `c <= r`, in packed lower-triangular storage.
#[inline]
pub fn packed_index(r: usize, c: usize) -> usize {
    debug_assert!(c <= r);
    r * (r + 1) / 2 + c
}

#[inline]
pub fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    n: usize,
    packed: Vec<f64>,
}

impl Cholesky {
    /// Factor the symmetric matrix `a` (row-major, `n × n`). Only the lower
    /// triangle is read.
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        assert_eq!(a.len(), n * n, "matrix shape mismatch");
        let mut packed = vec![0.0; packed_len(n)];
        for r in 0..n {
            let row_off = packed_index(r, 0);
            for c in 0..=r {
                let col_off = packed_index(c, 0);
                let mut s = a[r * n + c];
                for k in 0..c {
                    s -= packed[row_off + k] * packed[col_off + k];
                }
                if r == c {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite(format!(
                            "pivot {r} is {s:e}"
                        )));
                    }
                    packed[row_off + r] = s.sqrt();
                } else {
                    packed[row_off + c] = s / packed[col_off + c];
                }
            }
        }
        Ok(Cholesky { n, packed })
    }

    /// Factor `a`; on failure retry once with `jitter` added to the diagonal.
    pub fn factor_with_jitter(a: &[f64], n: usize, jitter: f64) -> Result<Self> {
        match Self::factor(a, n) {
            Ok(f) => Ok(f),
            Err(_) => {
                let mut b = a.to_vec();
                for d in 0..n {
                    b[d * n + d] += jitter;
                }
                Self::factor(&b, n)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn packed(&self) -> &[f64] {
        &self.packed
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        if c > r {
            0.0
        } else {
            self.packed[packed_index(r, c)]
        }
    }

    /// `log det A = 2 Σ log L_rr`.
    pub fn log_det(&self) -> f64 {
        (0..self.n)
            .map(|r| self.packed[packed_index(r, r)].ln())
            .sum::<f64>()
            * 2.0
    }

    /// `v ← L⁻¹ v`.
    pub fn solve_lower_in_place(&self, v: &mut [f64]) {
        debug_assert_eq!(v.len(), self.n);
        for r in 0..self.n {
            let off = packed_index(r, 0);
            let row = &self.packed[off..off + r];
            let s: f64 = row.iter().zip(&v[..r]).map(|(l, x)| l * x).sum();
            v[r] = (v[r] - s) / self.packed[off + r];
        }
    }

    /// `v ← L⁻ᵀ v`.
    pub fn solve_upper_in_place(&self, v: &mut [f64]) {
        debug_assert_eq!(v.len(), self.n);
        for r in (0..self.n).rev() {
            let off = packed_index(r, 0);
            v[r] /= self.packed[off + r];
            let vr = v[r];
            for c in 0..r {
                v[c] -= self.packed[off + c] * vr;
            }
        }
    }

    /// `v ← A⁻¹ v`.
    pub fn solve_in_place(&self, v: &mut [f64]) {
        self.solve_lower_in_place(v);
        self.solve_upper_in_place(v);
    }

    /// `vᵀ A⁻¹ v = ‖L⁻¹ v‖²`, using `scratch` (length `n`) as workspace.
    pub fn mahalanobis_sq_with(&self, v: &[f64], scratch: &mut [f64]) -> f64 {
        scratch.copy_from_slice(v);
        self.solve_lower_in_place(scratch);
        scratch.iter().map(|x| x * x).sum()
    }

    pub fn mahalanobis_sq(&self, v: &[f64]) -> f64 {
        let mut scratch = vec![0.0; self.n];
        self.mahalanobis_sq_with(v, &mut scratch)
    }

    /// `out = L v`.
    pub fn lower_mul(&self, v: &[f64], out: &mut [f64]) {
        for r in 0..self.n {
            let off = packed_index(r, 0);
            out[r] = self.packed[off..=off + r]
                .iter()
                .zip(&v[..=r])
                .map(|(l, x)| l * x)
                .sum();
        }
    }

    /// Solve `L X = B` in place for a row-major `n × ncols` block `B`.
    ///
    /// Each right-hand side is a column, so the inner loop is a contiguous
    /// axpy across columns.
    pub fn solve_lower_block(&self, block: &mut [f64], ncols: usize) {
        debug_assert_eq!(block.len(), self.n * ncols);
        for r in 0..self.n {
            let off = packed_index(r, 0);
            let (done, rest) = block.split_at_mut(r * ncols);
            let row = &mut rest[..ncols];
            for c in 0..r {
                let l = self.packed[off + c];
                let src = &done[c * ncols..(c + 1) * ncols];
                for (x, s) in row.iter_mut().zip(src) {
                    *x -= l * s;
                }
            }
            let inv = 1.0 / self.packed[off + r];
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
    }

    /// Dense inverse `A⁻¹` (row-major, exactly symmetric).
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for c in 0..n {
            col.iter_mut().for_each(|x| *x = 0.0);
            col[c] = 1.0;
            self.solve_in_place(&mut col);
            for r in 0..n {
                inv[r * n + c] = col[r];
            }
        }
        symmetrize(&mut inv, n);
        inv
    }

    /// Dense `L` as a full row-major matrix.
    pub fn to_dense_lower(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..=r {
                out[r * n + c] = self.get(r, c);
            }
        }
        out
    }
}

/// Replace `a` by `(a + aᵀ) / 2`.
pub fn symmetrize(a: &mut [f64], n: usize) {
    for r in 0..n {
        for c in 0..r {
            let m = 0.5 * (a[r * n + c] + a[c * n + r]);
            a[r * n + c] = m;
            a[c * n + r] = m;
        }
    }
}

pub fn max_asymmetry(a: &[f64], n: usize) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..n {
        for c in 0..r {
            worst = worst.max((a[r * n + c] - a[c * n + r]).abs());
        }
    }
    worst
}

/// `out = A v` for a row-major `rows × v.len()` matrix.
pub fn matvec(a: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = a[r * cols..(r + 1) * cols]
            .iter()
            .zip(v)
            .map(|(x, y)| x * y)
            .sum();
    }
}

/// `out += A v`.
pub fn matvec_add(a: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o += a[r * cols..(r + 1) * cols]
            .iter()
            .zip(v)
            .map(|(x, y)| x * y)
            .sum::<f64>();
    }
}

/// `C = alpha · A B + beta · C` for row-major `A: m × k`, `B: k × n`, `C: m × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds checked above; all three slices are row-major and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C = alpha · A Aᵀ + beta · C` for row-major `A: m × k`.
pub fn gram(m: usize, k: usize, alpha: f64, a: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && c.len() >= m * m);
    // SAFETY: as in `gemm`; the second operand is `a` viewed transposed
    // through its strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            m,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            a.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for d in 0..n {
        out[d * n + d] = 1.0;
    }
    out
}

/// Numerically stable `log Σ exp(xᵢ)`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
