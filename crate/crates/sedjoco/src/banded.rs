//! Symmetric positive-definite banded Cholesky in packed lower storage.
//!
//! Block-Toeplitz covariance matrices become banded once rows are ordered
//! time-interleaved (`row = t*M + m`), with half bandwidth `M(L-1) + M-1`.
//! Factorization costs `O(n bw^2)` and each triangular solve `O(n bw)`, which
//! is what makes exact finite-sample precision work feasible for `MT` in the
//! tens of thousands.

use crate::error::{Error, Result};

/// Lower Cholesky factor of a banded SPD matrix. `data[j*(bw+1) + d]` holds
/// `L[j+d, j]` for `d = 0..=bw` (entries past the matrix edge unused).
pub struct BandedChol {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedChol {
    /// Factors the SPD matrix whose lower-band entries are produced by
    /// `entry(row, col)` for `col <= row <= col + bw`.
    pub fn factor<F>(n: usize, bw: usize, entry: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> f64,
    {
        let w = bw + 1;
        let mut a = vec![0.0; n * w];
        for j in 0..n {
            for d in 0..w.min(n - j) {
                a[j * w + d] = entry(j + d, j);
            }
        }
        // right-looking banded Cholesky
        for j in 0..n {
            let pivot = a[j * w];
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(Error::SingularCovariance);
            }
            let ljj = pivot.sqrt();
            a[j * w] = ljj;
            let reach = w.min(n - j);
            for d in 1..reach {
                a[j * w + d] /= ljj;
            }
            for c in 1..reach {
                let ljc = a[j * w + c]; // L[j+c, j]
                if ljc == 0.0 {
                    continue;
                }
                // A[j+c+e, j+c] -= L[j+c, j] * L[j+c+e, j]
                let base = (j + c) * w;
                for e in 0..reach - c {
                    a[base + e] -= ljc * a[j * w + c + e];
                }
            }
        }
        Ok(Self { n, bw, data: a })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` in place (forward then backward sweep).
    pub fn solve_in_place(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        let w = self.bw + 1;
        // L y = b
        for j in 0..self.n {
            let yj = x[j] / self.data[j * w];
            x[j] = yj;
            if yj != 0.0 {
                let reach = w.min(self.n - j);
                for d in 1..reach {
                    x[j + d] -= self.data[j * w + d] * yj;
                }
            }
        }
        // L' x = y
        for j in (0..self.n).rev() {
            let mut s = x[j];
            let reach = w.min(self.n - j);
            for d in 1..reach {
                s -= self.data[j * w + d] * x[j + d];
            }
            x[j] = s / self.data[j * w];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}
