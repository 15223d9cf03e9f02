//! Second-order model of a source component vector (SCV): FIR mixing banks,
//! the induced block-Toeplitz covariance, and its exact finite-sample
//! precision (blockwise inverse).
//!
//! Source `k` is modeled across the `M` datasets as FIR mixtures of `M`
//! shared white driving noises,
//! `s_k^(m)[t] = sum_l sum_u h_k^(m,l)[u] w_k^(l)[t-u]`,
//! which makes the `MT x MT` covariance of the stacked SCV a grid of `T x T`
//! Toeplitz blocks generated by the stationary cross-correlations
//! `r_k^(m1,m2)[tau] = sum_l sum_u h_k^(m1,l)[u] h_k^(m2,l)[u - tau]`,
//! supported on `|tau| <= L-1`. Filter energies are normalized to 1 on the
//! direct channel (`m == l`) and to `eta` on cross channels, so every source
//! has power `1 + (M-1) eta`.

use nalgebra::DMatrix;

use crate::banded::BandedChol;
use crate::error::{Error, Result};

/// FIR filters `h_k^(m,l)` for all sources of one problem: source `k`'s
/// dataset-`m` component is driven through filter `(k, m, l)` by the shared
/// noise `w_k^(l)`.
#[derive(Clone, Debug)]
pub struct FirBank {
    k: usize,
    m: usize,
    l: usize,
    eta: f64,
    taps: Vec<f64>, // [((k-1)*M + (m-1))*M + (l-1)] * L + u
}

impl FirBank {
    /// Validates filter shapes and the energy normalization (1 on direct
    /// channels, `eta` on cross channels, both to 1e-8).
    pub fn new(k: usize, m: usize, l: usize, eta: f64, taps: Vec<f64>) -> Result<Self> {
        if taps.len() != k * m * m * l {
            return Err(Error::Dimension(format!(
                "expected {} taps, got {}",
                k * m * m * l,
                taps.len()
            )));
        }
        let bank = Self { k, m, l, eta, taps };
        for kk in 1..=k {
            for mm in 1..=m {
                for ll in 1..=m {
                    let e: f64 = bank.filter(kk, mm, ll).iter().map(|h| h * h).sum();
                    let want = if mm == ll { 1.0 } else { eta };
                    if (e - want).abs() > 1e-8 {
                        return Err(Error::UnnormalizedBank(format!(
                            "filter (k={kk}, m={mm}, l={ll}) has energy {e}, expected {want}"
                        )));
                    }
                }
            }
        }
        Ok(bank)
    }

    /// Builds a bank from raw taps by scaling each filter to its target
    /// energy. Fails on an exactly zero filter.
    pub fn normalized(k: usize, m: usize, l: usize, eta: f64, mut taps: Vec<f64>) -> Result<Self> {
        if taps.len() != k * m * m * l {
            return Err(Error::Dimension(format!(
                "expected {} taps, got {}",
                k * m * m * l,
                taps.len()
            )));
        }
        for f in 0..k * m * m {
            let s = &mut taps[f * l..(f + 1) * l];
            let e: f64 = s.iter().map(|h| h * h).sum();
            if e == 0.0 {
                return Err(Error::UnnormalizedBank("zero filter cannot be normalized".into()));
            }
            let ll = f % m; // cross channel when l != m
            let mm = (f / m) % m;
            let want = if mm == ll { 1.0 } else { eta };
            let c = (want / e).sqrt();
            for h in s.iter_mut() {
                *h *= c;
            }
        }
        Self::new(k, m, l, eta, taps)
    }

    pub fn n_sources(&self) -> usize {
        self.k
    }

    pub fn n_datasets(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.l
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Taps of filter `h_k^(m,l)` (all indices 1-based).
    pub fn filter(&self, k: usize, m: usize, l: usize) -> &[f64] {
        let f = ((k - 1) * self.m + (m - 1)) * self.m + (l - 1);
        &self.taps[f * self.l..(f + 1) * self.l]
    }

    /// Exact stationary covariance of source `k` (1-based).
    pub fn covariance(&self, k: usize, t: usize) -> ScvCovariance {
        scv_covariance_from_firs(self, k, t)
    }
}

/// Cross-correlation of two FIR filters over lags `-(L-1)..=(L-1)`:
/// `r[tau] = sum_u h1[u] h2[u - tau]`.
pub fn fir_cross_correlation(h1: &[f64], h2: &[f64]) -> Vec<f64> {
    let l = h1.len().max(h2.len());
    let mut r = vec![0.0; 2 * l - 1];
    for (u1, a) in h1.iter().enumerate() {
        for (u2, b) in h2.iter().enumerate() {
            // tau = u1 - u2
            r[(u1 + l - 1) - u2] += a * b;
        }
    }
    r
}

/// Exact covariance of one SCV: `M x M` grid of `T x T` Toeplitz blocks,
/// stored through their stationary generators.
#[derive(Clone, Debug)]
pub struct ScvCovariance {
    m: usize,
    t: usize,
    l: usize,                 // lag support: |tau| <= l-1
    lags: Vec<f64>,           // [(m1-1)*M + (m2-1)] * (2l-1) + (tau + l-1)
}

impl ScvCovariance {
    pub fn from_lags(m: usize, t: usize, l: usize, lags: Vec<f64>) -> Result<Self> {
        if lags.len() != m * m * (2 * l - 1) {
            return Err(Error::Dimension("lag table has wrong length".into()));
        }
        Ok(Self { m, t, l, lags })
    }

    pub fn n_datasets(&self) -> usize {
        self.m
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn lag_support(&self) -> usize {
        self.l
    }

    /// Generator value `r^(m1,m2)[tau]`; zero outside the support.
    pub fn lag(&self, m1: usize, m2: usize, tau: isize) -> f64 {
        if tau.unsigned_abs() >= self.l {
            return 0.0;
        }
        let idx = ((m1 - 1) * self.m + (m2 - 1)) * (2 * self.l - 1);
        self.lags[idx + (tau + self.l as isize - 1) as usize]
    }

    /// Full lag vector of block `(m1, m2)`, index `tau + L - 1`.
    pub fn lag_row(&self, m1: usize, m2: usize) -> &[f64] {
        let idx = ((m1 - 1) * self.m + (m2 - 1)) * (2 * self.l - 1);
        &self.lags[idx..idx + 2 * self.l - 1]
    }

    /// Source power in dataset `m`.
    pub fn power(&self, m: usize) -> f64 {
        self.lag(m, m, 0)
    }

    /// Dense Toeplitz block `C^(m1,m2)[t1, t2] = r^(m1,m2)[t1 - t2]`.
    pub fn block_dense(&self, m1: usize, m2: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.t, self.t, |r, c| self.lag(m1, m2, r as isize - c as isize))
    }

    /// Assembles the full `MT x MT` matrix in dataset-major order (oracle use
    /// at small sizes only).
    pub fn assemble_full(&self) -> DMatrix<f64> {
        let n = self.m * self.t;
        DMatrix::from_fn(n, n, |r, c| {
            let (m1, t1) = (r / self.t + 1, r % self.t);
            let (m2, t2) = (c / self.t + 1, c % self.t);
            self.lag(m1, m2, t1 as isize - t2 as isize)
        })
    }

    /// Covariance of the per-dataset rescaled source `g^(m) s^(m)[t]`:
    /// every generator picks up the factor `g[m1] g[m2]`.
    pub fn scaled(&self, g: &[f64]) -> ScvCovariance {
        let mut out = self.clone();
        for m1 in 1..=self.m {
            for m2 in 1..=self.m {
                let idx = ((m1 - 1) * self.m + (m2 - 1)) * (2 * self.l - 1);
                let f = g[m1 - 1] * g[m2 - 1];
                for v in out.lags[idx..idx + 2 * self.l - 1].iter_mut() {
                    *v *= f;
                }
            }
        }
        out
    }

    /// Banded Cholesky of the full covariance in time-interleaved ordering
    /// (`row = t*M + m-1`), half bandwidth `M(L-1) + M-1`.
    pub fn banded_cholesky(&self) -> Result<BandedChol> {
        let n = self.m * self.t;
        let bw = self.m * (self.l - 1) + self.m - 1;
        BandedChol::factor(n, bw.min(n - 1), |row, col| {
            let (t1, m1) = (row / self.m, row % self.m + 1);
            let (t2, m2) = (col / self.m, col % self.m + 1);
            self.lag(m1, m2, t1 as isize - t2 as isize)
        })
    }
}

/// Covariance of source `k` induced by a bank: cross-correlations of its
/// filters summed over the shared driving noises.
pub fn scv_covariance_from_firs(bank: &FirBank, k: usize, t: usize) -> ScvCovariance {
    let (m, l) = (bank.n_datasets(), bank.len());
    let mut lags = vec![0.0; m * m * (2 * l - 1)];
    for m1 in 1..=m {
        for m2 in 1..=m {
            let dst = ((m1 - 1) * m + (m2 - 1)) * (2 * l - 1);
            for ll in 1..=m {
                let r = fir_cross_correlation(bank.filter(k, m1, ll), bank.filter(k, m2, ll));
                for (i, v) in r.iter().enumerate() {
                    lags[dst + i] += v;
                }
            }
        }
    }
    ScvCovariance { m, t, l, lags }
}

/// Exact second-order statistics of a Bernoulli-switched mixture of two
/// independent zero-mean processes: the switch variables are i.i.d. across
/// sources, datasets and time, so the `p`-linear rule applies only where the
/// two switch draws coincide (same dataset, same time); everywhere else the
/// weight is `p^2` / `(1-p)^2`. The result stays exactly stationary: the
/// equal-time correction folds into lag 0 of the diagonal generators.
pub fn mixture_covariance(ca: &ScvCovariance, cb: &ScvCovariance, p: f64) -> Result<ScvCovariance> {
    if ca.m != cb.m || ca.t != cb.t {
        return Err(Error::Dimension("mixture components must share dimensions".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("mixture probability {p} outside [0, 1]")));
    }
    let m = ca.m;
    let l = ca.l.max(cb.l);
    let mut lags = vec![0.0; m * m * (2 * l - 1)];
    for m1 in 1..=m {
        for m2 in 1..=m {
            let dst = ((m1 - 1) * m + (m2 - 1)) * (2 * l - 1);
            for (i, v) in lags[dst..dst + 2 * l - 1].iter_mut().enumerate() {
                let tau = i as isize - (l as isize - 1);
                *v = p * p * ca.lag(m1, m2, tau) + (1.0 - p) * (1.0 - p) * cb.lag(m1, m2, tau);
                if m1 == m2 && tau == 0 {
                    *v += p * (1.0 - p) * (ca.lag(m1, m1, 0) + cb.lag(m1, m1, 0));
                }
            }
        }
    }
    Ok(ScvCovariance { m, t: ca.t, l, lags })
}

/// Dense blocks of the exact precision `P = C^{-1}` of one SCV; only the
/// blocks with `m1 <= m2` are stored (the rest are transposes by symmetry).
pub struct ScvPrecision {
    m: usize,
    t: usize,
    blocks: Vec<DMatrix<f64>>, // pair order (1,1), (1,2), ..., (1,M), (2,2), ...
}

fn pair_index(m: usize, m1: usize, m2: usize) -> usize {
    // m1 <= m2, 1-based
    (m1 - 1) * m - (m1 - 1) * m1 / 2 + (m2 - m1) + (m1 - 1)
}

/// Borrowed precision block with an implicit-transpose flag.
#[derive(Clone, Copy)]
pub struct PBlock<'a> {
    mat: &'a DMatrix<f64>,
    transposed: bool,
}

impl<'a> PBlock<'a> {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        if self.transposed {
            self.mat[(c, r)]
        } else {
            self.mat[(r, c)]
        }
    }

    pub fn n(&self) -> usize {
        self.mat.nrows()
    }

    /// Materializes the block (tests and small-scale paths).
    pub fn to_dense(&self) -> DMatrix<f64> {
        if self.transposed {
            self.mat.transpose()
        } else {
            self.mat.clone()
        }
    }

    /// `P X` for a `T x c` right factor.
    pub fn mul_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        if self.transposed {
            self.mat.tr_mul(x)
        } else {
            self.mat * x
        }
    }
}

impl ScvPrecision {
    pub fn n_datasets(&self) -> usize {
        self.m
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Block `P^(m1,m2)` for any ordered pair.
    pub fn block(&self, m1: usize, m2: usize) -> PBlock<'_> {
        if m1 <= m2 {
            PBlock { mat: &self.blocks[pair_index(self.m, m1, m2)], transposed: false }
        } else {
            PBlock { mat: &self.blocks[pair_index(self.m, m2, m1)], transposed: true }
        }
    }

    /// Assembles the full `MT x MT` precision (oracle use at small sizes).
    pub fn assemble_full(&self) -> DMatrix<f64> {
        let n = self.m * self.t;
        let mut out = DMatrix::zeros(n, n);
        for m1 in 1..=self.m {
            for m2 in 1..=self.m {
                let b = self.block(m1, m2);
                for r in 0..self.t {
                    for c in 0..self.t {
                        out[((m1 - 1) * self.t + r, (m2 - 1) * self.t + c)] = b.get(r, c);
                    }
                }
            }
        }
        out
    }
}

/// Exact blockwise inverse of a block-Toeplitz SCV covariance, via the
/// time-interleaved banded Cholesky and one unit-vector solve per column.
pub fn scv_precision(cov: &ScvCovariance) -> Result<ScvPrecision> {
    let (m, t) = (cov.m, cov.t);
    let chol = cov.banded_cholesky()?;
    let n = m * t;
    let mut blocks: Vec<DMatrix<f64>> = Vec::with_capacity(m * (m + 1) / 2);
    for m1 in 1..=m {
        for _m2 in m1..=m {
            blocks.push(DMatrix::zeros(t, t));
        }
    }
    let mut col = vec![0.0; n];
    for m2 in 1..=m {
        for t2 in 0..t {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[t2 * m + (m2 - 1)] = 1.0;
            chol.solve_in_place(&mut col);
            // column t2 of every block P^(m1, m2) with m1 <= m2
            for m1 in 1..=m2 {
                let b = &mut blocks[pair_index(m, m1, m2)];
                for t1 in 0..t {
                    b[(t1, t2)] = col[t1 * m + (m1 - 1)];
                }
            }
        }
    }
    Ok(ScvPrecision { m, t, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn test_bank(k: usize, m: usize, l: usize, eta: f64, seed: u64) -> FirBank {
        // deterministic pseudo-random taps, normalized per filter
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let taps: Vec<f64> = (0..k * m * m * l).map(|_| next()).collect();
        FirBank::normalized(k, m, l, eta, taps).unwrap()
    }

    #[test]
    fn cross_correlation_of_simple_filter() {
        let h = [1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()];
        let r = fir_cross_correlation(&h, &h);
        assert_abs_diff_eq!(r[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[2], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn cross_correlation_matches_brute_force() {
        let bank = test_bank(1, 2, 5, 0.7, 42);
        let h1 = bank.filter(1, 1, 2);
        let h2 = bank.filter(1, 2, 1);
        let r = fir_cross_correlation(h1, h2);
        for tau in -4isize..=4 {
            let mut want = 0.0;
            for u in 0..5isize {
                let v = u - tau;
                if (0..5).contains(&v) {
                    want += h1[u as usize] * h2[v as usize];
                }
            }
            assert_abs_diff_eq!(r[(tau + 4) as usize], want, epsilon = 1e-14);
        }
    }

    #[test]
    fn source_power_is_one_plus_eta_sum() {
        for eta in [0.0, 0.3, 1.0] {
            let bank = test_bank(2, 3, 4, eta, 7);
            let cov = bank.covariance(1, 32);
            for m in 1..=3 {
                assert_abs_diff_eq!(cov.power(m), 1.0 + 2.0 * eta, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn lag_support_is_bounded_by_filter_length() {
        let bank = test_bank(1, 2, 4, 0.5, 3);
        let cov = bank.covariance(1, 16);
        for m1 in 1..=2 {
            for m2 in 1..=2 {
                assert_eq!(cov.lag(m1, m2, 4), 0.0);
                assert_eq!(cov.lag(m1, m2, -17), 0.0);
            }
        }
    }

    #[test]
    fn generator_symmetry() {
        let bank = test_bank(1, 3, 4, 0.4, 11);
        let cov = bank.covariance(1, 16);
        for m1 in 1..=3 {
            for m2 in 1..=3 {
                for tau in -3isize..=3 {
                    assert_abs_diff_eq!(
                        cov.lag(m1, m2, tau),
                        cov.lag(m2, m1, -tau),
                        epsilon = 1e-14
                    );
                }
            }
        }
    }

    #[test]
    fn covariance_is_positive_definite_across_eta() {
        for (i, eta) in [0.0, 0.25, 0.5, 0.75, 1.0].iter().enumerate() {
            let bank = test_bank(1, 2, 6, *eta, 100 + i as u64);
            let cov = bank.covariance(1, 24);
            assert!(cov.banded_cholesky().is_ok(), "eta = {eta}");
        }
    }

    #[test]
    fn precision_matches_dense_inverse() {
        let bank = test_bank(1, 2, 3, 0.6, 5);
        let cov = bank.covariance(1, 12);
        let prec = scv_precision(&cov).unwrap();
        let dense = cov.assemble_full();
        let inv = dense.clone().cholesky().unwrap().inverse();
        let full = prec.assemble_full();
        let diff = (&full - &inv).abs().max();
        assert!(diff < 1e-10, "max deviation {diff}");
        let resid = (&dense * &full - DMatrix::<f64>::identity(24, 24)).abs().max();
        assert!(resid < 1e-8, "residual {resid}");
    }

    #[test]
    fn mixture_interpolates_between_components() {
        let ba = test_bank(1, 2, 4, 0.5, 21);
        let bb = test_bank(1, 2, 4, 0.5, 22);
        let ca = ba.covariance(1, 8);
        let cb = bb.covariance(1, 8);
        let m0 = mixture_covariance(&ca, &cb, 0.0).unwrap();
        let m1 = mixture_covariance(&ca, &cb, 1.0).unwrap();
        for m in 1..=2 {
            for tau in -3isize..=3 {
                assert_abs_diff_eq!(m0.lag(m, m, tau), cb.lag(m, m, tau), epsilon = 1e-14);
                assert_abs_diff_eq!(m1.lag(m, m, tau), ca.lag(m, m, tau), epsilon = 1e-14);
            }
        }
        // power is p-linear even though off-diagonal lags are not
        let mh = mixture_covariance(&ca, &cb, 0.3).unwrap();
        assert_abs_diff_eq!(
            mh.power(1),
            0.3 * ca.power(1) + 0.7 * cb.power(1),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            mh.lag(1, 2, 0),
            0.09 * ca.lag(1, 2, 0) + 0.49 * cb.lag(1, 2, 0),
            epsilon = 1e-12
        );
    }
}
