//! Eigendecomposition of the scaled Laplacian in `L^2(nu)` and the spectral
//! functional calculus built on it: heat semigroup, projections, truncated
//! Taylor lifts and kernel filters.
//!
//! The operator `h^-2 (I - D^-1 A)` is not symmetric, but conjugating by
//! `diag(nu)^{1/2}` produces the symmetric matrix `h^-2 (I - M)` with
//! `M_ij = A_ij / sqrt(mu_i mu_j)`; the eigenproblem is solved there (dense
//! for small graphs, restarted Lanczos otherwise) and eigenvectors are mapped
//! back through division by `sqrt(nu)`, which makes them orthonormal in the
//! `nu`-weighted inner product. The similarity transform is exact; the two
//! problems share eigenvalues.

mod lanczos;

use nalgebra::{DMatrix, DVector};

use crate::graph::LaplacianOperator;
use crate::{Error, Result};

/// Graphs at or below this size (or requests for most of the spectrum) go
/// through the dense symmetric solver.
const DENSE_CUTOFF: usize = 512;

/// Residual target enforced after the solve, relative to `max(1, lambda)`.
const RESIDUAL_TOL: f64 = 1e-6;

/// The leading eigenpairs of the scaled Laplacian, orthonormal in `L^2(nu)`.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    /// Ascending eigenvalues `0 = lambda_1 <= ... <= lambda_{j_max} <= 2 h^-2`.
    pub eigenvalues: Vec<f64>,
    /// N x j_max matrix; column j is the eigenvector `u_{j+1}`.
    pub eigenvectors: DMatrix<f64>,
    /// Copy of the graph's normalized degree measure.
    pub nu: Vec<f64>,
    /// Connectivity parameter of the underlying graph.
    pub h: f64,
}

impl SpectralBasis {
    pub fn n(&self) -> usize {
        self.eigenvectors.nrows()
    }

    /// Number of computed eigenpairs.
    pub fn j_max(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Whether the basis spans the whole vertex space.
    pub fn is_complete(&self) -> bool {
        self.j_max() == self.n()
    }

    /// `nu`-inner product against every basis vector: `c_j = <u_j | f>_nu`.
    pub fn coefficients(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.n() {
            return Err(Error::LengthMismatch {
                expected: self.n(),
                got: f.len(),
            });
        }
        let weighted = DVector::from_iterator(
            self.n(),
            f.iter().zip(&self.nu).map(|(v, w)| v * w),
        );
        let c = self.eigenvectors.transpose() * weighted;
        Ok(c.iter().copied().collect())
    }

    /// Linear combination `sum_j coeffs[j] u_{j+1}`.
    pub fn synthesize(&self, coeffs: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        for (j, &c) in coeffs.iter().enumerate() {
            if c != 0.0 {
                out.axpy(c, &self.eigenvectors.column(j).clone_owned(), 1.0);
            }
        }
        out
    }

    /// Apply a spectral multiplier `f -> sum_j m(lambda_j) <u_j|f> u_j`.
    pub fn apply_multiplier<M: Fn(f64) -> f64>(&self, m: M, f: &[f64]) -> Result<DVector<f64>> {
        let mut coeffs = self.coefficients(f)?;
        for (c, lam) in coeffs.iter_mut().zip(&self.eigenvalues) {
            *c *= m(*lam);
        }
        Ok(self.synthesize(&coeffs))
    }

    /// On-diagonal heat kernel `p_t(x, x) = sum_j exp(-t lambda_j) u_j(x)^2`.
    pub fn heat_diag(&self, t: f64) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        for j in 0..self.j_max() {
            let w = (-t * self.eigenvalues[j]).exp();
            if w == 0.0 {
                continue;
            }
            let col = self.eigenvectors.column(j);
            for x in 0..n {
                out[x] += w * col[x] * col[x];
            }
        }
        out
    }

    /// Heat-kernel entry `p_t(x, y)`; symmetric in (x, y).
    pub fn heat_entry(&self, t: f64, x: usize, y: usize) -> f64 {
        (0..self.j_max())
            .map(|j| {
                (-t * self.eigenvalues[j]).exp()
                    * self.eigenvectors[(x, j)]
                    * self.eigenvectors[(y, j)]
            })
            .sum()
    }
}

fn dense_smallest(op: &LaplacianOperator, j_max: usize) -> (Vec<f64>, Vec<DVector<f64>>) {
    let s = op.sym_dense();
    let eig = s.symmetric_eigen();
    let n = op.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let vals = order[..j_max].iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = order[..j_max]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).clone_owned())
        .collect();
    (vals, vecs)
}

/// Compute the smallest `j_max` eigenpairs of the scaled Laplacian,
/// orthonormal in `L^2(nu)`.
pub fn decompose(op: &LaplacianOperator, j_max: usize) -> Result<SpectralBasis> {
    let n = op.n();
    if j_max < 1 || j_max > n {
        return Err(Error::JOutOfRange { j: j_max, j_max: n });
    }

    let (values, sym_vectors) = if n <= DENSE_CUTOFF || j_max * 3 > n {
        dense_smallest(op, j_max)
    } else {
        let apply = |v: &[f64], out: &mut [f64]| op.apply_sym_into(v, out);
        let out = lanczos::smallest_eigenpairs(&apply, n, j_max, 1e-9, 0x4c61_6e63)?;
        (out.values, out.vectors)
    };

    // Map back from the symmetrized problem and fix a sign convention so the
    // decomposition is a deterministic function of the graph.
    let nu = op.graph.nu.clone();
    let inv_sqrt_nu: Vec<f64> = nu.iter().map(|w| 1.0 / w.sqrt()).collect();
    let mut eigenvectors = DMatrix::zeros(n, j_max);
    for (j, v) in sym_vectors.iter().enumerate() {
        let mut max_abs = 0.0f64;
        let mut sign = 1.0f64;
        for x in 0..n {
            let u = v[x] * inv_sqrt_nu[x];
            eigenvectors[(x, j)] = u;
            if u.abs() > max_abs {
                max_abs = u.abs();
                sign = if u >= 0.0 { 1.0 } else { -1.0 };
            }
        }
        if sign < 0.0 {
            for x in 0..n {
                eigenvectors[(x, j)] = -eigenvectors[(x, j)];
            }
        }
    }

    let values: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();

    // Residual audit in the nu-norm, which coincides with the Euclidean
    // residual of the symmetrized problem.
    let mut worst = 0.0f64;
    let mut worst_ok = true;
    let mut lu = vec![0.0; n];
    for j in 0..j_max {
        let col: Vec<f64> = eigenvectors.column(j).iter().copied().collect();
        op.apply_into(&col, &mut lu);
        let mut res2 = 0.0;
        for x in 0..n {
            let r = lu[x] - values[j] * col[x];
            res2 += r * r * nu[x];
        }
        let res = res2.sqrt();
        if res > RESIDUAL_TOL * values[j].max(1.0) {
            worst_ok = false;
        }
        worst = worst.max(res);
    }
    if !worst_ok {
        return Err(Error::EigenNonConvergence {
            requested: j_max,
            converged: j_max,
            residual: worst,
        });
    }

    Ok(SpectralBasis {
        eigenvalues: values,
        eigenvectors,
        nu,
        h: op.graph.h,
    })
}

/// Heat semigroup action `exp(-t L) f` through the computed basis. With a
/// partial basis this is the rank-`j_max` truncation of the semigroup.
pub fn heat_apply(basis: &SpectralBasis, t: f64, f: &[f64]) -> Result<DVector<f64>> {
    if t < 0.0 {
        return Err(Error::InvalidParam(format!("heat time must be >= 0, got {t}")));
    }
    basis.apply_multiplier(|lam| (-t * lam).exp(), f)
}

/// Truncated Taylor lift `f_t = sum_{l=0}^{k} (t L)^l f / l!` with
/// `k = ceil(beta/2) - 1`, computed by repeated sparse application of the
/// Laplacian (no dense powers).
pub fn taylor_lift(op: &LaplacianOperator, t: f64, f: &[f64], beta: f64) -> Result<DVector<f64>> {
    if !(beta > 0.0) {
        return Err(Error::InvalidParam(format!(
            "smoothness exponent must be positive, got {beta}"
        )));
    }
    if t < 0.0 {
        return Err(Error::InvalidParam(format!("lift time must be >= 0, got {t}")));
    }
    let k = taylor_order(beta);
    let n = op.n();
    if f.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: f.len(),
        });
    }
    let mut acc = DVector::from_column_slice(f);
    let mut term = DVector::from_column_slice(f);
    let mut scratch = vec![0.0; n];
    for l in 1..=k {
        op.apply_into(term.as_slice(), &mut scratch);
        let factor = t / l as f64;
        for x in 0..n {
            term[x] = scratch[x] * factor;
        }
        acc += &term;
    }
    Ok(acc)
}

/// `k = ceil(beta/2) - 1` (zero for beta <= 2).
pub fn taylor_order(beta: f64) -> usize {
    ((beta / 2.0).ceil() as usize).saturating_sub(1)
}

/// Projection onto the span of the first `j` eigenvectors.
pub fn project(basis: &SpectralBasis, j: usize, g: &[f64]) -> Result<DVector<f64>> {
    if j < 1 || j > basis.j_max() {
        return Err(Error::JOutOfRange {
            j,
            j_max: basis.j_max(),
        });
    }
    let coeffs = basis.coefficients(g)?;
    Ok(basis.synthesize(&coeffs[..j]))
}

/// Multiplier of the Taylor-corrected heat filter:
/// `sum_{l<=k} (t lambda)^l exp(-t lambda) / l!`.
pub fn taylored_heat_multiplier(t: f64, k: usize, lambda: f64) -> f64 {
    let s = t * lambda;
    let mut term = 1.0;
    let mut acc = 1.0;
    for l in 1..=k {
        term *= s / l as f64;
        acc += term;
    }
    acc * (-s).exp()
}

/// Kernel operator built from the heat semigroup and its first `k` Taylor
/// corrections, applied spectrally.
pub fn q_kernel_apply(basis: &SpectralBasis, t: f64, k: usize, f: &[f64]) -> Result<DVector<f64>> {
    if t < 0.0 {
        return Err(Error::InvalidParam(format!("kernel time must be >= 0, got {t}")));
    }
    basis.apply_multiplier(|lam| taylored_heat_multiplier(t, k, lam), f)
}

/// A scalar filter function with the derivatives the kernel construction
/// needs; `eval(l, s)` is the l-th derivative at `s`, and `eval(0, 0) = 1` is
/// required.
pub trait ChiFunction {
    fn eval(&self, order: usize, s: f64) -> f64;
}

/// `chi(s) = exp(-s)`; derivatives alternate sign.
pub struct ExpChi;

impl ChiFunction for ExpChi {
    fn eval(&self, order: usize, s: f64) -> f64 {
        let sign = if order % 2 == 0 { 1.0 } else { -1.0 };
        sign * (-s).exp()
    }
}

/// Multiplier `sum_{l<=k} (-t lambda)^l chi^{(l)}(t lambda) / l!`.
pub fn chi_multiplier<C: ChiFunction>(chi: &C, t: f64, k: usize, lambda: f64) -> f64 {
    let s = t * lambda;
    let mut pow = 1.0;
    let mut fact = 1.0;
    let mut acc = 0.0;
    for l in 0..=k {
        if l > 0 {
            pow *= -s;
            fact *= l as f64;
        }
        acc += pow * chi.eval(l, s) / fact;
    }
    acc
}

/// Kernel-regression estimate `fhat = sum_i chi_t^{(k)}(., x_i) y_i nu_{x_i}`
/// over the labeled vertices only; returns a value at every vertex.
pub fn chi_kernel_regress<C: ChiFunction>(
    basis: &SpectralBasis,
    t: f64,
    k: usize,
    chi: &C,
    labeled_ys: &[f64],
    labeled_idx: &[usize],
) -> Result<DVector<f64>> {
    let unit = chi.eval(0, 0.0);
    if (unit - 1.0).abs() > 1e-12 {
        return Err(Error::FilterNotUnit(unit));
    }
    if labeled_ys.len() != labeled_idx.len() {
        return Err(Error::LengthMismatch {
            expected: labeled_idx.len(),
            got: labeled_ys.len(),
        });
    }
    let n = basis.n();
    let mut padded = vec![0.0; n];
    for (&y, &i) in labeled_ys.iter().zip(labeled_idx) {
        if i >= n {
            return Err(Error::InvalidParam(format!("labeled index {i} out of range")));
        }
        padded[i] += y;
    }
    basis.apply_multiplier(|lam| chi_multiplier(chi, t, k, lam), &padded)
}
