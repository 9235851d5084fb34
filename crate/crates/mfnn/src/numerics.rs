//! Symmetric matrix transforms, minimum-norm regression, Gaussian quadrature,
//! and log-log slope fits shared by the kernel and coupling modules.
//!
//! Everything routes through one eigendecomposition helper so the clamping and
//! conditioning policy is uniform: inputs must be symmetric up to a small
//! tolerance, are symmetrized before factoring, tiny negative eigenvalues are
//! clamped to zero, and inversions refuse spectra whose relative spread
//! exceeds the caller's tolerance instead of silently amplifying noise.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Asymmetry beyond this relative tolerance is rejected rather than averaged.
const SYM_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix is not symmetric: max |a_ij - a_ji| = {max_asym:.3e}")]
    NotSymmetric { max_asym: f64 },
    #[error("matrix is not positive semidefinite: min eigenvalue {lambda_min:.3e}")]
    NotPsd { lambda_min: f64 },
    #[error(
        "inversion refused: min eigenvalue {lambda_min:.3e} below {rel_tol:.1e} of max {lambda_max:.3e}"
    )]
    InverseUnstable { lambda_min: f64, lambda_max: f64, rel_tol: f64 },
    #[error("degenerate fit: {0}")]
    DegenerateFit(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub eigenvalues: DVector<f64>,
    /// Column k is the unit eigenvector for `eigenvalues[k]`.
    pub eigenvectors: DMatrix<f64>,
}

/// Checks symmetry, symmetrizes, and factors. The symmetry tolerance is
/// relative to the largest entry magnitude.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<SymEig, NumericsError> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(NumericsError::InvalidArgument("sym_eig needs a nonempty square matrix"));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::InvalidArgument("sym_eig input has non-finite entries"));
    }
    let n = a.nrows();
    let scale = a.amax().max(1.0);
    let mut max_asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if max_asym > SYM_TOL * scale {
        return Err(NumericsError::NotSymmetric { max_asym });
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let eigenvalues = DVector::from_fn(n, |k, _| eig.eigenvalues[order[k]]);
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        eigenvectors.set_column(k, &eig.eigenvectors.column(src));
    }
    Ok(SymEig { eigenvalues, eigenvectors })
}

/// Evidence that a symmetric matrix passed a positive semidefiniteness check.
#[derive(Clone, Copy, Debug)]
pub struct PsdCertificate {
    pub lambda_min: f64,
    /// Relative threshold the check used: eigenvalues at or above
    /// `-rel_threshold * max(1, lambda_max)` were accepted.
    pub rel_threshold: f64,
}

/// Checks the spectrum stays above `-rel_threshold * max(1, lambda_max)`.
pub fn certify_psd(a: &DMatrix<f64>, rel_threshold: f64) -> Result<PsdCertificate, NumericsError> {
    let eig = sym_eig(a)?;
    let n = eig.eigenvalues.len();
    let lambda_max = eig.eigenvalues[0];
    let lambda_min = eig.eigenvalues[n - 1];
    if lambda_min < -rel_threshold * lambda_max.abs().max(1.0) {
        return Err(NumericsError::NotPsd { lambda_min });
    }
    Ok(PsdCertificate { lambda_min, rel_threshold })
}

fn spectral_map(
    a: &DMatrix<f64>,
    f: impl Fn(f64) -> f64,
) -> Result<(DMatrix<f64>, SymEig), NumericsError> {
    let eig = sym_eig(a)?;
    let n = eig.eigenvalues.len();
    let d = DMatrix::from_fn(n, n, |i, j| if i == j { f(eig.eigenvalues[i]) } else { 0.0 });
    let m = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Ok((m, eig))
}

/// Symmetric PSD square root. Eigenvalues in `[-rel_clamp * scale, 0)` are
/// clamped to zero where `scale = max(1, lambda_max)`; anything lower is an
/// error.
pub fn psd_sqrt(a: &DMatrix<f64>, rel_clamp: f64) -> Result<DMatrix<f64>, NumericsError> {
    let probe = sym_eig(a)?;
    let lambda_max = probe.eigenvalues[0];
    let lambda_min = probe.eigenvalues[probe.eigenvalues.len() - 1];
    if lambda_min < -rel_clamp * lambda_max.abs().max(1.0) {
        return Err(NumericsError::NotPsd { lambda_min });
    }
    let (m, _) = spectral_map(a, |l| l.max(0.0).sqrt())?;
    Ok(m)
}

/// Inverse PSD square root. Refuses spectra with
/// `lambda_min < rel_tol * lambda_max`.
pub fn psd_inv_sqrt(a: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>, NumericsError> {
    let probe = sym_eig(a)?;
    let lambda_max = probe.eigenvalues[0];
    let lambda_min = probe.eigenvalues[probe.eigenvalues.len() - 1];
    if lambda_max <= 0.0 || lambda_min < rel_tol * lambda_max {
        return Err(NumericsError::InverseUnstable { lambda_min, lambda_max, rel_tol });
    }
    let (m, _) = spectral_map(a, |l| 1.0 / l.sqrt())?;
    Ok(m)
}

/// Solves `A Z = RHS` for symmetric positive definite `A` with the same
/// conditioning gate as [`psd_inv_sqrt`].
pub fn sym_solve(
    a: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    rel_tol: f64,
) -> Result<DMatrix<f64>, NumericsError> {
    if rhs.nrows() != a.nrows() {
        return Err(NumericsError::InvalidArgument("sym_solve shape mismatch"));
    }
    let eig = sym_eig(a)?;
    let n = eig.eigenvalues.len();
    let lambda_max = eig.eigenvalues[0];
    let lambda_min = eig.eigenvalues[n - 1];
    if lambda_max <= 0.0 || lambda_min < rel_tol * lambda_max {
        return Err(NumericsError::InverseUnstable { lambda_min, lambda_max, rel_tol });
    }
    let mut coeff = eig.eigenvectors.transpose() * rhs;
    for i in 0..n {
        let li = eig.eigenvalues[i];
        for j in 0..coeff.ncols() {
            coeff[(i, j)] /= li;
        }
    }
    Ok(&eig.eigenvectors * coeff)
}

/// Minimum-norm solution of the per-node regression constraint
/// `(1/m) H w = target`, where `H` is `N x m` with `N <= m`.
///
/// Solves through the `N x N` normal matrix `(1/m) H H^T`, so the result is
/// the minimum Euclidean norm interpolant `w = H^T [(1/m) H H^T]^{-1} target`
/// up to the `1/m` bookkeeping.
pub fn min_norm_solve(
    h: &DMatrix<f64>,
    target: &DVector<f64>,
    rel_tol: f64,
) -> Result<DVector<f64>, NumericsError> {
    if h.nrows() != target.len() || h.nrows() == 0 || h.ncols() == 0 {
        return Err(NumericsError::InvalidArgument("min_norm_solve shape mismatch"));
    }
    let m = h.ncols() as f64;
    let gram = (h * h.transpose()) / m;
    let rhs = DMatrix::from_column_slice(target.len(), 1, target.as_slice());
    let z = sym_solve(&gram, &rhs, rel_tol)?;
    let w = h.transpose() * z;
    Ok(DVector::from_column_slice(w.as_slice()))
}

/// Gauss-Hermite rule for the standard normal weight: sum_i w_i f(x_i)
/// approximates E[f(g)] with g ~ N(0, 1); exact for polynomials of degree
/// `2 * order - 1`.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub-Welsch construction: eigenvalues of the Jacobi matrix of the
    /// monic probabilists' Hermite recurrence (off-diagonals sqrt(k)) are the
    /// nodes; squared first eigenvector components are the weights.
    pub fn new(order: usize) -> Result<Self, NumericsError> {
        if order == 0 {
            return Err(NumericsError::InvalidArgument("quadrature order must be positive"));
        }
        let jacobi = DMatrix::from_fn(order, order, |i, j| {
            if i + 1 == j {
                (j as f64).sqrt()
            } else if j + 1 == i {
                (i as f64).sqrt()
            } else {
                0.0
            }
        });
        let eig = jacobi.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|k| {
                let v0 = eig.eigenvectors[(0, k)];
                (eig.eigenvalues[k], v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        Ok(GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// E[f(g)] for g ~ N(0, 1).
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// E[h(u) h(v)] for (u, v) ~ N(0, sigma1^2 [[kii, kij], [kij, kjj]]) using a
/// shared quadrature rule.
///
/// Near-singular covariances (det below 1e-12 of trace squared) fall back to
/// a one-dimensional rule along the dominant direction, which also covers the
/// exactly rank-one and zero cases.
pub fn bivariate_h_expect_with(
    rule: &GaussHermite,
    kii: f64,
    kij: f64,
    kjj: f64,
    sigma1: f64,
    h: impl Fn(f64) -> f64,
) -> Result<f64, NumericsError> {
    if !(sigma1.is_finite() && sigma1 > 0.0) {
        return Err(NumericsError::InvalidArgument("sigma1 must be positive and finite"));
    }
    if !(kii.is_finite() && kij.is_finite() && kjj.is_finite()) {
        return Err(NumericsError::InvalidArgument("covariance entries must be finite"));
    }
    let s2 = sigma1 * sigma1;
    let (mut s11, s12, mut s22) = (s2 * kii, s2 * kij, s2 * kjj);
    // The expectation is symmetric in (u, v); fixing the larger variance as
    // the outer quadrature variable makes that symmetry exact numerically.
    if s11 < s22 {
        std::mem::swap(&mut s11, &mut s22);
    }
    let trace = s11 + s22;
    let det = s11 * s22 - s12 * s12;
    let disc = ((s11 - s22) * (s11 - s22) + 4.0 * s12 * s12).sqrt();
    let lambda_min = 0.5 * (trace - disc);
    if lambda_min < -1e-10 * trace.abs().max(1.0) {
        return Err(NumericsError::NotPsd { lambda_min });
    }
    if det <= 1e-12 * trace * trace {
        // Rank <= 1: u = a g, v = b g share one Gaussian factor. When one
        // variance vanishes the sign of b is immaterial, so signum(0) is fine.
        let a = s11.max(0.0).sqrt();
        let b = s12.signum() * s22.max(0.0).sqrt();
        return Ok(rule.expect(|g| h(a * g) * h(b * g)));
    }
    // Cholesky of the 2x2: u = l11 g1, v = l21 g1 + l22 g2.
    let l11 = s11.sqrt();
    let l21 = s12 / l11;
    let l22 = (s22 - l21 * l21).sqrt();
    let mut acc = 0.0;
    for (&x1, &w1) in rule.nodes.iter().zip(&rule.weights) {
        let hu = h(l11 * x1);
        let mut inner = 0.0;
        for (&x2, &w2) in rule.nodes.iter().zip(&rule.weights) {
            inner += w2 * h(l21 * x1 + l22 * x2);
        }
        acc += w1 * hu * inner;
    }
    Ok(acc)
}

/// One-shot variant of [`bivariate_h_expect_with`] that builds the rule.
pub fn bivariate_h_expect(
    kii: f64,
    kij: f64,
    kjj: f64,
    sigma1: f64,
    h: impl Fn(f64) -> f64,
    quad_order: usize,
) -> Result<f64, NumericsError> {
    let rule = GaussHermite::new(quad_order)?;
    bivariate_h_expect_with(&rule, kii, kij, kjj, sigma1, h)
}

/// Least-squares fit of ln y against ln x.
#[derive(Clone, Copy, Debug)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Fits `ln y = slope * ln x + intercept`. Requires at least three strictly
/// positive points with non-identical abscissas.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<LogLogFit, NumericsError> {
    if xs.len() != ys.len() {
        return Err(NumericsError::DegenerateFit("point lists differ in length"));
    }
    if xs.len() < 3 {
        return Err(NumericsError::DegenerateFit("need at least three points"));
    }
    if xs.iter().chain(ys.iter()).any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(NumericsError::DegenerateFit("all points must be positive and finite"));
    }
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 1e-24 {
        return Err(NumericsError::DegenerateFit("abscissas are identical"));
    }
    let slope = sxy / sxx;
    Ok(LogLogFit { slope, intercept: my - slope * mx })
}
