//! Dense factorisation helpers shared by every module.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Jitter multipliers (of the mean diagonal) tried in order when a plain
/// Cholesky factorisation fails.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Lower Cholesky factor `L` with `A + jitter * I = L L^T`.
#[derive(Debug, Clone)]
pub struct Factor {
    l: DMatrix<f64>,
    jitter: f64,
}

impl Factor {
    /// Factorises `a`, escalating diagonal jitter along [`JITTER_LADDER`]
    /// before giving up.
    pub fn new(a: &DMatrix<f64>, name: &str) -> Result<Factor> {
        check_square(a, name)?;
        if let Some(f) = Self::try_plain(a) {
            return Ok(f);
        }
        let n = a.nrows();
        let mean_diag = (a.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
        for mult in JITTER_LADDER {
            let jitter = mult * mean_diag;
            let mut b = a.clone();
            for i in 0..n {
                b[(i, i)] += jitter;
            }
            if let Some(mut f) = Self::try_plain(&b) {
                f.jitter = jitter;
                return Ok(f);
            }
        }
        Err(Error::NotPositiveDefinite(name.to_string()))
    }

    /// Factorises without jitter and additionally rejects pivots below
    /// `tol * max(1, max diagonal)`.
    pub fn strict(a: &DMatrix<f64>, name: &str, tol: f64) -> Result<Factor> {
        check_square(a, name)?;
        let f = Self::try_plain(a).ok_or_else(|| Error::NotPositiveDefinite(name.to_string()))?;
        let max_diag = a.diagonal().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let min_pivot = f.l.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
        if min_pivot <= tol * max_diag {
            return Err(Error::NotPositiveDefinite(format!(
                "{name} (smallest pivot {min_pivot:e} below SPD tolerance)"
            )));
        }
        Ok(f)
    }

    /// Factorises without jitter and rejects pivots below `tol * max diagonal`.
    /// Scale-free, unlike [`Factor::strict`].
    pub fn relative(a: &DMatrix<f64>, name: &str, tol: f64) -> Result<Factor> {
        check_square(a, name)?;
        let f = Self::try_plain(a).ok_or_else(|| Error::NotPositiveDefinite(name.to_string()))?;
        let max_diag = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min_pivot = f.l.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
        if min_pivot <= tol * max_diag {
            return Err(Error::NotPositiveDefinite(format!(
                "{name} (relative pivot {:e} below {tol:e})",
                min_pivot / max_diag
            )));
        }
        Ok(f)
    }

    fn try_plain(a: &DMatrix<f64>) -> Option<Factor> {
        if a.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let chol: Cholesky<f64, Dyn> = Cholesky::new(a.clone())?;
        let l = chol.l();
        if l.diagonal().iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return None;
        }
        Some(Factor { l, jitter: 0.0 })
    }

    /// Factor of the identity, used for the lightweight (independent runs) case.
    pub fn identity(n: usize) -> Factor {
        Factor {
            l: DMatrix::identity(n, n),
            jitter: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Diagonal jitter that had to be added (0 when none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L^{-1} b`
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `L^{-T} b`
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .tr_solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `A^{-1} b`
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.solve(&DMatrix::identity(self.dim(), self.dim()));
        symmetrize(&inv)
    }

    /// Reconstructs `L L^T` (includes any jitter).
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

fn check_square(a: &DMatrix<f64>, name: &str) -> Result<()> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "`{name}` must be square and nonempty, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest `|a_ij - a_ji|` relative to the largest `|a_ij|`.
pub fn relative_asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Square root `G` with `G G^T = a` for a symmetric positive-semidefinite
/// matrix. Eigenvalues down to `-tol * max(1, max |lambda|)` are clamped to 0.
pub fn psd_root(a: &DMatrix<f64>, tol: f64, name: &str) -> Result<DMatrix<f64>> {
    check_square(a, name)?;
    let eig = SymmetricEigen::new(symmetrize(a));
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut root = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -tol * scale {
            return Err(Error::NotPositiveDefinite(format!(
                "{name} (eigenvalue {lambda:e} below -{tol:e})"
            )));
        }
        let s = lambda.max(0.0).sqrt();
        root.column_mut(j).scale_mut(s);
    }
    Ok(root)
}
