//! Matrix-variate distributions: matrix normal, inverse Wishart, matrix t and
//! the matrix-normal-inverse-Wishart (MNIW) family.
//!
//! Inverse-Wishart convention: `Sigma ~ IW_k(S, delta)` has density
//!
//! ```text
//! p(Sigma) = |S|^{(delta+k-1)/2} / (2^{(delta+k-1)k/2} Gamma_k((delta+k-1)/2))
//!            * |Sigma|^{-(delta+2k)/2} exp(-tr(Sigma^{-1} S) / 2)
//! ```
//!
//! i.e. the textbook inverse Wishart with `nu = delta + k - 1` degrees of
//! freedom. Under this convention the conjugate update is `delta_hat = delta + n`,
//! the mean is `S / (delta - 2)` and the matrix-t marginal of entry `(u, s)` is a
//! univariate t with `delta` degrees of freedom and squared scale
//! `R_uu S_ss / delta`. Proper (sampleable) parameters need `delta > 0`; the
//! weak-prior tag `delta = -k + 1` is accepted for bookkeeping only.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{psd_root, relative_asymmetry, Factor};

/// Pivot tolerance below which a scale matrix is rejected by the samplers.
pub const SPD_TOLERANCE: f64 = 1e-10;
/// Default tolerance on negative eigenvalues of a matrix-t row scale.
pub const PSD_TOLERANCE: f64 = 1e-10;
/// Maximum relative asymmetry accepted for symmetric parameters.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

const LN_PI: f64 = 1.144_729_885_849_400_2;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln Gamma_k(x) = k(k-1)/4 ln(pi) + sum_{s=1}^k ln Gamma(x - (s-1)/2)`.
pub fn ln_mv_gamma(k: usize, x: f64) -> f64 {
    let kf = k as f64;
    kf * (kf - 1.0) / 4.0 * LN_PI + (0..k).map(|s| ln_gamma(x - s as f64 / 2.0)).sum::<f64>()
}

fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if relative_asymmetry(m) > SYMMETRY_TOLERANCE {
        return Err(Error::InvalidParameter(format!("`{name}` is not symmetric")));
    }
    Ok(())
}

/// `MN_{n,k}(mean, col_scale, row_scale)` with `cov(vec X) = col_scale (x) row_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixNormalParams {
    pub mean: DMatrix<f64>,
    pub col_scale: DMatrix<f64>,
    pub row_scale: DMatrix<f64>,
}

impl MatrixNormalParams {
    pub fn new(mean: DMatrix<f64>, col_scale: DMatrix<f64>, row_scale: DMatrix<f64>) -> Result<Self> {
        if mean.nrows() != row_scale.nrows()
            || mean.ncols() != col_scale.nrows()
            || !row_scale.is_square()
            || !col_scale.is_square()
        {
            return Err(Error::Dimension(format!(
                "matrix normal mean {}x{} with column scale {}x{} and row scale {}x{}",
                mean.nrows(),
                mean.ncols(),
                col_scale.nrows(),
                col_scale.ncols(),
                row_scale.nrows(),
                row_scale.ncols()
            )));
        }
        check_symmetric(&col_scale, "column scale")?;
        check_symmetric(&row_scale, "row scale")?;
        Ok(Self {
            mean,
            col_scale,
            row_scale,
        })
    }

    pub fn log_density(&self, x: &DMatrix<f64>) -> Result<f64> {
        if x.shape() != self.mean.shape() {
            return Err(Error::Dimension("matrix normal argument shape".into()));
        }
        let (n, k) = self.mean.shape();
        let fa = Factor::strict(&self.row_scale, "row scale", SPD_TOLERANCE)?;
        let fs = Factor::strict(&self.col_scale, "column scale", SPD_TOLERANCE)?;
        let d = x - &self.mean;
        // tr(Sigma^{-1} D^T A^{-1} D) = ||L_A^{-1} D L_S^{-T}||_F^2
        let w = fa.solve_lower(&d);
        let w = fs.solve_lower(&w.transpose());
        let quad = w.norm_squared();
        Ok(-0.5 * (n * k) as f64 * LN_2PI - 0.5 * k as f64 * fa.log_det() - 0.5 * n as f64 * fs.log_det()
            - 0.5 * quad)
    }
}

/// Draws `mean + L_A Z L_Sigma^T` with `Z` standard normal.
pub fn sample_matrix_normal<R: Rng + ?Sized>(params: &MatrixNormalParams, rng: &mut R) -> Result<DMatrix<f64>> {
    let fa = Factor::strict(&params.row_scale, "row scale", SPD_TOLERANCE)?;
    let fs = Factor::strict(&params.col_scale, "column scale", SPD_TOLERANCE)?;
    Ok(draw_with_roots(&params.mean, fa.l(), fs.l(), rng))
}

fn draw_with_roots<R: Rng + ?Sized>(
    mean: &DMatrix<f64>,
    row_root: &DMatrix<f64>,
    col_root: &DMatrix<f64>,
    rng: &mut R,
) -> DMatrix<f64> {
    let z = standard_normal_matrix(row_root.ncols(), col_root.ncols(), rng);
    mean + row_root * z * col_root.transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseWishartParams {
    pub scale: DMatrix<f64>,
    pub dof: f64,
}

impl InverseWishartParams {
    pub fn new(scale: DMatrix<f64>, dof: f64) -> Result<Self> {
        if !scale.is_square() {
            return Err(Error::Dimension("inverse Wishart scale must be square".into()));
        }
        check_symmetric(&scale, "inverse Wishart scale")?;
        let k = scale.nrows() as f64;
        if !(dof > 0.0) && dof != 1.0 - k {
            return Err(Error::InvalidParameter(format!(
                "inverse Wishart dof must be > 0 (or the improper tag {}), got {dof}",
                1.0 - k
            )));
        }
        Ok(Self { scale, dof })
    }

    pub fn dim(&self) -> usize {
        self.scale.nrows()
    }

    pub fn is_proper(&self) -> bool {
        self.dof > 0.0
    }

    /// `S / (delta - 2)` when `delta > 2`.
    pub fn mean(&self) -> Option<DMatrix<f64>> {
        (self.dof > 2.0).then(|| &self.scale / (self.dof - 2.0))
    }

    pub fn log_density(&self, sigma: &DMatrix<f64>) -> Result<f64> {
        if !self.is_proper() {
            return Err(Error::ImproperPrior("inverse Wishart density needs dof > 0".into()));
        }
        let k = self.dim();
        let kf = k as f64;
        let nu = self.dof + kf - 1.0;
        let fs = Factor::strict(&self.scale, "inverse Wishart scale", SPD_TOLERANCE)?;
        let fx = Factor::strict(sigma, "inverse Wishart argument", SPD_TOLERANCE)?;
        let trace = fx.solve(&self.scale).trace();
        Ok(0.5 * nu * fs.log_det()
            - 0.5 * nu * kf * std::f64::consts::LN_2
            - ln_mv_gamma(k, 0.5 * nu)
            - 0.5 * (self.dof + 2.0 * kf) * fx.log_det()
            - 0.5 * trace)
    }
}

/// Bartlett-decomposition sampler.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(params: &InverseWishartParams, rng: &mut R) -> Result<DMatrix<f64>> {
    if !params.is_proper() {
        return Err(Error::ImproperPrior(format!(
            "inverse Wishart with dof {} cannot be sampled",
            params.dof
        )));
    }
    let fs = Factor::strict(&params.scale, "inverse Wishart scale", SPD_TOLERANCE)?;
    Ok(iw_from_root(fs.l(), params.dof, rng))
}

fn iw_from_root<R: Rng + ?Sized>(scale_root: &DMatrix<f64>, dof: f64, rng: &mut R) -> DMatrix<f64> {
    let k = scale_root.nrows();
    let nu = dof + k as f64 - 1.0;
    // W = B B^T ~ Wishart(nu, I); Sigma = C W^{-1} C^T = X X^T with X^T = B^{-1} C^T.
    let mut b = DMatrix::zeros(k, k);
    for i in 0..k {
        let chi = ChiSquared::new(nu - i as f64).expect("positive chi-square dof");
        b[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            b[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let xt = b
        .solve_lower_triangular(&scale_root.transpose())
        .expect("bartlett factor has a positive diagonal");
    let sigma = xt.transpose() * &xt;
    crate::linalg::symmetrize(&sigma)
}

/// Matrix t, `MT_{n0,k}(location, col_scale, row_scale, dof)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixTParams {
    pub location: DMatrix<f64>,
    pub col_scale: DMatrix<f64>,
    pub row_scale: DMatrix<f64>,
    pub dof: f64,
}

/// Univariate Student t with `sq_scale` the squared scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnivariateT {
    pub location: f64,
    pub sq_scale: f64,
    pub dof: f64,
}

impl UnivariateT {
    pub fn scale(&self) -> f64 {
        self.sq_scale.max(0.0).sqrt()
    }

    /// Variance `sq_scale * dof / (dof - 2)` for `dof > 2`.
    pub fn variance(&self) -> Option<f64> {
        (self.dof > 2.0).then(|| self.sq_scale * self.dof / (self.dof - 2.0))
    }

    pub fn quantile(&self, p: f64) -> f64 {
        if self.scale() == 0.0 {
            return self.location;
        }
        self.location + self.scale() * standard_t_quantile(p, self.dof)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if self.scale() == 0.0 {
            return if x < self.location { 0.0 } else { 1.0 };
        }
        standard_t_cdf((x - self.location) / self.scale(), self.dof)
    }

    /// Central interval with probability `level`.
    pub fn interval(&self, level: f64) -> (f64, f64) {
        let a = 0.5 * (1.0 - level);
        (self.quantile(a), self.quantile(1.0 - a))
    }
}

pub fn standard_t_quantile(p: f64, dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof).expect("dof > 0").inverse_cdf(p)
}

pub fn standard_t_cdf(x: f64, dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof).expect("dof > 0").cdf(x)
}

impl MatrixTParams {
    pub fn new(location: DMatrix<f64>, col_scale: DMatrix<f64>, row_scale: DMatrix<f64>, dof: f64) -> Result<Self> {
        if location.nrows() != row_scale.nrows()
            || location.ncols() != col_scale.nrows()
            || !row_scale.is_square()
            || !col_scale.is_square()
        {
            return Err(Error::Dimension("matrix t location/scale shapes disagree".into()));
        }
        if !(dof > 0.0) {
            return Err(Error::InvalidParameter(format!("matrix t dof must be > 0, got {dof}")));
        }
        Ok(Self {
            location,
            col_scale,
            row_scale,
            dof,
        })
    }

    pub fn rows(&self) -> usize {
        self.location.nrows()
    }

    pub fn cols(&self) -> usize {
        self.location.ncols()
    }

    pub fn marginal(&self, row: usize, col: usize) -> Result<UnivariateT> {
        if row >= self.rows() || col >= self.cols() {
            return Err(Error::IndexOutOfRange {
                row,
                col,
                rows: self.rows(),
                cols: self.cols(),
            });
        }
        Ok(UnivariateT {
            location: self.location[(row, col)],
            sq_scale: self.row_scale[(row, row)] * self.col_scale[(col, col)] / self.dof,
            dof: self.dof,
        })
    }

    pub fn log_density(&self, y: &DMatrix<f64>) -> Result<f64> {
        if y.shape() != self.location.shape() {
            return Err(Error::Dimension("matrix t argument shape".into()));
        }
        let (n0, k) = self.location.shape();
        let fr = Factor::strict(&self.row_scale, "row scale", SPD_TOLERANCE)?;
        let fs = Factor::strict(&self.col_scale, "column scale", SPD_TOLERANCE)?;
        let d = y - &self.location;
        let w = fr.solve_lower(&d);
        let inner = &self.col_scale + w.transpose() * &w;
        let fi = Factor::strict(&crate::linalg::symmetrize(&inner), "matrix t inner", SPD_TOLERANCE)?;
        let a = 0.5 * (self.dof + k as f64 - 1.0);
        let b = 0.5 * (self.dof + (n0 + k) as f64 - 1.0);
        Ok(ln_mv_gamma(k, b) - ln_mv_gamma(k, a) - 0.5 * (n0 * k) as f64 * LN_PI - 0.5 * k as f64 * fr.log_det()
            + a * fs.log_det()
            - b * fi.log_det())
    }

    /// Precomputes square roots for repeated sampling.
    pub fn sampler(&self) -> Result<MatrixTSampler> {
        self.sampler_with_tolerance(PSD_TOLERANCE)
    }

    pub fn sampler_with_tolerance(&self, psd_tol: f64) -> Result<MatrixTSampler> {
        let col = Factor::strict(&self.col_scale, "column scale", SPD_TOLERANCE)?;
        let row_root = psd_root(&self.row_scale, psd_tol, "row scale")?;
        Ok(MatrixTSampler {
            location: self.location.clone(),
            col_root: col.l().clone(),
            row_root,
            dof: self.dof,
        })
    }
}

/// Compositional matrix-t sampler: `Sigma ~ IW(col_scale, dof)`, then
/// `Y | Sigma ~ MN(location, Sigma, row_scale)`.
#[derive(Debug, Clone)]
pub struct MatrixTSampler {
    location: DMatrix<f64>,
    col_root: DMatrix<f64>,
    row_root: DMatrix<f64>,
    dof: f64,
}

impl MatrixTSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let sigma = iw_from_root(&self.col_root, self.dof, rng);
        let sigma_root = Factor::new(&sigma, "sampled column covariance")
            .expect("inverse Wishart draws are positive definite");
        draw_with_roots(&self.location, &self.row_root, sigma_root.l(), rng)
    }
}

pub fn sample_matrix_t<R: Rng + ?Sized>(params: &MatrixTParams, rng: &mut R) -> Result<DMatrix<f64>> {
    Ok(params.sampler()?.sample(rng))
}

/// Univariate view of [`MatrixTParams::marginal`].
pub fn matrix_t_marginal(params: &MatrixTParams, row: usize, col: usize) -> Result<UnivariateT> {
    params.marginal(row, col)
}

/// `MNIW_{m,k}(M, Omega, S, delta)`: `B | Sigma ~ MN(M, Sigma, Omega)`,
/// `Sigma ~ IW_k(S, delta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MniwParams {
    pub m: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub dof: f64,
}

impl MniwParams {
    pub fn new(m: DMatrix<f64>, omega: DMatrix<f64>, s: DMatrix<f64>, dof: f64) -> Result<Self> {
        if omega.nrows() != m.nrows() || !omega.is_square() || s.nrows() != m.ncols() || !s.is_square() {
            return Err(Error::Dimension(format!(
                "MNIW shapes: M {}x{}, Omega {}x{}, S {}x{}",
                m.nrows(),
                m.ncols(),
                omega.nrows(),
                omega.ncols(),
                s.nrows(),
                s.ncols()
            )));
        }
        check_symmetric(&omega, "Omega")?;
        check_symmetric(&s, "S")?;
        Ok(Self { m, omega, s, dof })
    }

    pub fn sampler(&self) -> Result<MniwSampler> {
        if !(self.dof > 0.0) {
            return Err(Error::ImproperPrior(format!("MNIW with dof {} cannot be sampled", self.dof)));
        }
        let s = Factor::strict(&self.s, "S", SPD_TOLERANCE)?;
        let omega = Factor::strict(&self.omega, "Omega", SPD_TOLERANCE)?;
        Ok(MniwSampler {
            m: self.m.clone(),
            omega_root: omega.l().clone(),
            s_root: s.l().clone(),
            dof: self.dof,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MniwSampler {
    m: DMatrix<f64>,
    omega_root: DMatrix<f64>,
    s_root: DMatrix<f64>,
    dof: f64,
}

impl MniwSampler {
    /// Returns `(B, Sigma)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (DMatrix<f64>, DMatrix<f64>) {
        let sigma = iw_from_root(&self.s_root, self.dof, rng);
        let sigma_root = Factor::new(&sigma, "sampled Sigma").expect("inverse Wishart draws are positive definite");
        let b = draw_with_roots(&self.m, &self.omega_root, sigma_root.l(), rng);
        (b, sigma)
    }
}
