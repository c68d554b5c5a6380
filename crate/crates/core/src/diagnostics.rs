//! Validation of a fitted emulator against held-out runs.
//!
//! With `R = L_R L_R^T` and `S_hat = L_S L_S^T`, the standardised error matrix
//! is `E = L_R^-1 (Y0 - Q) L_S^-T` and the omnibus statistic is
//! `U = |I_k + E^T E|^-1`. Under adequacy `U` is distributed as a product of
//! independent `Beta((k + delta_hat - s)/2, n0/2)`, `s = 1..k`, whose quantiles
//! are simulated.

use nalgebra::DMatrix;
use rand_distr::{Beta, Distribution, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emulator::{FittedEmulator, MarginalPredictions, PredictiveDistribution};
use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Factor};
use crate::matvar::{standard_t_quantile, PSD_TOLERANCE};
use crate::rng::Seed;
use crate::schema::Dataset;

const REFERENCE_CHUNK: usize = 8192;

fn check_y0(q: &DMatrix<f64>, y0: &DMatrix<f64>) -> Result<()> {
    if q.shape() != y0.shape() {
        return Err(Error::Dimension(format!(
            "test outputs are {}x{}, predictions {}x{}",
            y0.nrows(),
            y0.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    Ok(())
}

/// `D_us = sqrt(delta_hat / (R_uu S_ss)) (y_us - q_us)`.
pub fn individual_errors(pred: &PredictiveDistribution, y0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_y0(pred.q(), y0)?;
    let (r, s, dof) = (pred.r(), pred.s_hat(), pred.dof());
    let tol = PSD_TOLERANCE * r.diagonal().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut out = DMatrix::zeros(pred.n0(), pred.k());
    for u in 0..pred.n0() {
        for c in 0..pred.k() {
            let diff = y0[(u, c)] - pred.q()[(u, c)];
            let var = r[(u, u)] * s[(c, c)];
            out[(u, c)] = if var > 0.0 {
                (dof / var).sqrt() * diff
            } else if r[(u, u)] >= -tol && diff == 0.0 {
                0.0
            } else {
                return Err(Error::NotPositiveDefinite(format!("predictive row scale at point {u} (R_uu = {:e})", r[(u, u)])));
            };
        }
    }
    Ok(out)
}

/// Fraction of entries of `y0` inside their central `1 - alpha` predictive intervals
/// `q_us +/- c_alpha sqrt(R_uu S_ss / delta_hat)`.
pub fn interval_coverage(pred: &PredictiveDistribution, y0: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    check_y0(pred.q(), y0)?;
    check_alpha(alpha)?;
    let c = standard_t_quantile(1.0 - alpha / 2.0, pred.dof());
    let mut inside = 0usize;
    for u in 0..pred.n0() {
        for s in 0..pred.k() {
            let half = c * (pred.r()[(u, u)] * pred.s_hat()[(s, s)] / pred.dof()).max(0.0).sqrt();
            if (y0[(u, s)] - pred.q()[(u, s)]).abs() <= half {
                inside += 1;
            }
        }
    }
    Ok(inside as f64 / (pred.n0() * pred.k()) as f64)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Standardised error matrix `E` and the jitter needed to factorise `R`.
pub fn standardised_error_matrix(pred: &PredictiveDistribution, y0: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    check_y0(pred.q(), y0)?;
    let fr = Factor::new(&symmetrize(pred.r()), "predictive row scale R")?;
    let fs = Factor::new(&symmetrize(pred.s_hat()), "S_hat")?;
    let w = fr.solve_lower(&(y0 - pred.q()));
    let e = fs.solve_lower(&w.transpose()).transpose();
    Ok((e, fr.jitter()))
}

/// `U = |I_k + E^T E|^-1` together with the jitter applied to `R`.
pub fn omnibus_u_with_jitter(pred: &PredictiveDistribution, y0: &DMatrix<f64>) -> Result<(f64, f64)> {
    let (e, jitter) = standardised_error_matrix(pred, y0)?;
    let k = e.ncols();
    let m = DMatrix::identity(k, k) + e.transpose() * &e;
    let f = Factor::new(&symmetrize(&m), "I + E^T E")?;
    Ok(((-f.log_det()).exp(), jitter))
}

pub fn omnibus_u(pred: &PredictiveDistribution, y0: &DMatrix<f64>) -> Result<f64> {
    Ok(omnibus_u_with_jitter(pred, y0)?.0)
}

/// `vec(sqrt(delta_hat) E)` (column-major); under adequacy the entries are
/// uncorrelated with a t(`delta_hat`) marginal.
pub fn uncorrelated_errors(pred: &PredictiveDistribution, y0: &DMatrix<f64>) -> Result<(Vec<f64>, f64)> {
    let (e, _) = standardised_error_matrix(pred, y0)?;
    let c = pred.dof().sqrt();
    Ok((e.iter().map(|v| v * c).collect(), pred.dof()))
}

pub fn rmse(q: &DMatrix<f64>, y0: &DMatrix<f64>) -> Result<f64> {
    check_y0(q, y0)?;
    Ok(((y0 - q).norm_squared() / q.len() as f64).sqrt())
}

/// Monte Carlo reference law of `U`.
#[derive(Debug, Clone)]
pub struct UReference {
    pub k: usize,
    pub n0: usize,
    pub dof: f64,
    pub mc_size: usize,
    pub seed: Seed,
    sorted: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UReferenceSummary {
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
    pub mc_size: usize,
    pub seed: Seed,
}

impl UReference {
    pub fn mean(&self) -> f64 {
        self.sorted.iter().sum::<f64>() / self.sorted.len() as f64
    }

    /// Linear-interpolation sample quantile.
    pub fn quantile(&self, p: f64) -> f64 {
        sample_quantile(&self.sorted, p)
    }

    /// Fraction of reference draws at or below `u`.
    pub fn cdf(&self, u: f64) -> f64 {
        self.sorted.partition_point(|v| *v <= u) as f64 / self.sorted.len() as f64
    }

    pub fn summary(&self) -> UReferenceSummary {
        UReferenceSummary {
            mean: self.mean(),
            q025: self.quantile(0.025),
            q975: self.quantile(0.975),
            mc_size: self.mc_size,
            seed: self.seed,
        }
    }

    pub fn contains(&self, u: f64) -> bool {
        u >= self.quantile(0.025) && u <= self.quantile(0.975)
    }
}

/// Quantile of already-sorted data (type 7).
pub fn sample_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Simulates `mc_size` draws of `prod_s Beta((k + dof - s)/2, n0/2)`.
pub fn u_reference(k: usize, n0: usize, dof: f64, mc_size: usize, seed: Seed) -> Result<UReference> {
    if k == 0 || n0 == 0 || mc_size == 0 || !(dof > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "U reference needs positive k, n0, dof and size (k={k}, n0={n0}, dof={dof}, size={mc_size})"
        )));
    }
    let betas = (1..=k)
        .map(|s| {
            Beta::new(0.5 * (k as f64 + dof - s as f64), 0.5 * n0 as f64)
                .map_err(|e| Error::InvalidParameter(format!("beta parameters: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let chunks = mc_size.div_ceil(REFERENCE_CHUNK);
    let mut sorted: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = seed.named("u-reference", c as u64).stream();
            let len = REFERENCE_CHUNK.min(mc_size - c * REFERENCE_CHUNK);
            let betas = &betas;
            (0..len)
                .map(move |_| betas.iter().map(|b| b.sample(&mut rng)).product::<f64>())
                .collect::<Vec<_>>()
        })
        .collect();
    sorted.sort_by(f64::total_cmp);
    Ok(UReference {
        k,
        n0,
        dof,
        mc_size,
        seed,
        sorted,
    })
}

/// Relative-loss point estimates and the resulting RRMSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rrmse {
    pub value: f64,
    /// Truncation threshold on `|y|`.
    pub epsilon: f64,
    /// Cells whose predictive puts more than [`UNSTABLE_MASS`] on the sign opposite to `q`.
    pub unstable_cells: Vec<(usize, usize)>,
    pub mc_size: usize,
    pub seed: Seed,
}

/// Opposite-sign predictive mass above which `gamma_us` is flagged unstable.
pub const UNSTABLE_MASS: f64 = 0.01;

/// `gamma_us = E(1/y) / E(1/y^2)` per cell (truncated to `|y| > epsilon`) and
/// `RRMSE = sqrt(mean(((y0 - gamma) / y0)^2))`.
pub fn rrmse(pred: &MarginalPredictions, y0: &DMatrix<f64>, mc_size: usize, seed: Seed, epsilon: Option<f64>) -> Result<Rrmse> {
    check_y0(&pred.mean, y0)?;
    let mut abs: Vec<f64> = y0.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let epsilon = epsilon.unwrap_or(1e-6 * sample_quantile(&abs, 0.5));
    if abs[0] <= epsilon {
        return Err(Error::InvalidParameter(format!(
            "RRMSE needs |y0| > {epsilon:e} in every cell; smallest is {:e}",
            abs[0]
        )));
    }
    let dist = StudentT::new(pred.dof).map_err(|e| Error::InvalidParameter(format!("t dof: {e}")))?;
    let mut rng = seed.named("rrmse", 0).stream();
    let draws: Vec<f64> = (0..mc_size.max(1)).map(|_| dist.sample(&mut rng)).collect();
    let (n0, k) = y0.shape();
    let mut unstable = Vec::new();
    let mut sum = 0.0;
    for u in 0..n0 {
        for s in 0..k {
            let m = pred.marginal(u, s);
            let gamma = if m.scale() == 0.0 {
                m.location
            } else {
                let opposite = if m.location >= 0.0 { m.cdf(0.0) } else { 1.0 - m.cdf(0.0) };
                if opposite > UNSTABLE_MASS {
                    unstable.push((u, s));
                }
                let (mut inv, mut inv2) = (0.0, 0.0);
                for z in &draws {
                    let y = m.location + m.scale() * z;
                    if y.abs() > epsilon {
                        inv += 1.0 / y;
                        inv2 += 1.0 / (y * y);
                    }
                }
                if inv2 > 0.0 {
                    inv / inv2
                } else {
                    m.location
                }
            };
            let rel = (y0[(u, s)] - gamma) / y0[(u, s)];
            sum += rel * rel;
        }
    }
    Ok(Rrmse {
        value: (sum / (n0 * k) as f64).sqrt(),
        epsilon,
        unstable_cells: unstable,
        mc_size,
        seed,
    })
}

/// `(theoretical t quantile, observed)` pairs for a QQ plot.
pub fn qq_data(values: &[f64], dof: f64) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| (standard_t_quantile((i as f64 + 0.5) / n, dof), v))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseOptions {
    pub alpha: f64,
    pub reference_size: usize,
    pub seed: Seed,
    /// Monte Carlo size for RRMSE; `None` skips RRMSE.
    pub rrmse_size: Option<usize>,
    pub rrmse_epsilon: Option<f64>,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            reference_size: 100_000,
            seed: Seed(0),
            rrmse_size: Some(10_000),
            rrmse_epsilon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticFlags {
    /// `U` outside the reference (2.5%, 97.5%) band.
    pub inadequate: bool,
    /// Coverage more than 3 binomial standard errors from `1 - alpha`.
    pub miscalibrated: bool,
    pub rrmse_unstable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub n0: usize,
    pub k: usize,
    pub dof: f64,
    /// Row-major `n0 x k`.
    pub individual_errors: Vec<Vec<f64>>,
    pub alpha: f64,
    pub coverage: f64,
    pub u: f64,
    pub u_reference: UReferenceSummary,
    /// Reference cdf at the observed `U`.
    pub u_tail: f64,
    pub uncorrelated_errors: Vec<f64>,
    pub jitter: f64,
    pub rmse: f64,
    pub rrmse: Option<Rrmse>,
    pub flags: DiagnosticFlags,
}

impl DiagnosticReport {
    pub fn adequate(&self) -> bool {
        !self.flags.inadequate
    }
}

/// Full diagnostic suite of `fit` on held-out runs.
pub fn diagnose(fit: &FittedEmulator, test: &Dataset, opts: &DiagnoseOptions) -> Result<DiagnosticReport> {
    check_alpha(opts.alpha)?;
    if test.variables() != fit.variables() || test.k() != fit.k() {
        return Err(Error::Schema("test dataset schema differs from the fitted schema".into()));
    }
    let pred = fit.predict(&test.points)?;
    let y0 = &test.y;
    let d = individual_errors(&pred, y0)?;
    let coverage = interval_coverage(&pred, y0, opts.alpha)?;
    let (u, jitter) = omnibus_u_with_jitter(&pred, y0)?;
    let (unc, dof) = uncorrelated_errors(&pred, y0)?;
    let reference = u_reference(pred.k(), pred.n0(), pred.dof(), opts.reference_size, opts.seed.named("reference", 0))?;
    let rrmse = match opts.rrmse_size {
        Some(size) => {
            let marg = fit.predict_marginals(&test.points)?;
            Some(rrmse(&marg, y0, size, opts.seed.named("rrmse", 0), opts.rrmse_epsilon)?)
        }
        None => None,
    };
    let cells = (pred.n0() * pred.k()) as f64;
    let se = (opts.alpha * (1.0 - opts.alpha) / cells).sqrt();
    let flags = DiagnosticFlags {
        inadequate: !reference.contains(u),
        miscalibrated: (coverage - (1.0 - opts.alpha)).abs() > 3.0 * se,
        rrmse_unstable: rrmse.as_ref().is_some_and(|r| !r.unstable_cells.is_empty()),
    };
    Ok(DiagnosticReport {
        n0: pred.n0(),
        k: pred.k(),
        dof,
        individual_errors: d.row_iter().map(|r| r.iter().copied().collect()).collect(),
        alpha: opts.alpha,
        coverage,
        u,
        u_reference: reference.summary(),
        u_tail: reference.cdf(u),
        uncorrelated_errors: unc,
        jitter,
        rmse: rmse(pred.q(), y0)?,
        rrmse,
        flags,
    })
}
