//! Conjugate fitting and prediction.
//!
//! Given correlation parameters, `(B, Sigma)` has an MNIW posterior
//!
//! ```text
//! Omega_hat = (H^T A^-1 H + Omega^-1)^-1
//! M_hat     = Omega_hat (H^T A^-1 Y + Omega^-1 M)
//! S_hat     = (Y - H M_hat)^T A^-1 (Y - H M_hat) + (M_hat - M)^T Omega^-1 (M_hat - M) + S
//! delta_hat = delta + n
//! ```
//!
//! and outputs at new inputs follow the matrix t `MT(Q, S_hat, R, delta_hat)` with
//!
//! ```text
//! Q = H0 M_hat + T^T A^-1 (Y - H M_hat)
//! R = A0 - T^T A^-1 T + (H0 - T^T A^-1 H) Omega_hat (H0 - T^T A^-1 H)^T
//! ```
//!
//! All solves go through the Cholesky factor `A = L L^T`; with `Hs = L^-1 H` and
//! `Ys = L^-1 Y` every quantity above is a product of whitened matrices. The
//! weak prior (`Omega^-1 = 0`, `S = 0`, `delta = -k + 1`) drops its terms
//! structurally rather than inverting a huge matrix.
//!
//! Correlation parameters are fixed at the mode of
//! `pi(r) pi(eta) pi(Y | r)`, found by multistart Nelder–Mead on
//! `(log r, log eta)`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cross_unchecked, row_scale_unchecked, CorrelationConfig, PairwiseDistances};
use crate::linalg::{symmetrize, Factor};
use crate::matvar::{ln_mv_gamma, MatrixTParams, MniwParams, UnivariateT, SPD_TOLERANCE};
use crate::meanfn::MeanFunction;
use crate::optim::NelderMead;
use crate::rng::{Seed, Stream};
use crate::schema::{Dataset, DatasetSchema, Point, VariableSchema};

const LN_PI: f64 = 1.144_729_885_849_400_2;

/// Relative pivot tolerance for `H^T A^-1 H` and the posterior precision.
pub const RANK_TOLERANCE: f64 = 1e-13;
/// Relative pivot tolerance for `S_hat`.
pub const S_HAT_TOLERANCE: f64 = 1e-14;

/// Bounds on `log r_l` during optimisation and random-walk sampling.
pub const LOG_R_BOUNDS: (f64, f64) = (-12.0, 10.0);
/// Bounds on `log eta`.
pub const LOG_ETA_BOUNDS: (f64, f64) = (-16.0, 8.0);

const PREDICT_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub enum PriorSpec {
    /// `M = 0`, `Omega^-1 = 0`, `S = 0`, `delta = -k + 1`.
    Weak,
    /// As `Weak` but with `Omega = n (H^T A^-1 H)^-1`.
    UnitInformation,
    Explicit(MniwParams),
}

impl PriorSpec {
    pub fn dof(&self, k: usize) -> f64 {
        match self {
            PriorSpec::Weak | PriorSpec::UnitInformation => 1.0 - k as f64,
            PriorSpec::Explicit(p) => p.dof,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PriorSpec::Weak => "weak",
            PriorSpec::UnitInformation => "unit-information",
            PriorSpec::Explicit(_) => "explicit",
        }
    }

    fn check(&self, n: usize, m: usize, k: usize) -> Result<()> {
        match self {
            PriorSpec::Weak | PriorSpec::UnitInformation => {
                if n < m + k {
                    return Err(Error::Propriety { n, m, k });
                }
            }
            PriorSpec::Explicit(p) => {
                if p.m.shape() != (m, k) {
                    return Err(Error::Dimension(format!(
                        "prior mean is {}x{}, model needs {m}x{k}",
                        p.m.nrows(),
                        p.m.ncols()
                    )));
                }
                if !(p.dof > 0.0) {
                    return Err(Error::ImproperPrior("explicit prior needs dof > 0".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmulatorKind {
    Lightweight,
    Gp,
    GpNugget,
}

impl EmulatorKind {
    pub fn has_nugget(self) -> bool {
        self == EmulatorKind::GpNugget
    }
}

/// `(M_hat, Omega_hat, S_hat, delta_hat)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub m_hat: DMatrix<f64>,
    pub omega_hat: DMatrix<f64>,
    pub s_hat: DMatrix<f64>,
    pub dof: f64,
}

impl Posterior {
    /// The posterior as MNIW parameters (for compositional sampling).
    pub fn mniw(&self) -> Result<MniwParams> {
        MniwParams::new(self.m_hat.clone(), self.omega_hat.clone(), self.s_hat.clone(), self.dof)
    }
}

struct Update {
    posterior: Posterior,
    /// Factor of `Omega_hat^-1`.
    prec: Factor,
    s_hat: Factor,
    /// `ln |Omega|` for the unit-information and explicit priors.
    log_det_omega: Option<f64>,
}

fn update(hs: &DMatrix<f64>, ys: &DMatrix<f64>, prior: &PriorSpec) -> Result<Update> {
    let (n, m) = hs.shape();
    let k = ys.ncols();
    prior.check(n, m, k)?;
    let g = symmetrize(&(hs.transpose() * hs));
    let b = hs.transpose() * ys;
    let (prec, m_hat, extra, log_det_omega) = match prior {
        PriorSpec::Weak | PriorSpec::UnitInformation => {
            let gf = Factor::relative(&g, "H^T A^-1 H", RANK_TOLERANCE).map_err(|_| Error::RankDeficient { m })?;
            let gls = gf.solve(&b);
            if let PriorSpec::Weak = prior {
                (gf, gls, None, None)
            } else {
                let nf = n as f64;
                let prec = Factor::relative(&(&g * ((nf + 1.0) / nf)), "posterior precision", RANK_TOLERANCE)
                    .map_err(|_| Error::RankDeficient { m })?;
                let m_hat = gls * (nf / (nf + 1.0));
                let extra = m_hat.transpose() * &g * &m_hat / nf;
                let log_det_omega = m as f64 * nf.ln() - gf.log_det();
                (prec, m_hat, Some(extra), Some(log_det_omega))
            }
        }
        PriorSpec::Explicit(p) => {
            let of = Factor::strict(&p.omega, "Omega", SPD_TOLERANCE)?;
            Factor::strict(&p.s, "S", SPD_TOLERANCE)?;
            let omega_inv = of.inverse();
            let prec = Factor::relative(&symmetrize(&(g + &omega_inv)), "posterior precision", RANK_TOLERANCE)
                .map_err(|_| Error::RankDeficient { m })?;
            let m_hat = prec.solve(&(b + &omega_inv * &p.m));
            let d = &m_hat - &p.m;
            let extra = d.transpose() * &omega_inv * &d + &p.s;
            (prec, m_hat, Some(extra), Some(of.log_det()))
        }
    };
    let resid = ys - hs * &m_hat;
    let mut s_hat = resid.transpose() * &resid;
    if let Some(e) = extra {
        s_hat += e;
    }
    let s_hat = symmetrize(&s_hat);
    let sf = Factor::relative(&s_hat, "S_hat", S_HAT_TOLERANCE)?;
    let omega_hat = prec.inverse();
    Ok(Update {
        posterior: Posterior {
            m_hat,
            omega_hat,
            s_hat,
            dof: prior.dof(k) + n as f64,
        },
        prec,
        s_hat: sf,
        log_det_omega,
    })
}

/// Log marginal likelihood `ln pi(Y | r)`. Under the weak and
/// unit-information priors the prior normalising terms (`Gamma_k(0)`,
/// `|S| = 0`) are dropped; they are common to every model and every `r`.
/// Under the weak prior `-(k/2) ln |Omega|` is dropped as well, so values are
/// comparable across `r` but not across mean functions.
fn log_ml(u: &Update, log_det_a: f64, n: usize, k: usize, prior: &PriorSpec) -> f64 {
    let kf = k as f64;
    let dof_hat = u.posterior.dof;
    let mut l = ln_mv_gamma(k, 0.5 * (kf + dof_hat - 1.0)) - 0.5 * (n * k) as f64 * LN_PI - 0.5 * kf * log_det_a
        - 0.5 * kf * u.prec.log_det()
        - 0.5 * (dof_hat + kf - 1.0) * u.s_hat.log_det();
    if let Some(ld) = u.log_det_omega {
        l -= 0.5 * kf * ld;
    }
    if let PriorSpec::Explicit(p) = prior {
        let ls = Factor::strict(&p.s, "S", SPD_TOLERANCE).map(|f| f.log_det()).unwrap_or(f64::NEG_INFINITY);
        l += -ln_mv_gamma(k, 0.5 * (kf + p.dof - 1.0)) + 0.5 * (p.dof + kf - 1.0) * ls;
    }
    l
}

/// Unnormalised log prior of correlation parameters: `r_l ~ Exp(1)` and
/// `pi(eta) = (1 + eta^2)^-1`.
pub fn log_prior_r(r: &[f64], eta: f64) -> f64 {
    -r.iter().sum::<f64>() - (1.0 + eta * eta).ln()
}

/// MNIW posterior for a given row scale `A`.
pub fn posterior_update(y: &DMatrix<f64>, h: &DMatrix<f64>, a: &DMatrix<f64>, prior: &PriorSpec) -> Result<Posterior> {
    check_shapes(y, h, a)?;
    let f = Factor::new(a, "A")?;
    Ok(update(&f.solve_lower(h), &f.solve_lower(y), prior)?.posterior)
}

/// `ln pi(Y | A)` for a given row scale.
pub fn log_marginal_likelihood_given(
    y: &DMatrix<f64>,
    h: &DMatrix<f64>,
    a: &DMatrix<f64>,
    prior: &PriorSpec,
) -> Result<f64> {
    check_shapes(y, h, a)?;
    let f = Factor::new(a, "A")?;
    let u = update(&f.solve_lower(h), &f.solve_lower(y), prior)?;
    Ok(log_ml(&u, f.log_det(), y.nrows(), y.ncols(), prior))
}

fn check_shapes(y: &DMatrix<f64>, h: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<()> {
    if h.nrows() != y.nrows() || a.nrows() != y.nrows() || a.ncols() != y.nrows() {
        return Err(Error::Dimension(format!(
            "Y is {}x{}, H is {}x{}, A is {}x{}",
            y.nrows(),
            y.ncols(),
            h.nrows(),
            h.ncols(),
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

/// Log marginal likelihood of a mean function under a correlation config.
pub fn log_marginal_likelihood(dataset: &Dataset, meanfn: &MeanFunction, cfg: &CorrelationConfig, prior: &PriorSpec) -> Result<f64> {
    let schema = dataset.variables();
    let h = meanfn.expand(&dataset.points, schema)?;
    if cfg.is_lightweight() {
        let u = update(&h, &dataset.y, prior)?;
        return Ok(log_ml(&u, 0.0, dataset.n(), dataset.k(), prior));
    }
    let a = crate::kernel::build_row_scale(&dataset.points, cfg, schema)?;
    log_marginal_likelihood_given(&dataset.y, &h, &a, prior)
}

/// `ln pi(r) + ln pi(eta) + ln pi(Y | r)`, up to an additive constant.
pub fn log_marginal_posterior_r(dataset: &Dataset, meanfn: &MeanFunction, prior: &PriorSpec, cfg: &CorrelationConfig) -> Result<f64> {
    let lml = log_marginal_likelihood(dataset, meanfn, cfg, prior)?;
    Ok(lml + if cfg.is_lightweight() { 0.0 } else { log_prior_r(cfg.r(), cfg.eta()) })
}

/// Repeated evaluation of the marginal posterior of `(r, eta)` for fixed data,
/// parameterised by `theta = (log r_1, ..., log r_p[, log eta])`.
#[derive(Debug, Clone)]
pub struct MarginalPosterior {
    distances: PairwiseDistances,
    h: DMatrix<f64>,
    y: DMatrix<f64>,
    prior: PriorSpec,
    p: usize,
    nugget: bool,
}

impl MarginalPosterior {
    pub fn new(dataset: &Dataset, meanfn: &MeanFunction, prior: &PriorSpec, nugget: bool) -> Result<Self> {
        let schema = dataset.variables();
        let h = meanfn.expand(&dataset.points, schema)?;
        prior.check(dataset.n(), h.ncols(), dataset.k())?;
        Ok(Self {
            distances: PairwiseDistances::new(&dataset.points, schema)?,
            h,
            y: dataset.y.clone(),
            prior: prior.clone(),
            p: schema.p(),
            nugget,
        })
    }

    pub fn dim(&self) -> usize {
        self.p + usize::from(self.nugget)
    }

    pub fn has_nugget(&self) -> bool {
        self.nugget
    }

    pub fn in_bounds(&self, theta: &[f64]) -> bool {
        theta.iter().enumerate().all(|(i, t)| {
            let (lo, hi) = if i < self.p { LOG_R_BOUNDS } else { LOG_ETA_BOUNDS };
            *t >= lo && *t <= hi
        })
    }

    pub fn config(&self, theta: &[f64]) -> CorrelationConfig {
        let r = theta[..self.p].iter().map(|t| t.exp()).collect();
        let eta = if self.nugget { theta[self.p].exp() } else { 0.0 };
        CorrelationConfig::PowerExponential { r, eta }
    }

    pub fn theta(&self, cfg: &CorrelationConfig) -> Vec<f64> {
        let mut t: Vec<f64> = cfg.r().iter().map(|r| r.ln()).collect();
        if self.nugget {
            t.push(cfg.eta().ln());
        }
        t
    }

    /// Log marginal posterior density of `(r, eta)`; `-inf` outside the
    /// bounds or when a factorisation fails.
    pub fn log_posterior(&self, theta: &[f64]) -> f64 {
        if theta.len() != self.dim() || !self.in_bounds(theta) {
            return f64::NEG_INFINITY;
        }
        let cfg = self.config(theta);
        self.log_posterior_at(cfg.r(), cfg.eta()).unwrap_or(f64::NEG_INFINITY)
    }

    /// Density of `theta` itself (includes the Jacobian of the log transform),
    /// the target for random-walk samplers on the log scale.
    pub fn log_posterior_theta(&self, theta: &[f64]) -> f64 {
        let lp = self.log_posterior(theta);
        if lp.is_finite() {
            lp + theta.iter().sum::<f64>()
        } else {
            lp
        }
    }

    pub fn log_posterior_at(&self, r: &[f64], eta: f64) -> Result<f64> {
        let a = self.distances.row_scale(r, eta);
        let f = Factor::new(&a, "A")?;
        let u = update(&f.solve_lower(&self.h), &f.solve_lower(&self.y), &self.prior)?;
        let v = log_ml(&u, f.log_det(), self.y.nrows(), self.y.ncols(), &self.prior) + log_prior_r(r, eta);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NotPositiveDefinite("S_hat".into()))
        }
    }

    /// A starting point drawn from the prior and clamped into the bounds.
    pub fn draw_start(&self, rng: &mut Stream) -> Vec<f64> {
        let mut t: Vec<f64> = (0..self.p)
            .map(|_| {
                let r: f64 = Exp1.sample(rng);
                r.ln().clamp(LOG_R_BOUNDS.0, LOG_R_BOUNDS.1)
            })
            .collect();
        if self.nugget {
            let u: f64 = rng.random();
            let eta = (std::f64::consts::FRAC_PI_2 * u).tan();
            t.push(eta.ln().clamp(LOG_ETA_BOUNDS.0, LOG_ETA_BOUNDS.1));
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub starts: usize,
    pub max_evals: usize,
    pub seed: Seed,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 10,
            max_evals: 500,
            seed: Seed(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartTrace {
    pub initial: Vec<f64>,
    pub optimum: Vec<f64>,
    /// `None` when no finite value was found.
    pub log_posterior: Option<f64>,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub seed: Seed,
    pub best_start: usize,
    pub starts: Vec<StartTrace>,
}

/// Plug-in emulator: the conditional posterior at fixed correlation parameters.
#[derive(Debug, Clone)]
pub struct FittedEmulator {
    schema: DatasetSchema,
    meanfn: MeanFunction,
    cfg: CorrelationConfig,
    prior: PriorSpec,
    points: Vec<Point>,
    y: DMatrix<f64>,
    dense: bool,
    factor: Factor,
    hs: DMatrix<f64>,
    ys: DMatrix<f64>,
    alpha: DMatrix<f64>,
    prec: Factor,
    posterior: Posterior,
    log_marginal_posterior: f64,
    trace: Option<FitTrace>,
}

/// Fits at fixed correlation parameters.
pub fn fit_at(dataset: &Dataset, meanfn: &MeanFunction, cfg: &CorrelationConfig, prior: &PriorSpec) -> Result<FittedEmulator> {
    FittedEmulator::build(dataset, meanfn, cfg, prior, false)
}

/// As [`fit_at`] but always through the general (explicit `A`, `T`, `A0`) code
/// path, even for the lightweight configuration.
pub fn fit_at_dense(dataset: &Dataset, meanfn: &MeanFunction, cfg: &CorrelationConfig, prior: &PriorSpec) -> Result<FittedEmulator> {
    FittedEmulator::build(dataset, meanfn, cfg, prior, true)
}

/// Fits the emulator, estimating `r` (and `eta`) at the marginal posterior mode
/// for the GP kinds.
pub fn fit(dataset: &Dataset, meanfn: &MeanFunction, prior: &PriorSpec, kind: EmulatorKind, opts: &FitOptions) -> Result<FittedEmulator> {
    if kind == EmulatorKind::Lightweight {
        return fit_at(dataset, meanfn, &CorrelationConfig::Lightweight, prior);
    }
    let obj = MarginalPosterior::new(dataset, meanfn, prior, kind.has_nugget())?;
    let nm = NelderMead {
        max_evals: opts.max_evals,
        ..NelderMead::default()
    };
    let starts: Vec<StartTrace> = (0..opts.starts.max(1))
        .into_par_iter()
        .map(|s| {
            let mut rng = opts.seed.named("fit-start", s as u64).stream();
            let initial = obj.draw_start(&mut rng);
            let m = nm.minimise(|t| -obj.log_posterior(t), &initial);
            let lp = -m.value;
            StartTrace {
                initial,
                optimum: m.x,
                log_posterior: lp.is_finite().then_some(lp),
                evaluations: m.evaluations,
                converged: m.converged,
            }
        })
        .collect();
    let best = starts
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.log_posterior.map(|v| (i, v)))
        .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((i, v)),
        });
    let Some((best_start, _)) = best else {
        return Err(Error::Optimisation {
            starts: starts.len(),
            best_log_posterior: f64::NEG_INFINITY,
        });
    };
    let cfg = obj.config(&starts[best_start].optimum);
    let fitted = fit_at(dataset, meanfn, &cfg, prior)?;
    Ok(fitted.with_trace(FitTrace {
        seed: opts.seed,
        best_start,
        starts,
    }))
}

impl FittedEmulator {
    fn build(dataset: &Dataset, meanfn: &MeanFunction, cfg: &CorrelationConfig, prior: &PriorSpec, dense: bool) -> Result<Self> {
        let schema = dataset.variables();
        if let CorrelationConfig::PowerExponential { .. } = cfg {
            // validates lengths and signs
            crate::kernel::build_row_scale(&dataset.points[..1], cfg, schema)?;
        }
        let h = meanfn.expand(&dataset.points, schema)?;
        let (n, k) = (dataset.n(), dataset.k());
        let (factor, hs, ys) = if cfg.is_lightweight() && !dense {
            (Factor::identity(n), h, dataset.y.clone())
        } else {
            let a = row_scale_unchecked(&dataset.points, cfg, schema.p1());
            let f = Factor::new(&a, "A")?;
            let hs = f.solve_lower(&h);
            let ys = f.solve_lower(&dataset.y);
            (f, hs, ys)
        };
        let u = update(&hs, &ys, prior)?;
        let log_det_a = if cfg.is_lightweight() && !dense { 0.0 } else { factor.log_det() };
        let mut lmp = log_ml(&u, log_det_a, n, k, prior);
        if !cfg.is_lightweight() {
            lmp += log_prior_r(cfg.r(), cfg.eta());
        }
        let resid = &ys - &hs * &u.posterior.m_hat;
        let alpha = if cfg.is_lightweight() && !dense { resid } else { factor.solve_upper(&resid) };
        Ok(Self {
            schema: dataset.schema.clone(),
            meanfn: meanfn.clone(),
            cfg: cfg.clone(),
            prior: prior.clone(),
            points: dataset.points.clone(),
            y: dataset.y.clone(),
            dense,
            factor,
            hs,
            ys,
            alpha,
            prec: u.prec,
            posterior: u.posterior,
            log_marginal_posterior: lmp,
            trace: None,
        })
    }

    pub fn with_trace(mut self, trace: FitTrace) -> Self {
        self.trace = Some(trace);
        self
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn variables(&self) -> &VariableSchema {
        &self.schema.variables
    }

    pub fn meanfn(&self) -> &MeanFunction {
        &self.meanfn
    }

    pub fn config(&self) -> &CorrelationConfig {
        &self.cfg
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn k(&self) -> usize {
        self.y.ncols()
    }

    pub fn posterior(&self) -> &Posterior {
        &self.posterior
    }

    pub fn is_dense(&self) -> bool {
        self.dense
    }

    /// Diagonal jitter added to `A` (0 when none was needed).
    pub fn jitter(&self) -> f64 {
        self.factor.jitter()
    }

    pub fn log_marginal_posterior(&self) -> f64 {
        self.log_marginal_posterior
    }

    pub fn trace(&self) -> Option<&FitTrace> {
        self.trace.as_ref()
    }

    fn fast_lightweight(&self) -> bool {
        self.cfg.is_lightweight() && !self.dense
    }

    fn check_new(&self, new_points: &[Point]) -> Result<()> {
        if new_points.is_empty() {
            return Err(Error::Dimension("no prediction points".into()));
        }
        new_points.iter().try_for_each(|p| self.variables().check_point(p))
    }

    /// `(Q, D = H0 - T^T A^-1 H, W = L^-1 T)`; `W` is `None` on the lightweight path.
    fn pieces(&self, new_points: &[Point]) -> (DMatrix<f64>, DMatrix<f64>, Option<DMatrix<f64>>) {
        let h0 = self.meanfn.expand_unchecked(new_points);
        let mut q = &h0 * &self.posterior.m_hat;
        if self.fast_lightweight() {
            return (q, h0, None);
        }
        let t = cross_unchecked(&self.points, new_points, &self.cfg, self.variables().p1());
        q += t.transpose() * &self.alpha;
        let w = self.factor.solve_lower(&t);
        let d = h0 - w.transpose() * &self.hs;
        (q, d, Some(w))
    }

    /// Full matrix-t posterior predictive at `new_points`.
    pub fn predict(&self, new_points: &[Point]) -> Result<PredictiveDistribution> {
        self.check_new(new_points)?;
        let (q, d, w) = self.pieces(new_points);
        let a0 = row_scale_unchecked(new_points, &self.cfg, self.variables().p1());
        let v = self.prec.solve_lower(&d.transpose());
        let mut r = a0 + v.transpose() * &v;
        if let Some(w) = w {
            r -= w.transpose() * &w;
        }
        let r = symmetrize(&r);
        Ok(PredictiveDistribution {
            points: new_points.to_vec(),
            params: MatrixTParams::new(q, self.posterior.s_hat.clone(), r, self.posterior.dof)?,
        })
    }

    /// Means and marginal scales only (no `n0 x n0` row scale).
    pub fn predict_marginals(&self, new_points: &[Point]) -> Result<MarginalPredictions> {
        self.check_new(new_points)?;
        let chunks: Vec<(DMatrix<f64>, Vec<f64>)> = new_points
            .par_chunks(PREDICT_CHUNK)
            .map(|chunk| {
                let (q, d, w) = self.pieces(chunk);
                let v = self.prec.solve_lower(&d.transpose());
                let eta = self.cfg.eta();
                let r = (0..chunk.len())
                    .map(|u| {
                        let mut r = 1.0 + eta + v.column(u).norm_squared();
                        if let Some(w) = &w {
                            r -= w.column(u).norm_squared();
                        }
                        r
                    })
                    .collect();
                (q, r)
            })
            .collect();
        let mean = stack_rows(chunks.iter().map(|c| &c.0), new_points.len(), self.k());
        let r_diag = chunks.into_iter().flat_map(|c| c.1).collect();
        Ok(MarginalPredictions {
            mean,
            r_diag,
            s_diag: self.posterior.s_hat.diagonal().iter().copied().collect(),
            dof: self.posterior.dof,
        })
    }

    pub(crate) fn alpha(&self) -> &DMatrix<f64> {
        &self.alpha
    }

    /// Posterior predictive mean `Q` at `new_points`.
    pub fn mean_at(&self, new_points: &[Point]) -> Result<DMatrix<f64>> {
        self.check_new(new_points)?;
        Ok(self.mean_unchecked(new_points, &self.posterior.m_hat, &self.alpha))
    }

    /// `h(x)^T B + t(x)^T alpha` for arbitrary coefficients.
    pub(crate) fn mean_unchecked(&self, new_points: &[Point], b: &DMatrix<f64>, alpha: &DMatrix<f64>) -> DMatrix<f64> {
        let blocks: Vec<DMatrix<f64>> = new_points
            .par_chunks(PREDICT_CHUNK)
            .map(|chunk| {
                let mut q = self.meanfn.expand_unchecked(chunk) * b;
                if !self.fast_lightweight() {
                    let t = cross_unchecked(&self.points, chunk, &self.cfg, self.variables().p1());
                    q += t.transpose() * alpha;
                }
                q
            })
            .collect();
        stack_rows(blocks.iter(), new_points.len(), self.k())
    }

    /// One draw of `(B, Sigma)` from the posterior, returned as the conditional
    /// mean surface `h(x)^T B + t(x)^T A^-1 (Y - H B)`.
    pub fn sample_surface(&self, rng: &mut Stream) -> Result<SampledSurface> {
        let sampler = self.posterior.mniw()?.sampler()?;
        let (b, _) = sampler.sample(rng);
        let resid = &self.ys - &self.hs * &b;
        let alpha = if self.fast_lightweight() { resid } else { self.factor.solve_upper(&resid) };
        Ok(SampledSurface { b, alpha })
    }

    pub fn surface_mean_at(&self, surface: &SampledSurface, new_points: &[Point]) -> Result<DMatrix<f64>> {
        self.check_new(new_points)?;
        Ok(self.mean_unchecked(new_points, &surface.b, &surface.alpha))
    }
}

fn stack_rows<'a>(blocks: impl Iterator<Item = &'a DMatrix<f64>>, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    out
}

/// Coefficients of one sampled conditional mean surface.
#[derive(Debug, Clone)]
pub struct SampledSurface {
    pub b: DMatrix<f64>,
    alpha: DMatrix<f64>,
}

impl SampledSurface {
    pub(crate) fn alpha(&self) -> &DMatrix<f64> {
        &self.alpha
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub points: Vec<Point>,
    pub params: MatrixTParams,
}

impl PredictiveDistribution {
    pub fn q(&self) -> &DMatrix<f64> {
        &self.params.location
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.params.row_scale
    }

    pub fn s_hat(&self) -> &DMatrix<f64> {
        &self.params.col_scale
    }

    pub fn dof(&self) -> f64 {
        self.params.dof
    }

    pub fn n0(&self) -> usize {
        self.params.rows()
    }

    pub fn k(&self) -> usize {
        self.params.cols()
    }

    pub fn marginal(&self, u: usize, s: usize) -> Result<UnivariateT> {
        self.params.marginal(u, s)
    }
}

/// Per-cell univariate t predictives.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPredictions {
    pub mean: DMatrix<f64>,
    pub r_diag: Vec<f64>,
    pub s_diag: Vec<f64>,
    pub dof: f64,
}

impl MarginalPredictions {
    pub fn marginal(&self, u: usize, s: usize) -> UnivariateT {
        UnivariateT {
            location: self.mean[(u, s)],
            sq_scale: (self.r_diag[u] * self.s_diag[s] / self.dof).max(0.0),
            dof: self.dof,
        }
    }
}
