//! Correlation over mixed continuous/categorical inputs.
//!
//! Squared-exponential in each scaled continuous coordinate and an
//! exchangeable indicator for each categorical coordinate:
//!
//! ```text
//! c(x, x'; r) = exp{ -sum_{l <= p1} r_l (x_l - x'_l)^2 - sum_{l > p1} r_l 1(x_l != x'_l) }
//! ```
//!
//! The nugget `eta` is added to the diagonal of the row scale of a single
//! point set (`A`, `A0`) and never to the cross-correlation `T`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Point, VariableSchema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum CorrelationConfig {
    /// Independent runs: `A = I`, `T = 0`.
    Lightweight,
    /// Power-exponential with exponent 2 on continuous inputs.
    PowerExponential { r: Vec<f64>, eta: f64 },
}

impl CorrelationConfig {
    pub fn power_exponential(r: Vec<f64>, eta: f64) -> Result<Self> {
        if r.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("correlation parameters must be finite and >= 0".into()));
        }
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::InvalidParameter(format!("nugget must be finite and >= 0, got {eta}")));
        }
        Ok(Self::PowerExponential { r, eta })
    }

    pub fn is_lightweight(&self) -> bool {
        matches!(self, Self::Lightweight)
    }

    pub fn r(&self) -> &[f64] {
        match self {
            Self::Lightweight => &[],
            Self::PowerExponential { r, .. } => r,
        }
    }

    pub fn eta(&self) -> f64 {
        match self {
            Self::Lightweight => 0.0,
            Self::PowerExponential { eta, .. } => *eta,
        }
    }

    /// `rho_l = exp(-r_l)`, the unit-interval reparameterisation.
    pub fn rho(&self) -> Vec<f64> {
        self.r().iter().map(|r| (-r).exp()).collect()
    }

    fn validate(&self, schema: &VariableSchema) -> Result<()> {
        if let Self::PowerExponential { r, eta } = self {
            if r.len() != schema.p() {
                return Err(Error::Schema(format!("{} correlation parameters for {} variables", r.len(), schema.p())));
            }
            if r.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidParameter("correlation parameters must be >= 0".into()));
            }
            if !(*eta >= 0.0) {
                return Err(Error::InvalidParameter("nugget must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// The lightweight configuration (explicit mode, not an `r -> infinity` limit).
pub fn lightweight_config(_schema: &VariableSchema) -> CorrelationConfig {
    CorrelationConfig::Lightweight
}

#[inline]
fn distance_exponent(x1: &[f64], x2: &[f64], r: &[f64], p1: usize) -> f64 {
    let mut s = 0.0;
    for l in 0..p1 {
        let d = x1[l] - x2[l];
        s += r[l] * d * d;
    }
    for l in p1..r.len() {
        if x1[l] != x2[l] {
            s += r[l];
        }
    }
    s
}

/// Correlation of two conforming points; never includes the nugget.
pub fn correlation(x1: &[f64], x2: &[f64], cfg: &CorrelationConfig, schema: &VariableSchema) -> Result<f64> {
    cfg.validate(schema)?;
    schema.check_point(x1)?;
    schema.check_point(x2)?;
    match cfg {
        CorrelationConfig::Lightweight => Err(Error::InvalidParameter(
            "lightweight correlation is defined by run identity, not coordinates".into(),
        )),
        CorrelationConfig::PowerExponential { r, .. } => Ok((-distance_exponent(x1, x2, r, schema.p1())).exp()),
    }
}

fn check_points(points: &[Point], schema: &VariableSchema) -> Result<()> {
    points.iter().try_for_each(|p| schema.check_point(p))
}

/// Row scale `A` of one point set (nugget on the diagonal).
pub fn build_row_scale(points: &[Point], cfg: &CorrelationConfig, schema: &VariableSchema) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return Err(Error::Dimension("row scale needs at least one point".into()));
    }
    cfg.validate(schema)?;
    check_points(points, schema)?;
    Ok(row_scale_unchecked(points, cfg, schema.p1()))
}

pub(crate) fn row_scale_unchecked(points: &[Point], cfg: &CorrelationConfig, p1: usize) -> DMatrix<f64> {
    let n = points.len();
    match cfg {
        CorrelationConfig::Lightweight => DMatrix::identity(n, n),
        CorrelationConfig::PowerExponential { r, eta } => {
            let mut a = DMatrix::zeros(n, n);
            for i in 0..n {
                a[(i, i)] = 1.0 + eta;
                for j in 0..i {
                    let c = (-distance_exponent(&points[i], &points[j], r, p1)).exp();
                    a[(i, j)] = c;
                    a[(j, i)] = c;
                }
            }
            a
        }
    }
}

/// Cross-correlation `T` (`n x n0`) between training and prediction points.
pub fn build_cross(
    points: &[Point],
    new_points: &[Point],
    cfg: &CorrelationConfig,
    schema: &VariableSchema,
) -> Result<DMatrix<f64>> {
    cfg.validate(schema)?;
    check_points(points, schema)?;
    check_points(new_points, schema)?;
    Ok(cross_unchecked(points, new_points, cfg, schema.p1()))
}

pub(crate) fn cross_unchecked(points: &[Point], new_points: &[Point], cfg: &CorrelationConfig, p1: usize) -> DMatrix<f64> {
    match cfg {
        CorrelationConfig::Lightweight => DMatrix::zeros(points.len(), new_points.len()),
        CorrelationConfig::PowerExponential { r, .. } => DMatrix::from_fn(points.len(), new_points.len(), |i, u| {
            (-distance_exponent(&points[i], &new_points[u], r, p1)).exp()
        }),
    }
}

/// Per-pair, per-dimension distance terms of a fixed point set, so that
/// repeated builds of `A` for different `(r, eta)` cost one dot product per pair.
#[derive(Debug, Clone)]
pub struct PairwiseDistances {
    n: usize,
    p: usize,
    /// `terms[pair * p + l]` for pairs `(i, j)`, `j < i`, in row order.
    terms: Vec<f64>,
}

impl PairwiseDistances {
    pub fn new(points: &[Point], schema: &VariableSchema) -> Result<Self> {
        check_points(points, schema)?;
        let n = points.len();
        let p = schema.p();
        let p1 = schema.p1();
        let mut terms = Vec::with_capacity(n * n.saturating_sub(1) / 2 * p);
        for i in 0..n {
            for j in 0..i {
                for l in 0..p {
                    let (a, b) = (points[i][l], points[j][l]);
                    terms.push(if l < p1 {
                        (a - b) * (a - b)
                    } else if a != b {
                        1.0
                    } else {
                        0.0
                    });
                }
            }
        }
        Ok(Self { n, p, terms })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Builds `A` for power-exponential parameters `r` and nugget `eta`.
    pub fn row_scale(&self, r: &[f64], eta: f64) -> DMatrix<f64> {
        debug_assert_eq!(r.len(), self.p);
        let mut a = DMatrix::zeros(self.n, self.n);
        let mut chunks = self.terms.chunks_exact(self.p.max(1));
        for i in 0..self.n {
            a[(i, i)] = 1.0 + eta;
            for j in 0..i {
                let d = if self.p == 0 {
                    0.0
                } else {
                    chunks.next().expect("pair terms").iter().zip(r).map(|(t, r)| t * r).sum::<f64>()
                };
                let c = (-d).exp();
                a[(i, j)] = c;
                a[(j, i)] = c;
            }
        }
        a
    }
}
