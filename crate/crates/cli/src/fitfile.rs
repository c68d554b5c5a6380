//! Versioned JSON form of a fitted emulator.
//!
//! The file stores the training data in internal coordinates together with
//! the fitted correlation parameters and the posterior. Loading rebuilds the
//! emulator from the data and checks the recomputed posterior against the
//! stored one.

use std::path::Path;

use mvemu::emulator::{fit_at, fit_at_dense, EmulatorKind, FitTrace, FittedEmulator, PriorSpec};
use mvemu::kernel::CorrelationConfig;
use mvemu::matvar::MniwParams;
use mvemu::meanfn::{MeanFunction, TermDescriptor};
use mvemu::schema::{Dataset, DatasetSchema, Point};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{from_rows, read_json, to_rows};

pub const FORMAT: &str = "mvemu-fit";
pub const VERSION: u32 = 1;
const RELOAD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PriorFile {
    Weak,
    UnitInformation,
    Explicit {
        m: Vec<Vec<f64>>,
        omega: Vec<Vec<f64>>,
        s: Vec<Vec<f64>>,
        dof: f64,
    },
}

impl PriorFile {
    pub fn from_spec(p: &PriorSpec) -> Self {
        match p {
            PriorSpec::Weak => PriorFile::Weak,
            PriorSpec::UnitInformation => PriorFile::UnitInformation,
            PriorSpec::Explicit(q) => PriorFile::Explicit {
                m: to_rows(&q.m),
                omega: to_rows(&q.omega),
                s: to_rows(&q.s),
                dof: q.dof,
            },
        }
    }

    pub fn to_spec(&self) -> CliResult<PriorSpec> {
        Ok(match self {
            PriorFile::Weak => PriorSpec::Weak,
            PriorFile::UnitInformation => PriorSpec::UnitInformation,
            PriorFile::Explicit { m, omega, s, dof } => {
                let k = m.first().map_or(0, Vec::len);
                PriorSpec::Explicit(MniwParams::new(
                    from_rows(m, k)?,
                    from_rows(omega, m.len())?,
                    from_rows(s, k)?,
                    *dof,
                )?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorFile {
    pub m_hat: Vec<Vec<f64>>,
    pub omega_hat: Vec<Vec<f64>>,
    pub s_hat: Vec<Vec<f64>>,
    pub dof: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub format: String,
    pub version: u32,
    pub kind: EmulatorKind,
    /// Lightweight fits evaluated through the general dense path.
    #[serde(default)]
    pub dense: bool,
    pub schema: DatasetSchema,
    pub mean: Vec<TermDescriptor>,
    pub prior: PriorFile,
    pub correlation: CorrelationConfig,
    /// Training inputs in internal order (continuous scaled to [0, 1], then level indices).
    pub points: Vec<Point>,
    pub outputs: Vec<Vec<f64>>,
    pub posterior: PosteriorFile,
    pub log_marginal_posterior: f64,
    pub jitter: f64,
    #[serde(default)]
    pub trace: Option<FitTrace>,
}

pub fn kind_of(cfg: &CorrelationConfig) -> EmulatorKind {
    match cfg {
        CorrelationConfig::Lightweight => EmulatorKind::Lightweight,
        CorrelationConfig::PowerExponential { eta, .. } if *eta > 0.0 => EmulatorKind::GpNugget,
        CorrelationConfig::PowerExponential { .. } => EmulatorKind::Gp,
    }
}

impl FitFile {
    pub fn new(fit: &FittedEmulator, kind: EmulatorKind) -> Self {
        let post = fit.posterior();
        FitFile {
            format: FORMAT.into(),
            version: VERSION,
            kind,
            dense: fit.is_dense(),
            schema: fit.schema().clone(),
            mean: fit.meanfn().descriptors(fit.variables()),
            prior: PriorFile::from_spec(fit.prior()),
            correlation: fit.config().clone(),
            points: fit.points().to_vec(),
            outputs: to_rows(fit.y()),
            posterior: PosteriorFile {
                m_hat: to_rows(&post.m_hat),
                omega_hat: to_rows(&post.omega_hat),
                s_hat: to_rows(&post.s_hat),
                dof: post.dof,
            },
            log_marginal_posterior: fit.log_marginal_posterior(),
            jitter: fit.jitter(),
            trace: fit.trace().cloned(),
        }
    }

    pub fn dataset(&self) -> CliResult<Dataset> {
        let y = from_rows(&self.outputs, self.schema.k())?;
        Ok(Dataset::new(self.schema.clone(), self.points.clone(), y)?)
    }

    pub fn meanfn(&self) -> CliResult<MeanFunction> {
        Ok(MeanFunction::from_descriptors(&self.mean, &self.schema.variables)?)
    }

    /// Rebuilds the emulator and checks it reproduces the stored posterior.
    pub fn rebuild(&self) -> CliResult<FittedEmulator> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(CliError::Mismatch(format!(
                "unsupported fit file {} v{} (expected {FORMAT} v{VERSION})",
                self.format, self.version
            )));
        }
        let data = self.dataset()?;
        let mf = self.meanfn()?;
        let prior = self.prior.to_spec()?;
        let build = if self.dense { fit_at_dense } else { fit_at };
        let mut fit = build(&data, &mf, &self.correlation, &prior)?;
        let post = fit.posterior();
        let checks = [
            ("m_hat", &post.m_hat, &self.posterior.m_hat),
            ("omega_hat", &post.omega_hat, &self.posterior.omega_hat),
            ("s_hat", &post.s_hat, &self.posterior.s_hat),
        ];
        for (name, got, stored) in checks {
            let stored = from_rows(stored, got.ncols())?;
            check_close(name, got, &stored)?;
        }
        if (post.dof - self.posterior.dof).abs() > 0.0 {
            return Err(CliError::Mismatch("posterior dof differs from the stored value".into()));
        }
        if let Some(t) = &self.trace {
            fit = fit.with_trace(t.clone());
        }
        Ok(fit)
    }
}

fn check_close(name: &str, got: &DMatrix<f64>, stored: &DMatrix<f64>) -> CliResult<()> {
    if got.shape() != stored.shape() {
        return Err(CliError::Mismatch(format!("stored {name} has the wrong shape")));
    }
    let scale = stored.amax().max(1.0);
    let diff = (got - stored).amax();
    if diff > RELOAD_TOLERANCE * scale {
        return Err(CliError::Mismatch(format!(
            "recomputed {name} differs from the stored value by {diff:e}"
        )));
    }
    Ok(())
}

pub fn load_fit(path: &Path) -> CliResult<FittedEmulator> {
    read_json::<FitFile>(path)?.rebuild()
}
