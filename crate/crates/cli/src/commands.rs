//! Subcommands, their options, and execution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvemu::design::{self, DesignSpec};
use mvemu::diagnostics::{diagnose, qq_data, uncorrelated_errors, DiagnoseOptions};
use mvemu::emulator::{fit, EmulatorKind, FitOptions, PriorSpec};
use mvemu::meanfn::{MeanFunction, ModelSpace, TermDescriptor};
use mvemu::modelsel::{mc3_run, Mc3Options, ModelPosteriorReport};
use mvemu::rdvs::{rdvs_run, RdvsOptions};
use mvemu::rng::Seed;
use mvemu::schema::{Dataset, RawValue, VariableSchema};
use mvemu::sensitivity::{
    conditional_main_effects, default_grid, main_effect, sobol_indices, EffectCurve, EmulatorSurface, InputDistribution,
    Pairs, SensitivityResult, SobolMode, SobolOptions,
};
use mvemu::simbench::SyntheticSimulator;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::fitfile::{load_fit, FitFile};
use crate::io::{
    fmt_f64, inputs_csv, load_dataset, matrix_csv, read_inputs, read_json, read_schema, rows_csv, to_rows, write_json,
    write_text,
};
use crate::manifest::{self, RunManifest, MANIFEST_FORMAT};

pub const DEFAULT_SENSITIVITY_MC: usize = 10_000;
pub const DEFAULT_REFERENCE_MC: usize = 100_000;
pub const DEFAULT_RRMSE_MC: usize = 10_000;

#[derive(Debug, Parser)]
#[command(name = "mvemu", version, about = "Multivariate Bayesian emulation of computer experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Master seed for every random stream.
    #[arg(long, global = true, env = "MVEMU_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "MVEMU_THREADS")]
    pub threads: Option<usize>,
    /// Monte Carlo size for commands that simulate.
    #[arg(long, global = true, env = "MVEMU_MC_SIZE")]
    pub mc_size: Option<usize>,
    /// Print errors as JSON on stderr.
    #[arg(long, global = true, env = "MVEMU_ERROR_JSON")]
    pub error_json: bool,
    /// Where to write the run manifest (default: `<primary output>.manifest.json`).
    #[arg(long, global = true)]
    pub manifest_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a sliced Latin hypercube design.
    Design(DesignArgs),
    /// Run a built-in synthetic simulator over a design.
    Simulate(SimulateArgs),
    /// Fit an emulator.
    Fit(FitArgs),
    /// Predict at new inputs.
    Predict(PredictArgs),
    /// Validate a fit against held-out runs.
    Diagnose(DiagnoseArgs),
    /// Sample the posterior over mean functions.
    SelectModel(SelectModelArgs),
    /// Screen variables against inert reference inputs.
    Rdvs(RdvsArgs),
    /// Sobol indices and main effects of the aggregate output.
    Sensitivity(SensitivityArgs),
    /// Serve predictions over HTTP.
    Serve(ServeArgs),
    /// Re-execute a command from its manifest and compare outputs.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriterionArg {
    RandomLhs,
    MaximinLhs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmulatorArg {
    Lightweight,
    Gp,
    GpNugget,
}

impl From<EmulatorArg> for EmulatorKind {
    fn from(e: EmulatorArg) -> Self {
        match e {
            EmulatorArg::Lightweight => EmulatorKind::Lightweight,
            EmulatorArg::Gp => EmulatorKind::Gp,
            EmulatorArg::GpNugget => EmulatorKind::GpNugget,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanArg {
    Intercept,
    Linear,
    Maximal,
    ModalFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorArg {
    Weak,
    UnitInformation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Plugin,
    PosteriorAveraged,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DesignArgs {
    /// Schema JSON describing the inputs.
    #[arg(long, conflicts_with = "sim", required_unless_present = "sim")]
    pub schema: Option<PathBuf>,
    /// Use the inputs of a built-in simulator.
    #[arg(long)]
    pub sim: Option<String>,
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = CriterionArg::MaximinLhs)]
    pub criterion: CriterionArg,
    /// Swap proposals per continuous column (default 10 n).
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub sim: String,
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the simulator's dataset schema.
    #[arg(long)]
    pub schema_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long)]
    pub outputs: PathBuf,
    #[arg(long, value_enum, default_value_t = EmulatorArg::GpNugget)]
    pub emulator: EmulatorArg,
    #[arg(long, value_enum, default_value_t = MeanArg::Intercept)]
    pub mean: MeanArg,
    /// Model-selection report or term list, for `--mean modal-file`.
    #[arg(long, required_if_eq("mean", "modal-file"))]
    pub mean_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PriorArg::Weak)]
    pub prior: PriorArg,
    #[arg(long, default_value_t = 10)]
    pub starts: usize,
    #[arg(long, default_value_t = 500)]
    pub max_evals: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
    /// Per-cell predictions CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Joint predictive distribution JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub test_inputs: PathBuf,
    #[arg(long)]
    pub test_outputs: PathBuf,
    /// Diagnostic report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// QQ plot data of the uncorrelated errors.
    #[arg(long)]
    pub qq: Option<PathBuf>,
    /// One-row summary CSV.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub rrmse_epsilon: Option<f64>,
    #[arg(long)]
    pub no_rrmse: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SelectModelArgs {
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long)]
    pub outputs: PathBuf,
    #[arg(long, value_enum, default_value_t = EmulatorArg::Lightweight)]
    pub emulator: EmulatorArg,
    #[arg(long, default_value_t = 100_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub burn_frac: f64,
    #[arg(long, default_value_t = 1)]
    pub chains: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Plain-text listing.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RdvsArgs {
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long)]
    pub outputs: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub b_rep: usize,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.5)]
    pub burn_frac: f64,
    #[arg(long, default_value_t = 0.3)]
    pub step: f64,
    #[arg(long, default_value_t = 0.95)]
    pub quantile: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Null-distribution draws, one row per repetition and inert input.
    #[arg(long)]
    pub null_csv: Option<PathBuf>,
    /// Median `log r` and threshold per variable.
    #[arg(long)]
    pub medians_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Index table CSV (values x 1000).
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Effect curves CSV.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Plugin)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 50)]
    pub n_outer: usize,
    /// `all`, `none`, or comma-separated `a:b` pairs.
    #[arg(long, default_value = "all")]
    pub pairs: String,
    /// Main effect `var`, or conditional effects `var|cond`; repeatable.
    #[arg(long)]
    pub effect: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Sensitivity result served at GET /sensitivity.
    #[arg(long)]
    pub sensitivity: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write regenerated artifacts here instead of their recorded paths.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Settings shared by all subcommands that affect their artifacts.
#[derive(Debug, Clone, Copy)]
pub struct RunContext {
    pub seed: u64,
    pub mc_size: Option<usize>,
}

impl Command {
    /// Files the command reads.
    pub fn inputs(&self) -> Vec<PathBuf> {
        let v: Vec<Option<&PathBuf>> = match self {
            Command::Design(a) => vec![a.schema.as_ref()],
            Command::Simulate(a) => vec![Some(&a.inputs)],
            Command::Fit(a) => vec![Some(&a.schema), Some(&a.inputs), Some(&a.outputs), a.mean_file.as_ref()],
            Command::Predict(a) => vec![Some(&a.fit), Some(&a.inputs)],
            Command::Diagnose(a) => vec![Some(&a.fit), Some(&a.test_inputs), Some(&a.test_outputs)],
            Command::SelectModel(a) => vec![Some(&a.schema), Some(&a.inputs), Some(&a.outputs)],
            Command::Rdvs(a) => vec![Some(&a.schema), Some(&a.inputs), Some(&a.outputs)],
            Command::Sensitivity(a) => vec![Some(&a.fit)],
            Command::Serve(_) | Command::Rerun(_) => vec![],
        };
        v.into_iter().flatten().cloned().collect()
    }

    /// Artifacts the command writes; the first is the primary one.
    pub fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        let v: Vec<Option<&mut PathBuf>> = match self {
            Command::Design(a) => vec![Some(&mut a.out)],
            Command::Simulate(a) => vec![Some(&mut a.out), a.schema_out.as_mut()],
            Command::Fit(a) => vec![Some(&mut a.out)],
            Command::Predict(a) => vec![Some(&mut a.out), a.json.as_mut()],
            Command::Diagnose(a) => vec![Some(&mut a.out), a.qq.as_mut(), a.table.as_mut()],
            Command::SelectModel(a) => vec![Some(&mut a.out), a.table.as_mut()],
            Command::Rdvs(a) => vec![Some(&mut a.out), a.null_csv.as_mut(), a.medians_csv.as_mut()],
            Command::Sensitivity(a) => vec![Some(&mut a.out), a.table.as_mut(), a.curves.as_mut()],
            Command::Serve(_) | Command::Rerun(_) => vec![],
        };
        v.into_iter().flatten().collect()
    }

    pub fn outputs(&self) -> Vec<PathBuf> {
        self.clone().outputs_mut().into_iter().map(|p| p.clone()).collect()
    }

    /// Executes an artifact-producing command.
    pub fn execute(&self, ctx: RunContext) -> CliResult<()> {
        match self {
            Command::Design(a) => run_design(a, ctx),
            Command::Simulate(a) => run_simulate(a),
            Command::Fit(a) => run_fit(a, ctx),
            Command::Predict(a) => run_predict(a),
            Command::Diagnose(a) => run_diagnose(a, ctx),
            Command::SelectModel(a) => run_select_model(a, ctx),
            Command::Rdvs(a) => run_rdvs(a, ctx),
            Command::Sensitivity(a) => run_sensitivity(a, ctx),
            Command::Serve(_) | Command::Rerun(_) => Err(CliError::Usage("not an artifact-producing command".into())),
        }
    }
}

/// Runs a parsed command line: executes and records a manifest, serves, or reruns.
pub fn run(cli: &Cli) -> CliResult<()> {
    let ctx = RunContext {
        seed: cli.global.seed,
        mc_size: cli.global.mc_size,
    };
    match &cli.command {
        Command::Serve(a) => crate::server::serve(a, ctx),
        Command::Rerun(a) => {
            let report = rerun(a)?;
            for (_, path, _) in &report {
                println!("reproduced {}", path.display());
            }
            Ok(())
        }
        cmd => {
            let inputs = manifest::hash_all(&cmd.inputs())?;
            let started = manifest::now_unix();
            cmd.execute(ctx)?;
            let outs = cmd.outputs();
            let m = RunManifest {
                format: MANIFEST_FORMAT.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                seed: ctx.seed,
                mc_size: ctx.mc_size,
                command: cmd.clone(),
                inputs,
                outputs: manifest::hash_all(&outs)?,
                started_unix: started,
                finished_unix: manifest::now_unix(),
            };
            let path = cli.global.manifest_out.clone().unwrap_or_else(|| manifest::default_path(&outs[0]));
            manifest::write(&path, &m)
        }
    }
}

/// Outcome of a manifest rerun: recorded path, regenerated path, hashes equal.
pub type RerunReport = Vec<(String, PathBuf, bool)>;

pub fn rerun(a: &RerunArgs) -> CliResult<RerunReport> {
    let m: RunManifest = read_json(&a.manifest)?;
    if m.format != MANIFEST_FORMAT {
        return Err(CliError::Mismatch(format!("{} is not a run manifest", a.manifest.display())));
    }
    let current = manifest::hash_all(&m.command.inputs())?;
    if current != m.inputs {
        let changed: Vec<&String> = m.inputs.iter().filter(|(p, h)| current.get(*p) != Some(h)).map(|(p, _)| p).collect();
        return Err(CliError::Mismatch(format!(
            "input files changed since the recorded run: {}",
            changed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let mut cmd = m.command.clone();
    let recorded = cmd.outputs();
    if let Some(dir) = &a.out_dir {
        let mut seen = BTreeMap::new();
        for p in cmd.outputs_mut() {
            let name = p
                .file_name()
                .ok_or_else(|| CliError::Usage(format!("output `{}` has no file name", p.display())))?
                .to_owned();
            if seen.insert(name.clone(), ()).is_some() {
                return Err(CliError::Usage(format!("two outputs share the file name {name:?}")));
            }
            *p = dir.join(name);
        }
    }
    cmd.execute(RunContext {
        seed: m.seed,
        mc_size: m.mc_size,
    })?;
    let mut report = Vec::new();
    for (orig, new) in recorded.iter().zip(cmd.outputs()) {
        let key = orig.display().to_string();
        let want = m
            .outputs
            .get(&key)
            .ok_or_else(|| CliError::Mismatch(format!("manifest has no hash for `{key}`")))?;
        let got = crate::io::sha256_file(&new)?;
        report.push((key, new, &got == want));
    }
    let bad: Vec<String> = report.iter().filter(|r| !r.2).map(|r| r.0.clone()).collect();
    if !bad.is_empty() {
        return Err(CliError::Mismatch(format!("regenerated outputs differ: {}", bad.join(", "))));
    }
    Ok(report)
}

fn simulator(name: &str) -> CliResult<SyntheticSimulator> {
    Ok(SyntheticSimulator::by_name(name)?)
}

fn run_design(a: &DesignArgs, ctx: RunContext) -> CliResult<()> {
    let vars = match (&a.schema, &a.sim) {
        (Some(p), _) => read_schema(p)?.variables,
        (None, Some(s)) => simulator(s)?.variables().clone(),
        (None, None) => return Err(CliError::Usage("design needs --schema or --sim".into())),
    };
    let spec = DesignSpec {
        n: a.n,
        criterion: match a.criterion {
            CriterionArg::RandomLhs => design::Criterion::RandomLhs,
            CriterionArg::MaximinLhs => design::Criterion::MaximinLhs,
        },
        budget: a.budget,
        seed: Seed(ctx.seed),
    };
    let points = design::generate(&vars, &spec)?;
    write_text(&a.out, &inputs_csv(&vars, &points))
}

fn run_simulate(a: &SimulateArgs) -> CliResult<()> {
    let sim = simulator(&a.sim)?;
    let points = read_inputs(&a.inputs, sim.variables())?;
    let data = sim.run(&points)?;
    write_text(&a.out, &matrix_csv(&sim.schema.outputs, &data.y))?;
    if let Some(p) = &a.schema_out {
        write_json(p, &sim.schema)?;
    }
    Ok(())
}

/// Reads a mean function from a model-selection report (its modal model) or a term list.
pub fn read_mean_file(path: &Path, vars: &VariableSchema) -> CliResult<MeanFunction> {
    let value: serde_json::Value = read_json(path)?;
    let json_err = |source| CliError::Json {
        path: path.to_path_buf(),
        source,
    };
    let terms: Vec<TermDescriptor> = if value.get("modal").is_some() {
        serde_json::from_value::<ModelPosteriorReport>(value).map_err(json_err)?.modal.terms
    } else {
        serde_json::from_value(value).map_err(json_err)?
    };
    Ok(MeanFunction::from_descriptors(&terms, vars)?)
}

fn run_fit(a: &FitArgs, ctx: RunContext) -> CliResult<()> {
    let data = load_dataset(&a.schema, &a.inputs, &a.outputs)?;
    let vars = data.variables();
    let mf = match a.mean {
        MeanArg::Intercept => MeanFunction::intercept(),
        MeanArg::Linear => MeanFunction::linear(vars)?,
        MeanArg::Maximal => MeanFunction::maximal(vars)?,
        MeanArg::ModalFile => {
            let p = a
                .mean_file
                .as_ref()
                .ok_or_else(|| CliError::Usage("--mean modal-file needs --mean-file".into()))?;
            read_mean_file(p, vars)?
        }
    };
    let prior = match a.prior {
        PriorArg::Weak => PriorSpec::Weak,
        PriorArg::UnitInformation => PriorSpec::UnitInformation,
    };
    let kind = EmulatorKind::from(a.emulator);
    let opts = FitOptions {
        starts: a.starts,
        max_evals: a.max_evals,
        seed: Seed(ctx.seed),
    };
    let fitted = fit(&data, &mf, &prior, kind, &opts)?;
    write_json(&a.out, &FitFile::new(&fitted, kind))
}

fn check_level(level: f64) -> CliResult<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--level must lie in (0, 1), got {level}")))
    }
}

#[derive(Debug, Serialize)]
struct PredictiveJson<'a> {
    outputs: &'a [String],
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    s_hat: Vec<Vec<f64>>,
    dof: f64,
}

fn run_predict(a: &PredictArgs) -> CliResult<()> {
    check_level(a.level)?;
    let fitted = load_fit(&a.fit)?;
    let points = read_inputs(&a.inputs, fitted.variables())?;
    let marg = fitted.predict_marginals(&points)?;
    let outputs = &fitted.schema().outputs;
    let mut rows = Vec::new();
    for u in 0..points.len() {
        for (s, name) in outputs.iter().enumerate() {
            let t = marg.marginal(u, s);
            let (lo, hi) = t.interval(a.level);
            rows.push(vec![
                u.to_string(),
                name.clone(),
                fmt_f64(t.location),
                fmt_f64(t.scale()),
                fmt_f64(t.dof),
                fmt_f64(lo),
                fmt_f64(hi),
            ]);
        }
    }
    write_text(
        &a.out,
        &rows_csv(&["row", "output", "mean", "scale", "dof", "lower", "upper"], rows.into_iter()),
    )?;
    if let Some(p) = &a.json {
        let pred = fitted.predict(&points)?;
        write_json(
            p,
            &PredictiveJson {
                outputs,
                q: to_rows(pred.q()),
                r: to_rows(pred.r()),
                s_hat: to_rows(pred.s_hat()),
                dof: pred.dof(),
            },
        )?;
    }
    Ok(())
}

fn run_diagnose(a: &DiagnoseArgs, ctx: RunContext) -> CliResult<()> {
    let fitted = load_fit(&a.fit)?;
    let points = read_inputs(&a.test_inputs, fitted.variables())?;
    let y0 = crate::io::read_outputs(&a.test_outputs, &fitted.schema().outputs)?;
    if y0.nrows() != points.len() {
        return Err(CliError::Mismatch(format!(
            "{} has {} rows but {} has {}",
            a.test_inputs.display(),
            points.len(),
            a.test_outputs.display(),
            y0.nrows()
        )));
    }
    let test = Dataset::new(fitted.schema().clone(), points, y0)?;
    let opts = DiagnoseOptions {
        alpha: a.alpha,
        reference_size: ctx.mc_size.unwrap_or(DEFAULT_REFERENCE_MC),
        seed: Seed(ctx.seed),
        rrmse_size: (!a.no_rrmse).then(|| ctx.mc_size.unwrap_or(DEFAULT_RRMSE_MC)),
        rrmse_epsilon: a.rrmse_epsilon,
    };
    let report = diagnose(&fitted, &test, &opts)?;
    write_json(&a.out, &report)?;
    if let Some(p) = &a.qq {
        let pred = fitted.predict(&test.points)?;
        let (errors, dof) = uncorrelated_errors(&pred, &test.y)?;
        let rows = qq_data(&errors, dof).into_iter().map(|(t, e)| vec![fmt_f64(t), fmt_f64(e)]);
        write_text(p, &rows_csv(&["theoretical", "observed"], rows))?;
    }
    if let Some(p) = &a.table {
        let row = vec![
            fmt_f64(report.u),
            fmt_f64(report.u_reference.q025),
            fmt_f64(report.u_reference.q975),
            fmt_f64(report.coverage),
            fmt_f64(report.rmse),
            report.rrmse.as_ref().map_or(String::new(), |r| fmt_f64(r.value)),
            if report.adequate() { "adequate" } else { "inadequate" }.into(),
        ];
        write_text(
            p,
            &rows_csv(
                &["u", "u_q025", "u_q975", "coverage", "rmse", "rrmse", "verdict"],
                std::iter::once(row),
            ),
        )?;
    }
    Ok(())
}

fn run_select_model(a: &SelectModelArgs, ctx: RunContext) -> CliResult<()> {
    if a.chains == 0 {
        return Err(CliError::Usage("--chains must be at least 1".into()));
    }
    let data = load_dataset(&a.schema, &a.inputs, &a.outputs)?;
    let space = ModelSpace::new(data.variables())?;
    let run_chain = |c: usize| {
        let opts = Mc3Options {
            iters: a.iters,
            burn_frac: a.burn_frac,
            seed: Seed(ctx.seed).named("chain", c as u64),
            kind: a.emulator.into(),
            ..Default::default()
        };
        mc3_run(&data, &space, &opts)
    };
    let mut summary = run_chain(0)?;
    for c in 1..a.chains {
        summary.merge(&run_chain(c)?)?;
    }
    let report = summary.report();
    write_json(&a.out, &report)?;
    if let Some(p) = &a.table {
        write_text(p, &report.table())?;
    }
    Ok(())
}

fn run_rdvs(a: &RdvsArgs, ctx: RunContext) -> CliResult<()> {
    let data = load_dataset(&a.schema, &a.inputs, &a.outputs)?;
    let opts = RdvsOptions {
        b_rep: a.b_rep,
        iters: a.iters,
        burn_frac: a.burn_frac,
        step: a.step,
        quantile: a.quantile,
        seed: Seed(ctx.seed),
    };
    let result = rdvs_run(&data, &opts)?;
    write_json(&a.out, &result)?;
    if let Some(p) = &a.null_csv {
        let rows = [("continuous", &result.null_continuous), ("categorical", &result.null_categorical)]
            .into_iter()
            .flat_map(|(kind, v)| {
                v.iter()
                    .enumerate()
                    .map(move |(b, m)| vec![kind.to_string(), b.to_string(), fmt_f64(*m)])
            });
        write_text(p, &rows_csv(&["inert", "repetition", "median_log_r"], rows))?;
    }
    if let Some(p) = &a.medians_csv {
        let rows = result.variables.iter().map(|v| {
            vec![
                v.name.clone(),
                if v.continuous { "continuous" } else { "categorical" }.into(),
                fmt_f64(v.median_log_r),
                v.threshold.map_or(String::new(), fmt_f64),
                v.important.map_or(String::new(), |b| b.to_string()),
            ]
        });
        write_text(p, &rows_csv(&["variable", "kind", "median_log_r", "threshold", "important"], rows))?;
    }
    Ok(())
}

/// Parses `all`, `none` or `a:b,c:d`.
pub fn parse_pairs(s: &str) -> CliResult<Pairs> {
    match s.trim() {
        "all" => Ok(Pairs::All),
        "none" => Ok(Pairs::None),
        list => list
            .split(',')
            .map(|p| match p.split_once(':') {
                Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => {
                    Ok((a.trim().to_string(), b.trim().to_string()))
                }
                _ => Err(CliError::Usage(format!("bad pair `{p}`; expected `a:b`"))),
            })
            .collect::<CliResult<Vec<_>>>()
            .map(Pairs::Listed),
    }
}

/// Raw value of an internal coordinate.
pub fn raw_of(vars: &VariableSchema, name: &str, v: f64) -> CliResult<RawValue> {
    let i = vars
        .internal_index(name)
        .ok_or_else(|| CliError::Usage(format!("unknown variable `{name}`")))?;
    let mut x: Vec<f64> = (0..vars.p()).map(|_| 0.0).collect();
    x[i] = v;
    vars.check_point(&x)?;
    Ok(vars.from_point(&x).swap_remove(vars.user_index(i)))
}

fn raw_cell(r: RawValue) -> String {
    match r {
        RawValue::Number(v) => fmt_f64(v),
        RawValue::Level(l) => l,
    }
}

fn conditioning_values(vars: &VariableSchema, name: &str) -> CliResult<Vec<f64>> {
    let i = vars
        .internal_index(name)
        .ok_or_else(|| CliError::Usage(format!("unknown variable `{name}`")))?;
    Ok(if vars.is_continuous(i) {
        vec![0.0, 0.5, 1.0]
    } else {
        default_grid(vars, name)?
    })
}

fn run_sensitivity(a: &SensitivityArgs, ctx: RunContext) -> CliResult<()> {
    let fitted = load_fit(&a.fit)?;
    let vars = fitted.variables();
    let dist = InputDistribution::uniform(vars);
    let n_mc = ctx.mc_size.unwrap_or(DEFAULT_SENSITIVITY_MC);
    let opts = SobolOptions {
        n_mc,
        seed: Seed(ctx.seed),
        mode: match a.mode {
            ModeArg::Plugin => SobolMode::Plugin,
            ModeArg::PosteriorAveraged => SobolMode::PosteriorAveraged { n_outer: a.n_outer },
        },
        pairs: parse_pairs(&a.pairs)?,
        batches: a.batches,
    };
    let mut result: SensitivityResult = sobol_indices(&fitted, &dist, &opts)?;
    let surface = EmulatorSurface::plugin(&fitted);
    let effect_seed = Seed(ctx.seed).named("effects", 0);
    for spec in &a.effect {
        match spec.split_once('|') {
            None => {
                let grid = default_grid(vars, spec)?;
                result.main_effects.push(main_effect(&surface, &dist, spec, &grid, n_mc, effect_seed)?);
            }
            Some((var, cond)) => {
                let grid = default_grid(vars, var)?;
                let levels = conditioning_values(vars, cond)?;
                result
                    .conditional_effects
                    .extend(conditional_main_effects(&surface, &dist, var, cond, &levels, &grid, n_mc, effect_seed)?);
            }
        }
    }
    write_json(&a.out, &result)?;
    if let Some(p) = &a.table {
        write_text(p, &result.table_csv())?;
    }
    if let Some(p) = &a.curves {
        write_text(p, &curves_csv(vars, result.main_effects.iter().chain(&result.conditional_effects))?)?;
    }
    Ok(())
}

/// Effect curves in raw units, one row per grid point.
pub fn curves_csv<'a>(vars: &VariableSchema, curves: impl Iterator<Item = &'a EffectCurve>) -> CliResult<String> {
    let mut rows = Vec::new();
    for c in curves {
        let (cond, cond_value) = match c.conditions.as_slice() {
            [] => (String::new(), String::new()),
            cs => (
                cs.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(";"),
                cs.iter()
                    .map(|(n, v)| raw_of(vars, n, *v).map(raw_cell))
                    .collect::<CliResult<Vec<_>>>()?
                    .join(";"),
            ),
        };
        for ((g, e), s) in c.grid.iter().zip(&c.effect).zip(&c.se) {
            rows.push(vec![
                c.variable.clone(),
                cond.clone(),
                cond_value.clone(),
                raw_cell(raw_of(vars, &c.variable, *g)?),
                fmt_f64(*e),
                fmt_f64(*s),
            ]);
        }
    }
    Ok(rows_csv(&["variable", "condition", "condition_value", "x", "effect", "se"], rows.into_iter()))
}
