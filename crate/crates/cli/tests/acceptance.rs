//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any failure.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use mvemu::design::{generate, Criterion, DesignSpec};
use mvemu::diagnostics::{
    diagnose, interval_coverage, omnibus_u, standardised_error_matrix, u_reference, DiagnoseOptions, DiagnosticReport,
};
use mvemu::emulator::{fit, fit_at, fit_at_dense, EmulatorKind, FitOptions, PriorSpec};
use mvemu::kernel::{build_cross, build_row_scale, CorrelationConfig};
use mvemu::linalg::Factor;
use mvemu::matvar::MniwParams;
use mvemu::meanfn::{MeanFunction, ModelSpace};
use mvemu::modelsel::{enumerate_models, exact_model_probabilities, mc3_run, total_variation, Mc3Options};
use mvemu::rdvs::{rdvs_run, RdvsOptions};
use mvemu::rng::Seed;
use mvemu::schema::{Dataset, DatasetSchema, Point, Variable, VariableSchema};
use mvemu::sensitivity::{sobol_indices_for, FnSurface, InputDistribution, SobolOptions};
use mvemu::simbench::SyntheticSimulator;
use mvemu_cli::commands::{rerun, run, Cli, RerunArgs};
use mvemu_cli::manifest::RunManifest;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sliced_lhs(vars: &VariableSchema, n: usize, seed: u64) -> Vec<Point> {
    let spec = DesignSpec {
        n,
        criterion: Criterion::MaximinLhs,
        budget: None,
        seed: Seed(seed),
    };
    generate(vars, &spec).unwrap()
}

fn unit_schema(p: usize, k: usize) -> DatasetSchema {
    let vars = VariableSchema::new((1..=p).map(|i| Variable::continuous(&format!("x{i}"), 0.0, 1.0)).collect()).unwrap();
    DatasetSchema::new(vars, (1..=k).map(|j| format!("y{j}")).collect()).unwrap()
}

fn normal_matrix(r: usize, c: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn u_reference_distribution() -> Outcome {
    let start = Instant::now();
    let r = u_reference(5, 120, 116.0, 100_000, Seed(1)).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let (mean, lo, hi) = (r.mean(), r.quantile(0.025), r.quantile(0.975));
    check(
        (mean - 0.030).abs() <= 0.002 && (lo - 0.019).abs() <= 0.003 && (hi - 0.044).abs() <= 0.003 && secs < 10.0,
        format!("mean {mean:.4}, 2.5% {lo:.4}, 97.5% {hi:.4}, {secs:.2}s"),
    )
}

fn conjugacy_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = Seed(21).stream();
    let schema = unit_schema(1, 2);
    let vars = schema.variables.clone();
    let points: Vec<Point> = (0..6).map(|i| vec![(i as f64 + rng.random::<f64>()) / 6.0]).collect();
    let y = DMatrix::from_fn(6, 2, |i, j| (3.0 * points[i][0] + j as f64).sin() + 0.1 * rng.random::<f64>());
    let data = Dataset::new(schema, points, y).unwrap();
    let mf = MeanFunction::linear(&vars).unwrap();
    let cfg = CorrelationConfig::power_exponential(vec![2.0], 0.0).unwrap();
    let prior = PriorSpec::Explicit(
        MniwParams::new(
            DMatrix::from_row_slice(2, 2, &[0.5, -0.5, 1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]),
            5.0,
        )
        .unwrap(),
    );
    let fitted = fit_at(&data, &mf, &cfg, &prior).map_err(|e| e.to_string())?;
    let new: Vec<Point> = vec![vec![0.03], vec![0.41], vec![0.88]];
    let pred = fitted.predict(&new).unwrap();

    // Y0 | B, Sigma is matrix normal with the kriging mean and C (x) Sigma.
    let a = build_row_scale(&data.points, &cfg, &vars).unwrap();
    let t = build_cross(&data.points, &new, &cfg, &vars).unwrap();
    let a0 = build_row_scale(&new, &cfg, &vars).unwrap();
    let fa = Factor::new(&a, "A").unwrap();
    let h = mf.expand(&data.points, &vars).unwrap();
    let h0 = mf.expand(&new, &vars).unwrap();
    let ainv_t = fa.solve(&t);
    let c_root = Factor::new(&(&a0 - t.transpose() * &ainv_t), "C").unwrap();
    let sampler = fitted.posterior().mniw().unwrap().sampler().unwrap();
    let (draws, n0, k) = (200_000usize, new.len(), 2);
    let mut sum = DMatrix::<f64>::zeros(n0 * k, 1);
    let mut sq = DMatrix::<f64>::zeros(n0 * k, n0 * k);
    for _ in 0..draws {
        let (b, sigma) = sampler.sample(&mut rng);
        let mu = &h0 * &b + ainv_t.transpose() * (&data.y - &h * &b);
        let s_root = Factor::new(&sigma, "Sigma").unwrap();
        let y0 = mu + c_root.l() * normal_matrix(n0, k, &mut rng) * s_root.l().transpose();
        let v = DMatrix::from_column_slice(n0 * k, 1, y0.as_slice());
        sum += &v;
        sq += &v * v.transpose();
    }
    let mean = &sum / draws as f64;
    let cov = &sq / draws as f64 - &mean * mean.transpose();
    let dof = pred.dof();
    let analytic = |i: usize, j: usize| pred.r()[(i % n0, j % n0)] * pred.s_hat()[(i / n0, j / n0)] / (dof - 2.0);
    let (mut worst_mean, mut worst_cov) = (0.0f64, 0.0f64);
    for i in 0..n0 * k {
        let se = (cov[(i, i)] / draws as f64).sqrt();
        worst_mean = worst_mean.max((mean[i] - pred.q().as_slice()[i]).abs() / se);
        for j in 0..n0 * k {
            let scale = (analytic(i, i) * analytic(j, j)).sqrt();
            worst_cov = worst_cov.max((cov[(i, j)] - analytic(i, j)).abs() / scale);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_mean < 3.0 && worst_cov < 0.05 && secs < 60.0,
        format!("max mean error {worst_mean:.2} SE, max covariance error {:.2}%, {secs:.1}s", 100.0 * worst_cov),
    )
}

fn interpolation_invariant() -> Outcome {
    let mut rng = Seed(31).stream();
    let (mut worst_q, mut worst_r) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let p = rng.random_range(1..=3);
        let k = rng.random_range(1..=3);
        let n = rng.random_range(8..=20);
        let schema = unit_schema(p, k);
        let points = sliced_lhs(&schema.variables, n, rng.random());
        let w: Vec<f64> = (0..p * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = DMatrix::from_fn(n, k, |i, j| {
            (0..p).map(|l| (w[l * k + j] * points[i][l]).sin()).sum::<f64>() + 0.1 * rng.random::<f64>()
        });
        let data = Dataset::new(schema, points, y).unwrap();
        let r: Vec<f64> = (0..p).map(|_| (rng.random_range(10f64.ln()..100f64.ln())).exp()).collect();
        let cfg = CorrelationConfig::power_exponential(r, 0.0).unwrap();
        let mf = MeanFunction::linear(data.variables()).unwrap();
        let fitted = fit_at(&data, &mf, &cfg, &PriorSpec::Weak).map_err(|e| e.to_string())?;
        let pred = fitted.predict(&data.points).map_err(|e| e.to_string())?;
        worst_q = worst_q.max((pred.q() - &data.y).amax());
        worst_r = worst_r.max(pred.r().diagonal().amax());
    }
    check(
        worst_q <= 1e-6 && worst_r <= 1e-8,
        format!("max |Q - Y| {worst_q:.2e}, max R_uu {worst_r:.2e} over 20 fits"),
    )
}

fn report_gap(a: &DiagnosticReport, b: &DiagnosticReport) -> f64 {
    let mut gap = (a.u - b.u).abs().max((a.coverage - b.coverage).abs()).max((a.rmse - b.rmse).abs());
    for (ra, rb) in a.individual_errors.iter().zip(&b.individual_errors) {
        for (x, y) in ra.iter().zip(rb) {
            gap = gap.max((x - y).abs());
        }
    }
    for (x, y) in a.uncorrelated_errors.iter().zip(&b.uncorrelated_errors) {
        gap = gap.max((x - y).abs());
    }
    if let (Some(x), Some(y)) = (&a.rrmse, &b.rrmse) {
        gap = gap.max((x.value - y.value).abs());
    }
    gap
}

fn lightweight_equivalence() -> Outcome {
    let sim = SyntheticSimulator::by_name("linear-truth").unwrap();
    let train = sim.run(&sliced_lhs(sim.variables(), 30, 41)).unwrap();
    let test = sim.run(&sliced_lhs(sim.variables(), 12, 42)).unwrap();
    let mf = MeanFunction::linear(sim.variables()).unwrap();
    let mut worst = 0.0f64;
    for prior in [PriorSpec::Weak, PriorSpec::UnitInformation] {
        let light = fit_at(&train, &mf, &CorrelationConfig::Lightweight, &prior).map_err(|e| e.to_string())?;
        let dense = fit_at_dense(&train, &mf, &CorrelationConfig::Lightweight, &prior).map_err(|e| e.to_string())?;
        let (pl, pd) = (light.predict(&test.points).unwrap(), dense.predict(&test.points).unwrap());
        worst = worst.max((pl.q() - pd.q()).amax()).max((pl.r() - pd.r()).amax()).max((pl.s_hat() - pd.s_hat()).amax());
        let opts = DiagnoseOptions {
            reference_size: 10_000,
            ..Default::default()
        };
        let (dl, dd) = (diagnose(&light, &test, &opts).unwrap(), diagnose(&dense, &test, &opts).unwrap());
        worst = worst.max(report_gap(&dl, &dd));
    }
    check(worst <= 1e-10, format!("max difference {worst:.2e} (predictions and diagnostics, two priors)"))
}

fn calibration() -> Outcome {
    let sim = SyntheticSimulator::by_name("smooth-gp").unwrap();
    let data = sim.run(&sliced_lhs(sim.variables(), 120, 51)).unwrap();
    let opts = FitOptions {
        seed: Seed(52),
        ..Default::default()
    };
    let fitted = fit(&data, &MeanFunction::intercept(), &PriorSpec::Weak, EmulatorKind::GpNugget, &opts)
        .map_err(|e| e.to_string())?;
    let test = sliced_lhs(sim.variables(), 120, 53);
    let pred = fitted.predict(&test).unwrap();
    let sampler = pred.params.sampler().map_err(|e| e.to_string())?;
    let reference = u_reference(pred.k(), pred.n0(), pred.dof(), 100_000, Seed(54)).unwrap();
    let mut rng = Seed(55).stream();
    let reps = 200;
    let (mut coverage, mut inside) = (0.0, 0usize);
    for _ in 0..reps {
        let y0 = sampler.sample(&mut rng);
        coverage += interval_coverage(&pred, &y0, 0.05).unwrap() / reps as f64;
        inside += usize::from(reference.contains(omnibus_u(&pred, &y0).unwrap()));
    }
    let cells = (reps * pred.n0() * pred.k()) as f64;
    let se = (0.95 * 0.05 / cells).sqrt();
    let frac = inside as f64 / reps as f64;
    check(
        (coverage - 0.95).abs() <= 3.0 * se && frac >= 0.93,
        format!(
            "coverage {coverage:.4} (|dev| {:.2} SE), U in band {:.1}% of {reps}",
            (coverage - 0.95).abs() / se,
            100.0 * frac
        ),
    )
}

fn mc3_correctness() -> Outcome {
    let start = Instant::now();
    let schema = unit_schema(2, 2);
    let vars = schema.variables.clone();
    let mut rng = Seed(61).stream();
    let points: Vec<Point> = (0..25).map(|_| vec![rng.random(), rng.random()]).collect();
    let y = DMatrix::from_fn(25, 2, |i, j| {
        let x = &points[i];
        0.4 * x[0] + 0.25 * (j as f64) * x[1] + 0.3 * x[0] * x[1] + 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng)
    });
    let data = Dataset::new(schema, points, y).unwrap();
    let space = ModelSpace::new(&vars).unwrap();
    let models = enumerate_models(&space).len();
    if models > 20 {
        return Err(format!("model space has {models} models"));
    }
    let exact = exact_model_probabilities(&data, &space).map_err(|e| e.to_string())?;
    let mut tvs = Vec::new();
    for s in 0..3 {
        let opts = Mc3Options {
            iters: 100_000,
            seed: Seed(62 + s),
            ..Default::default()
        };
        let summary = mc3_run(&data, &space, &opts).map_err(|e| e.to_string())?;
        tvs.push(total_variation(&summary, &exact));
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = tvs.iter().cloned().fold(0.0, f64::max);
    let top = exact.iter().map(|(_, p)| *p).fold(0.0, f64::max);
    check(
        worst < 0.02 && secs < 120.0,
        format!("{models} models (largest probability {top:.3}), TV {tvs:.4?}, {secs:.1}s"),
    )
}

fn univariate_reduction() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = Seed(70 + seed).stream();
        let schema = unit_schema(2, 1);
        let n = 15;
        let points: Vec<Point> = (0..n).map(|_| vec![rng.random(), rng.random()]).collect();
        let y = DMatrix::from_fn(n, 1, |i, _| (4.0 * points[i][0]).sin() + points[i][1] + 0.05 * rng.random::<f64>());
        let data = Dataset::new(schema, points, y).unwrap();
        let cfg = CorrelationConfig::power_exponential(vec![1.0 + seed as f64, 2.0], 0.01).unwrap();
        let fitted = fit_at(&data, &MeanFunction::linear(data.variables()).unwrap(), &cfg, &PriorSpec::Weak).unwrap();
        let test: Vec<Point> = (0..8).map(|_| vec![rng.random(), rng.random()]).collect();
        let y0 = DMatrix::from_fn(8, 1, |i, _| (4.0 * test[i][0]).sin() + test[i][1]);
        let pred = fitted.predict(&test).unwrap();
        let u = omnibus_u(&pred, &y0).unwrap();
        let (e, _) = standardised_error_matrix(&pred, &y0).unwrap();
        let (dof, n0) = (pred.dof(), test.len() as f64);
        let lhs = dof * (1.0 - u) / (n0 * u);
        let rhs = dof / n0 * e.norm_squared();
        worst = worst.max((lhs - rhs).abs() / rhs.abs().max(f64::MIN_POSITIVE));
    }
    check(worst <= 1e-12, format!("max relative difference {worst:.2e} over 10 instances"))
}

fn sobol_oracles() -> Outcome {
    let start = Instant::now();
    let vars = unit_schema(2, 1).variables;
    let dist = InputDistribution::uniform(&vars);
    let opts = SobolOptions {
        n_mc: 100_000,
        seed: Seed(81),
        ..Default::default()
    };
    let add = FnSurface::new(vars.clone(), |x: &[f64]| x[0] + x[1]);
    let inter = FnSurface::new(vars.clone(), |x: &[f64]| (x[0] - 0.5) * (x[1] - 0.5));
    let ra = sobol_indices_for(&[&add], &dist, &opts).map_err(|e| e.to_string())?;
    let ri = sobol_indices_for(&[&inter], &dist, &opts).map_err(|e| e.to_string())?;
    let get = |r: &mvemu::sensitivity::SensitivityResult, v: &[&str]| r.index(v).map_or(f64::NAN, |e| e.index);
    let (a1, a2, a12) = (get(&ra, &["x1"]), get(&ra, &["x2"]), get(&ra, &["x1", "x2"]));
    let i12 = get(&ri, &["x1", "x2"]);
    let secs = start.elapsed().as_secs_f64();
    check(
        (a1 - 0.5).abs() <= 0.02 && (a2 - 0.5).abs() <= 0.02 && a12.abs() <= 0.02 && (i12 - 1.0).abs() <= 0.03 && secs < 60.0,
        format!("additive S1 {a1:.4} S2 {a2:.4} S12 {a12:.4}; interaction S12 {i12:.4}; {secs:.1}s"),
    )
}

fn rdvs_recovery() -> Outcome {
    let sim = SyntheticSimulator::by_name("sine-screen").unwrap();
    let mut correct = 0;
    let mut misses = Vec::new();
    for s in 0..20u64 {
        let data = sim.run(&sliced_lhs(sim.variables(), 40, 900 + s)).unwrap();
        let opts = RdvsOptions {
            b_rep: 100,
            seed: Seed(950 + s),
            ..Default::default()
        };
        let r = rdvs_run(&data, &opts).map_err(|e| e.to_string())?;
        if r.important() == ["x1"] {
            correct += 1;
        } else {
            misses.push(format!("seed {s}: {:?}", r.important()));
        }
    }
    check(correct >= 18, format!("{correct}/20 seeds correct {misses:?}"))
}

fn model_selection_recovery() -> Outcome {
    let sim = SyntheticSimulator::by_name("linear-truth").unwrap();
    let data = sim.run(&sliced_lhs(sim.variables(), 40, 101)).unwrap();
    let space = ModelSpace::new(sim.variables()).unwrap();
    let opts = Mc3Options {
        iters: 100_000,
        seed: Seed(102),
        kind: EmulatorKind::Lightweight,
        ..Default::default()
    };
    let summary = mc3_run(&data, &space, &opts).map_err(|e| e.to_string())?;
    let truth = MeanFunction::from_descriptors(sim.truth.true_terms.as_ref().unwrap(), sim.variables()).unwrap();
    let mut lowest = f64::INFINITY;
    let mut listing = Vec::new();
    for (t, p) in summary.inclusion_probabilities() {
        if truth.contains(&t) {
            lowest = lowest.min(p);
            listing.push(format!("{} {p:.3}", t.label(sim.variables())));
        }
    }
    check(lowest > 0.9, format!("true-term inclusion: {}", listing.join(", ")))
}

fn mvemu(args: &[&str]) -> Result<(), String> {
    let cli = Cli::try_parse_from(std::iter::once("mvemu").chain(args.iter().copied())).map_err(|e| e.to_string())?;
    run(&cli).map_err(|e| e.to_string())
}

fn reproducibility() -> Outcome {
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let d = dir.path();
    let p = |n: &str| d.join(n).display().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["design", "--sim", "smooth-gp", "--n", "40", "--out", &p("x.csv")],
        vec!["simulate", "--sim", "smooth-gp", "--inputs", &p("x.csv"), "--out", &p("y.csv"), "--schema-out", &p("schema.json")],
        vec!["--seed", "5", "design", "--sim", "smooth-gp", "--n", "20", "--criterion", "random-lhs", "--out", &p("x0.csv")],
        vec!["simulate", "--sim", "smooth-gp", "--inputs", &p("x0.csv"), "--out", &p("y0.csv")],
        vec!["fit", "--schema", &p("schema.json"), "--inputs", &p("x.csv"), "--outputs", &p("y.csv"), "--out", &p("fit.json")],
        vec!["predict", "--fit", &p("fit.json"), "--inputs", &p("x0.csv"), "--out", &p("pred.csv"), "--json", &p("pred.json")],
        vec![
            "--mc-size", "20000", "diagnose", "--fit", &p("fit.json"), "--test-inputs", &p("x0.csv"), "--test-outputs",
            &p("y0.csv"), "--out", &p("diag.json"), "--qq", &p("qq.csv"), "--table", &p("diag.csv"),
        ],
        vec![
            "select-model", "--schema", &p("schema.json"), "--inputs", &p("x.csv"), "--outputs", &p("y.csv"), "--iters",
            "5000", "--chains", "2", "--out", &p("models.json"), "--table", &p("models.txt"),
        ],
        vec![
            "rdvs", "--schema", &p("schema.json"), "--inputs", &p("x.csv"), "--outputs", &p("y.csv"), "--b-rep", "10",
            "--iters", "500", "--out", &p("rdvs.json"), "--null-csv", &p("null.csv"), "--medians-csv", &p("medians.csv"),
        ],
        vec![
            "--mc-size", "10000", "sensitivity", "--fit", &p("fit.json"), "--out", &p("sens.json"), "--table",
            &p("sens.csv"), "--curves", &p("curves.csv"), "--effect", "x1", "--effect", "x2|c1", "--mode",
            "posterior-averaged", "--n-outer", "5",
        ],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    for s in &steps {
        mvemu(&s.iter().map(String::as_str).collect::<Vec<_>>())?;
    }
    let mut artifacts = 0;
    let manifests: Vec<_> = fs::read_dir(d)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".manifest.json"))
        .collect();
    for (i, m) in manifests.iter().enumerate() {
        let out_dir = d.join(format!("rerun-{i}"));
        let report = rerun(&RerunArgs {
            manifest: m.clone(),
            out_dir: Some(out_dir),
        })
        .map_err(|e| format!("{}: {e}", m.display()))?;
        let recorded: RunManifest = mvemu_cli::io::read_json(m).map_err(|e| e.to_string())?;
        for (orig, new, same) in report {
            let identical = fs::read(Path::new(&orig)).ok() == fs::read(&new).ok();
            if !(same && identical) {
                return Err(format!("{orig} differs on rerun"));
            }
            artifacts += 1;
        }
        if recorded.outputs.is_empty() {
            return Err(format!("{} records no outputs", m.display()));
        }
    }
    check(
        manifests.len() == steps.len() && artifacts == 19,
        format!("{artifacts} artifacts from {} manifests regenerated bit-identically", manifests.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("U reference distribution", u_reference_distribution),
        ("conjugacy oracle", conjugacy_oracle),
        ("interpolation invariant", interpolation_invariant),
        ("lightweight/GP equivalence", lightweight_equivalence),
        ("calibration", calibration),
        ("MC3 correctness", mc3_correctness),
        ("univariate reduction", univariate_reduction),
        ("Sobol oracles", sobol_oracles),
        ("RDVS recovery", rdvs_recovery),
        ("model-selection recovery", model_selection_recovery),
        ("reproducibility", reproducibility),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {id:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
