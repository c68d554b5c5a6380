use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;
use mvemu::diagnostics::DiagnosticReport;
use mvemu_cli::commands::{run, Cli};
use mvemu_cli::error::CliError;
use mvemu_cli::fitfile::FitFile;
use mvemu_cli::io::{inputs_csv, matrix_csv, read_inputs, read_json, read_outputs, read_schema, to_json};
use tempfile::TempDir;

fn mvemu(args: &[&str]) -> Result<(), CliError> {
    let cli = Cli::try_parse_from(std::iter::once("mvemu").chain(args.iter().copied())).expect("valid arguments");
    run(&cli)
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

/// Training and test designs for smooth-gp plus a fitted gp-nugget emulator.
fn pipeline(dir: &Path, emulator: &str, n: &str) -> PathBuf {
    let (train, train_y, schema) = (p(dir, "train.csv"), p(dir, "train_y.csv"), p(dir, "schema.json"));
    mvemu(&["design", "--sim", "smooth-gp", "--n", n, "--out", &train]).unwrap();
    mvemu(&["simulate", "--sim", "smooth-gp", "--inputs", &train, "--out", &train_y, "--schema-out", &schema]).unwrap();
    let (test, test_y) = (p(dir, "test.csv"), p(dir, "test_y.csv"));
    mvemu(&["--seed", "1", "design", "--sim", "smooth-gp", "--n", "40", "--out", &test]).unwrap();
    mvemu(&["simulate", "--sim", "smooth-gp", "--inputs", &test, "--out", &test_y]).unwrap();
    let fit = p(dir, "fit.json");
    mvemu(&[
        "fit", "--schema", &schema, "--inputs", &train, "--outputs", &train_y, "--emulator", emulator, "--mean",
        "intercept", "--out", &fit,
    ])
    .unwrap();
    PathBuf::from(fit)
}

fn diagnose(dir: &Path, test_y: &str) -> DiagnosticReport {
    let out = p(dir, "diag.json");
    mvemu(&[
        "--mc-size", "20000", "diagnose", "--fit", &p(dir, "fit.json"), "--test-inputs", &p(dir, "test.csv"),
        "--test-outputs", test_y, "--out", &out, "--qq", &p(dir, "qq.csv"), "--table", &p(dir, "table.csv"),
    ])
    .unwrap();
    read_json(Path::new(&out)).unwrap()
}

#[test]
fn end_to_end_pipeline_is_adequate() {
    let dir = TempDir::new().unwrap();
    pipeline(dir.path(), "gp-nugget", "40");
    let report = diagnose(dir.path(), &p(dir.path(), "test_y.csv"));
    assert!(report.adequate(), "{:?} u={} band={:?}", report.flags, report.u, report.u_reference);
    let table = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().ends_with(",adequate"));
    let qq = fs::read_to_string(dir.path().join("qq.csv")).unwrap();
    assert_eq!(qq.lines().count(), 1 + 40 * 5);
}

#[test]
fn shifted_test_outputs_are_flagged() {
    let dir = TempDir::new().unwrap();
    pipeline(dir.path(), "gp-nugget", "40");
    let schema = read_schema(&dir.path().join("schema.json")).unwrap();
    let train = read_outputs(&dir.path().join("train_y.csv"), &schema.outputs).unwrap();
    let mut y0 = read_outputs(&dir.path().join("test_y.csv"), &schema.outputs).unwrap();
    for j in 0..y0.ncols() {
        let col = train.column(j);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64).sqrt();
        y0.column_mut(j).add_scalar_mut(10.0 * sd);
    }
    let shifted = p(dir.path(), "shifted_y.csv");
    fs::write(&shifted, matrix_csv(&schema.outputs, &y0)).unwrap();
    let report = diagnose(dir.path(), &shifted);
    assert!(!report.adequate());
    assert!(report.coverage < 0.2, "coverage {}", report.coverage);
}

#[test]
fn zero_nugget_prediction_reproduces_training_outputs() {
    let dir = TempDir::new().unwrap();
    let fit = pipeline(dir.path(), "gp", "20");
    let out = p(dir.path(), "pred.csv");
    mvemu(&["predict", "--fit", fit.to_str().unwrap(), "--inputs", &p(dir.path(), "train.csv"), "--out", &out]).unwrap();
    let schema = read_schema(&dir.path().join("schema.json")).unwrap();
    let y = read_outputs(&dir.path().join("train_y.csv"), &schema.outputs).unwrap();
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let u: usize = rec[0].parse().unwrap();
        let s = schema.outputs.iter().position(|o| o == &rec[1]).unwrap();
        let mean: f64 = rec[2].parse().unwrap();
        let (lo, hi): (f64, f64) = (rec[5].parse().unwrap(), rec[6].parse().unwrap());
        assert!((mean - y[(u, s)]).abs() < 1e-6, "row {u} output {s}: {mean} vs {}", y[(u, s)]);
        assert!(hi - lo < 1e-6, "interval width {}", hi - lo);
        rows += 1;
    }
    assert_eq!(rows, 20 * 5);
}

fn write_schema(dir: &Path) -> String {
    let path = p(dir, "schema.json");
    fs::write(
        &path,
        r#"{"variables":[{"name":"a","kind":"continuous","range":[0,1]},{"name":"b","kind":"continuous","range":[-1,1]},{"name":"c","kind":"categorical","levels":["lo","hi"]}],"outputs":["y"]}"#,
    )
    .unwrap();
    path
}

#[test]
fn parse_errors_carry_line_and_column() {
    let dir = TempDir::new().unwrap();
    let schema = read_schema(Path::new(&write_schema(dir.path()))).unwrap();
    let bad = dir.path().join("bad.csv");

    fs::write(&bad, "a,b,c\n0.1,0.2,lo\n0.3,x,hi\n").unwrap();
    match read_inputs(&bad, &schema.variables) {
        Err(CliError::Parse { line, column, .. }) => assert_eq!((line, column), (3, 2)),
        other => panic!("{other:?}"),
    }

    fs::write(&bad, "c,a,b\nlo,0.1,0.2\nhi,0.3,zz\n").unwrap();
    match read_inputs(&bad, &schema.variables) {
        Err(CliError::Parse { line, column, .. }) => assert_eq!((line, column), (3, 3)),
        other => panic!("{other:?}"),
    }

    fs::write(&bad, "a,b\n0.1,0.2\n").unwrap();
    match read_inputs(&bad, &schema.variables) {
        Err(CliError::Parse { line, message, .. }) => {
            assert_eq!(line, 1);
            assert!(message.contains("missing column `c`"));
        }
        other => panic!("{other:?}"),
    }

    fs::write(&bad, "a,b,c\n0.1,0.2\n").unwrap();
    assert!(matches!(read_inputs(&bad, &schema.variables), Err(CliError::Parse { line: 2, .. })));

    fs::write(&bad, "a,b,c\n1.5,0.2,lo\n0.5,0.2,hi\n0.5,-3,hi\n").unwrap();
    match read_inputs(&bad, &schema.variables) {
        Err(e @ CliError::Core(mvemu::Error::OutOfRange(_))) => {
            let msg = e.to_string();
            assert!(msg.contains("line 2") && msg.contains("line 4") && !msg.contains("line 3"), "{msg}");
            assert_eq!(e.kind(), "out-of-range");
        }
        other => panic!("{other:?}"),
    }

    let y = dir.path().join("y.csv");
    fs::write(&y, "y\n1.0\nNaN\n").unwrap();
    assert!(matches!(read_outputs(&y, &["y".to_string()]), Err(CliError::Parse { line: 3, column: 1, .. })));
}

#[test]
fn binary_reports_json_errors_and_nonzero_exit() {
    let dir = TempDir::new().unwrap();
    let schema = write_schema(dir.path());
    let inputs = p(dir.path(), "x.csv");
    fs::write(&inputs, "a,b,c\n0.1,0.2,lo\n0.3,0.1,mid\n").unwrap();
    let outputs = p(dir.path(), "y.csv");
    fs::write(&outputs, "y\n1\n2\n").unwrap();
    let out = Process::new(env!("CARGO_BIN_EXE_mvemu"))
        .args(["--error-json", "fit", "--schema", &schema, "--inputs", &inputs, "--outputs", &outputs])
        .args(["--out", &p(dir.path(), "fit.json")])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(report["kind"], "parse");
    assert_eq!(report["line"], 3);
    assert_eq!(report["column"], 3);
    assert!(report["message"].as_str().unwrap().contains("mid"));
}

#[test]
fn write_read_write_is_byte_stable() {
    let dir = TempDir::new().unwrap();
    let fit = pipeline(dir.path(), "gp-nugget", "20");
    let schema_path = dir.path().join("schema.json");
    let schema = read_schema(&schema_path).unwrap();
    assert_eq!(to_json(&schema), fs::read_to_string(&schema_path).unwrap());

    for name in ["train.csv", "test.csv"] {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        let points = read_inputs(&dir.path().join(name), &schema.variables).unwrap();
        assert_eq!(inputs_csv(&schema.variables, &points), text, "{name}");
    }
    for name in ["train_y.csv", "test_y.csv"] {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        let y = read_outputs(&dir.path().join(name), &schema.outputs).unwrap();
        assert_eq!(matrix_csv(&schema.outputs, &y), text, "{name}");
    }
    let text = fs::read_to_string(&fit).unwrap();
    let file: FitFile = read_json(&fit).unwrap();
    assert_eq!(to_json(&file), text);
    let rebuilt = file.rebuild().unwrap();
    assert_eq!(to_json(&FitFile::new(&rebuilt, file.kind)), text);
}

#[test]
fn reruns_reproduce_artifacts_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let fit = pipeline(d, "gp-nugget", "20");
    let fit = fit.to_str().unwrap();
    diagnose(d, &p(d, "test_y.csv"));
    mvemu(&[
        "--mc-size", "4000", "sensitivity", "--fit", fit, "--out", &p(d, "sens.json"), "--table", &p(d, "sens.csv"),
        "--curves", &p(d, "curves.csv"), "--effect", "x1", "--effect", "x2|c1", "--mode", "posterior-averaged",
        "--n-outer", "3",
    ])
    .unwrap();
    mvemu(&[
        "rdvs", "--schema", &p(d, "schema.json"), "--inputs", &p(d, "train.csv"), "--outputs", &p(d, "train_y.csv"),
        "--b-rep", "4", "--iters", "200", "--out", &p(d, "rdvs.json"), "--null-csv", &p(d, "null.csv"),
        "--medians-csv", &p(d, "medians.csv"),
    ])
    .unwrap();
    mvemu(&[
        "select-model", "--schema", &p(d, "schema.json"), "--inputs", &p(d, "train.csv"), "--outputs",
        &p(d, "train_y.csv"), "--iters", "500", "--chains", "2", "--out", &p(d, "models.json"), "--table",
        &p(d, "models.txt"),
    ])
    .unwrap();
    mvemu(&["predict", "--fit", fit, "--inputs", &p(d, "test.csv"), "--out", &p(d, "pred.csv"), "--json", &p(d, "pred.json")])
        .unwrap();

    let primaries = [
        "train.csv", "train_y.csv", "test.csv", "fit.json", "diag.json", "sens.json", "rdvs.json", "models.json",
        "pred.csv",
    ];
    for (i, primary) in primaries.iter().enumerate() {
        let manifest = p(d, &format!("{primary}.manifest.json"));
        let out_dir = p(d, &format!("rerun{i}"));
        mvemu(&["rerun", "--manifest", &manifest, "--out-dir", &out_dir]).unwrap();
        let m: mvemu_cli::manifest::RunManifest = read_json(Path::new(&manifest)).unwrap();
        for recorded in m.command.outputs() {
            let again = Path::new(&out_dir).join(recorded.file_name().unwrap());
            assert_eq!(fs::read(&recorded).unwrap(), fs::read(&again).unwrap(), "{}", recorded.display());
        }
    }

    fs::write(d.join("test_y.csv"), "tampered\n").unwrap();
    let err = mvemu(&["rerun", "--manifest", &p(d, "diag.json.manifest.json"), "--out-dir", &p(d, "x")]).unwrap_err();
    assert_eq!(err.kind(), "mismatch");
}
