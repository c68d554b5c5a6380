use std::fs;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use clap::Parser;
use http_body_util::BodyExt;
use mvemu_cli::commands::{run, Cli};
use mvemu_cli::fitfile::load_fit;
use mvemu_cli::io::{read_json, read_outputs};
use mvemu_cli::server::{router, AppState};
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tempfile::TempDir;

fn mvemu(args: &[&str]) {
    run(&Cli::try_parse_from(std::iter::once("mvemu").chain(args.iter().copied())).unwrap()).unwrap();
}

/// Zero-nugget smooth-gp fit on 20 runs, plus a sensitivity result.
fn setup(dir: &Path) -> Arc<AppState> {
    let p = |n: &str| dir.join(n).display().to_string();
    mvemu(&["design", "--sim", "smooth-gp", "--n", "20", "--out", &p("x.csv")]);
    mvemu(&["simulate", "--sim", "smooth-gp", "--inputs", &p("x.csv"), "--out", &p("y.csv"), "--schema-out", &p("schema.json")]);
    mvemu(&[
        "fit", "--schema", &p("schema.json"), "--inputs", &p("x.csv"), "--outputs", &p("y.csv"), "--emulator", "gp",
        "--out", &p("fit.json"),
    ]);
    mvemu(&["--mc-size", "2000", "sensitivity", "--fit", &p("fit.json"), "--out", &p("sens.json")]);
    Arc::new(AppState {
        fit: load_fit(&dir.join("fit.json")).unwrap(),
        sensitivity: Some(read_json(&dir.join("sens.json")).unwrap()),
        seed: 0,
        effect_mc: 500,
    })
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = tower::ServiceExt::oneshot(router(state.clone()), req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn training_inputs(dir: &Path) -> Vec<Vec<Value>> {
    let mut rdr = csv::Reader::from_path(dir.join("x.csv")).unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            vec![
                json!(r[0].parse::<f64>().unwrap()),
                json!(r[1].parse::<f64>().unwrap()),
                json!(r[2].parse::<f64>().unwrap()),
                json!(&r[3]),
            ]
        })
        .collect()
}

fn sig4(a: f64, b: f64) -> bool {
    (a - b).abs() <= 5e-5 * a.abs().max(b.abs()).max(1e-300)
}

#[tokio::test]
async fn predict_at_a_training_input_interpolates() {
    let dir = TempDir::new().unwrap();
    let st = setup(dir.path());
    let y = read_outputs(&dir.path().join("y.csv"), &st.fit.schema().outputs).unwrap();
    for (u, x) in training_inputs(dir.path()).into_iter().enumerate().take(5) {
        let (status, body) = call(&st, "POST", "/predict", Some(json!({ "inputs": x }))).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        for s in 0..y.ncols() {
            let mean = body["mean"][s].as_f64().unwrap();
            let width = body["upper"][s].as_f64().unwrap() - body["lower"][s].as_f64().unwrap();
            assert!((mean - y[(u, s)]).abs() < 1e-6, "{mean} vs {}", y[(u, s)]);
            assert!(width <= 1e-6, "width {width}");
        }
    }
}

#[tokio::test]
async fn predict_matches_the_cli_to_four_significant_figures() {
    let dir = TempDir::new().unwrap();
    let st = setup(dir.path());
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let mut csv = String::from("x1,x2,x3,c1\n");
    let mut bodies = Vec::new();
    for _ in 0..20 {
        let x = [rng.random::<f64>(), rng.random::<f64>(), 10.0 + 10.0 * rng.random::<f64>()];
        let c = if rng.random::<bool>() { "high" } else { "low" };
        csv.push_str(&format!("{:?},{:?},{:?},{c}\n", x[0], x[1], x[2]));
        bodies.push(json!({ "inputs": { "x1": x[0], "x2": x[1], "x3": x[2], "c1": c } }));
    }
    let inputs = dir.path().join("random.csv");
    fs::write(&inputs, csv).unwrap();
    let out = dir.path().join("pred.csv");
    mvemu(&[
        "predict", "--fit", dir.path().join("fit.json").to_str().unwrap(), "--inputs", inputs.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let cli: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let outputs = &st.fit.schema().outputs;
    for (u, b) in bodies.into_iter().enumerate() {
        let (status, body) = call(&st, "POST", "/predict", Some(b)).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        for (s, name) in outputs.iter().enumerate() {
            let rec = &cli[u * outputs.len() + s];
            assert_eq!((&rec[0], &rec[1]), (u.to_string().as_str(), name.as_str()));
            for (col, key) in [(2, "mean"), (5, "lower"), (6, "upper")] {
                let want: f64 = rec[col].parse().unwrap();
                let got = body[key][s].as_f64().unwrap();
                assert!(sig4(want, got), "{key} row {u} output {name}: {got} vs {want}");
            }
            assert_eq!(body["dof"].as_f64().unwrap(), rec[4].parse::<f64>().unwrap());
        }
    }
}

#[tokio::test]
async fn batch_matches_single_predictions() {
    let dir = TempDir::new().unwrap();
    let st = setup(dir.path());
    let xs: Vec<Vec<Value>> = training_inputs(dir.path()).into_iter().take(3).collect();
    let (status, batch) = call(&st, "POST", "/predict-batch", Some(json!({ "inputs": xs, "level": 0.9 }))).await;
    assert_eq!(status, StatusCode::OK, "{batch}");
    for (i, x) in xs.iter().enumerate() {
        let (_, single) = call(&st, "POST", "/predict", Some(json!({ "inputs": x, "level": 0.9 }))).await;
        assert_eq!(batch["predictions"][i], single);
    }
}

#[tokio::test]
async fn schema_round_trips_the_schema_file() {
    let dir = TempDir::new().unwrap();
    let st = setup(dir.path());
    let (status, body) = call(&st, "GET", "/schema", None).await;
    assert_eq!(status, StatusCode::OK);
    let file: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("schema.json")).unwrap()).unwrap();
    assert_eq!(body, file);
}

#[tokio::test]
async fn schema_violations_are_400_and_range_violations_422() {
    let dir = TempDir::new().unwrap();
    let st = setup(dir.path());
    let cases = [
        (json!({ "inputs": [0.5, 0.5, 15.0] }), "inputs"),
        (json!({ "inputs": { "x1": 0.5, "x2": 0.5, "x3": 15.0 } }), "inputs.c1"),
        (json!({ "inputs": { "x1": 0.5, "x2": 0.5, "x3": 15.0, "c1": "mid" } }), "inputs.c1"),
        (json!({ "inputs": { "x1": "a", "x2": 0.5, "x3": 15.0, "c1": "low" } }), "inputs.x1"),
        (json!({ "inputs": { "x1": 0.5, "x2": 0.5, "x3": 15.0, "c1": "low", "x9": 1 } }), "inputs.x9"),
        (json!({ "level": 0.95 }), "inputs"),
    ];
    for (body, field) in cases {
        let (status, resp) = call(&st, "POST", "/predict", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{resp}");
        assert_eq!(resp["error"], "schema");
        assert!(resp["errors"].as_array().unwrap().iter().any(|e| e["field"] == field), "{resp}");
    }
    let req = Request::builder().method("POST").uri("/predict").body(Body::from("{not json")).unwrap();
    let resp = tower::ServiceExt::oneshot(router(st.clone()), req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);

    let (status, resp) = call(
        &st,
        "POST",
        "/predict",
        Some(json!({ "inputs": { "x1": 1.5, "x2": 0.5, "x3": 25.0, "c1": "low" } })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(resp["error"], "out-of-range");
    let fields: Vec<&str> = resp["errors"].as_array().unwrap().iter().map(|e| e["field"].as_str().unwrap()).collect();
    assert_eq!(fields, ["inputs.x1", "inputs.x3"]);

    let (status, _) = call(
        &st,
        "POST",
        "/conditional-effect",
        Some(json!({ "variable": "x1", "conditioning": { "x3": 9.0 } })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&st, "POST", "/conditional-effect", Some(json!({ "variable": "nope" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn conditional_effect_is_deterministic_and_in_raw_units() {
    let dir = TempDir::new().unwrap();
    let st = setup(dir.path());
    let req = json!({ "variable": "x3", "conditioning": { "c1": "high" }, "grid": [10.0, 15.0, 20.0] });
    let (status, a) = call(&st, "POST", "/conditional-effect", Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK, "{a}");
    let (_, b) = call(&st, "POST", "/conditional-effect", Some(req)).await;
    assert_eq!(a, b);
    assert_eq!(a["grid"], json!([10.0, 15.0, 20.0]));
    assert_eq!(a["conditioning"], json!({ "c1": "high" }));
    for i in 0..3 {
        let (e, lo, hi) = (a["effect"][i].as_f64().unwrap(), a["lower"][i].as_f64().unwrap(), a["upper"][i].as_f64().unwrap());
        assert!(lo <= e && e <= hi);
    }
    let (_, c) = call(&st, "POST", "/conditional-effect", Some(json!({ "variable": "c1" }))).await;
    assert_eq!(c["grid"], json!(["low", "high"]));
}

#[tokio::test]
async fn sensitivity_is_served_when_cached() {
    let dir = TempDir::new().unwrap();
    let st = setup(dir.path());
    let (status, body) = call(&st, "GET", "/sensitivity", None).await;
    assert_eq!(status, StatusCode::OK);
    let file: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("sens.json")).unwrap()).unwrap();
    assert_eq!(body, file);
    let empty = Arc::new(AppState {
        fit: st.fit.clone(),
        sensitivity: None,
        seed: 0,
        effect_mc: 500,
    });
    let (status, body) = call(&empty, "GET", "/sensitivity", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["errors"][0]["message"].as_str().unwrap().contains("mvemu sensitivity"));
}
