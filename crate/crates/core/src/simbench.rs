//! Synthetic simulators with machine-readable ground truth.
//!
//! Simulators evaluate internal points (continuous coordinates scaled to
//! `[0, 1]`, categoricals as level indices) and are deterministic.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::meanfn::TermDescriptor;
use crate::rng::hash_point;
use crate::schema::{Dataset, DatasetSchema, Point, Variable, VariableSchema};

pub const NAMES: [&str; 6] = ["linear-truth", "smooth-gp", "interaction-bench", "noise", "sine-screen", "smooth-1d"];

const NOISE_CONSTANT: u64 = 0x5EED;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticIndex {
    pub variables: Vec<String>,
    /// Output column, or `None` for the row-sum aggregate.
    pub output: Option<usize>,
    pub value: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub active: Vec<String>,
    pub interactions: Vec<(String, String)>,
    /// Exact mean-function terms when the simulator lies in the regression class.
    pub true_terms: Option<Vec<TermDescriptor>>,
    pub sobol: Vec<AnalyticIndex>,
}

impl GroundTruth {
    pub fn index(&self, vars: &[&str], output: Option<usize>) -> Option<f64> {
        self.sobol
            .iter()
            .find(|a| a.output == output && a.variables.iter().map(String::as_str).eq(vars.iter().copied()))
            .map(|a| a.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rule {
    LinearTruth,
    SmoothGp,
    InteractionBench,
    Noise,
    SineScreen,
    Smooth1d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSimulator {
    pub name: String,
    pub schema: DatasetSchema,
    pub truth: GroundTruth,
    rule: Rule,
}

fn unit(names: &[&str]) -> Vec<Variable> {
    names.iter().map(|n| Variable::continuous(n, 0.0, 1.0)).collect()
}

fn outputs(k: usize) -> Vec<String> {
    (1..=k).map(|j| format!("y{j}")).collect()
}

fn term(kind: &str, vars: &[&str]) -> TermDescriptor {
    TermDescriptor {
        kind: kind.into(),
        vars: vars.iter().map(|v| v.to_string()).collect(),
    }
}

fn index(vars: &[&str], output: Option<usize>, value: f64, note: &str) -> AnalyticIndex {
    AnalyticIndex {
        variables: vars.iter().map(|v| v.to_string()).collect(),
        output,
        value,
        note: note.into(),
    }
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

// Coefficients of intercept, x1, x2, x1:x2 for the two outputs.
const LINEAR_B: [[f64; 2]; 4] = [[1.0, -0.5], [2.0, 1.0], [-1.5, 2.5], [3.0, -2.0]];
const LINEAR_NOISE_SD: f64 = 0.05;
const LINEAR_NOISE_CORR: f64 = 0.3;

impl SyntheticSimulator {
    pub fn by_name(name: &str) -> Result<Self> {
        let (rule, vars, k, truth) = match name {
            "linear-truth" => (
                Rule::LinearTruth,
                unit(&["x1", "x2", "x3"]),
                2,
                GroundTruth {
                    active: strings(&["x1", "x2"]),
                    interactions: vec![("x1".into(), "x2".into())],
                    true_terms: Some(vec![
                        term("intercept", &[]),
                        term("linear", &["x1"]),
                        term("linear", &["x2"]),
                        term("interaction", &["x1", "x2"]),
                    ]),
                    sobol: Vec::new(),
                },
            ),
            "smooth-gp" => {
                let mut v = unit(&["x1", "x2"]);
                v.push(Variable::continuous("x3", 10.0, 20.0));
                v.push(Variable::categorical("c1", &["low", "high"]));
                (
                    Rule::SmoothGp,
                    v,
                    5,
                    GroundTruth {
                        active: strings(&["x1", "x2", "x3", "c1"]),
                        ..Default::default()
                    },
                )
            }
            "interaction-bench" => (
                Rule::InteractionBench,
                unit(&["x1", "x2"]),
                2,
                GroundTruth {
                    active: strings(&["x1", "x2"]),
                    interactions: vec![("x1".into(), "x2".into())],
                    true_terms: None,
                    sobol: vec![
                        // y1 = (x1 - 1/2)(x2 - 1/2): both conditional means vanish
                        index(&["x1"], Some(0), 0.0, "E[y1|x1] = 0"),
                        index(&["x2"], Some(0), 0.0, "E[y1|x2] = 0"),
                        index(&["x1", "x2"], Some(0), 1.0, "all variance is interaction"),
                        // y2 = x1 + x2: V = 1/6, V_i = 1/12
                        index(&["x1"], Some(1), 0.5, "(1/12)/(1/6)"),
                        index(&["x2"], Some(1), 0.5, "(1/12)/(1/6)"),
                        index(&["x1", "x2"], Some(1), 0.0, "additive"),
                        // y1 + y2 = (x1 + 1/2)(x2 + 1/2): V = (13/12)^2 - 1 = 25/144, V_i = 1/12
                        index(&["x1"], None, 12.0 / 25.0, "(12/144)/(25/144)"),
                        index(&["x2"], None, 12.0 / 25.0, "(12/144)/(25/144)"),
                        index(&["x1", "x2"], None, 1.0 / 25.0, "(1/144)/(25/144)"),
                    ],
                },
            ),
            "noise" => (
                Rule::Noise,
                unit(&["x1", "x2"]),
                2,
                GroundTruth::default(),
            ),
            "sine-screen" => {
                let mut v = unit(&["x1", "x2"]);
                v.push(Variable::categorical("c1", &["0", "1"]));
                (
                    Rule::SineScreen,
                    v,
                    1,
                    GroundTruth {
                        active: strings(&["x1"]),
                        interactions: Vec::new(),
                        true_terms: None,
                        sobol: vec![
                            index(&["x1"], None, 1.0, "output depends on x1 only"),
                            index(&["x2"], None, 0.0, "inert"),
                            index(&["c1"], None, 0.0, "inert"),
                        ],
                    },
                )
            }
            "smooth-1d" => (
                Rule::Smooth1d,
                unit(&["x1"]),
                1,
                GroundTruth {
                    active: strings(&["x1"]),
                    interactions: Vec::new(),
                    true_terms: None,
                    sobol: vec![index(&["x1"], None, 1.0, "single input")],
                },
            ),
            other => return Err(Error::UnknownSimulator(other.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            schema: DatasetSchema::new(VariableSchema::new(vars)?, outputs(k))?,
            truth,
            rule,
        })
    }

    pub fn variables(&self) -> &VariableSchema {
        &self.schema.variables
    }

    pub fn k(&self) -> usize {
        self.schema.k()
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.variables().check_point(x)?;
        Ok(self.evaluate_unchecked(x))
    }

    fn evaluate_unchecked(&self, x: &[f64]) -> Vec<f64> {
        match self.rule {
            Rule::LinearTruth => {
                let h = [1.0, x[0], x[1], x[0] * x[1]];
                let mut rng = hash_point(0x11EA, x).stream();
                let z: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
                let c = LINEAR_NOISE_CORR;
                let e = [z[0], c * z[0] + (1.0 - c * c).sqrt() * z[1]];
                (0..2)
                    .map(|j| h.iter().zip(&LINEAR_B).map(|(hv, b)| hv * b[j]).sum::<f64>() + LINEAR_NOISE_SD * e[j])
                    .collect()
            }
            Rule::SmoothGp => vec![
                (2.0 * PI * x[0]).sin() + 0.5 * x[3],
                4.0 * (x[1] - 0.5).powi(2) + 0.5 * (PI * x[2]).sin(),
                (2.0 * PI * x[2]).cos() + x[0] * x[1],
                (PI * (x[0] + x[1])).sin() - 0.5 * x[3],
                3.0 * (x[2] - 0.3).powi(2) + 0.5 * (2.0 * PI * x[1]).cos(),
            ],
            Rule::InteractionBench => vec![(x[0] - 0.5) * (x[1] - 0.5), x[0] + x[1]],
            Rule::Noise => {
                let mut rng = hash_point(NOISE_CONSTANT, &[]).stream();
                (0..2).map(|_| StandardNormal.sample(&mut rng)).collect()
            }
            Rule::SineScreen => vec![(4.0 * PI * x[0]).sin()],
            Rule::Smooth1d => vec![(2.0 * PI * x[0]).sin() + x[0] * x[0]],
        }
    }

    /// Runs the simulator over a design.
    pub fn run(&self, points: &[Point]) -> Result<Dataset> {
        let rows = points.iter().map(|x| self.evaluate(x)).collect::<Result<Vec<_>>>()?;
        let y = DMatrix::from_fn(points.len(), self.k(), |i, j| rows[i][j]);
        Dataset::new(self.schema.clone(), points.to_vec(), y)
    }
}
