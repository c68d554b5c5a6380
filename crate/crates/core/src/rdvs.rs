//! Reference-distribution variable selection.
//!
//! Each repetition appends a fresh inert continuous input (uniform on [0, 1])
//! and a fresh inert two-level input (fair coin) to the design, samples the
//! marginal posterior of `(log r, log eta)` of the intercept-only GP with
//! nugget by random-walk Metropolis started at the posterior mode, and records the posterior medians of the
//! inert parameters. Those medians form separate null distributions for
//! continuous and categorical inputs. Real inputs are summarised by the median
//! of their pooled samples across repetitions and called important when it
//! exceeds the chosen null quantile.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::sample_quantile;
use crate::emulator::{MarginalPosterior, PriorSpec};
use crate::error::{Error, Result};
use crate::meanfn::MeanFunction;
use crate::optim::NelderMead;
use crate::rng::Seed;
use crate::schema::{Dataset, DatasetSchema, Variable};

pub const INERT_CONTINUOUS: &str = "__inert_continuous";
pub const INERT_CATEGORICAL: &str = "__inert_categorical";
const MODE_STARTS: u64 = 20;
const MODE_BOX_LOG_R: (f64, f64) = (-3.0, 4.0);
const MODE_BOX_LOG_ETA: (f64, f64) = (-12.0, 2.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdvsOptions {
    pub b_rep: usize,
    pub iters: usize,
    pub burn_frac: f64,
    pub step: f64,
    pub quantile: f64,
    pub seed: Seed,
}

impl Default for RdvsOptions {
    fn default() -> Self {
        Self {
            b_rep: 100,
            iters: 2000,
            burn_frac: 0.5,
            step: 0.3,
            quantile: 0.95,
            seed: Seed(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableScreen {
    pub name: String,
    pub continuous: bool,
    /// Posterior median of `log r` from the pooled samples.
    pub median_log_r: f64,
    /// Null quantile it is compared against (`None` when no null exists).
    pub threshold: Option<f64>,
    pub important: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdvsResult {
    pub variables: Vec<VariableScreen>,
    /// Posterior medians of `log r` for the inert continuous input, one per repetition.
    pub null_continuous: Vec<f64>,
    pub null_categorical: Vec<f64>,
    pub acceptance: Vec<f64>,
    pub warnings: Vec<String>,
    pub options: RdvsOptions,
}

impl RdvsResult {
    /// Re-derives classifications at another null quantile.
    pub fn classify(&mut self, quantile: f64) {
        let thr = |null: &[f64]| {
            let mut s = null.to_vec();
            s.sort_by(f64::total_cmp);
            (!s.is_empty()).then(|| sample_quantile(&s, quantile))
        };
        let (tc, td) = (thr(&self.null_continuous), thr(&self.null_categorical));
        for v in &mut self.variables {
            v.threshold = if v.continuous { tc } else { td };
            v.important = v.threshold.map(|t| v.median_log_r > t);
        }
        self.options.quantile = quantile;
    }

    pub fn important(&self) -> Vec<&str> {
        self.variables
            .iter()
            .filter(|v| v.important == Some(true))
            .map(|v| v.name.as_str())
            .collect()
    }
}

struct Repetition {
    null_continuous: Option<f64>,
    null_categorical: Option<f64>,
    /// `samples[j]` for real variable `j` in user order.
    samples: Vec<Vec<f64>>,
    acceptance: f64,
}

/// Mode of the `theta` density for the original inputs. Starts are spread
/// log-uniformly over a wide box because good fits can sit on a narrow ridge
/// of small nugget and large `r` that prior-drawn starts rarely reach.
fn mode(dataset: &Dataset, seed: Seed) -> Result<Vec<f64>> {
    let obj = MarginalPosterior::new(dataset, &MeanFunction::intercept(), &PriorSpec::Weak, true)?;
    let p = dataset.variables().p();
    let starts: Vec<Vec<f64>> = std::iter::once(vec![0.0; obj.dim()])
        .chain((0..MODE_STARTS).map(|s| {
            let mut rng = seed.named("rdvs-mode", s).stream();
            let mut t: Vec<f64> = (0..p).map(|_| rng.random_range(MODE_BOX_LOG_R.0..MODE_BOX_LOG_R.1)).collect();
            t.push(rng.random_range(MODE_BOX_LOG_ETA.0..MODE_BOX_LOG_ETA.1));
            t
        }))
        .collect();
    let best = starts
        .par_iter()
        .map(|init| NelderMead::default().minimise(|t| -obj.log_posterior_theta(t), init))
        .filter(|m| m.value.is_finite())
        .min_by(|a, b| a.value.total_cmp(&b.value));
    Ok(best.map_or_else(|| vec![0.0; obj.dim()], |m| m.x))
}

pub fn rdvs_run(dataset: &Dataset, opts: &RdvsOptions) -> Result<RdvsResult> {
    if opts.b_rep == 0 || opts.iters < 2 || !(0.0..1.0).contains(&opts.burn_frac) {
        return Err(Error::InvalidParameter("RDVS needs b_rep >= 1, iters >= 2 and burn fraction in [0, 1)".into()));
    }
    let vars = dataset.variables();
    let has_cont = vars.p1() > 0;
    let has_cat = vars.p1() < vars.p();
    let mut extra = Vec::new();
    if has_cont {
        extra.push(Variable::continuous(INERT_CONTINUOUS, 0.0, 1.0));
    }
    if has_cat {
        extra.push(Variable::categorical(INERT_CATEGORICAL, &["0", "1"]));
    }
    let aug = vars.with_appended(extra)?;
    let aug_schema = DatasetSchema::new(aug.clone(), dataset.schema.outputs.clone())?;
    // internal index in the augmented schema of each original internal coordinate
    let map: Vec<usize> = (0..vars.p())
        .map(|i| aug.internal_index(&vars.variable(i).name).expect("appended schema keeps names"))
        .collect();
    let user_internal: Vec<usize> = (0..vars.p())
        .map(|u| aug.internal_index(&vars.variables()[u].name).expect("name"))
        .collect();
    let ic = aug.internal_index(INERT_CONTINUOUS);
    let id = aug.internal_index(INERT_CATEGORICAL);
    let burn = (opts.iters as f64 * opts.burn_frac).floor() as usize;
    let base_mode = mode(dataset, opts.seed)?;

    let reps: Vec<Result<Repetition>> = (0..opts.b_rep)
        .into_par_iter()
        .map(|b| {
            let mut rng = opts.seed.named("rdvs", b as u64).stream();
            let points = dataset
                .points
                .iter()
                .map(|x| {
                    let mut z = vec![0.0; aug.p()];
                    for (i, &j) in map.iter().enumerate() {
                        z[j] = x[i];
                    }
                    if let Some(c) = ic {
                        z[c] = rng.random::<f64>();
                    }
                    if let Some(d) = id {
                        z[d] = if rng.random::<bool>() { 1.0 } else { 0.0 };
                    }
                    z
                })
                .collect();
            let data = Dataset::new(aug_schema.clone(), points, dataset.y.clone())?;
            let obj = MarginalPosterior::new(&data, &MeanFunction::intercept(), &PriorSpec::Weak, true)?;
            let mut warm = vec![0.0; obj.dim()];
            for (i, &j) in map.iter().enumerate() {
                warm[j] = base_mode[i];
            }
            warm[aug.p()] = base_mode[vars.p()];
            let mut theta = vec![0.0; obj.dim()];
            let mut lp = obj.log_posterior_theta(&theta);
            for init in [warm, vec![0.0; obj.dim()]] {
                let m = NelderMead::default().minimise(|t| -obj.log_posterior_theta(t), &init);
                if -m.value > lp {
                    lp = -m.value;
                    theta = m.x;
                }
            }
            if !lp.is_finite() {
                return Err(Error::InvalidParameter("RDVS chain start has zero posterior density".into()));
            }
            let mut kept: Vec<Vec<f64>> = vec![Vec::with_capacity(opts.iters - burn); aug.p()];
            let mut accepted = 0usize;
            for it in 0..opts.iters {
                let prop: Vec<f64> = theta
                    .iter()
                    .map(|t| t + opts.step * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let lq = obj.log_posterior_theta(&prop);
                if lq.is_finite() && rng.random::<f64>().ln() < lq - lp {
                    theta = prop;
                    lp = lq;
                    accepted += 1;
                }
                if it >= burn {
                    for (l, v) in kept.iter_mut().enumerate() {
                        v.push(theta[l]);
                    }
                }
            }
            let median = |v: &[f64]| {
                let mut s = v.to_vec();
                s.sort_by(f64::total_cmp);
                sample_quantile(&s, 0.5)
            };
            Ok(Repetition {
                null_continuous: ic.map(|c| median(&kept[c])),
                null_categorical: id.map(|d| median(&kept[d])),
                samples: user_internal.iter().map(|&j| std::mem::take(&mut kept[j])).collect(),
                acceptance: accepted as f64 / opts.iters as f64,
            })
        })
        .collect();
    let reps = reps.into_iter().collect::<Result<Vec<_>>>()?;

    let mut warnings = Vec::new();
    for (b, r) in reps.iter().enumerate() {
        if r.acceptance < 0.01 || r.acceptance > 0.9 {
            warnings.push(format!("repetition {b}: acceptance rate {:.3} outside [0.01, 0.9]", r.acceptance));
        }
    }
    let variables = (0..vars.p())
        .map(|u| {
            let mut pooled: Vec<f64> = reps.iter().flat_map(|r| r.samples[u].iter().copied()).collect();
            pooled.sort_by(f64::total_cmp);
            let v = &vars.variables()[u];
            VariableScreen {
                name: v.name.clone(),
                continuous: v.is_continuous(),
                median_log_r: sample_quantile(&pooled, 0.5),
                threshold: None,
                important: None,
            }
        })
        .collect();
    let mut result = RdvsResult {
        variables,
        null_continuous: reps.iter().filter_map(|r| r.null_continuous).collect(),
        null_categorical: reps.iter().filter_map(|r| r.null_categorical).collect(),
        acceptance: reps.iter().map(|r| r.acceptance).collect(),
        warnings,
        options: opts.clone(),
    };
    result.classify(opts.quantile);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Point, VariableSchema};
    use nalgebra::DMatrix;

    fn data(seed: u64) -> Dataset {
        let mut rng = Seed(seed).stream();
        let vars = VariableSchema::new(vec![
            Variable::continuous("x1", 0.0, 1.0),
            Variable::categorical("c1", &["a", "b"]),
            Variable::continuous("x2", 0.0, 1.0),
        ])
        .unwrap();
        let schema = DatasetSchema::new(vars, vec!["y".into()]).unwrap();
        let points: Vec<Point> = (0..30)
            .map(|_| vec![rng.random(), rng.random(), if rng.random::<bool>() { 1.0 } else { 0.0 }])
            .collect();
        let y = DMatrix::from_fn(30, 1, |i, _| (4.0 * std::f64::consts::PI * points[i][0]).sin());
        Dataset::new(schema, points, y).unwrap()
    }

    #[test]
    fn reproducible_and_shaped() {
        let d = data(1);
        let opts = RdvsOptions {
            b_rep: 4,
            iters: 200,
            seed: Seed(3),
            ..Default::default()
        };
        let a = rdvs_run(&d, &opts).unwrap();
        let b = rdvs_run(&d, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.null_continuous.len(), 4);
        assert_eq!(a.null_categorical.len(), 4);
        assert_eq!(a.variables.iter().map(|v| v.name.as_str()).collect::<Vec<_>>(), ["x1", "c1", "x2"]);
        assert!(a.variables.iter().all(|v| v.important.is_some()));
    }

    #[test]
    fn reclassification_uses_stored_numbers() {
        let d = data(2);
        let mut r = rdvs_run(
            &d,
            &RdvsOptions {
                b_rep: 3,
                iters: 100,
                seed: Seed(4),
                ..Default::default()
            },
        )
        .unwrap();
        r.classify(0.0);
        let min = r.null_continuous.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(r.variables[0].threshold, Some(min));
    }
}
