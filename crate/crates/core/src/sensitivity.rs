//! Variance-based sensitivity analysis of an aggregate output.
//!
//! Surfaces are evaluated on internal points, so a uniform law over a
//! variable's range is uniform on `[0, 1]`. The emulator surface is the
//! row-sum of the posterior predictive mean; main and conditional effects are
//! linear in the surface, so the plug-in mean gives their posterior
//! expectation directly. Variances are quadratic, and the posterior-averaged
//! mode averages them over sampled conditional-mean surfaces.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emulator::{FittedEmulator, SampledSurface};
use crate::error::{Error, Result};
use crate::rng::{Seed, Stream};
use crate::schema::{Point, VariableSchema};

/// Scalar function over internal points.
pub trait Surface: Sync {
    fn variables(&self) -> &VariableSchema;
    fn eval(&self, points: &[Point]) -> Vec<f64>;
}

/// Closed-form surface, used for analytic checks.
pub struct FnSurface<F> {
    variables: VariableSchema,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnSurface<F> {
    pub fn new(variables: VariableSchema, f: F) -> Self {
        Self { variables, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Surface for FnSurface<F> {
    fn variables(&self) -> &VariableSchema {
        &self.variables
    }

    fn eval(&self, points: &[Point]) -> Vec<f64> {
        points.iter().map(|x| (self.f)(x)).collect()
    }
}

/// Row-sum of an emulator's mean, either the plug-in posterior mean or one
/// sampled conditional-mean surface.
pub struct EmulatorSurface<'a> {
    fit: &'a FittedEmulator,
    sample: Option<SampledSurface>,
}

impl<'a> EmulatorSurface<'a> {
    pub fn plugin(fit: &'a FittedEmulator) -> Self {
        Self { fit, sample: None }
    }

    pub fn sampled(fit: &'a FittedEmulator, rng: &mut Stream) -> Result<Self> {
        Ok(Self {
            fit,
            sample: Some(fit.sample_surface(rng)?),
        })
    }
}

impl Surface for EmulatorSurface<'_> {
    fn variables(&self) -> &VariableSchema {
        self.fit.variables()
    }

    fn eval(&self, points: &[Point]) -> Vec<f64> {
        let q = match &self.sample {
            None => self.fit.mean_unchecked(points, &self.fit.posterior().m_hat, self.fit.alpha()),
            Some(s) => self.fit.mean_unchecked(points, &s.b, s.alpha()),
        };
        q.column_sum().iter().copied().collect()
    }
}

/// Posterior predictive mean of the row-sum at one internal point.
pub fn aggregate_output(fit: &FittedEmulator, x: &[f64]) -> Result<f64> {
    Ok(fit.mean_at(&[x.to_vec()])?.row(0).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum Law {
    Uniform,
    Categorical { probs: Vec<f64> },
}

/// Independent input laws, indexed internally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDistribution {
    laws: Vec<Law>,
}

impl InputDistribution {
    /// Uniform over continuous ranges, equal probability per level.
    pub fn uniform(vars: &VariableSchema) -> Self {
        let laws = (0..vars.p())
            .map(|i| match vars.variable(i).level_count() {
                None => Law::Uniform,
                Some(l) => Law::Categorical {
                    probs: vec![1.0 / l as f64; l],
                },
            })
            .collect();
        Self { laws }
    }

    pub fn with_level_probabilities(mut self, vars: &VariableSchema, name: &str, probs: Vec<f64>) -> Result<Self> {
        let i = vars
            .internal_index(name)
            .ok_or_else(|| Error::Schema(format!("unknown variable `{name}`")))?;
        let levels = vars
            .variable(i)
            .level_count()
            .ok_or_else(|| Error::Schema(format!("`{name}` is not categorical")))?;
        let total: f64 = probs.iter().sum();
        if probs.len() != levels || probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "`{name}` needs {levels} non-negative probabilities summing to 1"
            )));
        }
        self.laws[i] = Law::Categorical { probs };
        Ok(self)
    }

    pub fn laws(&self) -> &[Law] {
        &self.laws
    }

    pub fn sample(&self, rng: &mut Stream) -> Point {
        self.laws
            .iter()
            .map(|law| match law {
                Law::Uniform => rng.random::<f64>(),
                Law::Categorical { probs } => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut level = probs.len() - 1;
                    for (l, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            level = l;
                            break;
                        }
                    }
                    level as f64
                }
            })
            .collect()
    }

    fn check(&self, vars: &VariableSchema) -> Result<()> {
        if self.laws.len() != vars.p() {
            return Err(Error::Dimension(format!(
                "input distribution has {} laws, schema has {} variables",
                self.laws.len(),
                vars.p()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectCurve {
    pub variable: String,
    /// Conditioning variables and their internal values.
    pub conditions: Vec<(String, f64)>,
    /// Internal grid values (scaled coordinate or level index).
    pub grid: Vec<f64>,
    pub effect: Vec<f64>,
    pub se: Vec<f64>,
}

fn mean_se(d: &[f64]) -> (f64, f64) {
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let v = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (v / n).sqrt())
}

fn base_sample(dist: &InputDistribution, n: usize, seed: Seed, label: &str) -> Vec<Point> {
    let mut rng = seed.named(label, 0).stream();
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

fn effect_curve(
    surface: &dyn Surface,
    base: &[Point],
    f0: &[f64],
    i: usize,
    fixed: &[(usize, f64)],
    grid: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    grid.iter()
        .map(|&v| {
            let pts: Vec<Point> = base
                .iter()
                .map(|x| {
                    let mut z = x.clone();
                    z[i] = v;
                    for &(j, l) in fixed {
                        z[j] = l;
                    }
                    z
                })
                .collect();
            let d: Vec<f64> = surface.eval(&pts).iter().zip(f0).map(|(a, b)| a - b).collect();
            mean_se(&d)
        })
        .unzip()
}

fn resolve(vars: &VariableSchema, name: &str) -> Result<usize> {
    vars.internal_index(name)
        .ok_or_else(|| Error::Schema(format!("unknown variable `{name}`")))
}

fn check_grid(vars: &VariableSchema, i: usize, grid: &[f64]) -> Result<()> {
    for &v in grid {
        let mut x = vec![0.0; vars.p()];
        x[i] = v;
        vars.check_point(&x)?;
    }
    Ok(())
}

/// `E[g | x_i] - g0` over `grid`, estimated on `n_mc` paired draws.
pub fn main_effect(
    surface: &dyn Surface,
    dist: &InputDistribution,
    var: &str,
    grid: &[f64],
    n_mc: usize,
    seed: Seed,
) -> Result<EffectCurve> {
    let vars = surface.variables();
    dist.check(vars)?;
    let i = resolve(vars, var)?;
    check_grid(vars, i, grid)?;
    let base = base_sample(dist, n_mc, seed, "main-effect");
    let f0 = surface.eval(&base);
    let (effect, se) = effect_curve(surface, &base, &f0, i, &[], grid);
    Ok(EffectCurve {
        variable: var.to_string(),
        conditions: Vec::new(),
        grid: grid.to_vec(),
        effect,
        se,
    })
}

/// `E[g | x_i, x_j = l_j for each fixed (j, l_j)] - g0` over `grid`.
pub fn conditional_effect(
    surface: &dyn Surface,
    dist: &InputDistribution,
    var: &str,
    fixed: &[(String, f64)],
    grid: &[f64],
    n_mc: usize,
    seed: Seed,
) -> Result<EffectCurve> {
    let vars = surface.variables();
    dist.check(vars)?;
    let i = resolve(vars, var)?;
    check_grid(vars, i, grid)?;
    let mut idx = Vec::with_capacity(fixed.len());
    for (name, l) in fixed {
        let j = resolve(vars, name)?;
        if j == i || idx.iter().any(|(k, _)| *k == j) {
            return Err(Error::InvalidParameter(format!("`{name}` is conditioned on twice or is the effect variable")));
        }
        check_grid(vars, j, &[*l])?;
        idx.push((j, *l));
    }
    let base = base_sample(dist, n_mc, seed, "main-effect");
    let f0 = surface.eval(&base);
    let (effect, se) = effect_curve(surface, &base, &f0, i, &idx, grid);
    Ok(EffectCurve {
        variable: var.to_string(),
        conditions: fixed.to_vec(),
        grid: grid.to_vec(),
        effect,
        se,
    })
}

/// `E[g | x_i, x_j = l] - g0` for each conditioning value `l`.
#[allow(clippy::too_many_arguments)]
pub fn conditional_main_effects(
    surface: &dyn Surface,
    dist: &InputDistribution,
    var: &str,
    conditioning: &str,
    levels: &[f64],
    grid: &[f64],
    n_mc: usize,
    seed: Seed,
) -> Result<Vec<EffectCurve>> {
    levels
        .iter()
        .map(|&l| conditional_effect(surface, dist, var, &[(conditioning.to_string(), l)], grid, n_mc, seed))
        .collect()
}

/// Default grid: 21 points on `[0, 1]` or the level indices.
pub fn default_grid(vars: &VariableSchema, var: &str) -> Result<Vec<f64>> {
    let i = resolve(vars, var)?;
    Ok(match vars.variable(i).level_count() {
        Some(l) => (0..l).map(|v| v as f64).collect(),
        None => (0..21).map(|v| v as f64 / 20.0).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SobolMode {
    Plugin,
    PosteriorAveraged { n_outer: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairs {
    All,
    None,
    Listed(Vec<(String, String)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolOptions {
    pub n_mc: usize,
    pub seed: Seed,
    pub mode: SobolMode,
    pub pairs: Pairs,
    pub batches: usize,
}

impl Default for SobolOptions {
    fn default() -> Self {
        Self {
            n_mc: 10_000,
            seed: Seed(0),
            mode: SobolMode::Plugin,
            pairs: Pairs::All,
            batches: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEstimate {
    pub term: String,
    pub variables: Vec<String>,
    pub partial_variance: f64,
    pub index: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityResult {
    pub mode: SobolMode,
    pub n_mc: usize,
    pub batches: usize,
    pub seed: Seed,
    pub g0: f64,
    pub total_variance: f64,
    pub first_order: Vec<IndexEstimate>,
    pub second_order: Vec<IndexEstimate>,
    #[serde(default)]
    pub main_effects: Vec<EffectCurve>,
    #[serde(default)]
    pub conditional_effects: Vec<EffectCurve>,
    /// Indices below `-2 SE`, reported rather than clamped.
    pub warnings: Vec<String>,
}

impl SensitivityResult {
    pub fn index(&self, vars: &[&str]) -> Option<&IndexEstimate> {
        self.first_order
            .iter()
            .chain(&self.second_order)
            .find(|e| e.variables.len() == vars.len() && e.variables.iter().zip(vars).all(|(a, b)| a == b))
    }

    /// `term,index_x1000,se_x1000` rows.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("term,index_x1000,se_x1000\n");
        for e in self.first_order.iter().chain(&self.second_order) {
            out.push_str(&format!("{},{:.1},{:.1}\n", e.term, 1000.0 * e.index, 1000.0 * e.se));
        }
        out
    }
}

/// Per-batch sums for one surface.
struct BatchMoments {
    mean: f64,
    var: f64,
    first: Vec<f64>,
    closed: Vec<f64>,
}

fn pick_freeze(surface: &dyn Surface, a: &[Point], b: &[Point], first: &[usize], pairs: &[(usize, usize)]) -> BatchMoments {
    let fa = surface.eval(a);
    let fb = surface.eval(b);
    let n = a.len() as f64;
    let mean = (fa.iter().sum::<f64>() + fb.iter().sum::<f64>()) / (2.0 * n);
    let var = (fa.iter().chain(&fb).map(|v| (v - mean).powi(2)).sum::<f64>()) / (2.0 * n - 1.0);
    let mixed = |cols: &[usize]| -> f64 {
        let pts: Vec<Point> = a
            .iter()
            .zip(b)
            .map(|(xa, xb)| {
                let mut z = xa.clone();
                for &c in cols {
                    z[c] = xb[c];
                }
                z
            })
            .collect();
        let fab = surface.eval(&pts);
        fb.iter()
            .zip(&fab)
            .zip(&fa)
            .map(|((yb, yab), ya)| (yb - mean) * (yab - ya))
            .sum::<f64>()
            / n
    };
    BatchMoments {
        mean,
        var,
        first: first.iter().map(|&i| mixed(&[i])).collect(),
        closed: pairs.iter().map(|&(i, j)| mixed(&[i, j])).collect(),
    }
}

fn sd_of_mean(xs: &[f64]) -> f64 {
    mean_se(xs).1
}

/// Pick-freeze first- and second-order indices, averaging partial variances
/// over `surfaces` (one surface for plug-in mode).
pub fn sobol_indices_for(
    surfaces: &[&dyn Surface],
    dist: &InputDistribution,
    opts: &SobolOptions,
) -> Result<SensitivityResult> {
    let vars = surfaces
        .first()
        .ok_or_else(|| Error::InvalidParameter("no surface to analyse".into()))?
        .variables();
    dist.check(vars)?;
    if opts.n_mc < 1000 || opts.batches < 2 || opts.n_mc < 2 * opts.batches {
        return Err(Error::InvalidParameter("sensitivity needs n_mc >= 1000 and at least 2 batches".into()));
    }
    let first: Vec<usize> = (0..vars.p()).map(|u| resolve(vars, &vars.variables()[u].name)).collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = match &opts.pairs {
        Pairs::All => (0..vars.p())
            .flat_map(|a| (a + 1..vars.p()).map(move |b| (a, b)))
            .map(|(a, b)| (first[a], first[b]))
            .collect(),
        Pairs::None => Vec::new(),
        Pairs::Listed(l) => l
            .iter()
            .map(|(a, b)| Ok((resolve(vars, a)?, resolve(vars, b)?)))
            .collect::<Result<_>>()?,
    };
    if pairs.iter().any(|(a, b)| a == b) {
        return Err(Error::InvalidParameter("a pair must name two different variables".into()));
    }
    let per_batch = opts.n_mc / opts.batches;
    let ns = surfaces.len() as f64;
    let batches: Vec<BatchMoments> = (0..opts.batches)
        .into_par_iter()
        .map(|bi| {
            let mut rng = opts.seed.named("sobol", bi as u64).stream();
            let a: Vec<Point> = (0..per_batch).map(|_| dist.sample(&mut rng)).collect();
            let b: Vec<Point> = (0..per_batch).map(|_| dist.sample(&mut rng)).collect();
            let mut acc = BatchMoments {
                mean: 0.0,
                var: 0.0,
                first: vec![0.0; first.len()],
                closed: vec![0.0; pairs.len()],
            };
            for s in surfaces {
                let m = pick_freeze(*s, &a, &b, &first, &pairs);
                acc.mean += m.mean / ns;
                acc.var += m.var / ns;
                acc.first.iter_mut().zip(&m.first).for_each(|(x, y)| *x += y / ns);
                acc.closed.iter_mut().zip(&m.closed).for_each(|(x, y)| *x += y / ns);
            }
            acc
        })
        .collect();

    let nb = batches.len() as f64;
    let avg = |f: &dyn Fn(&BatchMoments) -> f64| batches.iter().map(f).sum::<f64>() / nb;
    let g0 = avg(&|m| m.mean);
    let v = avg(&|m| m.var);
    if !(v > 1e-20 * g0 * g0) {
        return Err(Error::DegenerateSurface(v));
    }
    let estimate = |per: &dyn Fn(&BatchMoments) -> f64, term: String, names: Vec<String>| {
        let partial = avg(per);
        let ratios: Vec<f64> = batches.iter().map(|m| per(m) / m.var).collect();
        IndexEstimate {
            term,
            variables: names,
            partial_variance: partial,
            index: partial / v,
            se: sd_of_mean(&ratios),
        }
    };
    let name = |i: usize| vars.variable(i).name.clone();
    let pos = |i: usize| first.iter().position(|&f| f == i).expect("internal index");
    let first_order: Vec<IndexEstimate> = first
        .iter()
        .enumerate()
        .map(|(k, &i)| estimate(&|m: &BatchMoments| m.first[k], name(i), vec![name(i)]))
        .collect();
    let second_order: Vec<IndexEstimate> = pairs
        .iter()
        .enumerate()
        .map(|(k, &(i, j))| {
            let (pi, pj) = (pos(i), pos(j));
            estimate(
                &|m: &BatchMoments| m.closed[k] - m.first[pi] - m.first[pj],
                format!("{}:{}", name(i), name(j)),
                vec![name(i), name(j)],
            )
        })
        .collect();
    let warnings = first_order
        .iter()
        .chain(&second_order)
        .filter(|e| e.index < -2.0 * e.se)
        .map(|e| format!("index of {} is {:.4}, below -2 SE ({:.4})", e.term, e.index, e.se))
        .collect();
    Ok(SensitivityResult {
        mode: opts.mode.clone(),
        n_mc: per_batch * opts.batches,
        batches: opts.batches,
        seed: opts.seed,
        g0,
        total_variance: v,
        first_order,
        second_order,
        main_effects: Vec::new(),
        conditional_effects: Vec::new(),
        warnings,
    })
}

/// Indices of an emulator's aggregate output in the requested mode.
pub fn sobol_indices(fit: &FittedEmulator, dist: &InputDistribution, opts: &SobolOptions) -> Result<SensitivityResult> {
    match opts.mode {
        SobolMode::Plugin => sobol_indices_for(&[&EmulatorSurface::plugin(fit)], dist, opts),
        SobolMode::PosteriorAveraged { n_outer } => {
            if n_outer == 0 {
                return Err(Error::InvalidParameter("posterior-averaged mode needs n_outer >= 1".into()));
            }
            let surfaces = (0..n_outer)
                .map(|s| EmulatorSurface::sampled(fit, &mut opts.seed.named("sobol-surface", s as u64).stream()))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&dyn Surface> = surfaces.iter().map(|s| s as &dyn Surface).collect();
            sobol_indices_for(&refs, dist, opts)
        }
    }
}
