//! Bayesian comparison of mean functions by MCMC model composition (MC³).
//!
//! Phase 1 proposes a neighbour `w` of the current model `v` uniformly and
//! accepts with probability
//!
//! ```text
//! min{1, pi(Y | w, r) / pi(Y | v, r) * |N(v)| / |N(w)|}
//! ```
//!
//! under the unit-information prior and a uniform prior over models. With
//! `A` fixed this ratio is `(n+1)^{k(m_v - m_w)/2} (|S_v| / |S_w|)^{n/2}` times
//! the proposal ratio. Phase 2 (GP emulators only) updates
//! `(log r, log eta)` by a Gaussian random walk for the current model.
//! `Omega_v = n (H_v^T A^-1 H_v)^-1` is recomputed whenever `A` changes.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::emulator::{EmulatorKind, MarginalPosterior, PriorSpec, LOG_ETA_BOUNDS, LOG_R_BOUNDS};
use crate::error::{Error, Result};
use crate::kernel::CorrelationConfig;
use crate::meanfn::{neighbour_count, neighbours, MeanFunction, ModelSpace, TermDescriptor};
use crate::rng::Seed;
use crate::schema::Dataset;

pub use crate::emulator::log_marginal_likelihood;

/// Log of the simplified acceptance ratio for a move `v -> w` under the
/// unit-information prior at fixed `A`, including the proposal ratio.
pub fn simplified_log_alpha(n: usize, k: usize, m_v: usize, m_w: usize, log_det_s_v: f64, log_det_s_w: f64, nv: usize, nw: usize) -> f64 {
    let (nf, kf) = (n as f64, k as f64);
    0.5 * kf * (m_v as f64 - m_w as f64) * (nf + 1.0).ln() + 0.5 * nf * (log_det_s_v - log_det_s_w) + (nv as f64).ln()
        - (nw as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mc3Options {
    pub iters: usize,
    pub burn_frac: f64,
    pub seed: Seed,
    pub kind: EmulatorKind,
    /// Random-walk standard deviation on `log r` and `log eta`.
    pub step: f64,
    /// Correlation parameters at the start of phase 2 (log scale); defaults to 0.
    pub initial_theta: Option<Vec<f64>>,
}

impl Default for Mc3Options {
    fn default() -> Self {
        Self {
            iters: 100_000,
            burn_frac: 0.1,
            seed: Seed(0),
            kind: EmulatorKind::Lightweight,
            step: 0.3,
            initial_theta: None,
        }
    }
}

/// Visit counts and chain diagnostics of one or more MC³ runs.
#[derive(Debug, Clone)]
pub struct ModelPosteriorSummary {
    pub space: ModelSpace,
    pub visits: BTreeMap<MeanFunction, usize>,
    pub iters: usize,
    pub burn_in: usize,
    pub seeds: Vec<Seed>,
    pub kind: EmulatorKind,
    pub phase1_proposed: usize,
    pub phase1_accepted: usize,
    pub phase2_proposed: usize,
    pub phase2_accepted: usize,
    /// Proposals rejected because the target was not finite.
    pub nonfinite_rejections: usize,
}

impl ModelPosteriorSummary {
    pub fn retained(&self) -> usize {
        self.visits.values().sum()
    }

    pub fn phase1_acceptance(&self) -> f64 {
        ratio(self.phase1_accepted, self.phase1_proposed)
    }

    pub fn phase2_acceptance(&self) -> f64 {
        ratio(self.phase2_accepted, self.phase2_proposed)
    }

    /// Fraction of retained iterations whose model contains each term of the
    /// maximal model.
    pub fn inclusion_probabilities(&self) -> Vec<(crate::meanfn::Term, f64)> {
        let total = self.retained() as f64;
        self.space
            .maximal()
            .terms()
            .map(|t| {
                let c: usize = self.visits.iter().filter(|(m, _)| m.contains(t)).map(|(_, c)| c).sum();
                (*t, c as f64 / total)
            })
            .collect()
    }

    pub fn frequency(&self, mf: &MeanFunction) -> f64 {
        *self.visits.get(mf).unwrap_or(&0) as f64 / self.retained() as f64
    }

    /// Adds the counts of another run over the same space.
    pub fn merge(&mut self, other: &ModelPosteriorSummary) -> Result<()> {
        if other.space != self.space || other.kind != self.kind {
            return Err(Error::InvalidParameter("cannot merge summaries of different model spaces".into()));
        }
        for (m, c) in &other.visits {
            *self.visits.entry(m.clone()).or_insert(0) += c;
        }
        self.iters += other.iters;
        self.burn_in += other.burn_in;
        self.seeds.extend(&other.seeds);
        self.phase1_proposed += other.phase1_proposed;
        self.phase1_accepted += other.phase1_accepted;
        self.phase2_proposed += other.phase2_proposed;
        self.phase2_accepted += other.phase2_accepted;
        self.nonfinite_rejections += other.nonfinite_rejections;
        Ok(())
    }

    pub fn report(&self) -> ModelPosteriorReport {
        let schema = self.space.schema();
        let total = self.retained() as f64;
        let mut models: Vec<ModelEntry> = self
            .visits
            .iter()
            .map(|(m, c)| ModelEntry {
                id: m.id(schema),
                m: m.m(),
                terms: m.descriptors(schema),
                count: *c,
                probability: *c as f64 / total,
            })
            .collect();
        models.sort_by(|a, b| b.count.cmp(&a.count).then(a.m.cmp(&b.m)));
        let modal = modal_model(self);
        ModelPosteriorReport {
            kind: self.kind,
            iters: self.iters,
            burn_in: self.burn_in,
            seeds: self.seeds.clone(),
            phase1_acceptance: self.phase1_acceptance(),
            phase2_acceptance: (self.kind != EmulatorKind::Lightweight).then(|| self.phase2_acceptance()),
            nonfinite_rejections: self.nonfinite_rejections,
            omega_recomputed_with_a: true,
            modal: ModelEntry {
                id: modal.id(schema),
                m: modal.m(),
                terms: modal.descriptors(schema),
                count: self.visits[&modal],
                probability: self.frequency(&modal),
            },
            inclusion: self
                .inclusion_probabilities()
                .into_iter()
                .map(|(t, p)| Inclusion {
                    term: t.label(schema),
                    descriptor: t.describe(schema),
                    probability: p,
                })
                .collect(),
            models,
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    pub m: usize,
    pub terms: Vec<TermDescriptor>,
    pub count: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub term: String,
    pub descriptor: TermDescriptor,
    pub probability: f64,
}

/// Serializable form of [`ModelPosteriorSummary`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPosteriorReport {
    pub kind: EmulatorKind,
    pub iters: usize,
    pub burn_in: usize,
    pub seeds: Vec<Seed>,
    pub phase1_acceptance: f64,
    pub phase2_acceptance: Option<f64>,
    pub nonfinite_rejections: usize,
    pub omega_recomputed_with_a: bool,
    pub modal: ModelEntry,
    pub inclusion: Vec<Inclusion>,
    pub models: Vec<ModelEntry>,
}

impl ModelPosteriorReport {
    /// Plain-text listing: modal model, then inclusion probabilities.
    pub fn table(&self) -> String {
        let mut out = format!(
            "modal model (m = {}, frequency {:.4}): {}\n\nterm\tinclusion\n",
            self.modal.m, self.modal.probability, self.modal.id
        );
        for inc in &self.inclusion {
            out.push_str(&format!("{}\t{:.4}\n", inc.term, inc.probability));
        }
        out.push_str(&format!(
            "\nphase 1 acceptance {:.4}; retained iterations {}\n",
            self.phase1_acceptance,
            self.iters - self.burn_in
        ));
        out
    }
}

/// Most visited model; ties go to the smaller model, then to the
/// lexicographically smaller term list.
pub fn modal_model(summary: &ModelPosteriorSummary) -> MeanFunction {
    summary
        .visits
        .iter()
        .min_by(|(a, ca), (b, cb)| cb.cmp(ca).then(a.m().cmp(&b.m())).then(a.cmp(b)))
        .map(|(m, _)| m.clone())
        .unwrap_or_else(MeanFunction::intercept)
}

/// All marginal sub-models of the space.
pub fn enumerate_models(space: &ModelSpace) -> Vec<MeanFunction> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![MeanFunction::intercept()];
    while let Some(m) = stack.pop() {
        if seen.insert(m.clone()) {
            for w in neighbours(&m, space) {
                if !seen.contains(&w) {
                    stack.push(w);
                }
            }
        }
    }
    seen.into_iter().collect()
}

struct GpTarget {
    data: Dataset,
    nugget: bool,
}

/// `ln pi(Y | v, r)` per model; for GP kinds also the prior and Jacobian of `theta`.
enum Evaluator {
    Lightweight {
        data: Dataset,
        cache: HashMap<MeanFunction, f64>,
    },
    Gp(GpTarget),
}

impl Evaluator {
    fn log_ml(&mut self, mf: &MeanFunction, theta: &[f64]) -> f64 {
        match self {
            Evaluator::Lightweight { data, cache } => *cache.entry(mf.clone()).or_insert_with(|| {
                log_marginal_likelihood(data, mf, &CorrelationConfig::Lightweight, &PriorSpec::UnitInformation)
                    .unwrap_or(f64::NEG_INFINITY)
            }),
            Evaluator::Gp(t) => match MarginalPosterior::new(&t.data, mf, &PriorSpec::UnitInformation, t.nugget) {
                Ok(obj) => obj.log_posterior_theta(theta),
                Err(_) => f64::NEG_INFINITY,
            },
        }
    }
}

/// Runs one MC³ chain from the intercept-only model.
pub fn mc3_run(dataset: &Dataset, space: &ModelSpace, opts: &Mc3Options) -> Result<ModelPosteriorSummary> {
    if space.schema() != dataset.variables() {
        return Err(Error::Schema("model space and dataset schemas differ".into()));
    }
    let (n, k) = (dataset.n(), dataset.k());
    let m_max = space.maximal().m();
    if n < m_max + k {
        return Err(Error::Propriety { n, m: m_max, k });
    }
    if !(0.0..1.0).contains(&opts.burn_frac) {
        return Err(Error::InvalidParameter(format!("burn-in fraction {} outside [0, 1)", opts.burn_frac)));
    }
    let gp = opts.kind != EmulatorKind::Lightweight;
    let p = dataset.variables().p();
    let dim = if gp { p + usize::from(opts.kind.has_nugget()) } else { 0 };
    let mut theta = match &opts.initial_theta {
        Some(t) if t.len() == dim => t.clone(),
        Some(t) => {
            return Err(Error::Dimension(format!("initial theta has length {}, expected {dim}", t.len())));
        }
        None => vec![0.0; dim],
    };
    let mut eval = if gp {
        Evaluator::Gp(GpTarget {
            data: dataset.clone(),
            nugget: opts.kind.has_nugget(),
        })
    } else {
        Evaluator::Lightweight {
            data: dataset.clone(),
            cache: HashMap::new(),
        }
    };

    let mut rng = opts.seed.named("mc3", 0).stream();
    let burn_in = (opts.iters as f64 * opts.burn_frac).floor() as usize;
    let mut current = MeanFunction::intercept();
    let mut current_lp = eval.log_ml(&current, &theta);
    if !current_lp.is_finite() {
        return Err(Error::InvalidParameter("intercept-only model has a non-finite marginal likelihood".into()));
    }
    let mut current_nbrs = neighbours(&current, space);
    let mut s = ModelPosteriorSummary {
        space: space.clone(),
        visits: BTreeMap::new(),
        iters: opts.iters,
        burn_in,
        seeds: vec![opts.seed],
        kind: opts.kind,
        phase1_proposed: 0,
        phase1_accepted: 0,
        phase2_proposed: 0,
        phase2_accepted: 0,
        nonfinite_rejections: 0,
    };

    for it in 0..opts.iters {
        if !current_nbrs.is_empty() {
            let w = current_nbrs[rng.random_range(0..current_nbrs.len())].clone();
            let w_lp = eval.log_ml(&w, &theta);
            let nw = neighbour_count(&w, space);
            s.phase1_proposed += 1;
            let log_alpha = w_lp - current_lp + (current_nbrs.len() as f64).ln() - (nw as f64).ln();
            if !w_lp.is_finite() || log_alpha.is_nan() {
                s.nonfinite_rejections += 1;
            } else if rng.random::<f64>().ln() < log_alpha {
                s.phase1_accepted += 1;
                current = w;
                current_lp = w_lp;
                current_nbrs = neighbours(&current, space);
            }
        }
        if gp {
            let proposal: Vec<f64> = theta
                .iter()
                .map(|t| {
                    let z: f64 = rng.sample(StandardNormal);
                    t + opts.step * z
                })
                .collect();
            s.phase2_proposed += 1;
            let in_bounds = proposal.iter().enumerate().all(|(i, t)| {
                let (lo, hi) = if i < p { LOG_R_BOUNDS } else { LOG_ETA_BOUNDS };
                *t >= lo && *t <= hi
            });
            if in_bounds {
                let lp = eval.log_ml(&current, &proposal);
                if !lp.is_finite() {
                    s.nonfinite_rejections += 1;
                } else if rng.random::<f64>().ln() < lp - current_lp {
                    s.phase2_accepted += 1;
                    theta = proposal;
                    current_lp = lp;
                }
            }
        }
        if it >= burn_in {
            *s.visits.entry(current.clone()).or_insert(0) += 1;
        }
    }
    Ok(s)
}

/// Exact posterior model probabilities over an enumerable space (lightweight
/// kind, unit-information prior, uniform model prior).
pub fn exact_model_probabilities(dataset: &Dataset, space: &ModelSpace) -> Result<Vec<(MeanFunction, f64)>> {
    let models = enumerate_models(space);
    let lml = models
        .iter()
        .map(|m| log_marginal_likelihood(dataset, m, &CorrelationConfig::Lightweight, &PriorSpec::UnitInformation))
        .collect::<Result<Vec<_>>>()?;
    let max = lml.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = lml.iter().map(|l| (l - max).exp()).sum();
    Ok(models.into_iter().zip(lml).map(|(m, l)| (m, (l - max).exp() / z)).collect())
}

/// Total-variation distance between chain frequencies and exact probabilities.
pub fn total_variation(summary: &ModelPosteriorSummary, exact: &[(MeanFunction, f64)]) -> f64 {
    let mut tv = 0.0;
    let mut covered = 0.0;
    for (m, p) in exact {
        let f = summary.frequency(m);
        covered += f;
        tv += (f - p).abs();
    }
    0.5 * (tv + (1.0 - covered).max(0.0))
}
