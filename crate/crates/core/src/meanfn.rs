//! Mean-function term algebra: marginal term sets, model-matrix expansion and
//! single-term neighbourhoods for model search.
//!
//! Column order of `H` is the order of [`Term`]: intercept, linear terms by
//! internal variable index, quadratics, then interactions lexicographically.
//! Categorical variables enter through their {0, 1} (corner-point) coding,
//! so they must have exactly two levels to appear in a mean function.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Point, VariableSchema};

/// A polynomial term over internal variable indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Intercept,
    Linear(usize),
    Quadratic(usize),
    /// Always stored with the smaller index first.
    Interaction(usize, usize),
}

impl Term {
    pub fn interaction(a: usize, b: usize) -> Term {
        Term::Interaction(a.min(b), a.max(b))
    }

    fn parents(&self) -> Vec<Term> {
        match *self {
            Term::Intercept | Term::Linear(_) => vec![],
            Term::Quadratic(v) => vec![Term::Linear(v)],
            Term::Interaction(a, b) => vec![Term::Linear(a), Term::Linear(b)],
        }
    }

    fn vars(&self) -> Vec<usize> {
        match *self {
            Term::Intercept => vec![],
            Term::Linear(v) | Term::Quadratic(v) => vec![v],
            Term::Interaction(a, b) => vec![a, b],
        }
    }

    #[inline]
    fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Term::Intercept => 1.0,
            Term::Linear(v) => x[v],
            Term::Quadratic(v) => x[v] * x[v],
            Term::Interaction(a, b) => x[a] * x[b],
        }
    }

    /// Human-readable label, e.g. `1`, `x1`, `x1^2`, `x1:site`.
    pub fn label(&self, schema: &VariableSchema) -> String {
        let name = |v: usize| schema.variable(v).name.clone();
        match *self {
            Term::Intercept => "1".to_string(),
            Term::Linear(v) => name(v),
            Term::Quadratic(v) => format!("{}^2", name(v)),
            Term::Interaction(a, b) => format!("{}:{}", name(a), name(b)),
        }
    }

    pub fn describe(&self, schema: &VariableSchema) -> TermDescriptor {
        let kind = match self {
            Term::Intercept => "intercept",
            Term::Linear(_) => "linear",
            Term::Quadratic(_) => "quadratic",
            Term::Interaction(..) => "interaction",
        };
        TermDescriptor {
            kind: kind.to_string(),
            vars: self.vars().into_iter().map(|v| schema.variable(v).name.clone()).collect(),
        }
    }

    pub fn from_descriptor(d: &TermDescriptor, schema: &VariableSchema) -> Result<Term> {
        let idx = |name: &String| {
            schema
                .internal_index(name)
                .ok_or_else(|| Error::Schema(format!("term references unknown variable `{name}`")))
        };
        let vars = d.vars.iter().map(idx).collect::<Result<Vec<_>>>()?;
        let term = match (d.kind.as_str(), vars.as_slice()) {
            ("intercept", []) => Term::Intercept,
            ("linear", [v]) => Term::Linear(*v),
            ("quadratic", [v]) => Term::Quadratic(*v),
            ("interaction", [a, b]) => Term::interaction(*a, *b),
            _ => {
                return Err(Error::Schema(format!(
                    "malformed term `{}` with {} variables",
                    d.kind,
                    d.vars.len()
                )))
            }
        };
        term.check(schema)?;
        Ok(term)
    }

    fn check(&self, schema: &VariableSchema) -> Result<()> {
        for v in self.vars() {
            if v >= schema.p() {
                return Err(Error::Schema(format!("term references unknown variable index {v}")));
            }
            if let Some(levels) = schema.variable(v).level_count() {
                if levels != 2 {
                    return Err(Error::Schema(format!(
                        "categorical `{}` has {levels} levels; mean-function terms need two-level factors",
                        schema.variable(v).name
                    )));
                }
            }
        }
        match *self {
            Term::Quadratic(v) if !schema.is_continuous(v) => Err(Error::Schema(format!(
                "quadratic term on categorical `{}`",
                schema.variable(v).name
            ))),
            Term::Interaction(a, b) if a == b => Err(Error::Schema("interaction of a variable with itself".into())),
            _ => Ok(()),
        }
    }
}

/// Canonical, schema-independent serialized form of a term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermDescriptor {
    pub kind: String,
    pub vars: Vec<String>,
}

/// A marginal term set that always contains the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MeanFunction {
    terms: BTreeSet<Term>,
}

impl MeanFunction {
    pub fn new(terms: impl IntoIterator<Item = Term>, schema: &VariableSchema) -> Result<Self> {
        let mut set: BTreeSet<Term> = terms.into_iter().collect();
        set.insert(Term::Intercept);
        for t in &set {
            t.check(schema)?;
        }
        let mf = MeanFunction { terms: set };
        if let Some(t) = mf.terms.iter().find(|t| t.parents().iter().any(|p| !mf.terms.contains(p))) {
            return Err(Error::Schema(format!("term `{}` violates marginality", t.label(schema))));
        }
        Ok(mf)
    }

    pub fn intercept() -> Self {
        MeanFunction {
            terms: [Term::Intercept].into_iter().collect(),
        }
    }

    /// Intercept plus every linear term.
    pub fn linear(schema: &VariableSchema) -> Result<Self> {
        Self::new((0..schema.p()).map(Term::Linear), schema)
    }

    /// Intercept, all linear terms, all two-way interactions and quadratics
    /// of the continuous variables.
    pub fn maximal(schema: &VariableSchema) -> Result<Self> {
        let p = schema.p();
        let mut terms: Vec<Term> = (0..p).map(Term::Linear).collect();
        terms.extend((0..schema.p1()).map(Term::Quadratic));
        for a in 0..p {
            for b in a + 1..p {
                terms.push(Term::Interaction(a, b));
            }
        }
        Self::new(terms, schema)
    }

    pub fn from_descriptors(ds: &[TermDescriptor], schema: &VariableSchema) -> Result<Self> {
        let terms = ds.iter().map(|d| Term::from_descriptor(d, schema)).collect::<Result<Vec<_>>>()?;
        Self::new(terms, schema)
    }

    pub fn descriptors(&self, schema: &VariableSchema) -> Vec<TermDescriptor> {
        self.terms.iter().map(|t| t.describe(schema)).collect()
    }

    /// Number of columns `m`.
    pub fn m(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = &Term> {
        self.terms.iter()
    }

    pub fn contains(&self, t: &Term) -> bool {
        self.terms.contains(t)
    }

    pub fn is_subset_of(&self, other: &MeanFunction) -> bool {
        self.terms.is_subset(&other.terms)
    }

    pub fn is_marginal(&self) -> bool {
        self.terms.contains(&Term::Intercept)
            && self.terms.iter().all(|t| t.parents().iter().all(|p| self.terms.contains(p)))
    }

    /// Canonical model identifier, e.g. `1+x1+x2+x1^2`.
    pub fn id(&self, schema: &VariableSchema) -> String {
        self.terms.iter().map(|t| t.label(schema)).collect::<Vec<_>>().join("+")
    }

    /// `h(x)` for one internal point.
    pub fn row(&self, x: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| t.eval(x)).collect()
    }

    /// Model matrix `H` (`n x m`).
    pub fn expand(&self, points: &[Point], schema: &VariableSchema) -> Result<DMatrix<f64>> {
        for t in &self.terms {
            t.check(schema)?;
        }
        for p in points {
            schema.check_point(p)?;
        }
        Ok(self.expand_unchecked(points))
    }

    pub(crate) fn expand_unchecked(&self, points: &[Point]) -> DMatrix<f64> {
        let terms: Vec<Term> = self.terms.iter().copied().collect();
        DMatrix::from_fn(points.len(), terms.len(), |i, j| terms[j].eval(&points[i]))
    }

    fn with(&self, t: Term) -> MeanFunction {
        let mut terms = self.terms.clone();
        terms.insert(t);
        MeanFunction { terms }
    }

    fn without(&self, t: &Term) -> MeanFunction {
        let mut terms = self.terms.clone();
        terms.remove(t);
        MeanFunction { terms }
    }
}

/// All marginal sub-models of a maximal mean function.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpace {
    schema: VariableSchema,
    maximal: MeanFunction,
}

impl ModelSpace {
    pub fn new(schema: &VariableSchema) -> Result<Self> {
        Ok(Self {
            schema: schema.clone(),
            maximal: MeanFunction::maximal(schema)?,
        })
    }

    pub fn with_maximal(schema: &VariableSchema, maximal: MeanFunction) -> Self {
        Self {
            schema: schema.clone(),
            maximal,
        }
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn maximal(&self) -> &MeanFunction {
        &self.maximal
    }

    pub fn contains(&self, mf: &MeanFunction) -> bool {
        mf.is_marginal() && mf.is_subset_of(&self.maximal)
    }
}

/// Models one legal single-term addition or removal away, removals first,
/// each in term order.
pub fn neighbours(meanfn: &MeanFunction, space: &ModelSpace) -> Vec<MeanFunction> {
    let mut out = Vec::new();
    for t in meanfn.terms() {
        if *t == Term::Intercept {
            continue;
        }
        let has_child = meanfn.terms().any(|c| c.parents().contains(t));
        if !has_child {
            out.push(meanfn.without(t));
        }
    }
    for t in space.maximal().terms() {
        if !meanfn.contains(t) && t.parents().iter().all(|p| meanfn.contains(p)) {
            out.push(meanfn.with(*t));
        }
    }
    out
}

/// Number of neighbours without materialising them.
pub fn neighbour_count(meanfn: &MeanFunction, space: &ModelSpace) -> usize {
    let removals = meanfn
        .terms()
        .filter(|t| **t != Term::Intercept && !meanfn.terms().any(|c| c.parents().contains(t)))
        .count();
    let additions = space
        .maximal()
        .terms()
        .filter(|t| !meanfn.contains(t) && t.parents().iter().all(|p| meanfn.contains(p)))
        .count();
    removals + additions
}
