//! Input-variable schema, scaling to the unit cube and training datasets.
//!
//! Points handed to the numerical modules are [`Point`]s in *internal order*:
//! continuous variables first (scaled to `[0, 1]`), then categorical
//! variables encoded by level index. The user-facing order of the schema is
//! kept for every I/O boundary.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in internal order (scaled continuous coordinates, then level indices).
pub type Point = Vec<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VariableKind {
    Continuous { range: [f64; 2] },
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    #[serde(flatten)]
    pub kind: VariableKind,
}

impl Variable {
    pub fn continuous(name: &str, lo: f64, hi: f64) -> Variable {
        Variable {
            name: name.to_string(),
            kind: VariableKind::Continuous { range: [lo, hi] },
        }
    }

    pub fn categorical(name: &str, levels: &[&str]) -> Variable {
        Variable {
            name: name.to_string(),
            kind: VariableKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
            },
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.kind, VariableKind::Continuous { .. })
    }

    pub fn level_count(&self) -> Option<usize> {
        match &self.kind {
            VariableKind::Categorical { levels } => Some(levels.len()),
            VariableKind::Continuous { .. } => None,
        }
    }
}

/// Raw (unscaled, user-facing) value of one variable.
#[derive(Debug, Clone, PartialEq)]
pub enum RawValue {
    Number(f64),
    Level(String),
}

impl std::fmt::Display for RawValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RawValue::Number(v) => write!(f, "{v:?}"),
            RawValue::Level(s) => f.write_str(s),
        }
    }
}

/// Ordered variable descriptors plus the permutation to internal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Variable>", into = "Vec<Variable>")]
pub struct VariableSchema {
    variables: Vec<Variable>,
    /// `order[internal] = user index`
    order: Vec<usize>,
    p1: usize,
}

impl TryFrom<Vec<Variable>> for VariableSchema {
    type Error = Error;

    fn try_from(variables: Vec<Variable>) -> Result<Self> {
        VariableSchema::new(variables)
    }
}

impl From<VariableSchema> for Vec<Variable> {
    fn from(s: VariableSchema) -> Self {
        s.variables
    }
}

impl VariableSchema {
    pub fn new(variables: Vec<Variable>) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::Schema("schema has no variables".into()));
        }
        for (i, v) in variables.iter().enumerate() {
            if v.name.is_empty() {
                return Err(Error::Schema(format!("variable {i} has an empty name")));
            }
            if variables[..i].iter().any(|w| w.name == v.name) {
                return Err(Error::Schema(format!("duplicate variable name `{}`", v.name)));
            }
            match &v.kind {
                VariableKind::Continuous { range: [lo, hi] } => {
                    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                        return Err(Error::Schema(format!("variable `{}` needs lo < hi, got [{lo}, {hi}]", v.name)));
                    }
                }
                VariableKind::Categorical { levels } => {
                    if levels.len() < 2 {
                        return Err(Error::Schema(format!("categorical `{}` needs at least 2 levels", v.name)));
                    }
                    for (j, l) in levels.iter().enumerate() {
                        if levels[..j].contains(l) {
                            return Err(Error::Schema(format!("categorical `{}` repeats level `{l}`", v.name)));
                        }
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..variables.len()).filter(|&i| variables[i].is_continuous()).collect();
        let p1 = order.len();
        order.extend((0..variables.len()).filter(|&i| !variables[i].is_continuous()));
        Ok(Self { variables, order, p1 })
    }

    /// Total number of variables `p`.
    pub fn p(&self) -> usize {
        self.variables.len()
    }

    /// Number of continuous variables `p1`.
    pub fn p1(&self) -> usize {
        self.p1
    }

    /// Variables in user order.
    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    /// Variable at an internal index.
    pub fn variable(&self, internal: usize) -> &Variable {
        &self.variables[self.order[internal]]
    }

    pub fn user_index(&self, internal: usize) -> usize {
        self.order[internal]
    }

    pub fn internal_index(&self, name: &str) -> Option<usize> {
        self.order.iter().position(|&u| self.variables[u].name == name)
    }

    pub fn is_continuous(&self, internal: usize) -> bool {
        internal < self.p1
    }

    /// Returns a new schema with extra variables appended in user order.
    pub fn with_appended(&self, extra: Vec<Variable>) -> Result<VariableSchema> {
        let mut vars = self.variables.clone();
        vars.extend(extra);
        VariableSchema::new(vars)
    }

    /// Checks that an internal-order point conforms (length, unit range, level index).
    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.p() {
            return Err(Error::Schema(format!("point has {} coordinates, schema has {}", x.len(), self.p())));
        }
        for (i, &v) in x.iter().enumerate() {
            if i < self.p1 {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::OutOfRange(format!(
                        "scaled coordinate of `{}` is {v}, outside [0, 1]",
                        self.variable(i).name
                    )));
                }
            } else {
                let levels = self.variable(i).level_count().unwrap_or(0);
                if v.fract() != 0.0 || v < 0.0 || v as usize >= levels {
                    return Err(Error::Schema(format!(
                        "`{}` level index {v} is not one of 0..{levels}",
                        self.variable(i).name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Converts raw values given in user order into an internal point.
    pub fn to_point(&self, raw: &[RawValue]) -> Result<Point> {
        if raw.len() != self.p() {
            return Err(Error::Schema(format!("expected {} values, got {}", self.p(), raw.len())));
        }
        let mut x = vec![0.0; self.p()];
        for (internal, &user) in self.order.iter().enumerate() {
            let var = &self.variables[user];
            x[internal] = match (&var.kind, &raw[user]) {
                (VariableKind::Continuous { range: [lo, hi] }, RawValue::Number(v)) => {
                    if !v.is_finite() || *v < *lo || *v > *hi {
                        return Err(Error::OutOfRange(format!(
                            "`{}` = {v} lies outside its range [{lo}, {hi}]",
                            var.name
                        )));
                    }
                    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
                }
                (VariableKind::Categorical { levels }, RawValue::Level(l)) => {
                    levels.iter().position(|x| x == l).ok_or_else(|| {
                        Error::Schema(format!("`{}` has no level `{l}` (levels: {})", var.name, levels.join(", ")))
                    })? as f64
                }
                (VariableKind::Categorical { levels }, RawValue::Number(v)) => {
                    let label = format!("{v}");
                    levels.iter().position(|x| *x == label).ok_or_else(|| {
                        Error::Schema(format!("`{}` has no level `{label}` (levels: {})", var.name, levels.join(", ")))
                    })? as f64
                }
                (VariableKind::Continuous { .. }, RawValue::Level(l)) => {
                    return Err(Error::Schema(format!("`{}` expects a number, got `{l}`", var.name)));
                }
            };
        }
        Ok(x)
    }

    /// Converts an internal point back to raw values in user order.
    pub fn from_point(&self, x: &[f64]) -> Vec<RawValue> {
        let mut raw = vec![RawValue::Number(0.0); self.p()];
        for (internal, &user) in self.order.iter().enumerate() {
            raw[user] = match &self.variables[user].kind {
                VariableKind::Continuous { range: [lo, hi] } => RawValue::Number(lo + x[internal] * (hi - lo)),
                VariableKind::Categorical { levels } => RawValue::Level(levels[x[internal] as usize].clone()),
            };
        }
        raw
    }

    /// Parses a raw cell for a variable in user order.
    pub fn parse_cell(&self, user: usize, cell: &str) -> Result<RawValue> {
        let var = &self.variables[user];
        let cell = cell.trim();
        match &var.kind {
            VariableKind::Continuous { .. } => cell
                .parse::<f64>()
                .map(RawValue::Number)
                .map_err(|_| Error::Schema(format!("`{}`: cannot parse `{cell}` as a number", var.name))),
            VariableKind::Categorical { .. } => Ok(RawValue::Level(cell.to_string())),
        }
    }
}

/// Input schema plus output names: the content of a dataset's schema file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub variables: VariableSchema,
    pub outputs: Vec<String>,
}

impl DatasetSchema {
    pub fn new(variables: VariableSchema, outputs: Vec<String>) -> Result<Self> {
        if outputs.is_empty() {
            return Err(Error::Schema("schema has no outputs".into()));
        }
        Ok(Self { variables, outputs })
    }

    pub fn k(&self) -> usize {
        self.outputs.len()
    }
}

/// Training or validation runs: internal points and the `n x k` output matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: DatasetSchema,
    pub points: Vec<Point>,
    pub y: DMatrix<f64>,
}

impl Dataset {
    pub fn new(schema: DatasetSchema, points: Vec<Point>, y: DMatrix<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Dimension("dataset has no runs".into()));
        }
        if points.len() != y.nrows() {
            return Err(Error::Dimension(format!(
                "{} input rows but {} output rows",
                points.len(),
                y.nrows()
            )));
        }
        if y.ncols() != schema.k() {
            return Err(Error::Dimension(format!("{} output columns, schema names {}", y.ncols(), schema.k())));
        }
        for p in &points {
            schema.variables.check_point(p)?;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("outputs must be finite".into()));
        }
        Ok(Self { schema, points, y })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn k(&self) -> usize {
        self.y.ncols()
    }

    pub fn variables(&self) -> &VariableSchema {
        &self.schema.variables
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> VariableSchema {
        VariableSchema::new(vec![
            Variable::categorical("site", &["north", "south"]),
            Variable::continuous("x1", 0.0, 10.0),
            Variable::continuous("x2", -1.0, 1.0),
        ])
        .unwrap()
    }

    #[test]
    fn continuous_variables_come_first_internally() {
        let s = schema();
        assert_eq!(s.p1(), 2);
        assert_eq!(s.variable(0).name, "x1");
        assert_eq!(s.variable(2).name, "site");
        assert_eq!(s.internal_index("site"), Some(2));
    }

    #[test]
    fn raw_round_trip() {
        let s = schema();
        let raw = vec![RawValue::Level("south".into()), RawValue::Number(2.5), RawValue::Number(0.0)];
        let x = s.to_point(&raw).unwrap();
        assert_eq!(x, vec![0.25, 0.5, 1.0]);
        assert_eq!(s.from_point(&x), raw);
    }

    #[test]
    fn out_of_range_and_unknown_levels() {
        let s = schema();
        let raw = vec![RawValue::Level("south".into()), RawValue::Number(11.0), RawValue::Number(0.0)];
        assert!(matches!(s.to_point(&raw), Err(Error::OutOfRange(_))));
        let raw = vec![RawValue::Level("east".into()), RawValue::Number(1.0), RawValue::Number(0.0)];
        assert!(matches!(s.to_point(&raw), Err(Error::Schema(_))));
    }

    #[test]
    fn invalid_schemas_are_rejected() {
        assert!(VariableSchema::new(vec![Variable::continuous("a", 1.0, 1.0)]).is_err());
        assert!(VariableSchema::new(vec![Variable::categorical("a", &["x"])]).is_err());
        assert!(VariableSchema::new(vec![Variable::continuous("a", 0.0, 1.0), Variable::continuous("a", 0.0, 1.0)]).is_err());
    }

    #[test]
    fn schema_json_keeps_user_order() {
        let s = schema();
        let json = serde_json_like(&s);
        assert!(json.find("site").unwrap() < json.find("x1").unwrap());
    }

    fn serde_json_like(s: &VariableSchema) -> String {
        let vars: Vec<Variable> = s.clone().into();
        format!("{vars:?}")
    }
}
