//! Deterministic synthetic tables with a known dependency structure.

use rand::distr::weighted::WeightedIndex;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::codec::{Column, Provenance, Row, Table, TableSchema, Value};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyFeature {
    pub name: String,
    pub values: Vec<String>,
    /// Sampling weights, one per value. Need not sum to one.
    pub weights: Vec<f64>,
}

impl ToyFeature {
    pub fn new(name: &str, values: &[&str], weights: &[f64]) -> Self {
        ToyFeature {
            name: name.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
            weights: weights.to_vec(),
        }
    }
}

/// Boolean rule over categorical features; the target is positive when it
/// holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "op")]
pub enum ToyRule {
    Equals { feature: String, value: String },
    Not { rule: Box<ToyRule> },
    And { rules: Vec<ToyRule> },
    Or { rules: Vec<ToyRule> },
    Xor { left: Box<ToyRule>, right: Box<ToyRule> },
}

impl ToyRule {
    pub fn equals(feature: &str, value: &str) -> Self {
        ToyRule::Equals {
            feature: feature.into(),
            value: value.into(),
        }
    }

    fn features<'a>(&'a self, out: &mut Vec<(&'a str, &'a str)>) {
        match self {
            ToyRule::Equals { feature, value } => out.push((feature, value)),
            ToyRule::Not { rule } => rule.features(out),
            ToyRule::And { rules } | ToyRule::Or { rules } => rules.iter().for_each(|r| r.features(out)),
            ToyRule::Xor { left, right } => {
                left.features(out);
                right.features(out);
            }
        }
    }

    /// Evaluates the rule on a row given the spec's feature order.
    pub fn holds(&self, features: &[ToyFeature], row: &[String]) -> bool {
        match self {
            ToyRule::Equals { feature, value } => features
                .iter()
                .position(|f| &f.name == feature)
                .is_some_and(|i| &row[i] == value),
            ToyRule::Not { rule } => !rule.holds(features, row),
            ToyRule::And { rules } => rules.iter().all(|r| r.holds(features, row)),
            ToyRule::Or { rules } => rules.iter().any(|r| r.holds(features, row)),
            ToyRule::Xor { left, right } => left.holds(features, row) != right.holds(features, row),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n_rows: usize,
    pub features: Vec<ToyFeature>,
    pub target_name: String,
    /// Positive and negative target labels.
    pub target_values: [String; 2],
    pub rule: ToyRule,
    /// Probability that a row's target is flipped.
    pub noise: f64,
    /// Adds a uniform and a Gaussian numeric column.
    #[serde(default)]
    pub numeric_columns: bool,
    pub seed: u64,
}

impl Default for ToySpec {
    /// Six skewed categorical features, 2000 rows, a target that depends on
    /// two of them, 10% label noise.
    fn default() -> Self {
        ToySpec {
            n_rows: 2000,
            features: vec![
                ToyFeature::new("color", &["red", "green", "blue"], &[0.6, 0.3, 0.1]),
                ToyFeature::new("size", &["small", "medium", "large", "huge"], &[0.4, 0.3, 0.2, 0.1]),
                ToyFeature::new(
                    "shape",
                    &["circle", "square", "triangle", "star", "hexagon"],
                    &[0.35, 0.25, 0.2, 0.12, 0.08],
                ),
                ToyFeature::new("texture", &["smooth", "rough", "bumpy"], &[0.5, 0.3, 0.2]),
                ToyFeature::new("region", &["north", "south", "east", "west"], &[0.4, 0.25, 0.2, 0.15]),
                ToyFeature::new(
                    "grade",
                    &["low", "mid", "high", "top", "elite"],
                    &[0.3, 0.3, 0.2, 0.15, 0.05],
                ),
            ],
            target_name: "label".into(),
            target_values: ["yes".into(), "no".into()],
            rule: ToyRule::Xor {
                left: Box::new(ToyRule::equals("color", "red")),
                right: Box::new(ToyRule::equals("size", "small")),
            },
            noise: 0.1,
            numeric_columns: false,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 0.5), got {}", self.noise)));
        }
        for f in &self.features {
            if f.values.is_empty() || f.values.len() != f.weights.len() {
                return Err(Error::Config(format!(
                    "feature {:?} needs one weight per value",
                    f.name
                )));
            }
            if f.weights.iter().any(|w| !(*w >= 0.0)) || f.weights.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!("feature {:?} has invalid weights", f.name)));
            }
        }
        let mut refs = Vec::new();
        self.rule.features(&mut refs);
        for (name, value) in refs {
            let f = self
                .features
                .iter()
                .find(|f| f.name == name)
                .ok_or_else(|| Error::Config(format!("rule references unknown feature {name:?}")))?;
            if !f.values.iter().any(|v| v == value) {
                return Err(Error::Config(format!(
                    "rule references unknown value {value:?} of {name:?}"
                )));
            }
        }
        self.schema().map(|_| ())
    }

    pub fn schema(&self) -> Result<TableSchema> {
        let mut cols: Vec<Column> = self
            .features
            .iter()
            .map(|f| Column {
                name: f.name.clone(),
                kind: crate::codec::ColumnKind::Categorical,
                domain: Some(crate::codec::Domain::Values(f.values.clone())),
            })
            .collect();
        if self.numeric_columns {
            cols.push(Column::numeric("uniform"));
            cols.push(Column::numeric("gaussian"));
        }
        let t: Vec<&str> = self.target_values.iter().map(String::as_str).collect();
        cols.push(Column::categorical(&self.target_name, &t));
        TableSchema::new(cols, self.target_name.clone())
    }

    /// Exact marginal probability of each value of feature `i`.
    pub fn marginal(&self, i: usize) -> Vec<f64> {
        let w = &self.features[i].weights;
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    }
}

/// Mean and standard deviation of the Gaussian column; the uniform column
/// spans `[0, 10)`.
pub const GAUSSIAN_MEAN: f64 = 50.0;
pub const GAUSSIAN_STD: f64 = 10.0;

/// Rounds to one decimal so numeric cells stay short in sentence form.
fn tenth(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

pub fn make_toy_table(spec: &ToySpec) -> Result<Table> {
    spec.validate()?;
    let schema = spec.schema()?;
    let mut r = rng::stream(spec.seed, "toy", 0);
    let pickers: Vec<WeightedIndex<f64>> = spec
        .features
        .iter()
        .map(|f| WeightedIndex::new(&f.weights).expect("validated weights"))
        .collect();
    let uniform = Uniform::new(0.0, 10.0).expect("valid range");
    let normal = Normal::new(GAUSSIAN_MEAN, GAUSSIAN_STD).expect("valid std");
    let mut rows = Vec::with_capacity(spec.n_rows);
    for _ in 0..spec.n_rows {
        let cats: Vec<String> = spec
            .features
            .iter()
            .zip(&pickers)
            .map(|(f, p)| f.values[p.sample(&mut r)].clone())
            .collect();
        let mut positive = spec.rule.holds(&spec.features, &cats);
        if r.random::<f64>() < spec.noise {
            positive = !positive;
        }
        let mut values: Vec<Value> = cats.into_iter().map(Value::Text).collect();
        if spec.numeric_columns {
            values.push(Value::Number(tenth(uniform.sample(&mut r))));
            values.push(Value::Number(tenth(normal.sample(&mut r))));
        }
        let label = &spec.target_values[if positive { 0 } else { 1 }];
        values.push(Value::text(label.clone()));
        rows.push(Row::new(values));
    }
    Table::new(schema, rows, Provenance::Original)
}

/// Fraction of rows whose target disagrees with the noiseless rule.
pub fn rule_violation_rate(spec: &ToySpec, table: &Table) -> f64 {
    let nf = spec.features.len();
    let t = table.schema.target_index().expect("toy tables have a target");
    let bad = table
        .rows
        .iter()
        .filter(|row| {
            let cats: Vec<String> = row.values()[..nf].iter().map(Value::canonical).collect();
            let want = &spec.target_values[if spec.rule.holds(&spec.features, &cats) { 0 } else { 1 }];
            row.values()[t].canonical() != *want
        })
        .count();
    bad as f64 / table.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_shape() {
        let spec = ToySpec::default();
        let t = make_toy_table(&spec).unwrap();
        assert_eq!(t.len(), 2000);
        assert_eq!(t.schema.len(), 7);
        for f in &spec.features {
            assert!((3..=5).contains(&f.values.len()));
        }
        assert_eq!(t, make_toy_table(&spec).unwrap());
    }

    #[test]
    fn noiseless_rule_always_holds() {
        let spec = ToySpec {
            rule: ToyRule::equals("color", "red"),
            noise: 0.0,
            n_rows: 500,
            ..Default::default()
        };
        let t = make_toy_table(&spec).unwrap();
        assert_eq!(rule_violation_rate(&spec, &t), 0.0);
        for row in &t.rows {
            let red = row.values()[0].canonical() == "red";
            assert_eq!(row.values()[6].canonical() == "yes", red);
        }
    }

    #[test]
    fn numeric_variant_and_validation() {
        let spec = ToySpec {
            numeric_columns: true,
            n_rows: 50,
            ..Default::default()
        };
        let t = make_toy_table(&spec).unwrap();
        assert_eq!(t.schema.len(), 9);
        assert!(t
            .column_values(6)
            .all(|v| v.as_f64().is_some_and(|x| (0.0..=10.0).contains(&x))));
        let bad = ToySpec {
            rule: ToyRule::equals("nope", "x"),
            ..Default::default()
        };
        assert!(make_toy_table(&bad).is_err());
        assert!(make_toy_table(&ToySpec {
            noise: 0.5,
            ..Default::default()
        })
        .is_err());
    }
}
