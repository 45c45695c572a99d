//! Table rows and their sentence form.
//!
//! A row is rendered as `"<name> is <value>, <name> is <value>, ..."` in
//! schema column order. The mapping is lossless: values containing the clause
//! delimiter are backslash-escaped, missing cells render as `unknown`, and
//! numbers use their shortest round-trippable decimal form.

mod csv_io;
mod sentence;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{load_csv, load_csv_with_schema, read_csv_str, write_csv, write_csv_string};
pub use sentence::{
    parse_sentence, serialize_row, serialize_row_in_order, RejectReason, Rejection, CLAUSE_SEP, JOINER, MISSING_TOKEN,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Values(Vec<String>),
    Range { min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Domain>,
}

impl Column {
    pub fn categorical(name: impl Into<String>, values: &[&str]) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Categorical,
            domain: Some(Domain::Values(values.iter().map(|v| v.to_string()).collect())),
        }
    }

    pub fn numeric(name: impl Into<String>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Numeric,
            domain: None,
        }
    }

    pub fn open_categorical(name: impl Into<String>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Categorical,
            domain: None,
        }
    }

    /// Returns false when `value` violates the column's declared domain.
    pub fn admits(&self, value: &Value) -> bool {
        match (value, &self.domain) {
            (Value::Missing, _) | (_, None) => true,
            (Value::Text(s), Some(Domain::Values(vs))) => vs.iter().any(|v| v == s),
            (Value::Number(x), Some(Domain::Range { min, max })) => *x >= *min && *x <= *max,
            (Value::Number(x), Some(Domain::Values(vs))) => {
                let c = canonical_number(*x);
                vs.contains(&c)
            }
            (Value::Text(_), Some(Domain::Range { .. })) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    columns: Vec<Column>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_column: Option<String>,
}

impl TableSchema {
    pub fn new(columns: Vec<Column>, target_column: impl Into<String>) -> Result<Self> {
        let schema = TableSchema {
            columns,
            target_column: Some(target_column.into()),
        };
        schema.validate()?;
        Ok(schema)
    }

    /// A schema with no designated target, e.g. for codec-only use.
    pub fn without_target(columns: Vec<Column>) -> Result<Self> {
        let schema = TableSchema {
            columns,
            target_column: None,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if c.name.is_empty() {
                return Err(Error::InvalidSchema("empty column name".into()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate column {:?}", c.name)));
            }
            match &c.domain {
                Some(Domain::Values(vs)) if vs.is_empty() => {
                    return Err(Error::InvalidSchema(format!("column {:?} has an empty domain", c.name)))
                }
                Some(Domain::Range { min, max }) if !(min <= max) => {
                    return Err(Error::InvalidSchema(format!(
                        "column {:?} has an inverted range",
                        c.name
                    )))
                }
                _ => {}
            }
        }
        if let Some(t) = &self.target_column {
            if !seen.contains(t.as_str()) {
                return Err(Error::InvalidSchema(format!("target column {t:?} is not a column")));
            }
        }
        Ok(())
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn target_column(&self) -> Option<&str> {
        self.target_column.as_deref()
    }

    pub fn target_index(&self) -> Option<usize> {
        self.target_column.as_deref().and_then(|t| self.index_of(t))
    }

    pub fn with_target(mut self, target: impl Into<String>) -> Result<Self> {
        self.target_column = Some(target.into());
        self.validate()?;
        Ok(self)
    }

    /// Checks kinds and domains of a row against this schema.
    pub fn check_row(&self, row: &Row) -> Result<()> {
        if row.len() != self.len() {
            return Err(Error::SchemaMismatch {
                expected: self.len(),
                got: row.len(),
            });
        }
        for (c, v) in self.columns.iter().zip(row.values()) {
            let kind_ok = matches!(
                (c.kind, v),
                (_, Value::Missing)
                    | (ColumnKind::Categorical, Value::Text(_))
                    | (ColumnKind::Numeric, Value::Number(_))
            );
            if !kind_ok {
                return Err(Error::InvalidSchema(format!(
                    "value {v} does not match the kind of column {:?}",
                    c.name
                )));
            }
            if let Value::Number(x) = v {
                if !x.is_finite() {
                    return Err(Error::InvalidSchema(format!("non-finite value in column {:?}", c.name)));
                }
            }
        }
        Ok(())
    }

    /// Same column names, kinds and order; domains and target may differ.
    pub fn compatible_with(&self, other: &TableSchema) -> bool {
        self.columns.len() == other.columns.len()
            && self
                .columns
                .iter()
                .zip(&other.columns)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind)
    }
}

/// One cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Missing,
    Number(f64),
    Text(String),
}

impl Value {
    pub fn text(s: impl Into<String>) -> Self {
        Value::Text(s.into())
    }

    /// Canonical string form: shortest decimal for numbers, `unknown` for
    /// missing cells.
    pub fn canonical(&self) -> String {
        match self {
            Value::Missing => MISSING_TOKEN.to_string(),
            Value::Number(x) => canonical_number(*x),
            Value::Text(s) => s.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(x) => Some(*x),
            _ => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// Shortest decimal string that parses back to the same `f64`. Negative zero
/// is folded into zero.
pub fn canonical_number(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    format!("{x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row(Vec<Value>);

impl Row {
    pub fn new(values: Vec<Value>) -> Self {
        Row(values)
    }

    pub fn values(&self) -> &[Value] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Value> {
        self.0.get(i)
    }

    /// Canonical full-row tuple used for exact duplicate detection.
    pub fn canonical_key(&self) -> Vec<String> {
        self.0.iter().map(Value::canonical).collect()
    }
}

impl From<Vec<Value>> for Row {
    fn from(v: Vec<Value>) -> Self {
        Row(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub schema: TableSchema,
    pub rows: Vec<Row>,
    pub provenance: Provenance,
}

impl Table {
    pub fn new(schema: TableSchema, rows: Vec<Row>, provenance: Provenance) -> Result<Self> {
        for r in &rows {
            schema.check_row(r)?;
        }
        Ok(Table {
            schema,
            rows,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sentence form of every row.
    pub fn sentences(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| serialize_row(r, &self.schema).expect("rows conform to schema"))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Table {
        Table {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            provenance: self.provenance,
        }
    }

    pub fn column_values(&self, idx: usize) -> impl Iterator<Item = &Value> {
        self.rows.iter().map(move |r| &r.values()[idx])
    }
}
