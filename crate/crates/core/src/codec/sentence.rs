use std::fmt;

use serde::{Deserialize, Serialize};

use super::{canonical_number, ColumnKind, Row, TableSchema, Value};
use crate::error::{Error, Result};

pub const CLAUSE_SEP: &str = ", ";
pub const JOINER: &str = " is ";
pub const MISSING_TOKEN: &str = "unknown";

/// Why a generated sentence could not be turned back into a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    MissingFeature,
    DuplicateFeature,
    UnknownFeature,
    MalformedClause,
    NumericParseFailure,
    OutOfDomain,
}

impl RejectReason {
    pub const ALL: [RejectReason; 6] = [
        RejectReason::MissingFeature,
        RejectReason::DuplicateFeature,
        RejectReason::UnknownFeature,
        RejectReason::MalformedClause,
        RejectReason::NumericParseFailure,
        RejectReason::OutOfDomain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::MissingFeature => "missing-feature",
            RejectReason::DuplicateFeature => "duplicate-feature",
            RejectReason::UnknownFeature => "unknown-feature",
            RejectReason::MalformedClause => "malformed-clause",
            RejectReason::NumericParseFailure => "numeric-parse-failure",
            RejectReason::OutOfDomain => "out-of-domain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub reason: RejectReason,
    pub detail: String,
}

impl Rejection {
    fn new(reason: RejectReason, detail: impl Into<String>) -> Self {
        Rejection {
            reason,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.reason.as_str(), self.detail)
    }
}

fn escape(s: &str, out: &mut String) {
    for ch in s.chars() {
        if ch == '\\' || ch == ',' {
            out.push('\\');
        }
        out.push(ch);
    }
}

fn render_value(v: &Value, out: &mut String) {
    match v {
        Value::Missing => out.push_str(MISSING_TOKEN),
        Value::Number(x) => out.push_str(&canonical_number(*x)),
        Value::Text(s) => {
            // A literal "unknown" must not collide with the missing marker.
            if s == MISSING_TOKEN {
                out.push('\\');
            }
            escape(s, out);
        }
    }
}

/// Renders `row` as `"<name> is <value>, ..."` in schema order.
pub fn serialize_row(row: &Row, schema: &TableSchema) -> Result<String> {
    let order: Vec<usize> = (0..schema.len()).collect();
    serialize_row_in_order(row, schema, &order)
}

/// Like [`serialize_row`] with an explicit clause order (feature permutation).
pub fn serialize_row_in_order(row: &Row, schema: &TableSchema, order: &[usize]) -> Result<String> {
    if row.len() != schema.len() {
        return Err(Error::SchemaMismatch {
            expected: schema.len(),
            got: row.len(),
        });
    }
    let mut out = String::new();
    for (k, &i) in order.iter().enumerate() {
        if k > 0 {
            out.push_str(CLAUSE_SEP);
        }
        escape(&schema.columns()[i].name, &mut out);
        out.push_str(JOINER);
        render_value(&row.values()[i], &mut out);
    }
    Ok(out)
}

/// Splits on unescaped `", "`. Escapes are kept in the pieces.
fn split_clauses(s: &str) -> std::result::Result<Vec<&str>, Rejection> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b',' => {
                if bytes.get(i + 1) != Some(&b' ') {
                    return Err(Rejection::new(
                        RejectReason::MalformedClause,
                        format!("unescaped ',' at byte {i}"),
                    ));
                }
                out.push(&s[start..i]);
                i += 2;
                start = i;
            }
            _ => i += 1,
        }
    }
    out.push(&s[start..]);
    Ok(out)
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            out.push(chars.next()?);
        } else {
            out.push(c);
        }
    }
    Some(out)
}

/// Parses a generated sentence back into a row.
///
/// Clauses may appear in any order; the returned row is in schema order.
/// Failures are returned as a [`Rejection`] rather than an error since the
/// generation pipeline counts them.
pub fn parse_sentence(sentence: &str, schema: &TableSchema) -> std::result::Result<Row, Rejection> {
    let escaped_names: Vec<String> = schema
        .columns()
        .iter()
        .map(|c| {
            let mut s = String::new();
            escape(&c.name, &mut s);
            s.push_str(JOINER);
            s
        })
        .collect();

    let mut slots: Vec<Option<Value>> = vec![None; schema.len()];
    if !sentence.is_empty() {
        for clause in split_clauses(sentence)? {
            // Longest matching prefix wins so names containing " is " work.
            let col = escaped_names
                .iter()
                .enumerate()
                .filter(|(_, p)| clause.starts_with(p.as_str()))
                .max_by_key(|(_, p)| p.len())
                .map(|(i, _)| i);
            let Some(ci) = col else {
                return Err(if clause.contains(JOINER) {
                    let name = clause.split(JOINER).next().unwrap_or_default();
                    Rejection::new(RejectReason::UnknownFeature, format!("feature {name:?}"))
                } else {
                    Rejection::new(RejectReason::MalformedClause, format!("clause {clause:?}"))
                });
            };
            let column = &schema.columns()[ci];
            if slots[ci].is_some() {
                return Err(Rejection::new(
                    RejectReason::DuplicateFeature,
                    format!("feature {:?}", column.name),
                ));
            }
            let raw = &clause[escaped_names[ci].len()..];
            let value = if raw == MISSING_TOKEN {
                Value::Missing
            } else {
                let text =
                    unescape(raw).ok_or_else(|| Rejection::new(RejectReason::MalformedClause, "dangling escape"))?;
                match column.kind {
                    ColumnKind::Categorical => Value::Text(text),
                    ColumnKind::Numeric => match text.parse::<f64>() {
                        Ok(x) if x.is_finite() => Value::Number(if x == 0.0 { 0.0 } else { x }),
                        _ => {
                            return Err(Rejection::new(
                                RejectReason::NumericParseFailure,
                                format!("{:?} for feature {:?}", text, column.name),
                            ))
                        }
                    },
                }
            };
            if !column.admits(&value) {
                return Err(Rejection::new(
                    RejectReason::OutOfDomain,
                    format!("{value} for feature {:?}", column.name),
                ));
            }
            slots[ci] = Some(value);
        }
    }
    let mut values = Vec::with_capacity(slots.len());
    for (slot, c) in slots.into_iter().zip(schema.columns()) {
        match slot {
            Some(v) => values.push(v),
            None => {
                return Err(Rejection::new(
                    RejectReason::MissingFeature,
                    format!("feature {:?}", c.name),
                ))
            }
        }
    }
    Ok(Row::new(values))
}
