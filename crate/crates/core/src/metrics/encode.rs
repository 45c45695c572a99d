use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::codec::{ColumnKind, Row, Table, TableSchema, Value};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ColumnCode {
    /// Sorted categories seen at fit time; unseen values encode as zeros.
    OneHot {
        column: usize,
        categories: Vec<String>,
    },
    ZScore {
        column: usize,
        mean: f64,
        std: f64,
    },
}

/// One-hot for categorical columns, z-score for numeric ones, with all
/// statistics taken from the table it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    schema: TableSchema,
    codes: Vec<ColumnCode>,
    dim: usize,
    /// Sorted target classes seen at fit time, when the target is excluded.
    classes: Vec<String>,
    target: Option<usize>,
}

impl FeatureEncoder {
    /// Fits on `table`. With `exclude_target` the target column is left out
    /// of the features and its classes are recorded for label encoding.
    pub fn fit(table: &Table, exclude_target: bool) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::EmptyTable("cannot fit an encoder on an empty table".into()));
        }
        let target = if exclude_target {
            Some(
                table
                    .schema
                    .target_index()
                    .ok_or_else(|| Error::InvalidSchema("table has no target column".into()))?,
            )
        } else {
            None
        };
        let mut codes = Vec::new();
        let mut dim = 0;
        for (c, col) in table.schema.columns().iter().enumerate() {
            if Some(c) == target {
                continue;
            }
            match col.kind {
                ColumnKind::Categorical => {
                    let cats: BTreeSet<String> = table.column_values(c).map(Value::canonical).collect();
                    dim += cats.len();
                    codes.push(ColumnCode::OneHot {
                        column: c,
                        categories: cats.into_iter().collect(),
                    });
                }
                ColumnKind::Numeric => {
                    let xs: Vec<f64> = table.column_values(c).filter_map(Value::as_f64).collect();
                    let (mean, std) = if xs.is_empty() {
                        (0.0, 1.0)
                    } else {
                        let m = xs.iter().sum::<f64>() / xs.len() as f64;
                        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
                        (m, if v > 0.0 { v.sqrt() } else { 1.0 })
                    };
                    dim += 1;
                    codes.push(ColumnCode::ZScore { column: c, mean, std });
                }
            }
        }
        let classes = match target {
            Some(t) => table
                .column_values(t)
                .map(Value::canonical)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            None => Vec::new(),
        };
        Ok(FeatureEncoder {
            schema: table.schema.clone(),
            codes,
            dim,
            classes,
            target,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn encode_row(&self, row: &Row) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        for code in &self.codes {
            match code {
                ColumnCode::OneHot { column, categories } => {
                    let v = row.values()[*column].canonical();
                    let hit = categories.binary_search(&v).ok();
                    out.extend((0..categories.len()).map(|i| if Some(i) == hit { 1.0 } else { 0.0 }));
                }
                ColumnCode::ZScore { column, mean, std } => {
                    // Missing numerics sit at the mean.
                    let x = row.values()[*column].as_f64().unwrap_or(*mean);
                    out.push((x - mean) / std);
                }
            }
        }
        out
    }

    /// Row-major `[rows × dim]` matrix.
    pub fn encode(&self, table: &Table) -> Result<Vec<f64>> {
        self.check(table)?;
        let mut out = Vec::with_capacity(table.len() * self.dim);
        for r in &table.rows {
            out.extend(self.encode_row(r));
        }
        Ok(out)
    }

    /// Class index of each row's target; `None` for classes unseen at fit time.
    pub fn labels(&self, table: &Table) -> Result<Vec<Option<usize>>> {
        self.check(table)?;
        let t = self
            .target
            .ok_or_else(|| Error::Config("encoder was fitted with the target as a feature".into()))?;
        Ok(table
            .rows
            .iter()
            .map(|r| self.classes.binary_search(&r.values()[t].canonical()).ok())
            .collect())
    }

    fn check(&self, table: &Table) -> Result<()> {
        if !self.schema.compatible_with(&table.schema) {
            return Err(Error::SchemaMismatch {
                expected: self.schema.len(),
                got: table.schema.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{read_csv_str, Column, Provenance};

    #[test]
    fn one_hot_and_z_score() {
        let t = read_csv_str("a,x,y\nr,1,p\ng,3,q\nr,5,p\n", true, Some("y")).unwrap();
        let e = FeatureEncoder::fit(&t, true).unwrap();
        assert_eq!(e.dim(), 3);
        let m = e.encode(&t).unwrap();
        let s = (8.0f64 / 3.0).sqrt();
        assert_eq!(&m[..3], &[0.0, 1.0, -2.0 / s]);
        assert_eq!(e.classes(), &["p".to_string(), "q".to_string()]);
        assert_eq!(e.labels(&t).unwrap(), vec![Some(0), Some(1), Some(0)]);
    }

    #[test]
    fn unseen_categories_encode_as_zeros() {
        let schema = TableSchema::new(vec![Column::open_categorical("a"), Column::open_categorical("y")], "y").unwrap();
        let row = |a: &str, y: &str| Row::new(vec![Value::text(a), Value::text(y)]);
        let fit = Table::new(schema.clone(), vec![row("u", "0"), row("v", "1")], Provenance::Original).unwrap();
        let other = Table::new(schema, vec![row("w", "2")], Provenance::Synthetic).unwrap();
        let e = FeatureEncoder::fit(&fit, true).unwrap();
        assert_eq!(e.encode(&other).unwrap(), vec![0.0, 0.0]);
        assert_eq!(e.labels(&other).unwrap(), vec![None]);
    }
}
