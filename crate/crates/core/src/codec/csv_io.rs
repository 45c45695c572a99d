use std::collections::HashSet;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::{canonical_number, Column, ColumnKind, Domain, Provenance, Row, Table, TableSchema, Value};
use crate::error::{Error, Result};

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "?"
}

fn read_records(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn read_file(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}

fn infer_columns(header: &[String], records: &[Vec<String>], infer: bool) -> Vec<Column> {
    header
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let cells = records.iter().map(|r| r[j].as_str()).filter(|c| !is_missing(c));
            let mut any = false;
            let numeric = infer
                && cells.clone().all(|c| {
                    any = true;
                    c.parse::<f64>().map(f64::is_finite).unwrap_or(false)
                })
                && any;
            if numeric {
                Column::numeric(name.clone())
            } else {
                let mut seen = HashSet::new();
                let values: Vec<String> = cells.filter(|c| seen.insert(*c)).map(str::to_string).collect();
                Column {
                    name: name.clone(),
                    kind: ColumnKind::Categorical,
                    domain: if infer && !values.is_empty() {
                        Some(Domain::Values(values))
                    } else {
                        None
                    },
                }
            }
        })
        .collect()
}

fn build_rows(schema: &TableSchema, records: Vec<Vec<String>>) -> Result<Vec<Row>> {
    records
        .into_iter()
        .map(|rec| {
            if rec.len() != schema.len() {
                return Err(Error::SchemaMismatch {
                    expected: schema.len(),
                    got: rec.len(),
                });
            }
            let values = rec
                .into_iter()
                .zip(schema.columns())
                .map(|(cell, col)| {
                    if is_missing(&cell) {
                        return Ok(Value::Missing);
                    }
                    match col.kind {
                        ColumnKind::Categorical => Ok(Value::Text(cell)),
                        ColumnKind::Numeric => match cell.parse::<f64>() {
                            Ok(x) if x.is_finite() => Ok(Value::Number(if x == 0.0 { 0.0 } else { x })),
                            _ => Err(Error::InvalidSchema(format!(
                                "column {:?}: {cell:?} is not a finite number",
                                col.name
                            ))),
                        },
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Row::new(values))
        })
        .collect()
}

/// Parses CSV text. With `infer` on, a column is numeric iff every non-missing
/// cell parses as a finite number; otherwise it is categorical with the
/// observed values as its domain. The target is the last column unless named.
pub fn read_csv_str(text: &str, infer: bool, target: Option<&str>) -> Result<Table> {
    let (header, records) = read_records(text)?;
    let columns = infer_columns(&header, &records, infer);
    let schema = match (target, header.last()) {
        (Some(t), _) => TableSchema::new(columns, t)?,
        (None, Some(last)) => TableSchema::new(columns, last.clone())?,
        (None, None) => TableSchema::without_target(columns)?,
    };
    let rows = build_rows(&schema, records)?;
    Table::new(schema, rows, Provenance::Original)
}

pub fn load_csv(path: impl AsRef<Path>, infer: bool, target: Option<&str>) -> Result<Table> {
    read_csv_str(&read_file(path.as_ref())?, infer, target)
}

/// Loads a CSV whose header must match `schema` exactly.
pub fn load_csv_with_schema(path: impl AsRef<Path>, schema: &TableSchema) -> Result<Table> {
    let text = read_file(path.as_ref())?;
    let (header, records) = read_records(&text)?;
    let expected = schema.names();
    if header != expected {
        return Err(Error::HeaderMismatch {
            expected,
            found: header,
        });
    }
    let rows = build_rows(schema, records)?;
    Table::new(schema.clone(), rows, Provenance::Original)
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::Missing => String::new(),
        Value::Number(x) => canonical_number(*x),
        Value::Text(s) => s.clone(),
    }
}

pub fn write_csv_string(table: &Table) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(table.schema.names())?;
    for r in &table.rows {
        w.write_record(r.values().iter().map(cell_text))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
}

/// Writes with the schema's header order; missing cells are empty.
pub fn write_csv(table: &Table, path: impl AsRef<Path>) -> Result<()> {
    let s = write_csv_string(table)?;
    std::fs::write(path.as_ref(), s).map_err(|e| Error::io(path.as_ref(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infers_numeric_and_categorical() {
        let t = read_csv_str("a,b\n1,x\n", true, None).unwrap();
        assert_eq!(t.schema.columns()[0].kind, ColumnKind::Numeric);
        assert_eq!(t.schema.columns()[1].kind, ColumnKind::Categorical);
        assert_eq!(t.rows[0].values()[0], Value::Number(1.0));
        assert_eq!(t.schema.target_column(), Some("b"));
    }

    #[test]
    fn empty_data_section() {
        let t = read_csv_str("a,b\n", true, None).unwrap();
        assert_eq!(t.len(), 0);
        assert_eq!(t.schema.len(), 2);
    }

    #[test]
    fn quoted_cells_and_missing_markers() {
        let t = read_csv_str("a,b\n\"x, y\",?\n,2\n", true, Some("a")).unwrap();
        assert_eq!(t.rows[0].values()[0], Value::text("x, y"));
        assert_eq!(t.rows[0].values()[1], Value::Missing);
        assert_eq!(t.rows[1].values()[0], Value::Missing);
        assert_eq!(t.schema.columns()[1].kind, ColumnKind::Numeric);
    }

    #[test]
    fn adult_style_header() {
        let header = "age,workclass,fnlwgt,education,educational-num,marital-status,occupation,relationship,race,gender,capital-gain,capital-loss,hours-per-week,native-country,income";
        let text = format!("{header}\n39,State-gov,77516,Bachelors,13,Never-married,Adm-clerical,Not-in-family,White,Male,2174,0,40,United-States,<=50K\n");
        let t = read_csv_str(&text, true, None).unwrap();
        assert_eq!(t.schema.len(), 15);
        assert_eq!(t.schema.target_column(), Some("income"));
    }

    #[test]
    fn header_mismatch_and_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "a,c\n1,2\n").unwrap();
        let schema = TableSchema::without_target(vec![Column::numeric("a"), Column::numeric("b")]).unwrap();
        assert!(matches!(
            load_csv_with_schema(&p, &schema),
            Err(Error::HeaderMismatch { .. })
        ));
        assert!(matches!(
            load_csv(dir.path().join("nope.csv"), true, None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn csv_round_trip_keeps_values() {
        let t = read_csv_str("a,b\n1.50,\"p, q\"\n-0,r\n", true, None).unwrap();
        let s = write_csv_string(&t).unwrap();
        assert_eq!(s, "a,b\n1.5,\"p, q\"\n0,r\n");
        let back = read_csv_str(&s, true, None).unwrap();
        assert_eq!(back.rows, t.rows);
    }
}
