mod common;

use std::io::Write;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tabsynth::codec::{
    load_csv, load_csv_with_schema, parse_sentence, read_csv_str, serialize_row, write_csv_string, Column, Provenance,
    RejectReason, Row, Table, TableSchema, Value, CLAUSE_SEP,
};
use tabsynth::error::Error;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn parse_inverts_serialize(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (schema, row) = common::random_schema_row(&mut rng);
        let s = serialize_row(&row, &schema).unwrap();
        prop_assert_eq!(parse_sentence(&s, &schema).unwrap(), row);
    }

    #[test]
    fn clause_order_does_not_matter(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (schema, row) = common::random_schema_row(&mut rng);
        let clauses: Vec<String> = (0..schema.len())
            .map(|i| {
                let one = TableSchema::new(vec![schema.columns()[i].clone()], schema.columns()[i].name.clone()).unwrap();
                serialize_row(&Row::new(vec![row.values()[i].clone()]), &one).unwrap()
            })
            .collect();
        let mut shuffled = clauses.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(parse_sentence(&shuffled.join(CLAUSE_SEP), &schema).unwrap(), row);
    }

    #[test]
    fn serialization_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (schema, row) = common::random_schema_row(&mut rng);
        prop_assert_eq!(serialize_row(&row, &schema).unwrap(), serialize_row(&row.clone(), &schema).unwrap());
    }

    #[test]
    fn dropping_a_clause_is_missing_feature(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (schema, row) = common::random_schema_row(&mut rng);
        prop_assume!(schema.len() >= 2);
        let mut cols = schema.columns().to_vec();
        let mut vals = row.values().to_vec();
        cols.pop();
        vals.pop();
        let short = TableSchema::new(cols, schema.columns()[0].name.clone()).unwrap();
        let s = serialize_row(&Row::new(vals), &short).unwrap();
        prop_assert_eq!(parse_sentence(&s, &schema).unwrap_err().reason, RejectReason::MissingFeature);
    }
}

fn age_occupation() -> TableSchema {
    TableSchema::new(
        vec![Column::numeric("Age"), Column::open_categorical("Occupation")],
        "Occupation",
    )
    .unwrap()
}

#[test]
fn template_example() {
    let schema = age_occupation();
    let row = Row::new(vec![Value::Number(16.0), Value::text("Professor")]);
    let s = serialize_row(&row, &schema).unwrap();
    assert_eq!(s, "Age is 16, Occupation is Professor");
    assert_eq!(parse_sentence(&s, &schema).unwrap(), row);
}

#[test]
fn rejections_for_generated_text() {
    let schema = age_occupation();
    let reason = |s: &str| parse_sentence(s, &schema).unwrap_err().reason;
    assert_eq!(reason("Age is 16"), RejectReason::MissingFeature);
    assert_eq!(
        reason("Age is 16, Age is 17, Occupation is X"),
        RejectReason::DuplicateFeature
    );
    assert_eq!(
        reason("Age is 16, Height is 2, Occupation is X"),
        RejectReason::UnknownFeature
    );
    assert_eq!(
        reason("Age is sixteen, Occupation is X"),
        RejectReason::NumericParseFailure
    );
    assert_eq!(reason("Age is 16, Occupation X"), RejectReason::MalformedClause);
    let closed = TableSchema::new(vec![Column::categorical("c", &["a", "b"])], "c").unwrap();
    assert_eq!(
        parse_sentence("c is z", &closed).unwrap_err().reason,
        RejectReason::OutOfDomain
    );
}

#[test]
fn csv_round_trip_through_disk() {
    let mut table = common::toy(50, 3);
    table.rows[0] = Row::new(
        table.rows[0]
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| if i == 1 { Value::Missing } else { v.clone() })
            .collect(),
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    std::fs::write(&path, write_csv_string(&table).unwrap()).unwrap();
    let back = load_csv_with_schema(&path, &table.schema).unwrap();
    assert_eq!(back.rows, table.rows);
    assert_eq!(back.schema.names(), table.schema.names());
}

#[test]
fn inference_rule_and_empty_body() {
    let t = read_csv_str("a,b\n1,x\n", true, Some("b")).unwrap();
    assert_eq!(t.schema.columns()[0].kind, tabsynth::codec::ColumnKind::Numeric);
    assert_eq!(t.schema.columns()[1].kind, tabsynth::codec::ColumnKind::Categorical);
    assert_eq!(t.provenance, Provenance::Original);
    let empty = read_csv_str("a,b\n", true, Some("b")).unwrap();
    assert!(empty.is_empty());
}

#[test]
fn missing_and_ragged_files_fail() {
    assert!(matches!(
        load_csv("/definitely/not/here.csv", true, None),
        Err(Error::Io { .. })
    ));
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "a,b\n1,2,3").unwrap();
    assert!(load_csv(f.path(), true, None).is_err());
}

#[test]
fn header_mismatch_is_reported() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "Occupation,Age\nX,1").unwrap();
    let err = load_csv_with_schema(f.path(), &age_occupation()).unwrap_err();
    assert!(matches!(err, Error::HeaderMismatch { .. }));
    assert!(err.is_validation());
}

#[test]
fn table_rejects_nonconforming_rows() {
    let schema = age_occupation();
    let bad = Row::new(vec![Value::text("old"), Value::text("X")]);
    assert!(Table::new(schema, vec![bad], Provenance::Original).is_err());
}
