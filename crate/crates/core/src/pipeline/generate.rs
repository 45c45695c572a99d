use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::codec::{parse_sentence, Provenance, Row, Table, TableSchema};
use crate::error::{Error, Result};
use crate::exec;
use crate::policy::{sample_row_sentence, PolicyModel, SamplerConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    /// Rows to collect.
    pub k: usize,
    /// Attempts allowed per requested row.
    pub budget_factor: usize,
    /// Drop rows identical to an already collected one.
    pub dedup: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            k: 1000,
            budget_factor: 10,
            dedup: false,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("generate: k must be positive".into()));
        }
        if self.budget_factor == 0 {
            return Err(Error::Config("generate: budget_factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub requested: usize,
    pub collected: usize,
    pub attempts: usize,
    pub parse_failures: usize,
    pub truncations: usize,
    pub duplicates_dropped: usize,
    pub parse_failure_rate: f64,
    pub truncation_rate: f64,
    /// Rejection counts by reason.
    pub reject_reasons: BTreeMap<String, usize>,
    pub exhausted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub table: Table,
    pub report: GenerationReport,
}

#[derive(Debug)]
pub enum GenerateError {
    /// The attempt budget ran out; carries what was collected.
    Exhausted {
        partial: Box<Generation>,
    },
    Failed(Error),
}

impl From<GenerateError> for Error {
    fn from(e: GenerateError) -> Self {
        match e {
            GenerateError::Exhausted { partial } => Error::BudgetExhausted {
                attempts: partial.report.attempts,
                collected: partial.report.collected,
                target: partial.report.requested,
            },
            GenerateError::Failed(e) => e,
        }
    }
}

/// Samples rows until `cfg.k` parse or `k × budget_factor` attempts are
/// spent. Attempt `i` always uses the same random stream, so the table is
/// the same in sequential and parallel mode.
pub fn generate_table(
    policy: &PolicyModel,
    sampler: &SamplerConfig,
    schema: &TableSchema,
    cfg: &GenerateConfig,
) -> std::result::Result<Generation, GenerateError> {
    let budget = cfg.k.saturating_mul(cfg.budget_factor);
    let mut rows: Vec<Row> = Vec::with_capacity(cfg.k);
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut report = GenerationReport {
        requested: cfg.k,
        collected: 0,
        attempts: 0,
        parse_failures: 0,
        truncations: 0,
        duplicates_dropped: 0,
        parse_failure_rate: 0.0,
        truncation_rate: 0.0,
        reject_reasons: BTreeMap::new(),
        exhausted: false,
    };
    let mut next = 0usize;
    'outer: while rows.len() < cfg.k && next < budget {
        let block = (cfg.k - rows.len()).max(16).min(budget - next);
        let start = next;
        let outs = exec::map_indexed(block, |j| {
            let mut r = rng::stream(sampler.seed, "generate", (start + j) as u64);
            sample_row_sentence(policy, None, sampler, &mut r)
        });
        for out in outs {
            let out = out.map_err(GenerateError::Failed)?;
            next += 1;
            report.attempts += 1;
            if out.truncated {
                report.truncations += 1;
                *report.reject_reasons.entry("truncated".into()).or_insert(0) += 1;
            } else {
                match parse_sentence(&out.sentence, schema) {
                    Ok(row) => {
                        if cfg.dedup && !seen.insert(row.canonical_key()) {
                            report.duplicates_dropped += 1;
                        } else {
                            rows.push(row);
                        }
                    }
                    Err(rej) => {
                        report.parse_failures += 1;
                        *report.reject_reasons.entry(rej.reason.as_str().into()).or_insert(0) += 1;
                    }
                }
            }
            if rows.len() == cfg.k {
                break 'outer;
            }
        }
    }
    report.collected = rows.len();
    let n = report.attempts.max(1) as f64;
    report.parse_failure_rate = report.parse_failures as f64 / n;
    report.truncation_rate = report.truncations as f64 / n;
    report.exhausted = rows.len() < cfg.k;
    let table = Table {
        schema: schema.clone(),
        rows,
        provenance: Provenance::Synthetic,
    };
    let generation = Generation { table, report };
    if generation.report.exhausted {
        Err(GenerateError::Exhausted {
            partial: Box::new(generation),
        })
    } else {
        Ok(generation)
    }
}
