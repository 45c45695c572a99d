use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::codec::{ColumnKind, Table, Value};
use crate::error::{Error, Result};
use crate::exec;

fn check_schemas(a: &Table, b: &Table) -> Result<()> {
    if !a.schema.compatible_with(&b.schema) {
        return Err(Error::SchemaMismatch {
            expected: a.schema.len(),
            got: b.schema.len(),
        });
    }
    Ok(())
}

/// For each synthetic row, the best Jaccard coefficient against any
/// original row over `(column, canonical value)` pairs; returns 100 × mean.
///
/// With `numeric_tolerance`, numeric cells within the tolerance count as the
/// same pair.
pub fn jaccard_nearest(synthetic: &Table, original: &Table, numeric_tolerance: Option<f64>) -> Result<f64> {
    check_schemas(original, synthetic)?;
    if synthetic.is_empty() || original.is_empty() {
        return Err(Error::EmptyTable("jaccard needs non-empty tables".into()));
    }
    let cols = synthetic.schema.len();
    let numeric: Vec<bool> = synthetic
        .schema
        .columns()
        .iter()
        .map(|c| c.kind == ColumnKind::Numeric && numeric_tolerance.is_some())
        .collect();
    // Intern canonical values per column so comparisons are integer checks.
    let mut ids: Vec<HashMap<String, u32>> = vec![HashMap::new(); cols];
    let mut intern = |t: &Table| -> Vec<Vec<u32>> {
        t.rows
            .iter()
            .map(|r| {
                r.values()
                    .iter()
                    .enumerate()
                    .map(|(c, v)| {
                        let m = &mut ids[c];
                        let next = m.len() as u32;
                        *m.entry(v.canonical()).or_insert(next)
                    })
                    .collect()
            })
            .collect()
    };
    let orig = intern(original);
    let syn = intern(synthetic);
    let tol = numeric_tolerance.unwrap_or(0.0);
    let matches = |si: usize, s: &[u32], oi: usize, o: &[u32]| -> usize {
        (0..cols)
            .filter(|&c| {
                if s[c] == o[c] {
                    return true;
                }
                if !numeric[c] {
                    return false;
                }
                match (&synthetic.rows[si].values()[c], &original.rows[oi].values()[c]) {
                    (Value::Number(a), Value::Number(b)) => (a - b).abs() <= tol,
                    _ => false,
                }
            })
            .count()
    };
    let best = exec::map_indexed(syn.len(), |si| {
        let s = &syn[si];
        let m = orig
            .iter()
            .enumerate()
            .map(|(oi, o)| matches(si, s, oi, o))
            .max()
            .unwrap_or(0);
        // Every row has exactly one pair per column: |A ∪ B| = 2·cols − |A ∩ B|.
        let union = 2 * cols - m;
        if union == 0 {
            1.0
        } else {
            m as f64 / union as f64
        }
    });
    Ok(100.0 * best.iter().sum::<f64>() / best.len() as f64)
}

/// KL(original ‖ synthetic) between equal-width histograms of a numeric
/// column over the union range, with ε = 1e-9 added to every bin.
pub fn kl_numeric(original: &Table, synthetic: &Table, feature: &str, bins: usize) -> Result<f64> {
    check_schemas(original, synthetic)?;
    let c = original
        .schema
        .index_of(feature)
        .ok_or_else(|| Error::UnknownFeature(feature.into()))?;
    if original.schema.columns()[c].kind != ColumnKind::Numeric {
        return Err(Error::NotNumeric(feature.into()));
    }
    if bins == 0 {
        return Err(Error::Config("kl_numeric needs at least one bin".into()));
    }
    let p: Vec<f64> = original.column_values(c).filter_map(Value::as_f64).collect();
    let q: Vec<f64> = synthetic.column_values(c).filter_map(Value::as_f64).collect();
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyTable(format!("no numeric values in {feature:?}")));
    }
    let lo = p.iter().chain(&q).cloned().fold(f64::INFINITY, f64::min);
    let hi = p.iter().chain(&q).cloned().fold(f64::NEG_INFINITY, f64::max);
    let hist = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in xs {
            let b = if hi > lo {
                (((x - lo) / (hi - lo)) * bins as f64).floor() as usize
            } else {
                0
            };
            h[b.min(bins - 1)] += 1.0;
        }
        h
    };
    Ok(kl_histograms(&hist(&p), &hist(&q)))
}

/// KL divergence of two count vectors after ε-smoothing and normalization.
pub fn kl_histograms(p: &[f64], q: &[f64]) -> f64 {
    const EPS: f64 = 1e-9;
    let norm = |h: &[f64]| {
        let s: f64 = h.iter().map(|v| v + EPS).sum();
        h.iter().map(|v| (v + EPS) / s).collect::<Vec<f64>>()
    };
    let (p, q) = (norm(p), norm(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepetitionMode {
    /// Generated rows found in the reference table.
    AgainstReference,
    /// Rows of the table that also occur elsewhere in it.
    LeaveOneOut,
    /// Generated rows that repeat an earlier generated row.
    WithinGenerated,
}

/// Fraction of rows counted as repeats under `mode`. `reference` is used only
/// by [`RepetitionMode::AgainstReference`].
pub fn repetition_rate(generated: &Table, reference: &Table, mode: RepetitionMode) -> Result<f64> {
    check_schemas(reference, generated)?;
    if generated.is_empty() {
        return Ok(0.0);
    }
    let n = generated.len() as f64;
    let keys: Vec<Vec<String>> = generated.rows.iter().map(|r| r.canonical_key()).collect();
    let hits = match mode {
        RepetitionMode::AgainstReference => {
            let refs: HashSet<Vec<String>> = reference.rows.iter().map(|r| r.canonical_key()).collect();
            keys.iter().filter(|k| refs.contains(*k)).count()
        }
        RepetitionMode::LeaveOneOut => {
            let mut counts: HashMap<&Vec<String>, usize> = HashMap::new();
            for k in &keys {
                *counts.entry(k).or_insert(0) += 1;
            }
            keys.iter().filter(|k| counts[k] > 1).count()
        }
        RepetitionMode::WithinGenerated => {
            let distinct: HashSet<&Vec<String>> = keys.iter().collect();
            keys.len() - distinct.len()
        }
    };
    Ok(hits as f64 / n)
}

/// Area under the ROC curve from scores and binary labels, counting tied
/// scores as half (Mann–Whitney with midranks).
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateInput("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Product-moment correlation and its two-sided p-value from the t
/// distribution with `n − 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::DegenerateInput(
            "pearson needs two equal-length vectors of at least 3".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("pearson needs nonzero variances".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let dof = n - 2.0;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (dof / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::DegenerateInput(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok((r, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_hand_cases() {
        let (r, _) = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-9);
        let x = [1.0, 2.0, 3.0, 5.0];
        let (r, p) = pearson(&x, &x.map(|v| 2.0 * v + 1.0)).unwrap();
        assert!((r - 1.0).abs() < 1e-12 && p == 0.0);
        let (r, _) = pearson(&x, &x.map(|v| -v)).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        // r = 0.8 with n = 4: t = 0.8·sqrt(2/0.36), two-sided p ≈ 0.2
        let (_, p) = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((p - 0.2).abs() < 1e-9, "{p}");
    }

    #[test]
    fn auc_cases() {
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(roc_auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert!(roc_auc(&[0.1], &[true]).is_err());
    }

    #[test]
    fn kl_hand_case() {
        let kl = kl_histograms(&[2.0, 1.0, 1.0], &[1.0, 2.0, 1.0]);
        assert!((kl - 0.25 * 2f64.ln()).abs() < 1e-8, "{kl}");
        assert!(kl_histograms(&[3.0, 0.0], &[3.0, 0.0]).abs() < 1e-12);
    }
}
