//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::Rng;
use tabsynth::audit::{
    explain_feature, AuditConfig, AuditContext, AuditExplanation, AuditLog, DescriptionCache, EchoBackend,
    PromptRegistry,
};
use tabsynth::codec::{Column, Row, Table, TableSchema, Value};
use tabsynth::error::Result;
use tabsynth::metrics::{discriminator_measure, FittedSuite, SuiteConfig, SvmConfig};
use tabsynth::nn::{log_softmax, sample_index};
use tabsynth::pipeline::toy_template;
use tabsynth::policy::{fit_sft, LogProbPolicy, PolicyHyper, PolicyModel, SftConfig, TokenId, Vocabulary};
use tabsynth::ppo::{ppo_update, PpoConfig, Rollout, RolloutBatch};
use tabsynth::toy::{make_toy_table, ToySpec};

const PIECES: &[&str] = &[
    "is",
    " is ",
    ",",
    ", ",
    "\\",
    "unknown",
    "a",
    "b c",
    "Professor",
    "x,y",
    "is,",
    " ",
    "16",
    "-",
];

fn adversarial_text(rng: &mut impl Rng) -> String {
    let n = rng.random_range(0..5);
    (0..n).map(|_| PIECES[rng.random_range(0..PIECES.len())]).collect()
}

fn random_number(rng: &mut impl Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => rng.random_range(-1000i64..1000) as f64,
        1 => rng.random_range(-1.0..1.0),
        2 => rng.random_range(-1e6..1e6) * 10f64.powi(rng.random_range(-12..12)),
        _ => loop {
            let x = f64::from_bits(rng.random());
            if x.is_finite() {
                break x;
            }
        },
    }
}

/// A random schema of 1 to 8 columns with one conforming row. Text values mix
/// delimiters, the joiner word and the missing marker.
pub fn random_schema_row(rng: &mut impl Rng) -> (TableSchema, Row) {
    let cols = rng.random_range(1..=8);
    let mut columns = Vec::with_capacity(cols);
    let mut values = Vec::with_capacity(cols);
    for i in 0..cols {
        let name = match rng.random_range(0..3) {
            0 => format!("c{i}"),
            1 => format!("c{i} is,x"),
            _ => format!("feature {i}"),
        };
        if rng.random_bool(0.4) {
            columns.push(Column::numeric(name));
            values.push(if rng.random_bool(0.1) {
                Value::Missing
            } else {
                Value::Number(random_number(rng))
            });
        } else {
            columns.push(Column::open_categorical(name));
            values.push(if rng.random_bool(0.1) {
                Value::Missing
            } else {
                Value::Text(adversarial_text(rng))
            });
        }
    }
    let target = columns[0].name.clone();
    (TableSchema::new(columns, target).unwrap(), Row::new(values))
}

/// Smallest-cardinality subset with mass ≥ `top_p − tol` by enumeration,
/// preferring the larger mass among equal sizes, renormalized.
pub fn brute_top_p(p: &[f64], top_p: f64, tol: f64) -> Vec<f64> {
    if top_p >= 1.0 {
        return p.to_vec();
    }
    let n = p.len();
    let mut best: Option<(u32, f64, u32)> = None;
    for mask in 1u32..(1 << n) {
        let mass: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| p[i]).sum();
        if mass < top_p - tol {
            continue;
        }
        let size = mask.count_ones();
        let better = match best {
            None => true,
            Some((s, m, _)) => size < s || (size == s && mass > m),
        };
        if better {
            best = Some((size, mass, mask));
        }
    }
    let mask = best.expect("the full set always qualifies").2;
    let kept: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| p[i]).sum();
    (0..n)
        .map(|i| if mask >> i & 1 == 1 { p[i] / kept } else { 0.0 })
        .collect()
}

fn pairs(t: &Table, r: usize) -> HashSet<(String, String)> {
    t.schema
        .columns()
        .iter()
        .zip(t.rows[r].values())
        .map(|(c, v)| (c.name.clone(), v.canonical()))
        .collect()
}

/// Mean over synthetic rows of the best set-Jaccard against any original
/// row, times 100.
pub fn brute_jaccard(synthetic: &Table, original: &Table) -> f64 {
    let mut total = 0.0;
    for s in 0..synthetic.len() {
        let a = pairs(synthetic, s);
        let mut best = 0.0f64;
        for o in 0..original.len() {
            let b = pairs(original, o);
            let inter = a.intersection(&b).count();
            let union = a.union(&b).count();
            best = best.max(inter as f64 / union as f64);
        }
        total += best;
    }
    100.0 * total / synthetic.len() as f64
}

/// Rows equal to at least one other row, by pairwise comparison.
pub fn brute_duplicate_rows(t: &Table) -> usize {
    (0..t.len())
        .filter(|&i| (0..t.len()).any(|j| j != i && pairs(t, i) == pairs(t, j)))
        .count()
}

pub fn toy(n_rows: usize, seed: u64) -> Table {
    make_toy_table(&ToySpec {
        n_rows,
        seed,
        ..ToySpec::default()
    })
    .unwrap()
}

pub fn tiny_hyper() -> PolicyHyper {
    PolicyHyper {
        layers: 1,
        heads: 2,
        model_dim: 16,
        context_length: 40,
    }
}

/// A small policy fitted for a couple of epochs on `table`.
pub fn quick_sft(table: &Table, epochs: usize, seed: u64) -> PolicyModel {
    sft_with(table, tiny_hyper(), epochs, seed)
}

/// The toy preset's policy size, fitted well enough that most samples parse.
pub fn fitted_sft(table: &Table, seed: u64) -> PolicyModel {
    let hyper = PolicyHyper {
        model_dim: 32,
        ..tiny_hyper()
    };
    sft_with(table, hyper, 5, seed)
}

fn sft_with(table: &Table, hyper: PolicyHyper, epochs: usize, seed: u64) -> PolicyModel {
    let sentences = table.sentences();
    let vocab = Vocabulary::build(sentences.iter().map(String::as_str));
    let mut m = PolicyModel::new(vocab, hyper, seed).unwrap();
    let cfg = SftConfig {
        epochs,
        lr: 3e-3,
        batch_size: 16,
        weight_decay: 0.0,
        seed,
    };
    fit_sft(&mut m, &sentences, &cfg).unwrap();
    m.params_mut().unwrap().quantize_f32();
    m
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Explains the target of the first `rows` rows of a synthetic toy table
/// against a 200-row original, offline: echo completions and the builtin
/// embedding.
pub fn echo_audit(rows: usize) -> Vec<AuditExplanation> {
    let original = toy(200, 21);
    let synthetic = toy(rows, 22);
    let mut registry = PromptRegistry::default();
    registry.register("toy", toy_template(&ToySpec::default()));
    let cfg = AuditConfig {
        dataset_kind: "toy".into(),
        ..AuditConfig::default()
    };
    let svm = discriminator_measure(&original, &synthetic, &SvmConfig::default(), 1).unwrap();
    let suite_cfg = SuiteConfig {
        rf_trees: 10,
        ..SuiteConfig::default()
    };
    let suite = FittedSuite::fit(&original, &suite_cfg, 2).unwrap();
    let (cache, log, backend) = (DescriptionCache::new(), AuditLog::disabled(), EchoBackend);
    let ctx = AuditContext {
        original: &original,
        interpreter: &backend,
        explainer: &backend,
        embedder: None,
        registry: &registry,
        cache: &cache,
        log: &log,
        cfg: &cfg,
        svm: Some(&svm),
        suite: Some(&suite),
    };
    synthetic
        .rows
        .iter()
        .map(|r| explain_feature(r, "label", &ctx).unwrap())
        .collect()
}

/// Single-step two-armed policy: softmax over two logits, arm A is token 1.
pub struct Bandit {
    pub z: Vec<f64>,
    pub updates: u64,
}

impl Bandit {
    pub fn probs(&self, tau: f64) -> Vec<f64> {
        let l = log_softmax(&self.z.iter().map(|z| z / tau).collect::<Vec<_>>());
        l.iter().map(|x| x.exp()).collect()
    }
}

impl LogProbPolicy for Bandit {
    fn num_params(&self) -> usize {
        2
    }
    fn param_data(&self) -> &[f64] {
        &self.z
    }
    fn param_data_mut(&mut self) -> Result<&mut [f64]> {
        Ok(&mut self.z)
    }
    fn update_count(&self) -> u64 {
        self.updates
    }
    fn record_update(&mut self) {
        self.updates += 1;
    }
    fn token_logprobs(&self, tokens: &[TokenId], tau: f64) -> Result<Vec<f64>> {
        let l = log_softmax(&self.z.iter().map(|z| z / tau).collect::<Vec<_>>());
        Ok(vec![l[tokens[1] as usize - 1]])
    }
    fn logprob_grad(&self, tokens: &[TokenId], tau: f64, coeffs: &[f64]) -> Result<Vec<f64>> {
        let p = self.probs(tau);
        let a = tokens[1] as usize - 1;
        Ok((0..2)
            .map(|j| coeffs[0] * ((j == a) as u8 as f64 - p[j]) / tau)
            .collect())
    }
}

/// Updates until P(A) ≥ 0.99 under reward 1 for arm A and β = 0, or
/// `None` after 200.
pub fn bandit_updates_to_converge(seed: u64) -> Option<usize> {
    let mut policy = Bandit {
        z: vec![0.0, 0.0],
        updates: 0,
    };
    let cfg = PpoConfig {
        beta: 0.0,
        lr: 0.05,
        ..PpoConfig::default()
    };
    let mut rng = tabsynth::rng::stream(seed, "bandit", 0);
    for update in 0..200 {
        if policy.probs(1.0)[0] >= 0.99 {
            return Some(update);
        }
        let probs = policy.probs(1.0);
        let samples = (0..32)
            .map(|_| {
                let arm = sample_index(&probs, &mut rng) as TokenId + 1;
                let tokens = vec![0, arm];
                let lp = policy.token_logprobs(&tokens, 1.0).unwrap();
                Rollout {
                    tokens,
                    logp_reference: lp.clone(),
                    logp_policy: lp,
                    parsed: true,
                    reject_reason: None,
                    reward: if arm == 1 { 1.0 } else { 0.0 },
                    truncated: false,
                }
            })
            .collect();
        let batch = RolloutBatch {
            samples,
            policy_version: policy.update_count(),
            temperature: 1.0,
            seed: seed + update as u64,
        };
        ppo_update(&mut policy, &batch, &cfg).unwrap();
    }
    (policy.probs(1.0)[0] >= 0.99).then_some(200)
}
