mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use proptest::prelude::*;
use tabsynth::audit::{
    cosine, explain_feature, rank_by_similarity, retrieve_similar, AuditConfig, AuditContext, AuditLog, BackendInfo,
    DescriptionCache, EchoBackend, GenerationBackend, Polarity, PromptRegistry,
};
use tabsynth::error::{Error, Result};
use tabsynth::pipeline::toy_template;
use tabsynth::toy::ToySpec;

#[test]
fn echo_audit_is_byte_stable_and_quick() {
    let start = Instant::now();
    let a = common::echo_audit(20);
    let elapsed = start.elapsed();
    let b = common::echo_audit(20);
    assert_eq!(a.len(), 20);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(elapsed.as_secs_f64() < 30.0, "{elapsed:?}");
    for e in &a {
        // The echo explainer repeats the closing task line.
        assert!(e
            .explanation
            .as_deref()
            .unwrap()
            .starts_with("Your task is to explain the reason why the item"));
        assert_eq!(
            e.polarity,
            if e.value == "yes" {
                Polarity::Positive
            } else {
                Polarity::Negative
            }
        );
        assert_eq!(e.positive_ids.len(), 3);
        assert_eq!(e.negative_ids.len(), 3);
        assert!(!e.degraded && e.failure.is_none());
        let q = e.svm_quality.unwrap();
        assert!((0.0..=1.0).contains(&q));
        assert!(e.misclassified_by_all.is_some());
    }
}

#[test]
fn prompt_lists_the_retrieved_rows_in_order() {
    let e = &common::echo_audit(1)[0];
    let original = common::toy(200, 21);
    let positives = e
        .prompt
        .split("POSITIVE ITEMS\n")
        .nth(1)
        .unwrap()
        .split("NEGATIVE ITEMS\n")
        .next()
        .unwrap();
    for (k, id) in e.positive_ids.iter().enumerate() {
        let line = format!(
            "[{}] FEATURES: \"{}\"",
            k + 1,
            tabsynth::codec::serialize_row(&original.rows[*id], &original.schema).unwrap()
        );
        assert!(positives.contains(&line), "{line}");
    }
    assert!(e
        .prompt
        .starts_with("Your task is to explain the reason why the item with the FEATURES: \""));
    assert_eq!(e.prompt.matches("---\n").count(), 2);
    for id in &e.positive_ids {
        assert_eq!(
            original.rows[*id].values()[original.schema.index_of("label").unwrap()].canonical(),
            "yes"
        );
    }
}

/// Counts calls and fails on explanation prompts.
struct Flaky {
    calls: AtomicUsize,
}

impl GenerationBackend for Flaky {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            kind: "flaky".into(),
            model: "m".into(),
        }
    }
    fn complete(&self, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if prompt.starts_with("Your task") {
            Err(Error::EmptyCompletion)
        } else {
            Ok(format!("described: {}", prompt.lines().last().unwrap()))
        }
    }
}

#[test]
fn failed_explanations_are_recorded_and_descriptions_cached() {
    let original = common::toy(60, 3);
    let mut registry = PromptRegistry::default();
    registry.register("toy", toy_template(&ToySpec::default()));
    let cfg = AuditConfig {
        dataset_kind: "toy".into(),
        ..AuditConfig::default()
    };
    let backend = Flaky {
        calls: AtomicUsize::new(0),
    };
    let cache = DescriptionCache::new();
    let log = AuditLog::disabled();
    let ctx = AuditContext {
        original: &original,
        interpreter: &backend,
        explainer: &backend,
        embedder: None,
        registry: &registry,
        cache: &cache,
        log: &log,
        cfg: &cfg,
        svm: None,
        suite: None,
    };
    let e = explain_feature(&original.rows[0], "label", &ctx).unwrap();
    assert!(e.explanation.is_none() && e.flagged());
    assert_eq!(e.failure.as_ref().unwrap().stage, "explain");
    let distinct = cache.len();
    let first = backend.calls.load(Ordering::SeqCst);
    assert_eq!(first, distinct + 1);
    explain_feature(&original.rows[1], "label", &ctx).unwrap();
    // Only the second explanation reaches the backend.
    assert_eq!(backend.calls.load(Ordering::SeqCst), first + 1);
    assert!(matches!(
        explain_feature(&original.rows[0], "nope", &ctx),
        Err(Error::UnknownFeature(_))
    ));
}

#[test]
fn single_class_corpus_degrades_the_prompt() {
    let full = common::toy(200, 5);
    let li = full.schema.index_of("label").unwrap();
    let mut only_yes = full.clone();
    only_yes.rows.retain(|r| r.values()[li].canonical() == "yes");
    let mut registry = PromptRegistry::default();
    registry.register("toy", toy_template(&ToySpec::default()));
    let cfg = AuditConfig {
        dataset_kind: "toy".into(),
        ..AuditConfig::default()
    };
    let (cache, log) = (DescriptionCache::new(), AuditLog::disabled());
    let ctx = AuditContext {
        original: &only_yes,
        interpreter: &EchoBackend,
        explainer: &EchoBackend,
        embedder: None,
        registry: &registry,
        cache: &cache,
        log: &log,
        cfg: &cfg,
        svm: None,
        suite: None,
    };
    let e = explain_feature(&full.rows[0], "label", &ctx).unwrap();
    assert!(e.degraded && e.short_class && e.negative_ids.is_empty());
    assert!(e.prompt.contains("and 0 negative items"));
}

fn brute_rank(target: &[f64], corpus: &[Vec<f64>]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..corpus.len()).collect();
    // Stable sort keeps the lower id first among equal similarities.
    ids.sort_by(|&a, &b| {
        cosine(target, &corpus[b])
            .unwrap()
            .total_cmp(&cosine(target, &corpus[a]).unwrap())
    });
    ids
}

proptest! {
    #[test]
    fn ranking_matches_brute_force(
        target in prop::collection::vec(-3i8..=3, 4),
        corpus in prop::collection::vec(prop::collection::vec(-3i8..=3, 4), 1..30),
        labels in prop::collection::vec(any::<bool>(), 30),
        k in 0usize..10,
    ) {
        let t: Vec<f64> = target.iter().map(|&x| x as f64).collect();
        let c: Vec<Vec<f64>> = corpus.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
        let want = brute_rank(&t, &c);
        let got: Vec<usize> = rank_by_similarity(&t, &c).unwrap().iter().map(|p| p.0).collect();
        prop_assert_eq!(&got, &want);

        let plain = retrieve_similar(&t, &c, k, None).unwrap();
        prop_assert_eq!(&plain.ids[..], &want[..k.min(want.len())]);

        let labels = &labels[..c.len()];
        let per = k.div_ceil(2);
        let r = retrieve_similar(&t, &c, k, Some(labels)).unwrap();
        let pos: Vec<usize> = want.iter().copied().filter(|&i| labels[i]).take(per).collect();
        let neg: Vec<usize> = want.iter().copied().filter(|&i| !labels[i]).take(per).collect();
        prop_assert_eq!(&r.positives, &pos);
        prop_assert_eq!(&r.negatives, &neg);
        prop_assert_eq!(r.short, pos.len() < per || neg.len() < per);
    }
}

#[test]
fn empty_corpus_is_an_error() {
    assert!(matches!(rank_by_similarity(&[1.0], &[]), Err(Error::EmptyCorpus)));
    assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
}
