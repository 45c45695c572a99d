//! Row descriptions, similarity retrieval and explanation prompts for
//! auditing individual feature values.

pub mod backend;
pub mod embed;
pub mod prompt;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::codec::{serialize_row, Row, Table, TableSchema};
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{DiscriminatorMeasure, FittedSuite};

pub use backend::{
    AuditLog, BackendConfig, BackendInfo, CommandBackend, EchoBackend, GenerationBackend, HttpBackend, Limiter,
};
pub use embed::{
    cosine, rank_by_similarity, retrieve_similar, BuiltinEmbedding, EmbeddingBackend, HttpEmbedding, Retrieval,
};
pub use prompt::{
    build_explanation_prompt, Exemplar, ExplanationPrompt, Polarity, PromptRegistry, PromptTemplate,
    DESCRIBE_INSTRUCTION,
};

type Slot = Arc<Mutex<Option<String>>>;

/// Descriptions keyed by `(row hash, model id)`. Concurrent requests for
/// the same key wait for a single backend call.
#[derive(Default)]
pub struct DescriptionCache {
    slots: Mutex<HashMap<(String, String), Slot>>,
}

impl DescriptionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.slots.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_try(&self, key: (String, String), f: impl FnOnce() -> Result<String>) -> Result<String> {
        let slot = {
            let mut m = self.slots.lock().unwrap_or_else(|e| e.into_inner());
            m.entry(key).or_default().clone()
        };
        let mut g = slot.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(s) = g.as_ref() {
            return Ok(s.clone());
        }
        let s = f()?;
        *g = Some(s.clone());
        Ok(s)
    }
}

/// The description prompt for one row.
pub fn description_prompt(row: &Row, schema: &TableSchema) -> Result<String> {
    Ok(format!("{DESCRIBE_INSTRUCTION}\n{}", serialize_row(row, schema)?))
}

/// Asks `backend` to describe `row`, consulting `cache` first.
pub fn describe_row(
    row: &Row,
    schema: &TableSchema,
    backend: &dyn GenerationBackend,
    cache: &DescriptionCache,
    log: &AuditLog,
) -> Result<String> {
    let sentence = serialize_row(row, schema)?;
    if sentence.is_empty() {
        return Err(Error::EmptyCompletion);
    }
    let info = backend.info();
    let key = (backend::hex_digest(sentence.as_bytes()), info.model.clone());
    cache.get_or_try(key, || {
        let prompt = format!("{DESCRIBE_INSTRUCTION}\n{sentence}");
        let out = backend.complete(&prompt);
        log.record("describe", &info, &prompt, &out)?;
        out
    })
}

/// Settings of one audit run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    /// Registered prompt template to use.
    pub dataset_kind: String,
    /// Exemplars retrieved, split evenly between the classes.
    pub k: usize,
    /// At most this many original rows are described for retrieval; the
    /// first rows of the table are used.
    pub corpus_cap: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            dataset_kind: "adult".into(),
            k: 6,
            corpus_cap: 1000,
        }
    }
}

/// Everything an explanation needs besides the row itself.
pub struct AuditContext<'a> {
    pub original: &'a Table,
    /// Writes descriptions.
    pub interpreter: &'a dyn GenerationBackend,
    /// Writes explanations.
    pub explainer: &'a dyn GenerationBackend,
    /// `None` uses a [`BuiltinEmbedding`] fitted on the descriptions.
    pub embedder: Option<&'a dyn EmbeddingBackend>,
    pub registry: &'a PromptRegistry,
    pub cache: &'a DescriptionCache,
    pub log: &'a AuditLog,
    pub cfg: &'a AuditConfig,
    /// Real-versus-synthetic SVM, for the quality score.
    pub svm: Option<&'a DiscriminatorMeasure>,
    /// Classifiers trained on the original table, for the misclassification flag.
    pub suite: Option<&'a FittedSuite>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditExplanation {
    /// Serialized target row.
    pub features: String,
    pub feature: String,
    pub value: String,
    pub polarity: Polarity,
    pub description: String,
    pub positive_ids: Vec<usize>,
    pub negative_ids: Vec<usize>,
    pub prompt: String,
    pub explanation: Option<String>,
    pub backend: BackendInfo,
    /// SVM probability that the row is real.
    pub svm_quality: Option<f64>,
    /// Every classifier of the suite mispredicts this row's target.
    pub misclassified_by_all: Option<bool>,
    /// The prompt lacks exemplars for at least one class.
    pub degraded: bool,
    /// A class had fewer exemplars than requested.
    pub short_class: bool,
    /// Set when the final completion failed.
    pub failure: Option<StageFailure>,
}

impl AuditExplanation {
    /// Worth an auditor's attention.
    pub fn flagged(&self) -> bool {
        self.misclassified_by_all == Some(true) || self.degraded || self.failure.is_some()
    }
}

/// Describes the first `corpus_cap` original rows.
pub fn describe_corpus(ctx: &AuditContext<'_>) -> Result<Vec<String>> {
    let n = ctx.original.len().min(ctx.cfg.corpus_cap);
    exec::map_indexed(n, |i| {
        describe_row(
            &ctx.original.rows[i],
            &ctx.original.schema,
            ctx.interpreter,
            ctx.cache,
            ctx.log,
        )
    })
    .into_iter()
    .collect()
}

/// Explains why `row` has its value of `feature`, from exemplars of the
/// original table on both sides of that value.
pub fn explain_feature(row: &Row, feature: &str, ctx: &AuditContext<'_>) -> Result<AuditExplanation> {
    let schema = &ctx.original.schema;
    let col = schema
        .index_of(feature)
        .ok_or_else(|| Error::UnknownFeature(feature.to_string()))?;
    if ctx.original.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let template = ctx.registry.get(&ctx.cfg.dataset_kind)?;
    let value = row.values()[col].canonical();
    let polarity = template.polarity_of(&value);
    let features = serialize_row(row, schema)?;
    let description = describe_row(row, schema, ctx.interpreter, ctx.cache, ctx.log)?;

    let corpus = describe_corpus(ctx)?;
    let builtin;
    let embedder: &dyn EmbeddingBackend = match ctx.embedder {
        Some(e) => e,
        None => {
            builtin = BuiltinEmbedding::fit(corpus.iter().map(String::as_str).chain([description.as_str()]));
            &builtin
        }
    };
    let target_vec = embedder.embed(&description)?;
    let corpus_vecs: Vec<Vec<f64>> = exec::map_slice(&corpus, |d| embedder.embed(d))
        .into_iter()
        .collect::<Result<_>>()?;
    // Positive exemplars share the positive value, or the audited value when
    // the template names none.
    let positive_value = template.positive_value.clone().unwrap_or_else(|| value.clone());
    let labels: Vec<bool> = (0..corpus.len())
        .map(|i| ctx.original.rows[i].values()[col].canonical() == positive_value)
        .collect();
    let found = retrieve_similar(&target_vec, &corpus_vecs, ctx.cfg.k, Some(&labels))?;
    let exemplar = |&i: &usize| -> Result<Exemplar> {
        Ok(Exemplar {
            id: i,
            features: serialize_row(&ctx.original.rows[i], schema)?,
            description: corpus[i].clone(),
        })
    };
    let positives = found.positives.iter().map(exemplar).collect::<Result<Vec<_>>>()?;
    let negatives = found.negatives.iter().map(exemplar).collect::<Result<Vec<_>>>()?;
    let prompt = build_explanation_prompt(
        ctx.registry,
        &ctx.cfg.dataset_kind,
        &features,
        &description,
        &positives,
        &negatives,
        polarity,
    )?;

    let info = ctx.explainer.info();
    let out = ctx.explainer.complete(&prompt.text);
    ctx.log.record("explain", &info, &prompt.text, &out)?;
    let (explanation, failure) = match out {
        Ok(t) => (Some(t), None),
        Err(e) => (
            None,
            Some(StageFailure {
                stage: "explain".into(),
                message: e.to_string(),
            }),
        ),
    };

    let single = Table {
        schema: schema.clone(),
        rows: vec![row.clone()],
        provenance: ctx.original.provenance,
    };
    let svm_quality = match ctx.svm {
        Some(m) => Some(m.prob_real(&single)?[0]),
        None => None,
    };
    let misclassified_by_all = match ctx.suite {
        Some(s) if schema.target_index() == Some(col) => Some(s.all_wrong(&single)?[0]),
        _ => None,
    };
    Ok(AuditExplanation {
        features,
        feature: feature.to_string(),
        value,
        polarity,
        description,
        positive_ids: found.positives,
        negative_ids: found.negatives,
        prompt: prompt.text,
        explanation,
        backend: info,
        svm_quality,
        misclassified_by_all,
        degraded: prompt.degraded,
        short_class: found.short,
        failure,
    })
}
