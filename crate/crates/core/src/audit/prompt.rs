use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Instruction placed before a serialized row when asking for a description.
pub const DESCRIBE_INSTRUCTION: &str = "Please describe a person with the following features.";

/// Whether the audited value is the dataset's positive or negative class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Dataset-specific wording of the explanation prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Singular noun for one row, e.g. `customer`.
    pub noun: String,
    /// Plural noun, e.g. `customers`.
    pub plural: String,
    /// Relative clause describing the positive group after `who`.
    pub positive_group: String,
    pub negative_group: String,
    /// Ending of the core part when the audited row is positive.
    pub positive_core: String,
    pub negative_core: String,
    /// Target value that counts as positive; `None` treats the audited row's
    /// own value as positive.
    pub positive_value: Option<String>,
}

impl PromptTemplate {
    /// Wording for a dataset without a hand-written template.
    pub fn generic(noun: &str, plural: &str, feature: &str, positive: &str, negative: &str) -> Self {
        PromptTemplate {
            noun: noun.into(),
            plural: plural.into(),
            positive_group: format!("have {feature} {positive}"),
            negative_group: format!("have {feature} {negative}"),
            positive_core: format!("has {feature} {positive}"),
            negative_core: format!("has {feature} {negative}"),
            positive_value: Some(positive.into()),
        }
    }

    pub fn travel() -> Self {
        PromptTemplate {
            noun: "customer".into(),
            plural: "customers".into(),
            positive_group: "haven't churned from a travel company".into(),
            negative_group: "have churned from a travel company".into(),
            positive_core: "hasn't churned from the travel company".into(),
            negative_core: "has churned from the travel company".into(),
            positive_value: Some("0".into()),
        }
    }

    pub fn adult() -> Self {
        PromptTemplate {
            noun: "adult".into(),
            plural: "adults".into(),
            positive_group: "earn annual incomes which exceed $50K".into(),
            negative_group: "earn annual incomes which don't exceed $50K".into(),
            positive_core: "earns an annual income which exceeds $50K".into(),
            negative_core: "earns an annual income which doesn't exceed $50K".into(),
            positive_value: Some(">50K".into()),
        }
    }

    pub fn heloc() -> Self {
        const SPAN: &str =
            "over a period of 24 months since the account of Home Equity Line of Credit (HELOC) was opened";
        PromptTemplate {
            noun: "individual".into(),
            plural: "individuals".into(),
            positive_group: format!("have never been late for payments by more than 90 days {SPAN}"),
            negative_group: format!("have been late for payments at least 90 days by at least once {SPAN}"),
            positive_core: format!("has never been late for payments by more than 90 days {SPAN}"),
            negative_core: format!("has been late for payments at least 90 days by at least once {SPAN}"),
            positive_value: Some("Good".into()),
        }
    }

    pub fn polarity_of(&self, value: &str) -> Polarity {
        match &self.positive_value {
            Some(p) if p != value => Polarity::Negative,
            _ => Polarity::Positive,
        }
    }
}

/// Templates keyed by dataset kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for PromptRegistry {
    /// The three built-in kinds: `travel`, `adult` and `heloc`.
    fn default() -> Self {
        let mut r = PromptRegistry {
            templates: BTreeMap::new(),
        };
        r.register("travel", PromptTemplate::travel());
        r.register("adult", PromptTemplate::adult());
        r.register("heloc", PromptTemplate::heloc());
        r
    }
}

impl PromptRegistry {
    pub fn register(&mut self, kind: &str, template: PromptTemplate) {
        self.templates.insert(kind.to_string(), template);
    }

    pub fn get(&self, kind: &str) -> Result<&PromptTemplate> {
        self.templates
            .get(kind)
            .ok_or_else(|| Error::UnknownDatasetKind(kind.to_string()))
    }
}

/// A retrieved original row as it appears in the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: usize,
    pub features: String,
    pub description: String,
}

/// The assembled prompt and whether it lacks exemplars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationPrompt {
    pub text: String,
    /// True when either class block is empty.
    pub degraded: bool,
}

fn core_part(t: &PromptTemplate, features: &str, description: &str, polarity: Polarity) -> String {
    let ending = match polarity {
        Polarity::Positive => &t.positive_core,
        Polarity::Negative => &t.negative_core,
    };
    format!(
        "explain the reason why the {} with the FEATURES: \"{features}\" and DESCRIPTION: \"{description}\" {ending}",
        t.noun
    )
}

fn block(out: &mut String, heading: &str, items: &[Exemplar]) {
    let _ = writeln!(out, "{heading}");
    for (i, e) in items.iter().enumerate() {
        let _ = writeln!(out, "[{}] FEATURES: \"{}\"", i + 1, e.features);
        let _ = writeln!(out, "DESCRIPTION: \"{}\"", e.description);
    }
}

/// Lays out the explanation prompt: the task with its core part, the
/// positive and negative exemplar blocks between `---` lines, and the task
/// repeated at the end.
pub fn build_explanation_prompt(
    registry: &PromptRegistry,
    kind: &str,
    features: &str,
    description: &str,
    positives: &[Exemplar],
    negatives: &[Exemplar],
    polarity: Polarity,
) -> Result<ExplanationPrompt> {
    let t = registry.get(kind)?;
    let core = core_part(t, features, description, polarity);
    let upper = t.plural.to_uppercase();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Your task is to {core}, referring to the following set of {} positive {} who {} and {} negative {} who {}:",
        positives.len(),
        t.plural,
        t.positive_group,
        negatives.len(),
        t.plural,
        t.negative_group
    );
    out.push_str("---\n");
    block(&mut out, &format!("POSITIVE {upper}"), positives);
    block(&mut out, &format!("NEGATIVE {upper}"), negatives);
    out.push_str("---\n");
    let _ = write!(out, "Your task is to {core}.");
    Ok(ExplanationPrompt {
        text: out,
        degraded: positives.is_empty() || negatives.is_empty(),
    })
}
