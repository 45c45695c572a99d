//! Automatic evaluation of a synthetic table against the original one.

pub mod classifiers;
pub mod encode;
pub mod gmm;
pub mod stats;
pub mod svm;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{ColumnKind, Table};
use crate::error::{Error, Result};
use crate::rng;

pub use classifiers::{accuracy, fit_classifier, Classifier, ClassifierKind, SuiteConfig};
pub use encode::FeatureEncoder;
pub use gmm::{Gmm, GmmConfig};
pub use stats::{jaccard_nearest, kl_histograms, kl_numeric, pearson, repetition_rate, roc_auc, RepetitionMode};
pub use svm::Svm;

/// Accuracy (or AUC) of each classifier in the suite, plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteScores {
    pub lr: f64,
    pub dt: f64,
    pub rf: f64,
    pub mean: f64,
}

impl SuiteScores {
    fn from_vec(v: &[f64]) -> Self {
        SuiteScores {
            lr: v[0],
            dt: v[1],
            rf: v[2],
            mean: (v[0] + v[1] + v[2]) / 3.0,
        }
    }

    pub fn get(&self, kind: ClassifierKind) -> f64 {
        match kind {
            ClassifierKind::Lr => self.lr,
            ClassifierKind::Dt => self.dt,
            ClassifierKind::Rf => self.rf,
        }
    }
}

/// A suite trained on one table, with the encoder it was fitted with.
pub struct FittedSuite {
    pub encoder: FeatureEncoder,
    pub models: Vec<(ClassifierKind, Box<dyn Classifier>)>,
}

impl FittedSuite {
    pub fn fit(train: &Table, cfg: &SuiteConfig, seed: u64) -> Result<Self> {
        let encoder = FeatureEncoder::fit(train, true)?;
        let k = encoder.classes().len();
        if k < 2 {
            let name = train.schema.target_column().unwrap_or_default().to_string();
            return Err(Error::DegenerateTarget(name));
        }
        let x = encoder.encode(train)?;
        let y: Vec<usize> = encoder
            .labels(train)?
            .into_iter()
            .map(|l| l.expect("fit classes"))
            .collect();
        let d = encoder.dim();
        let models = crate::exec::map_slice(&ClassifierKind::ALL, |&kind| {
            let s = rng::derive_seed(seed, "suite", kind as u64);
            (kind, fit_classifier(kind, &x, &y, d, k, cfg, s))
        });
        Ok(FittedSuite { encoder, models })
    }

    /// Accuracy of each model on `test`; rows with an unseen target class
    /// count as errors.
    pub fn accuracies(&self, test: &Table) -> Result<SuiteScores> {
        let x = self.encoder.encode(test)?;
        let truth = self.encoder.labels(test)?;
        let v: Vec<f64> = self
            .models
            .iter()
            .map(|(_, m)| accuracy(&m.predict(&x, test.len()), &truth))
            .collect();
        Ok(SuiteScores::from_vec(&v))
    }

    /// Rows of `test` that every model misclassifies.
    pub fn all_wrong(&self, test: &Table) -> Result<Vec<bool>> {
        let x = self.encoder.encode(test)?;
        let truth = self.encoder.labels(test)?;
        let preds: Vec<Vec<usize>> = self.models.iter().map(|(_, m)| m.predict(&x, test.len())).collect();
        Ok((0..test.len())
            .map(|i| preds.iter().all(|p| Some(p[i]) != truth[i]))
            .collect())
    }
}

fn check_schemas(a: &Table, b: &Table) -> Result<()> {
    if !a.schema.compatible_with(&b.schema) {
        return Err(Error::SchemaMismatch {
            expected: a.schema.len(),
            got: b.schema.len(),
        });
    }
    Ok(())
}

/// Trains the suite on `original` and scores it on `synthetic`.
pub fn ml_efficiency(original: &Table, synthetic: &Table, cfg: &SuiteConfig, seed: u64) -> Result<SuiteScores> {
    check_schemas(original, synthetic)?;
    FittedSuite::fit(original, cfg, seed)?.accuracies(synthetic)
}

/// Trains the suite on `synthetic` and returns ROC-AUC on `original_test`.
/// The positive class is the second of the two sorted target classes.
pub fn auc_measure(original_test: &Table, synthetic: &Table, cfg: &SuiteConfig, seed: u64) -> Result<SuiteScores> {
    check_schemas(original_test, synthetic)?;
    let suite = FittedSuite::fit(synthetic, cfg, seed)?;
    if suite.encoder.classes().len() != 2 {
        return Err(Error::DegenerateTarget(format!(
            "AUC needs a binary target, found {} classes",
            suite.encoder.classes().len()
        )));
    }
    let x = suite.encoder.encode(original_test)?;
    let positive: Vec<bool> = suite
        .encoder
        .labels(original_test)?
        .iter()
        .map(|l| *l == Some(1))
        .collect();
    let mut v = Vec::with_capacity(3);
    for (_, m) in &suite.models {
        let p: Vec<f64> = m
            .predict_proba(&x, original_test.len())
            .chunks(2)
            .map(|c| c[1])
            .collect();
        v.push(roc_auc(&p, &positive)?);
    }
    Ok(SuiteScores::from_vec(&v))
}

/// Settings of the real-versus-synthetic kernel SVM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub c: f64,
    /// RBF width; `None` uses `1 / (d · Var(X))`.
    pub gamma: Option<f64>,
    pub train_fraction: f64,
    /// Cap on rows per class, keeping the O(n²) kernel tractable.
    pub max_per_class: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            gamma: None,
            train_fraction: 0.7,
            max_per_class: 2000,
        }
    }
}

/// A fitted real-versus-synthetic SVM with its held-out accuracy.
pub struct DiscriminatorMeasure {
    pub accuracy: f64,
    pub encoder: FeatureEncoder,
    pub svm: Svm,
}

impl DiscriminatorMeasure {
    /// Platt probability that each row of `table` is real.
    pub fn prob_real(&self, table: &Table) -> Result<Vec<f64>> {
        let x = self.encoder.encode(table)?;
        Ok(self.svm.predict_proba(&x, table.len()))
    }
}

/// Held-out accuracy of an RBF SVM telling original rows (label 1) from
/// synthetic ones (label 0). Both sides are subsampled to the same size,
/// then split 70/30 within each class. Lower is better; 0.5 is chance.
pub fn discriminator_measure(
    original: &Table,
    synthetic: &Table,
    cfg: &SvmConfig,
    seed: u64,
) -> Result<DiscriminatorMeasure> {
    check_schemas(original, synthetic)?;
    if original.is_empty() || synthetic.is_empty() {
        return Err(Error::EmptyTable("discriminator measure needs both tables".into()));
    }
    let per_class = original.len().min(synthetic.len()).min(cfg.max_per_class.max(1));
    let mut r = rng::stream(seed, "svm-split", 0);
    let mut pick = |t: &Table| {
        let mut idx: Vec<usize> = (0..t.len()).collect();
        idx.shuffle(&mut r);
        idx.truncate(per_class);
        let n_train = ((per_class as f64 * cfg.train_fraction).round() as usize).clamp(1.min(per_class), per_class);
        let test = idx.split_off(n_train);
        (t.subset(&idx), t.subset(&test))
    };
    let (orig_train, orig_test) = pick(original);
    let (syn_train, syn_test) = pick(synthetic);
    let mut train = orig_train.clone();
    train.rows.extend(syn_train.rows.iter().cloned());
    let encoder = FeatureEncoder::fit(&train, false)?;
    let d = encoder.dim();
    let x = encoder.encode(&train)?;
    let y: Vec<f64> = (0..train.len())
        .map(|i| if i < orig_train.len() { 1.0 } else { -1.0 })
        .collect();
    let gamma = cfg.gamma.unwrap_or_else(|| svm::scale_gamma(&x, d));
    let svm = Svm::fit(&x, &y, d, cfg.c, gamma);
    // With too few rows for a held-out split, score on the training rows.
    let (orig_eval, syn_eval) = if orig_test.is_empty() {
        (orig_train, syn_train)
    } else {
        (orig_test, syn_test)
    };
    let hits = svm
        .predict(&encoder.encode(&orig_eval)?, orig_eval.len())
        .iter()
        .filter(|&&p| p > 0.0)
        .count()
        + svm
            .predict(&encoder.encode(&syn_eval)?, syn_eval.len())
            .iter()
            .filter(|&&p| p < 0.0)
            .count();
    let accuracy = hits as f64 / (orig_eval.len() + syn_eval.len()) as f64;
    Ok(DiscriminatorMeasure { accuracy, encoder, svm })
}

/// `(L_syn, L_test)`: mean log-likelihood of `synthetic` under a mixture fit
/// on `original_train`, and of `original_test` under a mixture fit on
/// `synthetic`. Both use an encoder fitted on `original_train`.
pub fn gmm_loglik(
    original_train: &Table,
    original_test: &Table,
    synthetic: &Table,
    cfg: &GmmConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    check_schemas(original_train, synthetic)?;
    check_schemas(original_train, original_test)?;
    let enc = FeatureEncoder::fit(original_train, false)?;
    let d = enc.dim();
    let xo = enc.encode(original_train)?;
    let xt = enc.encode(original_test)?;
    let xs = enc.encode(synthetic)?;
    let g_orig = Gmm::fit(&xo, original_train.len(), d, cfg, seed)?;
    let g_syn = Gmm::fit(&xs, synthetic.len(), d, cfg, seed)?;
    Ok((
        g_orig.mean_loglik(&xs, synthetic.len()),
        g_syn.mean_loglik(&xt, original_test.len()),
    ))
}

/// Which metrics to compute and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub suite: SuiteConfig,
    pub svm: SvmConfig,
    pub gmm: GmmConfig,
    pub kl_bins: usize,
    pub repetition: RepetitionMode,
    pub jaccard_tolerance: Option<f64>,
    /// Skip the mixture-model log-likelihoods.
    pub skip_gmm: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            suite: SuiteConfig::default(),
            svm: SvmConfig::default(),
            gmm: GmmConfig::default(),
            kl_bins: 20,
            repetition: RepetitionMode::AgainstReference,
            jaccard_tolerance: None,
            skip_gmm: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub original_rows: usize,
    pub synthetic_rows: usize,
    pub ml_efficiency: SuiteScores,
    /// The same suite scored on held-out original rows, for comparison.
    pub ml_efficiency_original_test: SuiteScores,
    pub discriminator_measure: f64,
    pub jaccard_mean_x100: f64,
    pub kl_per_feature: BTreeMap<String, f64>,
    pub repetition_rate: f64,
    pub auc: Option<SuiteScores>,
    pub gmm: Option<(f64, f64)>,
    pub pearson: Option<(f64, f64)>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let pct = |v: f64| format!("{:6.2}", 100.0 * v);
        let _ = writeln!(
            s,
            "rows: original {} / synthetic {}",
            self.original_rows, self.synthetic_rows
        );
        let _ = writeln!(s, "seed: {}", self.config.seed);
        let _ = writeln!(s, "{:<34}{:>8}{:>8}{:>8}{:>8}", "metric", "LR", "DT", "RF", "mean");
        let mut suite = |name: &str, v: &SuiteScores| {
            let _ = writeln!(
                s,
                "{:<34}{:>8}{:>8}{:>8}{:>8}",
                name,
                pct(v.lr),
                pct(v.dt),
                pct(v.rf),
                pct(v.mean)
            );
        };
        suite("accuracy on synthetic (%)", &self.ml_efficiency);
        suite("accuracy on original test (%)", &self.ml_efficiency_original_test);
        if let Some(a) = &self.auc {
            suite("AUC trained on synthetic (%)", a);
        }
        let _ = writeln!(
            s,
            "{:<34}{:>8}",
            "discriminator measure (%)",
            pct(self.discriminator_measure)
        );
        let _ = writeln!(s, "{:<34}{:>8.2}", "jaccard (x100)", self.jaccard_mean_x100);
        let _ = writeln!(s, "{:<34}{:>8}", "repetition rate (%)", pct(self.repetition_rate));
        for (f, v) in &self.kl_per_feature {
            let _ = writeln!(s, "{:<34}{:>8.4}", format!("KL {f}"), v);
        }
        if let Some((ls, lt)) = self.gmm {
            let _ = writeln!(s, "{:<34}{:>8.3}", "GMM L_syn", ls);
            let _ = writeln!(s, "{:<34}{:>8.3}", "GMM L_test", lt);
        }
        if let Some((r, p)) = self.pearson {
            let _ = writeln!(s, "{:<34}{:>8.3} (p = {:.3e})", "pearson r", r, p);
        }
        s
    }
}

/// Runs the whole battery. `original_train` trains the utility suite and the
/// density model; `original_test` is held out for AUC and `L_test`.
pub fn evaluate(
    original_train: &Table,
    original_test: &Table,
    synthetic: &Table,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    check_schemas(original_train, synthetic)?;
    check_schemas(original_train, original_test)?;
    let seed = cfg.seed;
    let suite = FittedSuite::fit(original_train, &cfg.suite, rng::derive_seed(seed, "eval-suite", 0))?;
    let ml = suite.accuracies(synthetic)?;
    let ml_test = suite.accuracies(original_test)?;
    let disc = discriminator_measure(
        original_train,
        synthetic,
        &cfg.svm,
        rng::derive_seed(seed, "eval-svm", 0),
    )?;
    let jac = jaccard_nearest(synthetic, original_train, cfg.jaccard_tolerance)?;
    let mut kl = BTreeMap::new();
    for c in original_train.schema.columns() {
        if c.kind == ColumnKind::Numeric {
            kl.insert(
                c.name.clone(),
                kl_numeric(original_train, synthetic, &c.name, cfg.kl_bins)?,
            );
        }
    }
    let rep = match cfg.repetition {
        RepetitionMode::LeaveOneOut => repetition_rate(synthetic, synthetic, RepetitionMode::LeaveOneOut)?,
        m => repetition_rate(synthetic, original_train, m)?,
    };
    let auc = match auc_measure(
        original_test,
        synthetic,
        &cfg.suite,
        rng::derive_seed(seed, "eval-auc", 0),
    ) {
        Ok(a) => Some(a),
        Err(Error::DegenerateTarget(_)) | Err(Error::DegenerateInput(_)) => None,
        Err(e) => return Err(e),
    };
    let gmm = if cfg.skip_gmm {
        None
    } else {
        Some(gmm_loglik(
            original_train,
            original_test,
            synthetic,
            &cfg.gmm,
            rng::derive_seed(seed, "eval-gmm", 0),
        )?)
    };
    Ok(EvalReport {
        config: cfg.clone(),
        original_rows: original_train.len(),
        synthetic_rows: synthetic.len(),
        ml_efficiency: ml,
        ml_efficiency_original_test: ml_test,
        discriminator_measure: disc.accuracy,
        jaccard_mean_x100: jac,
        kl_per_feature: kl,
        repetition_rate: rep,
        auc,
        gmm,
        pearson: None,
    })
}

/// Deterministic stratified split of a table into `(train, test)`.
pub fn stratified_split(table: &Table, train_fraction: f64, seed: u64) -> Result<(Table, Table)> {
    let t = table
        .schema
        .target_index()
        .ok_or_else(|| Error::InvalidSchema("table has no target column".into()))?;
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        groups.entry(r.values()[t].canonical()).or_default().push(i);
    }
    let mut r = rng::stream(seed, "split", 0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in groups {
        idx.shuffle(&mut r);
        let n = (idx.len() as f64 * train_fraction).round() as usize;
        test.extend(idx.split_off(n.min(idx.len())));
        train.extend(idx);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((table.subset(&train), table.subset(&test)))
}
