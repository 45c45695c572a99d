//! End-to-end runs: data → SFT → adversarial training → generation →
//! evaluation → audit, with every stage cached on disk under a hash of the
//! configuration it depends on.

mod generate;

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::{
    explain_feature, AuditConfig, AuditContext, AuditExplanation, AuditLog, BackendConfig, DescriptionCache,
    PromptRegistry, PromptTemplate,
};
use crate::checkpoint::{self, load_policy, save_policy};
use crate::codec::{load_csv, load_csv_with_schema, write_csv_string, Provenance, Table, TableSchema};
use crate::discriminator::{DiscHyper, Discriminator};
use crate::error::{Error, Result};
use crate::metrics::{self, discriminator_measure, stratified_split, EvalConfig, EvalReport, FittedSuite};
use crate::policy::{fit_sft, PolicyHyper, PolicyModel, SamplerConfig, SftConfig, TokenId, TrainingLog, Vocabulary};
use crate::ppo::{append_history, read_history, train_to_equilibrium, EquilibriumOutcome, PpoConfig, RoundContext};
use crate::rng::derive_seed;
use crate::toy::{make_toy_table, ToySpec};

pub use generate::{generate_table, GenerateConfig, GenerateError, Generation, GenerationReport};

/// Overrides the audit backend endpoint.
pub const ENDPOINT_ENV: &str = "TABSYNTH_BACKEND_ENDPOINT";
/// Overrides the audit backend model id.
pub const MODEL_ENV: &str = "TABSYNTH_BACKEND_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// CSV to read; without one the toy table is generated.
    pub path: Option<PathBuf>,
    /// Target column; the last column when unset.
    pub target: Option<String>,
    /// Infer numeric columns from the data.
    pub infer_numeric: bool,
    pub toy: ToySpec,
    /// Share of rows held out as the original test split.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            target: None,
            infer_numeric: true,
            toy: ToySpec::default(),
            test_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditStageConfig {
    #[serde(flatten)]
    pub audit: AuditConfig,
    pub backend: BackendConfig,
    /// Synthetic rows to explain.
    pub rows: usize,
    /// Feature to explain; the target column when unset.
    pub feature: Option<String>,
}

impl Default for AuditStageConfig {
    fn default() -> Self {
        AuditStageConfig {
            audit: AuditConfig::default(),
            backend: BackendConfig::default(),
            rows: 20,
            feature: None,
        }
    }
}

/// Everything a run needs. Nested `seed` fields are ignored: every stage
/// seed is derived from the master `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: PolicyHyper,
    pub sft: SftConfig,
    pub sampler: SamplerConfig,
    pub ppo: PpoConfig,
    pub discriminator: DiscHyper,
    pub generate: GenerateConfig,
    pub eval: EvalConfig,
    pub audit: AuditStageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: PolicyHyper::default(),
            sft: SftConfig::default(),
            sampler: SamplerConfig::default(),
            ppo: PpoConfig::default(),
            discriminator: DiscHyper::default(),
            generate: GenerateConfig::default(),
            eval: EvalConfig::default(),
            audit: AuditStageConfig::default(),
        }
    }
}

impl RunConfig {
    /// Settings sized for the toy table on one CPU core.
    pub fn toy() -> Self {
        RunConfig {
            model: PolicyHyper {
                layers: 1,
                heads: 2,
                model_dim: 32,
                context_length: 40,
            },
            sft: SftConfig {
                epochs: 5,
                lr: 3e-3,
                batch_size: 16,
                weight_decay: 0.0,
                seed: 0,
            },
            ppo: PpoConfig {
                beta: 0.2,
                lr: 1e-3,
                minibatch_size: 64,
                disc_epochs: 5,
                disc_lr: 3e-3,
                ..PpoConfig::default()
            },
            discriminator: DiscHyper::small(),
            generate: GenerateConfig {
                k: 500,
                ..GenerateConfig::default()
            },
            audit: AuditStageConfig {
                audit: AuditConfig {
                    dataset_kind: "toy".into(),
                    ..AuditConfig::default()
                },
                ..AuditStageConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Applies the backend environment overrides.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var(ENDPOINT_ENV) {
            self.audit.backend.endpoint = v;
        }
        if let Ok(v) = std::env::var(MODEL_ENV) {
            self.audit.backend.model = v;
        }
    }

    /// Copies derived seeds into every nested config.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.data.toy.seed = derive_seed(s, "toy", 0);
        c.sft.seed = derive_seed(s, "sft", 0);
        c.sampler.seed = derive_seed(s, "sample", 0);
        c.ppo.seed = derive_seed(s, "ppo", 0);
        c.eval.seed = derive_seed(s, "eval", 0);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::Config("data.test_fraction must lie in (0, 1)".into()));
        }
        if self.data.path.is_none() {
            self.data.toy.validate()?;
        }
        self.model.validate()?;
        self.sampler.validate()?;
        self.ppo.validate()?;
        self.discriminator.validate()?;
        self.generate.validate()?;
        if self.sft.batch_size == 0 || !(self.sft.lr > 0.0) {
            return Err(Error::Config("sft: batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

/// A finished stage: its directory and content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRef {
    pub name: String,
    pub hash: String,
    pub dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    stage: String,
    hash: String,
    inputs: serde_json::Value,
}

fn stage_ref<T: Serialize>(cfg: &RunConfig, name: &str, inputs: &T) -> Result<(StageRef, serde_json::Value)> {
    let value = serde_json::to_value(inputs)?;
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update(serde_json::to_vec(&value)?);
    let hash = hex::encode(h.finalize())[..16].to_string();
    let dir = cfg.output_dir.join(format!("{name}-{hash}"));
    Ok((
        StageRef {
            name: name.into(),
            hash,
            dir,
        },
        value,
    ))
}

fn is_done(stage: &StageRef) -> bool {
    stage.dir.join("manifest.json").is_file()
}

fn mark_done(stage: &StageRef, inputs: serde_json::Value) -> Result<()> {
    let m = Manifest {
        stage: stage.name.clone(),
        hash: stage.hash.clone(),
        inputs,
    };
    write_file(
        &stage.dir.join("manifest.json"),
        serde_json::to_string_pretty(&m)?.as_bytes(),
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    checkpoint::write_bytes(path, bytes)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// The original table split into train and test.
pub struct DataStage {
    pub stage: StageRef,
    pub train: Table,
    pub test: Table,
}

pub fn run_data_stage(cfg: &RunConfig) -> Result<DataStage> {
    let cfg = cfg.resolved();
    let source = match &cfg.data.path {
        Some(p) => {
            serde_json::json!({ "csv": file_digest(p)?, "target": cfg.data.target, "infer": cfg.data.infer_numeric })
        }
        None => serde_json::to_value(&cfg.data.toy)?,
    };
    let (stage, inputs) = stage_ref(&cfg, "data", &(source, cfg.data.test_fraction, cfg.seed))?;
    let schema_path = stage.dir.join("schema.json");
    if is_done(&stage) {
        let schema: TableSchema = read_json(&schema_path)?;
        let train = load_csv_with_schema(stage.dir.join("train.csv"), &schema)?;
        let test = load_csv_with_schema(stage.dir.join("test.csv"), &schema)?;
        return Ok(DataStage { stage, train, test });
    }
    let table = match &cfg.data.path {
        Some(p) => load_csv(p, cfg.data.infer_numeric, cfg.data.target.as_deref())?,
        None => make_toy_table(&cfg.data.toy)?,
    };
    let (train, test) = stratified_split(&table, 1.0 - cfg.data.test_fraction, derive_seed(cfg.seed, "split", 0))?;
    write_json(&schema_path, &table.schema)?;
    write_file(&stage.dir.join("train.csv"), write_csv_string(&train)?.as_bytes())?;
    write_file(&stage.dir.join("test.csv"), write_csv_string(&test)?.as_bytes())?;
    mark_done(&stage, inputs)?;
    Ok(DataStage { stage, train, test })
}

pub struct SftStage {
    pub stage: StageRef,
    pub policy: PolicyModel,
    pub log: TrainingLog,
}

/// Fits the policy on the serialized training rows.
pub fn run_sft_stage(cfg: &RunConfig, data: &DataStage) -> Result<SftStage> {
    let rc = cfg.resolved();
    let (stage, inputs) = stage_ref(&rc, "sft", &(&data.stage.hash, &rc.model, &rc.sft, rc.seed))?;
    let ckpt = stage.dir.join("policy.ckpt");
    let log_path = stage.dir.join("sft_log.json");
    if is_done(&stage) {
        return Ok(SftStage {
            policy: load_policy(&ckpt)?,
            log: read_json(&log_path)?,
            stage,
        });
    }
    let sentences = data.train.sentences();
    let vocab = Vocabulary::build(sentences.iter().map(String::as_str));
    let mut policy = PolicyModel::new(vocab, rc.model, derive_seed(rc.seed, "policy-init", 0))?;
    let log = fit_sft(&mut policy, &sentences, &rc.sft)?;
    policy.params_mut()?.quantize_f32();
    save_policy(&policy, &ckpt)?;
    write_json(&log_path, &log)?;
    mark_done(&stage, inputs)?;
    Ok(SftStage { stage, policy, log })
}

pub struct AdversarialStage {
    pub stage: StageRef,
    pub policy: PolicyModel,
    pub outcome: EquilibriumOutcome,
}

fn round_paths(dir: &Path, round: usize) -> (PathBuf, PathBuf) {
    let r = dir.join("rounds");
    (
        r.join(format!("round-{round:04}.policy.ckpt")),
        r.join(format!("round-{round:04}.disc.ckpt")),
    )
}

/// Adversarial PPO rounds from the SFT policy. Each round's checkpoints are
/// written before its history line, so an interrupted stage resumes from
/// the last recorded round and reproduces the same history.
pub fn run_adversarial_stage(cfg: &RunConfig, data: &DataStage, sft: &SftStage) -> Result<AdversarialStage> {
    let rc = cfg.resolved();
    let (stage, inputs) = stage_ref(
        &rc,
        "adversarial",
        &(&sft.stage.hash, &rc.ppo, &rc.discriminator, &rc.sampler, rc.seed),
    )?;
    let final_ckpt = stage.dir.join("policy.ckpt");
    let history_path = stage.dir.join("history.jsonl");
    let outcome_path = stage.dir.join("outcome.json");
    if is_done(&stage) {
        return Ok(AdversarialStage {
            policy: load_policy(&final_ckpt)?,
            outcome: read_json(&outcome_path)?,
            stage,
        });
    }
    fs::create_dir_all(stage.dir.join("rounds")).map_err(|e| Error::io(&stage.dir, e))?;
    let sft_policy = load_policy(&sft.stage.dir.join("policy.ckpt"))?;
    let reference = sft_policy.snapshot_reference();
    let history = read_history(&history_path)?;
    let (mut policy, mut disc) = match history.len() {
        0 => {
            let disc = Discriminator::new(
                sft_policy.vocab().clone(),
                rc.discriminator,
                derive_seed(rc.seed, "disc-init", 0),
            )?;
            (sft_policy, disc)
        }
        n => {
            let (p, d) = round_paths(&stage.dir, n - 1);
            (
                load_policy(&p)?,
                Discriminator::from_bytes(&checkpoint::read_bytes(&d)?)?,
            )
        }
    };
    let vocab = policy.vocab().clone();
    let real: Vec<Vec<TokenId>> = data.train.sentences().iter().map(|s| vocab.tokenize(s)).collect();
    let ctx = RoundContext {
        reference: &reference,
        real: &real,
        schema: &data.train.schema,
        sampler: &rc.sampler,
        cfg: &rc.ppo,
    };
    let dir = stage.dir.clone();
    let outcome = train_to_equilibrium(&mut policy, &mut disc, &ctx, history, |report, p, d| {
        let (pp, dp) = round_paths(&dir, report.round);
        save_policy(p, &pp)?;
        checkpoint::write_bytes(&dp, &d.to_bytes()?)?;
        append_history(&history_path, report)
    })?;
    save_policy(&policy, &final_ckpt)?;
    checkpoint::write_bytes(&stage.dir.join("disc.ckpt"), &disc.to_bytes()?)?;
    write_json(&outcome_path, &outcome)?;
    mark_done(&stage, inputs)?;
    Ok(AdversarialStage { stage, policy, outcome })
}

pub struct GenerateStage {
    pub stage: StageRef,
    pub table: Table,
    pub report: GenerationReport,
    pub csv_path: PathBuf,
}

/// Samples the synthetic table from `policy` (identified by `upstream`).
/// An exhausted budget still writes the partial table before failing.
pub fn run_generate_stage(
    cfg: &RunConfig,
    schema: &TableSchema,
    policy: &PolicyModel,
    upstream: &StageRef,
) -> Result<GenerateStage> {
    let rc = cfg.resolved();
    let (stage, inputs) = stage_ref(&rc, "generate", &(&upstream.hash, &rc.sampler, &rc.generate))?;
    let csv_path = stage.dir.join("synthetic.csv");
    let report_path = stage.dir.join("generation.json");
    if is_done(&stage) {
        let mut table = load_csv_with_schema(&csv_path, schema)?;
        table.provenance = Provenance::Synthetic;
        return Ok(GenerateStage {
            table,
            report: read_json(&report_path)?,
            stage,
            csv_path,
        });
    }
    let (generation, failure) = match generate_table(policy, &rc.sampler, schema, &rc.generate) {
        Ok(g) => (g, None),
        Err(GenerateError::Exhausted { partial }) => {
            let r = &partial.report;
            let err = Error::BudgetExhausted {
                attempts: r.attempts,
                collected: r.collected,
                target: r.requested,
            };
            (*partial, Some(err))
        }
        Err(GenerateError::Failed(e)) => return Err(e),
    };
    write_file(&csv_path, write_csv_string(&generation.table)?.as_bytes())?;
    write_json(&report_path, &generation.report)?;
    if let Some(e) = failure {
        return Err(e);
    }
    mark_done(&stage, inputs)?;
    Ok(GenerateStage {
        table: generation.table,
        report: generation.report,
        stage,
        csv_path,
    })
}

/// Loads a synthetic CSV against the original schema.
pub fn load_synthetic(path: &Path, schema: &TableSchema) -> Result<Table> {
    let mut t = load_csv_with_schema(path, schema)?;
    t.provenance = Provenance::Synthetic;
    Ok(t)
}

pub struct EvaluateStage {
    pub stage: StageRef,
    pub report: EvalReport,
}

/// Runs the metric battery and writes `report.json` and `report.txt`.
pub fn evaluate_run(cfg: &RunConfig, data: &DataStage, synthetic: &Table, upstream: &str) -> Result<EvaluateStage> {
    let rc = cfg.resolved();
    let (stage, inputs) = stage_ref(&rc, "evaluate", &(&data.stage.hash, upstream, &rc.eval))?;
    let json_path = stage.dir.join("report.json");
    if is_done(&stage) {
        return Ok(EvaluateStage {
            report: read_json(&json_path)?,
            stage,
        });
    }
    let report = metrics::evaluate(&data.train, &data.test, synthetic, &rc.eval)?;
    let mut json = report.to_json()?;
    json.push('\n');
    write_file(&json_path, json.as_bytes())?;
    write_file(&stage.dir.join("report.txt"), report.to_text().as_bytes())?;
    mark_done(&stage, inputs)?;
    Ok(EvaluateStage { stage, report })
}

/// Evaluates a synthetic CSV on disk. The file is read before any metric
/// runs, so a missing file fails with an IO error.
pub fn evaluate_file(cfg: &RunConfig, data: &DataStage, path: &Path) -> Result<EvaluateStage> {
    let digest = file_digest(path)?;
    let synthetic = load_synthetic(path, &data.train.schema)?;
    evaluate_run(cfg, data, &synthetic, &digest)
}

/// Template for the toy table's target.
pub fn toy_template(spec: &ToySpec) -> PromptTemplate {
    PromptTemplate::generic(
        "item",
        "items",
        &spec.target_name,
        &spec.target_values[0],
        &spec.target_values[1],
    )
}

pub struct AuditStage {
    pub stage: StageRef,
    pub explanations: Vec<AuditExplanation>,
}

/// Explains the audited feature of the first `audit.rows` synthetic rows.
pub fn run_audit_stage(cfg: &RunConfig, data: &DataStage, synthetic: &Table, upstream: &str) -> Result<AuditStage> {
    let mut rc = cfg.resolved();
    rc.apply_env();
    let (stage, inputs) = stage_ref(&rc, "audit", &(&data.stage.hash, upstream, &rc.audit, &rc.eval.svm))?;
    let out_path = stage.dir.join("explanations.jsonl");
    if is_done(&stage) {
        let text = fs::read_to_string(&out_path).map_err(|e| Error::io(&out_path, e))?;
        let explanations = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        return Ok(AuditStage { stage, explanations });
    }
    let backend = rc.audit.backend.build()?;
    let mut registry = PromptRegistry::default();
    registry.register("toy", toy_template(&rc.data.toy));
    let feature = match &rc.audit.feature {
        Some(f) => f.clone(),
        None => data
            .train
            .schema
            .target_column()
            .ok_or_else(|| Error::InvalidSchema("no target column to audit".into()))?
            .to_string(),
    };
    let svm = discriminator_measure(
        &data.train,
        synthetic,
        &rc.eval.svm,
        derive_seed(rc.seed, "audit-svm", 0),
    )?;
    let suite = FittedSuite::fit(&data.train, &rc.eval.suite, derive_seed(rc.seed, "audit-suite", 0))?;
    let cache = DescriptionCache::new();
    fs::create_dir_all(&stage.dir).map_err(|e| Error::io(&stage.dir, e))?;
    let log_path = stage.dir.join("audit_log.jsonl");
    // A rerun after a failure starts a fresh log.
    let _ = fs::remove_file(&log_path);
    let log = AuditLog::to_file(&log_path)?;
    let ctx = AuditContext {
        original: &data.train,
        interpreter: backend.as_ref(),
        explainer: backend.as_ref(),
        embedder: None,
        registry: &registry,
        cache: &cache,
        log: &log,
        cfg: &rc.audit.audit,
        svm: Some(&svm),
        suite: Some(&suite),
    };
    let n = synthetic.len().min(rc.audit.rows);
    let mut lines = String::new();
    let mut explanations = Vec::with_capacity(n);
    for row in &synthetic.rows[..n] {
        let e = explain_feature(row, &feature, &ctx)?;
        lines.push_str(&serde_json::to_string(&e)?);
        lines.push('\n');
        explanations.push(e);
    }
    write_file(&out_path, lines.as_bytes())?;
    mark_done(&stage, inputs)?;
    Ok(AuditStage { stage, explanations })
}

/// Outputs of a full run.
pub struct RunOutputs {
    pub data: DataStage,
    pub sft: SftStage,
    pub adversarial: AdversarialStage,
    pub generated: GenerateStage,
    pub evaluation: EvaluateStage,
    pub audit: Option<AuditStage>,
}

/// Every stage in order; the audit runs when `with_audit` is set.
pub fn run_all(cfg: &RunConfig, with_audit: bool) -> Result<RunOutputs> {
    cfg.validate()?;
    let data = run_data_stage(cfg)?;
    let sft = run_sft_stage(cfg, &data)?;
    let adversarial = run_adversarial_stage(cfg, &data, &sft)?;
    let generated = run_generate_stage(cfg, &data.train.schema, &adversarial.policy, &adversarial.stage)?;
    let evaluation = evaluate_run(cfg, &data, &generated.table, &generated.stage.hash)?;
    let audit = if with_audit {
        Some(run_audit_stage(cfg, &data, &generated.table, &generated.stage.hash)?)
    } else {
        None
    };
    Ok(RunOutputs {
        data,
        sft,
        adversarial,
        generated,
        evaluation,
        audit,
    })
}
