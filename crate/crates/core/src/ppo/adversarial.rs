use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use super::{ppo_update, PpoConfig, Rollout, RolloutBatch};
use crate::codec::{parse_sentence, Row, TableSchema};
use crate::discriminator::{train_discriminator, DiscTrainConfig, Discriminator};
use crate::error::{Error, Result};
use crate::exec;
use crate::policy::{sample_row_sentence, PolicyModel, SamplerConfig, TokenId};
use crate::rng;

/// What a round needs besides the two trainable models.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub reference: &'a PolicyModel,
    /// Tokenized real rows.
    pub real: &'a [Vec<TokenId>],
    pub schema: &'a TableSchema,
    pub sampler: &'a SamplerConfig,
    pub cfg: &'a PpoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// Held-out balanced accuracy of the discriminator after this round's
    /// training; 1 when the round was degenerate.
    pub disc_accuracy: f64,
    pub disc_initial_accuracy: f64,
    pub disc_loss: f64,
    pub mean_reward: f64,
    /// Mean sequence log-ratio of the rollouts.
    pub mean_kl: f64,
    pub parse_failure_rate: f64,
    pub truncation_rate: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub policy_loss: f64,
    /// No rollout parsed, so the discriminator was not trained.
    pub degenerate: bool,
    pub policy_version: u64,
}

impl RoundReport {
    pub fn all_finite(&self) -> bool {
        [
            self.disc_accuracy,
            self.disc_initial_accuracy,
            self.disc_loss,
            self.mean_reward,
            self.mean_kl,
            self.parse_failure_rate,
            self.truncation_rate,
            self.clip_fraction,
            self.grad_norm,
            self.policy_loss,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// Samples `n` rollouts and parses them. Sample `i` of round `round` always
/// uses the same random stream, whatever the execution mode.
pub fn collect_rollouts(
    policy: &PolicyModel,
    reference: &PolicyModel,
    sampler: &SamplerConfig,
    schema: &TableSchema,
    n: usize,
    seed: u64,
    round: usize,
) -> Result<Vec<(Rollout, Option<Row>)>> {
    let label = format!("rollout-{round}");
    exec::map_indexed(n, |i| {
        let mut r = rng::stream(seed, &label, i as u64);
        let out = sample_row_sentence(policy, Some(reference), sampler, &mut r)?;
        let (row, reason) = if out.truncated {
            (None, Some("truncated".to_string()))
        } else {
            match parse_sentence(&out.sentence, schema) {
                Ok(row) => (Some(row), None),
                Err(rej) => (None, Some(rej.reason.as_str().to_string())),
            }
        };
        Ok((
            Rollout {
                tokens: out.tokens,
                logp_policy: out.logp_policy,
                logp_reference: out.logp_reference,
                parsed: row.is_some(),
                reject_reason: reason,
                reward: 0.0,
                truncated: out.truncated,
            },
            row,
        ))
    })
    .into_iter()
    .collect()
}

/// One generate → train discriminator → score → update cycle.
///
/// The real side of the discriminator's training set is a fresh random
/// subset of the real corpus, no larger than the rollout batch. Both models
/// are rounded to `f32` at the end so a checkpointed run resumes exactly.
pub fn adversarial_round(
    policy: &mut PolicyModel,
    disc: &mut Discriminator,
    ctx: &RoundContext<'_>,
    round: usize,
) -> Result<RoundReport> {
    let cfg = ctx.cfg;
    cfg.validate()?;
    if ctx.real.is_empty() {
        return Err(Error::Config(
            "adversarial training needs a non-empty real corpus".into(),
        ));
    }
    let version = policy.update_count();
    let sampler = if cfg.filtered_rollouts {
        ctx.sampler.clone()
    } else {
        SamplerConfig {
            top_p: 1.0,
            repetition_penalty: 1.0,
            ..ctx.sampler.clone()
        }
    };
    let rolled = collect_rollouts(
        policy,
        ctx.reference,
        &sampler,
        ctx.schema,
        cfg.rollout_size,
        cfg.seed,
        round,
    )?;
    let mut samples: Vec<Rollout> = rolled.into_iter().map(|(r, _)| r).collect();
    let n = samples.len() as f64;
    let parsed: Vec<Vec<TokenId>> = samples.iter().filter(|s| s.parsed).map(|s| s.tokens.clone()).collect();
    let truncation_rate = samples.iter().filter(|s| s.truncated).count() as f64 / n;
    let parse_failure_rate = 1.0 - parsed.len() as f64 / n;

    let degenerate = parsed.is_empty();
    let (disc_accuracy, disc_initial_accuracy, disc_loss) = if degenerate {
        (1.0, 1.0, 0.0)
    } else {
        let k = ctx.real.len().min(cfg.rollout_size);
        let mut r = rng::stream(cfg.seed, "real-subset", round as u64);
        let mut ids = sample_indices(&mut r, ctx.real.len(), k).into_vec();
        ids.sort_unstable();
        let real: Vec<Vec<TokenId>> = ids.iter().map(|&i| ctx.real[i].clone()).collect();
        let dcfg = DiscTrainConfig {
            epochs: cfg.disc_epochs,
            lr: cfg.disc_lr,
            batch_size: cfg.disc_batch_size,
            focal: cfg.focal,
            seed: rng::derive_seed(cfg.seed, "disc-round", round as u64),
            ..Default::default()
        };
        let log = train_discriminator(disc, &real, &parsed, &dcfg)?;
        (
            log.final_accuracy(),
            log.initial_accuracy,
            log.epoch_loss.last().copied().unwrap_or(0.0),
        )
    };
    let d: &Discriminator = disc;
    let rewards = exec::map_slice(&samples, |s| if s.parsed { d.score(&s.tokens) } else { 0.0 });
    for (s, r) in samples.iter_mut().zip(rewards) {
        s.reward = r;
    }
    let batch = RolloutBatch {
        samples,
        policy_version: version,
        temperature: ctx.sampler.temperature,
        seed: rng::derive_seed(cfg.seed, "ppo-round", round as u64),
    };
    let stats = ppo_update(policy, &batch, cfg)?;
    policy.params_mut()?.quantize_f32();
    disc.params_mut().quantize_f32();
    Ok(RoundReport {
        round,
        disc_accuracy,
        disc_initial_accuracy,
        disc_loss,
        mean_reward: stats.mean_reward,
        mean_kl: stats.mean_kl,
        parse_failure_rate,
        truncation_rate,
        clip_fraction: stats.clip_fraction,
        grad_norm: stats.grad_norm,
        policy_loss: stats.policy_loss,
        degenerate,
        policy_version: policy.update_count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumOutcome {
    pub history: Vec<RoundReport>,
    /// The stopping rule fired before `rounds_max`.
    pub converged: bool,
}

fn at_chance(r: &RoundReport, tol: f64) -> bool {
    !r.degenerate && (r.disc_accuracy - 0.5).abs() <= tol
}

/// True when the last `patience` rounds were all within the band.
fn should_stop(history: &[RoundReport], cfg: &PpoConfig) -> bool {
    if cfg.stop_tolerance <= 0.0 || history.len() < cfg.stop_patience {
        return false;
    }
    history[history.len() - cfg.stop_patience..]
        .iter()
        .all(|r| at_chance(r, cfg.stop_tolerance))
}

/// Runs rounds until the discriminator has sat at chance for
/// `stop_patience` consecutive rounds or `rounds_max` is reached.
///
/// `history` holds rounds already completed (for resuming); `on_round` is
/// called after every new round with the updated models.
pub fn train_to_equilibrium(
    policy: &mut PolicyModel,
    disc: &mut Discriminator,
    ctx: &RoundContext<'_>,
    mut history: Vec<RoundReport>,
    mut on_round: impl FnMut(&RoundReport, &PolicyModel, &Discriminator) -> Result<()>,
) -> Result<EquilibriumOutcome> {
    ctx.cfg.validate()?;
    while history.len() < ctx.cfg.rounds_max {
        if should_stop(&history, ctx.cfg) {
            return Ok(EquilibriumOutcome {
                history,
                converged: true,
            });
        }
        let report = adversarial_round(policy, disc, ctx, history.len())?;
        on_round(&report, policy, disc)?;
        history.push(report);
    }
    let converged = should_stop(&history, ctx.cfg);
    Ok(EquilibriumOutcome { history, converged })
}

pub fn append_history(path: &Path, report: &RoundReport) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(report)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a JSONL round history. A missing file is an empty history.
pub fn read_history(path: &Path) -> Result<Vec<RoundReport>> {
    let f = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
