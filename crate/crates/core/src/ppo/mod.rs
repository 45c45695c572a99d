//! Adversarial fine-tuning: rollouts scored by the discriminator, a
//! KL-penalized clipped-surrogate policy update, and the round loop that
//! runs until the discriminator is at chance.

mod adversarial;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::discriminator::FocalLossConfig;
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{self, AdamW};
use crate::policy::{LogProbPolicy, TokenId};
use crate::rng;

pub use adversarial::{
    adversarial_round, append_history, collect_rollouts, read_history, train_to_equilibrium, EquilibriumOutcome,
    RoundContext, RoundReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    /// Sum of chosen-token log-ratios, subtracted from the sequence reward.
    Sequence,
    /// Each token is penalized by the log-ratios from that token onward.
    PerToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    /// KL weight β.
    pub beta: f64,
    pub clip_epsilon: f64,
    /// Optimizer steps per update (passes over the rollout batch).
    pub ppo_epochs: usize,
    pub rollout_size: usize,
    pub rounds_max: usize,
    /// Equilibrium band δ around 0.5. Zero disables early stopping.
    pub stop_tolerance: f64,
    pub stop_patience: usize,
    pub disc_epochs: usize,
    pub seed: u64,
    pub lr: f64,
    /// Samples per optimizer step; 0 means the whole batch.
    pub minibatch_size: usize,
    pub kl_mode: KlMode,
    pub disc_lr: f64,
    pub disc_batch_size: usize,
    pub focal: FocalLossConfig,
    /// Draw rollouts with the full generation sampler (nucleus filter and
    /// repetition penalty). When off, rollouts come from the tempered policy
    /// alone.
    pub filtered_rollouts: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            beta: 0.1,
            clip_epsilon: 0.2,
            ppo_epochs: 4,
            rollout_size: 256,
            rounds_max: 20,
            stop_tolerance: 0.02,
            stop_patience: 2,
            disc_epochs: 3,
            seed: 0,
            lr: 1e-4,
            minibatch_size: 0,
            kl_mode: KlMode::Sequence,
            disc_lr: 1e-3,
            disc_batch_size: 16,
            focal: FocalLossConfig::default(),
            filtered_rollouts: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if self.ppo_epochs == 0 || self.rollout_size == 0 || self.stop_patience == 0 {
            return bad("ppo_epochs, rollout_size and stop_patience must be positive");
        }
        if !(self.stop_tolerance >= 0.0 && self.stop_tolerance < 0.5) {
            return bad("stop_tolerance must lie in [0, 0.5)");
        }
        if !(self.lr > 0.0) || !(self.disc_lr > 0.0) || self.disc_batch_size == 0 {
            return bad("learning rates and disc_batch_size must be positive");
        }
        self.focal.validate()
    }
}

/// One sampled sequence and everything the update needs from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<TokenId>,
    /// Tempered log-probabilities of `tokens[1..]` under the collecting policy.
    pub logp_policy: Vec<f64>,
    /// Same under the frozen reference.
    pub logp_reference: Vec<f64>,
    pub parsed: bool,
    /// Why the sample was rejected, when it was.
    pub reject_reason: Option<String>,
    /// Discriminator probability of "real"; 0 for rejected samples.
    pub reward: f64,
    pub truncated: bool,
}

impl Rollout {
    /// `Σ (log P_RL − log P_SFT)` over the chosen tokens.
    pub fn sequence_kl(&self) -> f64 {
        self.logp_policy
            .iter()
            .zip(&self.logp_reference)
            .map(|(a, b)| a - b)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub samples: Vec<Rollout>,
    /// Policy update count when the batch was collected.
    pub policy_version: u64,
    pub temperature: f64,
    /// Seed for minibatch shuffling.
    pub seed: u64,
}

/// `R − β · log(P_RL / P_SFT)` per sample, from the stored traces.
pub fn compute_objective_terms(batch: &RolloutBatch, beta: f64) -> Vec<f64> {
    batch
        .samples
        .iter()
        .map(|s| {
            if beta == 0.0 {
                s.reward
            } else {
                s.reward - beta * s.sequence_kl()
            }
        })
        .collect()
}

/// Subtracts the mean and divides by `std + 1e-8`. A batch whose values are
/// all equal gets exactly zero advantages.
pub fn whiten(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    if values.is_empty() {
        return Vec::new();
    }
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return vec![0.0; values.len()];
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    values.iter().map(|v| (v - mean) / denom).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub mean_reward: f64,
    /// Mean sequence log-ratio at collection time.
    pub mean_kl: f64,
    /// Fraction of token ratios outside `[1-ε, 1+ε]`, averaged over steps.
    pub clip_fraction: f64,
    /// Surrogate loss of the last step.
    pub policy_loss: f64,
    /// Largest gradient norm over the steps.
    pub grad_norm: f64,
    pub steps: usize,
}

/// Per-token advantages under the current policy for every sample.
fn advantages(batch: &RolloutBatch, logp_new: &[Vec<f64>], cfg: &PpoConfig) -> Vec<Vec<f64>> {
    match cfg.kl_mode {
        KlMode::Sequence => {
            let terms: Vec<f64> = batch
                .samples
                .iter()
                .zip(logp_new)
                .map(|(s, lp)| {
                    if cfg.beta == 0.0 {
                        return s.reward;
                    }
                    let kl: f64 = lp.iter().zip(&s.logp_reference).map(|(a, b)| a - b).sum();
                    s.reward - cfg.beta * kl
                })
                .collect();
            let a = whiten(&terms);
            batch
                .samples
                .iter()
                .zip(a)
                .map(|(s, a)| vec![a; s.logp_policy.len()])
                .collect()
        }
        KlMode::PerToken => {
            let mut flat = Vec::new();
            for (s, lp) in batch.samples.iter().zip(logp_new) {
                let mut to_go = 0.0;
                let mut g = vec![0.0; lp.len()];
                for t in (0..lp.len()).rev() {
                    to_go += lp[t] - s.logp_reference[t];
                    g[t] = if cfg.beta == 0.0 {
                        s.reward
                    } else {
                        s.reward - cfg.beta * to_go
                    };
                }
                flat.extend(g);
            }
            let w = whiten(&flat);
            let mut out = Vec::with_capacity(batch.samples.len());
            let mut at = 0;
            for s in &batch.samples {
                let n = s.logp_policy.len();
                out.push(w[at..at + n].to_vec());
                at += n;
            }
            out
        }
    }
}

/// Samples whose gradients are computed together before being summed.
const GRAD_CHUNK: usize = 32;

/// Clipped-surrogate update of `policy` on `batch`.
///
/// Runs `ppo_epochs` passes. Each optimizer step recomputes the current
/// log-probabilities, refreshes the KL term, whitens the objective into
/// advantages and descends `−mean_tokens min(r·A, clip(r)·A)` with
/// `r = exp(log π_new − log π_old)`.
pub fn ppo_update<P: LogProbPolicy>(policy: &mut P, batch: &RolloutBatch, cfg: &PpoConfig) -> Result<PpoStats> {
    cfg.validate()?;
    let current = policy.update_count();
    if current > batch.policy_version + 1 || current < batch.policy_version {
        return Err(Error::StaleRollout {
            collected: batch.policy_version,
            current,
        });
    }
    let n = batch.samples.len();
    let mut stats = PpoStats {
        mean_reward: batch.samples.iter().map(|s| s.reward).sum::<f64>() / n.max(1) as f64,
        mean_kl: batch.samples.iter().map(Rollout::sequence_kl).sum::<f64>() / n.max(1) as f64,
        ..Default::default()
    };
    if n == 0 {
        policy.record_update();
        return Ok(stats);
    }
    let tau = batch.temperature;
    let eps = cfg.clip_epsilon;
    let mb = if cfg.minibatch_size == 0 {
        n
    } else {
        cfg.minibatch_size.min(n)
    };
    let mut opt = AdamW::new(policy.num_params(), cfg.lr, 0.0);
    let mut clip_total = 0.0;
    for epoch in 0..cfg.ppo_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if mb < n {
            order.shuffle(&mut rng::stream(batch.seed, "ppo-minibatch", epoch as u64));
        }
        for chunk in order.chunks(mb) {
            let sub = RolloutBatch {
                samples: chunk.iter().map(|&i| batch.samples[i].clone()).collect(),
                ..batch.clone()
            };
            let p: &P = policy;
            let logp_new: Vec<Vec<f64>> = exec::map_slice(&sub.samples, |s| p.token_logprobs(&s.tokens, tau))
                .into_iter()
                .collect::<Result<_>>()?;
            let adv = advantages(&sub, &logp_new, cfg);
            let n_tok: usize = sub.samples.iter().map(|s| s.logp_policy.len()).sum();
            let norm = 1.0 / n_tok.max(1) as f64;
            let mut loss = 0.0;
            let mut clipped = 0usize;
            let mut coeffs = Vec::with_capacity(sub.samples.len());
            for ((s, lp), a) in sub.samples.iter().zip(&logp_new).zip(&adv) {
                let mut c = vec![0.0; lp.len()];
                for t in 0..lp.len() {
                    let r = (lp[t] - s.logp_policy[t]).exp();
                    let rc = r.clamp(1.0 - eps, 1.0 + eps);
                    if (r - 1.0).abs() > eps {
                        clipped += 1;
                    }
                    let unclipped = r * a[t];
                    let clipped_obj = rc * a[t];
                    loss -= unclipped.min(clipped_obj) * norm;
                    if unclipped <= clipped_obj && a[t] != 0.0 {
                        c[t] = -unclipped * norm;
                    }
                }
                coeffs.push(c);
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!("ppo surrogate loss {loss}")));
            }
            let mut grad = vec![0.0; p.num_params()];
            let idx: Vec<usize> = (0..sub.samples.len())
                .filter(|&i| coeffs[i].iter().any(|&c| c != 0.0))
                .collect();
            for part in idx.chunks(GRAD_CHUNK) {
                let gs = exec::map_slice(part, |&i| p.logprob_grad(&sub.samples[i].tokens, tau, &coeffs[i]));
                for g in gs {
                    for (a, b) in grad.iter_mut().zip(g?) {
                        *a += b;
                    }
                }
            }
            let gn = nn::l2_norm(&grad);
            if !gn.is_finite() {
                return Err(Error::NonFiniteLoss(format!("ppo gradient norm {gn}")));
            }
            stats.grad_norm = stats.grad_norm.max(gn);
            stats.policy_loss = loss;
            clip_total += clipped as f64 / n_tok.max(1) as f64;
            stats.steps += 1;
            opt.step(policy.param_data_mut()?, &grad);
        }
    }
    stats.clip_fraction = clip_total / stats.steps.max(1) as f64;
    if policy.param_data().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLoss("ppo produced non-finite parameters".into()));
    }
    policy.record_update();
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(reward: f64, lp: &[f64], lr: &[f64]) -> Rollout {
        Rollout {
            tokens: (0..=lp.len() as u32).collect(),
            logp_policy: lp.to_vec(),
            logp_reference: lr.to_vec(),
            parsed: true,
            reject_reason: None,
            reward,
            truncated: false,
        }
    }

    fn batch(samples: Vec<Rollout>) -> RolloutBatch {
        RolloutBatch {
            samples,
            policy_version: 0,
            temperature: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn objective_examples() {
        let b = batch(vec![sample(0.73, &[-0.5, -0.3], &[-0.6, -0.4])]);
        let t = compute_objective_terms(&b, 0.1);
        assert!((t[0] - 0.71).abs() < 1e-12, "{}", t[0]);
        assert_eq!(compute_objective_terms(&b, 0.0), vec![0.73]);
        let same = batch(vec![sample(0.4, &[-0.5, -0.3], &[-0.5, -0.3])]);
        assert_eq!(compute_objective_terms(&same, 7.0), vec![0.4]);
    }

    #[test]
    fn whitening_basics() {
        assert_eq!(whiten(&[0.3, 0.3, 0.3]), vec![0.0; 3]);
        let w = whiten(&[1.0, 3.0]);
        assert!((w[0] + 1.0).abs() < 1e-7 && (w[1] - 1.0).abs() < 1e-7);
        let shifted = whiten(&[1.5, 3.5]);
        assert_eq!(w, shifted);
    }
}
