//! The generator: a compact autoregressive token model, its supervised
//! fitting, and the decoding stack (temperature, nucleus filtering,
//! repetition penalty).

mod model;
mod sampling;
mod vocab;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::nn::AdamW;
use crate::rng;

pub(crate) use model::policy_param_layout;
pub use model::{DecodeState, ForwardPass, ModelMode, PolicyHyper, PolicyModel};
pub use sampling::{
    apply_repetition_penalty, apply_temperature, sample_row_sentence, top_p_filter, SampleOutput, SamplerConfig,
};
pub use vocab::{words, TokenId, Vocabulary, BOS, EOS, SEP_TOKEN, UNK};

/// What PPO needs from a policy: per-token log-probabilities under a
/// temperature, their parameter gradients, and a flat parameter buffer.
pub trait LogProbPolicy: Sync {
    fn num_params(&self) -> usize;
    fn param_data(&self) -> &[f64];
    fn param_data_mut(&mut self) -> Result<&mut [f64]>;
    /// Number of completed policy updates (PPO calls).
    fn update_count(&self) -> u64;
    fn record_update(&mut self);
    /// `log softmax(z/τ)` of `tokens[i+1]` given `tokens[..=i]`, for every i.
    fn token_logprobs(&self, tokens: &[TokenId], temperature: f64) -> Result<Vec<f64>>;
    /// Gradient of `Σᵢ coeffs[i] · logprob[i]`.
    fn logprob_grad(&self, tokens: &[TokenId], temperature: f64, coeffs: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 10,
            lr: 1e-4,
            batch_size: 16,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean per-token NLL over the corpus before the first update.
    pub initial_nll: Option<f64>,
    /// Mean per-token NLL of each epoch's training passes.
    pub epoch_nll: Vec<f64>,
}

/// Mean per-token NLL of `model` on `corpus`.
pub fn mean_nll(model: &PolicyModel, corpus: &[Vec<TokenId>]) -> Result<f64> {
    let parts = exec::map_slice(corpus, |seq| {
        model.sequence_nll(&seq[..seq.len().min(model.hyper().context_length + 1)])
    });
    let mut total = 0.0;
    let mut count = 0;
    for p in parts {
        let (n, c) = p?;
        total += n;
        count += c;
    }
    Ok(total / count.max(1) as f64)
}

/// Fits the policy on serialized rows by minimizing next-token NLL,
/// averaged per token within each minibatch.
pub fn fit_sft(model: &mut PolicyModel, corpus: &[String], cfg: &SftConfig) -> Result<TrainingLog> {
    if model.mode() != ModelMode::Trainable {
        return Err(Error::Config("cannot fit a frozen reference model".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Config("SFT corpus is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("SFT needs batch_size > 0 and lr > 0".into()));
    }
    let mut log = TrainingLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    let seqs: Vec<Vec<TokenId>> = corpus.iter().map(|s| model.vocab().tokenize(s)).collect();
    log.initial_nll = Some(mean_nll(model, &seqs)?);

    let n_params = model.num_params();
    let mut opt = AdamW::new(n_params, cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, "sft-shuffle", epoch as u64);
        order.shuffle(&mut r);
        let mut epoch_nll = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let m: &PolicyModel = model;
            let parts = exec::map_slice(batch, |&i| m.nll_and_grad(&seqs[i]));
            let mut grad = vec![0.0; n_params];
            let mut nll = 0.0;
            let mut count = 0usize;
            for p in parts {
                let (n, c, g) = p?;
                nll += n;
                count += c;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if !nll.is_finite() {
                return Err(Error::NonFiniteLoss(format!("SFT epoch {epoch}: batch NLL {nll}")));
            }
            let scale = 1.0 / count.max(1) as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut model.params_mut()?.data, &grad);
            epoch_nll += nll;
            epoch_tokens += count;
        }
        log.epoch_nll.push(epoch_nll / epoch_tokens.max(1) as f64);
    }
    if !model.params().all_finite() {
        return Err(Error::NonFiniteLoss("SFT produced non-finite parameters".into()));
    }
    Ok(log)
}
