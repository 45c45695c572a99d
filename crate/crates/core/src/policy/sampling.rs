use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, BOS, EOS};
use super::{LogProbPolicy, PolicyModel};
use crate::error::{Error, Result};
use crate::nn;
use crate::rng::Rng;

/// Decoding settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_length: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 0.7,
            top_p: 0.9,
            repetition_penalty: 1.2,
            max_length: 300,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::Config(format!(
                "repetition_penalty must be >= 1, got {}",
                self.repetition_penalty
            )));
        }
        if self.max_length == 0 {
            return Err(Error::Config("max_length must be positive".into()));
        }
        Ok(())
    }

    /// The same settings with the repetition penalty switched off.
    pub fn without_repetition_penalty(&self) -> Self {
        SamplerConfig {
            repetition_penalty: 1.0,
            ..self.clone()
        }
    }
}

/// `P'(w) = P(w)^{1/τ} / Σ P(w')^{1/τ}`.
pub fn apply_temperature(p: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!("temperature must be > 0, got {temperature}")));
    }
    let max = p.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::Domain("distribution has no mass".into()));
    }
    // Dividing by the max first keeps small temperatures from underflowing.
    let inv = 1.0 / temperature;
    let mut out: Vec<f64> = p.iter().map(|&x| (x / max).powf(inv)).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    Ok(out)
}

/// Slack used when comparing cumulative mass against `p`.
pub(crate) const TOP_P_TOL: f64 = 1e-12;

/// Keeps the smallest descending-probability prefix whose mass reaches
/// `top_p` (ties broken by lower token id) and renormalizes it.
pub fn top_p_filter(p: &[f64], top_p: f64) -> Vec<f64> {
    if top_p >= 1.0 {
        return p.to_vec();
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    // Stable sort keeps lower ids first among equal probabilities.
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut keep = vec![false; p.len()];
    let mut mass = 0.0;
    for &i in &order {
        keep[i] = true;
        mass += p[i];
        if mass >= top_p - TOP_P_TOL {
            break;
        }
    }
    let kept: f64 = p.iter().zip(&keep).filter(|(_, k)| **k).map(|(x, _)| x).sum();
    p.iter()
        .zip(&keep)
        .map(|(&x, &k)| if k { x / kept } else { 0.0 })
        .collect()
}

/// Penalizes already-emitted tokens: positive logits are divided by the
/// penalty, negative ones multiplied, so the token always becomes less likely.
pub fn apply_repetition_penalty(logits: &mut [f64], emitted: &[TokenId], penalty: f64) {
    if penalty == 1.0 {
        return;
    }
    let mut seen = vec![false; logits.len()];
    for &t in emitted {
        let t = t as usize;
        if seen[t] {
            continue;
        }
        seen[t] = true;
        if logits[t] > 0.0 {
            logits[t] /= penalty;
        } else {
            logits[t] *= penalty;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub sentence: String,
    /// BOS, generated tokens, and EOS when one was produced.
    pub tokens: Vec<TokenId>,
    /// Tempered log-probabilities of each generated token under the policy.
    pub logp_policy: Vec<f64>,
    /// Same under the reference, when one was supplied.
    pub logp_reference: Vec<f64>,
    pub truncated: bool,
}

/// Samples one row sentence autoregressively.
///
/// Each step applies the repetition penalty (when > 1) to the logits,
/// softmax, temperature, then nucleus filtering, and draws from the result.
/// Generation stops at EOS or after `max_length` tokens (capped by the
/// context length), in which case `truncated` is set. The log-prob trace is
/// computed under the tempered distribution without penalty or filtering,
/// which is what PPO optimizes.
pub fn sample_row_sentence(
    model: &PolicyModel,
    reference: Option<&PolicyModel>,
    sampler: &SamplerConfig,
    rng: &mut Rng,
) -> Result<SampleOutput> {
    sampler.validate()?;
    let limit = sampler.max_length.min(model.hyper().context_length - 1);
    let mut state = model.start_decoding();
    let mut tokens = vec![BOS];
    let mut logits = model.decode_step(&mut state, BOS)?;
    let mut truncated = true;
    for _ in 0..limit {
        apply_repetition_penalty(&mut logits, &tokens[1..], sampler.repetition_penalty);
        nn::softmax_in_place(&mut logits);
        let tempered = apply_temperature(&logits, sampler.temperature)?;
        let nucleus = top_p_filter(&tempered, sampler.top_p);
        let next = nn::sample_index(&nucleus, rng) as TokenId;
        tokens.push(next);
        if next == EOS {
            truncated = false;
            break;
        }
        if tokens.len() - 1 == limit {
            break;
        }
        logits = model.decode_step(&mut state, next)?;
    }
    let logp_policy = model.token_logprobs(&tokens, sampler.temperature)?;
    let logp_reference = match reference {
        Some(r) => r.token_logprobs(&tokens, sampler.temperature)?,
        None => Vec::new(),
    };
    Ok(SampleOutput {
        sentence: model.vocab().detokenize(&tokens),
        tokens,
        logp_policy,
        logp_reference,
        truncated,
    })
}
