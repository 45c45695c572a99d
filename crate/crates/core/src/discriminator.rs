//! Real-versus-synthetic classifier over token sequences, trained with focal
//! loss. Its probability of "real" is the PPO reward.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointKind};
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{self, AdamW, Init, ParamBuilder, ParamSet};
use crate::policy::{TokenId, Vocabulary, EOS, UNK};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscHyper {
    /// Number of convolution kernels.
    pub kernels: usize,
    pub heads: usize,
    /// Embedding and attention width.
    pub width: usize,
    /// Longest input considered; later tokens are ignored.
    pub max_len: usize,
}

impl DiscHyper {
    /// Full-width architecture, far too slow for CPU training.
    pub fn full() -> Self {
        DiscHyper {
            kernels: 32,
            heads: 8,
            width: 512,
            max_len: 512,
        }
    }

    /// Scaled-down preset used by tests and the toy pipeline.
    pub fn small() -> Self {
        DiscHyper {
            kernels: 8,
            heads: 2,
            width: 64,
            max_len: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels == 0 || self.heads == 0 || self.width == 0 || self.max_len == 0 {
            return Err(Error::Config("discriminator dimensions must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "discriminator width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

impl Default for DiscHyper {
    fn default() -> Self {
        Self::small()
    }
}

const KERNEL: usize = 3;

fn layout(vocab: usize, h: &DiscHyper) -> ParamBuilder {
    let d = h.width;
    let std = 0.02;
    ParamSet::builder()
        .add("tok_emb", &[vocab, d], Init::Normal(std))
        .add("pos_emb", &[h.max_len, d], Init::Normal(std))
        .add("attn.w_qkv", &[d, 3 * d], Init::Normal(std))
        .add("attn.b_qkv", &[3 * d], Init::Zeros)
        .add("attn.w_o", &[d, d], Init::Normal(std))
        .add("attn.b_o", &[d], Init::Zeros)
        .add(
            "conv.w",
            &[KERNEL * d, h.kernels],
            Init::Normal((1.0 / (KERNEL * d) as f64).sqrt()),
        )
        .add("conv.b", &[h.kernels], Init::Zeros)
        // A zero head starts every score at exactly 0.5.
        .add("head.w", &[h.kernels], Init::Zeros)
        .add("head.b", &[1], Init::Zeros)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalLossConfig {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig { gamma: 2.0, alpha: 0.5 }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "focal loss needs gamma >= 0 and alpha in (0, 1], got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `-α (1-p_t)^γ log p_t` for the probability `p_t` of the true class.
pub fn focal_loss(p_t: f64, cfg: &FocalLossConfig) -> Result<f64> {
    if !(p_t > 0.0 && p_t < 1.0) {
        return Err(Error::Domain(format!("p_t must lie in (0, 1), got {p_t}")));
    }
    Ok(-cfg.alpha * (1.0 - p_t).powf(cfg.gamma) * p_t.ln())
}

/// Focal loss of a logit `z` for label `real`, and its derivative in `z`.
/// Evaluated in logit space so saturated scores stay finite.
pub fn focal_loss_logit(z: f64, real: bool, cfg: &FocalLossConfig) -> (f64, f64) {
    let s = if real { z } else { -z };
    let log_pt = nn::log_sigmoid(s);
    let q = nn::sigmoid(-s);
    let pt = nn::sigmoid(s);
    let qg = if cfg.gamma == 0.0 { 1.0 } else { q.powf(cfg.gamma) };
    let loss = -cfg.alpha * qg * log_pt;
    let ds = cfg.alpha * qg * (cfg.gamma * pt * log_pt - q);
    (loss, if real { ds } else { -ds })
}

struct Cache {
    tokens: Vec<usize>,
    x: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    windows: Vec<f64>,
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    logit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    vocab: Vocabulary,
    hyper: DiscHyper,
    params: ParamSet,
}

impl Discriminator {
    pub fn new(vocab: Vocabulary, hyper: DiscHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let params = layout(vocab.len(), &hyper).build(&mut rng::stream(seed, "disc-init", 0));
        Ok(Discriminator { vocab, hyper, params })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn hyper(&self) -> &DiscHyper {
        &self.hyper
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Tokens the classifier reads: up to and including the first EOS,
    /// capped at `max_len`, unknown ids mapped to UNK.
    fn effective(&self, tokens: &[TokenId]) -> Vec<usize> {
        let end = tokens.iter().position(|&t| t == EOS).map_or(tokens.len(), |i| i + 1);
        let v = self.vocab.len();
        tokens[..end.min(self.hyper.max_len)]
            .iter()
            .map(|&t| if (t as usize) < v { t as usize } else { UNK as usize })
            .collect()
    }

    fn forward(&self, tokens: &[TokenId]) -> Cache {
        let mut toks = self.effective(tokens);
        if toks.is_empty() {
            toks.push(EOS as usize);
        }
        let t = toks.len();
        let d = self.hyper.width;
        let k = self.hyper.kernels;
        let p = &self.params;
        let emb = p.get("tok_emb");
        let pos = p.get("pos_emb");
        let mut x = vec![0.0; t * d];
        for (i, &tok) in toks.iter().enumerate() {
            for j in 0..d {
                x[i * d + j] = emb[tok * d + j] + pos[i * d + j];
            }
        }
        let qkv = nn::matmul(&x, p.get("attn.w_qkv"), Some(p.get("attn.b_qkv")), t, d, 3 * d);
        let (att, probs) = nn::attention(&qkv, t, d, self.hyper.heads, false);
        let mut h = nn::matmul(&att, p.get("attn.w_o"), Some(p.get("attn.b_o")), t, d, d);
        for (hv, xv) in h.iter_mut().zip(&x) {
            *hv += xv;
        }
        // Same-padded width-3 windows, flattened so the convolution is a matmul.
        let mut windows = vec![0.0; t * KERNEL * d];
        for i in 0..t {
            for o in 0..KERNEL {
                let src = i as isize + o as isize - (KERNEL / 2) as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                windows[(i * KERNEL + o) * d..(i * KERNEL + o + 1) * d].copy_from_slice(&h[src * d..(src + 1) * d]);
            }
        }
        let pre = nn::matmul(&windows, p.get("conv.w"), Some(p.get("conv.b")), t, KERNEL * d, k);
        let mut pooled = vec![f64::NEG_INFINITY; k];
        let mut argmax = vec![0; k];
        for i in 0..t {
            for c in 0..k {
                let g = pre[i * k + c];
                if g > pooled[c] {
                    pooled[c] = g;
                    argmax[c] = i;
                }
            }
        }
        let w = p.get("head.w");
        let logit = p.get("head.b")[0] + w.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
        Cache {
            tokens: toks,
            x,
            qkv,
            probs,
            att,
            windows,
            pooled,
            argmax,
            logit,
        }
    }

    fn backward(&self, c: &Cache, dlogit: f64, grad: &mut [f64]) {
        let t = c.tokens.len();
        let d = self.hyper.width;
        let k = self.hyper.kernels;
        let p = &self.params;
        let g = |name: &str| p.range(name);

        let hw = g("head.w");
        for (gw, m) in grad[hw.clone()].iter_mut().zip(&c.pooled) {
            *gw += dlogit * m;
        }
        grad[g("head.b").start] += dlogit;
        let w = &p.data[hw];
        let mut dpre = vec![0.0; t * k];
        for ch in 0..k {
            let i = c.argmax[ch];
            dpre[i * k + ch] = dlogit * w[ch];
        }
        let (cw, cb) = (g("conv.w"), g("conv.b"));
        let (gw, gb) = split_two(grad, cw.clone(), cb);
        let dwin = nn::matmul_backward(&c.windows, &p.data[cw], &dpre, t, KERNEL * d, k, gw, Some(gb));
        let mut dh = vec![0.0; t * d];
        for i in 0..t {
            for o in 0..KERNEL {
                let src = i as isize + o as isize - (KERNEL / 2) as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                for j in 0..d {
                    dh[src * d + j] += dwin[(i * KERNEL + o) * d + j];
                }
            }
        }
        let (wo, bo) = (g("attn.w_o"), g("attn.b_o"));
        let (gw, gb) = split_two(grad, wo.clone(), bo);
        let datt = nn::matmul_backward(&c.att, &p.data[wo], &dh, t, d, d, gw, Some(gb));
        let dqkv = nn::attention_backward(&datt, &c.qkv, &c.probs, t, d, self.hyper.heads, false);
        let (wq, bq) = (g("attn.w_qkv"), g("attn.b_qkv"));
        let (gw, gb) = split_two(grad, wq.clone(), bq);
        let dx_attn = nn::matmul_backward(&c.x, &p.data[wq], &dqkv, t, d, 3 * d, gw, Some(gb));
        let (te, pe) = (g("tok_emb"), g("pos_emb"));
        for (i, &tok) in c.tokens.iter().enumerate() {
            for j in 0..d {
                let dx = dh[i * d + j] + dx_attn[i * d + j];
                grad[te.start + tok * d + j] += dx;
                grad[pe.start + i * d + j] += dx;
            }
        }
    }

    /// Raw logit of "real".
    pub fn logit(&self, tokens: &[TokenId]) -> f64 {
        self.forward(tokens).logit
    }

    /// Probability that the sequence is a real row.
    pub fn score(&self, tokens: &[TokenId]) -> f64 {
        nn::sigmoid(self.logit(tokens))
    }

    pub fn score_sentence(&self, sentence: &str) -> f64 {
        self.score(&self.vocab.tokenize(sentence))
    }

    pub fn score_batch(&self, seqs: &[Vec<TokenId>]) -> Vec<f64> {
        exec::map_slice(seqs, |s| self.score(s))
    }

    /// Focal loss of one labelled sequence and its parameter gradient.
    pub fn loss_and_grad(&self, tokens: &[TokenId], real: bool, focal: &FocalLossConfig) -> (f64, Vec<f64>) {
        let c = self.forward(tokens);
        let (loss, dz) = focal_loss_logit(c.logit, real, focal);
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&c, dz, &mut grad);
        (loss, grad)
    }

    /// Balanced accuracy at threshold 0.5 over the given labelled sets.
    /// Classes without examples are left out of the average.
    pub fn balanced_accuracy(&self, real: &[Vec<TokenId>], synthetic: &[Vec<TokenId>]) -> f64 {
        let hit = |seqs: &[Vec<TokenId>], want: bool| {
            let s = self.score_batch(seqs);
            s.iter().filter(|&&p| (p > 0.5) == want).count() as f64 / seqs.len() as f64
        };
        let mut parts = Vec::new();
        if !real.is_empty() {
            parts.push(hit(real, true));
        }
        if !synthetic.is_empty() {
            parts.push(hit(synthetic, false));
        }
        if parts.is_empty() {
            return 0.5;
        }
        parts.iter().sum::<f64>() / parts.len() as f64
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = DiscHeader {
            vocabulary: self.vocab.clone(),
            hyper: self.hyper,
        };
        checkpoint::encode(CheckpointKind::Discriminator, &header, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, h, params) = checkpoint::decode::<DiscHeader>(bytes, CheckpointKind::Discriminator, |h| {
            h.hyper.validate()?;
            Ok(layout(h.vocabulary.len(), &h.hyper))
        })?;
        Ok(Discriminator {
            vocab: h.vocabulary,
            hyper: h.hyper,
            params,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DiscHeader {
    vocabulary: Vocabulary,
    hyper: DiscHyper,
}

/// Two disjoint mutable sub-slices of `grad`; `a` must precede `b`.
fn split_two(grad: &mut [f64], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = grad.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub focal: FocalLossConfig,
    pub seed: u64,
}

impl Default for DiscTrainConfig {
    fn default() -> Self {
        DiscTrainConfig {
            epochs: 3,
            lr: 1e-3,
            batch_size: 16,
            holdout_fraction: 0.1,
            focal: FocalLossConfig::default(),
            seed: 0,
        }
    }
}

impl DiscTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.focal.validate()?;
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(
                "discriminator training needs batch_size > 0, lr > 0 and holdout_fraction in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscTrainingLog {
    pub epoch_loss: Vec<f64>,
    /// Held-out balanced accuracy after each epoch.
    pub heldout_accuracy: Vec<f64>,
    /// Held-out balanced accuracy before training.
    pub initial_accuracy: f64,
    pub heldout_real: usize,
    pub heldout_synthetic: usize,
}

impl DiscTrainingLog {
    /// Accuracy after the last epoch, or before training when none ran.
    pub fn final_accuracy(&self) -> f64 {
        self.heldout_accuracy.last().copied().unwrap_or(self.initial_accuracy)
    }
}

/// Per-class split: a `fraction` of each class is held out, keeping at least
/// one training example per class.
fn stratified_split(n: usize, fraction: f64, r: &mut rng::Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(r);
    let mut hold = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && hold == 0 && n >= 2 {
        hold = 1;
    }
    hold = hold.min(n.saturating_sub(1));
    let train = idx.split_off(hold);
    (train, idx)
}

/// Trains on real (label 1) against synthetic (label 0) sequences.
///
/// Each epoch streams a shuffled, class-balanced list in which the minority
/// class is oversampled to parity, taking one AdamW step per minibatch on
/// the mean focal loss. When the held-out split is empty, accuracy is
/// measured on the training data instead.
pub fn train_discriminator(
    disc: &mut Discriminator,
    real: &[Vec<TokenId>],
    synthetic: &[Vec<TokenId>],
    cfg: &DiscTrainConfig,
) -> Result<DiscTrainingLog> {
    cfg.validate()?;
    if real.is_empty() || synthetic.is_empty() {
        return Err(Error::Config(
            "discriminator training needs both real and synthetic examples".into(),
        ));
    }
    let mut split_rng = rng::stream(cfg.seed, "disc-split", 0);
    let (real_train, real_hold) = stratified_split(real.len(), cfg.holdout_fraction, &mut split_rng);
    let (syn_train, syn_hold) = stratified_split(synthetic.len(), cfg.holdout_fraction, &mut split_rng);
    let pick = |src: &[Vec<TokenId>], ids: &[usize]| ids.iter().map(|&i| src[i].clone()).collect::<Vec<_>>();
    let (hr, hs) = if real_hold.is_empty() && syn_hold.is_empty() {
        (pick(real, &real_train), pick(synthetic, &syn_train))
    } else {
        (pick(real, &real_hold), pick(synthetic, &syn_hold))
    };
    let mut log = DiscTrainingLog {
        initial_accuracy: disc.balanced_accuracy(&hr, &hs),
        heldout_real: real_hold.len(),
        heldout_synthetic: syn_hold.len(),
        ..Default::default()
    };
    let mut opt = AdamW::new(disc.params.len(), cfg.lr, 0.0);
    let per_class = real_train.len().max(syn_train.len());
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, "disc-epoch", epoch as u64);
        let mut stream: Vec<(&[TokenId], bool)> = Vec::with_capacity(2 * per_class);
        for (src, ids, label) in [(real, &real_train, true), (synthetic, &syn_train, false)] {
            let mut order = ids.clone();
            order.shuffle(&mut r);
            for i in 0..per_class {
                stream.push((&src[order[i % order.len()]], label));
            }
        }
        stream.shuffle(&mut r);
        let mut total = 0.0;
        for batch in stream.chunks(cfg.batch_size) {
            let d: &Discriminator = disc;
            let parts = exec::map_slice(batch, |(s, y)| d.loss_and_grad(s, *y, &cfg.focal));
            let mut grad = vec![0.0; d.params.len()];
            let mut loss = 0.0;
            for (l, g) in parts {
                loss += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "discriminator epoch {epoch}: loss {loss}"
                )));
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut disc.params.data, &grad);
            total += loss;
        }
        log.epoch_loss.push(total / stream.len() as f64);
        log.heldout_accuracy.push(disc.balanced_accuracy(&hr, &hs));
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: &Vocabulary) -> Discriminator {
        let h = DiscHyper {
            kernels: 3,
            heads: 2,
            width: 4,
            max_len: 8,
        };
        Discriminator::new(vocab.clone(), h, 3).unwrap()
    }

    #[test]
    fn focal_loss_examples() {
        let ce = FocalLossConfig { gamma: 0.0, alpha: 1.0 };
        assert!((focal_loss(0.3, &ce).unwrap() + 0.3f64.ln()).abs() < 1e-15);
        let f = focal_loss(0.9, &FocalLossConfig { gamma: 2.0, alpha: 1.0 }).unwrap();
        assert!((f - 0.0010536).abs() < 1e-7, "{f}");
        assert!(focal_loss(0.0, &ce).is_err());
        assert!(focal_loss(1.0, &ce).is_err());
        let cfg = FocalLossConfig::default();
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let l = focal_loss(i as f64 / 100.0, &cfg).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn logit_form_agrees_with_probability_form() {
        let cfg = FocalLossConfig { gamma: 1.5, alpha: 0.7 };
        for &z in &[-3.0, -0.2, 0.0, 0.4, 2.5] {
            let (l, dz) = focal_loss_logit(z, true, &cfg);
            assert!((l - focal_loss(nn::sigmoid(z), &cfg).unwrap()).abs() < 1e-12);
            let (l0, _) = focal_loss_logit(z, false, &cfg);
            assert!((l0 - focal_loss(1.0 - nn::sigmoid(z), &cfg).unwrap()).abs() < 1e-12);
            let h = 1e-6;
            let num = (focal_loss_logit(z + h, true, &cfg).0 - focal_loss_logit(z - h, true, &cfg).0) / (2.0 * h);
            assert!((num - dz).abs() < 1e-8);
        }
        // saturated logits stay finite
        assert!(focal_loss_logit(-800.0, true, &cfg).0.is_finite());
    }

    #[test]
    fn zero_head_scores_one_half() {
        let vocab = Vocabulary::build(["a is b"]);
        let d = Discriminator::new(vocab.clone(), DiscHyper::small(), 0).unwrap();
        assert_eq!(d.score(&vocab.tokenize("a is b")), 0.5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let vocab = Vocabulary::build(["a is b, c is d"]);
        let mut d = tiny(&vocab);
        for (i, x) in d.params_mut().data.iter_mut().enumerate() {
            *x += 0.4 * ((i as f64 * 0.61).cos());
        }
        let seq = vocab.tokenize("a is b, c is d");
        let focal = FocalLossConfig { gamma: 2.0, alpha: 0.5 };
        for real in [true, false] {
            let (_, grad) = d.loss_and_grad(&seq, real, &focal);
            let eps = 1e-6;
            let mut worst: f64 = 0.0;
            for i in 0..d.params.len() {
                let mut a = d.clone();
                a.params.data[i] += eps;
                let mut b = d.clone();
                b.params.data[i] -= eps;
                let num = (focal_loss_logit(a.logit(&seq), real, &focal).0
                    - focal_loss_logit(b.logit(&seq), real, &focal).0)
                    / (2.0 * eps);
                let denom = num.abs().max(grad[i].abs());
                if denom > 1e-7 {
                    worst = worst.max((num - grad[i]).abs() / denom);
                }
            }
            assert!(worst < 1e-4, "max relative error {worst}");
        }
    }

    #[test]
    fn padding_after_eos_is_ignored() {
        let vocab = Vocabulary::build(["a is b, c is d"]);
        let mut d = tiny(&vocab);
        d.params_mut()
            .data
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x += 0.1 * (i as f64).sin());
        let mut seq = vocab.tokenize("a is b");
        let s = d.score(&seq);
        seq.extend([3, 4, EOS, 5]);
        assert_eq!(d.score(&seq), s);
    }

    #[test]
    fn checkpoint_round_trip() {
        let vocab = Vocabulary::build(["a is b"]);
        let mut d = tiny(&vocab);
        d.params_mut().quantize_f32();
        let back = Discriminator::from_bytes(&d.to_bytes().unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn zero_epochs_leave_parameters_alone() {
        let vocab = Vocabulary::build(["a is b", "a is c"]);
        let mut d = tiny(&vocab);
        let before = d.clone();
        let real = vec![vocab.tokenize("a is b"); 4];
        let syn = vec![vocab.tokenize("a is c"); 4];
        train_discriminator(
            &mut d,
            &real,
            &syn,
            &DiscTrainConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(d, before);
    }
}
