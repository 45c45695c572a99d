use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use super::LogProbPolicy;
use crate::error::{Error, Result};
use crate::nn::{self, Init, LayerNormCache, ParamSet};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyHyper {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub context_length: usize,
}

impl Default for PolicyHyper {
    fn default() -> Self {
        PolicyHyper {
            layers: 2,
            heads: 2,
            model_dim: 64,
            context_length: 128,
        }
    }
}

impl PolicyHyper {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.context_length < 2 {
            return Err(Error::Config("policy dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelMode {
    Trainable,
    FrozenReference,
}

#[derive(Debug, Clone)]
struct LayerRanges {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    w_qkv: Range<usize>,
    b_qkv: Range<usize>,
    w_o: Range<usize>,
    b_o: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: Range<usize>,
    pos_emb: Range<usize>,
    layers: Vec<LayerRanges>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
    head_w: Range<usize>,
    head_b: Range<usize>,
}

impl Layout {
    fn of(p: &ParamSet, layers: usize) -> Self {
        Layout {
            tok_emb: p.range("tok_emb"),
            pos_emb: p.range("pos_emb"),
            layers: (0..layers)
                .map(|l| {
                    let r = |n: &str| p.range(&format!("h{l}.{n}"));
                    LayerRanges {
                        ln1_g: r("ln1.g"),
                        ln1_b: r("ln1.b"),
                        w_qkv: r("attn.w_qkv"),
                        b_qkv: r("attn.b_qkv"),
                        w_o: r("attn.w_o"),
                        b_o: r("attn.b_o"),
                        ln2_g: r("ln2.g"),
                        ln2_b: r("ln2.b"),
                        w1: r("mlp.w1"),
                        b1: r("mlp.b1"),
                        w2: r("mlp.w2"),
                        b2: r("mlp.b2"),
                    }
                })
                .collect(),
            lnf_g: p.range("ln_f.g"),
            lnf_b: p.range("ln_f.b"),
            head_w: p.range("head.w"),
            head_b: p.range("head.b"),
        }
    }
}

/// Two disjoint mutable sub-slices of one buffer.
fn pair_mut(v: &mut [f64], a: Range<usize>, b: Range<usize>) -> (&mut [f64], &mut [f64]) {
    if a.start < b.start {
        assert!(a.end <= b.start);
        let (lo, hi) = v.split_at_mut(b.start);
        (&mut lo[a], &mut hi[..b.end - b.start])
    } else {
        assert!(b.end <= a.start);
        let (lo, hi) = v.split_at_mut(a.start);
        (&mut hi[..a.end - a.start], &mut lo[b])
    }
}

struct LayerCache {
    ln1: LayerNormCache,
    a_in: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    ln2: LayerNormCache,
    m_in: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

/// Activations of one forward pass, kept for the backward pass.
pub struct ForwardPass {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LayerNormCache,
    xf: Vec<f64>,
    /// `[T × |V|]` row-major.
    pub logits: Vec<f64>,
}

impl ForwardPass {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Incremental decoding state (per-layer key/value cache).
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl DecodeState {
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Decoder-only transformer over a word-level vocabulary.
///
/// Pre-norm blocks (LayerNorm → causal multi-head attention → residual,
/// LayerNorm → GELU MLP → residual), learned positional embeddings, untied
/// output projection.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    vocab: Vocabulary,
    hyper: PolicyHyper,
    params: ParamSet,
    layout: Layout,
    mode: ModelMode,
    updates: u64,
}

impl PartialEq for PolicyModel {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.hyper == other.hyper && self.params == other.params && self.mode == other.mode
    }
}

pub(crate) fn policy_param_layout(vocab: usize, h: &PolicyHyper) -> nn::ParamBuilder {
    let d = h.model_dim;
    let f = 4 * d;
    let std = 0.02;
    // Residual projections are scaled down with depth.
    let proj_std = 0.02 / (2.0 * h.layers as f64).sqrt();
    let mut b = ParamSet::builder().add("tok_emb", &[vocab, d], Init::Normal(std)).add(
        "pos_emb",
        &[h.context_length, d],
        Init::Normal(std),
    );
    for l in 0..h.layers {
        b = b
            .add(format!("h{l}.ln1.g"), &[d], Init::Ones)
            .add(format!("h{l}.ln1.b"), &[d], Init::Zeros)
            .add(format!("h{l}.attn.w_qkv"), &[d, 3 * d], Init::Normal(std))
            .add(format!("h{l}.attn.b_qkv"), &[3 * d], Init::Zeros)
            .add(format!("h{l}.attn.w_o"), &[d, d], Init::Normal(proj_std))
            .add(format!("h{l}.attn.b_o"), &[d], Init::Zeros)
            .add(format!("h{l}.ln2.g"), &[d], Init::Ones)
            .add(format!("h{l}.ln2.b"), &[d], Init::Zeros)
            .add(format!("h{l}.mlp.w1"), &[d, f], Init::Normal(std))
            .add(format!("h{l}.mlp.b1"), &[f], Init::Zeros)
            .add(format!("h{l}.mlp.w2"), &[f, d], Init::Normal(proj_std))
            .add(format!("h{l}.mlp.b2"), &[d], Init::Zeros);
    }
    b.add("ln_f.g", &[d], Init::Ones)
        .add("ln_f.b", &[d], Init::Zeros)
        .add("head.w", &[d, vocab], Init::Normal(std))
        .add("head.b", &[vocab], Init::Zeros)
}

impl PolicyModel {
    pub fn new(vocab: Vocabulary, hyper: PolicyHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut r = rng::stream(seed, "policy-init", 0);
        let params = policy_param_layout(vocab.len(), &hyper).build(&mut r);
        Ok(Self::from_parts(vocab, hyper, params, ModelMode::Trainable))
    }

    pub(crate) fn from_parts(vocab: Vocabulary, hyper: PolicyHyper, params: ParamSet, mode: ModelMode) -> Self {
        let layout = Layout::of(&params, hyper.layers);
        PolicyModel {
            vocab,
            hyper,
            params,
            layout,
            mode,
            updates: 0,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn hyper(&self) -> &PolicyHyper {
        &self.hyper
    }

    pub fn mode(&self) -> ModelMode {
        self.mode
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access to raw parameters. Fails on frozen references.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet> {
        match self.mode {
            ModelMode::Trainable => Ok(&mut self.params),
            ModelMode::FrozenReference => Err(Error::Config("reference model is frozen".into())),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn update_count(&self) -> u64 {
        self.updates
    }

    pub(crate) fn set_update_count(&mut self, n: u64) {
        self.updates = n;
    }

    /// Deep copy in frozen-reference mode.
    pub fn snapshot_reference(&self) -> PolicyModel {
        let mut s = self.clone();
        s.mode = ModelMode::FrozenReference;
        s
    }

    /// Trainable copy, e.g. to restart PPO from an SFT checkpoint.
    pub fn to_trainable(&self) -> PolicyModel {
        let mut s = self.clone();
        s.mode = ModelMode::Trainable;
        s
    }

    pub fn forward(&self, tokens: &[TokenId]) -> Result<ForwardPass> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Domain("empty context".into()));
        }
        if t > self.hyper.context_length {
            return Err(Error::ContextOverflow {
                len: t,
                max: self.hyper.context_length,
            });
        }
        let d = self.hyper.model_dim;
        let f = 4 * d;
        let v = self.vocab.len();
        let h = self.hyper.heads;
        let p = &self.params.data;
        let lay = &self.layout;

        let mut x = vec![0.0; t * d];
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= v {
                return Err(Error::Domain(format!("token id {tok} outside vocabulary")));
            }
            let e = &p[lay.tok_emb.start + tok as usize * d..][..d];
            let pe = &p[lay.pos_emb.start + i * d..][..d];
            for j in 0..d {
                x[i * d + j] = e[j] + pe[j];
            }
        }
        let mut caches = Vec::with_capacity(lay.layers.len());
        for lr in &lay.layers {
            let (a_in, ln1) = nn::layernorm(&x, &p[lr.ln1_g.clone()], &p[lr.ln1_b.clone()], t, d);
            let qkv = nn::matmul(&a_in, &p[lr.w_qkv.clone()], Some(&p[lr.b_qkv.clone()]), t, d, 3 * d);
            let (att, probs) = nn::attention(&qkv, t, d, h, true);
            let proj = nn::matmul(&att, &p[lr.w_o.clone()], Some(&p[lr.b_o.clone()]), t, d, d);
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
            let (m_in, ln2) = nn::layernorm(&x, &p[lr.ln2_g.clone()], &p[lr.ln2_b.clone()], t, d);
            let h_pre = nn::matmul(&m_in, &p[lr.w1.clone()], Some(&p[lr.b1.clone()]), t, d, f);
            let h_act: Vec<f64> = h_pre.iter().map(|&z| nn::gelu(z)).collect();
            let out = nn::matmul(&h_act, &p[lr.w2.clone()], Some(&p[lr.b2.clone()]), t, f, d);
            for (xv, ov) in x.iter_mut().zip(&out) {
                *xv += ov;
            }
            caches.push(LayerCache {
                ln1,
                a_in,
                qkv,
                probs,
                att,
                ln2,
                m_in,
                h_pre,
                h_act,
            });
        }
        let (xf, lnf) = nn::layernorm(&x, &p[lay.lnf_g.clone()], &p[lay.lnf_b.clone()], t, d);
        let logits = nn::matmul(&xf, &p[lay.head_w.clone()], Some(&p[lay.head_b.clone()]), t, d, v);
        Ok(ForwardPass {
            tokens: tokens.to_vec(),
            layers: caches,
            lnf,
            xf,
            logits,
        })
    }

    /// Gradient of `Σ dlogits ⊙ logits` with respect to all parameters.
    pub fn backward(&self, fp: &ForwardPass, dlogits: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(fp, dlogits, &mut grad);
        grad
    }

    pub fn backward_into(&self, fp: &ForwardPass, dlogits: &[f64], grad: &mut [f64]) {
        let t = fp.tokens.len();
        let d = self.hyper.model_dim;
        let f = 4 * d;
        let v = self.vocab.len();
        let h = self.hyper.heads;
        let p = &self.params.data;
        let lay = &self.layout;

        let dxf = {
            let (gw, gb) = pair_mut(grad, lay.head_w.clone(), lay.head_b.clone());
            nn::matmul_backward(&fp.xf, &p[lay.head_w.clone()], dlogits, t, d, v, gw, Some(gb))
        };
        let mut dx = {
            let (gg, gb) = pair_mut(grad, lay.lnf_g.clone(), lay.lnf_b.clone());
            nn::layernorm_backward(&dxf, &fp.lnf, &p[lay.lnf_g.clone()], t, d, gg, gb)
        };
        for (lr, c) in lay.layers.iter().zip(&fp.layers).rev() {
            let dh_act = {
                let (gw, gb) = pair_mut(grad, lr.w2.clone(), lr.b2.clone());
                nn::matmul_backward(&c.h_act, &p[lr.w2.clone()], &dx, t, f, d, gw, Some(gb))
            };
            let dh_pre: Vec<f64> = dh_act
                .iter()
                .zip(&c.h_pre)
                .map(|(g, &z)| g * nn::gelu_grad(z))
                .collect();
            let dm_in = {
                let (gw, gb) = pair_mut(grad, lr.w1.clone(), lr.b1.clone());
                nn::matmul_backward(&c.m_in, &p[lr.w1.clone()], &dh_pre, t, d, f, gw, Some(gb))
            };
            let dln2 = {
                let (gg, gb) = pair_mut(grad, lr.ln2_g.clone(), lr.ln2_b.clone());
                nn::layernorm_backward(&dm_in, &c.ln2, &p[lr.ln2_g.clone()], t, d, gg, gb)
            };
            for (a, b) in dx.iter_mut().zip(&dln2) {
                *a += b;
            }
            let datt = {
                let (gw, gb) = pair_mut(grad, lr.w_o.clone(), lr.b_o.clone());
                nn::matmul_backward(&c.att, &p[lr.w_o.clone()], &dx, t, d, d, gw, Some(gb))
            };
            let dqkv = nn::attention_backward(&datt, &c.qkv, &c.probs, t, d, h, true);
            let da_in = {
                let (gw, gb) = pair_mut(grad, lr.w_qkv.clone(), lr.b_qkv.clone());
                nn::matmul_backward(&c.a_in, &p[lr.w_qkv.clone()], &dqkv, t, d, 3 * d, gw, Some(gb))
            };
            let dln1 = {
                let (gg, gb) = pair_mut(grad, lr.ln1_g.clone(), lr.ln1_b.clone());
                nn::layernorm_backward(&da_in, &c.ln1, &p[lr.ln1_g.clone()], t, d, gg, gb)
            };
            for (a, b) in dx.iter_mut().zip(&dln1) {
                *a += b;
            }
        }
        for (i, &tok) in fp.tokens.iter().enumerate() {
            let ge = lay.tok_emb.start + tok as usize * d;
            let gp = lay.pos_emb.start + i * d;
            for j in 0..d {
                grad[ge + j] += dx[i * d + j];
                grad[gp + j] += dx[i * d + j];
            }
        }
    }

    /// Softmax over the vocabulary for the token following `context`.
    pub fn next_token_distribution(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let fp = self.forward(context)?;
        let v = self.vocab.len();
        let mut row = fp.logits[(context.len() - 1) * v..].to_vec();
        nn::softmax_in_place(&mut row);
        Ok(row)
    }

    pub fn start_decoding(&self) -> DecodeState {
        DecodeState {
            keys: vec![Vec::new(); self.hyper.layers],
            values: vec![Vec::new(); self.hyper.layers],
            pos: 0,
        }
    }

    /// Feeds one token and returns the logits for the next position.
    pub fn decode_step(&self, state: &mut DecodeState, token: TokenId) -> Result<Vec<f64>> {
        if state.pos >= self.hyper.context_length {
            return Err(Error::ContextOverflow {
                len: state.pos + 1,
                max: self.hyper.context_length,
            });
        }
        let d = self.hyper.model_dim;
        let f = 4 * d;
        let v = self.vocab.len();
        let heads = self.hyper.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params.data;
        let lay = &self.layout;
        let pos = state.pos;

        let e = &p[lay.tok_emb.start + token as usize * d..][..d];
        let pe = &p[lay.pos_emb.start + pos * d..][..d];
        let mut x: Vec<f64> = e.iter().zip(pe).map(|(a, b)| a + b).collect();
        for (l, lr) in lay.layers.iter().enumerate() {
            let (a_in, _) = nn::layernorm(&x, &p[lr.ln1_g.clone()], &p[lr.ln1_b.clone()], 1, d);
            let qkv = nn::matmul(&a_in, &p[lr.w_qkv.clone()], Some(&p[lr.b_qkv.clone()]), 1, d, 3 * d);
            state.keys[l].extend_from_slice(&qkv[d..2 * d]);
            state.values[l].extend_from_slice(&qkv[2 * d..]);
            let n = pos + 1;
            let keys = &state.keys[l];
            let vals = &state.values[l];
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; n];
            for hh in 0..heads {
                let q = &qkv[hh * dh..(hh + 1) * dh];
                for j in 0..n {
                    let k = &keys[j * d + hh * dh..j * d + (hh + 1) * dh];
                    scores[j] = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                nn::softmax_in_place(&mut scores);
                let o = &mut att[hh * dh..(hh + 1) * dh];
                for j in 0..n {
                    let vv = &vals[j * d + hh * dh..j * d + (hh + 1) * dh];
                    for (oo, vx) in o.iter_mut().zip(vv) {
                        *oo += scores[j] * vx;
                    }
                }
            }
            let proj = nn::matmul(&att, &p[lr.w_o.clone()], Some(&p[lr.b_o.clone()]), 1, d, d);
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
            let (m_in, _) = nn::layernorm(&x, &p[lr.ln2_g.clone()], &p[lr.ln2_b.clone()], 1, d);
            let h_pre = nn::matmul(&m_in, &p[lr.w1.clone()], Some(&p[lr.b1.clone()]), 1, d, f);
            let h_act: Vec<f64> = h_pre.iter().map(|&z| nn::gelu(z)).collect();
            let out = nn::matmul(&h_act, &p[lr.w2.clone()], Some(&p[lr.b2.clone()]), 1, f, d);
            for (xv, ov) in x.iter_mut().zip(&out) {
                *xv += ov;
            }
        }
        state.pos += 1;
        let (xf, _) = nn::layernorm(&x, &p[lay.lnf_g.clone()], &p[lay.lnf_b.clone()], 1, d);
        Ok(nn::matmul(
            &xf,
            &p[lay.head_w.clone()],
            Some(&p[lay.head_b.clone()]),
            1,
            d,
            v,
        ))
    }

    /// Summed next-token negative log-likelihood of `tokens[1..]` and its
    /// gradient (unscaled).
    pub fn nll_and_grad(&self, tokens: &[TokenId]) -> Result<(f64, usize, Vec<f64>)> {
        let tokens = &tokens[..tokens.len().min(self.hyper.context_length + 1)];
        if tokens.len() < 2 {
            return Ok((0.0, 0, vec![0.0; self.params.len()]));
        }
        let fp = self.forward(&tokens[..tokens.len() - 1])?;
        let v = self.vocab.len();
        let mut dlogits = fp.logits.clone();
        let mut nll = 0.0;
        for i in 0..fp.len() {
            let row = &mut dlogits[i * v..(i + 1) * v];
            let target = tokens[i + 1] as usize;
            let lp = nn::log_softmax(row);
            nll -= lp[target];
            for (r, l) in row.iter_mut().zip(&lp) {
                *r = l.exp();
            }
            row[target] -= 1.0;
        }
        let grad = self.backward(&fp, &dlogits);
        Ok((nll, fp.len(), grad))
    }

    /// Summed NLL of `tokens[1..]` without gradient.
    pub fn sequence_nll(&self, tokens: &[TokenId]) -> Result<(f64, usize)> {
        let lp = self.token_logprobs(tokens, 1.0)?;
        Ok((-lp.iter().sum::<f64>(), lp.len()))
    }

    /// Mean per-token KL(self ‖ other) of the tempered next-token
    /// distributions over every prefix of `tokens` (excluding the last).
    pub fn token_kl(&self, other: &PolicyModel, tokens: &[TokenId], temperature: f64) -> Result<(f64, usize)> {
        if tokens.len() < 2 {
            return Ok((0.0, 0));
        }
        let ctx = &tokens[..tokens.len() - 1];
        let a = self.forward(ctx)?;
        let b = other.forward(ctx)?;
        let v = self.vocab.len();
        let mut total = 0.0;
        for i in 0..ctx.len() {
            let za: Vec<f64> = a.logits[i * v..(i + 1) * v].iter().map(|z| z / temperature).collect();
            let zb: Vec<f64> = b.logits[i * v..(i + 1) * v].iter().map(|z| z / temperature).collect();
            let la = nn::log_softmax(&za);
            let lb = nn::log_softmax(&zb);
            total += la.iter().zip(&lb).map(|(x, y)| x.exp() * (x - y)).sum::<f64>();
        }
        Ok((total, ctx.len()))
    }
}

impl LogProbPolicy for PolicyModel {
    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn param_data(&self) -> &[f64] {
        &self.params.data
    }

    fn param_data_mut(&mut self) -> Result<&mut [f64]> {
        Ok(&mut self.params_mut()?.data)
    }

    fn update_count(&self) -> u64 {
        self.updates
    }

    fn record_update(&mut self) {
        self.updates += 1;
    }

    fn token_logprobs(&self, tokens: &[TokenId], temperature: f64) -> Result<Vec<f64>> {
        if tokens.len() < 2 {
            return Ok(Vec::new());
        }
        let fp = self.forward(&tokens[..tokens.len() - 1])?;
        let v = self.vocab.len();
        Ok((0..fp.len())
            .map(|i| {
                let z: Vec<f64> = fp.logits[i * v..(i + 1) * v].iter().map(|z| z / temperature).collect();
                nn::log_softmax(&z)[tokens[i + 1] as usize]
            })
            .collect())
    }

    fn logprob_grad(&self, tokens: &[TokenId], temperature: f64, coeffs: &[f64]) -> Result<Vec<f64>> {
        if tokens.len() < 2 {
            return Ok(vec![0.0; self.params.len()]);
        }
        let fp = self.forward(&tokens[..tokens.len() - 1])?;
        let v = self.vocab.len();
        let mut dlogits = vec![0.0; fp.logits.len()];
        for i in 0..fp.len() {
            let c = coeffs[i];
            if c == 0.0 {
                continue;
            }
            let z: Vec<f64> = fp.logits[i * v..(i + 1) * v].iter().map(|z| z / temperature).collect();
            let lp = nn::log_softmax(&z);
            let row = &mut dlogits[i * v..(i + 1) * v];
            for (r, l) in row.iter_mut().zip(&lp) {
                *r = -c * l.exp() / temperature;
            }
            row[tokens[i + 1] as usize] += c / temperature;
        }
        Ok(self.backward(&fp, &dlogits))
    }
}
