//! Dense building blocks shared by the policy and the discriminator.
//!
//! Parameters of a model live in one flat `Vec<f64>` described by a
//! [`ParamSet`] layout, so the optimizer, checkpointing and gradient
//! accumulation all work on plain slices. Activations are row-major.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named tensors packed into one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub specs: Vec<TensorSpec>,
    pub data: Vec<f64>,
}

impl ParamSet {
    pub fn builder() -> ParamBuilder {
        ParamBuilder::default()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn spec(&self, name: &str) -> &TensorSpec {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no tensor named {name}"))
    }

    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        let s = self.spec(name);
        s.offset..s.offset + s.numel()
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.data[self.range(name)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rounds every parameter to the nearest `f32`, making the in-memory state
    /// identical to what a checkpoint stores.
    pub fn quantize_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Default)]
pub struct ParamBuilder {
    specs: Vec<TensorSpec>,
    inits: Vec<Init>,
    len: usize,
}

impl ParamBuilder {
    pub fn add(mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.len,
        };
        self.len += spec.numel();
        self.specs.push(spec);
        self.inits.push(init);
        self
    }

    pub fn build(self, rng: &mut Rng) -> ParamSet {
        let mut data = vec![0.0; self.len];
        for (spec, init) in self.specs.iter().zip(&self.inits) {
            let slot = &mut data[spec.offset..spec.offset + spec.numel()];
            match *init {
                Init::Zeros => {}
                Init::Ones => slot.fill(1.0),
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).expect("valid std");
                    for x in slot {
                        *x = n.sample(rng);
                    }
                }
            }
        }
        ParamSet {
            specs: self.specs,
            data,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// out[m×n] = a[m×k] · b[k×n] (+ bias[n])
pub fn matmul(a: &[f64], b: &[f64], bias: Option<&[f64]>, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        if let Some(bias) = bias {
            row.copy_from_slice(bias);
        }
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Backward of [`matmul`]: accumulates dB += aᵀ·dout and dbias += Σ dout,
/// returns dA = dout·bᵀ.
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dout: &[f64],
    m: usize,
    k: usize,
    n: usize,
    db: &mut [f64],
    dbias: Option<&mut [f64]>,
) -> Vec<f64> {
    for i in 0..m {
        let drow = &dout[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, g) in dbrow.iter_mut().zip(drow) {
                *d += av * g;
            }
        }
    }
    if let Some(dbias) = dbias {
        for i in 0..m {
            for (d, g) in dbias.iter_mut().zip(&dout[i * n..(i + 1) * n]) {
                *d += g;
            }
        }
    }
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        let drow = &dout[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] = drow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    da
}

pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

pub fn layernorm(x: &[f64], g: &[f64], b: &[f64], rows: usize, d: usize) -> (Vec<f64>, LayerNormCache) {
    let mut out = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * g[j] + b[j];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

pub fn layernorm_backward(
    dout: &[f64],
    cache: &LayerNormCache,
    g: &[f64],
    rows: usize,
    d: usize,
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dy = &dout[r * d..(r + 1) * d];
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..d {
            dg[j] += dy[j] * xh[j];
            db[j] += dy[j];
            let dxh = dy[j] * g[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let rs = cache.rstd[r];
        for j in 0..d {
            let dxh = dy[j] * g[j];
            dx[r * d + j] = rs * (dxh - sum_dxh / d as f64 - xh[j] * sum_dxh_xh / d as f64);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log σ(z), stable for large |z|.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Multi-head scaled dot-product attention over packed `qkv` rows
/// (`[T × 3d]`, q|k|v). Returns the concatenated head outputs `[T × d]` and
/// the attention probabilities `[H × T × T]`.
pub fn attention(qkv: &[f64], t: usize, d: usize, heads: usize, causal: bool) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut probs = vec![0.0; heads * t * t];
    for h in 0..heads {
        for i in 0..t {
            let q = &qkv[i * 3 * d + h * dh..i * 3 * d + (h + 1) * dh];
            let jmax = if causal { i + 1 } else { t };
            let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            for j in 0..jmax {
                let k = &qkv[j * 3 * d + d + h * dh..j * 3 * d + d + (h + 1) * dh];
                p[j] = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut p[..jmax]);
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..jmax {
                let v = &qkv[j * 3 * d + 2 * d + h * dh..j * 3 * d + 2 * d + (h + 1) * dh];
                for (oo, vv) in o.iter_mut().zip(v) {
                    *oo += p[j] * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`attention`]; returns d(qkv).
pub fn attention_backward(
    dout: &[f64],
    qkv: &[f64],
    probs: &[f64],
    t: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; t * 3 * d];
    let mut dp = vec![0.0; t];
    for h in 0..heads {
        for i in 0..t {
            let jmax = if causal { i + 1 } else { t };
            let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            let dout_i = &dout[i * d + h * dh..i * d + (h + 1) * dh];
            // dP and dV
            for j in 0..jmax {
                let voff = j * 3 * d + 2 * d + h * dh;
                let v = &qkv[voff..voff + dh];
                dp[j] = dout_i.iter().zip(v).map(|(a, b)| a * b).sum();
                for c in 0..dh {
                    dqkv[voff + c] += p[j] * dout_i[c];
                }
            }
            // softmax backward
            let dot: f64 = (0..jmax).map(|j| p[j] * dp[j]).sum();
            let qoff = i * 3 * d + h * dh;
            for j in 0..jmax {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let koff = j * 3 * d + d + h * dh;
                for c in 0..dh {
                    dqkv[qoff + c] += ds * qkv[koff + c];
                    dqkv[koff + c] += ds * qkv[qoff + c];
                }
            }
        }
    }
    dqkv
}

/// Draws an index from a probability vector. Zero-mass entries are never
/// returned.
pub fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random::<f64>();
    let total: f64 = probs.iter().sum();
    let mut acc = 0.0;
    let target = u * total;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_nonzero = i;
        acc += p;
        if target < acc {
            return i;
        }
    }
    last_nonzero
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> Rng {
        Rng::seed_from_u64(3)
    }

    fn rand_vec(n: usize, r: &mut Rng) -> Vec<f64> {
        (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()
    }

    // Scalar loss L = Σ w ⊙ f(x) for checking the hand-written backward passes.
    fn check<F>(x: &[f64], w: &[f64], f: F, analytic: &[f64])
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += eps;
            let mut xm = x.to_vec();
            xm[i] -= eps;
            let lp: f64 = f(&xp).iter().zip(w).map(|(a, b)| a * b).sum();
            let lm: f64 = f(&xm).iter().zip(w).map(|(a, b)| a * b).sum();
            let num = (lp - lm) / (2.0 * eps);
            let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "coord {i}: numeric {num} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn layernorm_gradient() {
        let mut r = rng();
        let (rows, d) = (3, 5);
        let x = rand_vec(rows * d, &mut r);
        let g = rand_vec(d, &mut r);
        let b = rand_vec(d, &mut r);
        let w = rand_vec(rows * d, &mut r);
        let (_, cache) = layernorm(&x, &g, &b, rows, d);
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        let dx = layernorm_backward(&w, &cache, &g, rows, d, &mut dg, &mut db);
        check(&x, &w, |x| layernorm(x, &g, &b, rows, d).0, &dx);
    }

    #[test]
    fn attention_gradient() {
        let mut r = rng();
        for causal in [true, false] {
            let (t, d, h) = (4, 6, 2);
            let qkv = rand_vec(t * 3 * d, &mut r);
            let w = rand_vec(t * d, &mut r);
            let (_, probs) = attention(&qkv, t, d, h, causal);
            let dq = attention_backward(&w, &qkv, &probs, t, d, h, causal);
            check(&qkv, &w, |q| attention(q, t, d, h, causal).0, &dq);
        }
    }

    #[test]
    fn matmul_gradient() {
        let mut r = rng();
        let (m, k, n) = (3, 4, 2);
        let a = rand_vec(m * k, &mut r);
        let b = rand_vec(k * n, &mut r);
        let w = rand_vec(m * n, &mut r);
        let mut db = vec![0.0; k * n];
        let da = matmul_backward(&a, &b, &w, m, k, n, &mut db, None);
        check(&a, &w, |a| matmul(a, &b, None, m, k, n), &da);
        check(&b, &w, |b| matmul(&a, b, None, m, k, n), &db);
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn stable_sigmoids() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(2.0) - sigmoid(2.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn adamw_zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![0.3, -1.2];
        let before = p.clone();
        let mut opt = AdamW::new(2, 1e-3, 0.0);
        opt.step(&mut p, &[0.0, 0.0]);
        assert_eq!(p, before);
    }
}
