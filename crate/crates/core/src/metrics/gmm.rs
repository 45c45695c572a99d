//! Diagonal-covariance Gaussian mixtures fitted by EM.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub components: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Lower bound on every variance.
    pub var_floor: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            components: 10,
            restarts: 5,
            max_iter: 200,
            tol: 1e-6,
            var_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    d: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    vars: Vec<f64>,
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Gmm {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, vars: Vec<f64>) -> Self {
        let d = means.len() / weights.len();
        Gmm {
            d,
            weights,
            means,
            vars,
        }
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// `log w_c + log N(x | μ_c, diag σ²_c)` for every component.
    fn joint(&self, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        (0..self.weights.len())
            .map(|c| {
                let mu = &self.means[c * d..(c + 1) * d];
                let var = &self.vars[c * d..(c + 1) * d];
                let mut lp = self.weights[c].ln() - 0.5 * d as f64 * LN_2PI;
                for j in 0..d {
                    lp -= 0.5 * (var[j].ln() + (x[j] - mu[j]).powi(2) / var[j]);
                }
                lp
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        logsumexp(&self.joint(x))
    }

    /// Mean per-row log-likelihood of a row-major matrix.
    pub fn mean_loglik(&self, x: &[f64], rows: usize) -> f64 {
        let d = self.d;
        let parts = exec::map_indexed(rows, |i| self.log_density(&x[i * d..(i + 1) * d]));
        parts.iter().sum::<f64>() / rows.max(1) as f64
    }

    /// Best of `restarts` EM runs by training log-likelihood. Retries once
    /// with a hundredfold variance floor if every run goes non-finite.
    pub fn fit(x: &[f64], rows: usize, d: usize, cfg: &GmmConfig, seed: u64) -> Result<Gmm> {
        if rows == 0 || d == 0 {
            return Err(Error::EmFailure("no data to fit".into()));
        }
        for floor in [cfg.var_floor, cfg.var_floor * 100.0] {
            let mut best: Option<(f64, Gmm)> = None;
            for r in 0..cfg.restarts.max(1) {
                let g = em(x, rows, d, cfg, floor, seed, r as u64);
                let ll = g.mean_loglik(x, rows);
                if ll.is_finite() && best.as_ref().is_none_or(|(b, _)| ll > *b) {
                    best = Some((ll, g));
                }
            }
            if let Some((_, g)) = best {
                return Ok(g);
            }
        }
        Err(Error::EmFailure("log-likelihood is not finite".into()))
    }
}

fn em(x: &[f64], n: usize, d: usize, cfg: &GmmConfig, floor: f64, seed: u64, restart: u64) -> Gmm {
    let k = cfg.components.clamp(1, n);
    let mut r = rng::stream(seed, "gmm-init", restart);
    let mut global_mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            global_mean[j] += x[i * d + j] / n as f64;
        }
    }
    let mut global_var = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            global_var[j] += (x[i * d + j] - global_mean[j]).powi(2) / n as f64;
        }
    }
    let mut means = Vec::with_capacity(k * d);
    let mut picks = sample_indices(&mut r, n, k).into_vec();
    picks.sort_unstable();
    for &i in &picks {
        means.extend_from_slice(&x[i * d..(i + 1) * d]);
    }
    let vars: Vec<f64> = (0..k).flat_map(|_| global_var.iter().map(|v| v.max(floor))).collect();
    let mut g = Gmm {
        d,
        weights: vec![1.0 / k as f64; k],
        means,
        vars,
    };
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..cfg.max_iter {
        // E step
        let resp: Vec<(Vec<f64>, f64)> = exec::map_indexed(n, |i| {
            let j = g.joint(&x[i * d..(i + 1) * d]);
            let lse = logsumexp(&j);
            (j.iter().map(|v| (v - lse).exp()).collect(), lse)
        });
        let ll = resp.iter().map(|(_, l)| l).sum::<f64>() / n as f64;
        // M step
        let mut nk = vec![0.0; k];
        let mut mu = vec![0.0; k * d];
        for (i, (rp, _)) in resp.iter().enumerate() {
            for c in 0..k {
                nk[c] += rp[c];
                for j in 0..d {
                    mu[c * d + j] += rp[c] * x[i * d + j];
                }
            }
        }
        let mut var = vec![0.0; k * d];
        for c in 0..k {
            if nk[c] <= 0.0 {
                // An empty component keeps its previous parameters.
                mu[c * d..(c + 1) * d].copy_from_slice(&g.means[c * d..(c + 1) * d]);
                continue;
            }
            for j in 0..d {
                mu[c * d + j] /= nk[c];
            }
        }
        for (i, (rp, _)) in resp.iter().enumerate() {
            for c in 0..k {
                for j in 0..d {
                    var[c * d + j] += rp[c] * (x[i * d + j] - mu[c * d + j]).powi(2);
                }
            }
        }
        for c in 0..k {
            for j in 0..d {
                var[c * d + j] = if nk[c] > 0.0 {
                    (var[c * d + j] / nk[c]).max(floor)
                } else {
                    g.vars[c * d + j]
                };
            }
        }
        let total: f64 = nk.iter().sum();
        g.weights = nk.iter().map(|v| (v / total).max(1e-300)).collect();
        g.means = mu;
        g.vars = var;
        if !ll.is_finite() || (ll - prev).abs() < cfg.tol {
            break;
        }
        prev = ll;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_is_finite() {
        let g = Gmm::fit(&[3.0, -1.0], 1, 2, &GmmConfig::default(), 0).unwrap();
        assert!(g.mean_loglik(&[3.0, -1.0], 1).is_finite());
    }

    #[test]
    fn one_component_matches_closed_form() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let cfg = GmmConfig {
            components: 1,
            ..Default::default()
        };
        let g = Gmm::fit(&x, 4, 1, &cfg, 0).unwrap();
        // mean 2.5, variance 1.25
        let want = -0.5 * (LN_2PI + 1.25f64.ln()) - 0.5;
        assert!((g.mean_loglik(&x, 4) - want).abs() < 1e-9);
    }
}
