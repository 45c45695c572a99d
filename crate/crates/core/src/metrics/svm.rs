//! Binary C-SVM with an RBF kernel, solved by SMO with second-order working
//! set selection, plus Platt scaling for probabilities.

use serde::{Deserialize, Serialize};

use crate::exec;

const TAU: f64 = 1e-12;
const TOLERANCE: f64 = 1e-3;
/// Kernel matrices up to this many rows are precomputed.
const PRECOMPUTE_LIMIT: usize = 5000;

/// `1 / (d · Var(X))` over every entry of the training matrix.
pub fn scale_gamma(x: &[f64], d: usize) -> f64 {
    if x.is_empty() || d == 0 {
        return 1.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (d as f64 * var)
    } else {
        1.0
    }
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-gamma * sq).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Svm {
    d: usize,
    gamma: f64,
    /// Support vectors, row-major.
    sv: Vec<f64>,
    /// `α_i y_i` per support vector.
    coef: Vec<f64>,
    rho: f64,
    /// Platt sigmoid `P(y = +1 | f) = 1 / (1 + exp(A f + B))`.
    platt_a: f64,
    platt_b: f64,
}

struct Kernel<'a> {
    x: &'a [f64],
    d: usize,
    gamma: f64,
    full: Option<Vec<f64>>,
}

impl Kernel<'_> {
    fn row(&self, i: usize, n: usize) -> Vec<f64> {
        match &self.full {
            Some(k) => k[i * n..(i + 1) * n].to_vec(),
            None => {
                let d = self.d;
                let xi = &self.x[i * d..(i + 1) * d];
                (0..n)
                    .map(|j| rbf(xi, &self.x[j * d..(j + 1) * d], self.gamma))
                    .collect()
            }
        }
    }
}

impl Svm {
    /// Fits on labels `y ∈ {+1, -1}`.
    pub fn fit(x: &[f64], y: &[f64], d: usize, c: f64, gamma: f64) -> Svm {
        let n = y.len();
        let full = (n <= PRECOMPUTE_LIMIT).then(|| {
            let rows = exec::map_indexed(n, |i| {
                let xi = &x[i * d..(i + 1) * d];
                (0..n)
                    .map(|j| rbf(xi, &x[j * d..(j + 1) * d], gamma))
                    .collect::<Vec<f64>>()
            });
            rows.concat()
        });
        let kern = Kernel { x, d, gamma, full };
        let mut alpha = vec![0.0; n];
        let mut g = vec![-1.0; n];
        let upper = |a: f64| a >= c;
        let lower = |a: f64| a <= 0.0;
        let max_iter = (100 * n).max(10_000_000);
        for _ in 0..max_iter {
            // First index: maximal violating candidate.
            let mut gmax = f64::NEG_INFINITY;
            let mut i = usize::MAX;
            for t in 0..n {
                let v = if y[t] > 0.0 {
                    (!upper(alpha[t])).then_some(-g[t])
                } else {
                    (!lower(alpha[t])).then_some(g[t])
                };
                if let Some(v) = v {
                    if v >= gmax {
                        gmax = v;
                        i = t;
                    }
                }
            }
            if i == usize::MAX {
                break;
            }
            let ki = kern.row(i, n);
            // Second index: largest decrease of the objective.
            let mut gmax2 = f64::NEG_INFINITY;
            let mut j = usize::MAX;
            let mut best = f64::INFINITY;
            for t in 0..n {
                let grad_diff = if y[t] > 0.0 {
                    if lower(alpha[t]) {
                        continue;
                    }
                    gmax2 = gmax2.max(g[t]);
                    gmax + g[t]
                } else {
                    if upper(alpha[t]) {
                        continue;
                    }
                    gmax2 = gmax2.max(-g[t]);
                    gmax - g[t]
                };
                if grad_diff > 0.0 {
                    // The RBF diagonal is 1, so the curvature is 2 - 2K.
                    let quad = 2.0 - 2.0 * ki[t];
                    let quad = if quad > 0.0 { quad } else { TAU };
                    let obj = -(grad_diff * grad_diff) / quad;
                    if obj <= best {
                        best = obj;
                        j = t;
                    }
                }
            }
            if gmax + gmax2 < TOLERANCE || j == usize::MAX {
                break;
            }
            let kj = kern.row(j, n);
            let qij = y[i] * y[j] * ki[j];
            let (oi, oj) = (alpha[i], alpha[j]);
            if y[i] != y[j] {
                let quad = (2.0 + 2.0 * qij).max(TAU);
                let delta = (-g[i] - g[j]) / quad;
                let diff = alpha[i] - alpha[j];
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = diff;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > 0.0 {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = c - diff;
                    }
                } else if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            } else {
                let quad = (2.0 - 2.0 * qij).max(TAU);
                let delta = (g[i] - g[j]) / quad;
                let sum = alpha[i] + alpha[j];
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > c {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = sum - c;
                    }
                } else if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if sum > c {
                    if alpha[j] > c {
                        alpha[j] = c;
                        alpha[i] = sum - c;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
            let (di, dj) = (alpha[i] - oi, alpha[j] - oj);
            for t in 0..n {
                g[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
            }
        }
        // Bias from free vectors, or the midpoint of the feasible interval.
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut free, mut sum_free) = (0usize, 0.0);
        for t in 0..n {
            let yg = y[t] * g[t];
            if upper(alpha[t]) {
                if y[t] < 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else if lower(alpha[t]) {
                if y[t] > 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else {
                free += 1;
                sum_free += yg;
            }
        }
        let rho = if free > 0 {
            sum_free / free as f64
        } else if ub.is_finite() && lb.is_finite() {
            (ub + lb) / 2.0
        } else {
            0.0
        };
        let mut sv = Vec::new();
        let mut coef = Vec::new();
        for t in 0..n {
            if alpha[t] > 0.0 {
                sv.extend_from_slice(&x[t * d..(t + 1) * d]);
                coef.push(alpha[t] * y[t]);
            }
        }
        let mut svm = Svm {
            d,
            gamma,
            sv,
            coef,
            rho,
            platt_a: 0.0,
            platt_b: 0.0,
        };
        let dec = svm.decision_function(x, n);
        let (a, b) = platt(&dec, y);
        svm.platt_a = a;
        svm.platt_b = b;
        svm
    }

    pub fn decision_function(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let d = self.d;
        exec::map_indexed(rows, |i| {
            let xi = &x[i * d..(i + 1) * d];
            let s: f64 = self
                .coef
                .iter()
                .enumerate()
                .map(|(k, c)| c * rbf(xi, &self.sv[k * d..(k + 1) * d], self.gamma))
                .sum();
            s - self.rho
        })
    }

    /// `+1` where the decision value is positive, else `-1`.
    pub fn predict(&self, x: &[f64], rows: usize) -> Vec<f64> {
        self.decision_function(x, rows)
            .into_iter()
            .map(|f| if f > 0.0 { 1.0 } else { -1.0 })
            .collect()
    }

    /// Platt-scaled probability of the `+1` class.
    pub fn predict_proba(&self, x: &[f64], rows: usize) -> Vec<f64> {
        self.decision_function(x, rows)
            .into_iter()
            .map(|f| sigmoid_platt(f * self.platt_a + self.platt_b))
            .collect()
    }

    pub fn support_vectors(&self) -> usize {
        self.coef.len()
    }
}

/// `1 / (1 + exp(z))`, computed without overflow.
fn sigmoid_platt(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp() / (1.0 + (-z).exp())
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Fits Platt's sigmoid by Newton's method with backtracking, using
/// regularized targets.
fn platt(dec: &[f64], y: &[f64]) -> (f64, f64) {
    let prior1 = y.iter().filter(|&&v| v > 0.0).count() as f64;
    let prior0 = y.len() as f64 - prior1;
    let hi = (prior1 + 1.0) / (prior1 + 2.0);
    let lo = 1.0 / (prior0 + 2.0);
    let t: Vec<f64> = y.iter().map(|&v| if v > 0.0 { hi } else { lo }).collect();
    let (max_iter, min_step, sigma, eps) = (100, 1e-10, 1e-12, 1e-5);
    let mut a = 0.0;
    let mut b = ((prior0 + 1.0) / (prior1 + 1.0)).ln();
    let objective = |a: f64, b: f64| -> f64 {
        dec.iter()
            .zip(&t)
            .map(|(&f, &ti)| {
                let z = f * a + b;
                if z >= 0.0 {
                    ti * z + (-z).exp().ln_1p()
                } else {
                    (ti - 1.0) * z + z.exp().ln_1p()
                }
            })
            .sum()
    };
    let mut fval = objective(a, b);
    for _ in 0..max_iter {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (sigma, sigma, 0.0, 0.0, 0.0);
        for (&f, &ti) in dec.iter().zip(&t) {
            let z = f * a + b;
            let (p, q) = if z >= 0.0 {
                ((-z).exp() / (1.0 + (-z).exp()), 1.0 / (1.0 + (-z).exp()))
            } else {
                (1.0 / (1.0 + z.exp()), z.exp() / (1.0 + z.exp()))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < eps && g2.abs() < eps {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        while step >= min_step {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
        }
        if step < min_step {
            break;
        }
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_clusters() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..30 {
            let t = i as f64 / 30.0;
            x.extend([-2.0 + t, 0.5 * t]);
            y.push(-1.0);
            x.extend([2.0 - t, -0.5 * t]);
            y.push(1.0);
        }
        let g = scale_gamma(&x, 2);
        let m = Svm::fit(&x, &y, 2, 1.0, g);
        assert_eq!(m.predict(&x, 60), y);
        let p = m.predict_proba(&[3.0, 0.0, -3.0, 0.0], 2);
        assert!(p[0] > 0.8 && p[1] < 0.2, "{p:?}");
    }

    #[test]
    fn kkt_holds_at_the_solution() {
        // Overlapping classes exercise bounded multipliers.
        let xs: Vec<f64> = (0..40).map(|i| ((i * 37) % 40) as f64 / 10.0).collect();
        let y: Vec<f64> = (0..40).map(|i| if (i * 37) % 40 >= 18 { 1.0 } else { -1.0 }).collect();
        let m = Svm::fit(&xs, &y, 1, 1.0, 1.0);
        assert!(m.support_vectors() > 0);
        let f = m.decision_function(&xs, 40);
        // Margin violators can exist only up to the box constraint, so most
        // points must be on the correct side.
        let correct = f.iter().zip(&y).filter(|(f, y)| **f * **y > 0.0).count();
        assert!(correct >= 36, "{correct}");
    }

    #[test]
    fn gamma_scale() {
        assert_eq!(scale_gamma(&[1.0, 1.0], 2), 1.0);
        let g = scale_gamma(&[0.0, 2.0], 1);
        assert!((g - 1.0).abs() < 1e-15);
    }
}
