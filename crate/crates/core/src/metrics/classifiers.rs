use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::exec;
use crate::rng;

/// A fitted probabilistic classifier over dense row-major features.
pub trait Classifier: Send + Sync {
    /// `[rows × classes]` class probabilities.
    fn predict_proba(&self, x: &[f64], rows: usize) -> Vec<f64>;
    fn classes(&self) -> usize;

    /// Most probable class per row; ties go to the lower index.
    fn predict(&self, x: &[f64], rows: usize) -> Vec<usize> {
        let k = self.classes();
        self.predict_proba(x, rows)
            .chunks(k)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Lr,
    Dt,
    Rf,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [ClassifierKind::Lr, ClassifierKind::Dt, ClassifierKind::Rf];
}

/// Fixed settings of the classifier suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub lr_l2: f64,
    pub lr_iterations: usize,
    pub dt_max_depth: usize,
    pub rf_trees: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            lr_l2: 1e-3,
            lr_iterations: 1000,
            dt_max_depth: 12,
            rf_trees: 100,
        }
    }
}

pub fn fit_classifier(
    kind: ClassifierKind,
    x: &[f64],
    y: &[usize],
    d: usize,
    k: usize,
    cfg: &SuiteConfig,
    seed: u64,
) -> Box<dyn Classifier> {
    match kind {
        ClassifierKind::Lr => Box::new(LogisticRegression::fit(x, y, d, k, cfg.lr_l2, cfg.lr_iterations)),
        ClassifierKind::Dt => Box::new(DecisionTree::fit(
            x,
            y,
            d,
            k,
            &TreeParams {
                max_depth: cfg.dt_max_depth,
                max_features: None,
            },
            &(0..y.len()).collect::<Vec<_>>(),
            &mut rng::stream(seed, "dt", 0),
        )),
        ClassifierKind::Rf => Box::new(RandomForest::fit(x, y, d, k, cfg.rf_trees, seed)),
    }
}

/// Multinomial logistic regression with an L2 penalty on the weights,
/// fitted by full-batch gradient descent with a fixed safe step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    d: usize,
    k: usize,
    /// `[(d + 1) × k]`, bias row last.
    w: Vec<f64>,
}

impl LogisticRegression {
    pub fn fit(x: &[f64], y: &[usize], d: usize, k: usize, l2: f64, iterations: usize) -> Self {
        let n = y.len();
        let mut w = vec![0.0; (d + 1) * k];
        let max_sq = (0..n)
            .map(|i| 1.0 + x[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max);
        // Softmax cross-entropy has curvature at most half the squared row norm.
        let step = 1.0 / (0.5 * max_sq + l2);
        let mut logits = vec![0.0; k];
        for _ in 0..iterations {
            let mut g = vec![0.0; (d + 1) * k];
            for i in 0..n {
                let xi = &x[i * d..(i + 1) * d];
                for c in 0..k {
                    logits[c] = w[d * k + c] + (0..d).map(|j| xi[j] * w[j * k + c]).sum::<f64>();
                }
                crate::nn::softmax_in_place(&mut logits);
                logits[y[i]] -= 1.0;
                for j in 0..d {
                    if xi[j] != 0.0 {
                        for c in 0..k {
                            g[j * k + c] += xi[j] * logits[c];
                        }
                    }
                }
                for c in 0..k {
                    g[d * k + c] += logits[c];
                }
            }
            let inv = 1.0 / n.max(1) as f64;
            for (idx, gv) in g.iter().enumerate() {
                let reg = if idx < d * k { l2 * w[idx] } else { 0.0 };
                w[idx] -= step * (gv * inv + reg);
            }
        }
        LogisticRegression { d, k, w }
    }
}

impl Classifier for LogisticRegression {
    fn predict_proba(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (d, k) = (self.d, self.k);
        let mut out = Vec::with_capacity(rows * k);
        for i in 0..rows {
            let xi = &x[i * d..(i + 1) * d];
            let mut z: Vec<f64> = (0..k)
                .map(|c| self.w[d * k + c] + (0..d).map(|j| xi[j] * self.w[j * k + c]).sum::<f64>())
                .collect();
            crate::nn::softmax_in_place(&mut z);
            out.extend(z);
        }
        out
    }

    fn classes(&self) -> usize {
        self.k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeParams {
    pub max_depth: usize,
    /// Features examined per split; `None` means all.
    pub max_features: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(Vec<f64>),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// CART classification tree with Gini impurity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    d: usize,
    k: usize,
    nodes: Vec<Node>,
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / nf).powi(2)).sum::<f64>()
}

impl DecisionTree {
    /// Fits on the rows listed in `samples` (repeats allowed, as in a
    /// bootstrap draw).
    pub fn fit(
        x: &[f64],
        y: &[usize],
        d: usize,
        k: usize,
        params: &TreeParams,
        samples: &[usize],
        r: &mut rng::Rng,
    ) -> Self {
        let mut tree = DecisionTree {
            d,
            k,
            nodes: Vec::new(),
        };
        tree.grow(x, y, params, samples.to_vec(), 0, r);
        tree
    }

    fn grow(
        &mut self,
        x: &[f64],
        y: &[usize],
        params: &TreeParams,
        samples: Vec<usize>,
        depth: usize,
        r: &mut rng::Rng,
    ) -> usize {
        let (d, k) = (self.d, self.k);
        let n = samples.len();
        let mut counts = vec![0usize; k];
        for &i in &samples {
            counts[y[i]] += 1;
        }
        let id = self.nodes.len();
        let leaf = Node::Leaf(counts.iter().map(|&c| c as f64 / n.max(1) as f64).collect());
        self.nodes.push(leaf);
        let parent = gini(&counts, n);
        if depth >= params.max_depth || n < 2 || parent == 0.0 {
            return id;
        }
        let features: Vec<usize> = match params.max_features {
            Some(m) if m < d => {
                let mut f = sample_indices(r, d, m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..d).collect(),
        };
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = samples.clone();
        for &f in &features {
            order.sort_by(|&a, &b| x[a * d + f].total_cmp(&x[b * d + f]));
            let mut left = vec![0usize; k];
            for s in 0..n - 1 {
                left[y[order[s]]] += 1;
                let (xa, xb) = (x[order[s] * d + f], x[order[s + 1] * d + f]);
                if xa == xb {
                    continue;
                }
                let nl = s + 1;
                let right: Vec<usize> = counts.iter().zip(&left).map(|(c, l)| c - l).collect();
                let impurity = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
                let gain = parent - impurity;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, 0.5 * (xa + xb)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return id;
        };
        let (ls, rs): (Vec<usize>, Vec<usize>) = samples.iter().partition(|&&i| x[i * d + feature] <= threshold);
        let left = self.grow(x, y, params, ls, depth + 1, r);
        let right = self.grow(x, y, params, rs, depth + 1, r);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    fn leaf(&self, xi: &[f64]) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(p) => return p,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if xi[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

impl Classifier for DecisionTree {
    fn predict_proba(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let d = self.d;
        (0..rows)
            .flat_map(|i| self.leaf(&x[i * d..(i + 1) * d]).to_vec())
            .collect()
    }

    fn classes(&self) -> usize {
        self.k
    }
}

/// Bagged CART trees with `floor(sqrt(d))` features tried per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    k: usize,
    trees: Vec<DecisionTree>,
}

/// Depth cap for forest trees; deep enough to be effectively unlimited at
/// the table sizes this crate targets.
const RF_MAX_DEPTH: usize = 64;

impl RandomForest {
    pub fn fit(x: &[f64], y: &[usize], d: usize, k: usize, trees: usize, seed: u64) -> Self {
        let n = y.len();
        let m = ((d as f64).sqrt().floor() as usize).max(1);
        let params = TreeParams {
            max_depth: RF_MAX_DEPTH,
            max_features: Some(m),
        };
        let trees = exec::map_indexed(trees, |t| {
            let mut r = rng::stream(seed, "rf-tree", t as u64);
            let boot: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
            DecisionTree::fit(x, y, d, k, &params, &boot, &mut r)
        });
        RandomForest { k, trees }
    }
}

impl Classifier for RandomForest {
    fn predict_proba(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.k];
        for t in &self.trees {
            for (o, p) in out.iter_mut().zip(t.predict_proba(x, rows)) {
                *o += p;
            }
        }
        let inv = 1.0 / self.trees.len().max(1) as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }

    fn classes(&self) -> usize {
        self.k
    }
}

pub fn accuracy(pred: &[usize], truth: &[Option<usize>]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| Some(**p) == **t).count();
    hits as f64 / pred.len().max(1) as f64
}
