//! Small classifiers over one-hot categorical features, used by the propensity
//! and machine-learning efficacy scores.
//!
//! Every feature is binary, so a row is stored as the list of its active
//! feature indices and trees split on "feature is active".

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{seeded, StreamRng};
use crate::schema::RecordTable;

/// Binary feature rows: `rows[i]` lists the active features of row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub n_features: usize,
    pub rows: Vec<Vec<u32>>,
}

impl SparseRows {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> SparseRows {
        SparseRows {
            n_features: self.n_features,
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn concat(&self, other: &SparseRows) -> SparseRows {
        assert_eq!(self.n_features, other.n_features, "feature spaces differ");
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().cloned());
        SparseRows {
            n_features: self.n_features,
            rows,
        }
    }
}

/// One-hot features of every attribute except `skip`.
pub fn one_hot_features(table: &RecordTable, skip: Option<usize>) -> SparseRows {
    let dims = table.schema().dims();
    let mut offsets = Vec::with_capacity(dims.len());
    let mut width = 0;
    for (j, &d) in dims.iter().enumerate() {
        offsets.push(width);
        if Some(j) != skip {
            width += d;
        }
    }
    let rows = table
        .rows()
        .map(|r| {
            r.iter()
                .enumerate()
                .filter(|&(j, _)| Some(j) != skip)
                .map(|(j, &c)| (offsets[j] + c as usize) as u32)
                .collect()
        })
        .collect();
    SparseRows {
        n_features: width,
        rows,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Logistic,
    RandomForest,
    GradientBoosting,
    AdaBoost,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Logistic,
        Family::RandomForest,
        Family::GradientBoosting,
        Family::AdaBoost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Logistic => "logistic",
            Family::RandomForest => "random_forest",
            Family::GradientBoosting => "gradient_boosting",
            Family::AdaBoost => "ada_boost",
        }
    }
}

/// Hyperparameters of the four classifier families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub logistic_l2: f64,
    pub logistic_max_iter: usize,
    pub forest_trees: usize,
    pub forest_max_depth: usize,
    pub forest_min_leaf: usize,
    pub boosting_rounds: usize,
    pub boosting_max_depth: usize,
    pub boosting_learning_rate: f64,
    pub ada_rounds: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            logistic_l2: 1.0,
            logistic_max_iter: 50,
            forest_trees: 100,
            forest_max_depth: 10,
            forest_min_leaf: 1,
            boosting_rounds: 50,
            boosting_max_depth: 3,
            boosting_learning_rate: 0.1,
            ada_rounds: 50,
        }
    }
}

/// L2-regularised logistic regression fitted by iteratively reweighted least
/// squares. The intercept is not penalised.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl Logistic {
    pub fn fit(x: &SparseRows, y: &[bool], l2: f64, max_iter: usize, tol: f64) -> Logistic {
        assert_eq!(x.len(), y.len(), "one label per row");
        let p = x.n_features + 1;
        let mut beta = DVector::<f64>::zeros(p);
        let mut converged = false;
        let mut iterations = 0;
        for _ in 0..max_iter {
            iterations += 1;
            let mut h = DMatrix::<f64>::zeros(p, p);
            let mut g = DVector::<f64>::zeros(p);
            for (row, &yi) in x.rows.iter().zip(y) {
                let t = beta[p - 1] + row.iter().map(|&f| beta[f as usize]).sum::<f64>();
                let mu = sigmoid(t);
                let w = (mu * (1.0 - mu)).max(1e-12);
                let r = yi as u8 as f64 - mu;
                g[p - 1] += r;
                h[(p - 1, p - 1)] += w;
                for (a, &fa) in row.iter().enumerate() {
                    let fa = fa as usize;
                    g[fa] += r;
                    h[(fa, p - 1)] += w;
                    h[(p - 1, fa)] += w;
                    for &fb in &row[..=a] {
                        h[(fa, fb as usize)] += w;
                    }
                }
            }
            for i in 0..p {
                for j in 0..i {
                    h[(j, i)] = h[(i, j)];
                }
            }
            for i in 0..p - 1 {
                g[i] -= l2 * beta[i];
                h[(i, i)] += l2;
            }
            h[(p - 1, p - 1)] += 1e-9;
            let step = match h.clone().cholesky() {
                Some(c) => c.solve(&g),
                None => match h.lu().solve(&g) {
                    Some(s) => s,
                    None => break,
                },
            };
            beta += &step;
            if step.amax() < tol {
                converged = true;
                break;
            }
        }
        Logistic {
            weights: beta.as_slice()[..p - 1].to_vec(),
            bias: beta[p - 1],
            iterations,
            converged,
        }
    }

    pub fn predict_proba(&self, row: &[u32]) -> f64 {
        sigmoid(self.bias + row.iter().map(|&f| self.weights[f as usize]).sum::<f64>())
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(Vec<f64>),
    Split {
        feature: u32,
        active: Box<Node>,
        inactive: Box<Node>,
    },
}

impl Node {
    fn leaf<'a>(&'a self, row: &[u32]) -> &'a [f64] {
        match self {
            Node::Leaf(v) => v,
            Node::Split {
                feature,
                active,
                inactive,
            } => {
                if row.contains(feature) {
                    active.leaf(row)
                } else {
                    inactive.leaf(row)
                }
            }
        }
    }
}

struct TreeParams {
    max_depth: usize,
    min_leaf: usize,
    max_features: Option<usize>,
}

/// Classification tree on weighted samples, split by Gini impurity. Leaves
/// hold class weight shares.
struct ClassTree {
    root: Node,
}

fn gini_sum(w: &[f64]) -> f64 {
    let t: f64 = w.iter().sum();
    if t <= 0.0 {
        return 0.0;
    }
    t - w.iter().map(|v| v * v).sum::<f64>() / t
}

impl ClassTree {
    fn fit(
        x: &SparseRows,
        y: &[u16],
        w: &[f64],
        k: usize,
        params: &TreeParams,
        rng: &mut StreamRng,
    ) -> ClassTree {
        let idx: Vec<usize> = (0..x.len()).filter(|&i| w[i] > 0.0).collect();
        ClassTree {
            root: Self::grow(x, y, w, k, idx, 0, params, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn grow(
        x: &SparseRows,
        y: &[u16],
        w: &[f64],
        k: usize,
        idx: Vec<usize>,
        depth: usize,
        params: &TreeParams,
        rng: &mut StreamRng,
    ) -> Node {
        let mut total = vec![0.0; k];
        for &i in &idx {
            total[y[i] as usize] += w[i];
        }
        let leaf = |total: Vec<f64>| {
            let t: f64 = total.iter().sum();
            Node::Leaf(total.into_iter().map(|v| v / t.max(f64::MIN_POSITIVE)).collect())
        };
        let parent = gini_sum(&total);
        if depth >= params.max_depth || idx.len() < 2 * params.min_leaf || parent <= 1e-12 {
            return leaf(total);
        }
        let f = x.n_features;
        let mut on = vec![0.0; f * k];
        let mut on_n = vec![0usize; f];
        for &i in &idx {
            let c = y[i] as usize;
            for &j in &x.rows[i] {
                on[j as usize * k + c] += w[i];
                on_n[j as usize] += 1;
            }
        }
        let mut candidates: Vec<usize> = (0..f).collect();
        if let Some(m) = params.max_features {
            candidates.shuffle(rng);
            candidates.truncate(m.max(1));
        }
        let mut best: Option<(f64, usize)> = None;
        let mut off = vec![0.0; k];
        for &j in &candidates {
            let n_on = on_n[j];
            if n_on < params.min_leaf || idx.len() - n_on < params.min_leaf {
                continue;
            }
            let a = &on[j * k..(j + 1) * k];
            for c in 0..k {
                off[c] = total[c] - a[c];
            }
            let gain = parent - gini_sum(a) - gini_sum(&off);
            if gain > 1e-12 && best.map_or(true, |(g, _)| gain > g) {
                best = Some((gain, j));
            }
        }
        let Some((_, feature)) = best else {
            return leaf(total);
        };
        let fe = feature as u32;
        let (a, b): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| x.rows[i].contains(&fe));
        Node::Split {
            feature: fe,
            active: Box::new(Self::grow(x, y, w, k, a, depth + 1, params, rng)),
            inactive: Box::new(Self::grow(x, y, w, k, b, depth + 1, params, rng)),
        }
    }

    fn proba<'a>(&'a self, row: &[u32]) -> &'a [f64] {
        self.root.leaf(row)
    }
}

/// Least-squares regression tree with Newton leaf values `scale·Σr/Σh`.
struct RegTree {
    root: Node,
}

impl RegTree {
    fn fit(x: &SparseRows, r: &[f64], h: &[f64], scale: f64, params: &TreeParams) -> RegTree {
        RegTree {
            root: Self::grow(x, r, h, scale, (0..x.len()).collect(), 0, params),
        }
    }

    fn grow(
        x: &SparseRows,
        r: &[f64],
        h: &[f64],
        scale: f64,
        idx: Vec<usize>,
        depth: usize,
        params: &TreeParams,
    ) -> Node {
        let s: f64 = idx.iter().map(|&i| r[i]).sum();
        let n = idx.len();
        let leaf = || {
            let hs: f64 = idx.iter().map(|&i| h[i]).sum();
            let v = if hs.abs() < 1e-12 { 0.0 } else { scale * s / hs };
            Node::Leaf(vec![v])
        };
        if depth >= params.max_depth || n < 2 * params.min_leaf {
            return leaf();
        }
        let f = x.n_features;
        let mut on = vec![0.0; f];
        let mut on_n = vec![0usize; f];
        for &i in &idx {
            for &j in &x.rows[i] {
                on[j as usize] += r[i];
                on_n[j as usize] += 1;
            }
        }
        let base = s * s / n as f64;
        let mut best: Option<(f64, usize)> = None;
        for j in 0..f {
            let (nl, nr) = (on_n[j], n - on_n[j]);
            if nl < params.min_leaf || nr < params.min_leaf {
                continue;
            }
            let (sl, sr) = (on[j], s - on[j]);
            let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - base;
            if gain > 1e-12 && best.map_or(true, |(g, _)| gain > g) {
                best = Some((gain, j));
            }
        }
        let Some((_, feature)) = best else {
            return leaf();
        };
        let fe = feature as u32;
        let (a, b): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| x.rows[i].contains(&fe));
        Node::Split {
            feature: fe,
            active: Box::new(Self::grow(x, r, h, scale, a, depth + 1, params)),
            inactive: Box::new(Self::grow(x, r, h, scale, b, depth + 1, params)),
        }
    }

    fn value(&self, row: &[u32]) -> f64 {
        self.root.leaf(row)[0]
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn fit_logistic(x: &SparseRows, y: &[u16], k: usize, cfg: &LearnerConfig, test: &SparseRows) -> Vec<u16> {
    if k == 2 {
        let yb: Vec<bool> = y.iter().map(|&c| c == 1).collect();
        let m = Logistic::fit(x, &yb, cfg.logistic_l2, cfg.logistic_max_iter, 1e-8);
        return test
            .rows
            .iter()
            .map(|r| (m.predict_proba(r) > 0.5) as u16)
            .collect();
    }
    let models: Vec<Logistic> = (0..k)
        .map(|c| {
            let yb: Vec<bool> = y.iter().map(|&v| v as usize == c).collect();
            Logistic::fit(x, &yb, cfg.logistic_l2, cfg.logistic_max_iter, 1e-8)
        })
        .collect();
    test.rows
        .iter()
        .map(|r| {
            let p: Vec<f64> = models.iter().map(|m| m.predict_proba(r)).collect();
            argmax(&p) as u16
        })
        .collect()
}

fn fit_forest(
    x: &SparseRows,
    y: &[u16],
    k: usize,
    cfg: &LearnerConfig,
    test: &SparseRows,
    rng: &mut StreamRng,
) -> Vec<u16> {
    let n = x.len();
    let params = TreeParams {
        max_depth: cfg.forest_max_depth,
        min_leaf: cfg.forest_min_leaf,
        max_features: Some((x.n_features as f64).sqrt().round() as usize),
    };
    let mut votes = vec![vec![0.0; k]; test.len()];
    for _ in 0..cfg.forest_trees {
        let mut w = vec![0.0; n];
        for _ in 0..n {
            w[rng.gen_range(0..n)] += 1.0;
        }
        let tree = ClassTree::fit(x, y, &w, k, &params, rng);
        for (v, r) in votes.iter_mut().zip(&test.rows) {
            for (a, b) in v.iter_mut().zip(tree.proba(r)) {
                *a += b;
            }
        }
    }
    votes.iter().map(|v| argmax(v) as u16).collect()
}

fn fit_boosting(x: &SparseRows, y: &[u16], k: usize, cfg: &LearnerConfig, test: &SparseRows) -> Vec<u16> {
    let n = x.len();
    let params = TreeParams {
        max_depth: cfg.boosting_max_depth,
        min_leaf: 1,
        max_features: None,
    };
    let mut prior = vec![0.0; k];
    for &c in y {
        prior[c as usize] += 1.0;
    }
    let init: Vec<f64> = prior.iter().map(|&p| (p / n as f64).max(1e-12).ln()).collect();
    let mut scores: Vec<Vec<f64>> = vec![init.clone(); n];
    let mut test_scores: Vec<Vec<f64>> = vec![init; test.len()];
    let scale = (k as f64 - 1.0) / k as f64;
    let lr = cfg.boosting_learning_rate;
    let mut probs = vec![vec![0.0; k]; n];
    for _ in 0..cfg.boosting_rounds {
        for (p, s) in probs.iter_mut().zip(&scores) {
            softmax_into(s, p);
        }
        for c in 0..k {
            let r: Vec<f64> = (0..n)
                .map(|i| (y[i] as usize == c) as u8 as f64 - probs[i][c])
                .collect();
            let h: Vec<f64> = r.iter().map(|v| v.abs() * (1.0 - v.abs())).collect();
            let tree = RegTree::fit(x, &r, &h, scale, &params);
            for (s, row) in scores.iter_mut().zip(&x.rows) {
                s[c] += lr * tree.value(row);
            }
            for (s, row) in test_scores.iter_mut().zip(&test.rows) {
                s[c] += lr * tree.value(row);
            }
        }
    }
    test_scores.iter().map(|s| argmax(s) as u16).collect()
}

fn softmax_into(s: &[f64], out: &mut [f64]) {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut t = 0.0;
    for (o, &v) in out.iter_mut().zip(s) {
        *o = (v - m).exp();
        t += *o;
    }
    for o in out.iter_mut() {
        *o /= t;
    }
}

/// SAMME boosting over depth-one trees.
fn fit_ada(x: &SparseRows, y: &[u16], k: usize, cfg: &LearnerConfig, test: &SparseRows, rng: &mut StreamRng) -> Vec<u16> {
    let n = x.len();
    let params = TreeParams {
        max_depth: 1,
        min_leaf: 1,
        max_features: None,
    };
    let mut w = vec![1.0 / n as f64; n];
    let mut votes = vec![vec![0.0; k]; test.len()];
    let mut any = false;
    for _ in 0..cfg.ada_rounds {
        let stump = ClassTree::fit(x, y, &w, k, &params, rng);
        let pred: Vec<usize> = x.rows.iter().map(|r| argmax(stump.proba(r))).collect();
        let total: f64 = w.iter().sum();
        let err: f64 = (0..n)
            .filter(|&i| pred[i] != y[i] as usize)
            .map(|i| w[i])
            .sum::<f64>()
            / total;
        if err >= 1.0 - 1.0 / k as f64 {
            break;
        }
        let alpha = if err <= 0.0 {
            1.0
        } else {
            ((1.0 - err) / err).ln() + (k as f64 - 1.0).ln()
        };
        any = true;
        for (v, r) in votes.iter_mut().zip(&test.rows) {
            v[argmax(stump.proba(r))] += alpha;
        }
        if err <= 0.0 {
            break;
        }
        for i in 0..n {
            if pred[i] != y[i] as usize {
                w[i] *= alpha.exp();
            }
        }
        let t: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= t);
    }
    if !any {
        // Nothing beat chance: fall back to the majority class.
        let mut prior = vec![0.0; k];
        for &c in y {
            prior[c as usize] += 1.0;
        }
        return vec![argmax(&prior) as u16; test.len()];
    }
    votes.iter().map(|v| argmax(v) as u16).collect()
}

/// Trains one classifier family and predicts labels for `test`.
///
/// Labels are remapped to the classes present in `y`, so absent classes are
/// never predicted. A single present class gives a constant prediction.
pub fn fit_predict(
    family: Family,
    x: &SparseRows,
    y: &[u16],
    test: &SparseRows,
    cfg: &LearnerConfig,
    seed: u64,
) -> Vec<u16> {
    assert_eq!(x.len(), y.len(), "one label per row");
    assert!(!y.is_empty(), "empty training set");
    let mut present: Vec<u16> = y.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() == 1 {
        return vec![present[0]; test.len()];
    }
    let local: Vec<u16> = y
        .iter()
        .map(|c| present.binary_search(c).expect("present") as u16)
        .collect();
    let k = present.len();
    let mut rng = seeded(seed, family.name());
    let pred = match family {
        Family::Logistic => fit_logistic(x, &local, k, cfg, test),
        Family::RandomForest => fit_forest(x, &local, k, cfg, test, &mut rng),
        Family::GradientBoosting => fit_boosting(x, &local, k, cfg, test),
        Family::AdaBoost => fit_ada(x, &local, k, cfg, test, &mut rng),
    };
    pred.into_iter().map(|c| present[c as usize]).collect()
}

pub fn accuracy(pred: &[u16], truth: &[u16]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction length");
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}
