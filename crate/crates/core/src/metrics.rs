//! Similarity scores between real and synthetic tables, the unified score, and
//! recall/precision over sampling and structural zeros.
//!
//! Every sub-score is computed per view (the synthetic joint table projected
//! onto that view's schema, compared with the view's training table) and then
//! averaged over views by [`aggregate`].

use std::collections::{BTreeMap, HashSet};

use itertools::Itertools;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::learners::{accuracy, fit_predict, one_hot_features, Family, LearnerConfig, Logistic};
use crate::rng::{derive_seed, seeded};
use crate::schema::{distribution_by_columns, ComboKey, DistributionTable, RecordTable, SchemaError};
use crate::truthsim::{GroundTruthPopulation, SimError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("distribution layouts differ: {0}")]
    Layout(String),
    #[error("schema mismatch: {0}")]
    Mismatch(String),
    #[error("need at least {needed} attributes, found {found}")]
    TooFewAttributes { needed: usize, found: usize },
    #[error("{0} table is empty")]
    Empty(&'static str),
    #[error("component `{name}` = {value} is outside [0, 1]")]
    OutOfRange { name: String, value: f64 },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Association values are clamped to `[ASSOC_FLOOR, 1 - ASSOC_FLOOR]` before
/// taking logs.
pub const ASSOC_FLOOR: f64 = 1e-6;

fn check_layout(real: &DistributionTable, synth: &DistributionTable) -> Result<()> {
    if !real.same_layout(synth) {
        return Err(MetricsError::Layout(format!(
            "{:?} {:?} vs {:?} {:?}",
            real.attributes, real.dims, synth.attributes, synth.dims
        )));
    }
    Ok(())
}

/// Root mean squared cell error over the full cross-product, divided by the
/// mean real cell frequency.
pub fn srmse(real: &DistributionTable, synth: &DistributionTable) -> Result<f64> {
    check_layout(real, synth)?;
    let nb = real.n_cells() as f64;
    let mean = real.cells.iter().sum::<f64>() / nb;
    if mean <= 0.0 {
        return Err(MetricsError::Empty("real distribution"));
    }
    let sq: f64 = real
        .cells
        .iter()
        .zip(&synth.cells)
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    Ok((sq / nb).sqrt() / mean)
}

fn kl_to_mid(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (2.0 * p / (p + q)).log2()
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence with equal weights and base-2 logs.
pub fn jsd(real: &DistributionTable, synth: &DistributionTable) -> Result<f64> {
    check_layout(real, synth)?;
    let d: f64 = real
        .cells
        .iter()
        .zip(&synth.cells)
        .map(|(&p, &q)| 0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p))
        .sum();
    Ok(d.clamp(0.0, 1.0))
}

fn check_same(real: &RecordTable, synth: &RecordTable) -> Result<()> {
    let (a, b) = (real.schema(), synth.schema());
    if a.names() != b.names() || a.dims() != b.dims() {
        return Err(MetricsError::Mismatch(format!(
            "{:?} vs {:?}",
            a.names(),
            b.names()
        )));
    }
    Ok(())
}

fn need_attributes(t: &RecordTable, n: usize) -> Result<()> {
    if t.n_attributes() < n {
        return Err(MetricsError::TooFewAttributes {
            needed: n,
            found: t.n_attributes(),
        });
    }
    Ok(())
}

/// How the three order-averages are combined into the distance score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Mean over orders.
    #[default]
    OrderMean,
    /// Sum over orders.
    LiteralSum,
}

/// `1 - (agg(srmse) + agg(jsd)) / 2`, clamped to `[0, 1]`.
pub fn distance_score(srmse: &[f64; 3], jsd: &[f64; 3], mode: DistanceMode) -> f64 {
    let agg = |v: &[f64; 3]| {
        let s: f64 = v.iter().sum();
        match mode {
            DistanceMode::OrderMean => s / 3.0,
            DistanceMode::LiteralSum => s,
        }
    };
    (1.0 - 0.5 * (agg(srmse) + agg(jsd))).clamp(0.0, 1.0)
}

/// SRMSE and JSD averaged over all k-subsets of attributes, for k = 1, 2, 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub srmse: [f64; 3],
    pub jsd: [f64; 3],
    pub subsets: [usize; 3],
    pub score: f64,
}

pub fn distance_report(real: &RecordTable, synth: &RecordTable, mode: DistanceMode) -> Result<DistanceReport> {
    check_same(real, synth)?;
    need_attributes(real, 3)?;
    if real.is_empty() {
        return Err(MetricsError::Empty("real"));
    }
    if synth.is_empty() {
        return Err(MetricsError::Empty("synthetic"));
    }
    let n = real.n_attributes();
    let mut out_s = [0.0; 3];
    let mut out_j = [0.0; 3];
    let mut counts = [0; 3];
    for k in 1..=3 {
        let tuples: Vec<Vec<usize>> = (0..n).combinations(k).collect();
        let vals: Vec<(f64, f64)> = tuples
            .par_iter()
            .map(|cols| {
                let r = distribution_by_columns(real, cols);
                let s = distribution_by_columns(synth, cols);
                Ok((srmse(&r, &s)?, jsd(&r, &s)?))
            })
            .collect::<Result<_>>()?;
        let m = vals.len() as f64;
        out_s[k - 1] = vals.iter().map(|v| v.0).sum::<f64>() / m;
        out_j[k - 1] = vals.iter().map(|v| v.1).sum::<f64>() / m;
        counts[k - 1] = vals.len();
    }
    Ok(DistanceReport {
        score: distance_score(&out_s, &out_j, mode),
        srmse: out_s,
        jsd: out_j,
        subsets: counts,
    })
}

/// Cramér's V between two coded variables (`x[i] < nx`, `y[i] < ny`).
///
/// Levels that never occur are dropped before the degrees of freedom are
/// counted; with fewer than two observed levels on either side the
/// association is 0.
pub fn cramers_v(x: &[u32], nx: usize, y: &[u32], ny: usize) -> f64 {
    assert_eq!(x.len(), y.len(), "paired observations");
    let n = x.len();
    if n == 0 {
        return 0.0;
    }
    let mut counts = vec![0u64; nx * ny];
    let mut rows = vec![0u64; nx];
    let mut cols = vec![0u64; ny];
    for (&a, &b) in x.iter().zip(y) {
        counts[a as usize * ny + b as usize] += 1;
        rows[a as usize] += 1;
        cols[b as usize] += 1;
    }
    let r = rows.iter().filter(|&&c| c > 0).count();
    let c = cols.iter().filter(|&&c| c > 0).count();
    let dof = r.min(c);
    if dof < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let mut chi2 = 0.0;
    for (i, &ri) in rows.iter().enumerate() {
        if ri == 0 {
            continue;
        }
        for (j, &cj) in cols.iter().enumerate() {
            if cj == 0 {
                continue;
            }
            let e = ri as f64 * cj as f64 / nf;
            let o = counts[i * ny + j] as f64;
            chi2 += (o - e) * (o - e) / e;
        }
    }
    (chi2 / (nf * (dof - 1) as f64)).sqrt().min(1.0)
}

/// `|ln r - ln f| / |ln r|` with both values clamped away from 0 and 1.
pub fn log_relative_error(r: f64, f: f64) -> f64 {
    let clamp = |v: f64| v.clamp(ASSOC_FLOOR, 1.0 - ASSOC_FLOOR);
    let (lr, lf) = (clamp(r).ln(), clamp(f).ln());
    ((lr - lf) / lr).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationEntry {
    pub attribute: String,
    pub with: Vec<String>,
    pub real: f64,
    pub synth: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderAssociation {
    pub order: usize,
    pub entries: Vec<AssociationEntry>,
    /// Mean entry error.
    pub error: f64,
}

/// Order-k entries pair each attribute with the joint variable of each
/// k-subset of the other attributes; order 1 is the ordinary pairwise matrix
/// without its diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationReport {
    pub orders: Vec<OrderAssociation>,
}

impl AssociationReport {
    pub fn errors(&self) -> [f64; 3] {
        let mut e = [0.0; 3];
        for (o, v) in self.orders.iter().zip(e.iter_mut()) {
            *v = o.error;
        }
        e
    }
}

fn joint_codes(t: &RecordTable, cols: &[usize]) -> (Vec<u32>, usize) {
    let dims = t.schema().dims();
    let size: usize = cols.iter().map(|&j| dims[j]).product();
    let codes = t
        .rows()
        .map(|r| cols.iter().fold(0u32, |acc, &j| acc * dims[j] as u32 + r[j] as u32))
        .collect();
    (codes, size)
}

pub fn association_report(real: &RecordTable, synth: &RecordTable) -> Result<AssociationReport> {
    check_same(real, synth)?;
    need_attributes(real, 4)?;
    if real.is_empty() {
        return Err(MetricsError::Empty("real"));
    }
    if synth.is_empty() {
        return Err(MetricsError::Empty("synthetic"));
    }
    let n = real.n_attributes();
    let names = real.schema().names();
    let mut orders = Vec::with_capacity(3);
    for k in 1..=3 {
        let mut pairs = Vec::new();
        for i in 0..n {
            let rest: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            for s in rest.into_iter().combinations(k) {
                pairs.push((i, s));
            }
        }
        let entries: Vec<AssociationEntry> = pairs
            .par_iter()
            .map(|(i, s)| {
                let v = |t: &RecordTable| {
                    let (x, nx) = joint_codes(t, &[*i]);
                    let (y, ny) = joint_codes(t, s);
                    cramers_v(&x, nx, &y, ny)
                };
                let (r, f) = (v(real), v(synth));
                AssociationEntry {
                    attribute: names[*i].to_string(),
                    with: s.iter().map(|&j| names[j].to_string()).collect(),
                    real: r,
                    synth: f,
                    error: log_relative_error(r, f),
                }
            })
            .collect();
        let error = entries.iter().map(|e| e.error).sum::<f64>() / entries.len() as f64;
        orders.push(OrderAssociation {
            order: k,
            entries,
            error,
        });
    }
    Ok(AssociationReport { orders })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropensityConfig {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig {
            l2: 1.0,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

pub const PROPENSITY_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityResult {
    /// Predicted synthetic probability per combined row, real rows first.
    #[serde(skip)]
    pub probabilities: Vec<f64>,
    pub c: f64,
    pub raw: f64,
    /// `raw / (c (1 - c))`.
    pub normalized: f64,
    pub score: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Histograms of predicted probabilities over [0, 1] for real and
    /// synthetic rows.
    pub histogram_real: Vec<u64>,
    pub histogram_synth: Vec<u64>,
}

fn histogram(p: &[f64]) -> Vec<u64> {
    let mut h = vec![0u64; PROPENSITY_BINS];
    for &v in p {
        let b = ((v * PROPENSITY_BINS as f64) as usize).min(PROPENSITY_BINS - 1);
        h[b] += 1;
    }
    h
}

/// Propensity mean squared error of a logistic real-vs-synthetic classifier
/// on one-hot main effects.
pub fn propensity(real: &RecordTable, synth: &RecordTable, cfg: &PropensityConfig) -> Result<PropensityResult> {
    check_same(real, synth)?;
    if real.is_empty() {
        return Err(MetricsError::Empty("real"));
    }
    if synth.is_empty() {
        return Err(MetricsError::Empty("synthetic"));
    }
    let x = one_hot_features(real, None).concat(&one_hot_features(synth, None));
    let n_real = real.len();
    let y: Vec<bool> = (0..x.len()).map(|i| i >= n_real).collect();
    let model = Logistic::fit(&x, &y, cfg.l2, cfg.max_iter, cfg.tol);
    if !model.converged {
        log::warn!("propensity model stopped after {} iterations without converging", model.iterations);
    }
    let p: Vec<f64> = x.rows.iter().map(|r| model.predict_proba(r)).collect();
    let c = synth.len() as f64 / x.len() as f64;
    let raw = p.iter().map(|v| (v - c) * (v - c)).sum::<f64>() / p.len() as f64;
    let normalized = raw / (c * (1.0 - c));
    Ok(PropensityResult {
        histogram_real: histogram(&p[..n_real]),
        histogram_synth: histogram(&p[n_real..]),
        probabilities: p,
        c,
        raw,
        normalized,
        score: (1.0 - normalized).clamp(0.0, 1.0),
        converged: model.converged,
        iterations: model.iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub attribute: String,
    pub category: String,
    pub real: u64,
    pub synth: u64,
    /// `None` for categories absent from the real table.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
    pub n_cat: usize,
    pub scaling: f64,
    pub score: f64,
}

/// Per-category count ratio scaled by `N_real / N_synth` and clamped at 1,
/// averaged over every category the real table contains.
pub fn coverage(real: &RecordTable, synth: &RecordTable) -> Result<CoverageReport> {
    check_same(real, synth)?;
    if real.is_empty() {
        return Err(MetricsError::Empty("real"));
    }
    let scaling = if synth.is_empty() {
        0.0
    } else {
        real.len() as f64 / synth.len() as f64
    };
    let cr = crate::schema::category_counts(real);
    let cs = crate::schema::category_counts(synth);
    let mut rows = Vec::new();
    for (a, (r, s)) in real.schema().attributes().iter().zip(cr.iter().zip(&cs)) {
        for (label, (&nr, &ns)) in a.categories.iter().zip(r.iter().zip(s)) {
            rows.push(CoverageRow {
                attribute: a.name.clone(),
                category: label.clone(),
                real: nr,
                synth: ns,
                ratio: (nr > 0).then(|| (ns as f64 / nr as f64 * scaling).min(1.0)),
            });
        }
    }
    let included: Vec<f64> = rows.iter().filter_map(|r| r.ratio).collect();
    Ok(CoverageReport {
        n_cat: included.len(),
        score: included.iter().sum::<f64>() / included.len() as f64,
        rows,
        scaling,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlConfig {
    /// Share of the real table held out for testing.
    pub test_fraction: f64,
    pub learners: LearnerConfig,
}

impl Default for MlConfig {
    fn default() -> Self {
        MlConfig {
            test_fraction: 0.5,
            learners: LearnerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub target: String,
    pub acc_real: f64,
    pub acc_synth: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyResult {
    pub family: Family,
    pub targets: Vec<TargetResult>,
    /// Mean relative accuracy loss over targets.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlEfficacyReport {
    pub families: Vec<FamilyResult>,
    /// Targets with a single class in the real training half.
    pub skipped: Vec<String>,
    pub score: f64,
}

impl MlEfficacyReport {
    pub fn errors(&self) -> [f64; 4] {
        let mut e = [0.0; 4];
        for (f, v) in self.families.iter().zip(e.iter_mut()) {
            *v = f.error;
        }
        e
    }
}

/// `|acc_real - acc_synth| / acc_real`, 0 when both are 0.
pub fn relative_accuracy_loss(acc_real: f64, acc_synth: f64) -> f64 {
    if acc_real > 0.0 {
        (acc_real - acc_synth).abs() / acc_real
    } else if acc_synth > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Seeded split of the real table into training and test parts.
pub fn ml_split(real: &RecordTable, cfg: &MlConfig, seed: u64) -> (RecordTable, RecordTable) {
    let mut idx: Vec<usize> = (0..real.len()).collect();
    idx.shuffle(&mut seeded(seed, "ml-split"));
    let n_test = ((real.len() as f64 * cfg.test_fraction).round() as usize).clamp(1, real.len().max(2) - 1);
    let (test_idx, train_idx) = idx.split_at(n_test);
    (real.select_rows(train_idx), real.select_rows(test_idx))
}

/// Train-on-synthetic, test-on-real accuracy loss for every attribute as
/// target and each classifier family.
pub fn ml_efficacy(real: &RecordTable, synth: &RecordTable, cfg: &MlConfig, seed: u64) -> Result<MlEfficacyReport> {
    check_same(real, synth)?;
    need_attributes(real, 2)?;
    if real.len() < 2 {
        return Err(MetricsError::Empty("real"));
    }
    if synth.is_empty() {
        return Err(MetricsError::Empty("synthetic"));
    }
    let (train, test) = ml_split(real, cfg, seed);
    let names = real.schema().names();
    let mut skipped = Vec::new();
    let mut jobs = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let col = train.column(j);
        if col.iter().all(|&c| c == col[0]) {
            log::warn!("skipping target `{name}`: one class in the real training half");
            skipped.push(name.to_string());
            continue;
        }
        for f in Family::ALL {
            jobs.push((j, f));
        }
    }
    let results: Vec<(usize, Family, f64, f64)> = jobs
        .par_iter()
        .map(|&(j, f)| {
            let s = derive_seed(seed, &format!("ml/{}", names[j]));
            let xt = one_hot_features(&test, Some(j));
            let yt = test.column(j);
            let fit = |t: &RecordTable| {
                let p = fit_predict(f, &one_hot_features(t, Some(j)), &t.column(j), &xt, &cfg.learners, s);
                accuracy(&p, &yt)
            };
            (j, f, fit(&train), fit(synth))
        })
        .collect();
    let families: Vec<FamilyResult> = Family::ALL
        .iter()
        .map(|&f| {
            let targets: Vec<TargetResult> = results
                .iter()
                .filter(|r| r.1 == f)
                .map(|&(j, _, ar, asy)| TargetResult {
                    target: names[j].to_string(),
                    acc_real: ar,
                    acc_synth: asy,
                    error: relative_accuracy_loss(ar, asy),
                })
                .collect();
            let error = if targets.is_empty() {
                0.0
            } else {
                targets.iter().map(|t| t.error).sum::<f64>() / targets.len() as f64
            };
            FamilyResult {
                family: f,
                targets,
                error,
            }
        })
        .collect();
    let score = 1.0 - families.iter().map(|f| f.error).sum::<f64>() / families.len() as f64;
    Ok(MlEfficacyReport {
        families,
        skipped,
        score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZerosReport {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// Distinct generated combinations.
    pub generated: usize,
    pub generated_in_population: usize,
    pub generated_sampling_zeros: usize,
    /// Distinct generated combinations breaking a structural rule.
    pub generated_rule_violating: usize,
    /// Population combinations missing from the training support.
    pub sampling_zeros: usize,
    /// Set when nothing was generated; precision is then reported as 0.
    pub empty: bool,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Recall of sampling zeros and precision against the population support, over
/// distinct generated combinations `g`.
pub fn zeros_from_sets(g: &HashSet<ComboKey>, population: &HashSet<ComboKey>, train: &HashSet<ComboKey>) -> ZerosReport {
    let in_pop = g.iter().filter(|k| population.contains(k)).count();
    let novel = g
        .iter()
        .filter(|k| population.contains(k) && !train.contains(k))
        .count();
    let zeros = population.iter().filter(|k| !train.contains(k)).count();
    let precision = if g.is_empty() { 0.0 } else { in_pop as f64 / g.len() as f64 };
    let recall = if zeros == 0 { 0.0 } else { novel as f64 / zeros as f64 };
    ZerosReport {
        recall,
        precision,
        f1: f1(precision, recall),
        generated: g.len(),
        generated_in_population: in_pop,
        generated_sampling_zeros: novel,
        generated_rule_violating: 0,
        sampling_zeros: zeros,
        empty: g.is_empty(),
    }
}

/// Attributes of `synth` are matched to the population schema by name.
pub fn zeros_metrics(
    synth: &RecordTable,
    train_support: &HashSet<ComboKey>,
    pop: &GroundTruthPopulation,
) -> Result<ZerosReport> {
    if synth.n_attributes() != pop.schema().len() {
        return Err(MetricsError::Mismatch(
            "synthetic table is not on the population's joint schema".into(),
        ));
    }
    let g = synth.project(pop.schema())?.distinct_keys();
    let mut report = zeros_from_sets(&g, &pop.support, train_support);
    let schema = pop.schema();
    report.generated_rule_violating = g
        .iter()
        .filter(|&&k| !pop.spec().is_feasible(&schema.decode_key(k)))
        .count();
    Ok(report)
}

/// Mean of the five sub-scores.
pub fn final_score(components: &[f64; 5]) -> Result<f64> {
    const NAMES: [&str; 5] = ["s_distance", "s_corr", "s_pmse", "s_cr", "s_ml"];
    for (name, &v) in NAMES.iter().zip(components) {
        if !(0.0..=1.0).contains(&v) {
            return Err(MetricsError::OutOfRange {
                name: name.to_string(),
                value: v,
            });
        }
    }
    Ok(components.iter().sum::<f64>() / 5.0)
}

/// Per-view component errors that the sub-scores are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewComponents {
    pub srmse: [f64; 3],
    pub jsd: [f64; 3],
    /// Association log-relative error per order.
    pub corr: [f64; 3],
    /// Normalised pMSE.
    pub pmse: f64,
    /// Accuracy loss per family, in [`Family::ALL`] order.
    pub ml: [f64; 4],
}

impl ViewComponents {
    pub fn mean(views: &[ViewComponents]) -> ViewComponents {
        let n = views.len() as f64;
        let avg3 = |f: &dyn Fn(&ViewComponents) -> [f64; 3]| {
            let mut o = [0.0; 3];
            for v in views {
                for (a, b) in o.iter_mut().zip(f(v)) {
                    *a += b / n;
                }
            }
            o
        };
        let mut ml = [0.0; 4];
        for v in views {
            for (a, b) in ml.iter_mut().zip(v.ml) {
                *a += b / n;
            }
        }
        ViewComponents {
            srmse: avg3(&|v| v.srmse),
            jsd: avg3(&|v| v.jsd),
            corr: avg3(&|v| v.corr),
            pmse: views.iter().map(|v| v.pmse).sum::<f64>() / n,
            ml,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubScores {
    pub s_distance: f64,
    pub s_corr: f64,
    pub s_pmse: f64,
    pub s_cr: f64,
    pub s_ml: f64,
    pub final_score: f64,
}

impl SubScores {
    pub fn zero() -> SubScores {
        SubScores {
            s_distance: 0.0,
            s_corr: 0.0,
            s_pmse: 0.0,
            s_cr: 0.0,
            s_ml: 0.0,
            final_score: 0.0,
        }
    }
}

/// Combines per-view component errors and a coverage score into the five
/// sub-scores and their mean. Each sub-score is clamped to `[0, 1]`.
pub fn aggregate(views: &[ViewComponents], s_cr: f64, mode: DistanceMode) -> Result<SubScores> {
    if views.is_empty() {
        return Err(MetricsError::Empty("component"));
    }
    let m = ViewComponents::mean(views);
    let unit = |v: f64| v.clamp(0.0, 1.0);
    let s_distance = distance_score(&m.srmse, &m.jsd, mode);
    let s_corr = unit(1.0 - m.corr.iter().sum::<f64>() / 3.0);
    let s_pmse = unit(1.0 - m.pmse);
    let s_ml = unit(1.0 - m.ml.iter().sum::<f64>() / 4.0);
    let s_cr = unit(s_cr);
    Ok(SubScores {
        final_score: final_score(&[s_distance, s_corr, s_pmse, s_cr, s_ml])?,
        s_distance,
        s_corr,
        s_pmse,
        s_cr,
        s_ml,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub seed: u64,
    pub distance_mode: DistanceMode,
    pub propensity: PropensityConfig,
    pub ml: MlConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            seed: 0,
            distance_mode: DistanceMode::OrderMean,
            propensity: PropensityConfig::default(),
            ml: MlConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEvaluation {
    pub view: String,
    pub n_real: usize,
    pub n_synth: usize,
    pub distance: DistanceReport,
    pub association: AssociationReport,
    pub propensity: PropensityResult,
    pub coverage: CoverageReport,
    pub ml: MlEfficacyReport,
    pub components: ViewComponents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub views: Vec<ViewEvaluation>,
    /// Components averaged over views.
    pub averaged: Option<ViewComponents>,
    pub scores: SubScores,
    pub zeros: Option<ZerosReport>,
    /// Degenerate inputs noticed during scoring.
    pub flags: Vec<String>,
    pub provenance: BTreeMap<String, String>,
}

impl EvaluationReport {
    pub fn is_degenerate(&self) -> bool {
        !self.flags.is_empty()
    }
}

/// Membership oracle inputs for the zeros metrics.
pub struct ZerosInput<'a> {
    pub train_support: &'a HashSet<ComboKey>,
    pub population: &'a GroundTruthPopulation,
}

pub fn evaluate_view(real: &RecordTable, synth: &RecordTable, cfg: &MetricsConfig) -> Result<ViewEvaluation> {
    let synth = synth.project(real.schema())?;
    let view = real.schema().view().to_string();
    let distance = distance_report(real, &synth, cfg.distance_mode)?;
    let association = association_report(real, &synth)?;
    let propensity = propensity(real, &synth, &cfg.propensity)?;
    let coverage = coverage(real, &synth)?;
    let ml = ml_efficacy(real, &synth, &cfg.ml, derive_seed(cfg.seed, &view))?;
    let components = ViewComponents {
        srmse: distance.srmse,
        jsd: distance.jsd,
        corr: association.errors(),
        pmse: propensity.normalized,
        ml: ml.errors(),
    };
    Ok(ViewEvaluation {
        view,
        n_real: real.len(),
        n_synth: synth.len(),
        distance,
        association,
        propensity,
        coverage,
        ml,
        components,
    })
}

/// Scores a synthetic joint table against each real view and, when given, the
/// population oracle. An empty synthetic table yields zero scores and a flag.
pub fn evaluate(
    real_views: &[&RecordTable],
    synth: &RecordTable,
    zeros: Option<ZerosInput<'_>>,
    cfg: &MetricsConfig,
) -> Result<EvaluationReport> {
    let zeros = zeros
        .map(|z| zeros_metrics(synth, z.train_support, z.population))
        .transpose()?;
    if synth.is_empty() {
        return Ok(EvaluationReport {
            views: Vec::new(),
            averaged: None,
            scores: SubScores::zero(),
            zeros,
            flags: vec!["empty synthetic table".into()],
            provenance: BTreeMap::new(),
        });
    }
    let views = real_views
        .iter()
        .map(|r| evaluate_view(r, synth, cfg))
        .collect::<Result<Vec<_>>>()?;
    let comps: Vec<ViewComponents> = views.iter().map(|v| v.components.clone()).collect();
    let s_cr = views.iter().map(|v| v.coverage.score).sum::<f64>() / views.len() as f64;
    let mut flags = Vec::new();
    for v in &views {
        for t in &v.ml.skipped {
            flags.push(format!("{}: ml target `{t}` skipped", v.view));
        }
    }
    Ok(EvaluationReport {
        scores: aggregate(&comps, s_cr, cfg.distance_mode)?,
        averaged: Some(ViewComponents::mean(&comps)),
        views,
        zeros,
        flags,
        provenance: BTreeMap::new(),
    })
}
