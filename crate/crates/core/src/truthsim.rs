//! Ground-truth population simulator and membership oracle.
//!
//! A [`GroundTruthSpec`] describes target marginals, multiplicative conditional
//! tilts ("couplings") and structural rules. [`build_population`] samples a
//! population attribute by attribute in the spec's sampling order:
//!
//! * categories that would complete a forbidden combination are excluded for
//!   the record at hand (a record left with no admissible category is rejected
//!   and replaced);
//! * base weights are re-calibrated against the realised parent configurations
//!   so every marginal lands on its target;
//! * within each group of records sharing the same weight vector, categories
//!   are allocated by systematic sampling, which keeps the sampling noise of
//!   the marginals at the rounding level.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::seeded;
use crate::schema::{
    AttributeSpec, ComboKey, DatasetSchema, RecordTable, Role, SchemaError, View,
};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid ground-truth spec: {0}")]
    InvalidSpec(String),
    #[error(
        "spec is infeasible: {rejected} of {generated} records in the last window violated the rules"
    )]
    Infeasible { generated: usize, rejected: usize },
    #[error("requested {requested} individuals but the population has {available}")]
    NotEnoughIndividuals { requested: usize, available: usize },
    #[error("record does not conform to the joint schema: {0}")]
    RecordMismatch(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

/// `attribute ∈ categories`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Literal {
    pub attribute: String,
    pub categories: Vec<String>,
}

/// A forbidden conjunction: any record satisfying every literal is infeasible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralRule {
    pub id: String,
    pub forbidden: Vec<Literal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tilt {
    /// One label per `given` attribute.
    pub when: Vec<String>,
    /// One strictly positive multiplier per category of the tilted attribute.
    pub weights: Vec<f64>,
}

/// Multiplicative conditional weights for `attribute` given earlier-sampled
/// attributes. Parent configurations without a tilt entry get weight 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub attribute: String,
    #[serde(default)]
    pub given: Vec<String>,
    #[serde(default)]
    pub tilt: Vec<Tilt>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AttributeEntry {
    name: String,
    role: Role,
    categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    marginals: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    percent: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpecFile {
    population_size: usize,
    attribute: Vec<AttributeEntry>,
    #[serde(default)]
    coupling: Vec<Coupling>,
    #[serde(default)]
    rule: Vec<StructuralRule>,
}

#[derive(Debug, Clone)]
struct CompiledCoupling {
    child: usize,
    parents: Vec<usize>,
    parent_dims: Vec<usize>,
    /// Indexed by mixed-radix parent configuration.
    table: Vec<Option<Vec<f64>>>,
}

impl CompiledCoupling {
    fn config(&self, values: &[u16]) -> u32 {
        self.parents
            .iter()
            .zip(&self.parent_dims)
            .fold(0u32, |acc, (&p, &d)| acc * d as u32 + values[p] as u32)
    }
}

#[derive(Debug, Clone)]
struct CompiledRule {
    /// `(attribute, forbidden-category mask)`.
    literals: Vec<(usize, Vec<bool>)>,
    /// The literal attribute sampled last; the rule is enforced there.
    pivot: usize,
}

impl CompiledRule {
    fn matches(&self, row: &[u16]) -> bool {
        self.literals.iter().all(|(a, mask)| mask[row[*a] as usize])
    }
}

/// Marginal targets, couplings and structural rules of a ground-truth
/// population.
#[derive(Debug, Clone)]
pub struct GroundTruthSpec {
    schema: DatasetSchema,
    /// Per schema attribute.
    marginals: Vec<Vec<f64>>,
    couplings: Vec<Coupling>,
    rules: Vec<StructuralRule>,
    population_size: usize,
    /// Schema indices in sampling order.
    sampling_order: Vec<usize>,
    compiled_couplings: Vec<CompiledCoupling>,
    compiled_rules: Vec<CompiledRule>,
}

const MARGINAL_SUM_TOL: f64 = 1e-6;
const PERCENT_SUM_TOL: f64 = 1.0;

/// Converts published percentages to probabilities, spreading the rounding
/// residual `100 - sum` evenly over the categories.
pub fn percent_to_marginals(percent: &[f64]) -> Vec<f64> {
    let residual = (100.0 - percent.iter().sum::<f64>()) / percent.len() as f64;
    percent.iter().map(|p| (p + residual) / 100.0).collect()
}

impl GroundTruthSpec {
    /// Builds a spec. Attributes are sampled in the order given.
    pub fn new(
        attributes: Vec<(AttributeSpec, Vec<f64>)>,
        couplings: Vec<Coupling>,
        rules: Vec<StructuralRule>,
        population_size: usize,
    ) -> Result<Self> {
        let order_names: Vec<String> = attributes.iter().map(|(a, _)| a.name.clone()).collect();
        let schema = DatasetSchema::new(
            attributes.iter().map(|(a, _)| a.clone()).collect(),
            View::Joint,
        )?;
        let mut marginals = vec![Vec::new(); schema.len()];
        for (a, m) in attributes {
            let j = schema.index_of(&a.name).expect("attribute is in schema");
            marginals[j] = m;
        }
        let sampling_order = order_names
            .iter()
            .map(|n| schema.index_of(n).expect("attribute is in schema"))
            .collect();
        let mut spec = GroundTruthSpec {
            schema,
            marginals,
            couplings,
            rules,
            population_size,
            sampling_order,
            compiled_couplings: Vec::new(),
            compiled_rules: Vec::new(),
        };
        spec.validate_and_compile()?;
        Ok(spec)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SpecFile =
            toml::from_str(text).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        let mut attributes = Vec::with_capacity(file.attribute.len());
        for e in file.attribute {
            let m = match (e.marginals, e.percent) {
                (Some(m), None) => m,
                (None, Some(p)) => {
                    let sum: f64 = p.iter().sum();
                    if (sum - 100.0).abs() > PERCENT_SUM_TOL {
                        return Err(SimError::InvalidSpec(format!(
                            "percentages of `{}` sum to {sum}",
                            e.name
                        )));
                    }
                    percent_to_marginals(&p)
                }
                _ => {
                    return Err(SimError::InvalidSpec(format!(
                        "attribute `{}` needs exactly one of `marginals` or `percent`",
                        e.name
                    )))
                }
            };
            attributes.push((
                AttributeSpec {
                    name: e.name,
                    role: e.role,
                    categories: e.categories,
                },
                m,
            ));
        }
        GroundTruthSpec::new(attributes, file.coupling, file.rule, file.population_size)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            SimError::InvalidSpec(message) => SimError::File {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    /// The shipped default: fourteen attributes calibrated to the published
    /// proportions, with three child-specific structural rules.
    pub fn default_calibrated() -> Self {
        Self::from_toml_str(DEFAULT_SPEC_TOML).expect("bundled spec is valid")
    }

    /// Serializes with explicit `marginals` (probabilities).
    pub fn to_toml_string(&self) -> String {
        let file = SpecFile {
            population_size: self.population_size,
            attribute: self
                .sampling_order
                .iter()
                .map(|&j| {
                    let a = &self.schema.attributes()[j];
                    AttributeEntry {
                        name: a.name.clone(),
                        role: a.role,
                        categories: a.categories.clone(),
                        marginals: Some(self.marginals[j].clone()),
                        percent: None,
                    }
                })
                .collect(),
            coupling: self.couplings.clone(),
            rule: self.rules.clone(),
        };
        toml::to_string(&file).expect("spec serializes")
    }

    pub fn with_population_size(mut self, n: usize) -> Self {
        self.population_size = n;
        self
    }

    pub fn with_rules(mut self, rules: Vec<StructuralRule>) -> Result<Self> {
        self.rules = rules;
        self.validate_and_compile()?;
        Ok(self)
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn population_size(&self) -> usize {
        self.population_size
    }

    pub fn marginals(&self) -> &[Vec<f64>] {
        &self.marginals
    }

    pub fn marginal(&self, attribute: &str) -> Option<&[f64]> {
        self.schema
            .index_of(attribute)
            .map(|j| self.marginals[j].as_slice())
    }

    pub fn rules(&self) -> &[StructuralRule] {
        &self.rules
    }

    pub fn couplings(&self) -> &[Coupling] {
        &self.couplings
    }

    /// Ids of the rules matched by a joint-schema row.
    pub fn violated_rules(&self, row: &[u16]) -> Vec<&str> {
        self.compiled_rules
            .iter()
            .zip(&self.rules)
            .filter(|(c, _)| c.matches(row))
            .map(|(_, r)| r.id.as_str())
            .collect()
    }

    pub fn is_feasible(&self, row: &[u16]) -> bool {
        !self.compiled_rules.iter().any(|c| c.matches(row))
    }

    fn invalid(msg: impl Into<String>) -> SimError {
        SimError::InvalidSpec(msg.into())
    }

    fn validate_and_compile(&mut self) -> Result<()> {
        let schema = &self.schema;
        for (a, m) in schema.attributes().iter().zip(&self.marginals) {
            if m.len() != a.dim() {
                return Err(Self::invalid(format!(
                    "`{}` has {} categories but {} marginals",
                    a.name,
                    a.dim(),
                    m.len()
                )));
            }
            if m.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Self::invalid(format!(
                    "`{}` has a negative or non-finite marginal",
                    a.name
                )));
            }
            let sum: f64 = m.iter().sum();
            if (sum - 1.0).abs() > MARGINAL_SUM_TOL {
                return Err(Self::invalid(format!(
                    "marginals of `{}` sum to {sum}",
                    a.name
                )));
            }
        }
        let position: Vec<usize> = {
            let mut p = vec![0; schema.len()];
            for (t, &j) in self.sampling_order.iter().enumerate() {
                p[j] = t;
            }
            p
        };
        let lookup = |name: &str| {
            schema
                .index_of(name)
                .ok_or_else(|| Self::invalid(format!("unknown attribute `{name}`")))
        };

        let mut compiled_couplings = Vec::with_capacity(self.couplings.len());
        for c in &self.couplings {
            let child = lookup(&c.attribute)?;
            let child_dim = schema.attributes()[child].dim();
            let mut parents = Vec::with_capacity(c.given.len());
            for g in &c.given {
                let p = lookup(g)?;
                if position[p] >= position[child] {
                    return Err(Self::invalid(format!(
                        "coupling of `{}` is given `{g}`, which is not sampled earlier",
                        c.attribute
                    )));
                }
                if parents.contains(&p) {
                    return Err(Self::invalid(format!("`{g}` listed twice in a coupling")));
                }
                parents.push(p);
            }
            let parent_dims: Vec<usize> = parents
                .iter()
                .map(|&p| schema.attributes()[p].dim())
                .collect();
            let n_configs: usize = parent_dims.iter().product();
            let mut table = vec![None; n_configs];
            for t in &c.tilt {
                if t.when.len() != parents.len() {
                    return Err(Self::invalid(format!(
                        "tilt on `{}` names {} parent labels, expected {}",
                        c.attribute,
                        t.when.len(),
                        parents.len()
                    )));
                }
                if t.weights.len() != child_dim {
                    return Err(Self::invalid(format!(
                        "tilt on `{}` has {} weights, expected {child_dim}",
                        c.attribute,
                        t.weights.len()
                    )));
                }
                if t.weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
                    return Err(Self::invalid(format!(
                        "tilt weights on `{}` must be strictly positive",
                        c.attribute
                    )));
                }
                let mut cfg = 0usize;
                for ((&p, &d), label) in parents.iter().zip(&parent_dims).zip(&t.when) {
                    let k = schema.attributes()[p].category_index(label).ok_or_else(|| {
                        Self::invalid(format!(
                            "`{label}` is not a category of `{}`",
                            schema.attributes()[p].name
                        ))
                    })?;
                    cfg = cfg * d + k;
                }
                if table[cfg].is_some() {
                    return Err(Self::invalid(format!(
                        "duplicate tilt entry on `{}`",
                        c.attribute
                    )));
                }
                table[cfg] = Some(t.weights.clone());
            }
            compiled_couplings.push(CompiledCoupling {
                child,
                parents,
                parent_dims,
                table,
            });
        }

        let mut compiled_rules = Vec::with_capacity(self.rules.len());
        for r in &self.rules {
            if r.forbidden.is_empty() {
                return Err(Self::invalid(format!("rule `{}` has no literals", r.id)));
            }
            let mut literals: Vec<(usize, Vec<bool>)> = Vec::new();
            for l in &r.forbidden {
                let a = lookup(&l.attribute)?;
                if literals.iter().any(|(x, _)| *x == a) {
                    return Err(Self::invalid(format!(
                        "rule `{}` constrains `{}` twice",
                        r.id, l.attribute
                    )));
                }
                let spec = &schema.attributes()[a];
                let mut mask = vec![false; spec.dim()];
                if l.categories.is_empty() {
                    return Err(Self::invalid(format!("rule `{}` has an empty literal", r.id)));
                }
                for c in &l.categories {
                    let k = spec.category_index(c).ok_or_else(|| {
                        Self::invalid(format!("`{c}` is not a category of `{}`", spec.name))
                    })?;
                    mask[k] = true;
                }
                literals.push((a, mask));
            }
            let pivot = literals
                .iter()
                .map(|(a, _)| *a)
                .max_by_key(|&a| position[a])
                .expect("non-empty");
            compiled_rules.push(CompiledRule { literals, pivot });
        }

        if !rules_satisfiable(schema, &self.marginals, &compiled_rules) {
            return Err(Self::invalid(
                "no record with positive-probability categories satisfies all rules",
            ));
        }
        self.compiled_couplings = compiled_couplings;
        self.compiled_rules = compiled_rules;
        Ok(())
    }
}

/// Backtracking search for one feasible record over the attributes the rules
/// mention; all other attributes are unconstrained.
fn rules_satisfiable(
    schema: &DatasetSchema,
    marginals: &[Vec<f64>],
    rules: &[CompiledRule],
) -> bool {
    let mut involved: Vec<usize> = rules
        .iter()
        .flat_map(|r| r.literals.iter().map(|(a, _)| *a))
        .collect();
    involved.sort_unstable();
    involved.dedup();
    let mut row = vec![0u16; schema.len()];
    let mut assigned = vec![false; schema.len()];

    fn violates_partial(rules: &[CompiledRule], row: &[u16], assigned: &[bool]) -> bool {
        rules.iter().any(|r| {
            r.literals
                .iter()
                .all(|(a, mask)| assigned[*a] && mask[row[*a] as usize])
        })
    }

    fn search(
        depth: usize,
        involved: &[usize],
        marginals: &[Vec<f64>],
        rules: &[CompiledRule],
        row: &mut Vec<u16>,
        assigned: &mut Vec<bool>,
    ) -> bool {
        let Some(&a) = involved.get(depth) else {
            return true;
        };
        for (k, &p) in marginals[a].iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            row[a] = k as u16;
            assigned[a] = true;
            if !violates_partial(rules, row, assigned)
                && search(depth + 1, involved, marginals, rules, row, assigned)
            {
                return true;
            }
            assigned[a] = false;
        }
        false
    }

    search(0, &involved, marginals, rules, &mut row, &mut assigned)
}

/// Shipped default spec text.
pub const DEFAULT_SPEC_TOML: &str = include_str!("../data/ground_truth.toml");

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub generated: usize,
    pub rejected: usize,
    pub rounds: usize,
}

#[derive(Debug, Clone)]
pub struct GroundTruthPopulation {
    pub records: RecordTable,
    pub support: HashSet<ComboKey>,
    pub seed: u64,
    pub stats: BuildStats,
    spec: GroundTruthSpec,
}

impl GroundTruthPopulation {
    /// Rebuilds a population from stored records; the support is recomputed.
    pub fn from_records(spec: GroundTruthSpec, records: RecordTable, seed: u64) -> Result<Self> {
        if !records.schema().same_attributes(spec.schema()) {
            return Err(SimError::RecordMismatch(
                "records do not use the spec's joint schema".into(),
            ));
        }
        Ok(GroundTruthPopulation {
            support: records.distinct_keys(),
            stats: BuildStats {
                generated: records.len(),
                ..BuildStats::default()
            },
            records,
            seed,
            spec,
        })
    }

    pub fn spec(&self) -> &GroundTruthSpec {
        &self.spec
    }

    pub fn schema(&self) -> &DatasetSchema {
        self.records.schema()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Support keys in ascending order.
    pub fn sorted_support(&self) -> Vec<ComboKey> {
        let mut v: Vec<ComboKey> = self.support.iter().copied().collect();
        v.sort_unstable();
        v
    }

    /// Membership of a joint-schema record relative to the population support
    /// and a training support.
    pub fn classify_record(
        &self,
        train_support: &HashSet<ComboKey>,
        record: &[u16],
    ) -> Result<Membership> {
        let schema = self.schema();
        if record.len() != schema.len() {
            return Err(SimError::RecordMismatch(format!(
                "expected {} attributes, got {}",
                schema.len(),
                record.len()
            )));
        }
        for (a, &c) in schema.attributes().iter().zip(record) {
            if c as usize >= a.dim() {
                return Err(SimError::RecordMismatch(format!(
                    "category index {c} out of range for `{}`",
                    a.name
                )));
            }
        }
        let key = schema.combo_key(record);
        let class = if train_support.contains(&key) {
            MembershipClass::InTraining
        } else if self.support.contains(&key) {
            MembershipClass::SamplingZero
        } else {
            MembershipClass::OutOfPopulation
        };
        Ok(Membership {
            class,
            rule_violating: !self.spec.is_feasible(record),
        })
    }

    /// Checks a record from a table with its own (attribute-identical) schema.
    pub fn classify_table_row(
        &self,
        train_support: &HashSet<ComboKey>,
        table: &RecordTable,
        i: usize,
    ) -> Result<Membership> {
        if !table.schema().same_attributes(self.schema()) {
            return Err(SimError::RecordMismatch(
                "table schema differs from the population's joint schema".into(),
            ));
        }
        self.classify_record(train_support, table.row(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MembershipClass {
    InTraining,
    SamplingZero,
    OutOfPopulation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Membership {
    pub class: MembershipClass,
    pub rule_violating: bool,
}

/// Rounds whose rejection share exceeds this (over at least
/// [`REJECTION_WINDOW_MIN`] draws) abort the build.
pub const MAX_REJECTION_RATE: f64 = 0.99;
pub const REJECTION_WINDOW_MIN: usize = 100;
const MAX_ROUNDS: usize = 200;

pub fn build_population(spec: &GroundTruthSpec, seed: u64) -> Result<GroundTruthPopulation> {
    let mut rng = seeded(seed, "ground-truth");
    let n = spec.population_size;
    let mut records = RecordTable::new(spec.schema.clone());
    let mut stats = BuildStats::default();
    // window accumulates rounds until it holds enough draws to judge
    let mut window = (0usize, 0usize);
    while records.len() < n {
        let need = n - records.len();
        let (rows, rejected) = sample_round(spec, need, &mut rng);
        stats.generated += need;
        stats.rejected += rejected;
        stats.rounds += 1;
        window.0 += need;
        window.1 += rejected;
        if window.0 >= REJECTION_WINDOW_MIN {
            if window.1 as f64 > MAX_REJECTION_RATE * window.0 as f64 {
                return Err(SimError::Infeasible {
                    generated: window.0,
                    rejected: window.1,
                });
            }
            window = (0, 0);
        }
        if stats.rounds > MAX_ROUNDS {
            return Err(SimError::Infeasible {
                generated: stats.generated,
                rejected: stats.rejected,
            });
        }
        for r in rows.chunks_exact(spec.schema.len().max(1)) {
            records.push_unchecked(r);
        }
    }
    let support = records.distinct_keys();
    Ok(GroundTruthPopulation {
        records,
        support,
        seed,
        stats,
        spec: spec.clone(),
    })
}

/// Samples `need` candidate records; returns the surviving rows (flattened,
/// schema order) and the number rejected.
fn sample_round(
    spec: &GroundTruthSpec,
    need: usize,
    rng: &mut impl Rng,
) -> (Vec<u16>, usize) {
    let n_attr = spec.schema.len();
    let dims = spec.schema.dims();
    let mut rows = vec![0u16; need * n_attr];
    let mut alive = vec![true; need];

    for &attr in &spec.sampling_order {
        let dim = dims[attr];
        let target = &spec.marginals[attr];
        let couplings: Vec<&CompiledCoupling> = spec
            .compiled_couplings
            .iter()
            .filter(|c| c.child == attr)
            .collect();
        let rules: Vec<&CompiledRule> = spec
            .compiled_rules
            .iter()
            .filter(|r| r.pivot == attr)
            .collect();

        // group records by everything that shapes their weight vector
        let mut groups: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
        let mut key = Vec::with_capacity(couplings.len() + rules.len());
        for i in (0..need).filter(|&i| alive[i]) {
            let row = &rows[i * n_attr..(i + 1) * n_attr];
            key.clear();
            key.extend(couplings.iter().map(|c| c.config(row)));
            key.extend(rules.iter().map(|r| {
                let fires = r
                    .literals
                    .iter()
                    .filter(|(a, _)| *a != attr)
                    .all(|(a, mask)| mask[row[*a] as usize]);
                fires as u32
            }));
            groups.entry(key.clone()).or_default().push(i);
        }

        let mut live: Vec<(Vec<usize>, Vec<f64>)> = Vec::with_capacity(groups.len());
        for (key, members) in groups {
            let mut w = vec![1.0; dim];
            for (c, &cfg) in couplings.iter().zip(&key) {
                if let Some(t) = &c.table[cfg as usize] {
                    for (x, y) in w.iter_mut().zip(t) {
                        *x *= y;
                    }
                }
            }
            for (r, &fires) in rules.iter().zip(&key[couplings.len()..]) {
                if fires == 1 {
                    let mask = &r.literals.iter().find(|(a, _)| *a == attr).unwrap().1;
                    for (x, &m) in w.iter_mut().zip(mask) {
                        if m {
                            *x = 0.0;
                        }
                    }
                }
            }
            let reachable: f64 = w.iter().zip(target).map(|(a, b)| a * b).sum();
            if reachable > 0.0 {
                live.push((members, w));
            } else {
                for i in members {
                    alive[i] = false;
                }
            }
        }

        let base = calibrate_base(
            &live
                .iter()
                .map(|(m, w)| (m.len() as f64, w.as_slice()))
                .collect::<Vec<_>>(),
            target,
        );

        for (mut members, w) in live {
            let mut p: Vec<f64> = w.iter().zip(&base).map(|(a, b)| a * b).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            members.shuffle(rng);
            let m = members.len() as f64;
            let u0: f64 = rng.gen();
            let mut k = 0usize;
            let mut cum = p[0];
            for (t, &i) in members.iter().enumerate() {
                let u = (t as f64 + u0) / m;
                while u >= cum && k + 1 < dim {
                    k += 1;
                    cum += p[k];
                }
                rows[i * n_attr + attr] = k as u16;
            }
        }
    }

    let rejected = alive.iter().filter(|&&a| !a).count();
    let mut out = Vec::with_capacity((need - rejected) * n_attr);
    for (i, &a) in alive.iter().enumerate() {
        if a {
            out.extend_from_slice(&rows[i * n_attr..(i + 1) * n_attr]);
        }
    }
    (out, rejected)
}

/// Raking fixed point: finds base weights `b` such that
/// `Σ_g n_g · normalize(w_g ⊙ b) = N · target`.
fn calibrate_base(groups: &[(f64, &[f64])], target: &[f64]) -> Vec<f64> {
    let total: f64 = groups.iter().map(|(n, _)| n).sum();
    let mut base = target.to_vec();
    if total == 0.0 {
        return base;
    }
    let mut expected = vec![0.0; target.len()];
    for _ in 0..5000 {
        expected.iter_mut().for_each(|e| *e = 0.0);
        for (n, w) in groups {
            let s: f64 = w.iter().zip(&base).map(|(a, b)| a * b).sum();
            if s > 0.0 {
                for ((e, a), b) in expected.iter_mut().zip(*w).zip(&base) {
                    *e += n * a * b / s;
                }
            }
        }
        let mut worst = 0.0f64;
        for ((b, e), t) in base.iter_mut().zip(&expected).zip(target) {
            let share = e / total;
            worst = worst.max((share - t).abs());
            if share > 0.0 {
                *b *= t / share;
            }
        }
        if worst < 1e-12 {
            break;
        }
    }
    base
}

/// The two disjoint training views drawn from a population.
#[derive(Debug, Clone)]
pub struct SplitViews {
    pub a: RecordTable,
    pub b: RecordTable,
    pub ids_a: Vec<usize>,
    pub ids_b: Vec<usize>,
}

impl SplitViews {
    /// Full joint combinations of every individual drawn into either view.
    pub fn train_support(&self, pop: &GroundTruthPopulation) -> HashSet<ComboKey> {
        self.ids_a
            .iter()
            .chain(&self.ids_b)
            .map(|&i| pop.records.key(i))
            .collect()
    }

    /// Joint records of the training individuals (view A's, then view B's).
    pub fn joint_records(&self, pop: &GroundTruthPopulation) -> RecordTable {
        let ids: Vec<usize> = self.ids_a.iter().chain(&self.ids_b).copied().collect();
        pop.records.select_rows(&ids)
    }
}

pub fn split_views(
    pop: &GroundTruthPopulation,
    n_a: usize,
    n_b: usize,
    seed: u64,
) -> Result<SplitViews> {
    let n = pop.len();
    if n_a + n_b > n {
        return Err(SimError::NotEnoughIndividuals {
            requested: n_a + n_b,
            available: n,
        });
    }
    let mut rng = seeded(seed, "split-views");
    let mut ids: Vec<usize> = (0..n).collect();
    let (picked, _) = ids.partial_shuffle(&mut rng, n_a + n_b);
    let ids_a = picked[..n_a].to_vec();
    let ids_b = picked[n_a..].to_vec();
    let joint = pop.schema();
    let a = pop
        .records
        .select_rows(&ids_a)
        .project(&joint.project_view(View::SourceA)?)?;
    let b = pop
        .records
        .select_rows(&ids_b)
        .project(&joint.project_view(View::SourceB)?)?;
    Ok(SplitViews { a, b, ids_a, ids_b })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRow {
    pub attribute: String,
    pub category: String,
    pub target: f64,
    pub empirical: f64,
}

/// Target vs empirical share of every category.
pub fn marginal_report(pop: &GroundTruthPopulation) -> Vec<MarginalRow> {
    let counts = crate::schema::category_counts(&pop.records);
    let n = pop.len().max(1) as f64;
    let mut out = Vec::new();
    for ((a, c), t) in pop
        .schema()
        .attributes()
        .iter()
        .zip(&counts)
        .zip(pop.spec.marginals())
    {
        for (k, label) in a.categories.iter().enumerate() {
            out.push(MarginalRow {
                attribute: a.name.clone(),
                category: label.clone(),
                target: t[k],
                empirical: c[k] as f64 / n,
            });
        }
    }
    out
}
