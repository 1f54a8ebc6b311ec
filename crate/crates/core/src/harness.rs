//! Experiment orchestration: ground truth, view split, training of every
//! variant over replicate seeds, synthesis, scoring and the run manifest.
//!
//! Each `cmd_*` function is one pipeline stage with file inputs and outputs,
//! so a stage can be re-run on its own. [`cmd_run`] chains them.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::{evaluate, EvaluationReport, MetricsConfig, MetricsError, ZerosInput};
use crate::nets::{ModelParams, NetError};
use crate::rng::derive_seed;
use crate::schema::{
    kway_distribution, load_table, write_table, ComboKey, DatasetSchema, DecodeMode, RecordTable, SchemaError,
};
use crate::trainer::{align_views, fuse_views, synthesize, train_with_hook, TrainConfig, TrainError, TrainingLog, Variant};
use crate::truthsim::{
    build_population, marginal_report, split_views, GroundTruthPopulation, GroundTruthSpec, SimError,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("digest mismatch for {0}")]
    Digest(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io(path))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io(path))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e))?;
    write(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| parse_err(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub const POPULATION_CSV: &str = "population.csv";
pub const POPULATION_META: &str = "population.json";
pub const SPEC_TOML: &str = "spec.toml";
pub const SUPPORT_TXT: &str = "support.txt";
pub const MARGINALS_JSON: &str = "marginals.json";
pub const VIEW_A_CSV: &str = "view_a.csv";
pub const VIEW_B_CSV: &str = "view_b.csv";
pub const TRAIN_SUPPORT_TXT: &str = "train_support.txt";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const TRAINING_LOG_CSV: &str = "training_log.csv";
pub const TRAIN_TOML: &str = "train.toml";
pub const FUSED_CSV: &str = "fused.csv";
pub const SYNTHETIC_CSV: &str = "synthetic.csv";
pub const REPORT_JSON: &str = "report.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

/// Writes combination keys, one decimal per line, ascending.
pub fn write_support(path: &Path, keys: &HashSet<ComboKey>) -> Result<()> {
    let mut v: Vec<u128> = keys.iter().map(|k| k.0).collect();
    v.sort_unstable();
    let mut s = String::with_capacity(v.len() * 12);
    for k in v {
        writeln!(s, "{k}").expect("string write");
    }
    write(path, &s)
}

pub fn read_support(path: &Path) -> Result<HashSet<ComboKey>> {
    read(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse::<u128>().map(ComboKey).map_err(|e| parse_err(path, e)))
        .collect()
}

/// Schema file stored next to a table: `view_a.csv` → `view_a.schema.toml`.
pub fn schema_path(table: &Path) -> PathBuf {
    table.with_extension("schema.toml")
}

pub fn save_table(path: &Path, table: &RecordTable) -> Result<()> {
    write_table(path, table)?;
    write(&schema_path(path), &table.schema().to_toml_string())
}

pub fn load_table_with_schema(path: &Path) -> Result<RecordTable> {
    let schema = DatasetSchema::from_toml_file(&schema_path(path))?;
    Ok(load_table(path, &schema)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationMeta {
    pub seed: u64,
    pub size: usize,
    pub support: usize,
    pub generated: usize,
    pub rejected: usize,
    pub rounds: usize,
}

/// Files written by [`cmd_simulate`].
#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub population: GroundTruthPopulation,
    pub files: Vec<PathBuf>,
}

fn load_spec(spec: Option<&Path>) -> Result<GroundTruthSpec> {
    match spec {
        Some(p) => Ok(GroundTruthSpec::from_file(p)?),
        None => Ok(GroundTruthSpec::default_calibrated()),
    }
}

/// Builds a ground-truth population and writes it with its support and a
/// marginal report. Nothing is written unless the build succeeds.
pub fn cmd_simulate(spec: Option<&Path>, size: Option<usize>, seed: u64, out: &Path) -> Result<SimulateOutput> {
    let mut spec = load_spec(spec)?;
    if let Some(n) = size {
        spec = spec.with_population_size(n);
    }
    let pop = build_population(&spec, seed)?;
    mkdir(out)?;
    let files = write_population(&pop, out)?;
    log::info!(
        "population of {} records, {} distinct combinations",
        pop.len(),
        pop.support.len()
    );
    Ok(SimulateOutput {
        population: pop,
        files,
    })
}

fn write_population(pop: &GroundTruthPopulation, out: &Path) -> Result<Vec<PathBuf>> {
    let files: Vec<PathBuf> = [POPULATION_CSV, SPEC_TOML, SUPPORT_TXT, MARGINALS_JSON, POPULATION_META]
        .iter()
        .map(|f| out.join(f))
        .collect();
    write_table(&files[0], &pop.records)?;
    write(&files[1], &pop.spec().to_toml_string())?;
    write_support(&files[2], &pop.support)?;
    write_json(&files[3], &marginal_report(pop))?;
    write_json(
        &files[4],
        &PopulationMeta {
            seed: pop.seed,
            size: pop.len(),
            support: pop.support.len(),
            generated: pop.stats.generated,
            rejected: pop.stats.rejected,
            rounds: pop.stats.rounds,
        },
    )?;
    Ok(files)
}

/// Reads a directory written by [`cmd_simulate`].
pub fn load_population(dir: &Path) -> Result<GroundTruthPopulation> {
    let spec = GroundTruthSpec::from_file(&dir.join(SPEC_TOML))?;
    let records = load_table(&dir.join(POPULATION_CSV), spec.schema())?;
    let meta: PopulationMeta = read_json(&dir.join(POPULATION_META))?;
    Ok(GroundTruthPopulation::from_records(spec, records, meta.seed)?)
}

/// Draws the two disjoint training views and writes them with their schemas
/// and the training support.
pub fn cmd_split(population: &Path, n_a: usize, n_b: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let pop = load_population(population)?;
    split_and_write(&pop, n_a, n_b, seed, out)
}

fn split_and_write(pop: &GroundTruthPopulation, n_a: usize, n_b: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let views = split_views(pop, n_a, n_b, seed)?;
    mkdir(out)?;
    let (pa, pb, ps) = (out.join(VIEW_A_CSV), out.join(VIEW_B_CSV), out.join(TRAIN_SUPPORT_TXT));
    save_table(&pa, &views.a)?;
    save_table(&pb, &views.b)?;
    write_support(&ps, &views.train_support(pop))?;
    Ok(vec![schema_path(&pa), pa, schema_path(&pb), pb, ps])
}

/// Trains one variant on two view files. Writes the final checkpoint, the loss
/// log, the effective config, periodic checkpoints when configured, and the
/// fused table for the simple baseline.
pub fn cmd_train(view_a: &Path, view_b: &Path, cfg: &TrainConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let a = load_table_with_schema(view_a)?;
    let b = load_table_with_schema(view_b)?;
    train_cell(&a, &b, cfg, out)
}

fn train_cell(a: &RecordTable, b: &RecordTable, cfg: &TrainConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    mkdir(out)?;
    let mut files = Vec::new();
    let cfg_path = out.join(TRAIN_TOML);
    write(
        &cfg_path,
        &toml::to_string(cfg).map_err(|e| parse_err(&cfg_path, e))?,
    )?;
    files.push(cfg_path);
    if cfg.variant == Variant::Simple {
        let fused = fuse_views(&align_views(a, b)?, derive_seed(cfg.seed, "fusion"))?;
        let p = out.join(FUSED_CSV);
        save_table(&p, &fused)?;
        files.push(schema_path(&p));
        files.push(p);
    }
    let mut periodic = Vec::new();
    let (model, log) = train_with_hook(a, b, cfg, |epoch, m| {
        let p = out.join(format!("checkpoint_e{epoch}.json"));
        m.save(&p)?;
        periodic.push(p);
        Ok(())
    })?;
    files.extend(periodic);
    let ck = out.join(CHECKPOINT_JSON);
    model.save(&ck)?;
    let lg = out.join(TRAINING_LOG_CSV);
    log.write_csv(&lg)?;
    files.push(ck);
    files.push(lg);
    Ok(files)
}

/// Samples `n` joint records from a checkpoint.
pub fn cmd_synthesize(checkpoint: &Path, n: usize, seed: u64, mode: DecodeMode, out: &Path) -> Result<Vec<PathBuf>> {
    let model: ModelParams<f32> = ModelParams::load(checkpoint)?;
    let table = synthesize(&model, n, seed, mode)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    save_table(out, &table)?;
    Ok(vec![schema_path(out), out.to_path_buf()])
}

/// Inputs of a standalone evaluation.
#[derive(Debug, Clone)]
pub struct EvaluateInputs {
    pub view_a: PathBuf,
    pub view_b: PathBuf,
    pub synthetic: PathBuf,
    /// Directory written by [`cmd_simulate`]; enables the zeros metrics
    /// together with `train_support`.
    pub population: Option<PathBuf>,
    pub train_support: Option<PathBuf>,
}

/// Scores a synthetic table file. The synthetic file is read with the joint
/// schema of the two views, so only its header has to match.
pub fn cmd_evaluate(inputs: &EvaluateInputs, cfg: &MetricsConfig, out: &Path) -> Result<EvaluationReport> {
    let a = load_table_with_schema(&inputs.view_a)?;
    let b = load_table_with_schema(&inputs.view_b)?;
    let views = align_views(&a, &b)?;
    let synth = load_table(&inputs.synthetic, &views.joint)?;
    let pop = inputs.population.as_deref().map(load_population).transpose()?;
    let support = inputs.train_support.as_deref().map(read_support).transpose()?;
    let zeros = match (&pop, &support) {
        (Some(p), Some(s)) => Some(ZerosInput {
            train_support: s,
            population: p,
        }),
        (None, None) => None,
        _ => {
            return Err(HarnessError::Config(
                "population and train support must be given together".into(),
            ))
        }
    };
    let mut report = evaluate(&[&views.a, &views.b], &synth, zeros, cfg)?;
    report
        .provenance
        .insert("synthetic".into(), inputs.synthetic.display().to_string());
    report
        .provenance
        .insert("synthetic_sha256".into(), sha256_file(&inputs.synthetic)?);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    write_json(out, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSettings {
    /// Ground-truth spec file; the shipped spec when unset.
    pub spec: Option<PathBuf>,
    pub size: Option<usize>,
    pub seed: u64,
}

impl Default for PopulationSettings {
    fn default() -> Self {
        PopulationSettings {
            spec: None,
            size: Some(50_000),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewSettings {
    pub n_a: usize,
    pub n_b: usize,
    pub seed: u64,
}

impl Default for ViewSettings {
    fn default() -> Self {
        ViewSettings {
            n_a: 5000,
            n_b: 5000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeSetting {
    #[default]
    Argmax,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    /// Synthetic records per cell; the larger view size when unset.
    pub synth_count: Option<usize>,
    pub decode: DecodeSetting,
    pub metrics: MetricsConfig,
}

/// One experiment: population, views, per-variant training settings,
/// evaluation settings and replicate seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub replicates: Vec<u64>,
    pub variants: Vec<Variant>,
    pub plots: bool,
    pub population: PopulationSettings,
    pub views: ViewSettings,
    /// Training keys shared by every variant.
    pub train: toml::Table,
    /// Per-variant keys layered over `train`.
    pub train_override: BTreeMap<Variant, toml::Table>,
    pub evaluation: EvaluationSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut train = toml::Table::new();
        train.insert("epoch".into(), toml::Value::Integer(500));
        ExperimentConfig {
            out_dir: PathBuf::from("runs/desk"),
            replicates: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
            plots: true,
            population: PopulationSettings::default(),
            views: ViewSettings::default(),
            train,
            train_override: BTreeMap::new(),
            evaluation: EvaluationSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths in it are taken relative to the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&read(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        if let Some(s) = cfg.population.spec.as_mut() {
            if s.is_relative() {
                *s = base.join(&*s);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.replicates.is_empty() {
            return bad("at least one replicate seed is required".into());
        }
        let distinct: HashSet<u64> = self.replicates.iter().copied().collect();
        if distinct.len() != self.replicates.len() {
            return bad(format!("replicate seeds repeat: {:?}", self.replicates));
        }
        if self.variants.is_empty() {
            return bad("at least one variant is required".into());
        }
        let vs: HashSet<Variant> = self.variants.iter().copied().collect();
        if vs.len() != self.variants.len() {
            return bad("variants repeat".into());
        }
        if let Some(p) = &self.population.spec {
            if !p.is_file() {
                return bad(format!("spec file {} does not exist", p.display()));
            }
        }
        if self.views.n_a == 0 || self.views.n_b == 0 {
            return bad("view sizes must be positive".into());
        }
        for v in &self.variants {
            self.train_config(*v, self.replicates[0])?;
        }
        Ok(())
    }

    /// Training settings of one cell: shared keys, then the variant's
    /// overrides, then the variant and replicate seed.
    pub fn train_config(&self, variant: Variant, seed: u64) -> Result<TrainConfig> {
        let mut table = self.train.clone();
        if let Some(o) = self.train_override.get(&variant) {
            for (k, v) in o {
                table.insert(k.clone(), v.clone());
            }
        }
        for key in ["variant", "seed"] {
            if table.contains_key(key) {
                return Err(HarnessError::Config(format!(
                    "`{key}` is set per cell and may not appear in [train]"
                )));
            }
        }
        let mut cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.variant = variant;
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_count(&self) -> usize {
        self.evaluation
            .synth_count
            .unwrap_or(self.views.n_a.max(self.views.n_b))
    }

    pub fn decode_mode(&self, seed: u64) -> DecodeMode {
        match self.evaluation.decode {
            DecodeSetting::Argmax => DecodeMode::Argmax,
            DecodeSetting::Sample => DecodeMode::Sample {
                seed: derive_seed(seed, "decode"),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory, with `/` separators.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub variant: Variant,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub artifacts: Vec<Artifact>,
    pub failures: Vec<CellFailure>,
    pub versions: BTreeMap<String, String>,
    pub started: u64,
    pub finished: u64,
}

impl RunManifest {
    /// Paths whose content no longer matches the recorded digest.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        self.artifacts
            .iter()
            .filter(|a| sha256_file(&dir.join(&a.path)).ok().as_deref() != Some(a.sha256.as_str()))
            .map(|a| a.path.clone())
            .collect()
    }
}

pub fn cell_name(variant: Variant, seed: u64) -> String {
    format!("{variant}_seed{seed}")
}

/// One row of the cross-variant summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    /// Replicate seed, or `mean`.
    pub seed: String,
    pub s_distance: f64,
    pub s_corr: f64,
    pub s_pmse: f64,
    pub s_cr: f64,
    pub s_ml: f64,
    pub final_score: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl SummaryRow {
    fn from_report(variant: Variant, seed: u64, r: &EvaluationReport) -> SummaryRow {
        let z = r.zeros.as_ref();
        SummaryRow {
            variant: variant.to_string(),
            seed: seed.to_string(),
            s_distance: r.scores.s_distance,
            s_corr: r.scores.s_corr,
            s_pmse: r.scores.s_pmse,
            s_cr: r.scores.s_cr,
            s_ml: r.scores.s_ml,
            final_score: r.scores.final_score,
            recall: z.map_or(0.0, |z| z.recall),
            precision: z.map_or(0.0, |z| z.precision),
            f1: z.map_or(0.0, |z| z.f1),
        }
    }

    fn values(&self) -> [f64; 9] {
        [
            self.s_distance,
            self.s_corr,
            self.s_pmse,
            self.s_cr,
            self.s_ml,
            self.final_score,
            self.recall,
            self.precision,
            self.f1,
        ]
    }

    fn mean(variant: &str, rows: &[&SummaryRow]) -> SummaryRow {
        let n = rows.len() as f64;
        let mut m = [0.0; 9];
        for r in rows {
            for (a, b) in m.iter_mut().zip(r.values()) {
                *a += b / n;
            }
        }
        SummaryRow {
            variant: variant.to_string(),
            seed: "mean".into(),
            s_distance: m[0],
            s_corr: m[1],
            s_pmse: m[2],
            s_cr: m[3],
            s_ml: m[4],
            final_score: m[5],
            recall: m[6],
            precision: m[7],
            f1: m[8],
        }
    }
}

const SUMMARY_HEADER: &str = "variant,seed,s_distance,s_corr,s_pmse,s_cr,s_ml,final_score,recall,precision,f1";

/// Summary rows per (variant, seed) in config order, each variant followed
/// by its mean row.
pub fn summary_rows(cells: &[(Variant, u64, EvaluationReport)], variants: &[Variant]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &v in variants {
        let rows: Vec<SummaryRow> = cells
            .iter()
            .filter(|c| c.0 == v)
            .map(|(_, s, r)| SummaryRow::from_report(v, *s, r))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let refs: Vec<&SummaryRow> = rows.iter().collect();
        let mean = SummaryRow::mean(&v.to_string(), &refs);
        out.extend(rows);
        out.push(mean);
    }
    out
}

/// Fixed six-decimal rendering, so reruns compare byte for byte.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        write!(s, "{},{}", r.variant, r.seed).expect("string write");
        for v in r.values() {
            write!(s, ",{v:.6}").expect("string write");
        }
        s.push('\n');
    }
    s
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| parse_err(path, e)))
        .collect()
}

struct CellOutcome {
    variant: Variant,
    seed: u64,
    files: Vec<PathBuf>,
    result: Result<EvaluationReport>,
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    pop: &GroundTruthPopulation,
    a: &RecordTable,
    b: &RecordTable,
    support: &HashSet<ComboKey>,
    dir: &Path,
) -> CellOutcome {
    let mut files = Vec::new();
    let result = (|| {
        let tc = cfg.train_config(variant, seed)?;
        log::info!("training {} ({} epochs)", cell_name(variant, seed), tc.epoch);
        files.extend(train_cell(a, b, &tc, dir)?);
        let model: ModelParams<f32> = ModelParams::load(&dir.join(CHECKPOINT_JSON))?;
        let synth = synthesize(&model, cfg.synth_count(), derive_seed(seed, "synthesis"), cfg.decode_mode(seed))?;
        let sp = dir.join(SYNTHETIC_CSV);
        save_table(&sp, &synth)?;
        files.push(schema_path(&sp));
        files.push(sp.clone());
        let views = align_views(a, b)?;
        let zeros = ZerosInput {
            train_support: support,
            population: pop,
        };
        let mut report = evaluate(&[&views.a, &views.b], &synth, Some(zeros), &cfg.evaluation.metrics)?;
        report.provenance.insert("variant".into(), variant.to_string());
        report.provenance.insert("seed".into(), seed.to_string());
        report.provenance.insert(
            "train_config".into(),
            toml::to_string(&tc).map_err(|e| HarnessError::Config(e.to_string()))?,
        );
        report.provenance.insert("synthetic_sha256".into(), sha256_file(&sp)?);
        let rp = dir.join(REPORT_JSON);
        write_json(&rp, &report)?;
        files.push(rp);
        if cfg.plots {
            let log = TrainingLog::read_csv(&dir.join(TRAINING_LOG_CSV))?;
            files.extend(write_plots(dir, &log, &views.a, &views.b, &synth, &report)?);
        }
        Ok(report)
    })();
    if let Err(e) = &result {
        log::error!("{} failed: {e}", cell_name(variant, seed));
    }
    CellOutcome {
        variant,
        seed,
        files,
        result,
    }
}

fn relative(dir: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(dir).unwrap_or(p);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Runs the whole experiment: simulate, split, then train, synthesize and
/// evaluate every (variant, replicate) cell in parallel. A failing cell is
/// recorded in the manifest and the others still run.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let started = unix_now();
    let out = &cfg.out_dir;
    let sim = cmd_simulate(
        cfg.population.spec.as_deref(),
        cfg.population.size,
        cfg.population.seed,
        &out.join("population"),
    )?;
    let pop = sim.population;
    let mut files = sim.files;
    let views_dir = out.join("views");
    files.extend(split_and_write(&pop, cfg.views.n_a, cfg.views.n_b, cfg.views.seed, &views_dir)?);
    let a = load_table_with_schema(&views_dir.join(VIEW_A_CSV))?;
    let b = load_table_with_schema(&views_dir.join(VIEW_B_CSV))?;
    let support = read_support(&views_dir.join(TRAIN_SUPPORT_TXT))?;
    let cells: Vec<(Variant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| cfg.replicates.iter().map(move |&s| (v, s)))
        .collect();
    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .map(|&(v, s)| {
            let dir = out.join("cells").join(cell_name(v, s));
            run_cell(cfg, v, s, &pop, &a, &b, &support, &dir)
        })
        .collect();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        files.extend(o.files);
        match o.result {
            Ok(r) => reports.push((o.variant, o.seed, r)),
            Err(e) => failures.push(CellFailure {
                variant: o.variant,
                seed: o.seed,
                error: e.to_string(),
            }),
        }
    }
    let sp = out.join(SUMMARY_CSV);
    write(&sp, &summary_csv(&summary_rows(&reports, &cfg.variants)))?;
    files.push(sp);
    let cfg_path = out.join("experiment.toml");
    write(&cfg_path, &cfg.to_toml_string())?;
    files.push(cfg_path);
    let artifacts = files
        .iter()
        .map(|p| {
            Ok(Artifact {
                path: relative(out, p),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut versions = BTreeMap::new();
    versions.insert("popsynth".into(), env!("CARGO_PKG_VERSION").into());
    let manifest = RunManifest {
        config: cfg.to_toml_string(),
        seeds: cfg.replicates.clone(),
        variants: cfg.variants.clone(),
        artifacts,
        failures,
        versions,
        started,
        finished: unix_now(),
    };
    write_json(&out.join(MANIFEST_JSON), &manifest)?;
    Ok(manifest)
}

/// Re-verifies a finished run and rebuilds its summary from the stored
/// reports.
pub fn cmd_report(run_dir: &Path) -> Result<Vec<SummaryRow>> {
    let manifest: RunManifest = read_json(&run_dir.join(MANIFEST_JSON))?;
    if let Some(p) = manifest.verify(run_dir).into_iter().next() {
        return Err(HarnessError::Digest(p));
    }
    let mut reports = Vec::new();
    for &v in &manifest.variants {
        for &s in &manifest.seeds {
            let p = run_dir.join("cells").join(cell_name(v, s)).join(REPORT_JSON);
            if p.is_file() {
                reports.push((v, s, read_json::<EvaluationReport>(&p)?));
            }
        }
    }
    let rows = summary_rows(&reports, &manifest.variants);
    write(&run_dir.join(SUMMARY_CSV), &summary_csv(&rows))?;
    Ok(rows)
}

const PLOT_W: f64 = 720.0;
const PLOT_H: f64 = 300.0;
const PAD: f64 = 40.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"20\" font-size=\"13\">{}</text>\n",
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of named series.
pub fn svg_lines(title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).collect();
    let mut s = svg_open(title);
    if pts.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0).max(1e-12) * (PLOT_W - 2.0 * PAD);
    let sy = |y: f64| PLOT_H - PAD - (y - y0) / (y1 - y0).max(1e-12) * (PLOT_H - 2.0 * PAD);
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    for (i, (name, p)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let d: Vec<String> = p.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" points=\"{}\"/>", d.join(" ")).expect("write");
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>",
            PLOT_W - PAD - 140.0,
            PAD + 14.0 * i as f64,
            escape(name)
        )
        .expect("write");
    }
    writeln!(
        s,
        "<text x=\"4\" y=\"{:.1}\">{y1:.3}</text><text x=\"4\" y=\"{:.1}\">{y0:.3}</text>",
        sy(y1) + 4.0,
        sy(y0)
    )
    .expect("write");
    s.push_str("</svg>\n");
    s
}

/// Paired bars (real, synthetic) per labelled slot.
pub fn svg_bars(title: &str, labels: &[String], real: &[f64], synth: &[f64]) -> String {
    let mut s = svg_open(title);
    let n = labels.len().max(1) as f64;
    let top = real.iter().chain(synth).cloned().fold(0.0, f64::max).max(1e-12);
    let slot = (PLOT_W - 2.0 * PAD) / n;
    let h = |v: f64| v / top * (PLOT_H - 2.0 * PAD);
    for (i, (r, f)) in real.iter().zip(synth).enumerate() {
        let x = PAD + slot * i as f64;
        for (k, (v, c)) in [(r, "#1f77b4"), (f, "#ff7f0e")].into_iter().enumerate() {
            writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{c}\"><title>{}</title></rect>",
                x + slot * 0.45 * k as f64,
                PLOT_H - PAD - h(*v),
                slot * 0.45,
                h(*v),
                escape(&labels[i])
            )
            .expect("write");
        }
    }
    writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" fill=\"#1f77b4\">real</text><text x=\"{}\" y=\"{}\" fill=\"#ff7f0e\">synthetic</text>",
        PLOT_W - PAD - 140.0,
        PAD,
        PLOT_W - PAD - 140.0,
        PAD + 14.0
    )
    .expect("write");
    s.push_str("</svg>\n");
    s
}

fn marginal_bars(real: &RecordTable, synth: &RecordTable) -> Result<(Vec<String>, Vec<f64>, Vec<f64>)> {
    let synth = synth.project(real.schema())?;
    let mut labels = Vec::new();
    let (mut r, mut f) = (Vec::new(), Vec::new());
    for a in real.schema().attributes() {
        let dr = kway_distribution(real, &[&a.name])?;
        let ds = kway_distribution(&synth, &[&a.name])?;
        for (i, c) in a.categories.iter().enumerate() {
            labels.push(format!("{}: {c}", a.name));
            r.push(dr.cells[i]);
            f.push(ds.cells[i]);
        }
    }
    Ok((labels, r, f))
}

fn write_plots(
    dir: &Path,
    log: &TrainingLog,
    a: &RecordTable,
    b: &RecordTable,
    synth: &RecordTable,
    report: &EvaluationReport,
) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut series: Vec<(&str, Vec<(f64, f64)>)> = vec![
        ("critic A", log.rows.iter().map(|r| (r.epoch as f64, r.critic_a_loss)).collect()),
        (
            "generator",
            log.rows
                .iter()
                .filter_map(|r| r.generator_loss.map(|g| (r.epoch as f64, g)))
                .collect(),
        ),
    ];
    if log.rows.iter().any(|r| r.critic_b_loss.is_some()) {
        series.push((
            "critic B",
            log.rows
                .iter()
                .filter_map(|r| r.critic_b_loss.map(|v| (r.epoch as f64, v)))
                .collect(),
        ));
    }
    let p = dir.join("losses.svg");
    write(&p, &svg_lines("training losses", &series))?;
    files.push(p);
    for (name, real) in [("a", a), ("b", b)] {
        let (labels, r, f) = marginal_bars(real, synth)?;
        let p = dir.join(format!("marginals_{name}.svg"));
        write(&p, &svg_bars(&format!("marginals, view {name}"), &labels, &r, &f))?;
        files.push(p);
    }
    for v in &report.views {
        let bins = v.propensity.histogram_real.len();
        let labels: Vec<String> = (0..bins).map(|i| format!("{:.2}", i as f64 / bins as f64)).collect();
        let norm = |h: &[u64]| {
            let t = h.iter().sum::<u64>().max(1) as f64;
            h.iter().map(|&c| c as f64 / t).collect::<Vec<_>>()
        };
        let p = dir.join(format!("propensity_{}.svg", v.view));
        write(
            &p,
            &svg_bars(
                &format!("propensity, {}", v.view),
                &labels,
                &norm(&v.propensity.histogram_real),
                &norm(&v.propensity.histogram_synth),
            ),
        )?;
        files.push(p);
    }
    Ok(files)
}

/// Short text description of a population.
pub fn describe_population(pop: &GroundTruthPopulation) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{} records, {} distinct combinations, {} rejected draws",
        pop.len(),
        pop.support.len(),
        pop.stats.rejected
    )
    .expect("write");
    let worst = marginal_report(pop)
        .iter()
        .map(|r| (r.empirical - r.target).abs())
        .fold(0.0, f64::max);
    writeln!(s, "largest marginal gap {:.4} percentage points", worst * 100.0).expect("write");
    s
}
