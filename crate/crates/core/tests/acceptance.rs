//! Acceptance checks, one line per criterion.
//!
//! `ACCEPTANCE_ONLY=C1,C3` restricts the run to the listed criteria.
//! `ACCEPTANCE_DESK_RUN=<dir>` keeps the desk-scale run (C5, C6) in `<dir>` and
//! reuses it when a finished manifest is already there.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use itertools::Itertools;
use ndarray::Array2;
use rand::Rng;

use popsynth::autodiff::Tape;
use popsynth::harness::{
    cell_name, cmd_run, load_table_with_schema, read_summary, ExperimentConfig, RunManifest, MANIFEST_JSON,
    SUMMARY_CSV, SYNTHETIC_CSV, TRAINING_LOG_CSV, VIEW_A_CSV, VIEW_B_CSV,
};
use popsynth::metrics::{aggregate, coverage, jsd, srmse, zeros_metrics, DistanceMode, ViewComponents};
use popsynth::nets::{Critic, CriticArch, Generator, GeneratorArch, Mode};
use popsynth::rng::seeded;
use popsynth::schema::{kway_distribution, AttributeSpec, DatasetSchema, RecordTable, Role, View};
use popsynth::trainer::{gradient_penalty_var, igp_term, igp_var, random_pairs, Variant};
use popsynth::truthsim::{
    build_population, GroundTruthPopulation, GroundTruthSpec, Literal, StructuralRule,
};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Warn,
    Fail,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Warn => "WARN",
            Status::Fail => "FAIL",
        })
    }
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Outcome {
        Outcome {
            status: if ok { Status::Pass } else { Status::Fail },
            detail,
        }
    }

    fn fail(detail: impl Into<String>) -> Outcome {
        Outcome {
            status: Status::Fail,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|t| t.trim().to_uppercase()).collect());
    let criteria: [(&str, &str, Check); 7] = [
        ("C1", "aggregation of published components", c1_aggregation),
        ("C2", "metric oracle equivalence", c2_oracles),
        ("C3", "gradient correctness", c3_gradients),
        ("C4", "simulator structural zeros and marginals", c4_simulator),
        ("C5", "desk-scale training viability", c5_training),
        ("C6", "directional recall/precision trend", c6_trend),
        ("C7", "end-to-end determinism", c7_determinism),
    ];
    let mut failed = false;
    for (id, name, check) in criteria {
        if let Some(o) = &only {
            if !o.iter().any(|x| x == id) {
                println!("{id} SKIP {name}");
                continue;
            }
        }
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::fail(format!("panicked: {msg}"))
        });
        println!(
            "{id} {} {name} [{:.1}s]: {}",
            out.status,
            t.elapsed().as_secs_f64(),
            out.detail
        );
        failed |= out.status == Status::Fail;
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

// C1 ----------------------------------------------------------------------

fn comps(srmse: [f64; 3], jsd: [f64; 3], corr: [f64; 3], pmse: f64, ml: [f64; 4]) -> ViewComponents {
    ViewComponents {
        srmse,
        jsd,
        corr,
        pmse,
        ml,
    }
}

fn c1_aggregation() -> Outcome {
    let within = |v: f64, t: f64, tol: f64| (v - t).abs() <= tol;
    let mut ok = true;
    let mut parts = Vec::new();

    let igp = [
        comps([0.09, 0.18, 0.28], [0.007, 0.021, 0.040], [0.036, 0.042, 0.061], 0.12, [0.086, 0.076, 0.072, 0.087]),
        comps([0.12, 0.27, 0.43], [0.014, 0.049, 0.083], [0.05, 0.063, 0.072], 0.162, [0.032, 0.144, 0.096, 0.047]),
    ];
    let s = match aggregate(&igp, 0.83, DistanceMode::OrderMean) {
        Ok(s) => s,
        Err(e) => return Outcome::fail(e.to_string()),
    };
    for (name, v, t, tol) in [
        ("S_distance", s.s_distance, 0.867, 0.005),
        ("S_corr", s.s_corr, 0.946, 0.002),
        ("S_pmse", s.s_pmse, 0.859, 0.005),
        ("S_ml", s.s_ml, 0.920, 0.005),
        ("final", s.final_score, 0.884, 0.01),
    ] {
        ok &= within(v, t, tol);
        parts.push(format!("igp {name} {v:.4} (target {t}±{tol})"));
    }
    parts.push(format!("igp final vs printed 0.881: {:+.4}", s.final_score - 0.881));

    let joint = [
        comps([0.097, 0.248, 0.401], [0.016, 0.04, 0.075], [0.055, 0.058, 0.063], 0.152, [0.078, 0.1, 0.091, 0.085]),
        comps([0.124, 0.247, 0.362], [0.013, 0.039, 0.079], [0.056, 0.07, 0.105], 0.166, [0.114, 0.253, 0.202, 0.12]),
    ];
    let simple = [
        comps([0.112, 0.267, 0.42], [0.019, 0.042, 0.081], [0.052, 0.061, 0.069], 0.168, [0.096, 0.145, 0.18, 0.098]),
        comps([0.132, 0.332, 0.392], [0.017, 0.052, 0.088], [0.058, 0.082, 0.099], 0.186, [0.198, 0.37, 0.269, 0.18]),
    ];
    for (name, rows, s_cr, target) in [("joint", &joint, 0.807, 0.869), ("simple", &simple, 0.818, 0.846)] {
        match aggregate(rows, s_cr, DistanceMode::OrderMean) {
            Ok(s) => {
                ok &= within(s.final_score, target, 0.01);
                parts.push(format!(
                    "{name} final {:.4} (target {target}±0.01; dist {:.3} corr {:.3} pmse {:.3} ml {:.3})",
                    s.final_score, s.s_distance, s.s_corr, s.s_pmse, s.s_ml
                ));
            }
            Err(e) => return Outcome::fail(e.to_string()),
        }
    }
    Outcome::check(ok, parts.join("; "))
}

// C2 ----------------------------------------------------------------------

const ORACLE_TOL: f64 = 1e-9;

fn random_rows(rng: &mut impl Rng, dims: &[usize], n: usize) -> Vec<Vec<u16>> {
    // Skewed per-attribute weights so that empty cells are common.
    let weights: Vec<Vec<f64>> = dims
        .iter()
        .map(|&d| (0..d).map(|_| rng.gen::<f64>().powi(3)).collect())
        .collect();
    (0..n)
        .map(|_| {
            weights
                .iter()
                .map(|w| {
                    let total: f64 = w.iter().sum();
                    let mut u = rng.gen::<f64>() * total;
                    let mut c = 0;
                    while c + 1 < w.len() && u >= w[c] {
                        u -= w[c];
                        c += 1;
                    }
                    c as u16
                })
                .collect()
        })
        .collect()
}

fn oracle_kway(rows: &[Vec<u16>], cols: &[usize], dims: &[usize]) -> Vec<f64> {
    let n = rows.len() as f64;
    cols.iter()
        .map(|&c| 0..dims[c] as u16)
        .multi_cartesian_product()
        .map(|cell| {
            rows.iter()
                .filter(|r| cols.iter().zip(&cell).all(|(&c, &v)| r[c] == v))
                .count() as f64
                / n
        })
        .collect()
}

fn oracle_srmse(p: &[f64], q: &[f64]) -> f64 {
    let nb = p.len() as f64;
    let mean = p.iter().sum::<f64>() / nb;
    let mse = p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / nb;
    mse.sqrt() / mean
}

fn oracle_jsd(p: &[f64], q: &[f64]) -> f64 {
    let mut d = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            d += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            d += 0.5 * b * (b / m).log2();
        }
    }
    d
}

fn oracle_coverage(real: &[Vec<u16>], synth: &[Vec<u16>], dims: &[usize]) -> f64 {
    let scale = real.len() as f64 / synth.len() as f64;
    let mut ratios = Vec::new();
    for (j, &d) in dims.iter().enumerate() {
        for c in 0..d as u16 {
            let nr = real.iter().filter(|r| r[j] == c).count();
            let ns = synth.iter().filter(|r| r[j] == c).count();
            if nr > 0 {
                ratios.push((ns as f64 / nr as f64 * scale).min(1.0));
            }
        }
    }
    ratios.iter().sum::<f64>() / ratios.len() as f64
}

struct OracleZeros {
    recall: f64,
    precision: f64,
    generated: usize,
    in_population: usize,
    novel: usize,
    zeros: usize,
    violating: usize,
}

fn oracle_zeros(
    synth: &[Vec<u16>],
    population: &[Vec<u16>],
    train: &[Vec<u16>],
    forbidden: &[(usize, u16)],
) -> OracleZeros {
    let g: BTreeSet<&Vec<u16>> = synth.iter().collect();
    let pop: BTreeSet<&Vec<u16>> = population.iter().collect();
    let tr: BTreeSet<&Vec<u16>> = train.iter().collect();
    let in_population = g.iter().filter(|r| pop.contains(*r)).count();
    let novel = g.iter().filter(|r| pop.contains(*r) && !tr.contains(*r)).count();
    let zeros = pop.iter().filter(|r| !tr.contains(*r)).count();
    let violating = if forbidden.is_empty() {
        0
    } else {
        g.iter()
            .filter(|r| forbidden.iter().all(|&(a, c)| r[a] == c))
            .count()
    };
    OracleZeros {
        recall: if zeros == 0 { 0.0 } else { novel as f64 / zeros as f64 },
        precision: if g.is_empty() { 0.0 } else { in_population as f64 / g.len() as f64 },
        generated: g.len(),
        in_population,
        novel,
        zeros,
        violating,
    }
}

fn c2_instance(i: u64) -> Result<f64, String> {
    let mut rng = seeded(i, "acceptance-oracles");
    let n_attr = rng.gen_range(1..=4);
    let specs: Vec<AttributeSpec> = (0..n_attr)
        .map(|j| {
            let d = rng.gen_range(2..=3);
            let labels: Vec<String> = (0..d).map(|c| format!("c{c}")).collect();
            let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
            AttributeSpec::new(format!("a{j}"), Role::Shared, &refs)
        })
        .collect();
    let schema = DatasetSchema::new(specs.clone(), View::Joint).map_err(|e| e.to_string())?;
    let dims = schema.dims();
    let names: Vec<String> = schema.names().iter().map(|s| s.to_string()).collect();
    let (n_real, n_synth) = (rng.gen_range(1..=200), rng.gen_range(1..=200));
    let real_rows = random_rows(&mut rng, &dims, n_real);
    let synth_rows = {
        let mut rows = random_rows(&mut rng, &dims, n_synth);
        // Mix in copies of real rows so that population hits occur.
        for r in rows.iter_mut() {
            if rng.gen_bool(0.4) {
                *r = real_rows[rng.gen_range(0..real_rows.len())].clone();
            }
        }
        rows
    };
    let real = RecordTable::from_rows(schema.clone(), &real_rows).map_err(|e| e.to_string())?;
    let synth = RecordTable::from_rows(schema.clone(), &synth_rows).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut track = |what: &str, a: f64, b: f64| -> Result<(), String> {
        let d = (a - b).abs();
        worst = worst.max(d);
        if d > ORACLE_TOL || a.is_nan() != b.is_nan() {
            return Err(format!("instance {i}: {what} {a} vs oracle {b}"));
        }
        Ok(())
    };

    for k in 1..=n_attr.min(3) {
        for subset in (0..n_attr).combinations(k) {
            let mut cols = subset.clone();
            if rng.gen_bool(0.5) {
                cols.reverse();
            }
            let tuple: Vec<&str> = cols.iter().map(|&c| names[c].as_str()).collect();
            let lr = kway_distribution(&real, &tuple).map_err(|e| e.to_string())?;
            let ls = kway_distribution(&synth, &tuple).map_err(|e| e.to_string())?;
            let or = oracle_kway(&real_rows, &cols, &dims);
            let os = oracle_kway(&synth_rows, &cols, &dims);
            if lr.cells.len() != or.len() {
                return Err(format!("instance {i}: kway cell count {} vs {}", lr.cells.len(), or.len()));
            }
            for (a, b) in lr.cells.iter().zip(&or).chain(ls.cells.iter().zip(&os)) {
                track("kway cell", *a, *b)?;
            }
            track("srmse", srmse(&lr, &ls).map_err(|e| e.to_string())?, oracle_srmse(&or, &os))?;
            track("jsd", jsd(&lr, &ls).map_err(|e| e.to_string())?, oracle_jsd(&or, &os))?;
        }
    }

    let cov = coverage(&real, &synth).map_err(|e| e.to_string())?;
    track("s_cr", cov.score, oracle_coverage(&real_rows, &synth_rows, &dims))?;

    // The real rows double as a small population; a random part of it is the
    // training sample.
    let uniform: Vec<(AttributeSpec, Vec<f64>)> = schema
        .attributes()
        .iter()
        .map(|a| (a.clone(), vec![1.0 / a.dim() as f64; a.dim()]))
        .collect();
    let mut forbidden = Vec::new();
    let mut rules = Vec::new();
    if n_attr >= 2 {
        let c0 = rng.gen_range(0..dims[0]) as u16;
        let c1 = rng.gen_range(0..dims[1]) as u16;
        forbidden = vec![(0, c0), (1, c1)];
        rules.push(StructuralRule {
            id: "r".into(),
            forbidden: forbidden
                .iter()
                .map(|&(a, c)| Literal {
                    attribute: names[a].clone(),
                    categories: vec![format!("c{c}")],
                })
                .collect(),
        });
    }
    let spec = GroundTruthSpec::new(uniform, Vec::new(), rules, real_rows.len()).map_err(|e| e.to_string())?;
    let pop = GroundTruthPopulation::from_records(spec, real.clone(), 0).map_err(|e| e.to_string())?;
    let train_rows: Vec<Vec<u16>> = real_rows.iter().filter(|_| rng.gen_bool(0.5)).cloned().collect();
    let support: HashSet<_> = train_rows.iter().map(|r| pop.schema().combo_key(r)).collect();
    let lib = zeros_metrics(&synth, &support, &pop).map_err(|e| e.to_string())?;
    let o = oracle_zeros(&synth_rows, &real_rows, &train_rows, &forbidden);
    track("recall", lib.recall, o.recall)?;
    track("precision", lib.precision, o.precision)?;
    let counts = (
        lib.generated,
        lib.generated_in_population,
        lib.generated_sampling_zeros,
        lib.sampling_zeros,
        lib.generated_rule_violating,
    );
    let expect = (o.generated, o.in_population, o.novel, o.zeros, o.violating);
    if counts != expect {
        return Err(format!("instance {i}: zero counts {counts:?} vs oracle {expect:?}"));
    }
    Ok(worst)
}

fn c2_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        match c2_instance(i) {
            Ok(w) => worst = worst.max(w),
            Err(e) => return Outcome::fail(e),
        }
    }
    Outcome::check(
        true,
        format!("200 instances, max deviation {worst:.2e} (tolerance {ORACLE_TOL:.0e})"),
    )
}

// C3 ----------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || scale * (2.0 * rng.gen::<f64>() - 1.0))
}

/// Central differences of `f` over every entry of the tensors `params_mut`
/// exposes, in that order.
fn central_differences<M: Clone>(
    model: &M,
    params_mut: fn(&mut M) -> Vec<&mut Array2<f64>>,
    f: &dyn Fn(&M) -> f64,
) -> Vec<f64> {
    let mut probe = model.clone();
    let shapes: Vec<usize> = params_mut(&mut probe).iter().map(|p| p.len()).collect();
    let mut out = Vec::new();
    for (t, &len) in shapes.iter().enumerate() {
        for e in 0..len {
            let mut plus = model.clone();
            params_mut(&mut plus)[t].as_slice_mut().unwrap()[e] += FD_STEP;
            let mut minus = model.clone();
            params_mut(&mut minus)[t].as_slice_mut().unwrap()[e] -= FD_STEP;
            out.push((f(&plus) - f(&minus)) / (2.0 * FD_STEP));
        }
    }
    out
}

fn gp_case(seed: u64) -> (usize, f64) {
    let mut rng = seeded(seed, "acceptance-gp");
    let arch = CriticArch::with_hidden(4, &[4, 4]);
    let critic: Critic<f64> = Critic::init(&arch, &mut rng);
    let n_params: usize = critic.named_params("c").iter().map(|(_, p)| p.len()).sum();
    let real = random_matrix(&mut rng, 6, 4, 1.0);
    let fake = random_matrix(&mut rng, 6, 4, 1.0);
    let eps: Vec<f64> = (0..6).map(|_| rng.gen()).collect();
    let value = |c: &Critic<f64>| {
        let tape = Tape::new();
        let p = c.bind(&tape);
        gradient_penalty_var(c, &p, &real, &fake, &eps, 10.0).item()
    };
    let tape = Tape::new();
    let params = critic.bind(&tape);
    let gp = gradient_penalty_var(&critic, &params, &real, &fake, &eps, 10.0);
    let analytic: Vec<f64> = tape
        .grad(gp, &params)
        .iter()
        .flat_map(|g| g.value().iter().copied().collect::<Vec<_>>())
        .collect();
    let numeric = central_differences(&critic, |c| c.params_mut(), &value);
    (n_params, relative_error(&analytic, &numeric))
}

fn toy_joint() -> DatasetSchema {
    DatasetSchema::new(
        vec![
            AttributeSpec::new("s", Role::Shared, &["x", "y"]),
            AttributeSpec::new("a", Role::SourceAOnly, &["x", "y"]),
            AttributeSpec::new("b", Role::SourceBOnly, &["x", "y"]),
        ],
        View::Joint,
    )
    .expect("toy schema")
}

/// Returns (parameter count, gradient error, tape-vs-array value gap).
fn igp_case(seed: u64, tau: f64) -> (usize, f64, f64) {
    let mut rng = seeded(seed, "acceptance-igp");
    let arch = GeneratorArch::with_widths(&toy_joint(), 2, &[2], &[2], false);
    let gen: Generator<f64> = Generator::init(&arch, &mut rng);
    let n_params: usize = gen.named_params().iter().map(|(_, p)| p.len()).sum();
    let z = random_matrix(&mut rng, 8, 2, 1.5);
    let pairs = random_pairs(8, &mut rng);
    let value = |g: &Generator<f64>| {
        let tape = Tape::new();
        let p = g.bind(&tape);
        let out = g.forward(&p, tape.leaf(z.clone()), Mode::Eval, &mut Vec::new());
        igp_var(out, &z, &pairs, tau).expect("pairs").item()
    };
    let tape = Tape::new();
    let params = gen.bind(&tape);
    let out = gen.forward(&params, tape.leaf(z.clone()), Mode::Eval, &mut Vec::new());
    let term = igp_var(out, &z, &pairs, tau).expect("pairs");
    let analytic: Vec<f64> = tape
        .grad(term, &params)
        .iter()
        .flat_map(|g| g.value().iter().copied().collect::<Vec<_>>())
        .collect();
    let numeric = central_differences(&gen, |g| g.params_mut(), &value);

    let g = gen.generate(z.view(), Mode::Eval).expect("generate");
    let pick = |m: &Array2<f64>, side: usize| {
        let idx: Vec<usize> = pairs.iter().map(|p| if side == 0 { p.0 } else { p.1 }).collect();
        m.select(ndarray::Axis(0), &idx)
    };
    let direct = igp_term(&pick(&z, 0), &pick(&z, 1), &pick(&g, 0), &pick(&g, 1), tau).expect("igp_term");
    (n_params, relative_error(&analytic, &numeric), (direct - term.item()).abs())
}

fn c3_gradients() -> Outcome {
    let mut ok = true;
    let mut gp_worst: f64 = 0.0;
    let mut gp_params = 0;
    for seed in 0..10 {
        let (n, e) = gp_case(seed);
        gp_params = n;
        gp_worst = gp_worst.max(e);
        ok &= n <= 50;
    }
    ok &= gp_worst <= FD_TOL;

    let mut igp_worst: f64 = 0.0;
    let mut igp_gap: f64 = 0.0;
    let mut igp_params = 0;
    for seed in 0..10 {
        // Unclipped and partly clipped ratios.
        for tau in [1e3, 0.5] {
            let (n, e, gap) = igp_case(seed, tau);
            igp_params = n;
            igp_worst = igp_worst.max(e);
            igp_gap = igp_gap.max(gap);
            ok &= n <= 50;
        }
    }
    ok &= igp_worst <= FD_TOL && igp_gap <= 1e-12;

    // Probability blocks of the desk-scale generator.
    let spec = GroundTruthSpec::default_calibrated();
    let joint = {
        let s = spec.schema();
        let a = s.project_view(View::SourceA).expect("view a");
        let b = s.project_view(View::SourceB).expect("view b");
        DatasetSchema::joint_of(&a, &b).expect("joint")
    };
    let blocks = joint.blocks();
    let arch = GeneratorArch::for_schema(&joint);
    let mut rng = seeded(7, "acceptance-blocks");
    let mut block_worst: f64 = 0.0;
    for i in 0..1000 {
        let mut gen: Generator<f64> = Generator::init(&arch, &mut rng);
        let scale = 10f64.powf(rng.gen_range(-1.0..1.0));
        for p in gen.params_mut() {
            p.mapv_inplace(|v| v * scale);
        }
        let z = random_matrix(&mut rng, 16, arch.z_dim, 3.0);
        let mode = if i % 2 == 0 { Mode::Train } else { Mode::Eval };
        let out = if mode == Mode::Train {
            let tape = Tape::new();
            let p = gen.bind(&tape);
            gen.forward(&p, tape.leaf(z.clone()), mode, &mut Vec::new())
                .value()
                .as_ref()
                .clone()
        } else {
            gen.generate(z.view(), mode).expect("generate")
        };
        for row in out.rows() {
            for &(o, d) in &blocks {
                let s: f64 = row.iter().skip(o).take(d).sum();
                block_worst = block_worst.max((s - 1.0).abs());
            }
        }
    }
    ok &= block_worst <= 1e-6;

    Outcome::check(
        ok,
        format!(
            "gp rel err {gp_worst:.2e} ({gp_params} params); igp rel err {igp_worst:.2e} ({igp_params} params), \
             tape/array gap {igp_gap:.1e}; block sum deviation {block_worst:.1e} over 1000 draws"
        ),
    )
}

// C4 ----------------------------------------------------------------------

/// Published category shares in percent.
const TABLE_MARGINALS: &[(&str, &[(&str, f64)])] = &[
    ("Gender", &[("Male", 48.84), ("Female", 51.15)]),
    (
        "Driver's license",
        &[
            ("Yes", 70.68),
            ("No", 12.82),
            ("Refusal", 0.01),
            ("Not applicable (under 16 years)", 16.44),
            ("Does not know", 0.004),
        ],
    ),
    ("Age", &[("Under 14 years", 15.35), ("15-60 years", 63.57), ("More than 60 years", 21.07)]),
    (
        "Number of households",
        &[("1", 12.55), ("2", 32.86), ("3", 17.71), ("4", 23.59), ("5", 13.29)],
    ),
    (
        "Employment status",
        &[("Full time", 40.40), ("Part time", 4.60), ("Not in labour force", 49.93), ("Unemployed", 5.07)],
    ),
    ("Mobility", &[("Yes", 79.10), ("No", 17.02), ("Does not know", 3.87)]),
    (
        "Number of trips",
        &[("1", 22.95), ("2", 53.67), ("3", 17.54), ("4", 4.65), ("5", 1.01), ("6 or more", 0.20)],
    ),
    (
        "Number of vehicles",
        &[
            ("0", 9.92),
            ("1", 36.65),
            ("2", 39.94),
            ("3", 9.82),
            ("4", 2.95),
            ("5", 0.75),
            ("6 or more", 0.42),
        ],
    ),
    (
        "Number of modes",
        &[("1", 95.18), ("2", 4.03), ("3", 0.07), ("4", 0.0008), ("5 or more", 0.0001)],
    ),
    (
        "Home type",
        &[("Apartment", 55.69), ("Single house", 36.15), ("Other", 7.88), ("Movable", 0.29)],
    ),
    (
        "Education level",
        &[("Post secondary", 51.18), ("Secondary", 26.88), ("No certificate", 21.94)],
    ),
    ("Tenure", &[("Owner", 58.21), ("Renter", 41.79)]),
    (
        "Income level",
        &[("Level 1", 55.77), ("Level 2", 25.95), ("Level 3", 11.28), ("Level 4", 6.99)],
    ),
    ("Marital status", &[("Married", 45.96), ("Single", 54.04)]),
];

fn c4_simulator() -> Outcome {
    let spec = GroundTruthSpec::default_calibrated().with_population_size(50_000);
    let pop = match build_population(&spec, 1) {
        Ok(p) => p,
        Err(e) => return Outcome::fail(e.to_string()),
    };
    let violations = pop.records.rows().filter(|r| !spec.is_feasible(r)).count();
    let counts = popsynth::schema::category_counts(&pop.records);
    let schema = pop.schema();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (attr, cats) in TABLE_MARGINALS {
        let Some(j) = schema.index_of(attr) else {
            return Outcome::fail(format!("attribute `{attr}` missing from the population"));
        };
        let a = &schema.attributes()[j];
        if a.dim() != cats.len() {
            return Outcome::fail(format!("`{attr}` has {} categories, expected {}", a.dim(), cats.len()));
        }
        for (label, pct) in cats.iter() {
            let Some(c) = a.category_index(label) else {
                return Outcome::fail(format!("category `{label}` of `{attr}` missing"));
            };
            let emp = 100.0 * counts[j][c] as f64 / pop.len() as f64;
            let d = (emp - pct).abs();
            checked += 1;
            if d > worst.0 {
                worst = (d, format!("{attr}={label}: {emp:.2} vs {pct}"));
            }
        }
    }
    Outcome::check(
        violations == 0 && worst.0 <= 0.5 && schema.len() == TABLE_MARGINALS.len(),
        format!(
            "{} records, {violations} rule violations; {checked} categories, max deviation {:.3} pp ({})",
            pop.len(),
            worst.0,
            worst.1
        ),
    )
}

// Desk-scale run shared by C5 and C6 -----------------------------------------

struct DeskRun {
    dir: PathBuf,
    manifest: Result<RunManifest, String>,
    seconds: f64,
    _tmp: Option<tempfile::TempDir>,
}

static DESK: OnceLock<DeskRun> = OnceLock::new();

fn desk_run() -> &'static DeskRun {
    DESK.get_or_init(|| {
        let (dir, tmp) = match std::env::var_os("ACCEPTANCE_DESK_RUN") {
            Some(d) => (PathBuf::from(d), None),
            None => {
                let t = tempfile::tempdir().expect("tempdir");
                (t.path().join("desk"), Some(t))
            }
        };
        let t = Instant::now();
        let manifest_path = dir.join(MANIFEST_JSON);
        let manifest = if manifest_path.is_file() {
            eprintln!("reusing desk run at {}", dir.display());
            std::fs::read_to_string(&manifest_path)
                .map_err(|e| e.to_string())
                .and_then(|s| serde_json::from_str::<RunManifest>(&s).map_err(|e| e.to_string()))
        } else {
            let mut cfg = ExperimentConfig::default();
            cfg.out_dir = dir.clone();
            cmd_run(&cfg).map_err(|e| e.to_string())
        };
        DeskRun {
            dir,
            manifest,
            seconds: t.elapsed().as_secs_f64(),
            _tmp: tmp,
        }
    })
}

fn finite_log(path: &Path) -> Result<usize, String> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        for field in rec.iter().skip(1).filter(|f| !f.is_empty()) {
            let v: f64 = field.parse().map_err(|_| format!("bad number `{field}`"))?;
            if !v.is_finite() {
                return Err(format!("non-finite loss in row {}", rows + 1));
            }
        }
        rows += 1;
    }
    Ok(rows)
}

/// Max per-attribute marginal SRMSE and mean marginal JSD of the synthetic
/// table against both training views.
fn marginal_fit(cell: &Path, views: &Path) -> Result<(f64, String, f64), String> {
    let synth = load_table_with_schema(&cell.join(SYNTHETIC_CSV)).map_err(|e| e.to_string())?;
    let mut worst = (0.0f64, String::new());
    let mut jsds = Vec::new();
    for file in [VIEW_A_CSV, VIEW_B_CSV] {
        let view = load_table_with_schema(&views.join(file)).map_err(|e| e.to_string())?;
        let s = synth.project(view.schema()).map_err(|e| e.to_string())?;
        for name in view.schema().names() {
            let r = kway_distribution(&view, &[name]).map_err(|e| e.to_string())?;
            let f = kway_distribution(&s, &[name]).map_err(|e| e.to_string())?;
            let e = srmse(&r, &f).map_err(|e| e.to_string())?;
            if e >= worst.0 {
                worst = (e, name.to_string());
            }
            jsds.push(jsd(&r, &f).map_err(|e| e.to_string())?);
        }
    }
    Ok((worst.0, worst.1, jsds.iter().sum::<f64>() / jsds.len() as f64))
}

fn c5_training() -> Outcome {
    let run = desk_run();
    if let Err(e) = &run.manifest {
        return Outcome::fail(format!("desk run failed: {e}"));
    }
    let cfg = ExperimentConfig::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for variant in [Variant::JointIgp, Variant::Joint] {
        for &seed in &cfg.replicates {
            let cell = run.dir.join("cells").join(cell_name(variant, seed));
            let name = cell_name(variant, seed);
            let logs = finite_log(&cell.join(TRAINING_LOG_CSV));
            let fit = marginal_fit(&cell, &run.dir.join("views"));
            match (logs, fit) {
                (Ok(rows), Ok((worst, attr, mean_jsd))) => {
                    let good = worst < 0.5 && mean_jsd < 0.1;
                    ok &= good;
                    parts.push(format!(
                        "{name}: {rows} finite log rows, max srmse {worst:.3} ({attr}), mean jsd {mean_jsd:.4}"
                    ));
                }
                (Err(e), _) | (_, Err(e)) => {
                    ok = false;
                    parts.push(format!("{name}: {e}"));
                }
            }
        }
    }
    let train = cfg.train_config(Variant::JointIgp, 0).expect("desk train config");
    parts.push(format!(
        "{} epochs, batch {}, run {:.0}s for {} cells",
        train.epoch,
        train.batch_size,
        run.seconds,
        cfg.replicates.len() * cfg.variants.len()
    ));
    Outcome::check(ok, parts.join("; "))
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn c6_trend() -> Outcome {
    let run = desk_run();
    let manifest = match &run.manifest {
        Ok(m) => m,
        Err(e) => return Outcome::fail(format!("desk run failed: {e}")),
    };
    if !manifest.failures.is_empty() {
        return Outcome::fail(format!("{} failed cells", manifest.failures.len()));
    }
    let bad = manifest.verify(&run.dir);
    if !bad.is_empty() {
        return Outcome::fail(format!("manifest mismatch: {}", bad.join(", ")));
    }
    let rows = match read_summary(&run.dir.join(SUMMARY_CSV)) {
        Ok(r) => r,
        Err(e) => return Outcome::fail(e.to_string()),
    };
    let per_seed = |v: Variant, f: fn(&popsynth::harness::SummaryRow) -> f64| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.variant == v.to_string() && r.seed != "mean")
            .map(f)
            .collect()
    };
    let reports = rows.iter().filter(|r| r.seed != "mean").count();
    let stat = |v, f| mean_sd(&per_seed(v, f));
    let recall = |r: &popsynth::harness::SummaryRow| r.recall;
    let precision = |r: &popsynth::harness::SummaryRow| r.precision;
    let orderings = [
        ("recall joint_igp >= joint", stat(Variant::JointIgp, recall), stat(Variant::Joint, recall)),
        ("recall joint >= simple", stat(Variant::Joint, recall), stat(Variant::Simple, recall)),
        ("precision joint >= simple", stat(Variant::Joint, precision), stat(Variant::Simple, precision)),
    ];
    let mut inverted = Vec::new();
    let mut parts = vec![format!("{reports} cell reports")];
    for (name, (hi, hi_sd), (lo, lo_sd)) in orderings {
        let holds = hi >= lo;
        let within = !holds && lo - hi <= hi_sd.max(lo_sd);
        if !holds {
            inverted.push(within);
        }
        parts.push(format!(
            "{name}: {hi:.4}±{hi_sd:.4} vs {lo:.4}±{lo_sd:.4} {}",
            if holds {
                "holds"
            } else if within {
                "inverted within 1 sd"
            } else {
                "inverted"
            }
        ));
    }
    let status = match inverted.as_slice() {
        _ if reports != 9 => Status::Fail,
        [] => Status::Pass,
        [true] => Status::Warn,
        _ => Status::Fail,
    };
    Outcome {
        status,
        detail: parts.join("; "),
    }
}

// C7 ----------------------------------------------------------------------

const REDUCED_CONFIG: &str = r#"
replicates = [0, 1]

[population]
size = 4000

[views]
n_a = 600
n_b = 600

[train]
epoch = 3
batch_size = 128
gen_layer_size = [8, 8, 32, 16]
critic_layer_size = [32, 16]

[evaluation.metrics.ml.learners]
forest_trees = 10
boosting_rounds = 10
"#;

fn c7_determinism() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut summaries = Vec::new();
    for run in ["first", "second"] {
        let mut cfg = ExperimentConfig::from_toml_str(REDUCED_CONFIG).expect("reduced config");
        cfg.out_dir = tmp.path().join(run);
        match cmd_run(&cfg) {
            Ok(m) if m.failures.is_empty() => {}
            Ok(m) => return Outcome::fail(format!("{} failed cells in the {run} run", m.failures.len())),
            Err(e) => return Outcome::fail(e.to_string()),
        }
        match std::fs::read(cfg.out_dir.join(SUMMARY_CSV)) {
            Ok(b) => summaries.push(b),
            Err(e) => return Outcome::fail(e.to_string()),
        }
    }
    Outcome::check(
        summaries[0] == summaries[1],
        format!(
            "two runs of a reduced config (4000 individuals, 600 per view, 3 epochs, 2 seeds): summary {} bytes, {}",
            summaries[0].len(),
            if summaries[0] == summaries[1] { "identical" } else { "different" }
        ),
    )
}
