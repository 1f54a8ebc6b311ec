//! Dual-critic WGAN-GP training with the inverse gradient penalty, the fused
//! single-critic baseline, and synthesis from trained models.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::nets::{
    route, sample_latent, Critic, CriticArch, GeneratorArch, ModelParams, Mode, NetError,
};
use crate::optim::Adam;
use crate::rng::{derive_seed, seeded, StreamRng};
use crate::schema::{
    align_shared, decode_rows, encode, DatasetSchema, DecodeMode, RecordTable, Role, SchemaError,
    View,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: String, epoch: usize },
    #[error("latent pair {0} has coincident points")]
    CoincidentLatents(usize),
    #[error("batch widths differ: {0} vs {1}")]
    Width(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0} has no rows")]
    EmptyView(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Added under the square root of row norms so they stay differentiable at 0.
const NORM_EPS: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Views fused by nearest-neighbour matching, one critic.
    Simple,
    /// Two critics, no inverse gradient penalty.
    Joint,
    /// Two critics with the inverse gradient penalty.
    JointIgp,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Simple, Variant::Joint, Variant::JointIgp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Simple => "simple",
            Variant::Joint => "joint",
            Variant::JointIgp => "joint_igp",
        }
    }

    pub fn is_dual(self) -> bool {
        self != Variant::Simple
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
}

/// Training settings. Unset keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    /// Only `"adam"` is implemented.
    pub optimizer: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub generator_learning_rate: f64,
    pub critic_learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the larger training table.
    pub epoch: usize,
    pub activation: Activation,
    pub leaky_slope: f64,
    pub n_critic: usize,
    /// Trunk widths followed by branch widths.
    pub gen_layer_size: Vec<usize>,
    /// How many leading entries of `gen_layer_size` form the shared trunk.
    pub gen_trunk_layers: usize,
    pub critic_layer_size: Vec<usize>,
    pub batch_normalization: bool,
    pub z_dim: usize,
    pub lambda_gp: f64,
    pub lambda_igp: f64,
    pub igp_tau: f64,
    /// Weights of the two critics' adversarial terms in the generator loss.
    pub critic_weights: [f64; 2],
    pub log_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::JointIgp,
            seed: 0,
            optimizer: "adam".into(),
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            generator_learning_rate: 1e-4,
            critic_learning_rate: 2e-5,
            batch_size: 512,
            epoch: 5001,
            activation: Activation::LeakyRelu,
            leaky_slope: 0.2,
            n_critic: 5,
            gen_layer_size: vec![18, 18, 200, 100, 50],
            gen_trunk_layers: 2,
            critic_layer_size: vec![256, 128, 64],
            batch_normalization: true,
            z_dim: 18,
            lambda_gp: 10.0,
            lambda_igp: 0.1,
            igp_tau: 5.0,
            critic_weights: [1.0, 1.0],
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the shorter desk-scale schedule (500 epochs).
    pub fn desk() -> Self {
        TrainConfig {
            epoch: 500,
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// λ_igp actually applied: zero unless the variant uses the penalty.
    pub fn effective_lambda_igp(&self) -> f64 {
        if self.variant == Variant::JointIgp {
            self.lambda_igp
        } else {
            0.0
        }
    }

    pub fn slope(&self) -> f64 {
        match self.activation {
            Activation::LeakyRelu => self.leaky_slope,
            Activation::Relu => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.optimizer != "adam" {
            return bad("optimizer must be \"adam\"");
        }
        if !(self.generator_learning_rate > 0.0 && self.critic_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam moments must lie in [0, 1)");
        }
        if self.n_critic == 0 {
            return bad("n_critic must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.z_dim == 0 {
            return bad("z_dim must be positive");
        }
        if self.gen_trunk_layers >= self.gen_layer_size.len() {
            return bad("gen_layer_size needs at least one branch layer after the trunk");
        }
        if self.lambda_gp < 0.0 || self.lambda_igp < 0.0 {
            return bad("penalty coefficients must be non-negative");
        }
        if !(self.igp_tau > 0.0) {
            return bad("igp_tau must be positive");
        }
        if self.critic_weights.iter().any(|w| !w.is_finite()) {
            return bad("critic weights must be finite");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        Ok(())
    }

    pub fn generator_arch(&self, joint: &DatasetSchema) -> GeneratorArch {
        let (trunk, branch) = self.gen_layer_size.split_at(self.gen_trunk_layers);
        let mut arch = GeneratorArch::with_widths(
            joint,
            self.z_dim,
            trunk,
            branch,
            self.batch_normalization,
        );
        arch.slope = self.slope();
        arch
    }

    pub fn critic_arch(&self, input: usize) -> CriticArch {
        let mut arch = CriticArch::with_hidden(input, &self.critic_layer_size);
        arch.slope = self.slope();
        arch
    }

    /// Fresh model for `joint` shaped by this config's variant.
    pub fn init_model<F: Real>(&self, joint: &DatasetSchema) -> Result<ModelParams<F>> {
        let gen = self.generator_arch(joint);
        let model = if self.variant.is_dual() {
            let a = self.critic_arch(joint.project_view(View::SourceA)?.width());
            let b = self.critic_arch(joint.project_view(View::SourceB)?.width());
            ModelParams::init(joint, &gen, &a, Some(&b), self.seed)?
        } else {
            ModelParams::init(joint, &gen, &self.critic_arch(joint.width()), None, self.seed)?
        };
        Ok(model)
    }
}

/// `λ · mean((‖∇D(x̂)‖ − 1)²)` on the tape, `x̂ = ε·real + (1 − ε)·fake` with
/// one `ε` per row. The result is differentiable in the critic parameters.
pub fn gradient_penalty_var<'t, F: Real>(
    critic: &Critic<F>,
    params: &[Var<'t, F>],
    real: &Array2<F>,
    fake: &Array2<F>,
    eps: &[F],
    lambda: F,
) -> Var<'t, F> {
    let tape = params[0].tape();
    let mut mix = fake.clone();
    for ((mut m, r), &e) in mix.rows_mut().into_iter().zip(real.rows()).zip(eps) {
        m.zip_mut_with(&r, |f, &r| *f = e * r + (F::one() - e) * *f);
    }
    let x = tape.leaf(mix);
    let out = critic.forward(params, x).sum();
    let g = tape.grad(out, &[x])[0];
    let dev = g.row_norm(F::c(NORM_EPS)).add_scalar(-F::one());
    (dev * dev).mean().scale(lambda)
}

fn check_pair<F>(real: &Array2<F>, fake: &Array2<F>) -> Result<()> {
    if real.ncols() != fake.ncols() {
        return Err(TrainError::Width(real.ncols(), fake.ncols()));
    }
    if real.nrows() != fake.nrows() {
        return Err(TrainError::Config(format!(
            "real batch has {} rows but fake batch has {}",
            real.nrows(),
            fake.nrows()
        )));
    }
    if real.nrows() == 0 {
        return Err(TrainError::EmptyBatch);
    }
    Ok(())
}

/// Gradient penalty value with interpolation weights drawn from `seed`.
pub fn gradient_penalty<F: Real>(
    critic: &Critic<F>,
    real: &Array2<F>,
    fake: &Array2<F>,
    lambda: f64,
    seed: u64,
) -> Result<f64> {
    check_pair(real, fake)?;
    let mut rng = seeded(seed, "gradient-penalty");
    let eps: Vec<F> = (0..real.nrows()).map(|_| F::c(rng.gen())).collect();
    let tape = Tape::new();
    let params = critic.bind(&tape);
    let p = gradient_penalty_var(critic, &params, real, fake, &eps, F::c(lambda));
    Ok(p.item().to_f64().unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticStats {
    /// `E[D(fake)] − E[D(real)] + penalty`.
    pub loss: f64,
    /// `E[D(real)] − E[D(fake)]`.
    pub wasserstein: f64,
    pub gp: f64,
}

/// One Adam update of `critic` minimising `E[D(fake)] − E[D(real)] + GP`.
pub fn critic_step<F: Real>(
    critic: &mut Critic<F>,
    opt: &mut Adam<F>,
    real: &Array2<F>,
    fake: &Array2<F>,
    lambda_gp: f64,
    rng: &mut impl Rng,
) -> Result<CriticStats> {
    check_pair(real, fake)?;
    let eps: Vec<F> = (0..real.nrows()).map(|_| F::c(rng.gen())).collect();
    let tape = Tape::new();
    let params = critic.bind(&tape);
    let d_real = critic.forward(&params, tape.leaf(real.clone())).mean();
    let d_fake = critic.forward(&params, tape.leaf(fake.clone())).mean();
    let gp = if lambda_gp > 0.0 {
        Some(gradient_penalty_var(
            critic,
            &params,
            real,
            fake,
            &eps,
            F::c(lambda_gp),
        ))
    } else {
        None
    };
    let mut loss = d_fake - d_real;
    if let Some(gp) = gp {
        loss = loss + gp;
    }
    let f = |v: Var<'_, F>| v.item().to_f64().unwrap_or(f64::NAN);
    let stats = CriticStats {
        loss: f(loss),
        wasserstein: f(d_real) - f(d_fake),
        gp: gp.map(f).unwrap_or(0.0),
    };
    if !stats.loss.is_finite() {
        return Err(TrainError::NonFinite {
            what: "critic loss".into(),
            epoch: 0,
        });
    }
    let grads: Vec<Array2<F>> = tape
        .grad(loss, &params)
        .into_iter()
        .map(|g| (*g.value()).clone())
        .collect();
    opt.step(critic.params_mut(), &grads);
    Ok(stats)
}

/// Random disjoint pairing of `0..n` (the last index is left out when `n`
/// is odd).
pub fn random_pairs(n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

/// Mean over pairs of `min(‖G(z_i) − G(z_j)‖ / ‖z_i − z_j‖, τ)` on the tape.
pub fn igp_var<'t, F: Real>(
    out: Var<'t, F>,
    z: &Array2<F>,
    pairs: &[(usize, usize)],
    tau: F,
) -> Result<Var<'t, F>> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let tape = out.tape();
    let (i1, i2): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let mut inv_dz = Array2::zeros((pairs.len(), 1));
    for (p, &(a, b)) in pairs.iter().enumerate() {
        let d = z
            .row(a)
            .iter()
            .zip(z.row(b))
            .fold(F::zero(), |s, (&x, &y)| s + (x - y) * (x - y))
            .sqrt();
        if !(d > F::zero()) {
            return Err(TrainError::CoincidentLatents(p));
        }
        inv_dz[[p, 0]] = F::one() / d;
    }
    let diff = out.gather_rows(&i1) - out.gather_rows(&i2);
    let ratio = diff.row_norm(F::c(NORM_EPS)).mul_col(tape.leaf(inv_dz));
    let r = ratio.value();
    let keep = r.mapv(|x| if x < tau { F::one() } else { F::zero() });
    let rest = r.mapv(|x| if x < tau { F::zero() } else { tau });
    Ok(ratio.mul_const(keep).add_const(&rest).mean())
}

/// The clipped ratio term for explicit pairs `(z1_i, z2_i) ↦ (g1_i, g2_i)`.
pub fn igp_term(
    z1: &Array2<f64>,
    z2: &Array2<f64>,
    g1: &Array2<f64>,
    g2: &Array2<f64>,
    tau: f64,
) -> Result<f64> {
    if z1.dim() != z2.dim() {
        return Err(TrainError::Width(z1.ncols(), z2.ncols()));
    }
    if g1.dim() != g2.dim() {
        return Err(TrainError::Width(g1.ncols(), g2.ncols()));
    }
    if z1.nrows() != g1.nrows() {
        return Err(TrainError::Config("latent and output batches differ in length".into()));
    }
    let k = z1.nrows();
    let z = ndarray::concatenate(Axis(0), &[z1.view(), z2.view()]).expect("same width");
    let g = ndarray::concatenate(Axis(0), &[g1.view(), g2.view()]).expect("same width");
    let pairs: Vec<(usize, usize)> = (0..k).map(|i| (i, i + k)).collect();
    let tape = Tape::new();
    Ok(igp_var(tape.leaf(g), &z, &pairs, tau)?.item())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorObjective {
    pub critic_weights: [f64; 2],
    pub lambda_igp: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorStats {
    pub loss: f64,
    /// `E[D_c(G(z))]` per critic.
    pub adversarial: Vec<f64>,
    pub igp: f64,
}

/// One Adam update of the generator minimising
/// `−Σ_c w_c·E[D_c(G(z))] − λ_igp·IGP`, critics frozen. Running normalisation
/// statistics are refreshed from this batch.
pub fn generator_step<F: Real>(
    model: &mut ModelParams<F>,
    opt: &mut Adam<F>,
    z: &Array2<F>,
    pairs: &[(usize, usize)],
    obj: &GeneratorObjective,
) -> Result<GeneratorStats> {
    if z.nrows() == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let tape = Tape::new();
    let gp = model.generator.bind(&tape);
    let mut moments = Vec::new();
    let out = model
        .generator
        .forward(&gp, tape.leaf(z.clone()), Mode::Train, &mut moments);
    let (route_a, route_b) = model.critic_routes();
    let mut critics = vec![(&model.critic_a, route_a, obj.critic_weights[0])];
    if let (Some(cb), Some(rb)) = (&model.critic_b, route_b) {
        critics.push((cb, rb, obj.critic_weights[1]));
    }
    let mut adversarial = Vec::new();
    let mut loss: Option<Var<'_, F>> = None;
    for (critic, ranges, w) in critics {
        let cp = critic.bind(&tape);
        let score = critic.forward(&cp, route(out, &ranges)).mean();
        adversarial.push(score.item().to_f64().unwrap_or(f64::NAN));
        let term = score.scale(F::c(-w));
        loss = Some(match loss {
            Some(l) => l + term,
            None => term,
        });
    }
    let igp = if pairs.is_empty() {
        None
    } else {
        Some(igp_var(out, z, pairs, F::c(obj.tau))?)
    };
    let mut loss = loss.expect("at least one critic");
    if let Some(igp) = igp {
        if obj.lambda_igp > 0.0 {
            loss = loss - igp.scale(F::c(obj.lambda_igp));
        }
    }
    let stats = GeneratorStats {
        loss: loss.item().to_f64().unwrap_or(f64::NAN),
        adversarial,
        igp: igp
            .map(|v| v.item().to_f64().unwrap_or(f64::NAN))
            .unwrap_or(0.0),
    };
    if !stats.loss.is_finite() {
        return Err(TrainError::NonFinite {
            what: "generator loss".into(),
            epoch: 0,
        });
    }
    let grads: Vec<Array2<F>> = tape
        .grad(loss, &gp)
        .into_iter()
        .map(|g| (*g.value()).clone())
        .collect();
    drop(tape);
    opt.step(model.generator.params_mut(), &grads);
    model.generator.update_running_stats(&moments);
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub critic_a_loss: f64,
    pub critic_b_loss: Option<f64>,
    pub generator_loss: Option<f64>,
    pub wasserstein_a: f64,
    pub wasserstein_b: Option<f64>,
    pub gp_a: f64,
    pub gp_b: Option<f64>,
    pub igp: Option<f64>,
}

impl LogRow {
    pub fn all_finite(&self) -> bool {
        [
            Some(self.critic_a_loss),
            self.critic_b_loss,
            self.generator_loss,
            Some(self.wasserstein_a),
            self.wasserstein_b,
            Some(self.gp_a),
            self.gp_b,
            self.igp,
        ]
        .into_iter()
        .flatten()
        .all(f64::is_finite)
    }
}

/// Loss trace written as CSV. Columns of the second critic are empty for
/// single-critic models; generator columns stay empty until its first update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        if self.rows.is_empty() {
            w.write_record([
                "epoch",
                "critic_a_loss",
                "critic_b_loss",
                "generator_loss",
                "wasserstein_a",
                "wasserstein_b",
                "gp_a",
                "gp_b",
                "igp",
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_csv_string().as_bytes()).map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<LogRow>, _>>()
            .map_err(|e| TrainError::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            })?;
        Ok(TrainingLog { rows })
    }
}

/// Aligned training views projected onto the joint schema's view layouts.
#[derive(Debug, Clone)]
pub struct AlignedViews {
    pub joint: DatasetSchema,
    pub a: RecordTable,
    pub b: RecordTable,
}

/// Aligns `b`'s shared attributes to `a` and derives the joint schema.
pub fn align_views(a: &RecordTable, b: &RecordTable) -> Result<AlignedViews> {
    let map = align_shared(a.schema(), b.schema())?;
    let b = map.apply(b, a.schema())?;
    let joint = DatasetSchema::joint_of(a.schema(), b.schema())?;
    let a = a.project(&joint.project_view(View::SourceA)?)?;
    let b = b.project(&joint.project_view(View::SourceB)?)?;
    Ok(AlignedViews { joint, a, b })
}

/// Fuses two views into joint records: every source-A record receives the
/// source-B-only attributes of a donor drawn from the B records closest in
/// Hamming distance over the shared attributes (exact matches when any
/// exist), ties broken uniformly at random.
pub fn fuse_views(views: &AlignedViews, seed: u64) -> Result<RecordTable> {
    let AlignedViews { joint, a, b } = views;
    if b.is_empty() {
        return Err(TrainError::EmptyView("source B".into()));
    }
    let shared: Vec<&str> = joint
        .attributes()
        .iter()
        .filter(|x| x.role == Role::Shared)
        .map(|x| x.name.as_str())
        .collect();
    let cols = |s: &DatasetSchema| -> Vec<usize> {
        shared.iter().map(|n| s.index_of(n).expect("shared")).collect()
    };
    let (sa, sb) = (cols(a.schema()), cols(b.schema()));
    let mut by_key: BTreeMap<Vec<u16>, Vec<usize>> = BTreeMap::new();
    for i in 0..b.len() {
        let r = b.row(i);
        by_key
            .entry(sb.iter().map(|&j| r[j]).collect())
            .or_default()
            .push(i);
    }
    let keys: Vec<(&Vec<u16>, &Vec<usize>)> = by_key.iter().collect();
    let mut pools: HashMap<Vec<u16>, Vec<usize>> = HashMap::new();
    let mut rng = seeded(seed, "fuse-views");
    let sources: Vec<(Role, usize)> = joint
        .attributes()
        .iter()
        .map(|x| match x.role {
            Role::SourceBOnly => (x.role, b.schema().index_of(&x.name).expect("B attribute")),
            _ => (x.role, a.schema().index_of(&x.name).expect("A attribute")),
        })
        .collect();
    let mut out = RecordTable::new(joint.clone());
    let mut buf = vec![0u16; joint.len()];
    for i in 0..a.len() {
        let ra = a.row(i);
        let key: Vec<u16> = sa.iter().map(|&j| ra[j]).collect();
        let pool = pools.entry(key.clone()).or_insert_with(|| {
            let dist = |k: &[u16]| k.iter().zip(&key).filter(|(x, y)| x != y).count();
            let best = keys.iter().map(|(k, _)| dist(k)).min().expect("non-empty");
            keys.iter()
                .filter(|(k, _)| dist(k) == best)
                .flat_map(|(_, v)| v.iter().copied())
                .collect()
        });
        let donor = b.row(pool[rng.gen_range(0..pool.len())]);
        for (slot, &(role, j)) in buf.iter_mut().zip(&sources) {
            *slot = if role == Role::SourceBOnly { donor[j] } else { ra[j] };
        }
        out.push_row(&buf)?;
    }
    Ok(out)
}

fn to_matrix<F: Real>(t: &RecordTable) -> Array2<F> {
    encode(t).data.mapv(F::c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Last update of each critic in the epoch.
    pub critics: Vec<CriticStats>,
    /// Most recent generator update, if any has happened yet.
    pub generator: Option<GeneratorStats>,
}

/// Shuffled pass over one real table, reshuffled when exhausted.
struct RowStream {
    order: Vec<usize>,
    pos: usize,
}

impl RowStream {
    fn take(&mut self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let m = (k - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + m]);
            self.pos += m;
        }
        out
    }
}

/// Owns the model, optimisers and data of one training run.
///
/// An epoch is one pass over the larger real table in minibatches of
/// `batch_size`. Each minibatch step updates every critic once; the generator
/// is updated after every `n_critic` such steps, counted across epochs.
pub struct Trainer<F: Real> {
    cfg: TrainConfig,
    model: ModelParams<F>,
    gen_opt: Adam<F>,
    critic_opts: Vec<Adam<F>>,
    reals: Vec<Array2<F>>,
    streams: Vec<RowStream>,
    rng: StreamRng,
    epoch: usize,
    critic_updates: usize,
    last_generator: Option<GeneratorStats>,
    log: TrainingLog,
}

impl<F: Real> Trainer<F> {
    /// `reals` holds one encoded table per critic, laid out as that critic's
    /// input.
    pub fn new(model: ModelParams<F>, reals: Vec<Array2<F>>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let n_critics = 1 + model.critic_b.is_some() as usize;
        if reals.len() != n_critics {
            return Err(TrainError::Config(format!(
                "{} real tables for {n_critics} critics",
                reals.len()
            )));
        }
        let critics = std::iter::once(&model.critic_a).chain(model.critic_b.as_ref());
        for (r, c) in reals.iter().zip(critics) {
            if r.nrows() == 0 {
                return Err(TrainError::EmptyView("training view".into()));
            }
            if r.ncols() != c.arch.input {
                return Err(TrainError::Width(r.ncols(), c.arch.input));
            }
        }
        let adam = |lr| Adam::new(lr, cfg.adam_beta1, cfg.adam_beta2);
        let streams = reals
            .iter()
            .map(|r| RowStream {
                order: (0..r.nrows()).collect(),
                pos: r.nrows(),
            })
            .collect();
        Ok(Trainer {
            gen_opt: adam(cfg.generator_learning_rate),
            critic_opts: (0..n_critics).map(|_| adam(cfg.critic_learning_rate)).collect(),
            rng: seeded(cfg.seed, "train"),
            cfg: cfg.clone(),
            model,
            reals,
            streams,
            epoch: 0,
            critic_updates: 0,
            last_generator: None,
            log: TrainingLog::default(),
        })
    }

    pub fn model(&self) -> &ModelParams<F> {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &TrainingLog {
        &self.log
    }

    pub fn into_parts(self) -> (ModelParams<F>, TrainingLog) {
        (self.model, self.log)
    }

    /// Minibatch steps per epoch.
    pub fn steps_per_epoch(&self) -> usize {
        let n = self.reals.iter().map(|r| r.nrows()).max().unwrap_or(0);
        n.div_ceil(self.cfg.batch_size).max(1)
    }

    fn minibatch(&mut self, c: usize, size: usize) -> Array2<F> {
        let idx = self.streams[c].take(size, &mut self.rng);
        self.reals[c].select(Axis(0), &idx)
    }

    fn fake_batch(&mut self, n: usize) -> Array2<F> {
        let z = sample_latent::<F>(&mut self.rng, n, self.model.generator.arch.z_dim);
        let tape = Tape::new();
        let params = self.model.generator.bind(&tape);
        let out = self
            .model
            .generator
            .forward(&params, tape.leaf(z), Mode::Train, &mut Vec::new());
        let v = out.value();
        (*v).clone()
    }

    fn generator_update(&mut self) -> Result<GeneratorStats> {
        let n_gen = self.cfg.batch_size / 2 * 2;
        let z = sample_latent::<F>(&mut self.rng, n_gen, self.model.generator.arch.z_dim);
        let pairs = random_pairs(n_gen, &mut self.rng);
        let obj = GeneratorObjective {
            critic_weights: self.cfg.critic_weights,
            lambda_igp: self.cfg.effective_lambda_igp(),
            tau: self.cfg.igp_tau,
        };
        generator_step(&mut self.model, &mut self.gen_opt, &z, &pairs, &obj)
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        self.epoch += 1;
        let epoch = self.epoch;
        let tag = |e: TrainError| match e {
            TrainError::NonFinite { what, .. } => TrainError::NonFinite { what, epoch },
            other => other,
        };
        let sizes: Vec<usize> = self
            .reals
            .iter()
            .map(|r| self.cfg.batch_size.min(r.nrows()))
            .collect();
        let n_fake = *sizes.iter().max().expect("one critic");
        let (route_a, route_b) = self.model.critic_routes();
        let routes: Vec<Vec<(usize, usize)>> =
            std::iter::once(route_a).chain(route_b).collect();
        let mut critic_stats = vec![CriticStats::default(); self.reals.len()];
        for _ in 0..self.steps_per_epoch() {
            let fake = self.fake_batch(n_fake);
            for c in 0..self.reals.len() {
                let real = self.minibatch(c, sizes[c]);
                let cols: Vec<_> = routes[c]
                    .iter()
                    .map(|&(s, w)| fake.slice(ndarray::s![..sizes[c], s..s + w]))
                    .collect();
                let fake_c = ndarray::concatenate(Axis(1), &cols).expect("row counts agree");
                let critic = if c == 0 {
                    &mut self.model.critic_a
                } else {
                    self.model.critic_b.as_mut().expect("second critic")
                };
                critic_stats[c] = critic_step(
                    critic,
                    &mut self.critic_opts[c],
                    &real,
                    &fake_c,
                    self.cfg.lambda_gp,
                    &mut self.rng,
                )
                .map_err(tag)?;
            }
            self.critic_updates += 1;
            if self.critic_updates % self.cfg.n_critic == 0 {
                let gen = self.generator_update().map_err(tag)?;
                self.last_generator = Some(gen);
            }
        }
        if !self.model.all_finite() {
            return Err(TrainError::NonFinite {
                what: "parameters".into(),
                epoch,
            });
        }
        if epoch % self.cfg.log_every == 0 || epoch == self.cfg.epoch || epoch == 1 {
            let b = critic_stats.get(1);
            let g = self.last_generator.as_ref();
            self.log.rows.push(LogRow {
                epoch,
                critic_a_loss: critic_stats[0].loss,
                critic_b_loss: b.map(|s| s.loss),
                generator_loss: g.map(|g| g.loss),
                wasserstein_a: critic_stats[0].wasserstein,
                wasserstein_b: b.map(|s| s.wasserstein),
                gp_a: critic_stats[0].gp,
                gp_b: b.map(|s| s.gp),
                igp: g.map(|g| g.igp),
            });
        }
        Ok(EpochStats {
            critics: critic_stats,
            generator: self.last_generator.clone(),
        })
    }
}

/// Trains the configured variant on two source views.
pub fn train(
    a: &RecordTable,
    b: &RecordTable,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainingLog)> {
    train_with_hook(a, b, cfg, |_, _| Ok(()))
}

/// As [`train`], calling `hook` every `checkpoint_every` epochs.
pub fn train_with_hook(
    a: &RecordTable,
    b: &RecordTable,
    cfg: &TrainConfig,
    mut hook: impl FnMut(usize, &ModelParams<f32>) -> Result<()>,
) -> Result<(ModelParams<f32>, TrainingLog)> {
    cfg.validate()?;
    let views = align_views(a, b)?;
    if views.a.is_empty() {
        return Err(TrainError::EmptyView("source A".into()));
    }
    if views.b.is_empty() {
        return Err(TrainError::EmptyView("source B".into()));
    }
    let model: ModelParams<f32> = cfg.init_model(&views.joint)?;
    let reals = if cfg.variant.is_dual() {
        vec![to_matrix(&views.a), to_matrix(&views.b)]
    } else {
        let fused = fuse_views(&views, derive_seed(cfg.seed, "fusion"))?;
        vec![to_matrix(&fused)]
    };
    let mut trainer = Trainer::new(model, reals, cfg)?;
    for _ in 0..cfg.epoch {
        trainer.run_epoch()?;
        let e = trainer.epoch();
        if cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 {
            hook(e, trainer.model())?;
        }
    }
    Ok(trainer.into_parts())
}

/// Draws `n` joint records: latent samples, eval-mode forward pass, decode.
pub fn synthesize<F: Real + Into<f64>>(
    model: &ModelParams<F>,
    n: usize,
    seed: u64,
    mode: DecodeMode,
) -> Result<RecordTable> {
    if n == 0 {
        return Ok(RecordTable::new(model.schema.clone()));
    }
    const CHUNK: usize = 4096;
    let mut rng = seeded(seed, "synthesize");
    let z_dim = model.generator.arch.z_dim;
    let mut probs = Array2::<F>::zeros((n, model.schema.width()));
    let mut start = 0;
    while start < n {
        let m = CHUNK.min(n - start);
        let z = sample_latent::<F>(&mut rng, m, z_dim);
        let out = model.generator.generate(z.view(), Mode::Eval)?;
        probs
            .slice_mut(ndarray::s![start..start + m, ..])
            .assign(&out);
        start += m;
    }
    Ok(decode_rows(&model.schema, probs.view(), mode)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Dense;
    use crate::schema::AttributeSpec;
    use ndarray::array;

    fn linear_critic(w: Array2<f64>) -> Critic<f64> {
        let d = w.nrows();
        Critic {
            arch: CriticArch::with_hidden(d, &[]),
            layers: vec![Dense {
                weight: w,
                bias: Array2::zeros((1, 1)),
            }],
        }
    }

    #[test]
    fn penalty_closed_forms_for_linear_critics() {
        let real = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let fake = array![[0.2, 0.3, 0.5], [0.1, 0.1, 0.8]];
        let unit = linear_critic(array![[0.6], [0.0], [0.8]]);
        assert!(gradient_penalty(&unit, &real, &fake, 10.0, 1).unwrap().abs() < 1e-9);
        let three = linear_critic(array![[1.0], [2.0], [2.0]]);
        assert!((gradient_penalty(&three, &real, &fake, 10.0, 1).unwrap() - 40.0).abs() < 1e-9);
        let zero = linear_critic(Array2::zeros((3, 1)));
        assert!((gradient_penalty(&zero, &real, &fake, 10.0, 1).unwrap() - 10.0).abs() < 1e-9);
        assert!(matches!(
            gradient_penalty(&zero, &real, &array![[1.0, 0.0]], 10.0, 1),
            Err(TrainError::Width(3, 2))
        ));
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(
            gradient_penalty(&zero, &empty, &empty, 10.0, 1),
            Err(TrainError::EmptyBatch)
        ));
    }

    #[test]
    fn critic_step_by_hand_without_penalty() {
        // D(x) = w·x + b on one input; loss = w·(f − r), so dw = f − r, db = 0
        let mut critic = Critic {
            arch: CriticArch::with_hidden(1, &[]),
            layers: vec![Dense {
                weight: array![[0.5]],
                bias: array![[0.1]],
            }],
        };
        let mut opt = Adam::new(0.01, 0.5, 0.9);
        let stats = critic_step(
            &mut critic,
            &mut opt,
            &array![[2.0]],
            &array![[-1.0]],
            0.0,
            &mut seeded(0, "t"),
        )
        .unwrap();
        assert!((stats.loss - (-1.5)).abs() < 1e-12);
        assert!((stats.wasserstein - 1.5).abs() < 1e-12);
        // first Adam step: Δ = −lr·g/(|g| + 1e-8)
        let expected: f64 = 0.5 + 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((critic.layers[0].weight[[0, 0]] - expected).abs() < 1e-12);
        assert_eq!(critic.layers[0].bias[[0, 0]], 0.1);
    }

    #[test]
    fn identical_batches_cancel_and_sign_matches_intent() {
        let critic = linear_critic(array![[5.0], [-5.0]]);
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let mut c = critic.clone();
        let s = critic_step(&mut c, &mut Adam::new(1e-3, 0.5, 0.9), &x, &x, 0.0, &mut seeded(0, "t"))
            .unwrap();
        assert_eq!(s.wasserstein, 0.0);
        // critic scores real rows 5 and fake rows −5: loss strongly negative
        let real = array![[1.0, 0.0], [1.0, 0.0]];
        let fake = array![[0.0, 1.0], [0.0, 1.0]];
        let mut c = critic.clone();
        let s = critic_step(&mut c, &mut Adam::new(1e-3, 0.5, 0.9), &real, &fake, 0.0, &mut seeded(0, "t"))
            .unwrap();
        assert!(s.loss < -9.0);
    }

    #[test]
    fn igp_examples() {
        let z1 = array![[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]];
        let z2 = array![[1.0, 1.0], [0.0, 0.0], [-3.0, 2.0]];
        let g1 = z1.mapv(|x| 2.0 * x);
        let g2 = z2.mapv(|x| 2.0 * x);
        assert!((igp_term(&z1, &z2, &g1, &g2, 5.0).unwrap() - 2.0).abs() < 1e-9);
        let c = Array2::from_elem((3, 4), 0.25);
        assert!(igp_term(&z1, &z2, &c, &c, 5.0).unwrap().abs() < 1e-5);
        let far1 = array![[100.0, 0.0]];
        let far2 = array![[0.0, 0.0]];
        let near1 = array![[1.0]];
        let near2 = array![[0.0]];
        assert!((igp_term(&near1, &near2, &far1, &far2, 5.0).unwrap() - 5.0).abs() < 1e-12);
        assert!(matches!(
            igp_term(&near1, &near1, &far1, &far2, 5.0),
            Err(TrainError::CoincidentLatents(0))
        ));
    }

    fn tiny_schema() -> DatasetSchema {
        DatasetSchema::new(
            vec![
                AttributeSpec::new("s", Role::Shared, &["a", "b"]),
                AttributeSpec::new("x", Role::SourceAOnly, &["0", "1", "2"]),
                AttributeSpec::new("y", Role::SourceBOnly, &["p", "q"]),
            ],
            View::Joint,
        )
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            gen_layer_size: vec![4, 6],
            gen_trunk_layers: 1,
            critic_layer_size: vec![5],
            z_dim: 3,
            batch_size: 16,
            epoch: 2,
            log_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_critics_without_igp_leave_generator_unchanged() {
        let cfg = TrainConfig {
            variant: Variant::Joint,
            ..tiny_cfg()
        };
        let mut model: ModelParams<f64> = cfg.init_model(&tiny_schema()).unwrap();
        model.critic_a.params_mut().into_iter().for_each(|p| p.fill(0.0));
        for p in model.critic_b.as_mut().unwrap().params_mut() {
            p.fill(0.0);
        }
        let before = model.generator.named_params();
        let z = sample_latent::<f64>(&mut seeded(1, "z"), 8, 3);
        let pairs = random_pairs(8, &mut seeded(2, "p"));
        let obj = GeneratorObjective {
            critic_weights: [1.0, 1.0],
            lambda_igp: 0.0,
            tau: 5.0,
        };
        let s = generator_step(&mut model, &mut Adam::new(1e-2, 0.5, 0.9), &z, &pairs, &obj)
            .unwrap();
        assert_eq!(s.loss, 0.0);
        assert_eq!(model.generator.named_params(), before);
    }

    #[test]
    fn igp_pushes_a_collapsing_generator_apart() {
        let cfg = tiny_cfg();
        let mut model: ModelParams<f64> = cfg.init_model(&tiny_schema()).unwrap();
        model.critic_a.params_mut().into_iter().for_each(|p| p.fill(0.0));
        for p in model.critic_b.as_mut().unwrap().params_mut() {
            p.fill(0.0);
        }
        for b in &mut model.generator.branches {
            b.head.as_mut().unwrap().weight.mapv_inplace(|w| w * 1e-4);
        }
        let z = sample_latent::<f64>(&mut seeded(1, "z"), 16, 3);
        let pairs = random_pairs(16, &mut seeded(2, "p"));
        let obj = GeneratorObjective {
            critic_weights: [1.0, 1.0],
            lambda_igp: 0.1,
            tau: 5.0,
        };
        let mut opt = Adam::new(1e-3, 0.5, 0.9);
        let first = generator_step(&mut model, &mut opt, &z, &pairs, &obj).unwrap();
        let mut last = first.clone();
        for _ in 0..20 {
            last = generator_step(&mut model, &mut opt, &z, &pairs, &obj).unwrap();
        }
        assert!(last.igp > 2.0 * first.igp, "{} -> {}", first.igp, last.igp);
    }

    fn tiny_views() -> (RecordTable, RecordTable) {
        let joint = tiny_schema();
        let mut rng = seeded(3, "rows");
        let rows: Vec<Vec<u16>> = (0..64)
            .map(|_| {
                let s = rng.gen_range(0..2u16);
                vec![s, (s + rng.gen_range(0..2u16)) % 3, s]
            })
            .collect();
        let t = RecordTable::from_rows(joint.clone(), &rows).unwrap();
        let a = t.select_rows(&(0..32).collect::<Vec<_>>());
        let b = t.select_rows(&(32..64).collect::<Vec<_>>());
        (
            a.project(&joint.project_view(View::SourceA).unwrap()).unwrap(),
            b.project(&joint.project_view(View::SourceB).unwrap()).unwrap(),
        )
    }

    #[test]
    fn smoke_training_is_finite_and_reproducible() {
        let (a, b) = tiny_views();
        for variant in Variant::ALL {
            let cfg = TrainConfig {
                variant,
                ..tiny_cfg()
            };
            let (m1, log) = train(&a, &b, &cfg).unwrap();
            assert_eq!(log.rows.len(), 2);
            assert!(log.rows.iter().all(LogRow::all_finite));
            assert_eq!(log.rows[0].critic_b_loss.is_some(), variant.is_dual());
            let (m2, _) = train(&a, &b, &cfg).unwrap();
            assert_eq!(m1, m2);
            let s = synthesize(&m1, 10, 4, DecodeMode::Argmax).unwrap();
            assert_eq!(s.len(), 10);
            assert_eq!(s, synthesize(&m1, 10, 4, DecodeMode::Argmax).unwrap());
            assert!(synthesize(&m1, 0, 4, DecodeMode::Argmax).unwrap().is_empty());
        }
    }

    #[test]
    fn fusion_prefers_exact_shared_matches() {
        let (a, b) = tiny_views();
        let views = align_views(&a, &b).unwrap();
        let fused = fuse_views(&views, 1).unwrap();
        assert_eq!(fused.len(), a.len());
        // every shared value of A appears in B, so donors always match exactly;
        // in this data y == s for every B record
        for r in fused.rows() {
            assert_eq!(r[2], r[0]);
        }
    }

    #[test]
    fn config_parsing_and_validation() {
        let cfg = TrainConfig::from_toml_str("variant = \"joint\"\nepoch = 3\n").unwrap();
        assert_eq!(cfg.variant, Variant::Joint);
        assert_eq!(cfg.batch_size, 512);
        assert_eq!(cfg.effective_lambda_igp(), 0.0);
        assert!(TrainConfig::from_toml_str("batch_size = 1").is_err());
        assert!(TrainConfig::from_toml_str("n_critic = 0").is_err());
        assert!(TrainConfig::from_toml_str("generator_learning_rate = 0.0").is_err());
        assert!(TrainConfig::from_toml_str("unknown_key = 1").is_err());
        assert_eq!(TrainConfig::desk().epoch, 500);
    }

    #[test]
    fn log_csv_round_trip() {
        let log = TrainingLog {
            rows: vec![LogRow {
                epoch: 1,
                critic_a_loss: -0.5,
                critic_b_loss: None,
                generator_loss: Some(0.25),
                wasserstein_a: 0.5,
                wasserstein_b: None,
                gp_a: 0.1,
                gp_b: None,
                igp: None,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        log.write_csv(&p).unwrap();
        assert_eq!(TrainingLog::read_csv(&p).unwrap(), log);
        assert!(log.to_csv_string().starts_with("epoch,critic_a_loss,critic_b_loss"));
    }
}
