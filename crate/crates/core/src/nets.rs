//! Generator (shared trunk, one branch per attribute role, per-attribute
//! softmax heads) and the scalar-output critics.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::rng::seeded;
use crate::schema::{AttributeSpec, DatasetSchema, Role, SchemaError, View};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("input width {found} does not match expected {expected}")]
    Width { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchArch {
    pub role: Role,
    pub widths: Vec<usize>,
    pub batch_norm: Vec<bool>,
    /// One head per attribute of this role, in joint-schema order.
    pub heads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub z_dim: usize,
    pub trunk: Vec<usize>,
    pub trunk_batch_norm: Vec<bool>,
    /// Ordered shared, source-A-only, source-B-only.
    pub branches: Vec<BranchArch>,
    pub slope: f64,
}

impl GeneratorArch {
    /// Default layout: latent 18, trunk (18, 18), branches (200, 100, 50),
    /// batch normalisation after every hidden layer.
    pub fn for_schema(joint: &DatasetSchema) -> Self {
        Self::with_widths(joint, 18, &[18, 18], &[200, 100, 50], true)
    }

    pub fn with_widths(
        joint: &DatasetSchema,
        z_dim: usize,
        trunk: &[usize],
        branch: &[usize],
        batch_norm: bool,
    ) -> Self {
        let branches = [Role::Shared, Role::SourceAOnly, Role::SourceBOnly]
            .into_iter()
            .map(|role| BranchArch {
                role,
                widths: branch.to_vec(),
                batch_norm: vec![batch_norm; branch.len()],
                heads: joint
                    .attributes()
                    .iter()
                    .filter(|a| a.role == role)
                    .map(AttributeSpec::dim)
                    .collect(),
            })
            .collect();
        GeneratorArch {
            z_dim,
            trunk: trunk.to_vec(),
            trunk_batch_norm: vec![batch_norm; trunk.len()],
            branches,
            slope: LEAKY_SLOPE,
        }
    }

    pub fn output_width(&self) -> usize {
        self.branches.iter().flat_map(|b| &b.heads).sum()
    }

    fn validate(&self, joint: &DatasetSchema) -> Result<()> {
        let err = |m: String| Err(NetError::Arch(m));
        if self.z_dim == 0 {
            return err("latent dimension must be positive".into());
        }
        if self.trunk.len() != self.trunk_batch_norm.len() {
            return err("trunk batch-norm flags do not match trunk depth".into());
        }
        if self.trunk.contains(&0) {
            return err("zero-width trunk layer".into());
        }
        let roles = [Role::Shared, Role::SourceAOnly, Role::SourceBOnly];
        if self.branches.len() != 3 {
            return err(format!("expected 3 branches, found {}", self.branches.len()));
        }
        for (b, role) in self.branches.iter().zip(roles) {
            if b.role != role {
                return err(format!("branch for `{}` is out of order", b.role));
            }
            if b.widths.len() != b.batch_norm.len() || b.widths.contains(&0) {
                return err(format!("branch `{}` has inconsistent layer flags", b.role));
            }
            let dims: Vec<usize> = joint
                .attributes()
                .iter()
                .filter(|a| a.role == role)
                .map(AttributeSpec::dim)
                .collect();
            if dims != b.heads {
                return err(format!(
                    "heads of branch `{}` are {:?} but the schema needs {:?}",
                    b.role, b.heads, dims
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticArch {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub slope: f64,
}

impl CriticArch {
    /// Default hidden widths (256, 128, 64).
    pub fn new(input: usize) -> Self {
        Self::with_hidden(input, &[256, 128, 64])
    }

    pub fn with_hidden(input: usize, hidden: &[usize]) -> Self {
        CriticArch {
            input,
            hidden: hidden.to_vec(),
            slope: LEAKY_SLOPE,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden.contains(&0) {
            return Err(NetError::Arch("critic layers must have positive width".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    /// `in × out`.
    pub weight: Array2<F>,
    /// `1 × out`.
    pub bias: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<F> {
    pub gamma: Array2<F>,
    pub beta: Array2<F>,
    pub running_mean: Array2<F>,
    pub running_var: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub dense: Dense<F>,
    pub norm: Option<BatchNorm<F>>,
}

/// Batch moments seen by one normalisation layer in a train-mode pass.
#[derive(Debug, Clone)]
pub struct BatchMoments<F> {
    pub mean: Array2<F>,
    pub var: Array2<F>,
    pub n: usize,
}

fn kaiming<F: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize, slope: f64) -> Array2<F> {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let std = gain / (fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| {
        F::c(rng.sample::<f64, _>(StandardNormal) * std)
    })
}

impl<F: Real> Dense<F> {
    fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, slope: f64) -> Self {
        Dense {
            weight: kaiming(rng, fan_in, fan_out, slope),
            bias: Array2::zeros((1, fan_out)),
        }
    }
}

impl<F: Real> Layer<F> {
    fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, bn: bool, slope: f64) -> Self {
        Layer {
            dense: Dense::init(rng, fan_in, fan_out, slope),
            norm: bn.then(|| BatchNorm {
                gamma: Array2::ones((1, fan_out)),
                beta: Array2::zeros((1, fan_out)),
                running_mean: Array2::zeros((1, fan_out)),
                running_var: Array2::ones((1, fan_out)),
            }),
        }
    }
}

/// Hands out bound parameter variables in declaration order.
struct Cursor<'a, 't, F: Real> {
    vars: &'a [Var<'t, F>],
    at: usize,
}

impl<'t, F: Real> Cursor<'_, 't, F> {
    fn next(&mut self) -> Var<'t, F> {
        let v = self.vars[self.at];
        self.at += 1;
        v
    }
}

fn layer_forward<'t, F: Real>(
    layer: &Layer<F>,
    cur: &mut Cursor<'_, 't, F>,
    x: Var<'t, F>,
    slope: F,
    mode: Mode,
    moments: &mut Vec<BatchMoments<F>>,
) -> Var<'t, F> {
    let w = cur.next();
    let b = cur.next();
    let h = x.matmul(w).add_row(b).leaky_relu(slope);
    let Some(bn) = &layer.norm else { return h };
    let gamma = cur.next();
    let beta = cur.next();
    let tape = x.tape();
    let eps = F::c(BN_EPS);
    let normalized = match mode {
        Mode::Train => {
            let n = h.shape().0;
            let inv_n = F::one() / F::c(n as f64);
            let mean = h.sum_rows().scale(inv_n);
            let centered = h.add_row(-mean);
            let var = (centered * centered).sum_rows().scale(inv_n);
            moments.push(BatchMoments {
                mean: (*mean.value()).clone(),
                var: (*var.value()).clone(),
                n,
            });
            centered.mul_row(var.add_scalar(eps).powf(F::c(-0.5)))
        }
        Mode::Eval => {
            let shift = tape.leaf(bn.running_mean.mapv(|m| -m));
            let inv = tape.leaf(bn.running_var.mapv(|v| F::one() / (v + eps).sqrt()));
            h.add_row(shift).mul_row(inv)
        }
    };
    normalized.mul_row(gamma).add_row(beta)
}

fn layer_params<F: Real>(layer: &Layer<F>, out: &mut Vec<(String, Array2<F>)>, prefix: &str) {
    out.push((format!("{prefix}.weight"), layer.dense.weight.clone()));
    out.push((format!("{prefix}.bias"), layer.dense.bias.clone()));
    if let Some(bn) = &layer.norm {
        out.push((format!("{prefix}.bn.gamma"), bn.gamma.clone()));
        out.push((format!("{prefix}.bn.beta"), bn.beta.clone()));
    }
}

fn layer_params_mut<'a, F: Real>(layer: &'a mut Layer<F>, out: &mut Vec<&'a mut Array2<F>>) {
    out.push(&mut layer.dense.weight);
    out.push(&mut layer.dense.bias);
    if let Some(bn) = &mut layer.norm {
        out.push(&mut bn.gamma);
        out.push(&mut bn.beta);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch<F> {
    pub layers: Vec<Layer<F>>,
    /// Heads of all attributes of the branch side by side: columns are grouped
    /// by attribute.
    pub head: Option<Dense<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<F> {
    pub arch: GeneratorArch,
    pub trunk: Vec<Layer<F>>,
    pub branches: Vec<Branch<F>>,
}

impl<F: Real> Generator<F> {
    pub fn init(arch: &GeneratorArch, rng: &mut impl Rng) -> Self {
        let slope = arch.slope;
        let mut fan_in = arch.z_dim;
        let mut trunk = Vec::new();
        for (&w, &bn) in arch.trunk.iter().zip(&arch.trunk_batch_norm) {
            trunk.push(Layer::init(rng, fan_in, w, bn, slope));
            fan_in = w;
        }
        let trunk_out = fan_in;
        let branches = arch
            .branches
            .iter()
            .map(|b| {
                let mut fan_in = trunk_out;
                let mut layers = Vec::new();
                for (&w, &bn) in b.widths.iter().zip(&b.batch_norm) {
                    layers.push(Layer::init(rng, fan_in, w, bn, slope));
                    fan_in = w;
                }
                let width: usize = b.heads.iter().sum();
                let head = (width > 0).then(|| Dense::init(rng, fan_in, width, slope));
                Branch { layers, head }
            })
            .collect();
        Generator {
            arch: arch.clone(),
            trunk,
            branches,
        }
    }

    /// Named trainable tensors in declaration order.
    pub fn named_params(&self) -> Vec<(String, Array2<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            layer_params(l, &mut out, &format!("generator.trunk.{i}"));
        }
        for (b, branch) in self.arch.branches.iter().zip(&self.branches) {
            for (i, l) in branch.layers.iter().enumerate() {
                layer_params(l, &mut out, &format!("generator.{}.{i}", b.role));
            }
            if let Some(h) = &branch.head {
                out.push((format!("generator.{}.head.weight", b.role), h.weight.clone()));
                out.push((format!("generator.{}.head.bias", b.role), h.bias.clone()));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<F>> {
        let mut out = Vec::new();
        for l in &mut self.trunk {
            layer_params_mut(l, &mut out);
        }
        for branch in &mut self.branches {
            for l in &mut branch.layers {
                layer_params_mut(l, &mut out);
            }
            if let Some(h) = &mut branch.head {
                out.push(&mut h.weight);
                out.push(&mut h.bias);
            }
        }
        out
    }

    pub fn norms(&self) -> Vec<&BatchNorm<F>> {
        self.trunk
            .iter()
            .chain(self.branches.iter().flat_map(|b| &b.layers))
            .filter_map(|l| l.norm.as_ref())
            .collect()
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<F>> {
        self.trunk
            .iter_mut()
            .chain(self.branches.iter_mut().flat_map(|b| &mut b.layers))
            .filter_map(|l| l.norm.as_mut())
            .collect()
    }

    /// Places all trainable tensors on `tape` as leaves.
    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> Vec<Var<'t, F>> {
        self.named_params()
            .into_iter()
            .map(|(_, v)| tape.leaf(v))
            .collect()
    }

    /// Probability rows over the joint one-hot layout. In train mode the batch
    /// moments of each normalisation layer are appended to `moments`.
    pub fn forward<'t>(
        &self,
        params: &[Var<'t, F>],
        z: Var<'t, F>,
        mode: Mode,
        moments: &mut Vec<BatchMoments<F>>,
    ) -> Var<'t, F> {
        let slope = F::c(self.arch.slope);
        let mut cur = Cursor {
            vars: params,
            at: 0,
        };
        let mut h = z;
        for l in &self.trunk {
            h = layer_forward(l, &mut cur, h, slope, mode, moments);
        }
        let trunk_out = h;
        let mut outputs = Vec::new();
        for (b, branch) in self.arch.branches.iter().zip(&self.branches) {
            let mut h = trunk_out;
            for l in &branch.layers {
                h = layer_forward(l, &mut cur, h, slope, mode, moments);
            }
            if branch.head.is_some() {
                let w = cur.next();
                let bias = cur.next();
                let logits = h.matmul(w).add_row(bias);
                let mut blocks = Vec::with_capacity(b.heads.len());
                let mut o = 0;
                for &d in &b.heads {
                    blocks.push((o, d));
                    o += d;
                }
                outputs.push(logits.block_softmax(&blocks));
            }
        }
        if outputs.len() == 1 {
            outputs[0]
        } else {
            Var::concat_cols(&outputs)
        }
    }

    /// Folds train-mode batch moments into the running statistics
    /// (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn update_running_stats(&mut self, moments: &[BatchMoments<F>]) {
        let m = F::c(BN_MOMENTUM);
        let keep = F::one() - m;
        for (bn, mo) in self.norms_mut().into_iter().zip(moments) {
            let corr = if mo.n > 1 {
                F::c(mo.n as f64 / (mo.n - 1) as f64)
            } else {
                F::one()
            };
            bn.running_mean
                .zip_mut_with(&mo.mean, |r, &b| *r = keep * *r + m * b);
            bn.running_var
                .zip_mut_with(&mo.var, |r, &b| *r = keep * *r + m * b * corr);
        }
    }

    /// One forward pass outside training.
    pub fn generate(&self, z: ArrayView2<'_, F>, mode: Mode) -> Result<Array2<F>> {
        if z.nrows() == 0 {
            return Err(NetError::EmptyBatch);
        }
        if z.ncols() != self.arch.z_dim {
            return Err(NetError::Width {
                expected: self.arch.z_dim,
                found: z.ncols(),
            });
        }
        let tape = Tape::new();
        let params = self.bind(&tape);
        let out = self.forward(&params, tape.leaf(z.to_owned()), mode, &mut Vec::new());
        let v = out.value();
        Ok((*v).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic<F> {
    pub arch: CriticArch,
    /// Hidden layers then the scalar output layer.
    pub layers: Vec<Dense<F>>,
}

impl<F: Real> Critic<F> {
    pub fn init(arch: &CriticArch, rng: &mut impl Rng) -> Self {
        let mut fan_in = arch.input;
        let mut layers = Vec::new();
        for &w in arch.hidden.iter().chain(std::iter::once(&1)) {
            layers.push(Dense::init(rng, fan_in, w, arch.slope));
            fan_in = w;
        }
        Critic {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Array2<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), l.weight.clone()));
            out.push((format!("{prefix}.{i}.bias"), l.bias.clone()));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<F>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> Vec<Var<'t, F>> {
        self.layers
            .iter()
            .flat_map(|l| [tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())])
            .collect()
    }

    /// `n × 1` scores, no output activation.
    pub fn forward<'t>(&self, params: &[Var<'t, F>], x: Var<'t, F>) -> Var<'t, F> {
        let slope = F::c(self.arch.slope);
        let last = self.layers.len() - 1;
        let mut h = x;
        for i in 0..=last {
            h = h.matmul(params[2 * i]).add_row(params[2 * i + 1]);
            if i < last {
                h = h.leaky_relu(slope);
            }
        }
        h
    }

    pub fn score(&self, x: ArrayView2<'_, F>) -> Result<Vec<F>> {
        if x.ncols() != self.arch.input {
            return Err(NetError::Width {
                expected: self.arch.input,
                found: x.ncols(),
            });
        }
        if x.nrows() == 0 {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let params = self.bind(&tape);
        let out = self.forward(&params, tape.leaf(x.to_owned()));
        let v = out.value();
        Ok(v.iter().copied().collect())
    }
}

/// Column ranges of the joint layout that make up a view, in view order.
pub fn view_columns(joint: &DatasetSchema, view: View) -> Vec<(usize, usize)> {
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    for ((o, d), a) in joint.blocks().into_iter().zip(joint.attributes()) {
        if !view.admits(a.role) {
            continue;
        }
        match ranges.last_mut() {
            Some((s, w)) if *s + *w == o => *w += d,
            _ => ranges.push((o, d)),
        }
    }
    ranges
}

/// Routes joint generator output to a critic's input layout.
pub fn route<'t, F: Real>(joint_out: Var<'t, F>, ranges: &[(usize, usize)]) -> Var<'t, F> {
    let width = joint_out.shape().1;
    if ranges.len() == 1 && ranges[0] == (0, width) {
        return joint_out;
    }
    let parts: Vec<Var<'t, F>> = ranges
        .iter()
        .map(|&(s, w)| joint_out.slice_cols(s, s + w))
        .collect();
    if parts.len() == 1 {
        parts[0]
    } else {
        Var::concat_cols(&parts)
    }
}

/// Generator and critics of one model. A single-critic model (the fused
/// baseline) has `critic_b = None` and `critic_a` sees the joint layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub schema: DatasetSchema,
    pub generator: Generator<F>,
    pub critic_a: Critic<F>,
    pub critic_b: Option<Critic<F>>,
    pub init_seed: u64,
}

impl<F: Real> ModelParams<F> {
    /// Two critics on the source-A and source-B layouts.
    pub fn init(
        schema: &DatasetSchema,
        gen_arch: &GeneratorArch,
        critic_a: &CriticArch,
        critic_b: Option<&CriticArch>,
        seed: u64,
    ) -> Result<Self> {
        if schema.view() != View::Joint {
            return Err(NetError::Arch("models are built on the joint schema".into()));
        }
        gen_arch.validate(schema)?;
        critic_a.validate()?;
        let expect_a = match critic_b {
            Some(b) => {
                b.validate()?;
                let wb = schema.project_view(View::SourceB)?.width();
                if b.input != wb {
                    return Err(NetError::Arch(format!(
                        "critic B input {} does not match view width {wb}",
                        b.input
                    )));
                }
                schema.project_view(View::SourceA)?.width()
            }
            None => schema.width(),
        };
        if critic_a.input != expect_a {
            return Err(NetError::Arch(format!(
                "critic A input {} does not match view width {expect_a}",
                critic_a.input
            )));
        }
        let mut rng = seeded(seed, "init");
        let generator = Generator::init(gen_arch, &mut rng);
        let critic_a = Critic::init(critic_a, &mut rng);
        let critic_b = critic_b.map(|b| Critic::init(b, &mut rng));
        Ok(ModelParams {
            schema: schema.clone(),
            generator,
            critic_a,
            critic_b,
            init_seed: seed,
        })
    }

    /// Default architectures; `dual` selects the two-critic layout.
    pub fn default_for(schema: &DatasetSchema, dual: bool, seed: u64) -> Result<Self> {
        let gen = GeneratorArch::for_schema(schema);
        if dual {
            let a = CriticArch::new(schema.project_view(View::SourceA)?.width());
            let b = CriticArch::new(schema.project_view(View::SourceB)?.width());
            Self::init(schema, &gen, &a, Some(&b), seed)
        } else {
            Self::init(schema, &gen, &CriticArch::new(schema.width()), None, seed)
        }
    }

    /// Column ranges of the joint output fed to critic A and (if present) B.
    pub fn critic_routes(&self) -> (Vec<(usize, usize)>, Option<Vec<(usize, usize)>>) {
        match self.critic_b {
            Some(_) => (
                view_columns(&self.schema, View::SourceA),
                Some(view_columns(&self.schema, View::SourceB)),
            ),
            None => (vec![(0, self.schema.width())], None),
        }
    }

    pub fn named_params(&self) -> Vec<(String, Array2<F>)> {
        let mut out = self.generator.named_params();
        out.extend(self.critic_a.named_params("critic_a"));
        if let Some(b) = &self.critic_b {
            out.extend(b.named_params("critic_b"));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_params()
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensor = |name: String, v: &Array2<F>| Tensor {
            name,
            shape: [v.nrows(), v.ncols()],
            data: v.iter().map(|x| x.to_f64().expect("finite")).collect(),
        };
        let tensors = self
            .named_params()
            .into_iter()
            .map(|(n, v)| tensor(n, &v))
            .collect();
        let running_stats = self
            .generator
            .norms()
            .into_iter()
            .enumerate()
            .flat_map(|(i, bn)| {
                [
                    tensor(format!("generator.bn{i}.running_mean"), &bn.running_mean),
                    tensor(format!("generator.bn{i}.running_var"), &bn.running_var),
                ]
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            attributes: self.schema.attributes().to_vec(),
            generator: self.generator.arch.clone(),
            critic_a: self.critic_a.arch.clone(),
            critic_b: self.critic_b.as_ref().map(|c| c.arch.clone()),
            init_seed: self.init_seed,
            tensors,
            running_stats,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(NetError::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        let schema = DatasetSchema::new(ck.attributes.clone(), View::Joint)?;
        let mut model = Self::init(
            &schema,
            &ck.generator,
            &ck.critic_a,
            ck.critic_b.as_ref(),
            ck.init_seed,
        )?;
        let mut slots: Vec<&mut Array2<F>> = model.generator.params_mut();
        slots.extend(model.critic_a.params_mut());
        if let Some(b) = &mut model.critic_b {
            slots.extend(b.params_mut());
        }
        if slots.len() != ck.tensors.len() {
            return Err(NetError::Checkpoint(format!(
                "expected {} tensors, found {}",
                slots.len(),
                ck.tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(&ck.tensors) {
            t.fill(slot)?;
        }
        let norms = model.generator.norms_mut();
        if norms.len() * 2 != ck.running_stats.len() {
            return Err(NetError::Checkpoint("running statistics do not match".into()));
        }
        for (bn, pair) in norms.into_iter().zip(ck.running_stats.chunks(2)) {
            pair[0].fill(&mut bn.running_mean)?;
            pair[1].fill(&mut bn.running_var)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())
            .map_err(|e| NetError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| NetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| NetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }
}

pub const CHECKPOINT_FORMAT: &str = "popsynth-model";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Portable JSON checkpoint. `tensors` lists trainable parameters in
/// declaration order (generator trunk, shared / source_a / source_b branches
/// with their heads, critic A, critic B); each layer contributes `weight`
/// (`in × out`, row-major), `bias`, then `bn.gamma` and `bn.beta` when
/// normalised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub attributes: Vec<AttributeSpec>,
    pub generator: GeneratorArch,
    pub critic_a: CriticArch,
    pub critic_b: Option<CriticArch>,
    pub init_seed: u64,
    pub tensors: Vec<Tensor>,
    pub running_stats: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Tensor {
    fn fill<F: Real>(&self, slot: &mut Array2<F>) -> Result<()> {
        if self.shape != [slot.nrows(), slot.ncols()] || self.data.len() != slot.len() {
            return Err(NetError::Checkpoint(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                self.name,
                self.shape,
                slot.dim()
            )));
        }
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(NetError::Checkpoint(format!(
                "tensor `{}` holds non-finite values",
                self.name
            )));
        }
        for (s, &x) in slot.iter_mut().zip(&self.data) {
            *s = F::c(x);
        }
        Ok(())
    }
}

/// Standard-normal latent batch.
pub fn sample_latent<F: Real>(rng: &mut impl Rng, n: usize, z_dim: usize) -> Array2<F> {
    Array2::from_shape_fn((n, z_dim), |_| F::c(rng.sample::<f64, _>(StandardNormal)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_schema() -> DatasetSchema {
        DatasetSchema::new(
            vec![
                AttributeSpec::new("s", Role::Shared, &["a", "b"]),
                AttributeSpec::new("a1", Role::SourceAOnly, &["x", "y", "z"]),
                AttributeSpec::new("b1", Role::SourceBOnly, &["p", "q"]),
                AttributeSpec::new("a2", Role::SourceAOnly, &["u", "v"]),
            ],
            View::Joint,
        )
        .unwrap()
    }

    fn toy_model(seed: u64) -> ModelParams<f64> {
        let s = toy_schema();
        let g = GeneratorArch::with_widths(&s, 4, &[5], &[6, 3], true);
        let ca = CriticArch::with_hidden(7, &[4]);
        let cb = CriticArch::with_hidden(4, &[4]);
        ModelParams::init(&s, &g, &ca, Some(&cb), seed).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        assert_eq!(toy_model(3), toy_model(3));
        assert_ne!(toy_model(3), toy_model(4));
        let m = toy_model(3);
        assert!(m.generator.trunk[0].dense.bias.iter().all(|&b| b == 0.0));
        let bn = m.generator.trunk[0].norm.as_ref().unwrap();
        assert!(bn.gamma.iter().all(|&g| g == 1.0) && bn.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn head_mismatch_is_rejected() {
        let s = toy_schema();
        let mut g = GeneratorArch::with_widths(&s, 4, &[5], &[6], false);
        g.branches[1].heads = vec![3, 3];
        let ca = CriticArch::with_hidden(7, &[4]);
        let cb = CriticArch::with_hidden(4, &[4]);
        assert!(matches!(
            ModelParams::<f64>::init(&s, &g, &ca, Some(&cb), 0),
            Err(NetError::Arch(_))
        ));
        let g = GeneratorArch::with_widths(&s, 4, &[5], &[6], false);
        let bad = CriticArch::with_hidden(8, &[4]);
        assert!(ModelParams::<f64>::init(&s, &g, &bad, Some(&cb), 0).is_err());
    }

    #[test]
    fn generator_blocks_are_simplices() {
        let m = toy_model(1);
        let mut rng = seeded(0, "z");
        let z = sample_latent::<f64>(&mut rng, 9, 4);
        for mode in [Mode::Train, Mode::Eval] {
            let out = m.generator.generate(z.view(), mode).unwrap();
            assert_eq!(out.ncols(), m.schema.width());
            for row in out.rows() {
                for (o, d) in m.schema.blocks() {
                    let s: f64 = (o..o + d).map(|k| row[k]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(matches!(
            m.generator.generate(z.slice(ndarray::s![0..0, ..]), Mode::Eval),
            Err(NetError::EmptyBatch)
        ));
    }

    #[test]
    fn zero_heads_give_uniform_output() {
        let mut m = toy_model(2);
        for b in &mut m.generator.branches {
            let h = b.head.as_mut().unwrap();
            h.weight.fill(0.0);
            h.bias.fill(0.0);
        }
        let z = sample_latent::<f64>(&mut seeded(1, "z"), 3, 4);
        let out = m.generator.generate(z.view(), Mode::Eval).unwrap();
        for row in out.rows() {
            for (o, d) in m.schema.blocks() {
                for k in o..o + d {
                    assert!((row[k] - 1.0 / d as f64).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn eval_forward_is_pure() {
        let m = toy_model(5);
        let z = sample_latent::<f64>(&mut seeded(2, "z"), 4, 4);
        assert_eq!(
            m.generator.generate(z.view(), Mode::Eval).unwrap(),
            m.generator.generate(z.view(), Mode::Eval).unwrap()
        );
    }

    #[test]
    fn joint_output_routes_to_view_layouts() {
        let s = toy_schema();
        // joint order: s(2) | a1(3) a2(2) | b1(2)
        assert_eq!(view_columns(&s, View::SourceA), vec![(0, 7)]);
        assert_eq!(view_columns(&s, View::SourceB), vec![(0, 2), (7, 2)]);
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Array2::from_shape_fn((1, 9), |(_, j)| j as f64));
        let b = route(x, &view_columns(&s, View::SourceB)).value();
        assert_eq!(b.row(0).to_vec(), vec![0.0, 1.0, 7.0, 8.0]);
    }

    #[test]
    fn linear_critic_by_hand() {
        let critic = Critic {
            arch: CriticArch::with_hidden(3, &[]),
            layers: vec![Dense {
                weight: array![[0.5], [-1.0], [2.0]],
                bias: array![[0.25]],
            }],
        };
        let x = array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        assert_eq!(critic.score(x.view()).unwrap(), vec![4.75, 0.25]);
        assert!(matches!(
            critic.score(array![[1.0]].view()),
            Err(NetError::Width { .. })
        ));
        let mut zero = toy_model(0).critic_a;
        zero.params_mut().into_iter().for_each(|p| p.fill(0.0));
        let x = Array2::from_elem((5, 7), 0.3);
        assert!(zero.score(x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = toy_model(8);
        let z = sample_latent::<f64>(&mut seeded(3, "z"), 16, 4);
        let tape = Tape::new();
        let p = m.generator.bind(&tape);
        let mut mo = Vec::new();
        m.generator.forward(&p, tape.leaf(z.clone()), Mode::Train, &mut mo);
        m.generator.update_running_stats(&mo);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = ModelParams::<f64>::load(&path).unwrap();
        assert_eq!(back, m);
        let f32_model = ModelParams::<f32>::load(&path).unwrap();
        assert_eq!(f32_model.named_params().len(), m.named_params().len());

        let mut ck = m.to_checkpoint();
        ck.tensors.pop();
        assert!(ModelParams::<f64>::from_checkpoint(&ck).is_err());
    }
}
