//! Tape-based reverse-mode differentiation over 2-D arrays.
//!
//! Backward rules are themselves recorded as tape operations, so a gradient
//! returned by [`Tape::grad`] can be differentiated again. This is what the
//! gradient-penalty terms need.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::rc::Rc;

use ndarray::{Array2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub trait Real:
    LinalgScalar
    + Float
    + ScalarOperand
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

type Blocks = Rc<Vec<(usize, usize)>>;

#[derive(Clone)]
enum Op<F> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    SumRows(usize),
    SumCols(usize),
    SumAll(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    BroadcastAll(usize),
    Scale(usize, F),
    AddConst(usize),
    MulConst(usize, Rc<Array2<F>>),
    Powf(usize, F),
    Exp(usize),
    BlockSum(usize, Blocks),
    SliceCols { x: usize, start: usize, width: usize },
    PadCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    GatherRows(usize, Rc<Vec<usize>>),
    ScatterRows(usize, Rc<Vec<usize>>),
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) | MulCol(a, b) => {
                vec![*a, *b]
            }
            SumRows(x) | SumCols(x) | SumAll(x) | AddConst(x) | Exp(x) => vec![*x],
            BroadcastRows(x) | BroadcastCols(x) | BroadcastAll(x) => vec![*x],
            Scale(x, _) | MulConst(x, _) | Powf(x, _) | BlockSum(x, _) => vec![*x],
            SliceCols { x, .. } | PadCols { x, .. } => vec![*x],
            ConcatCols(xs) => xs.clone(),
            GatherRows(x, _) | ScatterRows(x, _) => vec![*x],
        }
    }
}

struct Node<F> {
    value: Rc<Array2<F>>,
    op: Op<F>,
}

/// Records operations; dropped after each optimisation step.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F: Real> Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<F>, op: Op<F>) -> Var<'_, F> {
        self.push_rc(Rc::new(value), op)
    }

    fn push_rc(&self, value: Rc<Array2<F>>, op: Op<F>) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Array2<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf)
    }

    /// Shares storage with the caller (parameters are not copied).
    pub fn leaf_rc(&self, value: Rc<Array2<F>>) -> Var<'_, F> {
        self.push_rc(value, Op::Leaf)
    }

    pub fn scalar(&self, x: F) -> Var<'_, F> {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    fn value(&self, id: usize) -> Rc<Array2<F>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn var(&self, id: usize) -> Var<'_, F> {
        Var { tape: self, id }
    }

    /// Gradients of the sum of `output`'s entries with respect to each of
    /// `wrt`. Entries not reachable from `output` get zero gradients.
    pub fn grad<'t>(&'t self, output: Var<'t, F>, wrt: &[Var<'t, F>]) -> Vec<Var<'t, F>> {
        let end = output.id + 1;
        let ops: Vec<Vec<usize>> = {
            let nodes = self.nodes.borrow();
            nodes[..end].iter().map(|n| n.op.inputs()).collect()
        };
        // forward reach from wrt
        let mut reach = vec![false; end];
        for w in wrt {
            if w.id < end {
                reach[w.id] = true;
            }
        }
        for (i, ins) in ops.iter().enumerate() {
            if !reach[i] && ins.iter().any(|&j| reach[j]) {
                reach[i] = true;
            }
        }
        // backward reach from output
        let mut needed = vec![false; end];
        needed[output.id] = true;
        for i in (0..end).rev() {
            if needed[i] {
                for &j in &ops[i] {
                    needed[j] = true;
                }
            }
        }
        let relevant: Vec<bool> = reach.iter().zip(&needed).map(|(a, b)| *a && *b).collect();

        let mut grads: HashMap<usize, Var<'t, F>> = HashMap::new();
        if relevant[output.id] {
            let shape = output.shape();
            grads.insert(output.id, self.leaf(Array2::from_elem(shape, F::one())));
        }
        for i in (0..end).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(&g) = grads.get(&i) else { continue };
            if ops[i].is_empty() {
                continue;
            }
            for (j, gj) in self.backward(i, g, &relevant) {
                let acc = match grads.remove(&j) {
                    Some(prev) => prev + gj,
                    None => gj,
                };
                grads.insert(j, acc);
            }
        }
        wrt.iter()
            .map(|w| match grads.get(&w.id) {
                Some(g) => *g,
                None => self.leaf(Array2::zeros(w.shape())),
            })
            .collect()
    }

    /// Gradient contributions of node `i` to those inputs marked in `need`.
    fn backward<'t>(
        &'t self,
        i: usize,
        g: Var<'t, F>,
        need: &[bool],
    ) -> Vec<(usize, Var<'t, F>)> {
        let op = self.nodes.borrow()[i].op.clone();
        let v = |id| self.var(id);
        use Op::*;
        let mut out = Vec::with_capacity(2);
        let mut give = |j: usize, f: &dyn Fn() -> Var<'t, F>| {
            if need[j] {
                out.push((j, f()));
            }
        };
        match op {
            Leaf => {}
            MatMul { a, b, ta, tb } => {
                let (va, vb) = (v(a), v(b));
                give(a, &|| {
                    if !ta {
                        g.matmul_t(vb, false, !tb)
                    } else {
                        vb.matmul_t(g, tb, true)
                    }
                });
                give(b, &|| {
                    if !tb {
                        va.matmul_t(g, !ta, false)
                    } else {
                        g.matmul_t(va, true, ta)
                    }
                });
            }
            Add(a, b) => {
                give(a, &|| g);
                give(b, &|| g);
            }
            Sub(a, b) => {
                give(a, &|| g);
                give(b, &|| g.scale(-F::one()));
            }
            Mul(a, b) => {
                give(a, &|| g * v(b));
                give(b, &|| g * v(a));
            }
            AddRow(x, r) => {
                give(x, &|| g);
                give(r, &|| g.sum_rows());
            }
            MulRow(x, r) => {
                give(x, &|| g.mul_row(v(r)));
                give(r, &|| (g * v(x)).sum_rows());
            }
            MulCol(x, c) => {
                give(x, &|| g.mul_col(v(c)));
                give(c, &|| (g * v(x)).sum_cols());
            }
            SumRows(x) => give(x, &|| g.broadcast_rows(v(x).shape().0)),
            SumCols(x) => give(x, &|| g.broadcast_cols(v(x).shape().1)),
            SumAll(x) => give(x, &|| {
                let (n, m) = v(x).shape();
                g.broadcast_all(n, m)
            }),
            BroadcastRows(x) => give(x, &|| g.sum_rows()),
            BroadcastCols(x) => give(x, &|| g.sum_cols()),
            BroadcastAll(x) => give(x, &|| g.sum()),
            Scale(x, c) => give(x, &|| g.scale(c)),
            AddConst(x) => give(x, &|| g),
            MulConst(x, m) => give(x, &|| g.mul_const_rc(m.clone())),
            Powf(x, p) => give(x, &|| g * v(x).powf(p - F::one()).scale(p)),
            Exp(x) => give(x, &|| g * v(i)),
            BlockSum(x, blocks) => give(x, &|| g.block_sum_rc(blocks.clone())),
            SliceCols { x, start, width } => give(x, &|| g.pad_cols(start, width)),
            PadCols { x, start } => give(x, &|| {
                let w = v(x).shape().1;
                g.slice_cols(start, start + w)
            }),
            ConcatCols(xs) => {
                let mut start = 0;
                for x in xs {
                    let w = v(x).shape().1;
                    give(x, &|| g.slice_cols(start, start + w));
                    start += w;
                }
            }
            GatherRows(x, idx) => give(x, &|| g.scatter_rows_rc(idx.clone(), v(x).shape().0)),
            ScatterRows(x, idx) => give(x, &|| g.gather_rows_rc(idx.clone())),
        }
        out
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn value(&self) -> Rc<Array2<F>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    pub fn item(&self) -> F {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on a non-scalar");
        v[[0, 0]]
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    fn unary(self, value: Array2<F>, op: Op<F>) -> Var<'t, F> {
        self.tape.push(value, op)
    }

    pub fn matmul(self, other: Var<'t, F>) -> Var<'t, F> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` with optional transposes.
    pub fn matmul_t(self, other: Var<'t, F>, ta: bool, tb: bool) -> Var<'t, F> {
        let (a, b) = (self.value(), other.value());
        let av = if ta { a.t() } else { a.view() };
        let bv = if tb { b.t() } else { b.view() };
        assert_eq!(av.ncols(), bv.nrows(), "matmul shape mismatch");
        let out = av.dot(&bv);
        self.unary(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        )
    }

    fn zip_with(self, other: Var<'t, F>, f: impl Fn(F, F) -> F) -> Array2<F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.dim(), b.dim(), "elementwise shape mismatch");
        let mut out = (*a).clone();
        out.zip_mut_with(&*b, |x, &y| *x = f(*x, y));
        out
    }

    pub fn add_row(self, row: Var<'t, F>) -> Var<'t, F> {
        let (x, r) = (self.value(), row.value());
        assert_eq!(r.dim(), (1, x.ncols()), "add_row shape mismatch");
        let mut out = (*x).clone();
        let r = r.row(0);
        for mut row in out.rows_mut() {
            row += &r;
        }
        self.unary(out, Op::AddRow(self.id, row.id))
    }

    pub fn mul_row(self, row: Var<'t, F>) -> Var<'t, F> {
        let (x, r) = (self.value(), row.value());
        assert_eq!(r.dim(), (1, x.ncols()), "mul_row shape mismatch");
        let mut out = (*x).clone();
        let r = r.row(0);
        for mut row in out.rows_mut() {
            row *= &r;
        }
        self.unary(out, Op::MulRow(self.id, row.id))
    }

    pub fn mul_col(self, col: Var<'t, F>) -> Var<'t, F> {
        let (x, c) = (self.value(), col.value());
        assert_eq!(c.dim(), (x.nrows(), 1), "mul_col shape mismatch");
        let mut out = (*x).clone();
        for (mut row, &k) in out.rows_mut().into_iter().zip(c.iter()) {
            row *= k;
        }
        self.unary(out, Op::MulCol(self.id, col.id))
    }

    /// Column sums, shape `1 × m`.
    pub fn sum_rows(self) -> Var<'t, F> {
        let out = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(out, Op::SumRows(self.id))
    }

    /// Row sums, shape `n × 1`.
    pub fn sum_cols(self) -> Var<'t, F> {
        let out = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(out, Op::SumCols(self.id))
    }

    pub fn sum(self) -> Var<'t, F> {
        let s = self.value().sum();
        self.unary(Array2::from_elem((1, 1), s), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t, F> {
        let (n, m) = self.shape();
        self.sum().scale(F::one() / F::c((n * m) as f64))
    }

    pub fn broadcast_rows(self, n: usize) -> Var<'t, F> {
        let x = self.value();
        assert_eq!(x.nrows(), 1);
        let mut out = Array2::zeros((n, x.ncols()));
        for mut row in out.rows_mut() {
            row.assign(&x.row(0));
        }
        self.unary(out, Op::BroadcastRows(self.id))
    }

    pub fn broadcast_cols(self, m: usize) -> Var<'t, F> {
        let x = self.value();
        assert_eq!(x.ncols(), 1);
        let out = x.broadcast((x.nrows(), m)).unwrap().to_owned();
        self.unary(out, Op::BroadcastCols(self.id))
    }

    pub fn broadcast_all(self, n: usize, m: usize) -> Var<'t, F> {
        let x = self.value();
        assert_eq!(x.dim(), (1, 1));
        let out = Array2::from_elem((n, m), x[[0, 0]]);
        self.unary(out, Op::BroadcastAll(self.id))
    }

    pub fn scale(self, c: F) -> Var<'t, F> {
        let out = self.value().mapv(|x| x * c);
        self.unary(out, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: F) -> Var<'t, F> {
        let out = self.value().mapv(|x| x + c);
        self.unary(out, Op::AddConst(self.id))
    }

    /// Adds a constant array (no gradient flows into it).
    pub fn add_const(self, c: &Array2<F>) -> Var<'t, F> {
        let out = &*self.value() + c;
        self.unary(out, Op::AddConst(self.id))
    }

    pub fn mul_const(self, m: Array2<F>) -> Var<'t, F> {
        self.mul_const_rc(Rc::new(m))
    }

    fn mul_const_rc(self, m: Rc<Array2<F>>) -> Var<'t, F> {
        let x = self.value();
        assert_eq!(x.dim(), m.dim(), "mul_const shape mismatch");
        let out = &*x * &*m;
        self.unary(out, Op::MulConst(self.id, m))
    }

    pub fn powf(self, p: F) -> Var<'t, F> {
        let out = self.value().mapv(|x| x.powf(p));
        self.unary(out, Op::Powf(self.id, p))
    }

    pub fn sqrt(self) -> Var<'t, F> {
        self.powf(F::c(0.5))
    }

    pub fn exp(self) -> Var<'t, F> {
        let out = self.value().mapv(|x| x.exp());
        self.unary(out, Op::Exp(self.id))
    }

    pub fn leaky_relu(self, slope: F) -> Var<'t, F> {
        let mask = self
            .value()
            .mapv(|x| if x > F::zero() { F::one() } else { slope });
        self.mul_const(mask)
    }

    /// Replaces each entry with the sum over its column block.
    pub fn block_sum(self, blocks: &[(usize, usize)]) -> Var<'t, F> {
        self.block_sum_rc(Rc::new(blocks.to_vec()))
    }

    fn block_sum_rc(self, blocks: Blocks) -> Var<'t, F> {
        let x = self.value();
        let mut out = Array2::zeros(x.dim());
        for (xr, mut or) in x.rows().into_iter().zip(out.rows_mut()) {
            for &(s, w) in blocks.iter() {
                let mut acc = F::zero();
                for k in s..s + w {
                    acc += xr[k];
                }
                for k in s..s + w {
                    or[k] = acc;
                }
            }
        }
        self.unary(out, Op::BlockSum(self.id, blocks))
    }

    /// Softmax within each column block, stabilised by a per-block maximum
    /// that is treated as a constant.
    pub fn block_softmax(self, blocks: &[(usize, usize)]) -> Var<'t, F> {
        let x = self.value();
        let mut shift = Array2::zeros(x.dim());
        for (xr, mut sr) in x.rows().into_iter().zip(shift.rows_mut()) {
            for &(s, w) in blocks {
                let mx = (s..s + w).map(|k| xr[k]).fold(F::neg_infinity(), F::max);
                for k in s..s + w {
                    sr[k] = -mx;
                }
            }
        }
        let e = self.add_const(&shift).exp();
        let z = e.block_sum(blocks);
        e * z.powf(-F::one())
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t, F> {
        let x = self.value();
        assert!(start <= end && end <= x.ncols(), "slice out of range");
        let out = x.slice(ndarray::s![.., start..end]).to_owned();
        self.unary(
            out,
            Op::SliceCols {
                x: self.id,
                start,
                width: x.ncols(),
            },
        )
    }

    /// Embeds into `width` columns starting at `start`, zero elsewhere.
    pub fn pad_cols(self, start: usize, width: usize) -> Var<'t, F> {
        let x = self.value();
        let mut out = Array2::zeros((x.nrows(), width));
        out.slice_mut(ndarray::s![.., start..start + x.ncols()])
            .assign(&*x);
        self.unary(
            out,
            Op::PadCols { x: self.id, start },
        )
    }

    pub fn concat_cols(parts: &[Var<'t, F>]) -> Var<'t, F> {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Array2<F>>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        parts[0].unary(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Var<'t, F> {
        self.gather_rows_rc(Rc::new(idx.to_vec()))
    }

    fn gather_rows_rc(self, idx: Rc<Vec<usize>>) -> Var<'t, F> {
        let out = self.value().select(Axis(0), &idx);
        self.unary(out, Op::GatherRows(self.id, idx))
    }

    fn scatter_rows_rc(self, idx: Rc<Vec<usize>>, n: usize) -> Var<'t, F> {
        let x = self.value();
        let mut out = Array2::zeros((n, x.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            let mut row = out.row_mut(r);
            row += &x.row(i);
        }
        self.unary(out, Op::ScatterRows(self.id, idx))
    }

    /// Euclidean norm of each row, `n × 1`, smoothed by `eps` under the root.
    pub fn row_norm(self, eps: F) -> Var<'t, F> {
        (self * self).sum_cols().add_scalar(eps).sqrt()
    }
}

impl<'t, F: Real> std::ops::Add for Var<'t, F> {
    type Output = Var<'t, F>;
    fn add(self, rhs: Self) -> Self {
        let out = self.zip_with(rhs, |a, b| a + b);
        self.unary(out, Op::Add(self.id, rhs.id))
    }
}

impl<'t, F: Real> std::ops::Sub for Var<'t, F> {
    type Output = Var<'t, F>;
    fn sub(self, rhs: Self) -> Self {
        let out = self.zip_with(rhs, |a, b| a - b);
        self.unary(out, Op::Sub(self.id, rhs.id))
    }
}

impl<'t, F: Real> std::ops::Mul for Var<'t, F> {
    type Output = Var<'t, F>;
    fn mul(self, rhs: Self) -> Self {
        let out = self.zip_with(rhs, |a, b| a * b);
        self.unary(out, Op::Mul(self.id, rhs.id))
    }
}

impl<'t, F: Real> std::ops::Neg for Var<'t, F> {
    type Output = Var<'t, F>;
    fn neg(self) -> Self {
        self.scale(-F::one())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn random(n: usize, m: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, m), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x`.
    fn numeric(f: &dyn Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut p = x.clone();
            p[[i, j]] += h;
            let mut m = x.clone();
            m[[i, j]] -= h;
            g[[i, j]] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn check<Fwd>(x0: Array2<f64>, fwd: Fwd)
    where
        Fwd: for<'t> Fn(Var<'t, f64>) -> Var<'t, f64>,
    {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = fwd(x).sum();
        let g = tape.grad(y, &[x])[0].value();
        let f = |p: &Array2<f64>| {
            let t = Tape::new();
            fwd(t.leaf(p.clone())).sum().item()
        };
        let n = numeric(&f, &x0);
        for (a, b) in g.iter().zip(n.iter()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-7);
            assert!(rel < 1e-5 || (a - b).abs() < 1e-8, "analytic {a} numeric {b}");
        }
    }

    #[test]
    fn elementwise_and_reductions() {
        let w = random(3, 4, 1);
        check(random(5, 3, 2), move |x| {
            let t = x.tape();
            let wv = t.leaf(w.clone());
            let h = x.matmul(wv);
            (h * h).sum_rows().broadcast_rows(2).scale(0.3)
        });
        check(random(4, 3, 3), |x| (x * x).sum_cols().add_scalar(1.0).powf(-0.5));
        check(random(4, 3, 4), |x| x.exp().mul_row(x.sum_rows()) - x);
        check(random(4, 3, 5), |x| x.mul_col(x.slice_cols(1, 2)).leaky_relu(0.2));
    }

    #[test]
    fn transposed_products() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let b0 = random(3, 3, 6);
            check(random(3, 3, 7), move |x| {
                let b = x.tape().leaf(b0.clone());
                x.matmul_t(b, ta, tb) + b.matmul_t(x, tb, ta)
            });
        }
    }

    #[test]
    fn structural_ops() {
        let blocks = vec![(0, 2), (2, 3)];
        check(random(3, 5, 8), move |x| {
            x.block_softmax(&blocks).mul_const(random(3, 5, 9))
        });
        check(random(4, 2, 10), |x| {
            let g = x.gather_rows(&[3, 0, 0, 2]);
            Var::concat_cols(&[g, g.scale(2.0)]).pad_cols(1, 6).exp()
        });
        check(random(1, 1, 11), |x| x.broadcast_all(2, 3).exp().sum().broadcast_cols(2));
        check(random(3, 2, 12), |x| (x * x).mean().broadcast_all(1, 1).sqrt());
    }

    #[test]
    fn block_softmax_sums_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(array![[1000.0, -5.0, 0.0, 1.0, 2.0]]);
        let s = x.block_softmax(&[(0, 2), (2, 3)]).value();
        assert!((s[[0, 0]] + s[[0, 1]] - 1.0).abs() < 1e-12);
        assert!((s.slice(ndarray::s![0, 2..]).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn second_order_through_gradient() {
        // d/dw of ||d(sum(tanh-free poly))/dx||^2 checked numerically in w
        let x0 = random(3, 2, 13);
        let w0 = random(2, 1, 14);
        let penalty = |w: &Array2<f64>| -> (f64, Array2<f64>) {
            let tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let wv = tape.leaf(w.clone());
            let h = x.matmul(wv);
            let out = (h * h * h).sum();
            let gx = tape.grad(out, &[x])[0];
            let p = gx.row_norm(1e-12).add_scalar(-1.0);
            let loss = (p * p).mean();
            let gw = tape.grad(loss, &[wv])[0].value();
            (loss.item(), (*gw).clone())
        };
        let (_, analytic) = penalty(&w0);
        let num = numeric(&|w| penalty(w).0, &w0);
        for (a, b) in analytic.iter().zip(num.iter()) {
            assert!((a - b).abs() / a.abs().max(b.abs()).max(1e-7) < 1e-5);
        }
    }

    #[test]
    fn unreachable_gradient_is_zero() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(random(2, 2, 1));
        let b = tape.leaf(random(2, 2, 2));
        let y = (a * a).sum();
        let g = tape.grad(y, &[a, b]);
        assert!(g[1].value().iter().all(|&v| v == 0.0));
    }
}
