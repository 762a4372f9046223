//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! then walks the record in reverse and accumulates vector-Jacobian
//! products. Every value is a 2D matrix (token sequences are `L × D`,
//! weights `D_in × D_out`, biases and gains `1 × D`, scalars `1 × 1`).
//!
//! The selective scan is a single tape operation with a hand-written
//! adjoint, so its `T × D × N` state history is stored once rather than as
//! thousands of tiny nodes.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

use ndarray::{Array2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::ssm_core::{scan_kernel, transpose, Discretization, ScanTrace};

/// Floating-point scalar usable on the tape (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// `exp` used by the scan and the activations: the library `exp` for
    /// `f64`, a branch-free polynomial for `f32` that the compiler can
    /// vectorise.
    #[inline(always)]
    fn fast_exp(self) -> Self {
        self.exp()
    }

    /// `tanh` counterpart of [`fast_exp`](Self::fast_exp).
    #[inline(always)]
    fn fast_tanh(self) -> Self {
        self.tanh()
    }
}

impl Real for f32 {
    #[inline(always)]
    fn fast_exp(self) -> Self {
        exp_f32(self)
    }

    #[inline(always)]
    fn fast_tanh(self) -> Self {
        let e = exp_f32(-2.0 * self.abs());
        ((1.0 - e) / (1.0 + e)).copysign(self)
    }
}

impl Real for f64 {}

/// `exp` for `f32` with ~1 ulp error on `[-87, 88]` (inputs are clamped to
/// that range). Cody-Waite reduction `x = n ln2 + r` followed by a degree-6
/// polynomial for `exp(r)` and exponent-bit scaling by `2^n`.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5 · 2^23
    let x = x.max(-87.0).min(88.0);
    let t = x * std::f32::consts::LOG2_E + ROUND;
    let n = t - ROUND;
    let ni = (t.to_bits() as i32).wrapping_sub(ROUND.to_bits() as i32);
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5e-1;
    let e = p * r * r + r + 1.0;
    e * f32::from_bits(((ni + 127) << 23) as u32)
}

/// Dot product with eight independent partial sums (vectorisable).
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unary {
    Identity,
    /// Tanh approximation of the Gaussian error linear unit.
    Gelu,
    Silu,
    Softplus,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Unary {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Unary::Identity => x,
            Unary::Gelu => {
                let inner = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
                T::of(0.5) * x * (T::one() + inner.fast_tanh())
            }
            Unary::Silu => x / (T::one() + (-x).fast_exp()),
            Unary::Softplus => x.max(T::zero()) + (-x.abs()).fast_exp().ln_1p(),
        }
    }

    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Unary::Identity => T::one(),
            Unary::Gelu => {
                let x2 = x * x;
                let inner = T::of(GELU_C) * (x + T::of(GELU_K) * x2 * x);
                let t = inner.fast_tanh();
                let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * x2);
                T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
            }
            Unary::Silu => {
                let s = T::one() / (T::one() + (-x).fast_exp());
                s * (T::one() + x * (T::one() - s))
            }
            Unary::Softplus => T::one() / (T::one() + (-x).fast_exp()),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct ScanOp<T> {
    u: Var,
    delta: Var,
    b: Var,
    c: Var,
    a: Var,
    d: Var,
    trace: ScanTrace<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Unary(Var, Unary),
    PermuteRows(Var, Arc<Vec<usize>>),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<T>),
    Scan(Box<ScanOp<T>>),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward evaluation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    flops: u64,
    adjoint_fault: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape variables bound to every entry of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Accumulated adjoints from one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient per parameter, zero-filled where a parameter did not
    /// influence the output.
    pub fn params(&self, vars: &ParamVars, store: &ParamStore<T>) -> Vec<Array2<T>> {
        store
            .iter()
            .map(|(id, p)| match self.get(vars.get(id)) {
                Some(g) => g.clone(),
                None => Array2::zeros(p.value.dim()),
            })
            .collect()
    }
}

fn sum_rows<T: Real>(g: &Array2<T>) -> Array2<T> {
    g.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn accumulate<T: Real>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), flops: 0, adjoint_fault: false }
    }

    /// A tape whose scan adjoint is deliberately wrong; used as a negative
    /// control for gradient checking.
    pub fn with_adjoint_fault() -> Self {
        Tape { adjoint_fault: true, ..Self::new() }
    }

    /// Floating-point operations recorded by the forward pass so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Bind every parameter as a differentiable leaf.
    pub fn bind_params(&mut self, store: &ParamStore<T>) -> ParamVars {
        ParamVars(store.iter().map(|(_, p)| self.leaf(p.value.clone())).collect())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dim();
        let (k2, n) = self.value(b).dim();
        assert_eq!(k, k2, "matmul inner dimensions differ: {m}x{k} · {k2}x{n}");
        self.flops += 2 * (m * k * n) as u64;
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        self.flops += self.value(a).len() as u64;
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape mismatch");
        self.flops += self.value(a).len() as u64;
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// `a + row` with `row` of shape `1 × cols` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).dim(), (1, self.value(a).ncols()), "add_row shape mismatch");
        self.flops += self.value(a).len() as u64;
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    /// `a ⊙ row` with `row` of shape `1 × cols` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).dim(), (1, self.value(a).ncols()), "mul_row shape mismatch");
        self.flops += self.value(a).len() as u64;
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.flops += self.value(a).len() as u64;
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// `s · a` where `s` is a `1 × 1` variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).dim(), (1, 1), "scale_by expects a 1x1 scalar");
        self.flops += self.value(a).len() as u64;
        let c = self.value(s)[[0, 0]];
        let value = self.value(a) * c;
        self.push(value, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        if f == Unary::Identity {
            return a;
        }
        self.flops += self.value(a).len() as u64;
        let src = self.value(a);
        // One monomorphic loop per activation so each can vectorise.
        let value = match f {
            Unary::Identity => src.clone(),
            Unary::Gelu => src.mapv(|x| Unary::Gelu.apply(x)),
            Unary::Silu => src.mapv(|x| Unary::Silu.apply(x)),
            Unary::Softplus => src.mapv(|x| Unary::Softplus.apply(x)),
        };
        self.push(value, Op::Unary(a, f), &[a])
    }

    /// Row gather: output row `j` is input row `perm[j]`. `perm` must be a
    /// permutation of the input rows.
    pub fn permute_rows(&mut self, a: Var, perm: Arc<Vec<usize>>) -> Var {
        let src = self.value(a);
        assert_eq!(perm.len(), src.nrows(), "permutation length mismatch");
        let mut value = Array2::zeros(src.dim());
        for (j, &p) in perm.iter().enumerate() {
            value.row_mut(j).assign(&src.row(p));
        }
        self.push(value, Op::PermuteRows(a, perm), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        self.flops += 3 * value.len() as u64;
        for mut row in value.rows_mut() {
            let m = row.fold(T::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row standardisation `(x − mean) / sqrt(var + eps)` with the
    /// population variance over columns.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        self.flops += 4 * self.value(a).len() as u64;
        let src = self.value(a);
        let cols = T::from_usize(src.ncols()).expect("column count");
        let mut value = src.clone();
        let mut inv_std = Vec::with_capacity(src.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.fold(T::zero(), |s, &v| s + v * v) / cols;
            let is = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        self.push(value, Op::LayerNormRows(a, inv_std), &[a])
    }

    /// Selective scan with simplified zero-order hold (`Ā = exp(ΔA)`,
    /// `B̄ = ΔB`).
    ///
    /// `u`, `delta`: `L × E`; `b`, `c`: `L × N`; `a`: `E × N`; `d`: `1 × E`.
    /// Returns `y`: `L × E`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, b: Var, c: Var, a: Var, d: Var) -> Var {
        let (len, ch) = self.value(u).dim();
        let n = self.value(a).ncols();
        assert_eq!(self.value(delta).dim(), (len, ch), "scan delta shape");
        assert_eq!(self.value(b).dim(), (len, n), "scan B shape");
        assert_eq!(self.value(c).dim(), (len, n), "scan C shape");
        assert_eq!(self.value(a).dim(), (ch, n), "scan A shape");
        assert_eq!(self.value(d).dim(), (1, ch), "scan D shape");
        self.flops += (6 * len * ch * n) as u64;
        let slice = |v: Var| self.value(v).as_slice().expect("standard layout");
        let (y, _h, trace) = scan_kernel(
            slice(u),
            slice(delta),
            slice(b),
            slice(c),
            slice(a),
            slice(d),
            None,
            len,
            ch,
            n,
            Discretization::SimplifiedZoh,
            true,
        );
        let value = Array2::from_shape_vec((len, ch), y).expect("scan output shape");
        let op = ScanOp { u, delta, b, c, a, d, trace: trace.expect("trace requested") };
        self.push(value, Op::Scan(Box::new(op)), &[u, delta, b, c, a, d])
    }

    /// Propagate `seed = ∂loss/∂root` back to every differentiable leaf.
    pub fn backward(&self, root: Var, seed: Array2<T>) -> Gradients<T> {
        assert_eq!(seed.dim(), self.value(root).dim(), "seed shape mismatch");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, g.t().as_standard_layout().into_owned()),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g * self.value(*b));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, r) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*r) {
                    accumulate(grads, *r, sum_rows(g));
                }
            }
            Op::MulRow(a, r) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g * self.value(*r));
                }
                if self.wants(*r) {
                    accumulate(grads, *r, sum_rows(&(g * self.value(*a))));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::ScaleBy(a, s) => {
                let c = self.value(*s)[[0, 0]];
                if self.wants(*a) {
                    accumulate(grads, *a, g * c);
                }
                if self.wants(*s) {
                    let dot = Zip::from(g).and(self.value(*a)).fold(T::zero(), |acc, &x, &y| acc + x * y);
                    accumulate(grads, *s, Array2::from_elem((1, 1), dot));
                }
            }
            Op::Unary(a, f) => {
                let mut ga = g.clone();
                let z = Zip::from(&mut ga).and(self.value(*a));
                match f {
                    Unary::Identity => {}
                    Unary::Gelu => z.for_each(|gv, &x| *gv *= Unary::Gelu.derivative(x)),
                    Unary::Silu => z.for_each(|gv, &x| *gv *= Unary::Silu.derivative(x)),
                    Unary::Softplus => z.for_each(|gv, &x| *gv *= Unary::Softplus.derivative(x)),
                }
                accumulate(grads, *a, ga);
            }
            Op::PermuteRows(a, perm) => {
                let mut ga = Array2::zeros(g.dim());
                for (j, &p) in perm.iter().enumerate() {
                    ga.row_mut(p).assign(&g.row(j));
                }
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = g * y;
                for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let s = row.sum();
                    Zip::from(&mut row).and(&yrow).for_each(|r, &yv| *r -= yv * s);
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNormRows(a, inv_std) => {
                let y = &node.value;
                let cols = T::from_usize(y.ncols()).expect("column count");
                let mut ga = g.clone();
                for ((mut row, yrow), &is) in ga.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                    let mean_g = row.sum() / cols;
                    let mean_gy = Zip::from(&row).and(&yrow).fold(T::zero(), |s, &gv, &yv| s + gv * yv) / cols;
                    Zip::from(&mut row).and(&yrow).for_each(|r, &yv| *r = is * (*r - mean_g - yv * mean_gy));
                }
                accumulate(grads, *a, ga);
            }
            Op::Scan(op) => self.backward_scan(op, g, grads),
        }
    }

    fn backward_scan(&self, op: &ScanOp<T>, gy: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let u = self.value(op.u).as_slice().expect("standard layout");
        let delta = self.value(op.delta).as_slice().expect("standard layout");
        let b = self.value(op.b).as_slice().expect("standard layout");
        let c = self.value(op.c).as_slice().expect("standard layout");
        let a = self.value(op.a).as_slice().expect("standard layout");
        let d = self.value(op.d).as_slice().expect("standard layout");
        let gy = gy.as_standard_layout();
        let gy = gy.as_slice().expect("standard layout");
        let (len, ch) = self.value(op.u).dim();
        let n = self.value(op.a).ncols();
        let ScanTrace { decay, states } = &op.trace;

        let at = transpose(a, ch, n);
        let mut gu = vec![T::zero(); len * ch];
        let mut gdelta = vec![T::zero(); len * ch];
        let mut gb = vec![T::zero(); len * n];
        let mut gc = vec![T::zero(); len * n];
        // State-major (`n × ch`) accumulators.
        let mut ga = vec![T::zero(); n * ch];
        let mut gh = vec![T::zero(); n * ch];
        let mut gd = vec![T::zero(); ch];
        let zeros = vec![T::zero(); ch];
        let mut du = vec![T::zero(); ch];
        let mut gk = vec![T::zero(); ch];

        for t in (0..len).rev() {
            let gyl = &gy[t * ch..(t + 1) * ch];
            let ul = &u[t * ch..(t + 1) * ch];
            let dl = &delta[t * ch..(t + 1) * ch];
            let gul = &mut gu[t * ch..(t + 1) * ch];
            let gdl = &mut gdelta[t * ch..(t + 1) * ch];
            for e in 0..ch {
                du[e] = dl[e] * ul[e];
                gd[e] += gyl[e] * ul[e];
                gul[e] = gyl[e] * d[e];
            }
            for k in 0..n {
                let (bk, ck) = (b[t * n + k], c[t * n + k]);
                let base = (t * n + k) * ch;
                let h_t = &states[base..base + ch];
                let h_prev = if t > 0 { &states[base - n * ch..base - n * ch + ch] } else { &zeros[..] };
                let dec = &decay[base..base + ch];
                let ak = &at[k * ch..(k + 1) * ch];
                let ghk = &mut gh[k * ch..(k + 1) * ch];
                let gak = &mut ga[k * ch..(k + 1) * ch];
                gc[t * n + k] = dot(gyl, h_t);
                let (gdl, gul, gk) = (&mut gdl[..ch], &mut gul[..ch], &mut gk[..ch]);
                let (h_prev, dec, ak, ghk, gak) = (&h_prev[..ch], &dec[..ch], &ak[..ch], &mut ghk[..ch], &mut gak[..ch]);
                let (gyl, ul, dl) = (&gyl[..ch], &ul[..ch], &dl[..ch]);
                for e in 0..ch {
                    let g = ghk[e] + gyl[e] * ck;
                    let g_ab = g * h_prev[e] * dec[e];
                    gdl[e] += g_ab * ak[e] + g * bk * ul[e];
                    gak[e] += g_ab * dl[e];
                    gul[e] += g * dl[e] * bk;
                    ghk[e] = g * dec[e];
                    gk[e] = g;
                }
                gb[t * n + k] = dot(gk, &du);
            }
        }
        let ga = transpose(&ga, n, ch);
        if self.adjoint_fault {
            for v in &mut gb {
                *v *= T::of(1.5);
            }
        }
        let mut emit = |v: Var, data: Vec<T>, rows: usize, cols: usize| {
            if self.wants(v) {
                accumulate(grads, v, Array2::from_shape_vec((rows, cols), data).expect("grad shape"));
            }
        };
        emit(op.u, gu, len, ch);
        emit(op.delta, gdelta, len, ch);
        emit(op.b, gb, len, n);
        emit(op.c, gc, len, n);
        emit(op.a, ga, ch, n);
        emit(op.d, gd, 1, ch);
    }
}
