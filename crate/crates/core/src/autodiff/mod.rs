//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse. Graphs are cheap and meant to be rebuilt for each
//! training step.

pub mod gradcheck;
pub mod resample;
pub mod spectral;

use std::collections::HashMap;
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

pub use resample::ResampleMap;
pub use spectral::SpectralPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Gelu,
    Tanh,
    Relu,
    Exp,
    Log,
    Sqrt,
    Square,
    Recip,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Unary(Var, Unary),
    SumAll(Var),
    MeanRows(Var),
    SumCols(Var),
    BroadcastRows(Var),
    SoftmaxRows(Var),
    LayerNorm(Var, f64),
    NormalizeRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Resample(Var, Rc<ResampleMap>),
    Im2Col { x: Var, h: usize, w: usize },
    SpectralConv { x: Var, wre: Var, wim: Var, plan: Rc<SpectralPlan> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

const NORMALIZE_FLOOR: f64 = 1e-12;

pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self { store: Some(store), nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store.expect("graph has no parameter store")
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used for input-gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store();
        let v = self.push(store.get(id).clone(), Op::Param, store.is_trainable(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Cut the gradient path: the value is copied into a constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// `a (n×d) + b (1×d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1);
        assert_eq!(av.cols(), bv.cols(), "add_row width");
        let cols = av.cols();
        let data = av.data().iter().enumerate().map(|(i, x)| x + bv.data()[i % cols]).collect();
        let t = Tensor::new(av.rows(), cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::AddRow(a, b), rg)
    }

    /// `a (n×d) ⊙ b (1×d)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1);
        assert_eq!(av.cols(), bv.cols(), "mul_row width");
        let cols = av.cols();
        let data = av.data().iter().enumerate().map(|(i, x)| x * bv.data()[i % cols]).collect();
        let t = Tensor::new(av.rows(), cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MulRow(a, b), rg)
    }

    /// `a (n×d) ⊙ g (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, g: Var) -> Var {
        let (av, gv) = (self.value(a), self.value(g));
        assert_eq!(gv.cols(), 1);
        assert_eq!(av.rows(), gv.rows(), "mul_col height");
        let cols = av.cols();
        let data = av.data().iter().enumerate().map(|(i, x)| x * gv.data()[i / cols]).collect();
        let t = Tensor::new(av.rows(), cols, data);
        let rg = self.rg(a) || self.rg(g);
        self.push(t, Op::MulCol(a, g), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::Shift(a), rg)
    }

    /// Multiply by a `1×1` variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let t = self.value(a).map(|x| x * sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(t, Op::ScaleBy(a, s), rg)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Gelu => gelu,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |x| x.max(0.0),
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
            Unary::Recip => |x| 1.0 / x,
        };
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, Op::Unary(a, kind), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_t inner width");
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), k as isize, 1, bv.data(), 1, k as isize, 0.0, &mut out, n as isize);
        let t = Tensor::new(m, n, out);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `n×d → 1×d`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a).mean_rows();
        let rg = self.rg(a);
        self.push(t, Op::MeanRows(a), rg)
    }

    /// Row sums: `n×d → n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row_slice(r).iter().sum()).collect();
        let t = Tensor::column(data);
        let rg = self.rg(a);
        self.push(t, Op::SumCols(a), rg)
    }

    /// Repeat a `1×d` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1);
        let mut data = Vec::with_capacity(n * av.cols());
        for _ in 0..n {
            data.extend_from_slice(av.data());
        }
        let t = Tensor::new(n, av.cols(), data);
        let rg = self.rg(a);
        self.push(t, Op::BroadcastRows(a), rg)
    }

    // ---- normalisation ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let t = Tensor::new(av.rows(), cols, data);
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    /// Per-row layer normalisation without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let (mu, sigma) = row_moments(row, eps);
            row.iter_mut().for_each(|x| *x = (*x - mu) / sigma);
        }
        let t = Tensor::new(av.rows(), cols, data);
        let rg = self.rg(a);
        self.push(t, Op::LayerNorm(a, eps), rg)
    }

    /// Scale each row to unit Euclidean norm (rows below 1e-12 are divided by 1e-12).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORMALIZE_FLOOR);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let t = Tensor::new(av.rows(), cols, data);
        let rg = self.rg(a);
        self.push(t, Op::NormalizeRows(a), rg)
    }

    // ---- structure ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols height");
                data.extend_from_slice(v.row_slice(r));
            }
        }
        let t = Tensor::new(rows, total, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(t, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let t = Tensor::new(rows, cols, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(t, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a).slice_rows(start, end);
        let rg = self.rg(a);
        self.push(t, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a).slice_cols(start, end);
        let rg = self.rg(a);
        self.push(t, Op::SliceCols(a, start), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a).clone().reshape(rows, cols);
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    pub fn resample(&mut self, a: Var, map: Rc<ResampleMap>) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), map.in_rows, "resample input rows");
        let t = Tensor::new(map.out_rows, av.cols(), map.apply(av.data(), av.cols()));
        let rg = self.rg(a);
        self.push(t, Op::Resample(a, map), rg)
    }

    /// 3×3 zero-padded patches of an `h×w` token map.
    pub fn im2col3(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), h * w, "im2col grid");
        let c = xv.cols();
        let t = Tensor::new(h * w, 9 * c, spectral::im2col3(xv.data(), h, w, c));
        let rg = self.rg(x);
        self.push(t, Op::Im2Col { x, h, w }, rg)
    }

    /// Truncated Fourier-mode convolution. `wre`, `wim` are `(c_in·c_out) × modes`.
    pub fn spectral_conv(&mut self, x: Var, wre: Var, wim: Var, plan: Rc<SpectralPlan>) -> Var {
        let xv = self.value(x);
        let (wr, wi) = (self.value(wre), self.value(wim));
        assert_eq!(xv.rows(), plan.h * plan.w, "spectral_conv grid");
        assert_eq!(wr.cols(), plan.n_modes(), "spectral weight modes");
        let c_in = xv.cols();
        let c_out = wr.rows() / c_in;
        assert_eq!(c_in * c_out, wr.rows(), "spectral weight channels");
        let y = plan.apply(xv.data(), c_in, c_out, wr.data(), wi.data());
        let t = Tensor::new(plan.h * plan.w, c_out, y);
        let rg = self.rg(x) || self.rg(wre) || self.rg(wim);
        self.push(t, Op::SpectralConv { x, wre, wim, plan }, rg)
    }

    // ---- composites ----

    /// `x·w + b` with `b` a `1×out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn mean_of(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        self.scale(acc, 1.0 / vars.len() as f64)
    }

    /// Frobenius norm as a `1×1` value.
    pub fn frobenius(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let s = self.sum_all(sq);
        self.sqrt(s)
    }

    // ---- backward ----

    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.rows(), rv.cols(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].as_ref().map(|_| (id, v)))
            .collect();
        Gradients { grads, params }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y), grads);
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y), grads);
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone(), grads);
                if self.rg(*b) {
                    acc(*b, col_sums(g), grads);
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = av.cols();
                if self.rg(*a) {
                    let data = g.data().iter().enumerate().map(|(k, x)| x * bv.data()[k % cols]).collect();
                    acc(*a, Tensor::new(av.rows(), cols, data), grads);
                }
                if self.rg(*b) {
                    acc(*b, col_sums(&g.zip_map(av, |x, y| x * y)), grads);
                }
            }
            Op::MulCol(a, gate) => {
                let (av, gv) = (self.value(*a), self.value(*gate));
                let cols = av.cols();
                if self.rg(*a) {
                    let data = g.data().iter().enumerate().map(|(k, x)| x * gv.data()[k / cols]).collect();
                    acc(*a, Tensor::new(av.rows(), cols, data), grads);
                }
                if self.rg(*gate) {
                    let prod = g.zip_map(av, |x, y| x * y);
                    let data = (0..av.rows()).map(|r| prod.row_slice(r).iter().sum()).collect();
                    acc(*gate, Tensor::column(data), grads);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s), grads),
            Op::Shift(a) => acc(*a, g.clone(), grads),
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).item();
                if self.rg(*a) {
                    acc(*a, g.map(|x| x * sv), grads);
                }
                if self.rg(*s) {
                    let d: f64 = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    acc(*s, Tensor::scalar(d), grads);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    // ga = g · bᵀ
                    let mut out = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), n as isize, 1, bv.data(), 1, n as isize, 0.0, &mut out, k as isize);
                    acc(*a, Tensor::new(m, k, out), grads);
                }
                if self.rg(*b) {
                    // gb = aᵀ · g
                    let mut out = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, av.data(), 1, k as isize, g.data(), n as isize, 1, 0.0, &mut out, n as isize);
                    acc(*b, Tensor::new(k, n, out), grads);
                }
            }
            Op::MatMulT(a, b) => {
                // y = a · bᵀ, a: m×k, b: n×k
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.rg(*a) {
                    let mut out = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), n as isize, 1, bv.data(), k as isize, 1, 0.0, &mut out, k as isize);
                    acc(*a, Tensor::new(m, k, out), grads);
                }
                if self.rg(*b) {
                    // gb = gᵀ · a
                    let mut out = vec![0.0; n * k];
                    gemm(n, m, k, 1.0, g.data(), 1, n as isize, av.data(), k as isize, 1, 0.0, &mut out, k as isize);
                    acc(*b, Tensor::new(n, k, out), grads);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose(), grads),
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let d: Vec<f64> = match kind {
                    Unary::Sigmoid => y.data().iter().zip(g.data()).map(|(s, g)| g * s * (1.0 - s)).collect(),
                    Unary::Gelu => x.data().iter().zip(g.data()).map(|(&x, g)| g * gelu_grad(x)).collect(),
                    Unary::Tanh => y.data().iter().zip(g.data()).map(|(t, g)| g * (1.0 - t * t)).collect(),
                    Unary::Relu => x.data().iter().zip(g.data()).map(|(&x, g)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    Unary::Exp => y.data().iter().zip(g.data()).map(|(e, g)| g * e).collect(),
                    Unary::Log => x.data().iter().zip(g.data()).map(|(x, g)| g / x).collect(),
                    Unary::Sqrt => y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(s, g)| if *s > 0.0 { 0.5 * g / s } else { 0.0 })
                        .collect(),
                    Unary::Square => x.data().iter().zip(g.data()).map(|(x, g)| 2.0 * g * x).collect(),
                    Unary::Recip => x.data().iter().zip(g.data()).map(|(x, g)| -g / (x * x)).collect(),
                };
                acc(*a, Tensor::new(x.rows(), x.cols(), d), grads);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Tensor::full(r, c, g.item()), grads);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let inv = 1.0 / r as f64;
                acc(*a, Tensor::from_fn(r, c, |_, j| g.data()[j] * inv), grads);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Tensor::from_fn(r, c, |i, _| g.data()[i]), grads);
            }
            Op::BroadcastRows(a) => acc(*a, col_sums(g), grads),
            Op::SoftmaxRows(a) => {
                let cols = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (ys, gs) = (y.row_slice(r), g.row_slice(r));
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = ys[c] * (gs[c] - dot);
                    }
                }
                acc(*a, Tensor::new(y.rows(), cols, d), grads);
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let cols = x.cols();
                let nf = cols as f64;
                let mut d = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    let (_, sigma) = row_moments(x.row_slice(r), *eps);
                    let (ys, gs) = (y.row_slice(r), g.row_slice(r));
                    let gmean = gs.iter().sum::<f64>() / nf;
                    let gy_mean = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for c in 0..cols {
                        d[r * cols + c] = (gs[c] - gmean - ys[c] * gy_mean) / sigma;
                    }
                }
                acc(*a, Tensor::new(x.rows(), cols, d), grads);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let cols = x.cols();
                let mut d = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    let norm = x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let (ys, gs) = (y.row_slice(r), g.row_slice(r));
                    if norm > NORMALIZE_FLOOR {
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            d[r * cols + c] = (gs[c] - ys[c] * dot) / norm;
                        }
                    } else {
                        for c in 0..cols {
                            d[r * cols + c] = gs[c] / NORMALIZE_FLOOR;
                        }
                    }
                }
                acc(*a, Tensor::new(x.rows(), cols, d), grads);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        acc(p, g.slice_cols(start, start + w), grads);
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.rg(p) {
                        acc(p, g.slice_rows(start, start + h), grads);
                    }
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut t = Tensor::zeros(r, c);
                t.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*a, t, grads);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut t = Tensor::zeros(r, c);
                for row in 0..r {
                    for j in 0..g.cols() {
                        t.set(row, start + j, g.get(row, j));
                    }
                }
                acc(*a, t, grads);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, g.clone().reshape(r, c), grads);
            }
            Op::Resample(a, map) => {
                let c = g.cols();
                acc(*a, Tensor::new(map.in_rows, c, map.apply_transpose(g.data(), c)), grads);
            }
            Op::Im2Col { x, h, w } => {
                let c = self.value(*x).cols();
                acc(*x, Tensor::new(h * w, c, spectral::col2im3(g.data(), *h, *w, c)), grads);
            }
            Op::SpectralConv { x, wre, wim, plan } => {
                let xv = self.value(*x);
                let (wr, wi) = (self.value(*wre), self.value(*wim));
                let c_in = xv.cols();
                let c_out = g.cols();
                let (gx, gwr, gwi) = plan.backward(xv.data(), g.data(), c_in, c_out, wr.data(), wi.data());
                acc(*x, Tensor::new(xv.rows(), c_in, gx), grads);
                acc(*wre, Tensor::new(wr.rows(), wr.cols(), gwr), grads);
                acc(*wim, Tensor::new(wi.rows(), wi.cols(), gwi), grads);
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.grads[v.0].as_ref())
    }

    /// Gradients of every trainable parameter that took part in the pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, x) in out.iter_mut().zip(g.row_slice(r)) {
            *o += x;
        }
    }
    Tensor::row(out)
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, (var + eps).sqrt())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::gradcheck::GradCheck;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(r, c, 1.0, &mut rng)
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        let inputs = [rand_t(3, 4, 1), rand_t(3, 4, 2), rand_t(1, 4, 3), rand_t(3, 1, 4)];
        let err = GradCheck::default().inputs(None, &inputs, |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.add_row(a, v[2]);
            let c = g.mul_row(b, v[2]);
            let d = g.mul_col(c, v[3]);
            let e = g.sub(d, v[0]);
            let f = g.gelu(e);
            let s = g.sigmoid(f);
            let t = g.unary(s, Unary::Tanh);
            g.scale(t, 1.7)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn matmul_family_gradients() {
        let inputs = [rand_t(3, 5, 5), rand_t(5, 2, 6), rand_t(4, 5, 7)];
        let err = GradCheck::default().inputs(None, &inputs, |g, v| {
            let a = g.matmul(v[0], v[1]);
            let b = g.matmul_t(v[0], v[2]);
            let bt = g.transpose(b);
            let c = g.matmul(bt, a);
            g.sum_all(c)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn normalisation_gradients() {
        let inputs = [rand_t(4, 6, 8)];
        let err = GradCheck::default().inputs(None, &inputs, |g, v| {
            let a = g.softmax_rows(v[0]);
            let b = g.layer_norm(v[0], 1e-5);
            let c = g.normalize_rows(v[0]);
            let ab = g.add(a, b);
            g.add(ab, c)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn structural_gradients() {
        let inputs = [rand_t(4, 3, 9), rand_t(4, 2, 10), rand_t(1, 3, 11)];
        let err = GradCheck::default().inputs(None, &inputs, |g, v| {
            let cat = g.concat_cols(&[v[0], v[1]]);
            let sl = g.slice_cols(cat, 1, 4);
            let rows = g.concat_rows(&[sl, v[2]]);
            let part = g.slice_rows(rows, 1, 5);
            let r = g.reshape(part, 2, 6);
            let m = g.mean_rows(r);
            let b = g.broadcast_rows(m, 3);
            let s = g.sum_cols(b);
            let sq = g.square(s);
            let e = g.exp(sq);
            let l = g.shift(e, 1.0);
            g.log(l)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn resample_and_im2col_gradients() {
        let inputs = [rand_t(16, 2, 12)];
        let up = Rc::new(ResampleMap::bilinear(4, 4, 6, 5));
        let pool = Rc::new(ResampleMap::avg_pool2(4, 4));
        let nn = Rc::new(ResampleMap::upsample2(2, 2));
        let err = GradCheck::default().inputs(None, &inputs, move |g, v| {
            let a = g.resample(v[0], up.clone());
            let p = g.resample(v[0], pool.clone());
            let u = g.resample(p, nn.clone());
            let c = g.im2col3(u, 4, 4);
            let sa = g.sum_all(a);
            let sc = g.square(c);
            let sc = g.sum_all(sc);
            g.add(sa, sc)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn scalar_multiplier_gradient() {
        let inputs = [rand_t(3, 3, 13), rand_t(1, 1, 14)];
        let err = GradCheck::default().inputs(None, &inputs, |g, v| {
            let a = g.scale_by(v[0], v[1]);
            let b = g.frobenius(a);
            let r = g.recip(b);
            g.sqrt(r)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(rand_t(5, 7, 15).map(|v| v * 30.0));
        let s = g.softmax_rows(x);
        for r in 0..5 {
            let sum: f64 = g.value(s).row_slice(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.input(Tensor::scalar(3.0));
        let c = g.mul(a, b);
        let grads = g.backward(c);
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b).unwrap().item(), 2.0);
    }
}
