//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and accumulates gradients into each node;
//! parameter gradients are then gathered with [`Tape::param_gradients`].
//!
//! Besides the loss seed, an arbitrary upstream gradient may be added at any
//! recorded node with [`Tape::inject_gradient`]. The injected values are
//! propagated exactly as if the loss had a term whose derivative with
//! respect to that node equals them.
//!
//! ```
//! use disem::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::row(vec![0.5, -1.0]));
//! let y = tape.squash(x);
//! let s = tape.sum(y);
//! tape.backward(s).unwrap();
//! let g = tape.grad(x).unwrap();
//! assert!((g[0] - (1.0 - 0.5f64.tanh().powi(2))).abs() < 1e-15);
//! ```

pub mod checkpoint;
mod params;
mod tensor;

use std::f64::consts::LN_2;
use std::sync::atomic::{AtomicU64, Ordering};

pub use params::ParameterSet;
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::quantization::Quantizer;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Squash(usize),
    Sigmoid(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Log2(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    Pick(usize, usize),
    ColumnVariance(usize),
    StraightThrough(usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            check_finite: false,
        }
    }

    /// Makes `backward` fail on non-finite forward values or gradients.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    /// Drops every node. Handles from before the reset become invalid.
    pub fn reset(&mut self) {
        self.id = NEXT_TAPE.fetch_add(1, Ordering::Relaxed);
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.id < self.nodes.len() {
            Ok(v.id)
        } else {
            Err(Error::ForeignNode(v.id))
        }
    }

    fn val(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.id].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    pub fn owns(&self, v: Var) -> bool {
        self.check(v).is_ok()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records parameter `index` of `params`. Gradients flowing into the
    /// returned handle are reported by [`Tape::param_gradients`].
    pub fn param(&mut self, params: &ParameterSet, index: usize) -> Var {
        self.push(params.tensor(index).clone(), Op::Param(index))
    }

    /// Records every parameter in order.
    pub fn params(&mut self, params: &ParameterSet) -> Vec<Var> {
        (0..params.len()).map(|i| self.param(params, i)).collect()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")))
        }
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.val(a).shape(), self.val(b).shape());
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let data = tensor::matmul(self.val(a).data(), self.val(b).data(), m, k, n);
        let value = Tensor::new(m, n, data)?;
        Ok(self.push(value, Op::MatMul(a.id, b.id)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a.id, b.id)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a.id, b.id)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a.id, b.id)))
    }

    /// `a (m×n) + bias (1×n)` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let ((m, n), (br, bc)) = (self.val(a).shape(), self.val(bias).shape());
        if br != 1 || bc != n {
            return Err(Error::Shape(format!("bias {br}x{bc} for {m}x{n}")));
        }
        let b = self.val(bias).data().to_vec();
        let mut value = self.val(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddBias(a.id, bias.id)))
    }

    /// `s · a` with `s` a recorded `1 × 1` value.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let s_val = self
            .val(s)
            .as_scalar()
            .ok_or_else(|| Error::Shape(format!("mul_scalar by {:?}", self.val(s).shape())))?;
        let value = self.val(a).map(|x| x * s_val);
        Ok(self.push(value, Op::MulScalar(a.id, s.id)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.val(a).map(|x| x * c);
        self.push(value, Op::Scale(a.id, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.val(a).map(|x| x + c);
        self.push(value, Op::AddConst(a.id))
    }

    /// Saturating odd squash onto `(-1, 1)`: `tanh`.
    pub fn squash(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::tanh);
        self.push(value, Op::Squash(a.id))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.val(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a.id))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let mut value = t.clone();
        for row in value.data_mut().chunks_mut(t.cols().max(1)) {
            softmax_in_place(row);
        }
        self.push(value, Op::Softmax(a.id))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let mut value = t.clone();
        for row in value.data_mut().chunks_mut(t.cols().max(1)) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(value, Op::LogSoftmax(a.id))
    }

    /// Elementwise base-2 logarithm.
    pub fn log2(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::log2);
        self.push(value, Op::Log2(a.id))
    }

    /// Horizontal concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.val(p).rows())
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.val(p).rows() != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.val(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.val(p);
                data.extend_from_slice(&t.data()[r * t.cols()..(r + 1) * t.cols()]);
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Vertical stacking of tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.val(p).cols())
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.val(p).cols() != cols) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let data: Vec<f64> = parts.iter().flat_map(|&p| self.val(p).data().iter().copied()).collect();
        let value = Tensor::new(data.len() / cols.max(1), cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let (m, n) = t.shape();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.get(i, j);
            }
        }
        let value = Tensor::new(n, m, data).expect("shape");
        self.push(value, Op::Transpose(a.id))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.id))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.id))
    }

    /// The single element at flat index `index`, as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.val(a);
        let x = *t
            .data()
            .get(index)
            .ok_or_else(|| Error::Shape(format!("pick {index} from {:?}", t.shape())))?;
        Ok(self.push(Tensor::scalar(x), Op::Pick(a.id, index)))
    }

    /// Population variance of each column, as a `1 × n` row.
    pub fn column_variance(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let (m, n) = t.shape();
        let mut out = vec![0.0; n];
        for (j, o) in out.iter_mut().enumerate() {
            let mean = (0..m).map(|i| t.get(i, j)).sum::<f64>() / m as f64;
            *o = (0..m).map(|i| (t.get(i, j) - mean).powi(2)).sum::<f64>() / m as f64;
        }
        self.push(Tensor::row(out), Op::ColumnVariance(a.id))
    }

    /// Forward: quantize every entry. Backward: identity.
    pub fn straight_through(&mut self, a: Var, q: &Quantizer) -> Result<Var> {
        let t = self.val(a);
        let data = t.data().iter().map(|&x| q.quantize(x)).collect::<Result<Vec<_>>>()?;
        let value = Tensor::new(t.rows(), t.cols(), data)?;
        Ok(self.push(value, Op::StraightThrough(a.id)))
    }

    /// One recurrent step `squash(x·w_x + h·w_h + b)`.
    pub fn rnn_cell(&mut self, x: Var, h: Var, w_x: Var, w_h: Var, b: Var) -> Result<Var> {
        let xi = self.matmul(x, w_x)?;
        let hh = self.matmul(h, w_h)?;
        let pre = self.add(xi, hh)?;
        let pre = self.add_bias(pre, b)?;
        Ok(self.squash(pre))
    }

    /// Adds `g` to the upstream gradient of `at`; it is propagated by the
    /// next `backward`.
    pub fn inject_gradient(&mut self, at: Var, g: &[f64]) -> Result<()> {
        let id = self.check(at)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let len = self.nodes[id].value.len();
        if g.len() != len {
            return Err(Error::Shape(format!("injected {} values into a node of {len}", g.len())));
        }
        let slot = self.grads[id].get_or_insert_with(|| vec![0.0; len]);
        for (s, &x) in slot.iter_mut().zip(g) {
            *s += x;
        }
        Ok(())
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward from a non-scalar {:?}",
                self.nodes[root].value.shape()
            )));
        }
        if self.check_finite {
            if let Some(i) = self.nodes[..=root].iter().position(|n| !n.value.all_finite()) {
                return Err(Error::NonFinite(format!("forward value of node {i}")));
            }
        }
        self.backward_done = true;
        self.grads[root].get_or_insert_with(|| vec![0.0])[0] += 1.0;

        for id in (0..=root).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }

        if self.check_finite {
            if let Some(i) = self.grads.iter().position(|g| g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite()))) {
                return Err(Error::NonFinite(format!("gradient of node {i}")));
            }
        }
        Ok(())
    }

    fn acc(&mut self, id: usize) -> &mut Vec<f64> {
        let len = self.nodes[id].value.len();
        self.grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a].value.shape();
                let n = self.nodes[b].value.cols();
                let bv = self.nodes[b].value.data().to_vec();
                let av = self.nodes[a].value.data().to_vec();
                let ga = self.acc(a);
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
                let gb = self.acc(b);
                for i in 0..m {
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += x * g[i * n + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.acc(a), g, 1.0);
                add_into(self.acc(b), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(self.acc(a), g, 1.0);
                add_into(self.acc(b), g, -1.0);
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a].value.data().to_vec();
                let bv = self.nodes[b].value.data().to_vec();
                for (o, (&gi, &y)) in self.acc(a).iter_mut().zip(g.iter().zip(&bv)) {
                    *o += gi * y;
                }
                for (o, (&gi, &x)) in self.acc(b).iter_mut().zip(g.iter().zip(&av)) {
                    *o += gi * x;
                }
            }
            Op::AddBias(a, b) => {
                add_into(self.acc(a), g, 1.0);
                let n = self.nodes[b].value.cols();
                let gb = self.acc(b);
                for row in g.chunks(n) {
                    add_into(gb, row, 1.0);
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.nodes[s].value.data()[0];
                let av = self.nodes[a].value.data().to_vec();
                add_into(self.acc(a), g, sv);
                let ds: f64 = g.iter().zip(&av).map(|(x, y)| x * y).sum();
                self.acc(s)[0] += ds;
            }
            Op::Scale(a, c) => add_into(self.acc(a), g, c),
            Op::AddConst(a) | Op::StraightThrough(a) => add_into(self.acc(a), g, 1.0),
            Op::Squash(a) => {
                let y = self.nodes[id].value.data().to_vec();
                for (o, (&gi, &yi)) in self.acc(a).iter_mut().zip(g.iter().zip(&y)) {
                    *o += gi * (1.0 - yi * yi);
                }
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[id].value.data().to_vec();
                for (o, (&gi, &yi)) in self.acc(a).iter_mut().zip(g.iter().zip(&y)) {
                    *o += gi * yi * (1.0 - yi);
                }
            }
            Op::Softmax(a) => {
                let n = self.nodes[id].value.cols().max(1);
                let y = self.nodes[id].value.data().to_vec();
                let ga = self.acc(a);
                for ((grow, yrow), orow) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += yi * (gi - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let n = self.nodes[id].value.cols().max(1);
                let y = self.nodes[id].value.data().to_vec();
                let ga = self.acc(a);
                for ((grow, yrow), orow) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let total: f64 = grow.iter().sum();
                    for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += gi - yi.exp() * total;
                    }
                }
            }
            Op::Log2(a) => {
                let x = self.nodes[a].value.data().to_vec();
                for (o, (&gi, &xi)) in self.acc(a).iter_mut().zip(g.iter().zip(&x)) {
                    *o += gi / (xi * LN_2);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[id].value.rows();
                let cols = self.nodes[id].value.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.nodes[p].value.cols();
                    let gp = self.acc(p);
                    for r in 0..rows {
                        add_into(&mut gp[r * pc..(r + 1) * pc], &g[r * cols + offset..r * cols + offset + pc], 1.0);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p].value.len();
                    add_into(self.acc(p), &g[offset..offset + len], 1.0);
                    offset += len;
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.nodes[a].value.shape();
                let ga = self.acc(a);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.acc(a).iter_mut().for_each(|o| *o += gv);
            }
            Op::Mean(a) => {
                let gv = g[0] / self.nodes[a].value.len().max(1) as f64;
                self.acc(a).iter_mut().for_each(|o| *o += gv);
            }
            Op::Pick(a, index) => self.acc(a)[index] += g[0],
            Op::ColumnVariance(a) => {
                let t = self.nodes[a].value.clone();
                let (m, n) = t.shape();
                let ga = self.acc(a);
                for j in 0..n {
                    let mean = (0..m).map(|i| t.get(i, j)).sum::<f64>() / m as f64;
                    for i in 0..m {
                        ga[i * n + j] += g[j] * 2.0 * (t.get(i, j) - mean) / m as f64;
                    }
                }
            }
        }
    }

    /// Accumulated gradient of a node after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.check(v).ok().and_then(|id| self.grads[id].as_deref())
    }

    /// Gradient with respect to every parameter of `params`, summed over all
    /// places it was recorded. Parameters not reached get zeros.
    pub fn param_gradients(&self, params: &ParameterSet) -> ParameterSet {
        let mut out = params.zeros_like();
        self.add_param_gradients(&mut out);
        out
    }

    /// Adds this tape's parameter gradients into `acc`.
    pub fn add_param_gradients(&self, acc: &mut ParameterSet) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(i), Some(g)) = (&node.op, grad) {
                for (o, &x) in acc.tensor_mut(*i).data_mut().iter_mut().zip(g) {
                    *o += x;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let lse = log_sum_exp(xs);
    xs.iter_mut().for_each(|x| *x = (*x - lse).exp());
}
