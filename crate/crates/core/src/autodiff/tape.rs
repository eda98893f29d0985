use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};

use super::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Primitive operations with their own backward rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    MatMul,
    Add,
    AddRow,
    Sub,
    Mul,
    Scale,
    Tanh,
    Sigmoid,
    Maximum,
    Concat,
    StackRows,
    Row,
    Slice,
    Transpose,
    Conv1d,
    MaxOverTime,
    Softmax,
    LogSoftmax,
    LstmCell,
    GatherRows,
    Pick,
    Sum,
    Dot,
}

impl Primitive {
    pub const ALL: [Primitive; 23] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::AddRow,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Tanh,
        Primitive::Sigmoid,
        Primitive::Maximum,
        Primitive::Concat,
        Primitive::StackRows,
        Primitive::Row,
        Primitive::Slice,
        Primitive::Transpose,
        Primitive::Conv1d,
        Primitive::MaxOverTime,
        Primitive::Softmax,
        Primitive::LogSoftmax,
        Primitive::LstmCell,
        Primitive::GatherRows,
        Primitive::Pick,
        Primitive::Sum,
        Primitive::Dot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::AddRow => "add_row",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Maximum => "maximum",
            Primitive::Concat => "concat",
            Primitive::StackRows => "stack_rows",
            Primitive::Row => "row",
            Primitive::Slice => "slice",
            Primitive::Transpose => "transpose",
            Primitive::Conv1d => "conv1d",
            Primitive::MaxOverTime => "max_over_time",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::LstmCell => "lstm_cell",
            Primitive::GatherRows => "gather_rows",
            Primitive::Pick => "pick",
            Primitive::Sum => "sum",
            Primitive::Dot => "dot",
        }
    }
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<Primitive>> = const { Cell::new(None) };
}

pub(super) fn set_backward_fault(p: Option<Primitive>) -> Option<Primitive> {
    BACKWARD_FAULT.with(|f| f.replace(p))
}

fn faulty(p: Primitive) -> bool {
    BACKWARD_FAULT.with(|f| f.get() == Some(p))
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Maximum(Var, Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    Slice(Var, usize),
    Transpose(Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        window: usize,
    },
    MaxOverTime(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var, Option<Vec<bool>>),
    LstmCell {
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        /// activated gates i, f, g, o (4H)
        gates: Vec<f64>,
        tanh_c: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    Pick(Var, usize),
    Sum(Var),
    Dot(Var, Var),
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Constant | Op::Param(_) => return None,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::AddRow(..) => Primitive::AddRow,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::Tanh(..) => Primitive::Tanh,
            Op::Sigmoid(..) => Primitive::Sigmoid,
            Op::Maximum(..) => Primitive::Maximum,
            Op::Concat(..) => Primitive::Concat,
            Op::StackRows(..) => Primitive::StackRows,
            Op::Row(..) => Primitive::Row,
            Op::Slice(..) => Primitive::Slice,
            Op::Transpose(..) => Primitive::Transpose,
            Op::Conv1d { .. } => Primitive::Conv1d,
            Op::MaxOverTime(..) => Primitive::MaxOverTime,
            Op::Softmax(..) => Primitive::Softmax,
            Op::LogSoftmax(..) => Primitive::LogSoftmax,
            Op::LstmCell { .. } => Primitive::LstmCell,
            Op::GatherRows(..) => Primitive::GatherRows,
            Op::Pick(..) => Primitive::Pick,
            Op::Sum(..) => Primitive::Sum,
            Op::Dot(..) => Primitive::Dot,
        })
    }
}

struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
    }
}

/// Records a forward computation over a borrowed [`ParamStore`] for one
/// reverse sweep. A tape is single-threaded; independent tapes over the
/// same store may run concurrently.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_str(shapes: &[&[usize]]) -> String {
    shapes
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(" x ")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            (None, _) => unreachable!("only parameter leaves are stored by reference"),
        }
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `[m,k]·[k,n] → [m,n]`, `[m,k]·[k] → [m]`, or `[k]·[k,n] → [n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let err = || Error::shape("matmul", shape_str(&[ta.shape(), tb.shape()]));
        let out = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let mut out = vec![0.0; m * n];
                let (ad, bd) = (ta.data(), tb.data());
                for i in 0..m {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &bd[p * n..(p + 1) * n];
                        for (o, bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
                Tensor::matrix(m, n, out)?
            }
            (&[m, k], &[k2]) if k == k2 => {
                let (ad, bd) = (ta.data(), tb.data());
                let out = (0..m)
                    .map(|i| ad[i * k..(i + 1) * k].iter().zip(bd).map(|(x, y)| x * y).sum())
                    .collect();
                Tensor::vector(out)
            }
            (&[k], &[k2, n]) if k == k2 => {
                let (ad, bd) = (ta.data(), tb.data());
                let mut out = vec![0.0; n];
                for p in 0..k {
                    let av = ad[p];
                    for (o, bv) in out.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                        *o += av * bv;
                    }
                }
                Tensor::vector(out)
            }
            _ => return Err(err()),
        };
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, shape_str(&[ta.shape(), tb.shape()])));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "maximum", f64::max)?;
        Ok(self.push(t, Op::Maximum(a, b)))
    }

    /// `max(x, 0)` via [`Tape::maximum`].
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let zeros = self.constant(Tensor::zeros(self.shape(x)));
        self.maximum(x, zeros)
    }

    /// Adds vector `v` `[n]` to every row of matrix `m` `[r,n]`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        if !tm.is_matrix() || !tv.is_vector() || tm.cols() != tv.len() {
            return Err(Error::shape("add_row", shape_str(&[tm.shape(), tv.shape()])));
        }
        let n = tv.len();
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tv.data()[i % n])
            .collect();
        let t = Tensor::new(tm.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(m, v)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        self.push(t, Op::Scale(a, s))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if !t.is_vector() {
                return Err(Error::shape("concat", format!("non-vector input {:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        if data.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::shape("stack_rows", "no inputs"));
        };
        let n = self.value(first).len();
        let mut data = Vec::with_capacity(n * rows.len());
        for &r in rows {
            let t = self.value(r);
            if !t.is_vector() || t.len() != n {
                return Err(Error::shape("stack_rows", format!("row {:?} vs width {n}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(rows.len(), n, data)?;
        Ok(self.push(t, Op::StackRows(rows.to_vec())))
    }

    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let t = self.value(m);
        if !t.is_matrix() || i >= t.rows() {
            return Err(Error::shape("row", format!("row {i} of {:?}", t.shape())));
        }
        let r = Tensor::vector(t.row(i).to_vec());
        Ok(self.push(r, Op::Row(m, i)))
    }

    pub fn slice(&mut self, v: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(v);
        if !t.is_vector() || start + len > t.len() || len == 0 {
            return Err(Error::shape("slice", format!("[{start}..{}] of {:?}", start + len, t.shape())));
        }
        let r = Tensor::vector(t.data()[start..start + len].to_vec());
        Ok(self.push(r, Op::Slice(v, start)))
    }

    pub fn transpose(&mut self, m: Var) -> Result<Var> {
        let t = self.value(m);
        if !t.is_matrix() {
            return Err(Error::shape("transpose", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let out = Tensor::matrix(c, r, data)?;
        Ok(self.push(out, Op::Transpose(m)))
    }

    /// Valid 1-D convolution over the rows of `input` `[L,D]` with `weight`
    /// `[F, window·D]` and `bias` `[F]`, giving `[max(L,window)−window+1, F]`.
    /// Inputs shorter than the window are zero-padded at the end.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, window: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let shapes = || shape_str(&[x.shape(), w.shape(), b.shape()]);
        if !x.is_matrix() || !w.is_matrix() || !b.is_vector() || window == 0 {
            return Err(Error::shape("conv1d", shapes()));
        }
        let (len, dim) = (x.rows(), x.cols());
        let filters = w.rows();
        if w.cols() != window * dim || b.len() != filters {
            return Err(Error::shape("conv1d", shapes()));
        }
        let steps = len.max(window) - window + 1;
        let mut out = vec![0.0; steps * filters];
        let xd = x.data();
        for t in 0..steps {
            // the window's rows are contiguous in row-major input, truncated at padding
            let avail = (len - t.min(len)).min(window);
            let xs = &xd[t * dim..(t + avail) * dim];
            for f in 0..filters {
                let wrow = &w.data()[f * window * dim..f * window * dim + avail * dim];
                out[t * filters + f] = b.data()[f] + wrow.iter().zip(xs).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        let t = Tensor::matrix(steps, filters, out)?;
        Ok(self.push(
            t,
            Op::Conv1d {
                input,
                weight,
                bias,
                window,
            },
        ))
    }

    /// Column-wise maximum of a matrix `[T,F] → [F]`; ties pick the first row.
    pub fn max_over_time(&mut self, m: Var) -> Result<Var> {
        let t = self.value(m);
        if !t.is_matrix() || t.rows() == 0 {
            return Err(Error::shape("max_over_time", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut best = t.row(0).to_vec();
        let mut arg = vec![0usize; c];
        for i in 1..r {
            for (j, v) in t.row(i).iter().enumerate() {
                if *v > best[j] {
                    best[j] = *v;
                    arg[j] = i;
                }
            }
        }
        Ok(self.push(Tensor::vector(best), Op::MaxOverTime(m, arg)))
    }

    fn check_mask(&self, x: Var, mask: Option<&[bool]>, name: &'static str) -> Result<()> {
        let t = self.value(x);
        if !t.is_vector() {
            return Err(Error::shape(name, format!("{:?}", t.shape())));
        }
        if let Some(m) = mask {
            if m.len() != t.len() {
                return Err(Error::shape(name, format!("mask of {} for {:?}", m.len(), t.shape())));
            }
        }
        Ok(())
    }

    /// Softmax over a vector. Entries whose mask is `false` get probability
    /// exactly 0 and take no part in normalization.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check_mask(x, mask, "softmax")?;
        let probs = masked_softmax(self.value(x).data(), mask);
        Ok(self.push(Tensor::vector(probs), Op::Softmax(x)))
    }

    /// Log-softmax over a vector. Masked entries are set to 0 (they carry no
    /// probability mass and receive no gradient), so `probs · log_probs`
    /// stays finite.
    pub fn log_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check_mask(x, mask, "log_softmax")?;
        let xs = self.value(x).data();
        let on = |i: usize| mask.is_none_or(|m| m[i]);
        let max = (0..xs.len()).filter(|&i| on(i)).map(|i| xs[i]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + (0..xs.len())
                .filter(|&i| on(i))
                .map(|i| (xs[i] - max).exp())
                .sum::<f64>()
                .ln();
        let out = (0..xs.len()).map(|i| if on(i) { xs[i] - lse } else { 0.0 }).collect();
        Ok(self.push(Tensor::vector(out), Op::LogSoftmax(x, mask.map(<[bool]>::to_vec))))
    }

    /// Rows `ids` of an embedding matrix `[V,D] → [len(ids), D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if !t.is_matrix() || ids.is_empty() || ids.iter().any(|&i| i >= t.rows()) {
            return Err(Error::shape("gather_rows", format!("ids {ids:?} from {:?}", t.shape())));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(ids.len(), t.cols(), data)?;
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec())))
    }

    /// Element `i` of a vector as a scalar.
    pub fn pick(&mut self, v: Var, i: usize) -> Result<Var> {
        let t = self.value(v);
        if i >= t.len() {
            return Err(Error::shape("pick", format!("index {i} of {:?}", t.shape())));
        }
        let s = Tensor::scalar(t.data()[i]);
        Ok(self.push(s, Op::Pick(v, i)))
    }

    pub fn sum(&mut self, v: Var) -> Var {
        let s = Tensor::scalar(self.value(v).data().iter().sum());
        self.push(s, Op::Sum(v))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("dot", shape_str(&[ta.shape(), tb.shape()])));
        }
        let s = Tensor::scalar(ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum());
        Ok(self.push(s, Op::Dot(a, b)))
    }

    /// Sum of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let Some(&first) = terms.first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut acc = first;
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// One LSTM step with gate order (input, forget, cell, output):
    /// `z = W_ih·x + W_hh·h + b`, `c' = σ(f)⊙c + σ(i)⊙tanh(g)`,
    /// `h' = σ(o)⊙tanh(c')`. Returns `(h', c')`.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w: &LstmWeights) -> Result<(Var, Var)> {
        let w_ih = self.param(w.w_ih);
        let w_hh = self.param(w.w_hh);
        let bias = self.param(w.bias);
        let (tx, th, tc) = (self.value(x), self.value(h), self.value(c));
        let (twi, twh, tb) = (self.value(w_ih), self.value(w_hh), self.value(bias));
        let hidden = th.len();
        let shapes = || {
            shape_str(&[tx.shape(), th.shape(), tc.shape(), twi.shape(), twh.shape(), tb.shape()])
        };
        if !tx.is_vector()
            || !th.is_vector()
            || tc.len() != hidden
            || twi.shape() != [4 * hidden, tx.len()]
            || twh.shape() != [4 * hidden, hidden]
            || tb.shape() != [4 * hidden]
        {
            return Err(Error::shape("lstm_cell", shapes()));
        }
        let input = tx.len();
        let mut gates = tb.data().to_vec();
        for (r, z) in gates.iter_mut().enumerate() {
            let wi = &twi.data()[r * input..(r + 1) * input];
            let wh = &twh.data()[r * hidden..(r + 1) * hidden];
            *z += wi.iter().zip(tx.data()).map(|(a, b)| a * b).sum::<f64>()
                + wh.iter().zip(th.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        for (r, z) in gates.iter_mut().enumerate() {
            *z = if (2 * hidden..3 * hidden).contains(&r) {
                z.tanh()
            } else {
                sigmoid(*z)
            };
        }
        let mut out = vec![0.0; 2 * hidden];
        let mut tanh_c = vec![0.0; hidden];
        for k in 0..hidden {
            let (ig, fg, gg, og) = (gates[k], gates[hidden + k], gates[2 * hidden + k], gates[3 * hidden + k]);
            let cn = fg * tc.data()[k] + ig * gg;
            tanh_c[k] = cn.tanh();
            out[k] = og * tanh_c[k];
            out[hidden + k] = cn;
        }
        let both = self.push(
            Tensor::vector(out),
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                bias,
                gates,
                tanh_c,
            },
        );
        let h_new = self.slice(both, 0, hidden)?;
        let c_new = self.slice(both, hidden, hidden)?;
        Ok((h_new, c_new))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape("backward", format!("loss of shape {:?}", lt.shape())));
        }
        if !lt.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Param(id) = node.op {
                out.grads.insert(id, g);
                continue;
            }
            let mut contribs = self.backward_node(Var(idx), &g);
            if node.op.primitive().is_some_and(faulty) {
                for (_, t) in &mut contribs {
                    t.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (v, t) in contribs {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(out)
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient matches value shape")
    }

    fn backward_node(&self, out: Var, g: &Tensor) -> Vec<(Var, Tensor)> {
        let gd = g.data();
        let y = self.value(out);
        match &self.nodes[out.0].op {
            Op::Constant | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                match (ta.shape(), tb.shape()) {
                    (&[m, k], &[_, n]) => {
                        let (ad, bd) = (ta.data(), tb.data());
                        let mut da = vec![0.0; m * k];
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &gd[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                                let av = ad[i * k + p];
                                if av != 0.0 {
                                    for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                        *d += av * gv;
                                    }
                                }
                            }
                        }
                        vec![(*a, self.like(*a, da)), (*b, self.like(*b, db))]
                    }
                    (&[m, k], &[_]) => {
                        let (ad, bd) = (ta.data(), tb.data());
                        let mut da = vec![0.0; m * k];
                        let mut db = vec![0.0; k];
                        for i in 0..m {
                            let gi = gd[i];
                            if gi == 0.0 {
                                continue;
                            }
                            let arow = &ad[i * k..(i + 1) * k];
                            for p in 0..k {
                                da[i * k + p] = gi * bd[p];
                                db[p] += gi * arow[p];
                            }
                        }
                        vec![(*a, self.like(*a, da)), (*b, self.like(*b, db))]
                    }
                    (&[k], &[_, n]) => {
                        let (ad, bd) = (ta.data(), tb.data());
                        let mut da = vec![0.0; k];
                        let mut db = vec![0.0; k * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[p] = brow.iter().zip(gd).map(|(x, y)| x * y).sum();
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(gd) {
                                *d = ad[p] * gv;
                            }
                        }
                        vec![(*a, self.like(*a, da)), (*b, self.like(*b, db))]
                    }
                    _ => unreachable!("matmul shapes validated on forward"),
                }
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, self.like(*b, gd.iter().map(|v| -v).collect()))],
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bd).map(|(x, y)| x * y).collect();
                let db = gd.iter().zip(ad).map(|(x, y)| x * y).collect();
                vec![(*a, self.like(*a, da)), (*b, self.like(*b, db))]
            }
            Op::AddRow(m, v) => {
                let n = self.value(*v).len();
                let mut dv = vec![0.0; n];
                for (i, x) in gd.iter().enumerate() {
                    dv[i % n] += x;
                }
                vec![(*m, g.clone()), (*v, Tensor::vector(dv))]
            }
            Op::Scale(a, s) => vec![(*a, self.like(*a, gd.iter().map(|v| v * s).collect()))],
            Op::Tanh(a) => {
                let d = gd.iter().zip(y.data()).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                vec![(*a, self.like(*a, d))]
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                vec![(*a, self.like(*a, d))]
            }
            Op::Maximum(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; gd.len()];
                let mut db = vec![0.0; gd.len()];
                for i in 0..gd.len() {
                    if ad[i] >= bd[i] {
                        da[i] = gd[i];
                    } else {
                        db[i] = gd[i];
                    }
                }
                vec![(*a, self.like(*a, da)), (*b, self.like(*b, db))]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let n = self.value(*p).len();
                        let t = Tensor::vector(gd[offset..offset + n].to_vec());
                        offset += n;
                        (*p, t)
                    })
                    .collect()
            }
            Op::StackRows(rows) => {
                let n = g.cols();
                rows.iter()
                    .enumerate()
                    .map(|(i, r)| (*r, Tensor::vector(gd[i * n..(i + 1) * n].to_vec())))
                    .collect()
            }
            Op::Row(m, i) => {
                let tm = self.value(*m);
                let n = tm.cols();
                let mut d = vec![0.0; tm.len()];
                d[i * n..(i + 1) * n].copy_from_slice(gd);
                vec![(*m, self.like(*m, d))]
            }
            Op::Slice(v, start) => {
                let mut d = vec![0.0; self.value(*v).len()];
                d[*start..*start + gd.len()].copy_from_slice(gd);
                vec![(*v, self.like(*v, d))]
            }
            Op::Transpose(m) => {
                let (r, c) = (self.value(*m).rows(), self.value(*m).cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = gd[j * r + i];
                    }
                }
                vec![(*m, self.like(*m, d))]
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                window,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (len, dim, filters) = (x.rows(), x.cols(), w.rows());
                let steps = g.rows();
                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; filters];
                for t in 0..steps {
                    let avail = (len - t.min(len)).min(*window);
                    let span = t * dim..(t + avail) * dim;
                    for f in 0..filters {
                        let gv = gd[t * filters + f];
                        if gv == 0.0 {
                            continue;
                        }
                        db[f] += gv;
                        let wbase = f * window * dim;
                        let xs = &x.data()[span.clone()];
                        for (q, xv) in xs.iter().enumerate() {
                            dw[wbase + q] += gv * xv;
                            dx[span.start + q] += gv * w.data()[wbase + q];
                        }
                    }
                }
                vec![
                    (*input, self.like(*input, dx)),
                    (*weight, self.like(*weight, dw)),
                    (*bias, Tensor::vector(db)),
                ]
            }
            Op::MaxOverTime(m, arg) => {
                let tm = self.value(*m);
                let c = tm.cols();
                let mut d = vec![0.0; tm.len()];
                for (j, &i) in arg.iter().enumerate() {
                    d[i * c + j] = gd[j];
                }
                vec![(*m, self.like(*m, d))]
            }
            Op::Softmax(x) => {
                let yd = y.data();
                let inner: f64 = gd.iter().zip(yd).map(|(a, b)| a * b).sum();
                let d = yd.iter().zip(gd).map(|(p, gv)| p * (gv - inner)).collect();
                vec![(*x, self.like(*x, d))]
            }
            Op::LogSoftmax(x, mask) => {
                let on = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                let yd = y.data();
                let total: f64 = (0..gd.len()).filter(|&i| on(i)).map(|i| gd[i]).sum();
                let d = (0..gd.len())
                    .map(|i| if on(i) { gd[i] - yd[i].exp() * total } else { 0.0 })
                    .collect();
                vec![(*x, self.like(*x, d))]
            }
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                bias,
                gates,
                tanh_c,
            } => {
                let (tx, th, tc) = (self.value(*x), self.value(*h), self.value(*c));
                let (twi, twh) = (self.value(*w_ih), self.value(*w_hh));
                let hidden = th.len();
                let input = tx.len();
                let mut dz = vec![0.0; 4 * hidden];
                let mut dc = vec![0.0; hidden];
                for k in 0..hidden {
                    let (ig, fg, gg, og) =
                        (gates[k], gates[hidden + k], gates[2 * hidden + k], gates[3 * hidden + k]);
                    let dh = gd[k];
                    let dcn = gd[hidden + k] + dh * og * (1.0 - tanh_c[k] * tanh_c[k]);
                    let d_o = dh * tanh_c[k];
                    let d_i = dcn * gg;
                    let d_g = dcn * ig;
                    let d_f = dcn * tc.data()[k];
                    dc[k] = dcn * fg;
                    dz[k] = d_i * ig * (1.0 - ig);
                    dz[hidden + k] = d_f * fg * (1.0 - fg);
                    dz[2 * hidden + k] = d_g * (1.0 - gg * gg);
                    dz[3 * hidden + k] = d_o * og * (1.0 - og);
                }
                let mut dwi = vec![0.0; twi.len()];
                let mut dwh = vec![0.0; twh.len()];
                let mut dx = vec![0.0; input];
                let mut dh = vec![0.0; hidden];
                for (r, &z) in dz.iter().enumerate() {
                    if z == 0.0 {
                        continue;
                    }
                    let wi = &twi.data()[r * input..(r + 1) * input];
                    for p in 0..input {
                        dwi[r * input + p] = z * tx.data()[p];
                        dx[p] += z * wi[p];
                    }
                    let wh = &twh.data()[r * hidden..(r + 1) * hidden];
                    for p in 0..hidden {
                        dwh[r * hidden + p] = z * th.data()[p];
                        dh[p] += z * wh[p];
                    }
                }
                vec![
                    (*x, self.like(*x, dx)),
                    (*h, self.like(*h, dh)),
                    (*c, self.like(*c, dc)),
                    (*w_ih, self.like(*w_ih, dwi)),
                    (*w_hh, self.like(*w_hh, dwh)),
                    (*bias, Tensor::vector(dz)),
                ]
            }
            Op::GatherRows(table, ids) => {
                let tt = self.value(*table);
                let c = tt.cols();
                let mut d = vec![0.0; tt.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += gd[r * c + j];
                    }
                }
                vec![(*table, self.like(*table, d))]
            }
            Op::Pick(v, i) => {
                let mut d = vec![0.0; self.value(*v).len()];
                d[*i] = gd[0];
                vec![(*v, self.like(*v, d))]
            }
            Op::Sum(v) => {
                let n = self.value(*v).len();
                vec![(*v, self.like(*v, vec![gd[0]; n]))]
            }
            Op::Dot(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, self.like(*a, bd.iter().map(|v| v * gd[0]).collect())),
                    (*b, self.like(*b, ad.iter().map(|v| v * gd[0]).collect())),
                ]
            }
        }
    }
}

/// Softmax restricted to entries whose mask is `true`; others are exactly 0.
pub(crate) fn masked_softmax(xs: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let on = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..xs.len()).filter(|&i| on(i)).map(|i| xs[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = (0..xs.len())
        .map(|i| if on(i) { (xs[i] - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    if z > 0.0 {
        out.iter_mut().for_each(|p| *p /= z);
    }
    out
}

/// Parameter handles of one LSTM layer/direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmWeights {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl LstmWeights {
    /// Registers `{prefix}.w_ih`, `{prefix}.w_hh`, `{prefix}.bias`.
    pub fn init<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<LstmWeights> {
        Ok(LstmWeights {
            w_ih: store.add(format!("{prefix}.w_ih"), Tensor::uniform(&[4 * hidden, input], bound, rng))?,
            w_hh: store.add(format!("{prefix}.w_hh"), Tensor::uniform(&[4 * hidden, hidden], bound, rng))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[4 * hidden]))?,
        })
    }

    pub fn hidden(&self, store: &ParamStore) -> usize {
        store.value(self.w_hh).cols()
    }
}

/// Runs one LSTM direction over `inputs`, starting from `init` (zeros when
/// `None`). Returns the hidden state per step and the final `(h, c)`.
pub fn lstm_sequence(
    tape: &mut Tape<'_>,
    inputs: &[Var],
    weights: &LstmWeights,
    init: Option<(Var, Var)>,
) -> Result<(Vec<Var>, (Var, Var))> {
    let hidden = weights.hidden(tape.store());
    let (mut h, mut c) = match init {
        Some(state) => state,
        None => (
            tape.constant(Tensor::zeros(&[hidden])),
            tape.constant(Tensor::zeros(&[hidden])),
        ),
    };
    let mut states = Vec::with_capacity(inputs.len());
    for &x in inputs {
        (h, c) = tape.lstm_cell(x, h, c, weights)?;
        states.push(h);
    }
    Ok((states, (h, c)))
}

/// Bidirectional LSTM: per position, `[h_forward ; h_backward]` where the
/// backward direction reads the sequence right to left.
pub fn bilstm_sequence(
    tape: &mut Tape<'_>,
    inputs: &[Var],
    forward: &LstmWeights,
    backward: &LstmWeights,
) -> Result<Vec<Var>> {
    let (fw, _) = lstm_sequence(tape, inputs, forward, None)?;
    let reversed: Vec<Var> = inputs.iter().rev().copied().collect();
    let (mut bw, _) = lstm_sequence(tape, &reversed, backward, None)?;
    bw.reverse();
    fw.iter()
        .zip(&bw)
        .map(|(f, b)| tape.concat(&[*f, *b]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::vector(vec![0.3; 5]));
        let p = tape.softmax(x, None).unwrap();
        for v in tape.value(p).data() {
            assert_relative_eq!(*v, 0.2, epsilon = 1e-15);
        }
        let mask = [true, false, true, true, false];
        let p = tape.softmax(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(p).data()[1], 0.0);
        assert_relative_eq!(tape.value(p).data()[0], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn conv1d_hand_example() {
        // window 3 over a length-3, 1-dim input with an all-ones filter sums the input
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0]));
        let y = tape.conv1d(x, w, b, 3).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1]);
        assert_eq!(tape.item(y), 7.0);
        // a 1-row input is zero-padded to the window
        let x1 = tape.constant(Tensor::matrix(1, 1, vec![5.0]).unwrap());
        let y1 = tape.conv1d(x1, w, b, 3).unwrap();
        assert_eq!(tape.item(y1), 5.0);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.0)).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.param(id);
        let y = tape.tanh(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(id).unwrap().item(), 1.0);
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "shape mismatch in matmul: [2, 3] x [4]");
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn bilstm_direction_symmetry() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let w = LstmWeights::init(&mut store, "w", 3, 4, 0.5, &mut rng).unwrap();
        let seq: Vec<Tensor> = (0..5).map(|_| Tensor::uniform(&[3], 1.0, &mut rng)).collect();
        let mut tape = Tape::new(&store);
        let xs: Vec<Var> = seq.iter().map(|t| tape.constant(t.clone())).collect();
        let rev: Vec<Var> = xs.iter().rev().copied().collect();
        // with shared weights, reversing the input swaps the two halves
        let out = bilstm_sequence(&mut tape, &xs, &w, &w).unwrap();
        let out_rev = bilstm_sequence(&mut tape, &rev, &w, &w).unwrap();
        for i in 0..5 {
            let a = tape.value(out[i]).data();
            let b = tape.value(out_rev[4 - i]).data();
            assert_eq!(&a[..4], &b[4..]);
            assert_eq!(&a[4..], &b[..4]);
        }
    }
}
