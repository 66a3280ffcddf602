//! Reverse-mode autodiff over 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied; [`Tape::backward`]
//! returns the gradient of a scalar node with respect to every parameter that
//! fed into it.

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{gemm_acc, Tensor};

/// Target index that is excluded from the cross-entropy sum.
pub const IGNORE: usize = usize::MAX;
/// Sentinel for "no second bucket" in [`Tape::pair_bias`].
pub const NO_BUCKET: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Val<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Val<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Val::Owned(t) => t,
            Val::Borrowed(t) => t,
        }
    }
}

enum Op {
    Input,
    Param(usize),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow { a: Var, row: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    RmsNorm { x: Var, scale: Var, inv: Vec<f64> },
    Softmax { a: Var },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    PairBias { table: Var, idx: Vec<(u32, u32)>, head: usize },
    RowReplace { a: Var, row: Var, mask: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    SqErr { a: Var, b: Var },
    StraightThrough { a: Var },
    SumAll(Var),
}

struct Node<'a> {
    val: Val<'a>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node<'a>>,
}

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(512) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].val.get()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, t: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { val: Val::Owned(t), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.params.get(id);
        self.nodes.push(Node { val: Val::Borrowed(t), op: Op::Param(id.0), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = self.value(a).matmul(ta, self.value(b), tb);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::from_vec(x.rows(), x.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::from_vec(x.rows(), x.cols(), x.data().iter().map(|v| f(*v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |p, q| p + q);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |p, q| p - q);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |p, q| p * q);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols()), r.shape(), "add_row shape");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(out, Op::AddRow { a, row }, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |v| v * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Scale-only RMS normalization per row; `scale` is `1 x cols`.
    pub fn rms_norm(&mut self, x: Var, scale: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(scale));
        assert_eq!((1, xv.cols()), sv.shape(), "rms_norm scale shape");
        let n = xv.cols() as f64;
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        let mut inv = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let r = xv.row(i);
            let ms = r.iter().map(|v| v * v).sum::<f64>() / n;
            let k = 1.0 / (ms + RMS_EPS).sqrt();
            inv.push(k);
            for ((o, v), s) in out.row_mut(i).iter_mut().zip(r).zip(sv.data()) {
                *o = v * k * s;
            }
        }
        let ng = self.needs(x) || self.needs(scale);
        self.push(out, Op::RmsNorm { x, scale, inv }, ng)
    }

    /// Row-wise softmax. With `causal_offset = Some(o)`, row `i` only sees
    /// columns `j <= o + i`.
    pub fn softmax(&mut self, a: Var, causal_offset: Option<usize>) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let limit = causal_offset.map_or(x.cols(), |o| (o + i + 1).min(x.cols()));
            let r = &x.row(i)[..limit];
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = out.row_mut(i);
            let mut z = 0.0;
            for (o, v) in orow[..limit].iter_mut().zip(r) {
                *o = (v - m).exp();
                z += *o;
            }
            orow[..limit].iter_mut().for_each(|o| *o /= z);
        }
        let ng = self.needs(a);
        self.push(out, Op::Softmax { a }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(x.rows(), len);
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        let ng = self.needs(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let x = self.value(*p);
            assert_eq!(x.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + x.cols()].copy_from_slice(x.row(i));
            }
            off += x.cols();
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let x = self.value(*p);
            assert_eq!(x.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(x.data());
            rows += x.rows();
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        let ng = self.needs(table);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    /// Builds an `rows x cols` bias matrix from column `head` of a
    /// `buckets x heads` table; each cell sums one or two bucket entries.
    pub fn pair_bias(&mut self, table: Var, idx: Vec<(u32, u32)>, rows: usize, cols: usize, head: usize) -> Var {
        assert_eq!(idx.len(), rows * cols);
        let t = self.value(table);
        let data = idx
            .iter()
            .map(|&(a, b)| {
                let mut v = t.get(a as usize, head);
                if b != NO_BUCKET {
                    v += t.get(b as usize, head);
                }
                v
            })
            .collect();
        let ng = self.needs(table);
        self.push(Tensor::from_vec(rows, cols, data), Op::PairBias { table, idx, head }, ng)
    }

    /// Replaces rows where `mask[i]` is set with the `1 x n` vector `row`.
    pub fn row_replace(&mut self, a: Var, row: Var, mask: &[bool]) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(mask.len(), x.rows());
        assert_eq!((1, x.cols()), r.shape());
        let mut out = x.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(i).copy_from_slice(r.data());
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(out, Op::RowReplace { a, row, mask: mask.to_vec() }, ng)
    }

    /// Summed token cross-entropy; rows whose target is [`IGNORE`] contribute nothing.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), targets.len());
        let mut probs = Tensor::zeros(x.rows(), x.cols());
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            let r = x.row(i);
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|v| (v - m).exp()).sum();
            let lz = z.ln() + m;
            total += lz - r[t];
            for (p, v) in probs.row_mut(i).iter_mut().zip(r) {
                *p = (v - lz).exp();
            }
        }
        let ng = self.needs(logits);
        self.push(Tensor::scalar(total), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// `sum((a - b)^2)` as a scalar.
    pub fn sq_err(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let s = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s), Op::SqErr { a, b }, ng)
    }

    /// Forward value `value`; backward passes the gradient unchanged to `a`.
    pub fn straight_through(&mut self, a: Var, value: Tensor) -> Var {
        assert_eq!(self.shape(a), value.shape());
        let ng = self.needs(a);
        self.push(value, Op::StraightThrough { a }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// Gradient of scalar node `root` with respect to all parameters.
    pub fn backward(&self, root: Var) -> Grads {
        self.backward_seeded(root, Tensor::filled(1, 1, 1.0))
    }

    pub fn backward_seeded(&self, root: Var, seed: Tensor) -> Grads {
        let mut grads = Grads::empty(self.params.len());
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(seed.shape(), self.shape(root));
        g[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(gout) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, node.val.get(), gout, &mut g, &mut grads);
        }
        grads
    }

    fn acc(&self, g: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.needs(v) {
            return;
        }
        let (r, c) = self.shape(v);
        let slot = g[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
        f(slot);
    }

    fn acc_t(&self, g: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut g[v.0] {
            Some(x) => x.add_assign(&t),
            s @ None => *s = Some(t),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, go: Tensor, g: &mut [Option<Tensor>], grads: &mut Grads) {
        match op {
            Op::Input => {}
            Op::Param(pid) => {
                let shape = out.shape();
                grads.accumulate(*pid, shape, |t| t.add_assign(&go));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // C = op(A) op(B)
                self.acc(g, *a, |ga| {
                    if *ta {
                        // A^T stored: dA = op(B) dC^T
                        gemm_acc(bv, *tb, &go, true, 1.0, ga);
                    } else {
                        gemm_acc(&go, false, bv, !*tb, 1.0, ga);
                    }
                });
                self.acc(g, *b, |gb| {
                    if *tb {
                        // dB = dC^T op(A)
                        gemm_acc(&go, true, av, *ta, 1.0, gb);
                    } else {
                        gemm_acc(av, !*ta, &go, false, 1.0, gb);
                    }
                });
            }
            Op::Add(a, b) => {
                if self.needs(*a) && self.needs(*b) {
                    self.acc(g, *a, |x| x.add_assign(&go));
                    self.acc_t(g, *b, go);
                } else if self.needs(*a) {
                    self.acc_t(g, *a, go);
                } else {
                    self.acc_t(g, *b, go);
                }
            }
            Op::Sub(a, b) => {
                self.acc(g, *a, |x| x.add_assign(&go));
                self.acc(g, *b, |x| {
                    for (p, q) in x.data_mut().iter_mut().zip(go.data()) {
                        *p -= q;
                    }
                });
            }
            Op::AddRow { a, row } => {
                self.acc(g, *row, |r| {
                    for i in 0..go.rows() {
                        for (p, q) in r.data_mut().iter_mut().zip(go.row(i)) {
                            *p += q;
                        }
                    }
                });
                self.acc_t(g, *a, go);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(g, *a, |x| {
                    for ((p, q), r) in x.data_mut().iter_mut().zip(go.data()).zip(bv.data()) {
                        *p += q * r;
                    }
                });
                self.acc(g, *b, |x| {
                    for ((p, q), r) in x.data_mut().iter_mut().zip(go.data()).zip(av.data()) {
                        *p += q * r;
                    }
                });
            }
            Op::Scale(a, s) => {
                let mut t = go;
                t.scale_in_place(*s);
                self.acc_t(g, *a, t);
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                self.acc(g, *a, |x| {
                    for ((p, q), &v) in x.data_mut().iter_mut().zip(go.data()).zip(xv.data()) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        let d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                        *p += q * d;
                    }
                });
            }
            Op::Relu(a) => {
                let xv = self.value(*a);
                self.acc(g, *a, |x| {
                    for ((p, q), &v) in x.data_mut().iter_mut().zip(go.data()).zip(xv.data()) {
                        if v > 0.0 {
                            *p += q;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.acc(g, *a, |x| {
                    for ((p, q), &y) in x.data_mut().iter_mut().zip(go.data()).zip(out.data()) {
                        *p += q * y * (1.0 - y);
                    }
                });
            }
            Op::RmsNorm { x, scale, inv } => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                let n = xv.cols() as f64;
                self.acc(g, *scale, |gs| {
                    for i in 0..xv.rows() {
                        let k = inv[i];
                        for ((p, q), v) in gs.data_mut().iter_mut().zip(go.row(i)).zip(xv.row(i)) {
                            *p += q * v * k;
                        }
                    }
                });
                self.acc(g, *x, |gx| {
                    for i in 0..xv.rows() {
                        let k = inv[i];
                        let xr = xv.row(i);
                        let gr = go.row(i);
                        // y_j = s_j x_j k ; dk/dx_m = -k^3 x_m / n
                        let dot: f64 = gr.iter().zip(sv.data()).zip(xr).map(|((q, s), v)| q * s * v).sum();
                        let c = k * k * k * dot / n;
                        for (((p, q), s), v) in gx.row_mut(i).iter_mut().zip(gr).zip(sv.data()).zip(xr) {
                            *p += q * s * k - c * v;
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                self.acc(g, *a, |x| {
                    for i in 0..out.rows() {
                        let y = out.row(i);
                        let gr = go.row(i);
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((p, yv), q) in x.row_mut(i).iter_mut().zip(y).zip(gr) {
                            *p += yv * (q - dot);
                        }
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let w = go.cols();
                self.acc(g, *a, |x| {
                    for i in 0..go.rows() {
                        for (p, q) in x.row_mut(i)[*start..*start + w].iter_mut().zip(go.row(i)) {
                            *p += q;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.acc(g, *p, |x| {
                        for i in 0..go.rows() {
                            for (a, b) in x.row_mut(i).iter_mut().zip(&go.row(i)[off..off + w]) {
                                *a += b;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let cols = go.cols();
                for p in parts {
                    let h = self.value(*p).rows();
                    self.acc(g, *p, |x| {
                        for (a, b) in x.data_mut().iter_mut().zip(&go.data()[off * cols..(off + h) * cols]) {
                            *a += b;
                        }
                    });
                    off += h;
                }
            }
            Op::Gather { table, ids } => {
                let cols = go.cols();
                let add_rows = |t: &mut Tensor| {
                    for (i, &id) in ids.iter().enumerate() {
                        for (a, b) in t.row_mut(id).iter_mut().zip(go.row(i)) {
                            *a += b;
                        }
                    }
                };
                // Parameter tables receive the scatter directly to avoid a dense copy.
                if let Op::Param(pid) = self.nodes[table.0].op {
                    let shape = self.shape(*table);
                    debug_assert_eq!(shape.1, cols);
                    grads.accumulate(pid, shape, add_rows);
                } else {
                    self.acc(g, *table, add_rows);
                }
            }
            Op::PairBias { table, idx, head } => {
                let h = *head;
                self.acc(g, *table, |t| {
                    for (&(a, b), q) in idx.iter().zip(go.data()) {
                        let c = t.cols();
                        t.data_mut()[a as usize * c + h] += q;
                        if b != NO_BUCKET {
                            t.data_mut()[b as usize * c + h] += q;
                        }
                    }
                });
            }
            Op::RowReplace { a, row, mask } => {
                self.acc(g, *row, |r| {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for (p, q) in r.data_mut().iter_mut().zip(go.row(i)) {
                                *p += q;
                            }
                        }
                    }
                });
                self.acc(g, *a, |x| {
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            for (p, q) in x.row_mut(i).iter_mut().zip(go.row(i)) {
                                *p += q;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = go.item();
                self.acc(g, *logits, |x| {
                    for (i, &t) in targets.iter().enumerate() {
                        if t == IGNORE {
                            continue;
                        }
                        for (p, q) in x.row_mut(i).iter_mut().zip(probs.row(i)) {
                            *p += s * q;
                        }
                        x.row_mut(i)[t] -= s;
                    }
                });
            }
            Op::SqErr { a, b } => {
                let s = go.item();
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(g, *a, |x| {
                    for ((p, u), v) in x.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *p += 2.0 * s * (u - v);
                    }
                });
                self.acc(g, *b, |x| {
                    for ((p, u), v) in x.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *p -= 2.0 * s * (u - v);
                    }
                });
            }
            Op::StraightThrough { a } => self.acc_t(g, *a, go),
            Op::SumAll(a) => {
                let s = go.item();
                self.acc(g, *a, |x| x.data_mut().iter_mut().for_each(|p| *p += s));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of every parameter entry.
    fn check<F>(params: &mut ParamStore, f: F)
    where
        F: Fn(&mut Tape) -> Var,
    {
        let grads = {
            let mut tape = Tape::new(params);
            let root = f(&mut tape);
            tape.backward(root)
        };
        let eval = |p: &ParamStore| {
            let mut tape = Tape::new(p);
            let root = f(&mut tape);
            tape.value(root).item()
        };
        let h = 1e-6;
        for pi in 0..params.len() {
            let id = ParamId(pi);
            let n = params.get(id).len();
            for j in 0..n {
                let orig = params.get(id).data()[j];
                params.get_mut(id).data_mut()[j] = orig + h;
                let up = eval(params);
                params.get_mut(id).data_mut()[j] = orig - h;
                let down = eval(params);
                params.get_mut(id).data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.slot(id).map_or(0.0, |t| t.data()[j]);
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "param {pi}[{j}] fd {fd} analytic {an}");
            }
        }
    }

    fn rand_params(shapes: &[(usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            p.add_normal(&format!("p{i}"), r, c, 0.7, &mut rng);
        }
        p
    }

    #[test]
    fn matmul_transposes_and_elementwise_ops() {
        let mut p = rand_params(&[(3, 4), (5, 4), (3, 5), (1, 5)], 1);
        check(&mut p, |t| {
            let a = t.param(ParamId(0));
            let b = t.param(ParamId(1));
            let c = t.param(ParamId(2));
            let r = t.param(ParamId(3));
            let ab = t.matmul_t(a, false, b, true); // 3x5
            let x = t.mul(ab, c);
            let x = t.add_row(x, r);
            let y = t.gelu(x);
            let z = t.sigmoid(y);
            let w = t.sub(z, c);
            let w = t.scale(w, 0.3);
            let at = t.matmul_t(a, true, ab, false); // 4x5
            let s1 = t.sum_all(at);
            let s2 = t.sq_err(w, ab);
            t.add(s1, s2)
        });
    }

    #[test]
    fn norm_softmax_slices_and_concat() {
        let mut p = rand_params(&[(4, 6), (1, 6), (6, 6), (4, 3)], 2);
        check(&mut p, |t| {
            let x = t.param(ParamId(0));
            let s = t.param(ParamId(1));
            let w = t.param(ParamId(2));
            let k = t.param(ParamId(3));
            let n = t.rms_norm(x, s);
            let h = t.matmul(n, w);
            let a = t.slice_cols(h, 1, 3);
            let b = t.slice_cols(h, 3, 3);
            let sc = t.matmul_t(a, false, b, true);
            let sm = t.softmax(sc, Some(0));
            let o = t.matmul(sm, k);
            let cc = t.concat_cols(&[o, a]);
            let cr = t.concat_rows(&[cc, cc]);
            let g = t.gelu(cr);
            t.cross_entropy_sum(g, &[0, 5, IGNORE, 2, 1, 1, 0, 3])
        });
    }

    #[test]
    fn gather_bias_and_row_replace() {
        let mut p = rand_params(&[(5, 3), (6, 2), (1, 3), (3, 3)], 3);
        check(&mut p, |t| {
            let table = t.param(ParamId(0));
            let bias_t = t.param(ParamId(1));
            let mrow = t.param(ParamId(2));
            let w = t.param(ParamId(3));
            let e = t.gather(table, &[4, 0, 4]);
            let e = t.row_replace(e, mrow, &[false, true, false]);
            let h = t.matmul(e, w);
            let idx = vec![(0, NO_BUCKET), (1, 2), (5, 5), (3, NO_BUCKET), (0, 1), (2, 4), (1, 1), (4, NO_BUCKET), (5, 0)];
            let b = t.pair_bias(bias_t, idx, 3, 3, 1);
            let s = t.add(h, b);
            let r = t.relu(s);
            let sm = t.softmax(r, None);
            t.sq_err(sm, h)
        });
    }

    #[test]
    fn straight_through_passes_gradient() {
        let p = rand_params(&[(2, 3)], 4);
        let mut t = Tape::new(&p);
        let x = t.param(ParamId(0));
        let q = t.straight_through(x, Tensor::filled(2, 3, 0.5));
        let s = t.sum_all(q);
        assert!((t.value(s).item() - 3.0).abs() < 1e-12);
        let g = t.backward(s);
        assert!(g.slot(ParamId(0)).unwrap().data().iter().all(|v| *v == 1.0));
    }
}
