//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Named leaves
//! (parameters) are the gradient targets of [`Tape::backward`]. A tape is
//! consumed by `backward`; a second call is rejected.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x · wᵀ`
    Linear(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Cos(Var),
    Exp(Var),
    Log(Var, f64),
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    RowDot(Var, Var),
    SegmentSoftmax(Var, Vec<usize>),
    SoftmaxRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    named: BTreeMap<String, Var>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        assert!(!self.consumed, "tape used after backward");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A named leaf that receives a gradient. Re-registering a name returns
    /// the existing handle.
    pub fn input(&mut self, name: &str, t: Tensor) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.push(t, Op::Leaf, true);
        self.named.insert(name.to_string(), v);
        v
    }

    /// Records the parameter `name` from `store` (once per tape).
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.named.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Tape(format!("unknown parameter {name}")))?
            .clone();
        Ok(self.input(name, t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return shape_err(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            av.values(),
            (k as isize, 1),
            bv.values(),
            (n as isize, 1),
            out.values_mut(),
            true,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x · wᵀ` for `x: [n×k]`, `w: [m×k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
        if wv.cols() != k {
            return shape_err(format!(
                "linear input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            ));
        }
        let mut out = Tensor::zeros(&[n, m]);
        gemm(
            n,
            k,
            m,
            xv.values(),
            (k as isize, 1),
            wv.values(),
            (1, k as isize),
            out.values_mut(),
            true,
        );
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::Linear(x, w), ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("{what} {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let values = av
            .values()
            .iter()
            .zip(bv.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), values)
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() && bv.rows() == 1 && bv.cols() == av.cols() {
            return self.add_row(a, b);
        }
        let out = self.zip_same(a, b, |x, y| x + y, "add")?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return shape_err(format!("add_row {:?} + {:?}", av.shape(), rv.shape()));
        }
        let c = av.cols();
        let mut out = av.clone();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            *v += rv.values()[i % c];
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, |x, y| x - y, "sub")?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, |x, y| x * y, "mul")?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if factors.len() != av.rows() {
            return shape_err(format!(
                "scale_rows: {} factors for {} rows",
                factors.len(),
                av.rows()
            ));
        }
        let c = av.cols();
        let mut out = av.clone();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            *v *= factors[i / c.max(1)];
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::ScaleRows(a, factors), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `ln(x + floor)`.
    pub fn log(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| (x + floor).ln(), Op::Log(a, floor))
    }

    /// Sum of all entries as a `[1×1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return shape_err("concat of nothing"),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return shape_err(format!("concat_cols row mismatch {} vs {}", v.rows(), rows));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let t = Tensor::matrix(rows, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if start + len > c {
            return shape_err(format!("slice {start}..{} of {c} columns", start + len));
        }
        let rows = av.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.row_slice(r)[start..start + len]);
        }
        let t = Tensor::matrix(rows, len, out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::SliceCols(a, start), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= rows {
                return shape_err(format!("gather row {i} of {rows}"));
            }
            out.extend_from_slice(av.row_slice(i));
        }
        let t = Tensor::matrix(idx.len(), c, out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::GatherRows(a, idx), ng))
    }

    /// `out[idx[i]] += a[i]` into `n` zero-initialised rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Vec<usize>, n: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if idx.len() != av.rows() {
            return shape_err(format!("scatter: {} indices for {} rows", idx.len(), av.rows()));
        }
        let mut out = Tensor::zeros(&[n, c]);
        for (src, &dst) in idx.iter().enumerate() {
            if dst >= n {
                return shape_err(format!("scatter row {dst} of {n}"));
            }
            let o = &mut out.values_mut()[dst * c..(dst + 1) * c];
            for (x, y) in o.iter_mut().zip(av.row_slice(src)) {
                *x += y;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::ScatterAddRows(a, idx), ng))
    }

    /// Per-row inner products, `[n×d]·[n×d] -> [n×1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("row_dot {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let out: Vec<f64> = (0..av.rows())
            .map(|r| {
                av.row_slice(r)
                    .iter()
                    .zip(bv.row_slice(r))
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::column(out), Op::RowDot(a, b), ng))
    }

    /// Softmax over every entry of `a`.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.segment_softmax(a, vec![0, n])
    }

    /// Softmax over each contiguous segment `offsets[s]..offsets[s+1]` of
    /// the flattened values.
    pub fn segment_softmax(&mut self, a: Var, offsets: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if offsets.first() != Some(&0) || offsets.last() != Some(&av.len()) {
            return shape_err("segment offsets must span the tensor");
        }
        let mut out = av.clone();
        for w in offsets.windows(2) {
            if w[1] <= w[0] {
                return shape_err("empty softmax segment");
            }
            softmax_in_place(&mut out.values_mut()[w[0]..w[1]])?;
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SegmentSoftmax(a, offsets), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let c = out.cols();
        if c == 0 {
            return shape_err("softmax over zero columns");
        }
        for chunk in out.values_mut().chunks_mut(c) {
            softmax_in_place(chunk)?;
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Runs reverse-mode accumulation from the scalar `loss` and returns the
    /// gradient of every named leaf that influenced it. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape("tape already replayed; record a new one".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape("loss is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }

        let mut out = Gradients::new();
        for (name, v) in &self.named {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            out.insert(name.clone(), g);
        }
        self.nodes.clear();
        self.named.clear();
        self.consumed = true;
        Ok(out)
    }

    fn propagate(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let y = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    let da = slot(grads, *a, av.shape());
                    gemm(m, n, k, dy.values(), (n as isize, 1), bv.values(), (1, n as isize), da.values_mut(), false);
                }
                if wants(*b) {
                    let db = slot(grads, *b, bv.shape());
                    gemm(k, m, n, av.values(), (1, k as isize), dy.values(), (n as isize, 1), db.values_mut(), false);
                }
            }
            Op::Linear(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
                if wants(*x) {
                    let dx = slot(grads, *x, xv.shape());
                    gemm(n, m, k, dy.values(), (m as isize, 1), wv.values(), (k as isize, 1), dx.values_mut(), false);
                }
                if wants(*w) {
                    let dw = slot(grads, *w, wv.shape());
                    gemm(m, n, k, dy.values(), (1, m as isize), xv.values(), (k as isize, 1), dw.values_mut(), false);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        slot(grads, v, dy.shape()).add_assign(dy);
                    }
                }
            }
            Op::AddRow(a, r) => {
                if wants(*a) {
                    slot(grads, *a, dy.shape()).add_assign(dy);
                }
                if wants(*r) {
                    let rv = val(*r);
                    let c = rv.cols();
                    let dr = slot(grads, *r, rv.shape());
                    for (j, g) in dy.values().iter().enumerate() {
                        dr.values_mut()[j % c] += g;
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    slot(grads, *a, dy.shape()).add_assign(dy);
                }
                if wants(*b) {
                    let db = slot(grads, *b, dy.shape());
                    for (d, g) in db.values_mut().iter_mut().zip(dy.values()) {
                        *d -= g;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let da = slot(grads, *a, av.shape());
                    for ((d, g), o) in da.values_mut().iter_mut().zip(dy.values()).zip(bv.values()) {
                        *d += g * o;
                    }
                }
                if wants(*b) {
                    let db = slot(grads, *b, bv.shape());
                    for ((d, g), o) in db.values_mut().iter_mut().zip(dy.values()).zip(av.values()) {
                        *d += g * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                let da = slot(grads, *a, dy.shape());
                for (d, g) in da.values_mut().iter_mut().zip(dy.values()) {
                    *d += g * c;
                }
            }
            Op::ScaleRows(a, f) => {
                let cols = dy.cols().max(1);
                let da = slot(grads, *a, dy.shape());
                for (j, (d, g)) in da.values_mut().iter_mut().zip(dy.values()).enumerate() {
                    *d += g * f[j / cols];
                }
            }
            Op::Tanh(a) => elementwise(grads, *a, dy, y, val(*a), |_, y| 1.0 - y * y),
            Op::Sigmoid(a) => elementwise(grads, *a, dy, y, val(*a), |_, y| y * (1.0 - y)),
            Op::Relu(a) => elementwise(grads, *a, dy, y, val(*a), |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Cos(a) => elementwise(grads, *a, dy, y, val(*a), |x, _| -x.sin()),
            Op::Exp(a) => elementwise(grads, *a, dy, y, val(*a), |_, y| y),
            Op::Log(a, floor) => {
                let floor = *floor;
                elementwise(grads, *a, dy, y, val(*a), move |x, _| 1.0 / (x + floor))
            }
            Op::Sum(a) => {
                let g = dy.item();
                let da = slot(grads, *a, val(*a).shape());
                da.values_mut().iter_mut().for_each(|d| *d += g);
            }
            Op::ConcatCols(parts) => {
                let rows = dy.rows();
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    if wants(p) {
                        let dp = slot(grads, p, pv.shape());
                        for r in 0..rows {
                            let src = &dy.row_slice(r)[offset..offset + w];
                            for (d, g) in dp.values_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let (c, w) = (av.cols(), dy.cols());
                let da = slot(grads, *a, av.shape());
                for r in 0..dy.rows() {
                    let dst = &mut da.values_mut()[r * c + start..r * c + start + w];
                    for (d, g) in dst.iter_mut().zip(dy.row_slice(r)) {
                        *d += g;
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let av = val(*a);
                let c = av.cols();
                let da = slot(grads, *a, av.shape());
                for (src, &dst) in idx.iter().enumerate() {
                    let o = &mut da.values_mut()[dst * c..(dst + 1) * c];
                    for (d, g) in o.iter_mut().zip(dy.row_slice(src)) {
                        *d += g;
                    }
                }
            }
            Op::ScatterAddRows(a, idx) => {
                let av = val(*a);
                let c = av.cols();
                let da = slot(grads, *a, av.shape());
                for (src, &dst) in idx.iter().enumerate() {
                    let o = &mut da.values_mut()[src * c..(src + 1) * c];
                    for (d, g) in o.iter_mut().zip(dy.row_slice(dst)) {
                        *d += g;
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = av.cols();
                for (this, other) in [(*a, bv), (*b, av)] {
                    if !wants(this) {
                        continue;
                    }
                    let d = slot(grads, this, other.shape());
                    for (r, g) in dy.values().iter().enumerate() {
                        let dst = &mut d.values_mut()[r * c..(r + 1) * c];
                        for (x, o) in dst.iter_mut().zip(other.row_slice(r)) {
                            *x += g * o;
                        }
                    }
                }
            }
            Op::SegmentSoftmax(a, offsets) => {
                let da = slot(grads, *a, y.shape());
                for w in offsets.windows(2) {
                    softmax_backward(&y.values()[w[0]..w[1]], &dy.values()[w[0]..w[1]], &mut da.values_mut()[w[0]..w[1]]);
                }
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                let da = slot(grads, *a, y.shape());
                for r in 0..y.rows() {
                    let s = r * c..(r + 1) * c;
                    softmax_backward(&y.values()[s.clone()], &dy.values()[s.clone()], &mut da.values_mut()[s]);
                }
            }
        }
        Ok(())
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn elementwise(
    grads: &mut [Option<Tensor>],
    a: Var,
    dy: &Tensor,
    y: &Tensor,
    x: &Tensor,
    deriv: impl Fn(f64, f64) -> f64,
) {
    let da = slot(grads, a, x.shape());
    for (((d, g), &xv), &yv) in da.values_mut().iter_mut().zip(dy.values()).zip(x.values()).zip(y.values()) {
        *d += g * deriv(xv, yv);
    }
}

fn softmax_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
        *d += yv * (g - dot);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax; rejects NaN input.
pub fn softmax_in_place(xs: &mut [f64]) -> Result<()> {
    if xs.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in softmax input".into()));
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in xs.iter_mut() {
        *v /= total;
    }
    Ok(())
}
