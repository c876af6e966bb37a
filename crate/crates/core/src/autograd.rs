//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape built for one forward pass. Parameters are borrowed
//! from a [`ParamStore`] rather than copied, and [`Graph::backward`] returns a
//! dense [`Gradients`] value aligned with the store. Every value is a 2-D
//! matrix; row vectors are `1 x n`.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Floor applied to probabilities before taking a logarithm in [`Graph::nll`].
pub const PROB_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable matrices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` means "no contribution".
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    fn add_to(&mut self, id: ParamId, g: Mat) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            self.add_to(id, g.clone());
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Mat),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<Option<usize>>),
    Softmax(Var),
    SumCols(Var),
    SumAll(Var),
    BatchNorm(Var, Mat),
    SegmentMax(Var, Vec<Option<usize>>),
    Im2Col(Var, Vec<(usize, usize)>, usize),
    Nll(Var, Vec<usize>),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
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

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m.view(),
            Value::Param(id) => self.store.get(*id).view(),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A parameter used as a constant (no gradient flows into it).
    pub fn frozen_param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// `a (m x n) + b (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b).0, 1, "add_row expects a row vector");
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::AddRow(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) - &self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) * &self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// `a (m x n) * b (1 x n)` element-wise, broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b).0, 1, "mul_row expects a row vector");
        let v = &self.value(a) * &self.value(b);
        self.push(v, Op::MulRow(a, b), &[a, b])
    }

    /// `a (m x n) / b (m x 1)` broadcast over columns.
    pub fn div_col(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b).1, 1, "div_col expects a column vector");
        let v = &self.value(a) / &self.value(b);
        self.push(v, Op::DivCol(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).mapv(|x| x * factor);
        self.push(v, Op::Scale(a, factor), &[a])
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 - x);
        self.push(v, Op::OneMinus(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, height: usize) -> Var {
        let v = self.value(a).slice(s![start..start + height, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    /// Row lookup; `None` yields a zero row that receives no gradient.
    pub fn gather(&mut self, table: Var, rows: Vec<Option<usize>>) -> Var {
        let t = self.value(table);
        let mut v = Mat::zeros((rows.len(), t.ncols()));
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = r {
                v.row_mut(i).assign(&t.row(*r));
            }
        }
        self.push(v, Op::Gather(table, rows), &[table])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_masked(a, None)
    }

    /// Row-wise softmax where columns with `mask[j] == false` get zero weight.
    pub fn softmax_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let v = softmax_rows(self.value(a), mask);
        self.push(v, Op::Softmax(a), &[a])
    }

    /// `m x n -> m x 1` row sums.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    /// Column-wise standardization with batch statistics. Returns the
    /// normalized output together with the batch mean and (biased) variance.
    pub fn batch_norm(&mut self, a: Var, eps: f64) -> (Var, Mat, Mat) {
        let x = self.value(a);
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
        let centered = &x - &mean;
        let var = centered.mapv(|c| c * c).sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let y = &centered * &inv_std;
        let out = self.push(y, Op::BatchNorm(a, inv_std), &[a]);
        (out, mean, var)
    }

    /// Column-wise max over each row segment `(start, len)`; empty segments give zeros.
    pub fn segment_max(&mut self, a: Var, segments: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let cols = x.ncols();
        let mut v = Mat::zeros((segments.len(), cols));
        let mut arg = vec![None; segments.len() * cols];
        for (si, &(start, len)) in segments.iter().enumerate() {
            if len == 0 {
                continue;
            }
            for c in 0..cols {
                let mut best = start;
                for r in start + 1..start + len {
                    if x[[r, c]] > x[[best, c]] {
                        best = r;
                    }
                }
                v[[si, c]] = x[[best, c]];
                arg[si * cols + c] = Some(best);
            }
        }
        self.push(v, Op::SegmentMax(a, arg), &[a])
    }

    /// Unfolds each row segment into sliding windows of `width` rows
    /// (zero-padded at segment borders), one output row per input row.
    pub fn im2col(&mut self, a: Var, segments: &[(usize, usize)], width: usize) -> Var {
        assert!(width % 2 == 1, "im2col width must be odd");
        let x = self.value(a);
        let c = x.ncols();
        let pad = width / 2;
        let mut v = Mat::zeros((x.nrows(), c * width));
        for &(start, len) in segments {
            for p in 0..len {
                for k in 0..width {
                    let src = p as isize + k as isize - pad as isize;
                    if src >= 0 && (src as usize) < len {
                        v.slice_mut(s![start + p, k * c..(k + 1) * c])
                            .assign(&x.row(start + src as usize));
                    }
                }
            }
        }
        self.push(v, Op::Im2Col(a, segments.to_vec(), width), &[a])
    }

    /// Summed negative log-likelihood of `targets` under row-wise probabilities.
    pub fn nll(&mut self, probs: Var, targets: &[usize]) -> Var {
        let p = self.value(probs);
        assert_eq!(p.nrows(), targets.len(), "nll: target count mismatch");
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -p[[i, t]].max(PROB_EPSILON).ln())
            .sum();
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::Nll(probs, targets.to_vec()),
            &[probs],
        )
    }

    /// Back-propagates from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let mut out = Gradients::zeros_like(self.store);
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(id) = node.value {
                        out.add_to(id, g);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.wants(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        acc(&mut grads, *a, ga);
                    }
                    if self.wants(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.wants(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.wants(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.wants(*b) {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.wants(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.wants(*b) {
                        acc(&mut grads, *b, g.mapv(|x| -x));
                    }
                    if self.wants(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.wants(*a) {
                        acc(&mut grads, *a, &g * &self.value(*b));
                    }
                    if self.wants(*b) {
                        acc(&mut grads, *b, &g * &self.value(*a));
                    }
                }
                Op::MulRow(a, b) => {
                    if self.wants(*b) {
                        let gb = (&g * &self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *b, gb);
                    }
                    if self.wants(*a) {
                        acc(&mut grads, *a, &g * &self.value(*b));
                    }
                }
                Op::DivCol(a, b) => {
                    let bv = self.value(*b);
                    if self.wants(*b) {
                        let out_v = self.own_value(idx);
                        let gb = -(&g * out_v).sum_axis(Axis(1)).insert_axis(Axis(1)) / &bv;
                        acc(&mut grads, *b, gb);
                    }
                    if self.wants(*a) {
                        acc(&mut grads, *a, &g / &bv);
                    }
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g.mapv(|x| x * f)),
                Op::OneMinus(a) => acc(&mut grads, *a, g.mapv(|x| -x)),
                Op::Sigmoid(a) => {
                    let y = self.own_value(idx);
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = self.own_value(idx);
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let y = self.own_value(idx);
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|g, &y| {
                        if y <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let y = self.own_value(idx);
                    acc(&mut grads, *a, &g * y);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if self.wants(*p) {
                            acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        if self.wants(*p) {
                            acc(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    let h = g.nrows();
                    ga.slice_mut(s![*start..*start + h, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(t, rows) => {
                    let mut gt = Mat::zeros(self.shape(*t));
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = r {
                            let mut dst = gt.row_mut(*r);
                            dst += &g.row(i);
                        }
                    }
                    acc(&mut grads, *t, gt);
                }
                Op::Softmax(a) => {
                    let y = self.own_value(idx);
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let ga = g.broadcast(self.shape(*a)).unwrap().to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::BatchNorm(a, inv_std) => {
                    let y = self.own_value(idx);
                    let n = y.nrows().max(1) as f64;
                    let sum_g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let sum_gy = (&g * y).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = (&(&g * n) - &sum_g - &(y * &sum_gy)) * inv_std / n;
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentMax(a, arg) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    let cols = g.ncols();
                    for (k, r) in arg.iter().enumerate() {
                        if let Some(r) = r {
                            let (si, c) = (k / cols, k % cols);
                            ga[[*r, c]] += g[[si, c]];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Im2Col(a, segments, width) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    let c = ga.ncols();
                    let pad = width / 2;
                    for &(start, len) in segments {
                        for p in 0..len {
                            for k in 0..*width {
                                let src = p as isize + k as isize - pad as isize;
                                if src >= 0 && (src as usize) < len {
                                    let mut dst = ga.row_mut(start + src as usize);
                                    dst += &g.slice(s![start + p, k * c..(k + 1) * c]);
                                }
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Nll(p, targets) => {
                    let pv = self.value(*p);
                    let mut gp = Mat::zeros(pv.dim());
                    let scale = g[[0, 0]];
                    for (i, &t) in targets.iter().enumerate() {
                        let q = pv[[i, t]];
                        if q > PROB_EPSILON {
                            gp[[i, t]] = -scale / q;
                        }
                    }
                    acc(&mut grads, *p, gp);
                }
            }
        }
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn own_value(&self, idx: usize) -> &Mat {
        match &self.nodes[idx].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(a) => *a += &g,
        slot @ None => *slot = Some(g),
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

/// Numerically stable row-wise softmax; masked-out columns get weight 0 and
/// a fully masked row is all zeros.
pub fn softmax_rows(x: ArrayView2<'_, f64>, mask: Option<&[bool]>) -> Mat {
    let mut out = Mat::zeros(x.dim());
    for (row, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| keep(*j))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
            if keep(j) {
                *d = (v - max).exp();
                total += *d;
            }
        }
        dst.mapv_inplace(|d| d / total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(
        store: &ParamStore,
        id: ParamId,
        f: &dyn Fn(&ParamStore) -> f64,
    ) -> Mat {
        let h = 1e-5;
        let mut s = store.clone();
        let mut out = Mat::zeros(store.get(id).dim());
        for idx in 0..out.len() {
            let (r, c) = (idx / out.ncols(), idx % out.ncols());
            let orig = s.get(id)[[r, c]];
            s.get_mut(id)[[r, c]] = orig + h;
            let up = f(&s);
            s.get_mut(id)[[r, c]] = orig - h;
            let down = f(&s);
            s.get_mut(id)[[r, c]] = orig;
            out[[r, c]] = (up - down) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Mat, b: &Mat) -> f64 {
        let diff = (a - b).mapv(|x| x * x).sum().sqrt();
        let scale = a.mapv(|x| x * x).sum().sqrt().max(b.mapv(|x| x * x).sum().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_respect_mask() {
        let x = array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let y = softmax_rows(x.view(), None);
        for r in y.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let y = softmax_rows(x.view(), Some(&[true, false, true]));
        assert_eq!(y[[0, 1]], 0.0);
        assert!((y.row(1).sum() - 1.0).abs() < 1e-12);
        let y = softmax_rows(x.view(), Some(&[false, false, false]));
        assert_eq!(y.sum(), 0.0);
    }

    #[test]
    fn composite_ops_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.3]]);
        let b = store.add("b", array![[0.05, -0.1, 0.2]]);
        let t = store.add("t", array![[0.2, 0.7], [-0.5, 0.1], [0.9, -0.4], [0.3, 0.3]]);
        let x = array![[0.5, -1.0], [1.5, 0.25], [-0.7, 0.8], [0.1, 0.2]];

        let forward = |s: &ParamStore| -> (f64, Gradients) {
            let mut g = Graph::new(s);
            let tv = g.param(t);
            let rows = g.gather(tv, vec![Some(1), None, Some(3), Some(1)]);
            let xv = g.constant(x.clone());
            let xin = g.add(xv, rows);
            let wv = g.param(w);
            let bv = g.param(b);
            let h = g.matmul(xin, wv);
            let h = g.add_row(h, bv);
            let segs = [(0, 3), (3, 1)];
            let unf = g.im2col(h, &segs, 3);
            let (bn, _, _) = g.batch_norm(unf, 1e-5);
            let sig = g.sigmoid(bn);
            let th = g.tanh(sig);
            let sl = g.slice_cols(th, 1, 6);
            let sl = g.relu(sl);
            let pooled = g.segment_max(sl, &segs);
            let e = g.exp(pooled);
            let den = g.sum_cols(e);
            let q = g.div_col(e, den);
            let tr = g.transpose(q);
            let back = g.matmul(q, tr);
            let sm = g.softmax(back);
            let loss = g.nll(sm, &[0, 1]);
            (g.scalar(loss), g.backward(loss))
        };

        let (_, grads) = forward(&store);
        for id in [w, b, t] {
            let numeric = numeric_grad(&store, id, &|s| forward(s).0);
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Mat::zeros(numeric.dim()));
            assert!(
                rel_err(&analytic, &numeric) < 1e-6,
                "{}: analytic {analytic:?} numeric {numeric:?}",
                store.name(id)
            );
        }
    }

    #[test]
    fn gather_with_none_gets_no_gradient() {
        let mut store = ParamStore::new();
        let t = store.add("t", array![[1.0, 2.0], [3.0, 4.0]]);
        let mut g = Graph::new(&store);
        let tv = g.param(t);
        let r = g.gather(tv, vec![None, Some(0)]);
        let s = g.sum_all(r);
        let grads = g.backward(s);
        assert_eq!(grads.get(t).unwrap(), &array![[1.0, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn clip_global_norm_rescales() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[3.0, 4.0]]);
        let mut g = Graph::new(&store);
        let av = g.param(a);
        let sq = g.mul(av, av);
        let s = g.sum_all(sq);
        let mut grads = g.backward(s);
        assert!((grads.global_norm() - 10.0).abs() < 1e-12);
        let before = grads.clip_global_norm(5.0);
        assert!((before - 10.0).abs() < 1e-12);
        assert!((grads.global_norm() - 5.0).abs() < 1e-12);
    }
}
