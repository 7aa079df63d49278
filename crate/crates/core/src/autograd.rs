//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and returns gradients for the parameters that were
//! read through [`Tape::param`]. Parameters live in a [`ParamStore`] that the
//! tape borrows immutably, so the optimizer is the single writer.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name; parameter layouts are fixed by the model
    /// constructor.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }
}

/// Per-parameter gradients, `None` where a parameter was not touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient entry, zero for untouched parameters.
    pub fn at(&self, id: ParamId, row: usize, col: usize) -> f64 {
        self.grads[id.0].as_ref().map_or(0.0, |g| g[[row, col]])
    }

    fn accumulate(&mut self, id: ParamId, g: Array2<f64>) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g.clone());
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub struct Conv2dGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    PrefixSoftmax(Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    Im2Col(Var, Conv2dGeom),
    WeightedSum(Vec<(Var, f64)>),
    CrossEntropy {
        logits: Var,
        probs: Array2<f64>,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    MaskLoss {
        logits: Var,
        target: Array2<f64>,
        probs: Array2<f64>,
        w_bce: f64,
        w_dice: f64,
        eps: f64,
    },
    Detach,
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(x, 0) - x*t + ln(1 + e^{-|x|})`.
pub fn bce_with_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax where row `i` may attend to column `j` iff both lie in the
/// prefix (`i, j < prefix`) or `j <= i`.
fn prefix_softmax(x: &Array2<f64>, prefix: usize) -> Array2<f64> {
    let (rows, cols) = x.dim();
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        let limit = if i < prefix { prefix.min(cols) } else { (i + 1).min(cols) };
        let row = x.row(i);
        let max = row.iter().take(limit).cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..limit {
            let e = (row[j] - max).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for j in 0..limit {
            out[[i, j]] /= sum;
        }
    }
    out
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> (f64, f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (max, lse)
}

/// Mean next-token cross-entropy over rows with a target; also returns the
/// softmax probabilities.
pub(crate) fn cross_entropy(logits: &Array2<f64>, targets: &[Option<usize>]) -> (f64, Array2<f64>, usize) {
    let mut probs = Array2::zeros(logits.dim());
    let mut total = 0.0;
    let mut count = 0;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = logits.row(i);
        let (_, lse) = log_softmax_row(row);
        total += lse - row[t];
        for (j, v) in row.iter().enumerate() {
            probs[[i, j]] = (v - lse).exp();
        }
        count += 1;
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    (loss, probs, count)
}

/// `w_bce * mean BCE + w_dice * (1 - (2 sum p*g + eps) / (sum p + sum g + eps))`.
pub(crate) fn mask_loss_value(
    logits: &Array2<f64>,
    target: &Array2<f64>,
    w_bce: f64,
    w_dice: f64,
    eps: f64,
) -> (f64, Array2<f64>) {
    let n = logits.len() as f64;
    let probs = logits.mapv(sigmoid);
    let bce: f64 = logits
        .iter()
        .zip(target.iter())
        .map(|(&x, &t)| bce_with_logits(x, t))
        .sum::<f64>()
        / n;
    let inter: f64 = probs.iter().zip(target.iter()).map(|(p, g)| p * g).sum();
    let denom = probs.sum() + target.sum() + eps;
    let dice = 1.0 - (2.0 * inter + eps) / denom;
    (w_bce * bce + w_dice * dice, probs)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(val), _) => val,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + &r.row(0);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// `x · W + b` with `b` a `1 × n` row.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let g = self.param(gamma);
        let b = self.param(beta);
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * &self.value(g).row(0) + self.value(b).row(0);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma: g,
                beta: b,
                xhat,
                inv_std,
            },
        )
    }

    /// Softmax with prefix-LM masking (see [`prefix_softmax`]).
    pub fn prefix_softmax(&mut self, x: Var, prefix: usize) -> Var {
        let v = prefix_softmax(self.value(x), prefix);
        self.push(v, Op::PrefixSoftmax(x))
    }

    /// Rows of `table` at `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let v = t.select(Axis(0), ids);
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        self.push(v, Op::SelectRows(a, rows.to_vec()))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape: size mismatch");
        let data: Vec<f64> = src.iter().cloned().collect();
        let v = Array2::from_shape_vec((rows, cols), data).expect("reshape");
        self.push(v, Op::Reshape(a))
    }

    /// Unfolds an `(H·W) × C` feature map into `(Ho·Wo) × (k·k·C)` patches;
    /// column `(ki·k + kj)·C + c`. Zero padding.
    pub fn im2col(&mut self, x: Var, g: Conv2dGeom) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), (g.height * g.width, g.channels), "im2col: input shape");
        let (ho, wo) = (g.out_height(), g.out_width());
        let k = g.kernel;
        let mut out = Array2::zeros((ho * wo, k * k * g.channels));
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = oy * wo + ox;
                for ki in 0..k {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let irow = iy as usize * g.width + ix as usize;
                        let base = (ki * k + kj) * g.channels;
                        for c in 0..g.channels {
                            out[[orow, base + c]] = xv[[irow, c]];
                        }
                    }
                }
            }
        }
        self.push(out, Op::Im2Col(x, g))
    }

    /// `Σ wᵢ·xᵢ` over `1 × 1` scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        self.push(Array2::from_elem((1, 1), total), Op::WeightedSum(terms.to_vec()))
    }

    /// Mean cross-entropy over rows that carry a target. Zero (with zero
    /// gradient) when no row does.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        assert_eq!(self.value(logits).nrows(), targets.len(), "cross_entropy: row mismatch");
        let (loss, probs, count) = cross_entropy(self.value(logits), targets);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                count,
            },
        )
    }

    /// Weighted BCE-with-logits plus soft dice against a binary target.
    pub fn mask_loss(&mut self, logits: Var, target: &Array2<f64>, w_bce: f64, w_dice: f64, eps: f64) -> Var {
        assert_eq!(self.value(logits).dim(), target.dim(), "mask_loss: shape mismatch");
        let (loss, probs) = mask_loss_value(self.value(logits), target, w_bce, w_dice, eps);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::MaskLoss {
                logits,
                target: target.clone(),
                probs,
                w_bce,
                w_dice,
                eps,
            },
        )
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach)
    }

    /// Gradients of the scalar `loss` with respect to every parameter read on
    /// this tape.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Grads::zeros_like(self.params);

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(a) => *a += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf | Op::Detach => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Gelu(a) => {
                    let mut ga = self.value(*a).mapv(gelu_grad);
                    ga *= &g;
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * &self.value(*gamma).row(0);
                    let n = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let mean_d = dr.sum() / n;
                        let mean_dx = dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] = inv_std[r] * (dr[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    acc(&mut grads, *beta, gb);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *x, gx);
                }
                Op::PrefixSoftmax(x) => {
                    let y = self.nodes[i].value.as_ref().expect("softmax value");
                    let mut gx = y * &g;
                    for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |v, &yv| *v -= yv * dot);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gather(table, ids) => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + n]).to_owned());
                        start += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SelectRows(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let data: Vec<f64> = g.iter().cloned().collect();
                    acc(&mut grads, *a, Array2::from_shape_vec(dim, data).expect("reshape grad"));
                }
                Op::Im2Col(x, geom) => {
                    let mut gx = Array2::zeros((geom.height * geom.width, geom.channels));
                    let (ho, wo) = (geom.out_height(), geom.out_width());
                    let k = geom.kernel;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let orow = oy * wo + ox;
                            for ki in 0..k {
                                let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                                if iy < 0 || iy >= geom.height as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                                    if ix < 0 || ix >= geom.width as isize {
                                        continue;
                                    }
                                    let irow = iy as usize * geom.width + ix as usize;
                                    let base = (ki * k + kj) * geom.channels;
                                    for c in 0..geom.channels {
                                        gx[[irow, c]] += g[[orow, base + c]];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::WeightedSum(terms) => {
                    let up = g[[0, 0]];
                    for &(v, w) in terms {
                        acc(&mut grads, v, Array2::from_elem((1, 1), up * w));
                    }
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                    count,
                } => {
                    let mut gl = Array2::zeros(probs.dim());
                    if *count > 0 {
                        let k = g[[0, 0]] / *count as f64;
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for c in 0..probs.ncols() {
                                gl[[r, c]] = k * probs[[r, c]];
                            }
                            gl[[r, t]] -= k;
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::MaskLoss {
                    logits,
                    target,
                    probs,
                    w_bce,
                    w_dice,
                    eps,
                } => {
                    let up = g[[0, 0]];
                    let n = probs.len() as f64;
                    let inter: f64 = probs.iter().zip(target.iter()).map(|(p, t)| p * t).sum();
                    let denom = probs.sum() + target.sum() + eps;
                    let num = 2.0 * inter + eps;
                    let mut gl = Array2::zeros(probs.dim());
                    ndarray::Zip::from(&mut gl)
                        .and(probs)
                        .and(target)
                        .for_each(|o, &p, &t| {
                            let d_bce = (p - t) / n;
                            let d_dice_dp = -(2.0 * t * denom - num) / (denom * denom);
                            *o = up * (w_bce * d_bce + w_dice * d_dice_dp * p * (1.0 - p));
                        });
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of `f` against the tape gradient for every
    /// entry of every parameter.
    fn check(store: &ParamStore, f: impl Fn(&mut Tape) -> Var) {
        let tape_grads = {
            let mut tape = Tape::new(store);
            let loss = f(&mut tape);
            tape.backward(loss)
        };
        let h = 1e-6;
        for id in store.ids() {
            let (rows, cols) = store.get(id).dim();
            for r in 0..rows {
                for c in 0..cols {
                    let mut plus = store.clone();
                    plus.get_mut(id)[[r, c]] += h;
                    let mut minus = store.clone();
                    minus.get_mut(id)[[r, c]] -= h;
                    let fp = {
                        let mut t = Tape::new(&plus);
                        let l = f(&mut t);
                        t.scalar(l)
                    };
                    let fm = {
                        let mut t = Tape::new(&minus);
                        let l = f(&mut t);
                        t.scalar(l)
                    };
                    let numeric = (fp - fm) / (2.0 * h);
                    let analytic = tape_grads.at(id, r, c);
                    let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                    assert!(err < 1e-5, "{}[{r},{c}]: analytic {analytic} numeric {numeric}", store.name(id));
                }
            }
        }
    }

    fn store_with(entries: &[(&str, Array2<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, v) in entries {
            s.add(*n, v.clone());
        }
        s
    }

    #[test]
    fn matmul_and_activations() {
        let s = store_with(&[
            ("a", array![[0.3, -0.7, 1.1], [0.2, 0.5, -0.4]]),
            ("b", array![[0.9, -0.1], [0.4, 0.8], [-0.6, 0.3]]),
            ("bias", array![[0.05, -0.2]]),
        ]);
        check(&s, |t| {
            let a = t.param(ParamId(0));
            let b = t.param(ParamId(1));
            let bias = t.param(ParamId(2));
            let y = t.matmul(a, b);
            let y = t.add_row(y, bias);
            let y = t.gelu(y);
            let z = t.matmul_nt(y, y);
            let m = t.mul(z, z);
            let r = t.reshape(m, 1, 4);
            let w = t.constant(array![[1.0], [2.0], [-1.0], [0.5]]);
            let out = t.matmul(r, w);
            t.scale(out, 0.7)
        });
    }

    #[test]
    fn layer_norm_and_softmax() {
        let s = store_with(&[
            ("x", array![[0.3, -0.7, 1.1, 0.0], [0.2, 0.5, -0.4, 0.9], [1.0, -1.0, 0.3, 0.2]]),
            ("g", array![[1.1, 0.9, 1.3, 0.7]]),
            ("b", array![[0.1, -0.1, 0.0, 0.2]]),
        ]);
        check(&s, |t| {
            let x = t.param(ParamId(0));
            let y = t.layer_norm(x, ParamId(1), ParamId(2));
            let sc = t.matmul_nt(y, y);
            let p = t.prefix_softmax(sc, 2);
            let o = t.matmul(p, y);
            let w = t.constant(Array2::from_shape_fn((4, 1), |(i, _)| i as f64 - 1.5));
            let o = t.matmul(o, w);
            let o = t.reshape(o, 1, 3);
            let wt = t.constant(array![[1.0], [-2.0], [0.5]]);
            t.matmul(o, wt)
        });
    }

    #[test]
    fn structural_ops_and_losses() {
        let s = store_with(&[
            ("emb", Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin())),
            ("img", Array2::from_shape_fn((16, 2), |(i, j)| ((i + 7 * j) as f64 * 0.21).cos())),
            ("k", Array2::from_shape_fn((18, 1), |(i, _)| (i as f64 * 0.13).sin())),
        ]);
        check(&s, |t| {
            let emb = t.param(ParamId(0));
            let rows = t.gather(emb, &[4, 1, 1, 0]);
            let a = t.slice_cols(rows, 1, 3);
            let b = t.select_rows(rows, &[2, 0]);
            let c = t.concat_rows(&[a, a]);
            let d = t.concat_cols(&[c, c]);
            let ce = t.cross_entropy(d, &[Some(1), None, Some(3), Some(0), None, Some(2), None, Some(1)]);
            let bb = t.concat_cols(&[b, b]);
            let ce2 = t.cross_entropy(bb, &[Some(5), Some(0)]);

            let img = t.param(ParamId(1));
            let cols = t.im2col(
                img,
                Conv2dGeom {
                    height: 4,
                    width: 4,
                    channels: 2,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
            );
            let k = t.param(ParamId(2));
            let conv = t.matmul(cols, k);
            let logits = t.reshape(conv, 4, 4);
            let target = Array2::from_shape_fn((4, 4), |(r, c)| if r + c < 4 { 1.0 } else { 0.0 });
            let ml = t.mask_loss(logits, &target, 2.0, 0.5, 1.0);

            let strided = t.im2col(
                img,
                Conv2dGeom {
                    height: 4,
                    width: 4,
                    channels: 2,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
            );
            let sm = t.matmul(strided, k);
            let sm = t.reshape(sm, 1, 4);
            let wt = t.constant(array![[0.3], [-0.2], [0.9], [0.1]]);
            let sv = t.matmul(sm, wt);
            t.weighted_sum(&[(ce, 1.0), (ce2, 0.5), (ml, 0.8), (sv, -1.3)])
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let s = store_with(&[("x", array![[2.0]])]);
        let mut t = Tape::new(&s);
        let x = t.param(ParamId(0));
        let d = t.detach(x);
        let y = t.mul(x, d);
        let g = t.backward(y);
        assert_eq!(g.at(ParamId(0), 0, 0), 2.0);
    }

    #[test]
    fn prefix_mask_shape() {
        let x = Array2::zeros((4, 4));
        let p = prefix_softmax(&x, 2);
        assert_eq!(p.row(0).to_vec(), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(p.row(1).to_vec(), vec![0.5, 0.5, 0.0, 0.0]);
        let third = 1.0 / 3.0;
        assert_eq!(p.row(2).to_vec(), vec![third, third, third, 0.0]);
        assert_eq!(p.row(3).to_vec(), vec![0.25; 4]);
    }

    #[test]
    fn empty_cross_entropy_is_zero_with_zero_grad() {
        let s = store_with(&[("l", array![[1.0, 2.0], [0.5, -0.5]])]);
        let mut t = Tape::new(&s);
        let l = t.param(ParamId(0));
        let ce = t.cross_entropy(l, &[None, None]);
        assert_eq!(t.scalar(ce), 0.0);
        let g = t.backward(ce);
        assert!(g.get(ParamId(0)).unwrap().iter().all(|&v| v == 0.0));
    }
}
