//! Reverse-mode automatic differentiation over small dense `f64` matrices.
//!
//! A [`Tape`] records a topologically ordered graph of matrix ops; a single
//! reverse sweep from seeded roots yields gradients for every tracked leaf.
//! The op set is exactly what the projection pathways, the losses, and the
//! toy transformer need. Scalars are `[1, 1]` matrices.
//!
//! Everything is plain sequential `f64` arithmetic, so values and gradients
//! are bit-reproducible across runs and thread counts.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_COEF: f64 = 0.044715;

/// Tanh-form GeLU.
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_prime(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// `[m, n] + [1, n]` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    /// Convex-ish combination `Σ_ℓ w[0, ℓ] · layers[ℓ]` with constant layers.
    WeightedLayerSum(Var, Vec<Mat>),
    GatherRows(Var, Vec<usize>),
    /// Mean token cross-entropy of row-aligned logits against target ids.
    CeMean(Var, Vec<usize>),
    /// Mean elementwise BCE-with-logits against constant targets.
    BceMean(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// Gradient storage produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, defaulting to zeros of the given shape.
    pub fn wrt(&self, v: Var, rows: usize, cols: usize) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros((rows, cols)))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let d = self.nodes[v.0].value.dim();
        (d.0, d.1)
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Untracked leaf: no gradient flows into it.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Tracked leaf (a parameter or a differentiable input).
    pub fn param(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Shape(format!("matmul [{ar}x{ac}] · [{br}x{bc}]")));
        }
        let value = self.value(a).dot(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(Error::Shape(format!("matmul_nt [{ar}x{ac}] · [{br}x{bc}]ᵀ")));
        }
        let value = self.value(a).dot(&self.value(b).t());
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMulNt(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let value = self.value(a) + self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != ac {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                self.shape(a),
                self.shape(row)
            )));
        }
        let value = self.value(a) + self.value(row);
        let tracked = self.tracked(a) || self.tracked(row);
        Ok(self.push(value, Op::AddRow(a, row), tracked))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, k), tracked)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let tracked = self.tracked(a);
        self.push(value, Op::Gelu(a), tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let tracked = self.tracked(a);
        self.push(value, Op::Sigmoid(a), tracked)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let tracked = self.tracked(a);
        self.push(value, Op::SoftmaxRows(a), tracked)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (rows, _) = self.shape(a);
        let value = self.value(a).mean_axis(Axis(0)).expect("non-empty rows").insert_axis(Axis(0));
        let tracked = self.tracked(a);
        let _ = rows;
        self.push(value, Op::MeanRows(a), tracked)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of zero blocks".into()));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::Shape(format!("concat_rows column mismatch: {c} vs {cols}")));
            }
            rows += r;
        }
        let mut value = Mat::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let m = self.value(p);
            let r = m.nrows();
            value.slice_mut(ndarray::s![at..at + r, ..]).assign(m);
            at += r;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), tracked))
    }

    pub fn weighted_layer_sum(&mut self, w: Var, layers: Vec<Mat>) -> Result<Var> {
        let (wr, wc) = self.shape(w);
        if wr != 1 || wc != layers.len() || layers.is_empty() {
            return Err(Error::Shape(format!(
                "weighted_layer_sum weights [{wr}x{wc}] over {} layers",
                layers.len()
            )));
        }
        let dim = layers[0].dim();
        if layers.iter().any(|l| l.dim() != dim) {
            return Err(Error::Shape("layer stack is ragged".into()));
        }
        let weights = self.value(w).row(0).to_owned();
        let mut value = Mat::zeros(dim);
        for (wl, layer) in weights.iter().zip(&layers) {
            value.scaled_add(*wl, layer);
        }
        let tracked = self.tracked(w);
        Ok(self.push(value, Op::WeightedLayerSum(w, layers), tracked))
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if indices.iter().any(|&i| i >= rows) || indices.is_empty() {
            return Err(Error::Shape(format!("gather_rows indices out of range for {rows} rows")));
        }
        let mut value = Mat::zeros((indices.len(), cols));
        for (out_i, &src) in indices.iter().enumerate() {
            value.row_mut(out_i).assign(&self.value(a).row(src));
        }
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::GatherRows(a, indices), tracked))
    }

    /// Mean cross-entropy of `logits[i, :]` against `targets[i]`.
    pub fn ce_mean(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "ce_mean: {} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if targets.iter().any(|&t| t >= cols) {
            return Err(Error::Shape("ce_mean: target id out of vocabulary".into()));
        }
        let probs = softmax_rows(self.value(logits));
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            total -= probs[[i, t]].max(f64::MIN_POSITIVE).ln();
        }
        let value = Mat::from_elem((1, 1), total / rows as f64);
        let tracked = self.tracked(logits);
        Ok(self.push(value, Op::CeMean(logits, targets), tracked))
    }

    /// Mean BCE-with-logits over a `[1, C]` logit row, numerically stable:
    /// `max(l, 0) − l·t + ln(1 + e^(−|l|))`.
    pub fn bce_mean(&mut self, logits: Var, targets: Mat) -> Result<Var> {
        let shape = self.shape(logits);
        if targets.dim() != shape {
            return Err(Error::Shape(format!(
                "bce_mean logits {:?} vs targets {:?}",
                shape,
                targets.dim()
            )));
        }
        let n = (shape.0 * shape.1) as f64;
        let mut total = 0.0;
        for (l, t) in self.value(logits).iter().zip(targets.iter()) {
            total += l.max(0.0) - l * t + (-l.abs()).exp().ln_1p();
        }
        let value = Mat::from_elem((1, 1), total / n);
        let tracked = self.tracked(logits);
        Ok(self.push(value, Op::BceMean(logits, targets), tracked))
    }

    /// Reverse sweep from the seeded roots. Each seed gradient must match
    /// its node's shape; seeds into the same node accumulate.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, seed) in seeds {
            let dim = self.nodes[v.0].value.dim();
            if seed.dim() != dim {
                return Err(Error::Shape(format!(
                    "backward seed {:?} for node of shape {:?}",
                    seed.dim(),
                    dim
                )));
            }
            match &mut grads[v.0] {
                Some(g) => *g += seed,
                slot => *slot = Some(seed.clone()),
            }
        }

        for id in (0..self.nodes.len()).rev() {
            if grads[id].is_none() || !self.nodes[id].tracked {
                continue;
            }
            let g = grads[id].clone().expect("checked above");
            let acc = |v: Var, delta: Mat, grads: &mut Vec<Option<Mat>>| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(m) => *m += &delta,
                    slot => *slot = Some(delta),
                }
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::MatMulNt(a, b) => {
                    // C = A·Bᵀ: dA = g·B, dB = gᵀ·A
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.clone(), &mut grads);
                }
                Op::AddRow(a, row) => {
                    acc(*a, g.clone(), &mut grads);
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*row, drow, &mut grads);
                }
                Op::Scale(a, k) => acc(*a, &g * *k, &mut grads),
                Op::Gelu(a) => {
                    let dx = self.value(*a).mapv(gelu_prime) * &g;
                    acc(*a, dx, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let s = &self.nodes[id].value;
                    let dx = s.mapv(|v| v * (1.0 - v)) * &g;
                    acc(*a, dx, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let s = &self.nodes[id].value;
                    let mut dx = Mat::zeros(s.dim());
                    for i in 0..s.nrows() {
                        let dot: f64 = s.row(i).iter().zip(g.row(i)).map(|(si, gi)| si * gi).sum();
                        for j in 0..s.ncols() {
                            dx[[i, j]] = s[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    acc(*a, dx, &mut grads);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).nrows();
                    let mut dx = Mat::zeros(self.value(*a).dim());
                    for mut r in dx.rows_mut() {
                        r.assign(&(&g.row(0) / rows as f64));
                    }
                    acc(*a, dx, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let r = self.value(p).nrows();
                        let slice = g.slice(ndarray::s![at..at + r, ..]).to_owned();
                        acc(p, slice, &mut grads);
                        at += r;
                    }
                }
                Op::WeightedLayerSum(w, layers) => {
                    let mut dw = Mat::zeros((1, layers.len()));
                    for (l, layer) in layers.iter().enumerate() {
                        dw[[0, l]] = (&g * layer).sum();
                    }
                    acc(*w, dw, &mut grads);
                }
                Op::GatherRows(a, indices) => {
                    let mut dx = Mat::zeros(self.value(*a).dim());
                    for (out_i, &src) in indices.iter().enumerate() {
                        let mut row = dx.row_mut(src);
                        row += &g.row(out_i);
                    }
                    acc(*a, dx, &mut grads);
                }
                Op::CeMean(logits, targets) => {
                    let gs = g[[0, 0]];
                    let n = targets.len() as f64;
                    let mut dx = softmax_rows(self.value(*logits));
                    for (i, &t) in targets.iter().enumerate() {
                        dx[[i, t]] -= 1.0;
                    }
                    dx.mapv_inplace(|v| v * gs / n);
                    acc(*logits, dx, &mut grads);
                }
                Op::BceMean(logits, targets) => {
                    let gs = g[[0, 0]];
                    let n = targets.len() as f64;
                    let lv = self.value(*logits);
                    let mut dx = Mat::zeros(lv.dim());
                    for ((d, l), t) in dx.iter_mut().zip(lv.iter()).zip(targets.iter()) {
                        *d = gs * (sigmoid(*l) - t) / n;
                    }
                    acc(*logits, dx, &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
