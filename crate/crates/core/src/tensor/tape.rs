use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
    Scale(f64),
}

/// Nonlinearity applied to convolution outputs before max-over-time pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvActivation {
    #[default]
    Relu,
    Identity,
}

/// One filter bank of a given width: `weight` is `[filters × (channels·width)]`,
/// indexed `channel * width + offset`; `bias` holds one value per filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvBank {
    pub weight: Var,
    pub bias: Var,
    pub width: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// Binary op whose second operand is a vector broadcast over rows.
    AddRows(Var, Var),
    MulRows(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    ConvMaxPool {
        input: Var,
        banks: Vec<ConvBank>,
        activation: ConvActivation,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Nll {
        probs: Var,
        gold: Vec<usize>,
        eps: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param => vec![],
            MatMul(a, b) | Add(a, b) | Mul(a, b) | AddRows(a, b) | MulRows(a, b) => vec![*a, *b],
            Transpose(x) | Scale(x, _) | Tanh(x) | Sigmoid(x) | Relu(x) | Sum(x) => vec![*x],
            Softmax { x, .. } | SliceCols { x, .. } | Dropout { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            GatherRows { table, .. } => vec![*table],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
            ConvMaxPool { input, banks, .. } => std::iter::once(*input)
                .chain(banks.iter().flat_map(|b| [b.weight, b.bias]))
                .collect(),
            Nll { probs, .. } => vec![*probs],
        }
    }
}

/// Values saved by a forward step for use in the backward step.
#[derive(Debug, Clone, PartialEq)]
enum Saved {
    None,
    /// Max-over-time position and the pre-activation value there, per filter.
    Pool {
        argmax: Vec<usize>,
        zmax: Vec<f64>,
    },
    Clamped(usize),
}

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Arc<Tensor>>,
    ops: Vec<Op>,
    saved: Vec<Saved>,
    requires: Vec<bool>,
    params: Vec<(ParamId, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Number of probabilities clamped by [`Tape::nll`] on this tape.
    pub fn clamp_count(&self) -> usize {
        self.saved
            .iter()
            .map(|s| match s {
                Saved::Clamped(n) => *n,
                _ => 0,
            })
            .sum()
    }

    fn push_raw(&mut self, value: Arc<Tensor>, op: Op, saved: Saved, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.saved.push(saved);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let (value, saved) = eval_op(&op, &self.values)?;
        let requires = op.inputs().iter().any(|v| self.requires[v.0]);
        Ok(self.push_raw(Arc::new(value), op, saved, requires))
    }

    /// Leaf input; participates in differentiation if `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires = tensor.requires_grad();
        self.push_raw(Arc::new(tensor), Op::Leaf, Saved::None, requires)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_raw(Arc::new(tensor.with_requires_grad(false)), Op::Leaf, Saved::None, false)
    }

    /// Trainable parameter leaf sharing storage with `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push_raw(store.shared(id), Op::Param, Saved::None, true);
        self.params.push((id, v));
        v
    }

    /// Parameter leaf excluded from differentiation.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push_raw(store.shared(id), Op::Leaf, Saved::None, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Transpose(x))
    }

    /// Pointwise operations. Binary operations take equal shapes, or a
    /// right operand that is a vector matching the left operand's last
    /// dimension, broadcast over every row (bias-style).
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = matches!(op, Elementwise::Add | Elementwise::Mul);
        match (need_b, b) {
            (true, None) => return Err(Error::Contract(format!("{op:?} needs two operands"))),
            (false, Some(_)) => return Err(Error::Contract(format!("{op:?} is unary"))),
            _ => {}
        }
        let op = match op {
            Elementwise::Add | Elementwise::Mul => {
                let b = b.unwrap();
                let broadcast = self.broadcast_kind(a, b)?;
                match (op, broadcast) {
                    (Elementwise::Add, false) => Op::Add(a, b),
                    (Elementwise::Add, true) => Op::AddRows(a, b),
                    (_, false) => Op::Mul(a, b),
                    (_, true) => Op::MulRows(a, b),
                }
            }
            Elementwise::Tanh => Op::Tanh(a),
            Elementwise::Sigmoid => Op::Sigmoid(a),
            Elementwise::Relu => Op::Relu(a),
            Elementwise::Scale(s) => Op::Scale(a, s),
        };
        self.push(op)
    }

    fn broadcast_kind(&self, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok(false);
        }
        let last = *sa.last().unwrap();
        let b_is_vector = sb.len() == 1 || (sb.len() == 2 && sb[0] == 1);
        if sa.len() == 2 && b_is_vector && self.value(b).len() == last {
            Ok(true)
        } else {
            Err(dim_err!("incompatible shapes {sa:?} and {sb:?}"))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, Some(b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.elementwise(Elementwise::Scale(factor), x, None)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Tanh, x, None)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sigmoid, x, None)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Relu, x, None)
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::Softmax { x, axis })
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Rows of a `[n × c]` table selected by index, giving `[ids.len() × c]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::GatherRows {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        self.gather_rows(x, &[row])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    /// Convolution over the columns (time axis) of a `[channels × len]` input
    /// followed by max-over-time pooling. Returns `[1 × total_filters]`.
    pub fn conv1d_maxpool(&mut self, input: Var, banks: &[ConvBank], activation: ConvActivation) -> Result<Var> {
        self.push(Op::ConvMaxPool {
            input,
            banks: banks.to_vec(),
            activation,
        })
    }

    /// Inverted dropout. Identity when `training` is false or `ratio` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, ratio: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("dropout ratio {ratio} outside [0, 1)")));
        }
        if !training || ratio == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - ratio);
        let mask = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < ratio { 0.0 } else { keep_scale })
            .collect();
        self.push(Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    /// Summed negative log-likelihood `-Σ log p[i, gold[i]]` over the rows of
    /// a `[n × classes]` probability matrix. Probabilities below `1e-12` are
    /// clamped and counted (see [`Tape::clamp_count`]).
    pub fn nll(&mut self, probs: Var, gold: &[usize]) -> Result<Var> {
        let v = self.push(Op::Nll {
            probs,
            gold: gold.to_vec(),
            eps: 1e-12,
        })?;
        if let Saved::Clamped(n) = self.saved[v.0] {
            if n > 0 {
                log::warn!("nll: clamped {n} zero gold-class probabilities");
            }
        }
        Ok(v)
    }

    /// Recomputes every non-leaf node from the recorded leaves and reports
    /// whether all values are bit-identical to the recorded ones.
    pub fn replay(&self) -> Result<bool> {
        let mut values: Vec<Arc<Tensor>> = Vec::with_capacity(self.values.len());
        for (i, op) in self.ops.iter().enumerate() {
            match op {
                Op::Leaf | Op::Param => values.push(Arc::clone(&self.values[i])),
                _ => {
                    let (v, _) = eval_op(op, &values)?;
                    values.push(Arc::new(v));
                }
            }
        }
        Ok(values.iter().zip(&self.values).all(|(a, b)| {
            a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        }))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.requires[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.requires[v.0] {
            return None;
        }
        let n = self.values[v.0].len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.values[idx];
        let val = |v: Var| self.values[v.0].as_ref();
        match &self.ops[idx] {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let (_, n) = val(*b).dims2().unwrap();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let bk = &bd[kk * n..(kk + 1) * n];
                            da[i * k + kk] += gi.iter().zip(bk).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = ad[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[kk * n..(kk + 1) * n].iter_mut().zip(gi) {
                                *d += aik * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = val(*x).dims2().unwrap();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.acc(grads, *v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data().to_vec(), val(*b).data().to_vec());
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(&bd) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(&ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddRows(a, b) => {
                let c = val(*b).len();
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::MulRows(a, b) => {
                let c = val(*b).len();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * bd[i % c];
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (i, (gv, av)) in g.iter().zip(ad).enumerate() {
                        db[i % c] += gv * av;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += s * gv;
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| o * n * inner + i * inner + j;
                            let dot: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..n {
                                dx[at(i)] += y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = val(*x).dims2().unwrap();
                let xd = val(*x).data();
                let gam = val(*gamma).data();
                let mut xhat = vec![0.0; r * c];
                let mut rstd = vec![0.0; r];
                for i in 0..r {
                    let row = &xd[i * c..(i + 1) * c];
                    let (mean, inv) = row_stats(row, *eps);
                    rstd[i] = inv;
                    for j in 0..c {
                        xhat[i * c + j] = (row[j] - mean) * inv;
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
                if let Some(dg) = self.acc(grads, *gamma) {
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let cf = c as f64;
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let xr = &xhat[i * c..(i + 1) * c];
                        let dxhat: Vec<f64> = (0..c).map(|j| gr[j] * gam[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] += rstd[i] / cf * (cf * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let (_, c) = val(*table).dims2().unwrap();
                if let Some(dt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = val(*x).dims2().unwrap();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..r {
                        add_into(&mut dx[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out.dims2().unwrap();
                let mut offset = 0;
                for p in parts {
                    let (_, c) = val(*p).dims2().unwrap();
                    if let Some(dp) = self.acc(grads, *p) {
                        for i in 0..r {
                            add_into(
                                &mut dp[i * c..(i + 1) * c],
                                &g[i * total + offset..i * total + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    if let Some(dp) = self.acc(grads, *p) {
                        add_into(dp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ConvMaxPool { input, banks, .. } => {
                let Saved::Pool { argmax, zmax } = &self.saved[idx] else {
                    unreachable!("conv node without saved pool state")
                };
                let (d, m) = val(*input).dims2().unwrap();
                let xd = val(*input).data();
                let mut f0 = 0;
                for bank in banks {
                    let w = bank.width;
                    let (filters, _) = val(bank.weight).dims2().unwrap();
                    let wd = val(bank.weight).data().to_vec();
                    // Gradient reaching each filter; zero where the activation is flat.
                    let gz: Vec<f64> = (0..filters)
                        .map(|f| {
                            let live = match self.activation_of(idx) {
                                ConvActivation::Relu => zmax[f0 + f] > 0.0,
                                ConvActivation::Identity => true,
                            };
                            if live {
                                g[f0 + f]
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    if let Some(db) = self.acc(grads, bank.bias) {
                        add_into(db, &gz);
                    }
                    if let Some(dw) = self.acc(grads, bank.weight) {
                        for f in 0..filters {
                            let t = argmax[f0 + f];
                            for k in 0..d {
                                for j in 0..w {
                                    dw[f * d * w + k * w + j] += gz[f] * xd[k * m + t + j];
                                }
                            }
                        }
                    }
                    if let Some(dx) = self.acc(grads, *input) {
                        for f in 0..filters {
                            let t = argmax[f0 + f];
                            for k in 0..d {
                                for j in 0..w {
                                    dx[k * m + t + j] += gz[f] * wd[f * d * w + k * w + j];
                                }
                            }
                        }
                    }
                    f0 += filters;
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, gv), mv) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * mv;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Nll { probs, gold, eps } => {
                let (_, c) = val(*probs).dims2().unwrap();
                let pd = val(*probs).data();
                if let Some(dp) = self.acc(grads, *probs) {
                    for (i, &y) in gold.iter().enumerate() {
                        let p = pd[i * c + y];
                        if p > *eps {
                            dp[i * c + y] -= g[0] / p;
                        }
                    }
                }
            }
        }
    }

    fn activation_of(&self, idx: usize) -> ConvActivation {
        match &self.ops[idx] {
            Op::ConvMaxPool { activation, .. } => *activation,
            _ => unreachable!(),
        }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if it participated.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter, summed over every leaf that referenced it.
    pub fn param(&self, id: ParamId) -> Option<Vec<f64>> {
        let mut total: Option<Vec<f64>> = None;
        for (pid, v) in &self.params {
            if *pid != id {
                continue;
            }
            if let Some(g) = self.wrt(*v) {
                match &mut total {
                    Some(t) => add_into(t, g),
                    None => total = Some(g.to_vec()),
                }
            }
        }
        total
    }

    /// Adds parameter gradients into `buffers`, indexed by [`ParamId`].
    pub fn add_to(&self, buffers: &mut [Vec<f64>]) {
        for (pid, v) in &self.params {
            if let Some(g) = self.wrt(*v) {
                add_into(&mut buffers[pid.0], g);
            }
        }
    }

    /// Accumulates parameter gradients into the tensors' own `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (pid, v) in &self.params {
            if let Some(g) = self.wrt(*v) {
                store.get_mut(*pid).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_slices(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += aik * bv;
            }
        }
    }
    out
}

fn map_unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

fn eval_op(op: &Op, values: &[Arc<Tensor>]) -> Result<(Tensor, Saved)> {
    let val = |v: Var| values[v.0].as_ref();
    let plain = |t: Tensor| Ok((t, Saved::None));
    match op {
        Op::Leaf | Op::Param => Err(Error::Contract("leaves are not evaluated".into())),
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let (k2, n) = val(*b).dims2()?;
            if k != k2 {
                return Err(dim_err!(
                    "matmul of {:?} by {:?}: inner dimensions differ",
                    val(*a).shape(),
                    val(*b).shape()
                ));
            }
            plain(Tensor::matrix(
                m,
                n,
                matmul_slices(val(*a).data(), m, k, val(*b).data(), n),
            )?)
        }
        Op::Transpose(x) => plain(val(*x).transpose()?),
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if ta.shape() != tb.shape() {
                return Err(dim_err!("incompatible shapes {:?} and {:?}", ta.shape(), tb.shape()));
            }
            let f: fn(f64, f64) -> f64 = if matches!(op, Op::Add(..)) {
                |x, y| x + y
            } else {
                |x, y| x * y
            };
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            plain(Tensor::new(ta.shape().to_vec(), data)?)
        }
        Op::AddRows(a, b) | Op::MulRows(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let c = tb.len();
            let add = matches!(op, Op::AddRows(..));
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    if add {
                        x + tb.data()[i % c]
                    } else {
                        x * tb.data()[i % c]
                    }
                })
                .collect();
            plain(Tensor::new(ta.shape().to_vec(), data)?)
        }
        Op::Scale(x, s) => plain(map_unary(val(*x), |v| v * s)),
        Op::Tanh(x) => plain(map_unary(val(*x), f64::tanh)),
        Op::Sigmoid(x) => plain(map_unary(val(*x), |v| 1.0 / (1.0 + (-v).exp()))),
        Op::Relu(x) => plain(map_unary(val(*x), |v| v.max(0.0))),
        Op::Softmax { x, axis } => {
            let t = val(*x);
            if *axis >= t.rank() {
                return Err(dim_err!("softmax axis {axis} for shape {:?}", t.shape()));
            }
            t.check_finite("softmax")?;
            let (outer, n, inner) = axis_split(t.shape(), *axis);
            let xd = t.data();
            let mut out = vec![0.0; xd.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| o * n * inner + i * inner + j;
                    let max = (0..n).map(|i| xd[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for i in 0..n {
                        let e = (xd[at(i)] - max).exp();
                        out[at(i)] = e;
                        z += e;
                    }
                    for i in 0..n {
                        out[at(i)] /= z;
                    }
                }
            }
            plain(Tensor::new(t.shape().to_vec(), out)?)
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (r, c) = val(*x).dims2()?;
            if val(*gamma).len() != c || val(*beta).len() != c {
                return Err(dim_err!(
                    "layer norm over {c} features with gain {:?} and shift {:?}",
                    val(*gamma).shape(),
                    val(*beta).shape()
                ));
            }
            let (xd, gd, bd) = (val(*x).data(), val(*gamma).data(), val(*beta).data());
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &xd[i * c..(i + 1) * c];
                let (mean, inv) = row_stats(row, *eps);
                for j in 0..c {
                    out[i * c + j] = gd[j] * (row[j] - mean) * inv + bd[j];
                }
            }
            plain(Tensor::new(val(*x).shape().to_vec(), out)?)
        }
        Op::GatherRows { table, ids } => {
            let (n, c) = val(*table).dims2()?;
            if ids.is_empty() {
                return Err(dim_err!("gather with no indices"));
            }
            let mut out = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                if id >= n {
                    return Err(Error::Data(format!("row index {id} out of bounds for {n} rows")));
                }
                out.extend_from_slice(val(*table).row(id));
            }
            plain(Tensor::matrix(ids.len(), c, out)?)
        }
        Op::SliceCols { x, start, len } => {
            let (r, c) = val(*x).dims2()?;
            if *len == 0 || start + len > c {
                return Err(dim_err!("column slice {start}..{} of {c} columns", start + len));
            }
            let xd = val(*x).data();
            let out = (0..r)
                .flat_map(|i| xd[i * c + start..i * c + start + len].iter().copied())
                .collect();
            plain(Tensor::matrix(r, *len, out)?)
        }
        Op::ConcatCols(parts) => {
            let dims: Vec<(usize, usize)> = parts.iter().map(|p| val(*p).dims2()).collect::<Result<_>>()?;
            let r = dims.first().ok_or_else(|| dim_err!("concat of nothing"))?.0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(dim_err!("column concat with differing row counts {dims:?}"));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r * total);
            for i in 0..r {
                for p in parts {
                    out.extend_from_slice(val(*p).row(i));
                }
            }
            plain(Tensor::matrix(r, total, out)?)
        }
        Op::ConcatRows(parts) => {
            let dims: Vec<(usize, usize)> = parts.iter().map(|p| val(*p).dims2()).collect::<Result<_>>()?;
            let c = dims.first().ok_or_else(|| dim_err!("concat of nothing"))?.1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(dim_err!("row concat with differing column counts {dims:?}"));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let out = parts.iter().flat_map(|p| val(*p).data().iter().copied()).collect();
            plain(Tensor::matrix(rows, c, out)?)
        }
        Op::ConvMaxPool {
            input,
            banks,
            activation,
        } => {
            let (d, m) = val(*input).dims2()?;
            let xd = val(*input).data();
            let mut pooled = Vec::new();
            let mut argmax = Vec::new();
            let mut zmax = Vec::new();
            for bank in banks {
                let w = bank.width;
                if w == 0 || m < w {
                    return Err(Error::Contract(format!(
                        "sequence of length {m} shorter than filter width {w}"
                    )));
                }
                let (filters, fan) = val(bank.weight).dims2()?;
                if fan != d * w || val(bank.bias).len() != filters {
                    return Err(dim_err!(
                        "filter bank {:?} / bias {:?} for {d} channels at width {w}",
                        val(bank.weight).shape(),
                        val(bank.bias).shape()
                    ));
                }
                let wd = val(bank.weight).data();
                let bd = val(bank.bias).data();
                for f in 0..filters {
                    let wf = &wd[f * d * w..(f + 1) * d * w];
                    let mut best = (0usize, f64::NEG_INFINITY);
                    for t in 0..=m - w {
                        let mut z = bd[f];
                        for k in 0..d {
                            let xr = &xd[k * m + t..k * m + t + w];
                            let wr = &wf[k * w..(k + 1) * w];
                            z += xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if z > best.1 {
                            best = (t, z);
                        }
                    }
                    argmax.push(best.0);
                    zmax.push(best.1);
                    // Monotone activations commute with max.
                    pooled.push(match activation {
                        ConvActivation::Relu => best.1.max(0.0),
                        ConvActivation::Identity => best.1,
                    });
                }
            }
            if pooled.is_empty() {
                return Err(Error::Contract("convolution with no filters".into()));
            }
            let n = pooled.len();
            Ok((Tensor::matrix(1, n, pooled)?, Saved::Pool { argmax, zmax }))
        }
        Op::Dropout { x, mask } => {
            let t = val(*x);
            let data = t.data().iter().zip(mask).map(|(a, b)| a * b).collect();
            plain(Tensor::new(t.shape().to_vec(), data)?)
        }
        Op::Sum(x) => plain(Tensor::scalar(val(*x).data().iter().sum())),
        Op::Nll { probs, gold, eps } => {
            let (n, c) = val(*probs).dims2()?;
            if gold.len() != n {
                return Err(dim_err!("{} labels for {n} predictions", gold.len()));
            }
            let pd = val(*probs).data();
            let mut clamped = 0;
            let mut loss = 0.0;
            for (i, &y) in gold.iter().enumerate() {
                if y >= c {
                    return Err(Error::Data(format!("label {y} outside {c} classes")));
                }
                let p = pd[i * c + y];
                if p <= *eps {
                    clamped += 1;
                }
                loss -= p.max(*eps).ln();
            }
            Ok((Tensor::scalar(loss), Saved::Clamped(clamped)))
        }
    }
}
