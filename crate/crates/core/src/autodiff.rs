//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records one forward pass as a list of matrix-valued nodes.
//! [`Tape::backward`] walks the list in reverse and returns the gradient of a
//! scalar (1×1) node with respect to every node that depends on a variable
//! leaf. Constant leaves and everything computed only from constants are
//! skipped.

use std::rc::Rc;

use crate::attention::{softmax_in_place, DEGENERATE_ROW_THRESHOLD};
use crate::error::{Error, Result};
use crate::matrix::{gemm, DenseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Affine(Var, f64),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddRow(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MaskedSoftmax {
        scores: Var,
        mask: Option<Var>,
        factor: f64,
        row_max: Vec<f64>,
        row_total: Vec<f64>,
    },
    RowNormalize(Var),
    Kron(Var, Var),
    GatherRows(Var, Rc<Vec<usize>>),
    MixMaps(Var, Rc<Vec<Vec<usize>>>),
    Embed {
        table: Var,
        cells: Rc<Vec<usize>>,
        noise: f64,
    },
    MeanRows(Var),
    Element(Var, usize, usize),
    ScalarMul(Var, Var),
    NegSqDist(Var, Var),
    CrossEntropy {
        logits: Var,
        probs: DenseMatrix,
        targets: Rc<Vec<usize>>,
    },
    Clamp01(Var),
}

struct Node {
    value: DenseMatrix,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(what()))
    }
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

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: DenseMatrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A leaf whose gradient is wanted.
    pub fn variable(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Sub(a, b), t))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Hadamard(a, b), t))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let t = self.tracked(a);
        self.push(value, Op::Scale(a, factor), t)
    }

    /// `factor * a + offset`, elementwise.
    pub fn affine(&mut self, a: Var, factor: f64, offset: f64) -> Var {
        let value = self.value(a).map(|v| factor * v + offset);
        let t = self.tracked(a);
        self.push(value, Op::Affine(a, factor), t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), t))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_bt(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMulBt(a, b), t))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        check(self.shape(bias) == (1, cols), || {
            format!("bias {:?} for rows of width {cols}", self.shape(bias))
        })?;
        let mut value = self.value(a).clone();
        let b = self.value(bias).row(0).to_vec();
        for i in 0..rows {
            for (v, bb) in value.row_mut(i).iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let t = self.tracked(a) || self.tracked(bias);
        Ok(self.push(value, Op::AddRow(a, bias), t))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(a);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let t = self.tracked(a);
        self.push(value, Op::Tanh(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let t = self.tracked(a);
        self.push(value, Op::Sigmoid(a), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        let t = self.tracked(a);
        self.push(value, Op::SoftmaxRows(a), t)
    }

    /// `softmax(factor · scores) ⊙ mask` with every row renormalized, in one
    /// node. Without a mask this is the plain softmax. A row whose masked mass
    /// falls below the degenerate-row threshold is an error.
    pub fn masked_softmax(&mut self, scores: Var, mask: Option<Var>, factor: f64) -> Result<Var> {
        let (rows, cols) = self.shape(scores);
        if let Some(m) = mask {
            check(self.shape(m) == (rows, cols), || {
                format!("mask {:?} for scores {:?}", self.shape(m), (rows, cols))
            })?;
        }
        let mut value = self.value(scores).scale(factor);
        let mut row_max = Vec::with_capacity(rows);
        let mut row_total = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = value.row_mut(i);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("attention scores in row {i}")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut all = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                all += *v;
            }
            let total = match mask {
                Some(m) => {
                    let mut kept = 0.0;
                    for (v, w) in row.iter_mut().zip(self.nodes[m.0].value.row(i)) {
                        *v *= w;
                        kept += *v;
                    }
                    kept
                }
                None => all,
            };
            let share = total / all;
            if !(share >= DEGENERATE_ROW_THRESHOLD) {
                return Err(Error::DegenerateRow { row: i, sum: share });
            }
            for v in row.iter_mut() {
                *v /= total;
            }
            row_max.push(max);
            row_total.push(total);
        }
        let t = self.tracked(scores) || mask.is_some_and(|m| self.tracked(m));
        Ok(self.push(
            value,
            Op::MaskedSoftmax {
                scores,
                mask,
                factor,
                row_max,
                row_total,
            },
            t,
        ))
    }

    /// Divides every row by its sum; rows summing below the degenerate-row
    /// threshold are an error.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let total: f64 = row.iter().sum();
            if !(total >= DEGENERATE_ROW_THRESHOLD) {
                return Err(Error::DegenerateRow { row: i, sum: total });
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let t = self.tracked(a);
        Ok(self.push(value, Op::RowNormalize(a), t))
    }

    pub fn kron(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).kron(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Kron(a, b), t)
    }

    /// `out[k, :] = a[index[k], :]`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Result<Var> {
        let rows = self.shape(a).0;
        check(index.iter().all(|&i| i < rows), || {
            format!("gather index out of range for {rows} rows")
        })?;
        let value = self.value(a).gather_rows(&index);
        let t = self.tracked(a);
        Ok(self.push(value, Op::GatherRows(a, index), t))
    }

    /// `Σ_j w_j P_j` for a `J × 1` weight node, where `P_j` is the 0/1 matrix
    /// whose row `k` has its single one in column `maps[j][k]`.
    pub fn mix_maps(&mut self, weights: Var, maps: Rc<Vec<Vec<usize>>>, cols: usize) -> Result<Var> {
        let rows = maps.first().map_or(0, Vec::len);
        check(self.shape(weights) == (maps.len(), 1), || {
            format!("{} maps for weights {:?}", maps.len(), self.shape(weights))
        })?;
        check(
            maps.iter().all(|m| m.len() == rows && m.iter().all(|&c| c < cols)),
            || format!("maps must all have {rows} entries below {cols}"),
        )?;
        let w = self.value(weights).as_slice();
        let mut value = DenseMatrix::zeros(rows, cols);
        let out = value.as_mut_slice();
        for (map, &wj) in maps.iter().zip(w) {
            if wj == 0.0 {
                continue;
            }
            for (k, &c) in map.iter().enumerate() {
                out[k * cols + c] += wj;
            }
        }
        let t = self.tracked(weights);
        Ok(self.push(value, Op::MixMaps(weights, maps), t))
    }

    /// Noisy embedding lookup: `x_k = (1 - noise) · table[cells[k]] + noise · Σ_c table[c]`.
    pub fn embed(&mut self, table: Var, cells: Rc<Vec<usize>>, noise: f64) -> Result<Var> {
        let (colors, d) = self.shape(table);
        check(cells.iter().all(|&c| c < colors), || {
            format!("cell colour out of range for {colors} colours")
        })?;
        let tab = self.value(table);
        let mut total = vec![0.0; d];
        for c in 0..colors {
            for (s, v) in total.iter_mut().zip(tab.row(c)) {
                *s += v;
            }
        }
        let mut value = DenseMatrix::zeros(cells.len(), d);
        for (k, &c) in cells.iter().enumerate() {
            for ((o, &e), &s) in value.row_mut(k).iter_mut().zip(tab.row(c)).zip(&total) {
                *o = (1.0 - noise) * e + noise * s;
            }
        }
        let t = self.tracked(table);
        Ok(self.push(value, Op::Embed { table, cells, noise }, t))
    }

    /// Mean over rows, a `1 × c` result.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let src = self.value(a);
        let mut value = DenseMatrix::zeros(1, cols);
        for i in 0..rows {
            for (o, v) in value.row_mut(0).iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        let value = value.scale(1.0 / rows as f64);
        let t = self.tracked(a);
        self.push(value, Op::MeanRows(a), t)
    }

    /// The `1 × 1` entry `a[i, j]`.
    pub fn element(&mut self, a: Var, i: usize, j: usize) -> Var {
        let value = DenseMatrix::filled(1, 1, self.value(a).get(i, j));
        let t = self.tracked(a);
        self.push(value, Op::Element(a, i, j), t)
    }

    /// `s · m` for a `1 × 1` node `s`.
    pub fn scalar_mul(&mut self, s: Var, m: Var) -> Result<Var> {
        check(self.shape(s) == (1, 1), || "scalar_mul expects a 1x1 factor".into())?;
        let value = self.value(m).scale(self.scalar(s));
        let t = self.tracked(s) || self.tracked(m);
        Ok(self.push(value, Op::ScalarMul(s, m), t))
    }

    /// `out[k, c] = -‖x_k - table_c‖²`.
    pub fn neg_sq_dist(&mut self, x: Var, table: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        let (colors, d2) = self.shape(table);
        check(d == d2, || format!("feature widths {d} and {d2}"))?;
        let xv = self.value(x);
        let tv = self.value(table);
        let mut value = DenseMatrix::zeros(n, colors);
        for k in 0..n {
            for c in 0..colors {
                let dist: f64 = xv
                    .row(k)
                    .iter()
                    .zip(tv.row(c))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                value.set(k, c, -dist);
            }
        }
        let t = self.tracked(x) || self.tracked(table);
        Ok(self.push(value, Op::NegSqDist(x, table), t))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Result<Var> {
        let (n, classes) = self.shape(logits);
        check(targets.len() == n, || {
            format!("{} targets for {n} rows of logits", targets.len())
        })?;
        check(targets.iter().all(|&c| c < classes), || {
            format!("target out of range for {classes} classes")
        })?;
        let z = self.value(logits);
        let mut probs = z.clone();
        let mut loss = 0.0;
        for (k, &y) in targets.iter().enumerate() {
            let row = z.row(k);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_in_place(probs.row_mut(k));
        }
        let value = DenseMatrix::filled(1, 1, loss / n as f64);
        let t = self.tracked(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            },
            t,
        ))
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.clamp(0.0, 1.0));
        let t = self.tracked(a);
        self.push(value, Op::Clamp01(a), t)
    }

    /// Gradients of the `1 × 1` node `output` with respect to every variable
    /// leaf. Intermediate gradients are released as soon as they are used.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        check(self.shape(output) == (1, 1), || {
            "backward needs a scalar output".into()
        })?;
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(DenseMatrix::filled(1, 1, 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<DenseMatrix>], v: Var, g: DenseMatrix) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_scaled_in_place(&g, 1.0),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                if self.tracked(*a) {
                    let ga = g.hadamard(self.value(*b)).expect("shapes checked in forward");
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let gb = g.hadamard(self.value(*a)).expect("shapes checked in forward");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, f) | Op::Affine(a, f) => self.accumulate(grads, *a, g.scale(*f)),
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    let mut ga = DenseMatrix::zeros(self.shape(*a).0, self.shape(*a).1);
                    gemm(g, false, self.value(*b), true, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let mut gb = DenseMatrix::zeros(self.shape(*b).0, self.shape(*b).1);
                    gemm(self.value(*a), true, g, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.tracked(*a) {
                    let mut ga = DenseMatrix::zeros(self.shape(*a).0, self.shape(*a).1);
                    gemm(g, false, self.value(*b), false, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let mut gb = DenseMatrix::zeros(self.shape(*b).0, self.shape(*b).1);
                    gemm(g, true, self.value(*a), false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*bias) {
                    let mut gb = DenseMatrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Tanh(a) => {
                let ga = g.hadamard(&y.map(|t| 1.0 - t * t)).expect("same shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.hadamard(&y.map(|s| s * (1.0 - s))).expect("same shape");
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let yr = y.row(i);
                    let dot: f64 = g.row(i).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (o, &s) in ga.row_mut(i).iter_mut().zip(yr) {
                        *o = s * (*o - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MaskedSoftmax {
                scores,
                mask,
                factor,
                row_max,
                row_total,
            } => {
                let dots: Vec<f64> = (0..y.rows())
                    .map(|i| g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum())
                    .collect();
                if self.tracked(*scores) {
                    let mut gs = g.clone();
                    for (i, &dot) in dots.iter().enumerate() {
                        for (o, &a) in gs.row_mut(i).iter_mut().zip(y.row(i)) {
                            *o = factor * a * (*o - dot);
                        }
                    }
                    self.accumulate(grads, *scores, gs);
                }
                if let Some(m) = mask.filter(|m| self.tracked(*m)) {
                    let s = self.value(*scores);
                    let mut gm = g.clone();
                    for (i, &dot) in dots.iter().enumerate() {
                        let (max, total) = (row_max[i], row_total[i]);
                        for (o, &z) in gm.row_mut(i).iter_mut().zip(s.row(i)) {
                            *o = (factor * z - max).exp() / total * (*o - dot);
                        }
                    }
                    self.accumulate(grads, m, gm);
                }
            }
            Op::RowNormalize(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let total: f64 = x.row(i).iter().sum();
                    let yr = y.row(i);
                    let dot: f64 = g.row(i).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for o in ga.row_mut(i).iter_mut() {
                        *o = (*o - dot) / total;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Kron(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (r1, c1) = av.shape();
                let (r2, c2) = bv.shape();
                let cols = c1 * c2;
                let gs = g.as_slice();
                if self.tracked(*a) {
                    let mut ga = DenseMatrix::zeros(r1, c1);
                    for i in 0..r1 {
                        for j in 0..c1 {
                            let mut acc = 0.0;
                            for k in 0..r2 {
                                let base = (i * r2 + k) * cols + j * c2;
                                acc += gs[base..base + c2]
                                    .iter()
                                    .zip(bv.row(k))
                                    .map(|(x, y)| x * y)
                                    .sum::<f64>();
                            }
                            ga.set(i, j, acc);
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let mut gb = DenseMatrix::zeros(r2, c2);
                    for i in 0..r1 {
                        for j in 0..c1 {
                            let w = av.get(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            for k in 0..r2 {
                                let base = (i * r2 + k) * cols + j * c2;
                                for (o, x) in gb.row_mut(k).iter_mut().zip(&gs[base..base + c2]) {
                                    *o += w * x;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::GatherRows(a, index) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = DenseMatrix::zeros(rows, cols);
                for (k, &src) in index.iter().enumerate() {
                    for (o, v) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MixMaps(weights, maps) => {
                let cols = g.cols();
                let gs = g.as_slice();
                let gw: Vec<f64> = maps
                    .iter()
                    .map(|map| map.iter().enumerate().map(|(k, &c)| gs[k * cols + c]).sum())
                    .collect();
                let gw = DenseMatrix::from_vec(maps.len(), 1, gw).expect("one weight per map");
                self.accumulate(grads, *weights, gw);
            }
            Op::Embed { table, cells, noise } => {
                let (colors, d) = self.shape(*table);
                let mut gt = DenseMatrix::zeros(colors, d);
                let mut total = vec![0.0; d];
                for (k, &c) in cells.iter().enumerate() {
                    for ((o, s), v) in gt.row_mut(c).iter_mut().zip(total.iter_mut()).zip(g.row(k)) {
                        *o += (1.0 - noise) * v;
                        *s += v;
                    }
                }
                if *noise != 0.0 {
                    for c in 0..colors {
                        for (o, s) in gt.row_mut(c).iter_mut().zip(&total) {
                            *o += noise * s;
                        }
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.shape(*a);
                let scale = 1.0 / rows as f64;
                let ga = DenseMatrix::from_fn(rows, cols, |_, j| g.get(0, j) * scale);
                self.accumulate(grads, *a, ga);
            }
            Op::Element(a, i, j) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = DenseMatrix::zeros(rows, cols);
                ga.set(*i, *j, g.get(0, 0));
                self.accumulate(grads, *a, ga);
            }
            Op::ScalarMul(s, m) => {
                if self.tracked(*s) {
                    let dot: f64 = g
                        .as_slice()
                        .iter()
                        .zip(self.value(*m).as_slice())
                        .map(|(a, b)| a * b)
                        .sum();
                    self.accumulate(grads, *s, DenseMatrix::filled(1, 1, dot));
                }
                if self.tracked(*m) {
                    self.accumulate(grads, *m, g.scale(self.scalar(*s)));
                }
            }
            Op::NegSqDist(x, table) => {
                let (xv, tv) = (self.value(*x), self.value(*table));
                let row_tot: Vec<f64> = (0..g.rows()).map(|k| g.row(k).iter().sum()).collect();
                if self.tracked(*x) {
                    // dx_k = -2 (Σ_c g_kc) x_k + 2 Σ_c g_kc t_c
                    let mut gx = g.matmul(tv).expect("shapes checked in forward").scale(2.0);
                    for (k, &s) in row_tot.iter().enumerate() {
                        for (o, v) in gx.row_mut(k).iter_mut().zip(xv.row(k)) {
                            *o -= 2.0 * s * v;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.tracked(*table) {
                    // dt_c = 2 Σ_k g_kc x_k - 2 (Σ_k g_kc) t_c
                    let mut gt = g.matmul_at(xv).expect("shapes checked in forward").scale(2.0);
                    for c in 0..gt.rows() {
                        let col_tot: f64 = (0..g.rows()).map(|k| g.get(k, c)).sum();
                        for (o, v) in gt.row_mut(c).iter_mut().zip(tv.row(c)) {
                            *o -= 2.0 * col_tot * v;
                        }
                    }
                    self.accumulate(grads, *table, gt);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let scale = g.get(0, 0) / targets.len() as f64;
                let mut gz = probs.clone();
                for (k, &t) in targets.iter().enumerate() {
                    let row = gz.row_mut(k);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, gz);
            }
            Op::Clamp01(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (o, &v) in ga.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    if !(0.0..=1.0).contains(&v) {
                        *o = 0.0;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
        }
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

pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like it when nothing flowed back.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> DenseMatrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            DenseMatrix::zeros(r, c)
        })
    }

    pub fn take(&mut self, v: Var) -> Option<DenseMatrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of every entry of every variable leaf.
    fn gradcheck(
        leaves: Vec<DenseMatrix>,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|m| tape.variable(m.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(out).unwrap();
        let eval = |values: &[DenseMatrix]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = values.iter().map(|m| t.variable(m.clone())).collect();
            let o = build(&mut t, &vs).unwrap();
            t.scalar(o)
        };
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get_or_zeros(&tape, vars[li]);
            for e in 0..leaf.as_slice().len() {
                let mut plus = leaves.clone();
                plus[li].as_mut_slice()[e] += h;
                let mut minus = leaves.clone();
                minus[li].as_mut_slice()[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice()[e];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "leaf {li} entry {e}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn sum_weighted(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
        // contract with a fixed random matrix so every entry matters
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = tape.value(v).shape();
        let w = tape.constant(random(r, c, &mut rng));
        let prod = tape.hadamard(v, w)?;
        let ones_r = tape.constant(DenseMatrix::filled(1, r, 1.0));
        let ones_c = tape.constant(DenseMatrix::filled(c, 1, 1.0));
        let s = tape.matmul(ones_r, prod)?;
        tape.matmul(s, ones_c)
    }

    #[test]
    fn elementwise_and_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![random(3, 4, &mut rng), random(3, 4, &mut rng), random(4, 2, &mut rng)];
        gradcheck(leaves, |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.hadamard(a, v[1])?;
            let c = t.sub(b, v[0])?;
            let d = t.matmul(c, v[2])?;
            let e = t.tanh(d);
            let f = t.affine(e, 0.5, 0.25);
            let g = t.matmul_bt(f, f)?;
            let h = t.sigmoid(g);
            let s = t.scale(h, 3.0);
            sum_weighted(t, s, 2)
        });
    }

    #[test]
    fn softmax_normalize_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = DenseMatrix::from_fn(4, 4, |i, j| if (i + j) % 3 == 0 { 0.0 } else { 0.7 });
        let leaves = vec![random(4, 4, &mut rng), random(1, 4, &mut rng)];
        gradcheck(leaves, move |t, v| {
            let x = t.add_row(v[0], v[1])?;
            let s = t.softmax_rows(x);
            let m = t.constant(mask.clone());
            let a = t.hadamard(s, m)?;
            let n = t.row_normalize(a)?;
            let tr = t.transpose(n);
            sum_weighted(t, tr, 4)
        });
    }

    #[test]
    fn fused_masked_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![random(4, 5, &mut rng), random(4, 5, &mut rng).map(|v| v.abs() + 0.1)];
        gradcheck(leaves.clone(), |t, v| {
            let a = t.masked_softmax(v[0], Some(v[1]), 0.7)?;
            sum_weighted(t, a, 11)
        });
        gradcheck(leaves.clone(), |t, v| {
            let a = t.masked_softmax(v[0], None, 1.3)?;
            sum_weighted(t, a, 12)
        });
        let mut t = Tape::new();
        let s = t.constant(leaves[0].clone());
        let m = t.constant(leaves[1].clone());
        let fused = t.masked_softmax(s, Some(m), 0.7).unwrap();
        let scaled = t.scale(s, 0.7);
        let soft = t.softmax_rows(scaled);
        let masked = t.hadamard(soft, m).unwrap();
        let composed = t.row_normalize(masked).unwrap();
        assert!(t.value(fused).max_abs_diff(t.value(composed)) < 1e-14);
        let zero = t.constant(DenseMatrix::zeros(4, 5));
        assert!(matches!(
            t.masked_softmax(s, Some(zero), 1.0),
            Err(Error::DegenerateRow { row: 0, .. })
        ));
    }

    #[test]
    fn kron_gather_and_scalars() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![random(2, 3, &mut rng), random(3, 2, &mut rng), random(1, 3, &mut rng)];
        gradcheck(leaves, |t, v| {
            let k = t.kron(v[0], v[1]);
            let k = t.gather_rows(k, Rc::new(vec![5, 0, 0, 3, 2, 1]))?;
            let w = t.transpose(v[2]);
            let mix = t.mix_maps(w, Rc::new(vec![vec![0, 1, 2, 3, 4, 5], vec![2, 2, 0, 1, 5, 4], vec![1, 0, 3, 2, 4, 4]]), 6)?;
            let k = t.add(k, mix)?;
            let s = t.element(v[2], 0, 1);
            let one_minus = t.affine(s, -1.0, 1.0);
            let a = t.scalar_mul(s, k)?;
            let b = t.scalar_mul(one_minus, k)?;
            let c = t.hadamard(a, b)?;
            let mean = t.mean_rows(c);
            let clamp = t.clamp01(k);
            let total = sum_weighted(t, clamp, 6)?;
            let m2 = sum_weighted(t, mean, 7)?;
            t.add(total, m2)
        });
    }

    #[test]
    fn embedding_distance_and_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let leaves = vec![random(4, 3, &mut rng), random(3, 3, &mut rng)];
        let cells = Rc::new(vec![0, 2, 2, 3, 1]);
        let targets = Rc::new(vec![1, 1, 0, 3, 2]);
        gradcheck(leaves, move |t, v| {
            let x = t.embed(v[0], cells.clone(), 0.3)?;
            let x = t.matmul(x, v[1])?;
            let logits = t.neg_sq_dist(x, v[0])?;
            t.cross_entropy(logits, targets.clone())
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(DenseMatrix::filled(2, 2, 1.0));
        let b = tape.variable(DenseMatrix::filled(2, 2, 2.0));
        let c = tape.hadamard(a, b).unwrap();
        let s = tape.mean_rows(c);
        let e = tape.element(s, 0, 0);
        let grads = tape.backward(e).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().as_slice(), &[0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn degenerate_row_is_reported() {
        let mut tape = Tape::new();
        let a = tape.variable(DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap());
        assert!(matches!(
            tape.row_normalize(a),
            Err(Error::DegenerateRow { row: 1, .. })
        ));
    }
}
