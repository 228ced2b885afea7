//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Tape`] borrows the [`ParamStore`] immutably while a forward pass is
//! recorded, so parameter values are never copied. [`Tape::backward`] walks
//! the recorded nodes in reverse and returns a [`Gradients`] value which the
//! caller folds into the store once the tape is gone.
//!
//! All operations work on rank-2 tensors. A "stacked" tensor holds a batch
//! of per-sample node matrices on top of one another (`batch * nodes` rows);
//! [`Tape::node_mix`] applies a node-axis linear map to every block.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatView, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    NodeMix { mix: Var, x: Var },
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    ConcatCols(Var, Var),
    RepeatRows(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    MulRows(Var, Var),
    L2Normalize(Var),
    Reshape(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is tracked and can be read back with
    /// [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatView::of(self.value(a)),
            MatView::of(self.value(b)),
            0.0,
            &mut out,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_raw(m, n, out), Op::MatMul(a, b), ng))
    }

    /// Left-multiplies every `q`-row block of `x` by the `p×q` matrix `mix`,
    /// producing `p`-row blocks. With a single block this is `mix · x`.
    pub fn node_mix(&mut self, mix: Var, x: Var) -> Result<Var> {
        let ((p, q), (rows, c)) = (self.dims(mix), self.dims(x));
        if q == 0 || rows % q != 0 {
            return Err(Error::shape(
                "node_mix",
                format!("{p}x{q} kernel on {rows}x{c} stacked features"),
            ));
        }
        let blocks = rows / q;
        let mut out = vec![0.0; blocks * p * c];
        let (mv, xv) = (self.value(mix), self.value(x));
        for b in 0..blocks {
            gemm(
                1.0,
                MatView::of(mv),
                MatView::new(&xv.data()[b * q * c..(b + 1) * q * c], q, c),
                0.0,
                &mut out[b * p * c..(b + 1) * p * c],
            );
        }
        let ng = self.needs(mix) || self.needs(x);
        Ok(self.push(
            Tensor::from_raw(blocks * p, c, out),
            Op::NodeMix { mix, x },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let (r, c) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_raw(r, c, data), Op::Add(a, b), ng))
    }

    /// Adds the `1×c` row `bias` to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let ((r, c), (br, bc)) = (self.dims(x), self.dims(bias));
        if br != 1 || bc != c {
            return Err(Error::shape("add_row_bias", format!("{r}x{c} + {br}x{bc}")));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c.max(1)) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::from_raw(r, c, data), Op::AddRowBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let ng = self.needs(x);
        self.push(Tensor::from_raw(r, c, data), Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let ng = self.needs(x);
        self.push(Tensor::from_raw(r, c, data), Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let ng = self.needs(x);
        self.push(Tensor::from_raw(r, c, data), Op::Sigmoid(x), ng)
    }

    /// Row-wise concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((ra, ca), (rb, cb)) = (self.dims(a), self.dims(b));
        if ra != rb {
            return Err(Error::shape(
                "concat_features",
                format!("{ra}x{ca} with {rb}x{cb}"),
            ));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&av.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bv.data()[i * cb..(i + 1) * cb]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_raw(ra, ca + cb, data), Op::ConcatCols(a, b), ng))
    }

    /// Repeats every row `n` times in place: `B×c` becomes `(B·n)×c`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Var {
        let (r, c) = self.dims(x);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(r * n * c);
        for i in 0..r {
            for _ in 0..n {
                data.extend_from_slice(&xv[i * c..(i + 1) * c]);
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::from_raw(r * n, c, data), Op::RepeatRows(x, n), ng)
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_raw(end - start, c, data),
            Op::SliceRows(x, start),
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        let n = idx.len();
        Ok(self.push(Tensor::from_raw(n, c, data), Op::GatherRows(x, idx), ng))
    }

    /// Places row `i` of `x` at row `idx[i]` of a zero `total×c` matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: Vec<usize>, total: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.len() != r {
            return Err(Error::shape(
                "scatter_rows",
                format!("{} indices for {r} rows", idx.len()),
            ));
        }
        let mut seen = vec![false; total];
        for &i in &idx {
            if i >= total || std::mem::replace(&mut seen[i], true) {
                return Err(Error::shape(
                    "scatter_rows",
                    format!("index {i} invalid or repeated for {total} rows"),
                ));
            }
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; total * c];
        for (k, &i) in idx.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&xv[k * c..(k + 1) * c]);
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_raw(total, c, data), Op::ScatterRows(x, idx), ng))
    }

    /// Scales row `i` of `x` by `s[i]` (`s` is a column vector).
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let ((r, c), (sr, sc)) = (self.dims(x), self.dims(s));
        if sr != r || sc != 1 {
            return Err(Error::shape("mul_rows", format!("{r}x{c} by {sr}x{sc}")));
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (i, row) in data.chunks_exact_mut(c.max(1)).enumerate() {
            row.iter_mut().for_each(|v| *v *= sv[i]);
        }
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(Tensor::from_raw(r, c, data), Op::MulRows(x, s), ng))
    }

    /// `x / ‖x‖₂` over all entries.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let norm = self.value(x).frobenius_norm();
        if norm == 0.0 {
            return Err(Error::Domain("l2_normalize of a zero vector".into()));
        }
        let data = self.value(x).data().iter().map(|v| v / norm).collect();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_raw(r, c, data), Op::L2Normalize(x), ng))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r * c != rows * cols {
            return Err(Error::shape("reshape", format!("{r}x{c} to {rows}x{cols}")));
        }
        let t = self.value(x).clone().reshaped(rows, cols);
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Mean of squared differences, as a 1×1 node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.dims(pred) != self.dims(target) {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.dims(pred), self.dims(target)),
            ));
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = p.len().max(1) as f64;
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let ng = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::from_raw(1, 1, vec![loss]), Op::Mse(pred, target), ng))
    }

    /// Reverse pass from a finite 1×1 `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        let seed = self.scalar(loss);
        if !seed.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }

        // Parameter-node gradients move into `params`; `wrt` on a parameter
        // node therefore returns `None`.
        let mut params: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Op::Param(id) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            match params.get_mut(id) {
                Some(acc) => add_into(acc, &g),
                None => {
                    params.insert(*id, g);
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.value(Var(i));
        let (orows, ocols) = (out.rows(), out.cols());
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let gyv = MatView::new(gy, orows, ocols);
                if self.needs(*a) {
                    let ga = slot(grads, *a, av.numel());
                    gemm(1.0, gyv, MatView::of(bv).t(), 1.0, ga);
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, bv.numel());
                    gemm(1.0, MatView::of(av).t(), gyv, 1.0, gb);
                }
            }
            Op::NodeMix { mix, x } => {
                let (mv, xv) = (self.value(*mix), self.value(*x));
                let (p, q) = (mv.rows(), mv.cols());
                let c = xv.cols();
                let blocks = xv.rows() / q;
                if self.needs(*mix) {
                    let gm = slot(grads, *mix, mv.numel());
                    for b in 0..blocks {
                        gemm(
                            1.0,
                            MatView::new(&gy[b * p * c..(b + 1) * p * c], p, c),
                            MatView::new(&xv.data()[b * q * c..(b + 1) * q * c], q, c).t(),
                            1.0,
                            gm,
                        );
                    }
                }
                if self.needs(*x) {
                    let gx = slot(grads, *x, xv.numel());
                    for b in 0..blocks {
                        gemm(
                            1.0,
                            MatView::of(mv).t(),
                            MatView::new(&gy[b * p * c..(b + 1) * p * c], p, c),
                            1.0,
                            &mut gx[b * q * c..(b + 1) * q * c],
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(slot(grads, v, gy.len()), gy);
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.needs(*x) {
                    add_into(slot(grads, *x, gy.len()), gy);
                }
                if self.needs(*bias) {
                    let gb = slot(grads, *bias, ocols);
                    for row in gy.chunks_exact(ocols.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.needs(*x) {
                    let gx = slot(grads, *x, gy.len());
                    gx.iter_mut().zip(gy).for_each(|(a, g)| *a += s * g);
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let gx = slot(grads, *x, gy.len());
                    for ((a, g), v) in gx.iter_mut().zip(gy).zip(xv) {
                        if *v > 0.0 {
                            *a += g;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let yv = out.data();
                    let gx = slot(grads, *x, gy.len());
                    for ((a, g), y) in gx.iter_mut().zip(gy).zip(yv) {
                        *a += g * y * (1.0 - y);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                if self.needs(*a) {
                    let ga = slot(grads, *a, orows * ca);
                    for r in 0..orows {
                        add_into(
                            &mut ga[r * ca..(r + 1) * ca],
                            &gy[r * ocols..r * ocols + ca],
                        );
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, orows * cb);
                    for r in 0..orows {
                        add_into(
                            &mut gb[r * cb..(r + 1) * cb],
                            &gy[r * ocols + ca..(r + 1) * ocols],
                        );
                    }
                }
            }
            Op::RepeatRows(x, n) => {
                if self.needs(*x) {
                    let rows = self.value(*x).rows();
                    let gx = slot(grads, *x, rows * ocols);
                    for r in 0..rows {
                        for k in 0..*n {
                            let src = (r * n + k) * ocols;
                            add_into(&mut gx[r * ocols..(r + 1) * ocols], &gy[src..src + ocols]);
                        }
                    }
                }
            }
            Op::SliceRows(x, start) => {
                if self.needs(*x) {
                    let n = self.value(*x).numel();
                    let gx = slot(grads, *x, n);
                    add_into(&mut gx[start * ocols..start * ocols + gy.len()], gy);
                }
            }
            Op::GatherRows(x, idx) => {
                if self.needs(*x) {
                    let n = self.value(*x).numel();
                    let gx = slot(grads, *x, n);
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(
                            &mut gx[r * ocols..(r + 1) * ocols],
                            &gy[k * ocols..(k + 1) * ocols],
                        );
                    }
                }
            }
            Op::ScatterRows(x, idx) => {
                if self.needs(*x) {
                    let n = self.value(*x).numel();
                    let gx = slot(grads, *x, n);
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(
                            &mut gx[k * ocols..(k + 1) * ocols],
                            &gy[r * ocols..(r + 1) * ocols],
                        );
                    }
                }
            }
            Op::MulRows(x, s) => {
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                let c = ocols.max(1);
                if self.needs(*x) {
                    let gx = slot(grads, *x, xv.len());
                    for (r, (grow, gyrow)) in gx.chunks_exact_mut(c).zip(gy.chunks_exact(c)).enumerate() {
                        grow.iter_mut().zip(gyrow).for_each(|(a, g)| *a += g * sv[r]);
                    }
                }
                if self.needs(*s) {
                    let gs = slot(grads, *s, sv.len());
                    for (r, (xrow, gyrow)) in xv.chunks_exact(c).zip(gy.chunks_exact(c)).enumerate() {
                        gs[r] += xrow.iter().zip(gyrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::L2Normalize(x) => {
                if self.needs(*x) {
                    let norm = self.value(*x).frobenius_norm();
                    let u = out.data();
                    let dot: f64 = u.iter().zip(gy).map(|(a, b)| a * b).sum();
                    let gx = slot(grads, *x, u.len());
                    for ((a, g), uu) in gx.iter_mut().zip(gy).zip(u) {
                        *a += (g - uu * dot) / norm;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    add_into(slot(grads, *x, gy.len()), gy);
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let k = 2.0 * gy[0] / pv.len().max(1) as f64;
                if self.needs(*p) {
                    let gp = slot(grads, *p, pv.len());
                    for ((a, x), y) in gp.iter_mut().zip(pv).zip(tv) {
                        *a += k * (x - y);
                    }
                }
                if self.needs(*t) {
                    let gt = slot(grads, *t, tv.len());
                    for ((a, x), y) in gt.iter_mut().zip(pv).zip(tv) {
                        *a -= k * (x - y);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(acc: &mut [f64], delta: &[f64]) {
    acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d);
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to any recorded node that required one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(self, store: &mut ParamStore) {
        for (id, g) in self.params {
            store.get_mut(id).accumulate_grad(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], eps: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += eps;
                m[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn relu_forward_and_gate() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::from_rows(&[[-1.0, 0.0, 2.0]]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        // upstream [1, 1] through relu at [-1, 2]
        let x2 = tape.input(Tensor::from_rows(&[[-1.0, 2.0]]).unwrap());
        let y2 = tape.relu(x2);
        let ones = tape.constant(Tensor::from_rows(&[[1.0], [1.0]]).unwrap());
        let s = tape.matmul(y2, ones).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x2).unwrap(), &[0.0, 1.0]);
        let expect = fd(|v| v.iter().map(|a| a.max(0.0)).sum(), &[-1.0, 2.0], 1e-6);
        assert_eq!(expect[0], 0.0);
        assert!((expect[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn relu_tie_at_zero_has_zero_gradient() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::from_rows(&[[0.0]]).unwrap());
        let y = tape.relu(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[0.0]);
    }

    #[test]
    fn concat_gradient_splits_by_columns() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(Tensor::from_rows(&[[1.0], [2.0]]).unwrap());
        let b = tape.input(Tensor::from_rows(&[[3.0], [4.0]]).unwrap());
        let c = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 2.0, 4.0]);
        let w = tape.constant(Tensor::from_rows(&[[0.5], [-2.0]]).unwrap());
        let y = tape.matmul(c, w).unwrap();
        let zero = tape.constant(Tensor::zeros(2, 1));
        let loss = tape.mse(y, zero).unwrap();
        let g = tape.backward(loss).unwrap();
        // loss = mean((0.5 a_i - 2 b_i)^2) over i
        let f = |v: &[f64]| {
            let y0 = 0.5 * v[0] - 2.0 * v[2];
            let y1 = 0.5 * v[1] - 2.0 * v[3];
            (y0 * y0 + y1 * y1) / 2.0
        };
        let num = fd(f, &[1.0, 2.0, 3.0, 4.0], 1e-6);
        let ga = g.wrt(a).unwrap();
        let gb = g.wrt(b).unwrap();
        for (an, nu) in ga.iter().chain(gb).zip(&num) {
            assert!((an - nu).abs() < 1e-6, "{an} vs {nu}");
        }
    }

    #[test]
    fn concat_with_empty_operand() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let e = tape.constant(Tensor::matrix(2, 0, vec![]).unwrap());
        let c = tape.concat_cols(a, e).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
        let bad = tape.constant(Tensor::zeros(3, 1));
        assert!(tape.concat_cols(a, bad).is_err());
    }

    #[test]
    fn concat_image_features_with_coordinates() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let f = tape.constant(Tensor::zeros(29, 2048));
        let p = tape.constant(Tensor::zeros(29, 2));
        let c = tape.concat_cols(f, p).unwrap();
        assert_eq!(tape.value(c).shape(), &[29, 2050]);
    }

    #[test]
    fn mse_values_and_gradient() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let p = tape.input(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        let t = tape.constant(Tensor::from_rows(&[[3.0, 4.0]]).unwrap());
        let l = tape.mse(p, t).unwrap();
        assert_eq!(tape.scalar(l), 12.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(p).unwrap(), &[-3.0, -4.0]);

        let same = tape.mse(t, t).unwrap();
        assert_eq!(tape.scalar(same), 0.0);

        let other = tape.constant(Tensor::zeros(2, 1));
        assert!(tape.mse(p, other).is_err());
    }

    #[test]
    fn param_used_twice_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_rows(&[[3.0]]).unwrap());
        let mut tape = Tape::new(&store);
        let a = tape.param(w);
        let b = tape.param(w);
        let y = tape.matmul(a, b).unwrap(); // w^2
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param(w).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_or_non_finite_loss_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
        let big = tape.input(Tensor::from_rows(&[[1e200]]).unwrap());
        let sq = tape.matmul(big, big).unwrap();
        assert!(matches!(tape.backward(sq), Err(Error::NonFinite(_))));
    }
}
