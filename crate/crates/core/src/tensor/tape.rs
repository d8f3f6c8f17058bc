//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value and the
//! information its backward rule needs. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a topological order by construction, and
//! accumulates gradients additively into each input.

use rand::Rng;

use super::{gemm, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>, Vec<f64>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mse(Var, Tensor),
    MaskedMse(Var, Tensor, Vec<bool>, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Running mean and variance used by batch norm in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Per-feature statistics of one training batch. `var` is the unbiased
/// estimate, which is what running statistics track.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(1, features),
            var: Tensor::full(1, features, 1.0),
        }
    }

    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.data_mut().iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input. Gradients are only propagated towards leaves created
    /// with `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("add", x, y));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Add a `1×c` row to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(mismatch("add_row", x, r));
        }
        let mut out = x.clone();
        let cols = x.cols();
        if cols > 0 {
            for chunk in out.data_mut().chunks_mut(cols) {
                for (o, b) in chunk.iter_mut().zip(r.data()) {
                    *o += b;
                }
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("mul", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.rows(), x.cols(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(x.rows(), x.cols(), data).expect("same shape");
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(x.rows(), x.cols(), data).expect("same shape");
        self.push(out, Op::Relu(a), &[a])
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Outside training, or with `rate == 0`, returns `a` unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate(rate));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(x.rows(), x.cols(), data)?;
        Ok(self.push(out, Op::Dropout(a, mask), &[a]))
    }

    /// Row lookup: output row `i` is row `indices[i]` of `table`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= t.rows() {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: i,
                    len: t.rows(),
                });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(indices.len(), cols, data)?;
        Ok(self.push(out, Op::Gather(table, indices.to_vec()), &[table]))
    }

    fn segment_sums(
        &self,
        values: Var,
        segment_ids: &[usize],
        segments: usize,
        op: &'static str,
    ) -> Result<Tensor> {
        let x = self.value(values);
        if segment_ids.len() != x.rows() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: x.shape(),
                right: [segment_ids.len(), 1],
            });
        }
        let cols = x.cols();
        let mut out = Tensor::zeros(segments, cols);
        for (r, &s) in segment_ids.iter().enumerate() {
            if s >= segments {
                return Err(TensorError::IndexOutOfRange {
                    op,
                    index: s,
                    len: segments,
                });
            }
            let src = x.row_slice(r);
            for (o, v) in out.data_mut()[s * cols..(s + 1) * cols].iter_mut().zip(src) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Sum rows sharing a segment id into `segments` output rows.
    pub fn segment_sum(&mut self, values: Var, segment_ids: &[usize], segments: usize) -> Result<Var> {
        let out = self.segment_sums(values, segment_ids, segments, "segment_sum")?;
        Ok(self.push(out, Op::SegmentSum(values, segment_ids.to_vec()), &[values]))
    }

    /// Mean of rows sharing a segment id. Every segment must be non-empty.
    pub fn segment_mean(&mut self, values: Var, segment_ids: &[usize], segments: usize) -> Result<Var> {
        let mut out = self.segment_sums(values, segment_ids, segments, "segment_mean")?;
        let mut counts = vec![0.0; segments];
        for &s in segment_ids {
            counts[s] += 1.0;
        }
        if let Some(segment) = counts.iter().position(|&c| c == 0.0) {
            return Err(TensorError::EmptySegment { segment });
        }
        let cols = out.cols();
        if cols > 0 {
            for (chunk, c) in out.data_mut().chunks_mut(cols).zip(&counts) {
                for v in chunk {
                    *v /= c;
                }
            }
        }
        Ok(self.push(
            out,
            Op::SegmentMean(values, segment_ids.to_vec(), counts),
            &[values],
        ))
    }

    /// Batch normalisation over rows. Training mode normalises with the batch
    /// statistics and returns them so the caller can update `running`;
    /// evaluation mode uses `running` and returns `None`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        train: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        for p in [gamma, beta] {
            let pv = self.value(p);
            if pv.shape() != [1, cols] {
                return Err(mismatch("batch_norm", xv, pv));
            }
        }
        if running.mean.shape() != [1, cols] || running.var.shape() != [1, cols] {
            return Err(mismatch("batch_norm", xv, &running.mean));
        }
        let (mean, var_biased, stats) = if train {
            if rows < 2 {
                return Err(TensorError::BatchTooSmall { rows });
            }
            let n = rows as f64;
            let mut mean = vec![0.0; cols];
            for r in 0..rows {
                for (m, v) in mean.iter_mut().zip(xv.row_slice(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; cols];
            for r in 0..rows {
                for ((s, v), m) in var.iter_mut().zip(xv.row_slice(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let unbiased = var.iter().map(|s| s / (n - 1.0)).collect();
            var.iter_mut().for_each(|s| *s /= n);
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        } else {
            (
                running.mean.data().to_vec(),
                running.var.data().to_vec(),
                None,
            )
        };
        let inv_std: Vec<f64> = var_biased
            .iter()
            .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
            .collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (c, v) in xv.row_slice(r).iter().enumerate() {
                let h = (v - mean[c]) * inv_std[c];
                xhat.push(h);
                out.push(g[c] * h + b[c]);
            }
        }
        let out = Tensor::new(rows, cols, out)?;
        let var = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok((var, stats))
    }

    /// Concatenate matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), v));
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Sum of all elements, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(mismatch("mse_loss", p, target));
        }
        if p.is_empty() {
            return Err(TensorError::NotScalar { shape: p.shape() });
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let out = Tensor::scalar(s / p.len() as f64);
        Ok(self.push(out, Op::Mse(pred, target.clone()), &[pred]))
    }

    /// Squared error summed over entries with `mask == true`, divided by the
    /// number of such entries. Returns `None` when nothing is labelled.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Option<Var>> {
        let p = self.value(pred);
        if p.shape() != target.shape() || mask.len() != p.len() {
            return Err(mismatch("masked_mse", p, target));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Ok(None);
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| (a - b) * (a - b))
            .sum();
        let out = Tensor::scalar(s / count as f64);
        Ok(Some(self.push(
            out,
            Op::MaskedMse(pred, target.clone(), mask.to_vec(), count),
            &[pred],
        )))
    }

    /// Back-propagate from a 1x1 `root`. Gradients are kept for leaves that
    /// require them; intermediate gradients are released as the walk passes.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != [1, 1] {
            return Err(TensorError::NotScalar { shape: rv.shape() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let accumulate = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), da.data_mut());
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(k, n);
                    gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), db.data_mut());
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*row) {
                    let cols = g.cols();
                    let mut dr = Tensor::zeros(1, cols);
                    if cols > 0 {
                        for chunk in g.data().chunks(cols) {
                            for (d, v) in dr.data_mut().iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                    }
                    accumulate(grads, *row, dr);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let data = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), data).unwrap());
                }
                if self.wants(*b) {
                    let data = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, Tensor::new(g.rows(), g.cols(), data).unwrap());
                }
            }
            Op::Scale(a, s) => {
                let data = g.data().iter().map(|x| x * s).collect();
                accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), data).unwrap());
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect();
                accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), data).unwrap());
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(d, m)| d * m).collect();
                accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), data).unwrap());
            }
            Op::Gather(table, indices) => {
                let t = self.value(*table);
                let cols = t.cols();
                let mut dt = Tensor::zeros(t.rows(), cols);
                for (r, &i) in indices.iter().enumerate() {
                    let src = g.row_slice(r);
                    for (d, v) in dt.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                        *d += v;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::SegmentSum(values, ids) | Op::SegmentMean(values, ids, _) => {
                let counts = match &node.op {
                    Op::SegmentMean(_, _, c) => Some(c),
                    _ => None,
                };
                let cols = g.cols();
                let mut dv = Tensor::zeros(ids.len(), cols);
                for (r, &s) in ids.iter().enumerate() {
                    let src = g.row_slice(s);
                    let scale = counts.map_or(1.0, |c| 1.0 / c[s]);
                    for (d, v) in dv.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                        *d = v * scale;
                    }
                }
                accumulate(grads, *values, dv);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (rows, cols) = (g.rows(), g.cols());
                let gv = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; cols];
                let mut sum_dy_xhat = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let dy = g.data()[r * cols + c];
                        sum_dy[c] += dy;
                        sum_dy_xhat[c] += dy * xhat[r * cols + c];
                    }
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(rows, cols);
                    let n = rows as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            let idx = r * cols + c;
                            let dy = g.data()[idx];
                            dx.data_mut()[idx] = if *train {
                                gv[c] * inv_std[c] / n
                                    * (n * dy - sum_dy[c] - xhat[idx] * sum_dy_xhat[c])
                            } else {
                                gv[c] * inv_std[c] * dy
                            };
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::row(sum_dy_xhat));
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Tensor::row(sum_dy));
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                let rows = g.rows();
                for p in parts {
                    let pc = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + pc]);
                        }
                        accumulate(grads, *p, Tensor::new(rows, pc, data).unwrap());
                    }
                    offset += pc;
                }
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, Tensor::full(x.rows(), x.cols(), g.data()[0]));
            }
            Op::Mse(pred, target) => {
                let p = self.value(*pred);
                let scale = 2.0 * g.data()[0] / p.len() as f64;
                let data = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                accumulate(grads, *pred, Tensor::new(p.rows(), p.cols(), data).unwrap());
            }
            Op::MaskedMse(pred, target, mask, count) => {
                let p = self.value(*pred);
                let scale = 2.0 * g.data()[0] / *count as f64;
                let data = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(mask)
                    .map(|((a, b), &m)| if m { scale * (a - b) } else { 0.0 })
                    .collect();
                accumulate(grads, *pred, Tensor::new(p.rows(), p.cols(), data).unwrap());
            }
        }
    }
}
