use super::kernels;
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        log_probs: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(Var),
    #[cfg(test)]
    MisScaledIdentity(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Records operations in execution order so gradients can be replayed
/// backwards. One tape per forward pass; not shared across threads.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        let mut tensor = tensor;
        tensor.set_grad(None);
        self.push(tensor, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient accumulated into `v` by the last [`Tape::backward`], if any
    /// path reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<F>> {
        self.nodes[v.0].value.take_grad()
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<F>, inputs: &[Var], op: Op<F>) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor::new(shape, data)
            .expect("kernel produced inconsistent shape")
            .with_requires_grad(requires_grad);
        self.push(value, op)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.record(vec![m, n], data, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let data = kernels::transpose(self.value(a).data(), r, c);
        Ok(self.record(vec![c, r], data, &[a], Op::Transpose(a)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, data, &[a, b], Op::Add(a, b)))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "add_bias")?;
        if self.value(bias).len() != c {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: vec![r, c],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
        Ok(self.record(vec![r, c], data, &[a, bias], Op::AddBias(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, data, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, data, &[a], Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, data, &[a], Op::Gelu(a))
    }

    /// Row-wise layer normalization of an `r×c` matrix with learned gain
    /// and bias of length `c`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: vec![r, c],
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = F::lit(c as f64);
        let mut normalized = vec![F::zero(); r * c];
        let mut rstd = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                normalized[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.record(
            vec![r, c],
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            },
        ))
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis` (max-shifted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let shape = self.shape(x).to_vec();
        let data = kernels::softmax(self.value(x).data(), &shape, axis);
        Ok(self.record(shape, data, &[x], Op::Softmax(x, axis)))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let shape = self.shape(x).to_vec();
        let data = kernels::log_softmax(self.value(x).data(), &shape, axis);
        Ok(self.record(shape, data, &[x], Op::LogSoftmax(x, axis)))
    }

    /// Selects columns `ids` of a `D×V` table, producing `len(ids)×D` rows.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (d, v) = self.dims2(table, "embedding")?;
        if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= v) {
            return Err(Error::Index {
                position,
                id,
                limit: v,
            });
        }
        let t = self.value(table).data();
        let mut data = vec![F::zero(); ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            for k in 0..d {
                data[r * d + k] = t[k * v + id];
            }
        }
        Ok(self.record(
            vec![ids.len(), d],
            data,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Stacks 2-D inputs with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of zero tensors"));
        };
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.record(vec![rows, c], data, parts, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins 2-D inputs with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_cols of zero tensors"));
        };
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.record(vec![r, total], data, parts, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        Ok(self.record(vec![r, len], data, &[x], Op::SliceCols { x, start }))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.record(vec![len, c], data, &[x], Op::SliceRows { x, start }))
    }

    /// Row `row` of a 2-D tensor as a `1×c` tensor.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        self.slice_rows(x, row, 1)
    }

    /// Token-mean negative log-likelihood over unmasked steps.
    pub fn cross_entropy(&mut self, log_probs: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims2(log_probs, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let lp = self.value(log_probs).data();
        let mut total = F::zero();
        let mut count = 0usize;
        for (step, (&target, &keep)) in targets.iter().zip(mask).enumerate() {
            if !keep {
                continue;
            }
            if target >= v {
                return Err(Error::Index {
                    position: step,
                    id: target,
                    limit: v,
                });
            }
            total -= lp[step * v + target];
            count += 1;
        }
        if count == 0 {
            return Err(Error::contract("cross_entropy with every step masked"));
        }
        let loss = total / F::lit(count as f64);
        Ok(self.record(
            Vec::new(),
            vec![loss],
            &[log_probs],
            Op::CrossEntropy {
                log_probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.record(Vec::new(), vec![s], &[x], Op::Sum(x))
    }

    #[cfg(test)]
    pub(crate) fn mis_scaled_identity(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data().to_vec();
        self.record(shape, data, &[x], Op::MisScaledIdentity(x))
    }

    /// Replays the tape backwards from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.set_grad(Some(vec![F::one()]));

        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].value.take_grad() else {
                continue;
            };
            let contributions = self.backward_rule(idx, &g);
            self.nodes[idx].value.set_grad(Some(g));
            for (input, delta) in contributions {
                let node = &mut self.nodes[input.0].value;
                if !node.requires_grad() {
                    continue;
                }
                match node.grad {
                    Some(_) => node.accumulate_grad(&delta),
                    None => node.set_grad(Some(delta)),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.requires_grad(v)
    }

    fn backward_rule(&self, idx: usize, g: &[F]) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(a));
                let (_, n) = dims(self.value(b));
                if self.wants(a) {
                    out.push((a, kernels::matmul_bt(g, self.value(b).data(), m, n, k)));
                }
                if self.wants(b) {
                    out.push((b, kernels::matmul_at(self.value(a).data(), g, m, k, n)));
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = dims(self.value(a));
                out.push((a, kernels::transpose(g, c, r)));
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    out.push((a, g.to_vec()));
                }
                if self.wants(b) {
                    out.push((b, g.to_vec()));
                }
            }
            &Op::AddBias(a, bias) => {
                if self.wants(a) {
                    out.push((a, g.to_vec()));
                }
                if self.wants(bias) {
                    let c = self.value(bias).len();
                    let mut db = vec![F::zero(); c];
                    for row in g.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                    out.push((bias, db));
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    out.push((a, g.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                }
                if self.wants(b) {
                    out.push((b, g.iter().zip(av).map(|(&g, &x)| g * x).collect()));
                }
            }
            &Op::Scale(a, s) => out.push((a, g.iter().map(|&x| x * s).collect())),
            &Op::Gelu(a) => {
                let x = self.value(a).data();
                out.push((
                    a,
                    g.iter().zip(x).map(|(&g, &x)| g * kernels::gelu_grad(x)).collect(),
                ));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            } => {
                let (r, c) = dims(self.value(*x));
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let mut dg = vec![F::zero(); c];
                    for (gr, hr) in g.chunks_exact(c).zip(normalized.chunks_exact(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if self.wants(*bias) {
                    let mut db = vec![F::zero(); c];
                    for gr in g.chunks_exact(c) {
                        db.iter_mut().zip(gr).for_each(|(d, &x)| *d += x);
                    }
                    out.push((*bias, db));
                }
                if self.wants(*x) {
                    let n = F::lit(c as f64);
                    let mut dx = vec![F::zero(); r * c];
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &normalized[i * c..(i + 1) * c];
                        let mut sum_dh = F::zero();
                        let mut sum_dh_h = F::zero();
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let k = rstd[i] / n;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dx[i * c + j] = k * (n * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            &Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = kernels::axis_layout(node.value.shape(), axis);
                let mut dx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + k;
                        let s: F = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..n {
                            dx[idx(i)] = y[idx(i)] * (g[idx(i)] - s);
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::LogSoftmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = kernels::axis_layout(node.value.shape(), axis);
                let mut dx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + k;
                        let s: F = (0..n).map(|i| g[idx(i)]).sum();
                        for i in 0..n {
                            dx[idx(i)] = g[idx(i)] - y[idx(i)].exp() * s;
                        }
                    }
                }
                out.push((x, dx));
            }
            Op::Embedding { table, ids } => {
                let (d, v) = dims(self.value(*table));
                let mut dt = vec![F::zero(); d * v];
                for (r, &id) in ids.iter().enumerate() {
                    for k in 0..d {
                        dt[k * v + id] += g[r * d + k];
                    }
                }
                out.push((*table, dt));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        out.push((p, g[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dims(&node.value);
                let mut col = 0;
                for &p in parts {
                    let (_, w) = dims(self.value(p));
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g[i * total + col..i * total + col + w]);
                        }
                        out.push((p, dp));
                    }
                    col += w;
                }
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = dims(self.value(x));
                let (_, len) = dims(&node.value);
                let mut dx = vec![F::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                out.push((x, dx));
            }
            &Op::SliceRows { x, start } => {
                let (r, c) = dims(self.value(x));
                let mut dx = vec![F::zero(); r * c];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                out.push((x, dx));
            }
            Op::CrossEntropy {
                log_probs,
                targets,
                mask,
                count,
            } => {
                let (t, v) = dims(self.value(*log_probs));
                let w = -g[0] / F::lit(*count as f64);
                let mut dx = vec![F::zero(); t * v];
                for (step, (&target, &keep)) in targets.iter().zip(mask).enumerate() {
                    if keep {
                        dx[step * v + target] = w;
                    }
                }
                out.push((*log_probs, dx));
            }
            &Op::Sum(x) => out.push((x, vec![g[0]; self.value(x).len()])),
            #[cfg(test)]
            &Op::MisScaledIdentity(x) => {
                out.push((x, g.iter().map(|&v| v * F::lit(1.1)).collect()));
            }
        }
        out
    }
}

fn dims<F: Float>(t: &Tensor<F>) -> (usize, usize) {
    t.dims2().expect("recorded 2-D operand")
}
