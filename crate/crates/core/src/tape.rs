//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every traced operation appends one node holding its forward value and the
//! handles of its operands. `backward` walks the nodes in exact reverse order
//! of recording and accumulates gradients additively, so a tensor used by
//! several operations receives the sum of all path contributions.
//!
//! Parameters are registered by reference (`param`), which keeps a forward
//! pass over a large shared parameter set free of copies. A tape is owned by
//! one worker; several tapes may borrow the same parameters concurrently.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{self, axpy, dot, gemm_nn, gemm_nt, gemm_tn, Activation, Tensor};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Act(Var, Activation),
    Im2Col { x: Var, k: usize },
    LocalMatVec { w: Var, s: Var },
    ConcatCols(Var, Var),
    PairRows(Var),
    GateMix { z: Var, g: Var },
    /// Forward value computed from the operand, no gradient flows back.
    Stop,
    StackRows(Vec<Var>),
    GatherRows { table: Var, ids: Vec<Option<usize>> },
    Reshape(Var),
    Sum(Var),
    Scale(Var, f64),
    LogSoftmaxAt { logits: Var, index: usize },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// Ordered record of traced operations.
#[derive(Default)]
pub struct GradTape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> GradTape<'p> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    /// Registers a borrowed leaf, typically a model parameter.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    /// Registers an owned leaf (an input or a constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_owned(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    /// `a · b` for matrices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nn(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        Ok(self.push_owned(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for matrices `a[m×k]`, `b[n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nt(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        Ok(self.push_owned(out, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        axpy(1.0, self.value(b).data(), out.data_mut());
        Ok(self.push_owned(out, Op::Add(a, b)))
    }

    /// Adds `bias` (any shape with `cols` elements) to every row of `x[rows×cols]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if self.value(bias).len() != cols {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for r in 0..rows {
            axpy(1.0, b, &mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        Ok(self.push_owned(out, Op::AddBias(x, bias)))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).activation(kind);
        self.push_owned(out, Op::Act(x, kind))
    }

    /// Stacks every window of `k` consecutive rows of `x[len×d]` into one row:
    /// output `[len−k+1 × k·d]`, row `i` = rows `i..i+k` concatenated.
    pub fn im2col(&mut self, x: Var, k: usize) -> Result<Var> {
        let (len, d) = self.dims2(x)?;
        if k == 0 || len < k {
            return Err(Error::shape("im2col", self.shape(x), &[k]));
        }
        let locations = len - k + 1;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(locations * k * d);
        for i in 0..locations {
            data.extend_from_slice(&src[i * d..(i + k) * d]);
        }
        let out = Tensor::new(vec![locations, k * d], data)?;
        Ok(self.push_owned(out, Op::Im2Col { x, k }))
    }

    /// Location-wise matrix-vector products: `w[L×F×m]`, `s[L×m]` →
    /// `out[i, f] = w[i, f, :] · s[i, :]`.
    pub fn local_matvec(&mut self, w: Var, s: Var) -> Result<Var> {
        let ws = self.shape(w);
        let (l, m) = self.dims2(s)?;
        if ws.len() != 3 || ws[0] != l || ws[2] != m {
            return Err(Error::shape("local_matvec", ws, self.shape(s)));
        }
        let f = ws[1];
        let wd = self.value(w).data();
        let sd = self.value(s).data();
        let mut out = Tensor::zeros(&[l, f]);
        let od = out.data_mut();
        for i in 0..l {
            let si = &sd[i * m..(i + 1) * m];
            for j in 0..f {
                let base = (i * f + j) * m;
                od[i * f + j] = dot(&wd[base..base + m], si);
            }
        }
        Ok(self.push_owned(out, Op::LocalMatVec { w, s }))
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2(a)?;
        let (rb, cb) = self.dims2(b)?;
        if ra != rb {
            return Err(Error::shape("concat_cols", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let out = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.push_owned(out, Op::ConcatCols(a, b)))
    }

    /// Merges non-overlapping row pairs `(2j, 2j+1)` of `s[L×m]` into rows of
    /// `[⌊L/2⌋ × 2m]`. A trailing unpaired row is dropped.
    pub fn pair_rows(&mut self, s: Var) -> Result<Var> {
        let (l, m) = self.dims2(s)?;
        let j = l / 2;
        if j == 0 {
            return Err(Error::shape("pair_rows", self.shape(s), &[2]));
        }
        let data = self.value(s).data()[..j * 2 * m].to_vec();
        let out = Tensor::new(vec![j, 2 * m], data)?;
        Ok(self.push_owned(out, Op::PairRows(s)))
    }

    /// Gated convex combination of row pairs:
    /// `out[j] = g[j]·z[2j] + (1−g[j])·z[2j+1]`; with odd `L` the last row of
    /// `z` is passed through unchanged.
    pub fn gate_mix(&mut self, z: Var, g: Var) -> Result<Var> {
        let (l, f) = self.dims2(z)?;
        let (j, fg) = self.dims2(g)?;
        if fg != f || j != l / 2 || j == 0 {
            return Err(Error::shape("gate_mix", self.shape(z), self.shape(g)));
        }
        let rows = l.div_ceil(2);
        let zd = self.value(z).data();
        let gd = self.value(g).data();
        let mut out = Tensor::zeros(&[rows, f]);
        let od = out.data_mut();
        for w in 0..j {
            for c in 0..f {
                let gv = gd[w * f + c];
                od[w * f + c] = gv * zd[2 * w * f + c] + (1.0 - gv) * zd[(2 * w + 1) * f + c];
            }
        }
        if l % 2 == 1 {
            od[j * f..].copy_from_slice(&zd[(l - 1) * f..]);
        }
        Ok(self.push_owned(out, Op::GateMix { z, g }))
    }

    /// Hard decision `1` where `x ≥ 0.5`, else `0`. Not differentiable; no
    /// gradient flows to `x`.
    pub fn hard_threshold(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        self.push_owned(out, Op::Stop)
    }

    /// Concatenates matrices with equal column counts along rows.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("stack_rows needs at least one part".into()));
        };
        let (_, cols) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != cols {
                return Err(Error::shape("stack_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_owned(out, Op::StackRows(parts.to_vec())))
    }

    /// Selects rows of `table[n×c]` (or elements of a vector `[n]`);
    /// `None` produces a zero row.
    pub fn gather_rows(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let (n, c) = match shape[..] {
            [n] => (n, 1),
            [n, c] => (n, c),
            _ => return Err(Error::shape("gather_rows", &shape, &[ids.len()])),
        };
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one id".into()));
        }
        let td = self.value(table).data();
        let mut data = vec![0.0; ids.len() * c];
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= n {
                    return Err(Error::Contract(format!(
                        "gather_rows: id {id} out of range for {n} rows"
                    )));
                }
                data[r * c..(r + 1) * c].copy_from_slice(&td[id * c..(id + 1) * c]);
            }
        }
        let out_shape = if shape.len() == 1 {
            vec![ids.len()]
        } else {
            vec![ids.len(), c]
        };
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push_owned(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push_owned(out, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_owned(out, Op::Sum(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push_owned(out, Op::Scale(x, factor))
    }

    /// `logits[index] − log Σ exp(logits)`, as a scalar.
    pub fn log_softmax_at(&mut self, logits: Var, index: usize) -> Result<Var> {
        let l = self.value(logits).data();
        if index >= l.len() {
            return Err(Error::Contract(format!(
                "log_softmax_at: index {index} out of range for {} logits",
                l.len()
            )));
        }
        let out = Tensor::scalar(l[index] - tensor::log_sum_exp(l));
        Ok(self.push_owned(out, Op::LogSoftmaxAt { logits, index }))
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with_seed(loss, 1.0)
    }

    /// Like [`backward`](Self::backward) but scales the output gradient by
    /// `seed` (used to average losses over a batch).
    pub fn backward_with_seed(&self, loss: Var, seed: f64) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), seed));

        fn slot<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'g mut [f64] {
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
                .data_mut()
        }

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let g = g.data();
            match &node.op {
                Op::Leaf | Op::Stop => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = av.dims2()?;
                    let n = bv.shape()[1];
                    gemm_nt(g, bv.data(), slot(&mut grads, nodes, *a), m, n, k);
                    gemm_tn(av.data(), g, slot(&mut grads, nodes, *b), m, k, n);
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = av.dims2()?;
                    let n = bv.shape()[0];
                    gemm_nn(g, bv.data(), slot(&mut grads, nodes, *a), m, n, k);
                    gemm_tn(g, av.data(), slot(&mut grads, nodes, *b), m, n, k);
                }
                Op::Add(a, b) => {
                    axpy(1.0, g, slot(&mut grads, nodes, *a));
                    axpy(1.0, g, slot(&mut grads, nodes, *b));
                }
                Op::AddBias(x, bias) => {
                    axpy(1.0, g, slot(&mut grads, nodes, *x));
                    let cols = nodes[bias.0].value.len();
                    let db = slot(&mut grads, nodes, *bias);
                    for row in g.chunks_exact(cols) {
                        axpy(1.0, row, db);
                    }
                }
                Op::Act(x, kind) => {
                    let y = node.value.data();
                    let dx = slot(&mut grads, nodes, *x);
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * kind.derivative_from_output(yi);
                    }
                }
                Op::Im2Col { x, k } => {
                    let d = nodes[x.0].value.shape()[1];
                    let width = k * d;
                    let dx = slot(&mut grads, nodes, *x);
                    for (i, row) in g.chunks_exact(width).enumerate() {
                        axpy(1.0, row, &mut dx[i * d..i * d + width]);
                    }
                }
                Op::LocalMatVec { w, s } => {
                    let ws = nodes[w.0].value.shape();
                    let (l, f, m) = (ws[0], ws[1], ws[2]);
                    let wd = nodes[w.0].value.data();
                    let sd = nodes[s.0].value.data();
                    {
                        let dw = slot(&mut grads, nodes, *w);
                        for i in 0..l {
                            let si = &sd[i * m..(i + 1) * m];
                            for j in 0..f {
                                let base = (i * f + j) * m;
                                axpy(g[i * f + j], si, &mut dw[base..base + m]);
                            }
                        }
                    }
                    let ds = slot(&mut grads, nodes, *s);
                    for i in 0..l {
                        let dsi = &mut ds[i * m..(i + 1) * m];
                        for j in 0..f {
                            let base = (i * f + j) * m;
                            axpy(g[i * f + j], &wd[base..base + m], dsi);
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = nodes[a.0].value.shape()[1];
                    let cb = nodes[b.0].value.shape()[1];
                    {
                        let da = slot(&mut grads, nodes, *a);
                        for (r, row) in g.chunks_exact(ca + cb).enumerate() {
                            axpy(1.0, &row[..ca], &mut da[r * ca..(r + 1) * ca]);
                        }
                    }
                    let db = slot(&mut grads, nodes, *b);
                    for (r, row) in g.chunks_exact(ca + cb).enumerate() {
                        axpy(1.0, &row[ca..], &mut db[r * cb..(r + 1) * cb]);
                    }
                }
                Op::PairRows(s) => {
                    let ds = slot(&mut grads, nodes, *s);
                    axpy(1.0, g, &mut ds[..g.len()]);
                }
                Op::GateMix { z, g: gate } => {
                    let (l, f) = nodes[z.0].value.dims2()?;
                    let j = l / 2;
                    let zd = nodes[z.0].value.data();
                    let gd = nodes[gate.0].value.data();
                    {
                        let dz = slot(&mut grads, nodes, *z);
                        for w in 0..j {
                            for c in 0..f {
                                let go = g[w * f + c];
                                let gv = gd[w * f + c];
                                dz[2 * w * f + c] += gv * go;
                                dz[(2 * w + 1) * f + c] += (1.0 - gv) * go;
                            }
                        }
                        if l % 2 == 1 {
                            axpy(1.0, &g[j * f..], &mut dz[(l - 1) * f..]);
                        }
                    }
                    if !matches!(nodes[gate.0].op, Op::Stop) {
                        let dg = slot(&mut grads, nodes, *gate);
                        for w in 0..j {
                            for c in 0..f {
                                dg[w * f + c] +=
                                    g[w * f + c] * (zd[2 * w * f + c] - zd[(2 * w + 1) * f + c]);
                            }
                        }
                    }
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = nodes[p.0].value.len();
                        axpy(1.0, &g[offset..offset + n], slot(&mut grads, nodes, *p));
                        offset += n;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let tv = &nodes[table.0].value;
                    let c = if tv.rank() == 1 { 1 } else { tv.shape()[1] };
                    let dt = slot(&mut grads, nodes, *table);
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(id) = *id {
                            axpy(1.0, &g[r * c..(r + 1) * c], &mut dt[id * c..(id + 1) * c]);
                        }
                    }
                }
                Op::Reshape(x) => {
                    axpy(1.0, g, slot(&mut grads, nodes, *x));
                }
                Op::Sum(x) => {
                    let gv = g[0];
                    for d in slot(&mut grads, nodes, *x).iter_mut() {
                        *d += gv;
                    }
                }
                Op::Scale(x, factor) => {
                    axpy(*factor, g, slot(&mut grads, nodes, *x));
                }
                Op::LogSoftmaxAt { logits, index } => {
                    let l = nodes[logits.0].value.data();
                    let lse = tensor::log_sum_exp(l);
                    let gv = g[0];
                    let dl = slot(&mut grads, nodes, *logits);
                    for (d, &li) in dl.iter_mut().zip(l) {
                        *d -= gv * (li - lse).exp();
                    }
                    dl[*index] += gv;
                }
            }
        }

        let shapes = nodes
            .iter()
            .map(|n| match n.op {
                Op::Leaf => Some(n.value.shape().to_vec()),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradient map over the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Option<Vec<usize>>>,
}

impl Gradients {
    /// Gradient for leaf `v`; zeros of the leaf's shape when `v` does not
    /// reach the loss.
    pub fn wrt(&self, v: Var) -> Result<Tensor> {
        match (&self.grads[v.0], &self.shapes[v.0]) {
            (Some(g), Some(_)) => Ok(g.clone()),
            (None, Some(shape)) => Ok(Tensor::zeros(shape)),
            _ => Err(Error::Contract(format!("{v:?} is not a leaf"))),
        }
    }

    /// Moves out the gradient of leaf `v`; `None` if it does not reach the loss.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if self.shapes[v.0].is_some() {
            self.grads[v.0].take()
        } else {
            None
        }
    }
}
