//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node that refers to its parents
//! by index, so recording order is already a topological order. Backward
//! walks the tape once, in reverse.
//!
//! Parameters live outside the graph. Each training step copies them in with
//! [`Graph::param`], runs forward and [`Graph::backward`], then moves the
//! gradients back out with [`Graph::accumulate_into`].

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    /// `b` is either the same shape as `a` or a single row broadcast over `a`.
    Add {
        a: usize,
        b: usize,
        broadcast: bool,
    },
    Scale(usize, f32),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    RowMean(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    L2Normalize {
        a: usize,
        norms: Vec<f64>,
    },
    CosineSim {
        a: usize,
        b: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: usize,
        targets: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

fn dim_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::Dimension { op, left, right }
}

/// Row-major product with f64 accumulation in ascending inner index order.
pub(crate) fn matmul_raw(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let aip = f64::from(a[i * k + p]);
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += aip * f64::from(bv);
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    out
}

fn transpose_raw(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value from {op:?}");
        let value = value.with_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Leaf copied from `t`; tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, t.requires_grad())
    }

    /// Trainable leaf, regardless of the tensor's own flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(dim_err("matmul", (m, k), (k2, n)));
        }
        let out = matmul_raw(self.value(a).data(), m, k, self.value(b).data(), n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::from_vec(m, n, out)?, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = transpose_raw(self.value(a).data(), r, c);
        let rg = self.rg(&[a.0]);
        let t = Tensor::from_vec(c, r, out).expect("transpose preserves length");
        self.push(t, Op::Transpose(a.0), rg)
    }

    /// Elementwise sum. `b` may also be a single row, added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let broadcast = if sa == sb {
            false
        } else if sb.0 == 1 && sb.1 == sa.1 {
            true
        } else {
            return Err(dim_err("add", sa, sb));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let cols = sa.1;
        let out: Vec<f32> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| x + if broadcast { bv[i % cols] } else { bv[i] })
            .collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::from_vec(sa.0, sa.1, out)?,
            Op::Add {
                a: a.0,
                b: b.0,
                broadcast,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let rg = self.rg(&[a.0]);
        let t = Tensor::from_vec(r, c, out).expect("same length");
        self.push(t, Op::Scale(a.0, s), rg)
    }

    /// Side-by-side concatenation; all parts share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(dim_err("concat_cols", (rows, cols), s));
            }
            cols += s.1;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&idx);
        Ok(self.push(Tensor::from_vec(rows, cols, out)?, Op::ConcatCols(idx), rg))
    }

    /// Vertical concatenation; all parts share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        if values.is_empty() {
            return Err(Error::Contract("concat_rows of nothing".into()));
        }
        let t = Tensor::stack_rows(&values)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&idx);
        Ok(self.push(t, Op::ConcatRows(idx), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a).reshaped(rows, cols)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    /// Column-wise mean over rows: `r × c → 1 × c`.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(Error::Degenerate("row_mean of zero rows".into()));
        }
        let v = self.value(a);
        let out = (0..c)
            .map(|j| ((0..r).map(|i| f64::from(v.get(i, j))).sum::<f64>() / r as f64) as f32)
            .collect();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_vec(1, c, out)?, Op::RowMean(a.0), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a.0]);
        let t = Tensor::from_vec(r, c, out).expect("same length");
        self.push(t, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f32::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| sigmoid64(f64::from(x)) as f32, Op::Sigmoid(a.0))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let v = self.value(a);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = v.row(i);
            let n = dot64(row, row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!(
                    "l2_normalize of row {i} with norm {n}"
                )));
            }
            out.extend(row.iter().map(|&x| (f64::from(x) / n) as f32));
            norms.push(n);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::from_vec(r, c, out)?,
            Op::L2Normalize { a: a.0, norms },
            rg,
        ))
    }

    /// Row-wise cosine similarity: `n × d, n × d → n × 1`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(dim_err("cosine_sim", sa, sb));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(sa.0);
        for i in 0..sa.0 {
            let (x, y) = (av.row(i), bv.row(i));
            let nx = dot64(x, x).sqrt();
            let ny = dot64(y, y).sqrt();
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::Degenerate("cosine_sim of a zero-norm vector".into()));
            }
            out.push((dot64(x, y) / (nx * ny)).clamp(-1.0, 1.0) as f32);
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::from_vec(sa.0, 1, out)?,
            Op::CosineSim { a: a.0, b: b.0 },
            rg,
        ))
    }

    /// Mean over rows of `−log softmax(logits_row)[label]`, computed with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.shape(logits);
        if labels.len() != n {
            return Err(dim_err("softmax_cross_entropy", (n, k), (labels.len(), 1)));
        }
        if n == 0 || k == 0 {
            return Err(Error::Degenerate(
                "softmax_cross_entropy on empty logits".into(),
            ));
        }
        let v = self.value(logits);
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Index {
                    what: "class label",
                    index: label,
                    len: k,
                });
            }
            let row = v.row(i);
            let max = row
                .iter()
                .fold(f64::NEG_INFINITY, |m, &x| m.max(f64::from(x)));
            let sum: f64 = row.iter().map(|&x| (f64::from(x) - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - f64::from(row[label]);
            probs.extend(row.iter().map(|&x| (f64::from(x) - lse).exp()));
        }
        let loss = (total / n as f64) as f32;
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `σ(logit)` against targets, in the overflow-free form
    /// `max(x, 0) − x·t + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32]) -> Result<Var> {
        let v = self.value(logits);
        if targets.len() != v.len() {
            return Err(dim_err("bce_with_logits", v.shape(), (targets.len(), 1)));
        }
        if v.is_empty() {
            return Err(Error::Degenerate("bce_with_logits on empty logits".into()));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Contract(format!("bce target {t} outside [0, 1]")));
        }
        let total: f64 = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| {
                let (x, t) = (f64::from(x), f64::from(t));
                x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let loss = (total / v.len() as f64) as f32;
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Back-propagates from the scalar `loss`, adding into the stored gradient of
    /// every node that requires one. Calling it again without [`Graph::zero_grads`]
    /// accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = adj[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &upstream, &mut adj);
            let slot = self.grads[idx].get_or_insert_with(|| vec![0.0; upstream.len()]);
            for (g, u) in slot.iter_mut().zip(&upstream) {
                *g += u;
            }
        }
        // Leaves that require grad but sit off the loss path still get a zero gradient.
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Vec<f32>>], target: usize, delta: Vec<f32>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut adj[target] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, up: &[f32], adj: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[*a].value.shape();
                let n = self.nodes[*b].value.cols();
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if self.nodes[*a].requires_grad {
                    let bt = transpose_raw(bv, k, n);
                    self.send(adj, *a, matmul_raw(up, m, n, &bt, k));
                }
                if self.nodes[*b].requires_grad {
                    let at = transpose_raw(av, m, k);
                    self.send(adj, *b, matmul_raw(&at, k, m, up, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = out.shape();
                self.send(adj, *a, transpose_raw(up, r, c));
            }
            Op::Add { a, b, broadcast } => {
                self.send(adj, *a, up.to_vec());
                if *broadcast {
                    let (r, c) = out.shape();
                    let db = (0..c)
                        .map(|j| (0..r).map(|i| f64::from(up[i * c + j])).sum::<f64>() as f32)
                        .collect();
                    self.send(adj, *b, db);
                } else {
                    self.send(adj, *b, up.to_vec());
                }
            }
            Op::Scale(a, s) => {
                self.send(adj, *a, up.iter().map(|u| u * s).collect());
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].value.cols();
                    let mut d = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        d.extend_from_slice(&up[r * total + offset..r * total + offset + pc]);
                    }
                    offset += pc;
                    self.send(adj, p, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    self.send(adj, p, up[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Reshape(a) => self.send(adj, *a, up.to_vec()),
            Op::RowMean(a) => {
                let (r, c) = self.nodes[*a].value.shape();
                let inv = 1.0 / r as f32;
                let d = (0..r * c).map(|i| up[i % c] * inv).collect();
                self.send(adj, *a, d);
            }
            Op::Tanh(a) => {
                let d = out
                    .data()
                    .iter()
                    .zip(up)
                    .map(|(&y, &u)| u * (1.0 - y * y))
                    .collect();
                self.send(adj, *a, d);
            }
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                let d = x
                    .iter()
                    .zip(up)
                    .map(|(&x, &u)| if x > 0.0 { u } else { 0.0 })
                    .collect();
                self.send(adj, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = out
                    .data()
                    .iter()
                    .zip(up)
                    .map(|(&y, &u)| u * y * (1.0 - y))
                    .collect();
                self.send(adj, *a, d);
            }
            Op::L2Normalize { a, norms } => {
                let c = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for (i, &n) in norms.iter().enumerate() {
                    let y = out.row(i);
                    let u = &up[i * c..(i + 1) * c];
                    let yu = dot64(y, u);
                    d.extend(
                        y.iter()
                            .zip(u)
                            .map(|(&y, &u)| ((f64::from(u) - f64::from(y) * yu) / n) as f32),
                    );
                }
                self.send(adj, *a, d);
            }
            Op::CosineSim { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let c = av.cols();
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for (i, &g) in up.iter().enumerate().take(av.rows()) {
                    let (x, y) = (av.row(i), bv.row(i));
                    let nx = dot64(x, x).sqrt();
                    let ny = dot64(y, y).sqrt();
                    let cos = dot64(x, y) / (nx * ny);
                    let u = f64::from(g);
                    for j in 0..c {
                        let (xj, yj) = (f64::from(x[j]), f64::from(y[j]));
                        da.push((u * (yj / (nx * ny) - cos * xj / (nx * nx))) as f32);
                        db.push((u * (xj / (nx * ny) - cos * yj / (ny * ny))) as f32);
                    }
                }
                self.send(adj, *a, da);
                self.send(adj, *b, db);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.nodes[*logits].value.cols();
                let n = labels.len() as f64;
                let u = f64::from(up[0]);
                let d = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let onehot = if labels[i / k] == i % k { 1.0 } else { 0.0 };
                        (u * (p - onehot) / n) as f32
                    })
                    .collect();
                self.send(adj, *logits, d);
            }
            Op::BceWithLogits { logits, targets } => {
                let x = self.nodes[*logits].value.data();
                let n = x.len() as f64;
                let u = f64::from(up[0]);
                let d = x
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| (u * (sigmoid64(f64::from(x)) - f64::from(t)) / n) as f32)
                    .collect();
                self.send(adj, *logits, d);
            }
        }
    }

    /// Gradient accumulated so far at `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient at `v` shaped like its value.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let (r, c) = self.shape(v);
        self.grad(v)
            .map(|g| Tensor::from_vec(r, c, g.to_vec()).expect("grad matches value shape"))
    }

    /// Adds the gradient at `v` into `target`'s gradient slot.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Err(Error::Contract(format!(
                "no gradient recorded for node {}",
                v.0
            ))),
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }
}
