//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive appends one node holding its forward value and whatever
//! it needs for the backward rule. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a valid topological order because a
//! node can only reference nodes recorded before it.
//!
//! Matrices are 2-D row-major. Beyond bias rows and scalars there is no
//! broadcasting.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Variance stabilizer used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_trans: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { a: Var, bias: Var },
    Scale(Var, f64),
    Sum(Var),
    Softmax { a: Var },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Slice {
        a: Var,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A recording of primitive operations for one forward/backward pass.
///
/// Build a fresh tape (or call [`Tape::clear`]) for every optimization step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c.max(1), c)
        }
    }
}

fn check_finite(op: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf copying `tensor`'s data and its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<Var> {
        check_finite("leaf", tensor.data())?;
        Ok(self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        ))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        self.leaf(&t)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Copies the node out as a standalone tensor (no gradient).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Adds the gradient of `v` into `target`'s gradient slot.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn matrix(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{op}: expected a matrix, got shape {s:?}"))),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (br, bc) = self.matrix(b, "matmul")?;
        let (kb, n) = if b_trans { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions {k} and {kb} differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), b_trans, &mut out, false);
        check_finite("matmul", &out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, b_trans }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        check_finite("mul", &out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix(a, "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "add_bias: bias shape {:?} for {n} columns",
                self.shape(bias)
            )));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(a)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        check_finite("add_bias", &out)?;
        let rg = self.requires_grad(a) || self.requires_grad(bias);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBias { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        check_finite("scale", &out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Scale(a, factor), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.requires_grad(a);
        Ok(self.push(vec![], vec![s], Op::Sum(a), rg))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix(a, "causal_softmax")?;
        if r != c {
            return Err(Error::Shape(format!("causal_softmax: {r}×{c} is not square")));
        }
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        for (i, row) in out.chunks_exact_mut(n).enumerate() {
            let live = if causal { i + 1 } else { n };
            let max = row[..live].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in &mut row[..live] {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in &mut row[..live] {
                *x /= total;
            }
            row[live..].fill(0.0);
        }
        check_finite("softmax", &out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax { a }, rg))
    }

    /// Row-wise layer normalization with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "layer_norm")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} for {n} features",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        let (g, b) = (self.value(gain), self.value(bias));
        for (i, row) in self.value(x).chunks_exact(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| gelu(x)).collect();
        check_finite("gelu", &out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Gelu(a), rg))
    }

    /// Gathers rows of `table[V×d]`, producing `ids.len()×d`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix(table, "embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        let t = self.value(table);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("embedding id {id} >= table size {v}")));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `logits[N×V]` over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy: no scored targets".into()));
        }
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        for (i, row) in self.value(logits).chunks_exact(v).enumerate() {
            let Some(t) = targets[i] else { continue };
            if t >= v {
                return Err(Error::Index(format!("class index {t} >= {v} classes")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / count as f64;
        check_finite("cross_entropy", &[loss])?;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Copies the sub-block `rows.0..rows.1 × cols.0..cols.1` of a matrix.
    pub fn slice(&mut self, a: Var, rows: (usize, usize), cols: (usize, usize)) -> Result<Var> {
        let (m, n) = self.matrix(a, "slice")?;
        if rows.0 > rows.1 || rows.1 > m || cols.0 > cols.1 || cols.1 > n {
            return Err(Error::Index(format!(
                "slice {rows:?}×{cols:?} out of {m}×{n}"
            )));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity((rows.1 - rows.0) * (cols.1 - cols.0));
        for r in rows.0..rows.1 {
            out.extend_from_slice(&src[r * n + cols.0..r * n + cols.1]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            vec![rows.1 - rows.0, cols.1 - cols.0],
            out,
            Op::Slice { a, rows, cols },
            rg,
        ))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols: no inputs".into()))?;
        let (m, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_cols")?;
            if r != m {
                return Err(Error::Shape(format!("concat_cols: {r} rows vs {m}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows: no inputs".into()))?;
        let (_, n) = self.matrix(first, "concat_rows")?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_rows")?;
            if c != n {
                return Err(Error::Shape(format!("concat_rows: {c} columns vs {n}")));
            }
            m += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Populates gradients of every `requires_grad` node reachable from `loss`.
    ///
    /// Gradients from a previous call on the same tape are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 || !self.node(loss).shape.is_empty() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &upstream)?;
            self.nodes[idx].grad = Some(upstream);
        }
        Ok(())
    }

    fn grad_slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(node.grad.get_or_insert_with(|| vec![0.0; len]))
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if let Some(g) = self.grad_slot(v) {
            g.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
        }
    }

    fn propagate(&mut self, idx: usize, dy: &[f64]) -> Result<()> {
        // Temporarily take the op so cached buffers can be read while
        // gradients of earlier nodes are written.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let res = self.propagate_op(idx, &op, dy);
        self.nodes[idx].op = op;
        res
    }

    fn propagate_op(&mut self, idx: usize, op: &Op, dy: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_trans } => {
                let (m, k) = rows_cols(self.shape(*a));
                let n = self.nodes[idx].shape[1];
                if self.requires_grad(*a) {
                    // da = dy · op(b)ᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy, false, self.value(*b), !b_trans, &mut da, false);
                    self.accumulate(*a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    if *b_trans {
                        // b is n×k: db = dyᵀ · a
                        gemm(n, m, k, dy, true, self.value(*a), false, &mut db, false);
                    } else {
                        gemm(k, m, n, self.value(*a), true, dy, false, &mut db, false);
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, dy);
                self.accumulate(*b, dy);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let d: Vec<f64> = dy.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    self.accumulate(*a, &d);
                }
                if self.requires_grad(*b) {
                    let d: Vec<f64> = dy.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    self.accumulate(*b, &d);
                }
            }
            Op::AddBias { a, bias } => {
                self.accumulate(*a, dy);
                if self.requires_grad(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![0.0; n];
                    for row in dy.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Scale(a, f) => {
                let d: Vec<f64> = dy.iter().map(|g| g * f).collect();
                self.accumulate(*a, &d);
            }
            Op::Sum(a) => {
                let d = vec![dy[0]; self.value(*a).len()];
                self.accumulate(*a, &d);
            }
            Op::Softmax { a } => {
                if self.requires_grad(*a) {
                    let (_, n) = rows_cols(self.shape(*a));
                    let y = &self.nodes[idx].value;
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y
                        .chunks_exact(n)
                        .zip(dy.chunks_exact(n))
                        .zip(dx.chunks_exact_mut(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(*a, &dx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.shape(*gain)[0];
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; n];
                    for (gr, hr) in dy.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    self.accumulate(*gain, &dg);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in dy.chunks_exact(n) {
                        db.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                    self.accumulate(*bias, &db);
                }
                if self.requires_grad(*x) {
                    let g = self.value(*gain).to_vec();
                    let mut dx = vec![0.0; dy.len()];
                    let nf = n as f64;
                    for (i, ((gr, hr), dr)) in dy
                        .chunks_exact(n)
                        .zip(xhat.chunks_exact(n))
                        .zip(dx.chunks_exact_mut(n))
                        .enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * g[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..n {
                            let dh = gr[j] * g[j];
                            dr[j] = rstd[i] * (dh - s1 / nf - hr[j] * s2 / nf);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = dy
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                self.accumulate(*a, &d);
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(g) = self.grad_slot(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += dy[r * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let scale = dy[0] / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for j in 0..v {
                        d[i * v + j] = probs[i * v + j] * scale;
                    }
                    d[i * v + t] -= scale;
                }
                self.accumulate(*logits, &d);
            }
            Op::Slice { a, rows, cols } => {
                let n = self.shape(*a)[1];
                let w = cols.1 - cols.0;
                if let Some(g) = self.grad_slot(*a) {
                    for (i, r) in (rows.0..rows.1).enumerate() {
                        for j in 0..w {
                            g[r * n + cols.0 + j] += dy[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[idx].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let (m, w) = rows_cols(self.shape(p));
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&dy[r * n + offset..r * n + offset + w]);
                        }
                        self.accumulate(p, &d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(p, &dy[offset..offset + len]);
                    offset += len;
                }
            }
        }
        Ok(())
    }
}
