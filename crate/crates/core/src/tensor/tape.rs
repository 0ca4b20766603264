use super::kernels::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Gelu { x: Var, tanh: Vec<f64> },
    Attention { qkv: Var, batch: usize, heads: usize, probs: Vec<f64> },
    Map { x: Var, df: fn(f64) -> f64 },
    Softmax { x: Var, outer: usize, dim: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    GatherRows { x: Var, index: Vec<usize> },
    ScatterRows { x: Var, index: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<f64> },
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
///
/// Nodes are appended in evaluation order, which is already a topological order,
/// so the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Copies columns `col..col+width` of rows `row..row+len` into `dst`.
fn head_block(src: &[f64], row: usize, len: usize, stride: usize, col: usize, width: usize, dst: &mut [f64]) {
    for r in 0..len {
        let at = (row + r) * stride + col;
        dst[r * width..(r + 1) * width].copy_from_slice(&src[at..at + width]);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    /// Registers a tensor that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a tensor that is treated as fixed.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|e| Error::Shape(format!("{op}: {e}")))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e * s).collect()).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// `x[m,n] + bias[n]` added to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.value(bias).numel() != n {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            add_into(&mut out[r * n..(r + 1) * n], b);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddBias(x, bias), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let tanh: Vec<f64> = v.data().iter().map(|&z| (GELU_C * (z + GELU_A * z * z * z)).tanh()).collect();
        let data = v.data().iter().zip(&tanh).map(|(&z, &t)| 0.5 * z * (1.0 + t)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu { x, tanh }, rg)
    }

    /// Multi-head scaled dot-product attention over packed `[B·S, 3D]` rows.
    ///
    /// Rows `b·S..(b+1)·S` belong to sequence `b`. The columns hold Q, K and V
    /// side by side, each split into `heads` contiguous blocks. Output is `[B·S, D]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(qkv, "attention")?;
        if batch == 0 || heads == 0 || rows % batch != 0 || cols % (3 * heads) != 0 {
            return Err(Error::Shape(format!(
                "attention: [{rows}, {cols}] cannot be split into {batch} sequences with {heads} heads"
            )));
        }
        let (seq, d) = (rows / batch, cols / 3);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let (mut q, mut k, mut v) = (vec![0.0; seq * dh], vec![0.0; seq * dh], vec![0.0; seq * dh]);
        let mut o = vec![0.0; seq * dh];
        for b in 0..batch {
            for h in 0..heads {
                head_block(src, b * seq, seq, cols, h * dh, dh, &mut q);
                head_block(src, b * seq, seq, cols, d + h * dh, dh, &mut k);
                head_block(src, b * seq, seq, cols, 2 * d + h * dh, dh, &mut v);
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                matmul_nt_acc(&q, &k, p, seq, seq, dh);
                for row in p.chunks_mut(seq) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x * scale - max).exp();
                        sum += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= sum);
                }
                o.iter_mut().for_each(|x| *x = 0.0);
                matmul_acc(p, &v, &mut o, seq, seq, dh);
                for (r, orow) in o.chunks(dh).enumerate() {
                    let at = (b * seq + r) * d + h * dh;
                    out[at..at + dh].copy_from_slice(orow);
                }
            }
        }
        let rg = self.rg(&[qkv]);
        Ok(self.push(Tensor::new(vec![rows, d], out)?, Op::Attention { qkv, batch, heads, probs }, rg))
    }

    /// Elementwise map with a caller-supplied derivative.
    ///
    /// The tape trusts `df`; a wrong derivative yields a wrong gradient, which is
    /// what the gradient checker's negative controls rely on.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&z| f(z)).collect()).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Map { x, df }, rg)
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("softmax axis {axis} out of range for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| o * dim * inner + d * inner + i;
                let max = (0..dim).map(|d| src[at(d)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for d in 0..dim {
                    let e = (src[at(d)] - max).exp();
                    out[at(d)] = e;
                    sum += e;
                }
                for d in 0..dim {
                    out[at(d)] /= sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, dim, inner }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = self.value(x).numel() / n.max(1);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), rg))
    }

    /// `out[i] = x[index[i]]`. Indices may repeat; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::Shape(format!("gather_rows: index {bad} out of range for {m} rows")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![index.len(), n], out)?, Op::GatherRows { x, index: index.to_vec() }, rg))
    }

    /// `out[index[i]] += x[i]` into a zero matrix with `rows` rows; the inverse of
    /// [`Tape::gather_rows`] when `index` is a permutation.
    pub fn scatter_rows(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "scatter_rows")?;
        if index.len() != m {
            return Err(Error::Shape(format!("scatter_rows: {} indices for {m} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("scatter_rows: index {bad} out of range for {rows} rows")));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * n];
        for (i, &dst) in index.iter().enumerate() {
            add_into(&mut out[dst * n..(dst + 1) * n], &src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ScatterRows { x, index: index.to_vec() }, rg))
    }

    /// Contiguous row range `[start, start+len)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let index: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &index)
    }

    /// Contiguous column range `[start, start+len)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::Shape(format!("slice_cols: [{start}, {}) exceeds {n} columns", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean over rows of the soft-target cross-entropy `-Σ_c t_c log softmax(z)_c`.
    ///
    /// `targets` has the logits' shape; hard labels are one-hot rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (m, c) = self.dims2(logits, "cross_entropy")?;
        if targets.shape() != [m, c] {
            return Err(shape_err("cross_entropy", self.shape(logits), targets.shape()));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for r in 0..m {
            let row = &z[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                let logp = row[j] - lse;
                probs[r * c + j] = logp.exp();
                let t = targets.data()[r * c + j];
                if t != 0.0 {
                    loss -= t * logp;
                }
            }
        }
        loss /= m as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, probs, targets: targets.data().to_vec() },
            rg,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err("mse", self.shape(pred), self.shape(target)));
        }
        let a = self.value(pred).data();
        let b = self.value(target).data();
        let n = a.len().max(1) as f64;
        let s = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are reset first, so repeated calls produce identical results.
    /// Every node that requires a gradient ends up with one, zero-filled when the
    /// loss does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            backprop_node(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    {
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().expect("2-D");
                let n = nodes[b.0].value.shape()[1];
                if nodes[a.0].requires_grad {
                    let bv = nodes[b.0].value.data();
                    let ga = acc(nodes, grads, *a).expect("requires grad");
                    matmul_nt_acc(g, bv, ga, m, k, n);
                }
                if nodes[b.0].requires_grad {
                    let av = nodes[a.0].value.data();
                    let gb = acc(nodes, grads, *b).expect("requires grad");
                    matmul_tn_acc(av, g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (d, v) in gx.iter_mut().zip(g) {
                        *d += v * s;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                let n = nodes[bias.0].value.numel();
                if let Some(gx) = acc(nodes, grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = acc(nodes, grads, *bias) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (((d, s), &z), &t) in gx.iter_mut().zip(g).zip(xv).zip(tanh) {
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * z * z);
                        *d += s * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du);
                    }
                }
            }
            Op::Attention { qkv, batch, heads, probs } => {
                let Some(gqkv) = acc(nodes, grads, *qkv) else { return };
                let src = nodes[qkv.0].value.data();
                let (rows, cols) = nodes[qkv.0].value.dims2().expect("2-D");
                let (seq, d) = (rows / batch, cols / 3);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let buf = || vec![0.0; seq * dh];
                let (mut q, mut k, mut v, mut go) = (buf(), buf(), buf(), buf());
                let (mut dq, mut dk, mut dv) = (buf(), buf(), buf());
                let mut ds = vec![0.0; seq * seq];
                for b in 0..*batch {
                    for h in 0..*heads {
                        head_block(src, b * seq, seq, cols, h * dh, dh, &mut q);
                        head_block(src, b * seq, seq, cols, d + h * dh, dh, &mut k);
                        head_block(src, b * seq, seq, cols, 2 * d + h * dh, dh, &mut v);
                        head_block(g, b * seq, seq, d, h * dh, dh, &mut go);
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        for buf in [&mut dq, &mut dk, &mut dv] {
                            buf.iter_mut().for_each(|x| *x = 0.0);
                        }
                        ds.iter_mut().for_each(|x| *x = 0.0);
                        matmul_nt_acc(&go, &v, &mut ds, seq, seq, dh);
                        matmul_tn_acc(p, &go, &mut dv, seq, seq, dh);
                        for (drow, prow) in ds.chunks_mut(seq).zip(p.chunks(seq)) {
                            let s = dot(drow, prow);
                            for (x, &pj) in drow.iter_mut().zip(prow) {
                                *x = pj * (*x - s) * scale;
                            }
                        }
                        matmul_acc(&ds, &k, &mut dq, seq, seq, dh);
                        matmul_tn_acc(&ds, &q, &mut dk, seq, seq, dh);
                        for r in 0..seq {
                            let at = (b * seq + r) * cols + h * dh;
                            let part = r * dh..(r + 1) * dh;
                            add_into(&mut gqkv[at..at + dh], &dq[part.clone()]);
                            add_into(&mut gqkv[at + d..at + d + dh], &dk[part.clone()]);
                            add_into(&mut gqkv[at + 2 * d..at + 2 * d + dh], &dv[part]);
                        }
                    }
                }
            }
            Op::Map { x, df } => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((d, s), &z) in gx.iter_mut().zip(g).zip(xv) {
                        *d += s * df(z);
                    }
                }
            }
            Op::Softmax { x, outer, dim, inner } => {
                let (outer, dim, inner) = (*outer, *dim, *inner);
                let y = nodes[i].value.data();
                if let Some(gx) = acc(nodes, grads, *x) {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |d: usize| o * dim * inner + d * inner + k;
                            let s: f64 = (0..dim).map(|d| g[at(d)] * y[at(d)]).sum();
                            for d in 0..dim {
                                gx[at(d)] += y[at(d)] * (g[at(d)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = nodes[gamma.0].value.numel();
                let gam = nodes[gamma.0].value.data();
                if let Some(gg) = acc(nodes, grads, *gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *beta) {
                    for grow in g.chunks(n) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dot(&dh, hrow) / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = nodes[x.0].value.dims2().expect("2-D");
                if let Some(gx) = acc(nodes, grads, *x) {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let n = nodes[i].value.shape()[1];
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (k, &src) in index.iter().enumerate() {
                        add_into(&mut gx[src * n..(src + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                }
            }
            Op::ScatterRows { x, index } => {
                let n = nodes[i].value.shape()[1];
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (k, &dst) in index.iter().enumerate() {
                        add_into(&mut gx[k * n..(k + 1) * n], &g[dst * n..(dst + 1) * n]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, len) = nodes[i].value.dims2().expect("2-D");
                let n = nodes[x.0].value.shape()[1];
                if let Some(gx) = acc(nodes, grads, *x) {
                    for r in 0..m {
                        add_into(&mut gx[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = nodes[i].value.dims2().expect("2-D");
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    if let Some(gp) = acc(nodes, grads, *p) {
                        for r in 0..m {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    if let Some(gp) = acc(nodes, grads, *p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::CrossEntropy { logits, probs, targets } => {
                let (m, c) = nodes[logits.0].value.dims2().expect("2-D");
                if let Some(gl) = acc(nodes, grads, *logits) {
                    let s = g[0] / m as f64;
                    for r in 0..m {
                        let tsum: f64 = targets[r * c..(r + 1) * c].iter().sum();
                        for j in 0..c {
                            gl[r * c + j] += s * (probs[r * c + j] * tsum - targets[r * c + j]);
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let s = 2.0 * g[0] / av.len().max(1) as f64;
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((d, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *d += s * (x - y);
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for ((d, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *d -= s * (x - y);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let id = tape.constant(Tensor::identity(4));
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let out = tape.matmul(av, id).unwrap();
        assert_eq!(tape.value(out), &a);
        let zero = tape.matmul(z, av).unwrap();
        assert!(tape.value(zero).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);

        let x = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-15);
        assert!(d[1] < 1e-300);
    }

    #[test]
    fn softmax_middle_axis_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 1.7).sin() * 3.0));
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.value(y).data();
        for o in 0..2 {
            for k in 0..4 {
                let s: f64 = (0..3).map(|j| d[o * 12 + j * 4 + k]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(tape.softmax(x, 3).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let g1 = tape.constant(Tensor::ones(&[3]));
        let b0 = tape.constant(Tensor::zeros(&[3]));
        let c = tape.constant(Tensor::full(&[1, 3], 4.2));
        let y = tape.layer_norm(c, g1, b0, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.layer_norm(x, g1, b0, 1e-12).unwrap();
        let d = tape.value(y).data();
        let mean = d.iter().sum::<f64>() / 3.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        // direct formula: (x - 2) / sqrt(2/3)
        let s = (2.0f64 / 3.0).sqrt();
        for (v, e) in d.iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
            assert!((v - e).abs() < 1e-9);
        }

        let g0 = tape.constant(Tensor::zeros(&[3]));
        let b5 = tape.constant(Tensor::full(&[3], 5.0));
        let y = tape.layer_norm(x, g0, b5, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0; 3]);
        assert!(tape.layer_norm(x, g0, b5, 0.0).is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 3]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap());
        let xt = tape.transpose(x).unwrap();
        let q = tape.matmul(xt, x).unwrap();
        let l = tape.sum(q);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(Tape::new().backward(x), Err(Error::Contract(_))));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.4));
        let w = tape.leaf(Tensor::from_fn(&[3, 2], |i| (i as f64).cos()));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h);
        let l = tape.mean(h);
        tape.backward(l).unwrap();
        let first = (tape.grad(x).unwrap(), tape.grad(w).unwrap());
        tape.backward(l).unwrap();
        assert_eq!(first, (tape.grad(x).unwrap(), tape.grad(w).unwrap()));
    }

    #[test]
    fn unreached_leaf_gets_zero_grad_and_constants_none() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let unused = tape.leaf(Tensor::ones(&[3]));
        let c = tape.constant(Tensor::ones(&[2]));
        let y = tape.mul(x, c).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0; 3]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn gather_then_scatter_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[4, 2], |i| i as f64));
        let perm = [2, 0, 3, 1];
        let g = tape.gather_rows(x, &perm).unwrap();
        let back = tape.scatter_rows(g, &perm, 4).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn cross_entropy_matches_formula() {
        let mut tape = Tape::new();
        let z = tape.leaf(t2(&[&[2.0, 0.0], &[0.0, 1.0]]));
        let targets = t2(&[&[1.0, 0.0], &[0.3, 0.7]]);
        let l = tape.cross_entropy(z, &targets).unwrap();
        let lse0 = (2f64.exp() + 1.0).ln();
        let lse1 = (1.0 + 1f64.exp()).ln();
        let expected = ((lse0 - 2.0) + 0.3 * lse1 + 0.7 * (lse1 - 1.0)) / 2.0;
        assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-12);
    }
    /// Attention composed from slices, matmuls and softmax.
    fn attention_composed(tape: &mut Tape, qkv: Var, batch: usize, heads: usize) -> Var {
        let (rows, cols) = tape.value(qkv).dims2().unwrap();
        let (seq, d) = (rows / batch, cols / 3);
        let dh = d / heads;
        let mut per_seq = Vec::new();
        for b in 0..batch {
            let r = tape.slice_rows(qkv, b * seq, seq).unwrap();
            let mut outs = Vec::new();
            for h in 0..heads {
                let q = tape.slice_cols(r, h * dh, dh).unwrap();
                let k = tape.slice_cols(r, d + h * dh, dh).unwrap();
                let v = tape.slice_cols(r, 2 * d + h * dh, dh).unwrap();
                let kt = tape.transpose(k).unwrap();
                let sc = tape.matmul(q, kt).unwrap();
                let sc = tape.scale(sc, 1.0 / (dh as f64).sqrt());
                let p = tape.softmax(sc, 1).unwrap();
                outs.push(tape.matmul(p, v).unwrap());
            }
            per_seq.push(tape.concat_cols(&outs).unwrap());
        }
        tape.concat_rows(&per_seq).unwrap()
    }

    #[test]
    fn fused_attention_matches_composition() {
        let (batch, heads, seq, d) = (3, 2, 5, 6);
        let x = Tensor::from_fn(&[batch * seq, 3 * d], |i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * 1.5);
        let w = Tensor::from_fn(&[batch * seq, d], |i| ((i * 13 % 29) as f64 - 14.0) / 7.0);
        let run = |fused: bool| {
            let mut tape = Tape::new();
            let qkv = tape.leaf(x.clone());
            let out = if fused { tape.attention(qkv, batch, heads).unwrap() } else { attention_composed(&mut tape, qkv, batch, heads) };
            let wv = tape.constant(w.clone());
            let prod = tape.mul(out, wv).unwrap();
            let loss = tape.sum(prod);
            tape.backward(loss).unwrap();
            (tape.value(out).clone(), tape.grad(qkv).unwrap())
        };
        let (fo, fg) = run(true);
        let (co, cg) = run(false);
        assert!(fo.max_abs_diff(&co) < 1e-12);
        assert!(fg.max_abs_diff(&cg) < 1e-12);
    }

    #[test]
    fn attention_rejects_bad_split() {
        let mut tape = Tape::new();
        let qkv = tape.leaf(Tensor::zeros(&[10, 9]));
        assert!(tape.attention(qkv, 3, 1).is_err());
        assert!(tape.attention(qkv, 2, 2).is_err());
    }
}
