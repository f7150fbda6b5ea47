use super::{check_temperature, gemm, log_softmax_in_place, Result, Tensor, TensorError};

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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Patches { src: Var, patch: usize },
    PickRows(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Patches { .. } => "patches",
            Op::PickRows(..) => "pick_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in topological order for one forward/backward pass.
///
/// Nodes are appended only after all of their inputs, so replaying the
/// list backwards visits every operation once, after all its consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    first_non_finite: Option<usize>,
}

const GELU_C: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

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

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
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

    /// Gradient of the last `backward` loss with respect to `v`; `None` for
    /// values that do not depend on any trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Operation name and node index of the first non-finite value recorded.
    pub fn first_non_finite(&self) -> Option<(&'static str, usize)> {
        self.first_non_finite
            .map(|i| (self.nodes[i].op.name(), i))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((op, node)) => Err(TensorError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match *s {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Argument {
                op,
                msg: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, r: Var) -> Result<(usize, usize)> {
        let (m, n) = self.dims2(op, a)?;
        if self.shape(r) != [1, n] {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(r).to_vec(),
            });
        }
        Ok((m, n))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast("add_row", a, r)?;
        let row = self.value(r).data();
        let mut out = self.value(a).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += row[i % n];
        }
        let rg = self.rg(&[a, r]);
        Ok(self.push(out, Op::AddRow(a, r), rg))
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast("mul_row", a, r)?;
        let row = self.value(r).data();
        let mut out = self.value(a).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= row[i % n];
        }
        let rg = self.rg(&[a, r]);
        Ok(self.push(out, Op::MulRow(a, r), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mul_const(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        if self.shape(a) != mask.shape() {
            return Err(TensorError::Shape {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let x = self.value(a);
        let data = x.data().iter().zip(mask.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MulConst(a, mask.data().to_vec()), rg))
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (_, n) = self.dims2("layer_norm", a)?;
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::new();
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LayerNorm { x: a, inv_std }, rg))
    }

    /// Softmax of `a / temperature` along the last axis.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let out = self.value(a).softmax_lastdim(temperature)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a, temperature), rg))
    }

    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        check_temperature("log_softmax", temperature)?;
        let x = self.value(a);
        let n = x.shape()[x.rank() - 1];
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            log_softmax_in_place(row, temperature);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a, temperature), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Argument {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let (_, n) = self.dims2("concat_rows", first)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != n {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let out = Tensor::new(&[rows, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Argument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (m, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(&[m, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", a)?;
        if len == 0 || start + len > m {
            return Err(TensorError::Argument {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range for {m} rows", start + len),
            });
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(&[len, n], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", a)?;
        if len == 0 || start + len > n {
            return Err(TensorError::Argument {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of range for {n} cols", start + len),
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(&[m, len], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Row lookup: output row `i` is input row `indices[i]` (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_rows", a)?;
        if indices.is_empty() {
            return Err(TensorError::Argument {
                op: "gather_rows",
                msg: "no indices".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(TensorError::Argument {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {m} rows"),
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(&[indices.len(), n], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), rg))
    }

    /// Strided patch extraction from a `C×H×W` image: one row per
    /// non-overlapping `P×P` patch (row-major over the patch grid), columns
    /// laid out as `(channel, dy, dx)`.
    pub fn patches(&mut self, image: Var, patch: usize) -> Result<Var> {
        let out = extract_patches(self.value(image), patch)?;
        let rg = self.rg(&[image]);
        Ok(self.push(out, Op::Patches { src: image, patch }, rg))
    }

    /// Picks `a[i, indices[i]]` for every row, producing an `m×1` column.
    pub fn pick_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("pick_rows", a)?;
        if indices.len() != m {
            return Err(TensorError::Shape {
                op: "pick_rows",
                lhs: vec![m, n],
                rhs: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::Argument {
                op: "pick_rows",
                msg: format!("column {bad} out of range for {n} columns"),
            });
        }
        let src = self.value(a).data();
        let data = indices.iter().enumerate().map(|(r, &c)| src[r * n + c]).collect();
        let out = Tensor::new(&[m, 1], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::PickRows(a, indices.to_vec()), rg))
    }

    /// `x·w + b` with `b` a `1×n` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse pass from a scalar loss. Gradients of earlier passes are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape(), g).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = G · Bᵀ
                    gemm(m, n, k, g, false, self.value(*b).data(), true, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Aᵀ · G
                    gemm(k, m, n, self.value(*a).data(), true, g, false, gb, 1.0);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                if let Some(ga) = self.slot(grads, *a) {
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |j| g[j]);
                self.acc(grads, *b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |j| g[j]);
                self.acc(grads, *b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |j| g[j] * bv[j]);
                self.acc(grads, *b, |j| g[j] * av[j]);
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, |j| g[j]);
                if let Some(gr) = self.slot(grads, *r) {
                    let n = gr.len();
                    for (j, &v) in g.iter().enumerate() {
                        gr[j % n] += v;
                    }
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.value(*a).data(), self.value(*r).data());
                let n = rv.len();
                self.acc(grads, *a, |j| g[j] * rv[j % n]);
                if let Some(gr) = self.slot(grads, *r) {
                    for (j, &v) in g.iter().enumerate() {
                        gr[j % n] += v * av[j];
                    }
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, |j| g[j] * c),
            Op::MulConst(a, mask) => self.acc(grads, *a, |j| g[j] * mask[j]),
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                self.acc(grads, *a, |j| {
                    let x = xv[j];
                    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                    g[j] * d
                });
            }
            Op::LayerNorm { x, inv_std } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = out.shape()[1];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let y = &out.data()[r * n..(r + 1) * n];
                        let gy = &g[r * n..(r + 1) * n];
                        let mg = gy.iter().sum::<f64>() / n as f64;
                        let mgy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += is * (gy[j] - mg - y[j] * mgy);
                        }
                    }
                }
            }
            Op::Softmax(a, t) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let n = out.shape()[out.rank() - 1];
                    for (r, (y, gy)) in out.data().chunks(n).zip(g.chunks(n)).enumerate() {
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga[r * n + j] += y[j] * (gy[j] - dot) / t;
                        }
                    }
                }
            }
            Op::LogSoftmax(a, t) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let n = out.shape()[out.rank() - 1];
                    for (r, (y, gy)) in out.data().chunks(n).zip(g.chunks(n)).enumerate() {
                        let total: f64 = gy.iter().sum();
                        for j in 0..n {
                            ga[r * n + j] += (gy[j] - y[j].exp() * total) / t;
                        }
                    }
                }
            }
            Op::Sum(a) => self.acc(grads, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a, |_| g[0] / n);
            }
            Op::Reshape(a) => self.acc(grads, *a, |j| g[j]),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.acc(grads, *p, |j| g[offset + j]);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    self.acc(grads, *p, |j| g[(j / w) * total + offset + j % w]);
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let n = out.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (j, &v) in g.iter().enumerate() {
                        ga[start * n + j] += v;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let len = out.shape()[1];
                let n = self.value(*a).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (j, &v) in g.iter().enumerate() {
                        ga[(j / len) * n + start + j % len] += v;
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let n = out.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            ga[src * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::Patches { src, patch } => {
                let shape = self.value(*src).shape().to_vec();
                if let Some(gs) = self.slot(grads, *src) {
                    for_each_patch_entry(&shape, *patch, |out_idx, src_idx| {
                        gs[src_idx] += g[out_idx];
                    });
                }
            }
            Op::PickRows(a, idx) => {
                let n = self.value(*a).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &c) in idx.iter().enumerate() {
                        ga[r * n + c] += g[r];
                    }
                }
            }
        }
    }

    /// Gradient buffer for `v`, allocated on first use; `None` when `v` is frozen.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if let Some(buf) = self.slot(grads, v) {
            for (j, x) in buf.iter_mut().enumerate() {
                *x += f(j);
            }
        }
    }
}

fn for_each_patch_entry(shape: &[usize], p: usize, mut f: impl FnMut(usize, usize)) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (gh, gw) = (h / p, w / p);
    let cols = c * p * p;
    for py in 0..gh {
        for px in 0..gw {
            let row = py * gw + px;
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        let col = ch * p * p + dy * p + dx;
                        let src = ch * h * w + (py * p + dy) * w + px * p + dx;
                        f(row * cols + col, src);
                    }
                }
            }
        }
    }
}

/// Tape-free version of [`Tape::patches`].
pub(crate) fn extract_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(TensorError::Argument {
            op: "patches",
            msg: format!("expected a C×H×W image, got shape {shape:?}"),
        });
    }
    if patch == 0 || shape[1] % patch != 0 || shape[2] % patch != 0 {
        return Err(TensorError::Argument {
            op: "patches",
            msg: format!("image {}×{} is not divisible by patch size {patch}", shape[1], shape[2]),
        });
    }
    let tokens = (shape[1] / patch) * (shape[2] / patch);
    let cols = shape[0] * patch * patch;
    let mut data = vec![0.0; tokens * cols];
    let src = image.data();
    for_each_patch_entry(shape, patch, |o, s| data[o] = src[s]);
    Tensor::new(&[tokens, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn frozen_weight_gets_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let x = tape.leaf(Tensor::from_rows(&[&[1.0], &[-1.0]]));
        let y = tape.matmul(w, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn matmul_backward_rules() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        // dA = 1·Bᵀ, dB = Aᵀ·1
        assert_eq!(tape.grad(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn patches_layout() {
        // 1 channel 4×4 image, patch 2: top-right patch is the second row.
        let img = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let p = extract_patches(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert!(extract_patches(&img, 3).is_err());
    }

    #[test]
    fn non_finite_is_reported_with_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2], vec![1e300, 1e300]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let _ = tape.sum(y);
        let err = tape.check_finite().unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "mul", node: 1 });
    }

    #[test]
    fn forward_does_not_mutate_inputs() {
        let mut tape = Tape::new();
        let original = Tensor::from_fn(&[3, 3], |i| i as f64 - 4.0);
        let x = tape.leaf(original.clone());
        let g = tape.gelu(x);
        let n = tape.layer_norm(g, 1e-5).unwrap();
        let s = tape.softmax(n, 2.0).unwrap();
        let t = tape.sum(s);
        tape.backward(t).unwrap();
        assert_eq!(tape.value(x), &original);
    }
}
