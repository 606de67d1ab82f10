//! Append-only tape. Nodes only reference earlier nodes, so insertion order is a
//! topological order and the backward pass is a single reverse sweep.

use crate::element::{gemm, Element};
use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{conv2d_backward, conv2d_forward, max_pool_forward, ConvGeom, PoolGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Scale(Var, T),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ColSlice {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RowSlice {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Option<Vec<T>>,
        probs: Vec<T>,
        scale: T,
    },
    Sum(Var),
}

impl<T: Element> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Sum(x) => vec![*x],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::MaxPool { x, .. } | Op::ColSlice { x, .. } | Op::RowSlice { x, .. } => vec![*x],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

fn two_d(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(dim_err(op, format!("expected a rank-2 tensor, got {:?}", shape))),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Inserts a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Affine map over the last axis: `x[.., d_in] · w[d_in, d_out] + b[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let vx = self.value(x);
        let (din, dout) = two_d("linear", self.shape(w))?;
        if vx.rank() == 0 || vx.last_dim() != din {
            return Err(dim_err(
                "linear",
                format!("input {:?} does not end in {}", vx.shape(), din),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(dim_err(
                    "linear",
                    format!("bias {:?} should be [{}]", self.shape(b), dout),
                ));
            }
        }
        let rows = vx.rows();
        let mut data = vec![T::zero(); rows * dout];
        gemm(rows, din, dout, vx.data(), false, self.value(w).data(), false, &mut data, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in data.chunks_mut(dout) {
                row.iter_mut().zip(bias).for_each(|(v, bb)| *v = *v + *bb);
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = two_d("matmul", self.shape(a))?;
        let (k2, n) = two_d("matmul", self.shape(b))?;
        if k != k2 {
            return Err(dim_err("matmul", format!("inner extents {} vs {}", k, k2)));
        }
        let mut data = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut data, false);
        let out = Tensor::new([m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = two_d("transpose", self.shape(x))?;
        let out = Tensor::new([c, r], transpose_data(self.value(x).data(), r, c))?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())
            .map_err(|_| dim_err("reshape", format!("{:?} -> {:?}", v.shape(), shape)))?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64_lossy(GELU_C);
        let a = T::from_f64_lossy(GELU_A);
        let half = T::from_f64_lossy(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    /// Softmax over the last axis, shifted by the row max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() == 0 || v.last_dim() == 0 {
            return Err(dim_err("softmax", "needs at least one class"));
        }
        let out = Tensor::new(v.shape().to_vec(), softmax_rows(v.data(), v.last_dim()))?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Argument("layer_norm eps must be > 0".into()));
        }
        let v = self.value(x);
        let d = v.last_dim();
        if v.rank() == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    v.shape(),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = v.rows();
        let mut xhat = Vec::with_capacity(v.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &a) in row.iter().enumerate() {
                let h = (a - mean) * r;
                xhat.push(h);
                data.push(g[j] * h + b[j]);
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// 2-D convolution over `[C,H,W]` or `[N,C,H,W]` with a `[C_out,C_in,k,k]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(dim_err(
                    "conv2d",
                    format!("bias {:?} should be [{}]", self.shape(b), geom.c_out),
                ));
            }
        }
        let data = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::new(geom.output_shape(), data)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }))
    }

    /// Max pooling over the trailing two axes. In `strict` mode, non-overlapping pooling
    /// (`window == stride`) requires both extents to divide evenly.
    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize, strict: bool) -> Result<Var> {
        let (geom, shape) = PoolGeom::new(self.shape(x), window, stride, strict)?;
        let (data, argmax) = max_pool_forward(self.value(x).data(), &geom);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = two_d("col_slice", self.shape(x))?;
        if start + len > c {
            return Err(dim_err("col_slice", format!("{}..{} of {} columns", start, start + len, c)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for row in src.chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new([r, len], data)?;
        Ok(self.push(out, Op::ColSlice { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err("concat_cols", "no inputs"));
        }
        let rows = two_d("concat_cols", self.shape(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = two_d("concat_cols", self.shape(p))?;
            if r != rows {
                return Err(dim_err("concat_cols", format!("row counts {} vs {}", rows, r)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &wdt) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * wdt..(i + 1) * wdt]);
            }
        }
        let out = Tensor::new([rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = two_d("row_slice", self.shape(x))?;
        if start + len > r {
            return Err(dim_err("row_slice", format!("{}..{} of {} rows", start, start + len, r)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new([len, c], data)?;
        Ok(self.push(out, Op::RowSlice { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err("concat_rows", "no inputs"));
        }
        let cols = two_d("concat_rows", self.shape(parts[0]))?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = two_d("concat_rows", self.shape(p))?;
            if c != cols {
                return Err(dim_err("concat_rows", format!("column counts {} vs {}", cols, c)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new([rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// `scale · Σ_i w[t_i] · (−log softmax(logits_i)[t_i])` over rows of `logits[.., C]`,
    /// with `scale = 1/rows` for [`Reduction::Mean`]. Missing weights act as all ones.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[T]>,
        reduction: Reduction,
    ) -> Result<Var> {
        let v = self.value(logits);
        let classes = v.last_dim();
        let rows = v.rows();
        if v.rank() == 0 || classes == 0 {
            return Err(dim_err("cross_entropy", "logits need a class axis"));
        }
        if targets.len() != rows {
            return Err(dim_err(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), rows),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::Label {
                label: bad,
                classes,
            });
        }
        if let Some(w) = weights {
            if w.len() != classes {
                return Err(dim_err(
                    "cross_entropy",
                    format!("{} weights for {} classes", w.len(), classes),
                ));
            }
        }
        let probs = softmax_rows(v.data(), classes);
        let mut total = T::zero();
        for (i, row) in v.data().chunks(classes).enumerate() {
            let t = targets[i];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
            let w = weights.map_or(T::one(), |w| w[t]);
            total = total + w * (lse - row[t]);
        }
        let scale = match reduction {
            Reduction::Mean => T::one() / T::from_usize(rows).unwrap(),
            Reduction::Sum => T::one(),
        };
        let out = Tensor::scalar(total * scale);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.map(|w| w.to_vec()),
                probs,
                scale,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited at most once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root = &self.nodes[loss.0].value;
        grads[loss.0] = Some(Tensor::new(root.shape().to_vec(), vec![T::one()])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(delta)
                .for_each(|(a, b)| *a = *a + b),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient matches value shape"));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, gd.iter().map(|&v| v * *s).collect());
            }
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let (din, dout) = two_d("linear", self.shape(*w))?;
                let rows = vx.rows();
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    gemm(rows, dout, din, gd, false, self.value(*w).data(), true, &mut dx, false);
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); din * dout];
                    gemm(din, rows, dout, vx.data(), true, gd, false, &mut dw, false);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.accumulate(grads, *b, column_sums(gd, dout));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = two_d("matmul", self.shape(*a))?;
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, gd, false, self.value(*b).data(), true, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, self.value(*a).data(), true, gd, false, &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = two_d("transpose", self.shape(*x))?;
                self.accumulate(grads, *x, transpose_data(gd, c, r));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                let dx = vx
                    .iter()
                    .zip(gd)
                    .map(|(&a, &d)| if a > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let c = T::from_f64_lossy(GELU_C);
                let a = T::from_f64_lossy(GELU_A);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &d)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let du = c * (T::one() + three * a * v * v);
                        d * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(d).zip(gd.chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yy, &gg)| yy * (gg - dot)));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data();
                let dn = T::from_usize(d).unwrap();
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(gd.len());
                    for (r, (gr, hr)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let gg: Vec<T> = gr.iter().zip(gam).map(|(a, b)| *a * *b).collect();
                        let mean_g = gg.iter().copied().sum::<T>() / dn;
                        let mean_gh = gg.iter().zip(hr).map(|(a, b)| *a * *b).sum::<T>() / dn;
                        dx.extend(
                            gg.iter()
                                .zip(hr)
                                .map(|(&a, &h)| rstd[r] * (a - mean_g - h * mean_gh)),
                        );
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    let prod: Vec<T> = gd.iter().zip(xhat).map(|(a, b)| *a * *b).collect();
                    self.accumulate(grads, *gamma, column_sums(&prod, d));
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, column_sums(gd, d));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.wants(*x).then(|| vec![T::zero(); self.value(*x).numel()]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); self.value(*w).numel()]);
                let mut db = b
                    .filter(|b| self.wants(*b))
                    .map(|_| vec![T::zero(); geom.c_out]);
                conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&idx, &d) in argmax.iter().zip(gd) {
                    dx[idx] = dx[idx] + d;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ColSlice { x, start } => {
                let (r, c) = two_d("col_slice", self.shape(*x))?;
                let len = node.value.last_dim();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            dp.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::RowSlice { x, start } => {
                let (r, c) = two_d("row_slice", self.shape(*x))?;
                let mut dx = vec![T::zero(); r * c];
                dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        self.accumulate(grads, p, gd[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                scale,
            } => {
                let classes = self.value(*logits).last_dim();
                let up = gd[0] * *scale;
                let mut dx = probs.clone();
                for (i, row) in dx.chunks_mut(classes).enumerate() {
                    let t = targets[i];
                    row[t] = row[t] - T::one();
                    let w = weights.as_ref().map_or(T::one(), |w| w[t]);
                    row.iter_mut().for_each(|v| *v = *v * w * up);
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_rows<T: Element>(data: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(d) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&z| (z - m).exp()));
        let s: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v = *v / s);
    }
    out
}

fn transpose_data<T: Element>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

fn column_sums<T: Element>(x: &[T], d: usize) -> Vec<T> {
    let mut s = vec![T::zero(); d];
    for row in x.chunks(d) {
        s.iter_mut().zip(row).for_each(|(a, b)| *a = *a + *b);
    }
    s
}

/// Row-wise softmax of a plain tensor over its last axis.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() == 0 || x.last_dim() == 0 {
        return Err(dim_err("softmax", "needs at least one class"));
    }
    Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), x.last_dim()))
}
