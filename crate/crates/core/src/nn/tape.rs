//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward pass. `backward` walks the tape in reverse and
//! accumulates vector-Jacobian products into per-node gradient slots. Nodes
//! built only from constants are skipped.

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, softmax_in_place};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row range `[start, start + len)` belonging to one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    Transpose(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` if the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input treated as a constant by `backward`.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {}x{} by {}x{}", m, k, k2, n)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_t {}x{} by ({}x{})T",
                m, k, n, k2
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::Shape(format!(
                "add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        if self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "bias of {} for rows of {}",
                self.value(bias).len(),
                n
            )));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bi) in row.iter_mut().zip(&b) {
                *o += bi;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::Shape(format!(
                "mul {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        for (o, bi) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= bi;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Multiplies every entry of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape("mul_scalar needs a 1-element scale".into()));
        }
        let c = self.value(s).item();
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| {
            let t = (GELU_C * (*x + 0.044715 * *x * *x * *x)).tanh();
            *x = 0.5 * *x * (1.0 + t);
        });
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::Shape(format!("layer norm width {}", n)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention restricted to each
    /// segment. `q`, `k`, `v` are `N×D` with heads laid out as contiguous
    /// column blocks of width `D / heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.dims(q);
        if self.dims(k) != (n, d) || self.dims(v) != (n, d) {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{} heads for width {}", heads, d)));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if covered != n || segments.iter().any(|s| s.start + s.len > n) {
            return Err(Error::Shape("attention segments do not tile rows".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; n * d];
        let mut probs =
            Vec::with_capacity(segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads);
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let qh = head_block(qd, seg, d, h, dh);
                let kh = head_block(kd, seg, d, h, dh);
                let vh = head_block(vd, seg, d, h, dh);
                let mut p = vec![0.0; l * l];
                gemm_nt(&qh, &kh, l, dh, l, &mut p);
                for row in p.chunks_mut(l) {
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_in_place(row);
                }
                let mut oh = vec![0.0; l * dh];
                gemm_nn(&p, &vh, l, l, dh, &mut oh);
                for i in 0..l {
                    let dst = (seg.start + i) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
                }
                probs.extend_from_slice(&p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::matrix(n, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Shape(format!("row {} out of {}", bad, m)));
        }
        let s = self.value(src);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(s.row(i));
        }
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::matrix(idx.len(), n, out)?,
            Op::GatherRows(src, idx.to_vec()),
            rg,
        ))
    }

    /// Scales every row to unit L2 norm. A zero row is an error.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = out.row_mut(i);
            let norm = dot(row, row).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "row {} of a {}x{} matrix has norm {}",
                    i, m, n, norm
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::RowNormalize { x, norms }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Row-wise softmax cross-entropy. Returns one loss per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, c) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::Shape(format!(
                "{} targets for {} rows",
                targets.len(),
                m
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "target class {} out of range for {} classes",
                bad, c
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut losses = Vec::with_capacity(m);
        for (i, row) in probs.chunks_mut(c.max(1)).enumerate().take(m) {
            let target_logit = row[targets[i]];
            let lse = softmax_in_place(row);
            losses.push(lse - target_logit);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::vector(losses),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ wᵢ aᵢ` as a 1-element tensor.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(a).len() {
            return Err(Error::Shape(format!(
                "{} weights for {} values",
                weights.len(),
                self.value(a).len()
            )));
        }
        let s = dot(self.value(a).data(), &weights);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, weights), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.weighted_sum(a, vec![1.0; n]).expect("length matches")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.weighted_sum(a, vec![1.0 / n as f64; n])
            .expect("length matches")
    }

    /// Reverse pass from a 1-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(gd, self.value(*b).data(), m, n, k, &mut da);
                    self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.value(*a).data(), gd, m, k, n, &mut db);
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims(*a);
                let (n, _) = self.dims(*b);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(gd, self.value(*b).data(), m, n, k, &mut da);
                    self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(gd, self.value(*a).data(), m, n, k, &mut db);
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone().reshape(self.shape(*a).to_vec())?);
                self.accumulate(grads, *b, g.clone().reshape(self.shape(*b).to_vec())?);
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(self.shape(*bias).to_vec(), db)?);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d: Vec<f64> = gd
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), d)?);
                }
                if self.rg(*b) {
                    let d: Vec<f64> = gd
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), d)?);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = gd.iter().map(|g| g * c).collect();
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), d)?);
            }
            Op::MulScalar(a, s) => {
                let c = self.value(*s).item();
                if self.rg(*a) {
                    let d: Vec<f64> = gd.iter().map(|g| g * c).collect();
                    self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), d)?);
                }
                if self.rg(*s) {
                    let ds = dot(gd, self.value(*a).data());
                    self.accumulate(grads, *s, Tensor::new(self.shape(*s).to_vec(), vec![ds])?);
                }
            }
            Op::Exp(a) => {
                let d: Vec<f64> = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), d)?);
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| {
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), d)?);
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x);
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gd[i * n + j] * xhat[i * n + j];
                            db[j] += gd[i * n + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(self.shape(*gamma).to_vec(), dg)?);
                    self.accumulate(grads, *beta, Tensor::new(self.shape(*beta).to_vec(), db)?);
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * n];
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let xh = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gd[i * n + j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxhat, xh) / n as f64;
                        for j in 0..n {
                            dx[i * n + j] = rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (n, d) = self.dims(*q);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut offset = 0;
                for seg in segments {
                    let l = seg.len;
                    for h in 0..*heads {
                        let p = &probs[offset..offset + l * l];
                        offset += l * l;
                        let qh = head_block(qd, seg, d, h, dh);
                        let kh = head_block(kd, seg, d, h, dh);
                        let vh = head_block(vd, seg, d, h, dh);
                        let go = head_block(gd, seg, d, h, dh);

                        let mut dvh = vec![0.0; l * dh];
                        gemm_tn(p, &go, l, l, dh, &mut dvh);
                        let mut dp = vec![0.0; l * l];
                        gemm_nt(&go, &vh, l, dh, l, &mut dp);
                        for i in 0..l {
                            let prow = &p[i * l..(i + 1) * l];
                            let drow = &mut dp[i * l..(i + 1) * l];
                            let inner = dot(prow, drow);
                            for j in 0..l {
                                drow[j] = prow[j] * (drow[j] - inner) * scale;
                            }
                        }
                        let mut dqh = vec![0.0; l * dh];
                        gemm_nn(&dp, &kh, l, l, dh, &mut dqh);
                        let mut dkh = vec![0.0; l * dh];
                        gemm_tn(&dp, &qh, l, l, dh, &mut dkh);
                        scatter_head_block(&mut dq, &dqh, seg, d, h, dh);
                        scatter_head_block(&mut dk, &dkh, seg, d, h, dh);
                        scatter_head_block(&mut dv, &dvh, seg, d, h, dh);
                    }
                }
                self.accumulate(grads, *q, Tensor::matrix(n, d, dq)?);
                self.accumulate(grads, *k, Tensor::matrix(n, d, dk)?);
                self.accumulate(grads, *v, Tensor::matrix(n, d, dv)?);
            }
            Op::GatherRows(src, idx) => {
                let (m, n) = self.dims(*src);
                let mut d = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    axpy(1.0, &gd[r * n..(r + 1) * n], &mut d[i * n..(i + 1) * n]);
                }
                self.accumulate(grads, *src, Tensor::new(self.shape(*src).to_vec(), d)?);
            }
            Op::RowNormalize { x, norms } => {
                let (m, n) = self.dims(*x);
                let y = node.value.data();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    let proj = dot(yr, gr);
                    for j in 0..n {
                        d[i * n + j] = (gr[j] - yr[j] * proj) / norms[i];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), d)?);
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose().reshape(self.shape(*a).to_vec())?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, c) = self.dims(*logits);
                let mut d = probs.clone();
                for i in 0..m {
                    let row = &mut d[i * c..(i + 1) * c];
                    row[targets[i]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gd[i]);
                }
                self.accumulate(
                    grads,
                    *logits,
                    Tensor::new(self.shape(*logits).to_vec(), d)?,
                );
            }
            Op::WeightedSum(a, w) => {
                let s = gd[0];
                let d: Vec<f64> = w.iter().map(|wi| wi * s).collect();
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn head_block(data: &[f64], seg: &Segment, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(seg.len * dh);
    for i in 0..seg.len {
        let src = (seg.start + i) * d + h * dh;
        out.extend_from_slice(&data[src..src + dh]);
    }
    out
}

fn scatter_head_block(
    dst: &mut [f64],
    block: &[f64],
    seg: &Segment,
    d: usize,
    h: usize,
    dh: usize,
) {
    for i in 0..seg.len {
        let o = (seg.start + i) * d + h * dh;
        dst[o..o + dh].copy_from_slice(&block[i * dh..(i + 1) * dh]);
    }
}
