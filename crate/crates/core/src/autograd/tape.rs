use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::norm::{group_norm_backward, group_norm_forward, NormLayout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        active: Vec<bool>,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    GlobalAvgPool(Var),
    Flatten(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } => vec![*a, *b],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(a) | Op::Scale(a, _) | Op::Sum(a) | Op::GlobalAvgPool(a) | Op::Flatten(a) => vec![*a],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Record of one forward pass. Nodes are appended in execution order, so
/// every node's inputs precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of `var`, or `None` when it is not a differentiable leaf.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(var.0).and_then(|g| g.as_ref())
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited_nodes(&self) -> usize {
        self.visited
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

    /// A differentiable input (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A non-differentiable input (data, labels, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Total number of elements held by non-leaf nodes, i.e. the activations
    /// a backward pass needs to keep alive.
    pub fn activation_elements(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.value.numel())
            .sum()
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let inputs = op.inputs();
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a, b }, value))
    }

    /// `x · wᵀ + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::Shape {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (batch, inp, out) = (sx[0], sx[1], sw[0]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut y = vec![0.0; batch * out];
        for r in 0..batch {
            let xr = &xd[r * inp..][..inp];
            for o in 0..out {
                let wr = &wd[o * inp..][..inp];
                y[r * out + o] = bd[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let value = Tensor::new(vec![batch, out], y)?;
        Ok(self.push(Op::Linear { x, w, b }, value))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        if self.shape(b) != [geom.out_channels] {
            return Err(Error::Shape {
                op: "conv2d bias",
                lhs: self.shape(b).to_vec(),
                rhs: vec![geom.out_channels],
            });
        }
        let out = conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let value = Tensor::new(geom.out_shape().to_vec(), out)?;
        Ok(self.push(Op::Conv2d { x, w, b, geom }, value))
    }

    /// Group normalization over `x: [B, C, ...]` using only channels flagged
    /// in `active` for the statistics. Inactive channels output zero.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        active: &[bool],
        eps: f64,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::Shape {
                op: "group_norm",
                lhs: sx,
                rhs: vec![],
            });
        }
        let channels = sx[1];
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::config(format!("{groups} groups do not divide {channels} channels")));
        }
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] || active.len() != channels {
            return Err(Error::Shape {
                op: "group_norm affine",
                lhs: self.shape(gamma).to_vec(),
                rhs: vec![channels],
            });
        }
        let layout = NormLayout {
            batch: sx[0],
            channels,
            spatial: sx[2..].iter().product(),
            groups,
        };
        let fwd = group_norm_forward(
            layout,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            active,
            eps,
        );
        let value = Tensor::new(sx, fwd.out)?;
        Ok(self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                layout,
                active: active.to_vec(),
                normalized: fwd.normalized,
                inv_std: fwd.inv_std,
            },
            value,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::from_fn(v.shape(), |i| v.data()[i].max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(va.shape(), |i| va.data()[i] + vb.data()[i]);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(va.shape(), |i| va.data()[i] * vb.data()[i]);
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a);
        let value = Tensor::from_fn(v.shape(), |i| v.data()[i] * factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), value)
    }

    /// `[B, C, ...] -> [B, C]`, averaging the trailing axes.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 3 {
            return Err(Error::Shape {
                op: "global_avg_pool",
                lhs: s,
                rhs: vec![],
            });
        }
        let spatial: usize = s[2..].iter().product();
        let d = self.value(a).data();
        let out: Vec<f64> = d
            .chunks(spatial)
            .map(|c| c.iter().sum::<f64>() / spatial as f64)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        Ok(self.push(Op::GlobalAvgPool(a), value))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let batch = v.shape()[0];
        let value = v.clone().reshape(vec![batch, v.numel() / batch]).expect("same element count");
        self.push(Op::Flatten(a), value)
    }

    /// Mean softmax cross-entropy over the batch, `logits: [B, K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for r in 0..batch {
            let row = &d[r * classes..][..classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            loss += lse - row[labels[r]];
            for (p, v) in probs[r * classes..][..classes].iter_mut().zip(row) {
                *p = (v - max).exp() / sum_exp;
            }
        }
        let value = Tensor::scalar(loss / batch as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage("loss is not recorded on this tape".into()))?;
        if !loss_node.value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = 0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            if let Op::Leaf = node.op {
                leaves[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        // Differentiable leaves the loss does not depend on get zero gradients.
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaves[idx].is_none() {
                leaves[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { leaves, visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let da = accum(grads, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for p in 0..k {
                                da[i * k + p] += gv * bd[p * n + j];
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    let db = accum(grads, *b, k * n);
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (batch, inp, out) = (sx[0], sx[1], sw[0]);
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                if self.wants(*x) {
                    let dx = accum(grads, *x, batch * inp);
                    for r in 0..batch {
                        for o in 0..out {
                            let gv = g[r * out + o];
                            for (d, wv) in dx[r * inp..][..inp].iter_mut().zip(&wd[o * inp..][..inp]) {
                                *d += gv * wv;
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    let dw = accum(grads, *w, out * inp);
                    for r in 0..batch {
                        for o in 0..out {
                            let gv = g[r * out + o];
                            for (d, xv) in dw[o * inp..][..inp].iter_mut().zip(&xd[r * inp..][..inp]) {
                                *d += gv * xv;
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    let db = accum(grads, *b, out);
                    for r in 0..batch {
                        for o in 0..out {
                            db[o] += g[r * out + o];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let cg = conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.wants(*x),
                );
                if let Some(dx) = cg.x {
                    add_into(accum(grads, *x, dx.len()), &dx);
                }
                if self.wants(*w) {
                    add_into(accum(grads, *w, cg.w.len()), &cg.w);
                }
                if self.wants(*b) {
                    add_into(accum(grads, *b, cg.bias.len()), &cg.bias);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                layout,
                active,
                normalized,
                inv_std,
            } => {
                let ng = group_norm_backward(*layout, self.value(*gamma).data(), active, normalized, inv_std, g);
                if self.wants(*x) {
                    add_into(accum(grads, *x, ng.x.len()), &ng.x);
                }
                if self.wants(*gamma) {
                    add_into(accum(grads, *gamma, ng.gamma.len()), &ng.gamma);
                }
                if self.wants(*beta) {
                    add_into(accum(grads, *beta, ng.beta.len()), &ng.beta);
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let av = self.value(*a).data();
                    let da = accum(grads, *a, av.len());
                    for ((d, x), gv) in da.iter_mut().zip(av).zip(g) {
                        if *x > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(accum(grads, v, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let da = accum(grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bd[i];
                    }
                }
                if self.wants(*b) {
                    let db = accum(grads, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    let da = accum(grads, *a, g.len());
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv * f;
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).numel();
                    for d in accum(grads, *a, n).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).numel();
                    let spatial = n / g.len();
                    let da = accum(grads, *a, n);
                    for (chunk, gv) in da.chunks_mut(spatial).zip(g) {
                        for d in chunk {
                            *d += gv / spatial as f64;
                        }
                    }
                }
            }
            Op::Flatten(a) => {
                if self.wants(*a) {
                    add_into(accum(grads, *a, g.len()), g);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let scale = g[0] / batch as f64;
                    let dl = accum(grads, *logits, probs.len());
                    for r in 0..batch {
                        for c in 0..classes {
                            let onehot = if labels[r] == c { 1.0 } else { 0.0 };
                            dl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let row = &b[p * n..][..n];
            for (o, bv) in out[i * n..][..n].iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    out
}
