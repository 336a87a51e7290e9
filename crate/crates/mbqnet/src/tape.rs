//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Values are computed eagerly when an op is recorded; `backward` replays the
//! tape once in reverse. Reductions accumulate in f64 and narrow to f32.

use crate::error::{Error, Result};
use crate::tensor::{round_half_even, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

pub(crate) struct BnCtx {
    pub x: VarId,
    pub gamma: VarId,
    pub beta: VarId,
    pub xhat: Vec<f32>,
    pub invstd: Vec<f32>,
    pub training: bool,
    pub channels: usize,
    pub inner: usize,
}

pub(crate) struct CeCtx {
    pub logits: VarId,
    pub probs: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

pub(crate) enum Op {
    Leaf,
    Matmul(VarId, VarId),
    Conv2d { x: VarId, w: VarId, stride: usize },
    BiasAdd(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    MulConst(VarId, f32),
    // the constant is irrelevant to the gradient; kept out of the variant
    AddConst(VarId),
    ScaleScalar(VarId, VarId),
    AddScalar(VarId, VarId),
    ScaleGroup(VarId, VarId),
    Recip(VarId),
    Sqrt(VarId),
    Tanh(VarId),
    Abs(VarId),
    Relu(VarId),
    ClampMin(VarId, f32),
    Clip(VarId, f32, f32),
    SteRound(VarId),
    Sum(VarId),
    Mean(VarId),
    ReduceMax(VarId),
    GroupMean(VarId, usize),
    GroupMax(VarId, usize),
    GlobalAvgPool(VarId),
    BatchNorm(Box<BnCtx>),
    SoftmaxCrossEntropy(Box<CeCtx>),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradient tape. Nodes are appended in topological order by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one optional gradient per tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<Tensor> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[id.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn get_flat(&self, id: VarId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(|g| g.is_none())
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

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    // ---- primitive ops -------------------------------------------------

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("lhs {:?} rhs {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        let (ad, bd) = (av.data(), bv.data());
        let mut row = vec![0.0f64; n];
        for i in 0..m {
            row.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..k {
                let aip = ad[i * k + p] as f64;
                if aip != 0.0 {
                    let brow = &bd[p * n..(p + 1) * n];
                    for j in 0..n {
                        row[j] += aip * brow[j] as f64;
                    }
                }
            }
            for j in 0..n {
                out[i * n + j] = row[j] as f32;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), value, rg))
    }

    /// 3x3 convolution, padding 1, stride 1 or 2.
    pub fn conv2d(&mut self, x: VarId, w: VarId, stride: usize) -> Result<VarId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || sx[1] != sw[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} weight {:?}", sx, sw),
            ));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid(format!("conv2d stride {} unsupported", stride)));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let oc = sw[0];
        let (oh, ow) = conv_out(h, wd, stride);
        let cols = im2col(xv.data(), n, c, h, wd, stride);
        let k = c * 9;
        let p = oh * ow;
        let wdt = wv.data();
        let mut out = vec![0.0f32; n * oc * p];
        for r in 0..n * p {
            let xr = &cols[r * k..(r + 1) * k];
            let (bn, bp) = (r / p, r % p);
            for o in 0..oc {
                let wr = &wdt[o * k..(o + 1) * k];
                let mut acc = 0.0f64;
                for q in 0..k {
                    acc += xr[q] as f64 * wr[q] as f64;
                }
                out[bn * oc * p + o * p + bp] = acc as f32;
            }
        }
        let value = Tensor::new(vec![n, oc, oh, ow], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(Op::Conv2d { x, w, stride }, value, rg))
    }

    pub fn bias_add(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (c, inner) = channel_layout(xv.shape()).ok_or_else(|| {
            Error::shape("bias_add", format!("input rank {} unsupported", xv.rank()))
        })?;
        if bv.shape() != [c] {
            return Err(Error::shape(
                "bias_add",
                format!("input {:?} bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let bd = bv.data();
        let mut out = xv.data().to_vec();
        let per = c * inner;
        for chunk in out.chunks_mut(per) {
            for ci in 0..c {
                let bi = bd[ci];
                for v in &mut chunk[ci * inner..(ci + 1) * inner] {
                    *v += bi;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(Op::BiasAdd(x, b), value, rg))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<VarId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                name,
                format!("lhs {:?} rhs {:?}", av.shape(), bv.shape()),
            ));
        }
        let out: Vec<f32> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: VarId, f: impl Fn(f32) -> f32, op: Op) -> VarId {
        let xv = self.value(x);
        let out: Vec<f32> = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), out).expect("unary shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(op, value, rg)
    }

    pub fn mul_const(&mut self, x: VarId, c: f32) -> VarId {
        self.unary(x, |v| v * c, Op::MulConst(x, c))
    }

    pub fn add_const(&mut self, x: VarId, c: f32) -> VarId {
        self.unary(x, |v| v + c, Op::AddConst(x))
    }

    pub fn recip(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn sqrt(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn abs(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn clamp_min(&mut self, x: VarId, c: f32) -> VarId {
        self.unary(x, |v| v.max(c), Op::ClampMin(x, c))
    }

    pub fn clip(&mut self, x: VarId, lo: f32, hi: f32) -> VarId {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clip(x, lo, hi))
    }

    /// Round half to even forward, identity Jacobian backward.
    pub fn ste_round(&mut self, x: VarId) -> VarId {
        self.unary(x, round_half_even, Op::SteRound(x))
    }

    /// Multiply every element by a scalar-shaped variable.
    pub fn scale_scalar(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::shape("scale_scalar", format!("scale {:?}", sv.shape())));
        }
        let c = sv.data()[0];
        let xv = self.value(x);
        let out: Vec<f32> = xv.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(Op::ScaleScalar(x, s), value, rg))
    }

    /// Add a scalar-shaped variable to every element.
    pub fn add_scalar(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::shape("add_scalar", format!("addend {:?}", sv.shape())));
        }
        let c = sv.data()[0];
        let xv = self.value(x);
        let out: Vec<f32> = xv.data().iter().map(|&v| v + c).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(Op::AddScalar(x, s), value, rg))
    }

    /// Per-leading-dim broadcast multiply: x viewed as [G, len/G], s of shape [G].
    pub fn scale_group(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        let (xv, sv) = (self.value(x), self.value(s));
        let g = sv.len();
        if sv.rank() != 1 || xv.shape()[0] != g {
            return Err(Error::shape(
                "scale_group",
                format!("input {:?} scale {:?}", xv.shape(), sv.shape()),
            ));
        }
        let inner = xv.len() / g;
        let sd = sv.data();
        let mut out = xv.data().to_vec();
        for gi in 0..g {
            let c = sd[gi];
            for v in &mut out[gi * inner..(gi + 1) * inner] {
                *v *= c;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(Op::ScaleGroup(x, s), value, rg))
    }

    fn reduce(&mut self, x: VarId, op: Op, v: f32) -> VarId {
        let rg = self.nodes[x.0].requires_grad;
        self.push(op, Tensor::scalar(v), rg)
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.reduce(x, Op::Sum(x), s as f32)
    }

    pub fn mean(&mut self, x: VarId) -> VarId {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
        let m = (s / xv.len() as f64) as f32;
        self.reduce(x, Op::Mean(x), m)
    }

    pub fn reduce_max(&mut self, x: VarId) -> VarId {
        let m = self
            .value(x)
            .data()
            .iter()
            .cloned()
            .fold(f32::NEG_INFINITY, f32::max);
        self.reduce(x, Op::ReduceMax(x), m)
    }

    /// Per-leading-dim mean: x viewed as [G, len/G] -> [G].
    pub fn group_mean(&mut self, x: VarId, groups: usize) -> Result<VarId> {
        let xv = self.value(x);
        if xv.shape()[0] != groups {
            return Err(Error::shape(
                "group_mean",
                format!("input {:?} groups {}", xv.shape(), groups),
            ));
        }
        let inner = xv.len() / groups;
        let mut out = vec![0.0f32; groups];
        for g in 0..groups {
            let s: f64 = xv.data()[g * inner..(g + 1) * inner]
                .iter()
                .map(|&v| v as f64)
                .sum();
            out[g] = (s / inner as f64) as f32;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::GroupMean(x, groups), Tensor::from_vec(out), rg))
    }

    /// Per-leading-dim max: x viewed as [G, len/G] -> [G].
    pub fn group_max(&mut self, x: VarId, groups: usize) -> Result<VarId> {
        let xv = self.value(x);
        if xv.shape()[0] != groups {
            return Err(Error::shape(
                "group_max",
                format!("input {:?} groups {}", xv.shape(), groups),
            ));
        }
        let inner = xv.len() / groups;
        let mut out = vec![0.0f32; groups];
        for g in 0..groups {
            out[g] = xv.data()[g * inner..(g + 1) * inner]
                .iter()
                .cloned()
                .fold(f32::NEG_INFINITY, f32::max);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::GroupMax(x, groups), Tensor::from_vec(out), rg))
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {:?}", s)));
        }
        let (n, c, inner) = (s[0], s[1], s[2] * s[3]);
        let mut out = vec![0.0f32; n * c];
        for i in 0..n * c {
            let sum: f64 = xv.data()[i * inner..(i + 1) * inner]
                .iter()
                .map(|&v| v as f64)
                .sum();
            out[i] = (sum / inner as f64) as f32;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::GlobalAvgPool(x), Tensor::new(vec![n, c], out)?, rg))
    }

    /// Batch normalization over channels. In training mode, batch statistics
    /// normalize and `running` is updated with the momentum rule; in eval mode
    /// `running` is read-only.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &mut [f32],
        running_var: &mut [f32],
        training: bool,
        momentum: f32,
        eps: f32,
    ) -> Result<VarId> {
        let xv = self.value(x);
        let (c, inner) = channel_layout(xv.shape()).ok_or_else(|| {
            Error::shape("batch_norm", format!("input rank {} unsupported", xv.rank()))
        })?;
        let n = xv.shape()[0];
        if self.value(gamma).len() != c || self.value(beta).len() != c || running_mean.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("channel count {} vs affine/stat lengths", c),
            ));
        }
        let m = n * inner;
        let xd = xv.data();
        let per = c * inner;
        let (mean, var) = if training {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ni in 0..n {
                for ci in 0..c {
                    for j in 0..inner {
                        mean[ci] += xd[ni * per + ci * inner + j] as f64;
                    }
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for ni in 0..n {
                for ci in 0..c {
                    for j in 0..inner {
                        let d = xd[ni * per + ci * inner + j] as f64 - mean[ci];
                        var[ci] += d * d;
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            for ci in 0..c {
                running_mean[ci] =
                    (1.0 - momentum) * running_mean[ci] + momentum * mean[ci] as f32;
                running_var[ci] = (1.0 - momentum) * running_var[ci] + momentum * var[ci] as f32;
            }
            (mean, var)
        } else {
            (
                running_mean.iter().map(|&v| v as f64).collect(),
                running_var.iter().map(|&v| v as f64).collect(),
            )
        };
        let invstd: Vec<f32> = var.iter().map(|&v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let (mu, is) = (mean[ci] as f32, invstd[ci]);
                let (g, b) = (gd[ci], bd[ci]);
                for j in 0..inner {
                    let idx = ni * per + ci * inner + j;
                    let xh = (xd[idx] - mu) * is;
                    xhat[idx] = xh;
                    out[idx] = g * xh + b;
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let ctx = BnCtx {
            x,
            gamma,
            beta,
            xhat,
            invstd,
            training,
            channels: c,
            inner,
        };
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(Op::BatchNorm(Box::new(ctx)), value, rg))
    }

    /// Mean softmax cross-entropy over the batch. Returns the scalar loss and
    /// the softmax probabilities [N, K].
    pub fn softmax_cross_entropy(
        &mut self,
        logits: VarId,
        labels: &[usize],
    ) -> Result<(VarId, Tensor)> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} labels {}", s, labels.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {} out of range [0, {})", bad, k)));
        }
        let ld = lv.data();
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for &v in row {
                z += ((v - mx) as f64).exp();
            }
            for j in 0..k {
                probs[i * k + j] = (((row[j] - mx) as f64).exp() / z) as f32;
            }
            loss += z.ln() - (row[labels[i]] - mx) as f64;
        }
        loss /= n as f64;
        let probs_t = Tensor::new(vec![n, k], probs.clone())?;
        let rg = self.nodes[logits.0].requires_grad;
        let ctx = CeCtx {
            logits,
            probs,
            labels: labels.to_vec(),
            classes: k,
        };
        let id = self.push(
            Op::SoftmaxCrossEntropy(Box::new(ctx)),
            Tensor::scalar(loss as f32),
            rg,
        );
        Ok((id, probs_t))
    }

    // ---- backward ------------------------------------------------------

    /// Backpropagate from a scalar loss; returns gradients for every node that
    /// requires grad and is reachable from the loss.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            // leaves keep their gradient
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Vec<f32>>], id: VarId, contrib: &[f32]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot => {
                *slot = Some(contrib.to_vec());
            }
        }
    }

    fn acc_owned(&self, grads: &mut [Option<Vec<f32>>], id: VarId, contrib: Vec<f32>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot => {
                *slot = Some(contrib);
            }
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.nodes[a.0].requires_grad {
                    // dA[i,p] = sum_j G[i,j] B[p,j]
                    let mut da = vec![0.0f32; m * k];
                    let bd = bv.data();
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let br = &bd[p * n..(p + 1) * n];
                            let mut acc = 0.0f64;
                            for j in 0..n {
                                acc += gr[j] as f64 * br[j] as f64;
                            }
                            da[r * k + p] = acc as f32;
                        }
                    }
                    self.acc_owned(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB[p,j] = sum_i A[i,p] G[i,j]
                    let mut db = vec![0.0f64; k * n];
                    let ad = av.data();
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = ad[r * k + p] as f64;
                            if arp != 0.0 {
                                for j in 0..n {
                                    db[p * n + j] += arp * gr[j] as f64;
                                }
                            }
                        }
                    }
                    self.acc_owned(grads, *b, db.iter().map(|&v| v as f32).collect());
                }
            }
            Op::Conv2d { x, w, stride } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let sx = xv.shape();
                let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let oc = wv.shape()[0];
                let (oh, ow) = conv_out(h, wd, *stride);
                let p = oh * ow;
                let k = c * 9;
                // gradient arrives as [N, OC, OH, OW]; view per (row=n*p, oc)
                let cols = im2col(xv.data(), n, c, h, wd, *stride);
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0f64; oc * k];
                    for r in 0..n * p {
                        let (bn, bp) = (r / p, r % p);
                        let xr = &cols[r * k..(r + 1) * k];
                        for o in 0..oc {
                            let go = g[bn * oc * p + o * p + bp] as f64;
                            if go != 0.0 {
                                let dwo = &mut dw[o * k..(o + 1) * k];
                                for q in 0..k {
                                    dwo[q] += go * xr[q] as f64;
                                }
                            }
                        }
                    }
                    self.acc_owned(grads, *w, dw.iter().map(|&v| v as f32).collect());
                }
                if self.nodes[x.0].requires_grad {
                    let wdt = wv.data();
                    let mut dcols = vec![0.0f32; n * p * k];
                    let mut row = vec![0.0f64; k];
                    for r in 0..n * p {
                        let (bn, bp) = (r / p, r % p);
                        row.iter_mut().for_each(|v| *v = 0.0);
                        for o in 0..oc {
                            let go = g[bn * oc * p + o * p + bp] as f64;
                            if go != 0.0 {
                                let wr = &wdt[o * k..(o + 1) * k];
                                for q in 0..k {
                                    row[q] += go * wr[q] as f64;
                                }
                            }
                        }
                        for q in 0..k {
                            dcols[r * k + q] = row[q] as f32;
                        }
                    }
                    let dx = col2im(&dcols, n, c, h, wd, *stride);
                    self.acc_owned(grads, *x, dx);
                }
            }
            Op::BiasAdd(x, b) => {
                self.acc(grads, *x, g);
                if self.nodes[b.0].requires_grad {
                    let xv = self.value(*x);
                    let (c, inner) = channel_layout(xv.shape()).unwrap();
                    let n = xv.shape()[0];
                    let per = c * inner;
                    let mut db = vec![0.0f64; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            for j in 0..inner {
                                db[ci] += g[ni * per + ci * inner + j] as f64;
                            }
                        }
                    }
                    self.acc_owned(grads, *b, db.iter().map(|&v| v as f32).collect());
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                if self.nodes[b.0].requires_grad {
                    self.acc_owned(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let bd = self.value(*b).data();
                    self.acc_owned(grads, *a, g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect());
                }
                if self.nodes[b.0].requires_grad {
                    let ad = self.value(*a).data();
                    self.acc_owned(grads, *b, g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect());
                }
            }
            Op::MulConst(x, c) => {
                let c = *c;
                self.acc_owned(grads, *x, g.iter().map(|&v| v * c).collect());
            }
            Op::AddConst(x) => self.acc(grads, *x, g),
            Op::ScaleScalar(x, s) => {
                let sv = self.value(*s).data()[0];
                if self.nodes[x.0].requires_grad {
                    self.acc_owned(grads, *x, g.iter().map(|&v| v * sv).collect());
                }
                if self.nodes[s.0].requires_grad {
                    let xd = self.value(*x).data();
                    let ds: f64 = g.iter().zip(xd).map(|(&gv, &xv)| gv as f64 * xv as f64).sum();
                    self.acc_owned(grads, *s, vec![ds as f32]);
                }
            }
            Op::AddScalar(x, s) => {
                self.acc(grads, *x, g);
                if self.nodes[s.0].requires_grad {
                    let ds: f64 = g.iter().map(|&v| v as f64).sum();
                    self.acc_owned(grads, *s, vec![ds as f32]);
                }
            }
            Op::ScaleGroup(x, s) => {
                let sv = self.value(*s).data();
                let groups = sv.len();
                let inner = g.len() / groups;
                if self.nodes[x.0].requires_grad {
                    let mut dx = g.to_vec();
                    for gi in 0..groups {
                        for v in &mut dx[gi * inner..(gi + 1) * inner] {
                            *v *= sv[gi];
                        }
                    }
                    self.acc_owned(grads, *x, dx);
                }
                if self.nodes[s.0].requires_grad {
                    let xd = self.value(*x).data();
                    let mut ds = vec![0.0f32; groups];
                    for gi in 0..groups {
                        let mut acc = 0.0f64;
                        for j in 0..inner {
                            let idx = gi * inner + j;
                            acc += g[idx] as f64 * xd[idx] as f64;
                        }
                        ds[gi] = acc as f32;
                    }
                    self.acc_owned(grads, *s, ds);
                }
            }
            Op::Recip(x) => {
                let xd = self.value(*x).data();
                self.acc_owned(
                    grads,
                    *x,
                    g.iter().zip(xd).map(|(&gv, &xv)| -gv / (xv * xv)).collect(),
                );
            }
            Op::Sqrt(x) => {
                let yd = self.nodes[i].value.data();
                self.acc_owned(
                    grads,
                    *x,
                    g.iter().zip(yd).map(|(&gv, &yv)| gv * 0.5 / yv).collect(),
                );
            }
            Op::Tanh(x) => {
                let yd = self.nodes[i].value.data();
                self.acc_owned(
                    grads,
                    *x,
                    g.iter().zip(yd).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect(),
                );
            }
            Op::Abs(x) => {
                let xd = self.value(*x).data();
                self.acc_owned(
                    grads,
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| {
                            if xv > 0.0 {
                                gv
                            } else if xv < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            Op::Relu(x) => {
                // subgradient at exactly 0 is 0
                let xd = self.value(*x).data();
                self.acc_owned(
                    grads,
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::ClampMin(x, c) => {
                let (xd, c) = (self.value(*x).data(), *c);
                self.acc_owned(
                    grads,
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| if xv >= c { gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Clip(x, lo, hi) => {
                let (xd, lo, hi) = (self.value(*x).data(), *lo, *hi);
                self.acc_owned(
                    grads,
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::SteRound(x) => self.acc(grads, *x, g),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc_owned(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.acc_owned(grads, *x, vec![g[0] / n as f32; n]);
            }
            Op::ReduceMax(x) => {
                let xd = self.value(*x).data();
                let mx = self.nodes[i].value.data()[0];
                let mut dx = vec![0.0f32; xd.len()];
                if let Some(pos) = xd.iter().position(|&v| v == mx) {
                    dx[pos] = g[0];
                }
                self.acc_owned(grads, *x, dx);
            }
            Op::GroupMean(x, groups) => {
                let n = self.value(*x).len();
                let inner = n / groups;
                let mut dx = vec![0.0f32; n];
                for gi in 0..*groups {
                    let v = g[gi] / inner as f32;
                    for d in &mut dx[gi * inner..(gi + 1) * inner] {
                        *d = v;
                    }
                }
                self.acc_owned(grads, *x, dx);
            }
            Op::GroupMax(x, groups) => {
                let xd = self.value(*x).data();
                let inner = xd.len() / groups;
                let yd = self.nodes[i].value.data();
                let mut dx = vec![0.0f32; xd.len()];
                for gi in 0..*groups {
                    let seg = &xd[gi * inner..(gi + 1) * inner];
                    if let Some(pos) = seg.iter().position(|&v| v == yd[gi]) {
                        dx[gi * inner + pos] = g[gi];
                    }
                }
                self.acc_owned(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let (n, c, inner) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![0.0f32; n * c * inner];
                for i2 in 0..n * c {
                    let v = g[i2] / inner as f32;
                    for d in &mut dx[i2 * inner..(i2 + 1) * inner] {
                        *d = v;
                    }
                }
                self.acc_owned(grads, *x, dx);
            }
            Op::BatchNorm(ctx) => {
                let (c, inner) = (ctx.channels, ctx.inner);
                let n = g.len() / (c * inner);
                let m = (n * inner) as f64;
                let per = c * inner;
                let gam = self.value(ctx.gamma).data();
                if self.nodes[ctx.gamma.0].requires_grad || self.nodes[ctx.beta.0].requires_grad {
                    let mut dg = vec![0.0f64; c];
                    let mut db = vec![0.0f64; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            for j in 0..inner {
                                let idx = ni * per + ci * inner + j;
                                dg[ci] += g[idx] as f64 * ctx.xhat[idx] as f64;
                                db[ci] += g[idx] as f64;
                            }
                        }
                    }
                    self.acc_owned(grads, ctx.gamma, dg.iter().map(|&v| v as f32).collect());
                    self.acc_owned(grads, ctx.beta, db.iter().map(|&v| v as f32).collect());
                }
                if self.nodes[ctx.x.0].requires_grad {
                    let mut dx = vec![0.0f32; g.len()];
                    if ctx.training {
                        let mut sg = vec![0.0f64; c];
                        let mut sgx = vec![0.0f64; c];
                        for ni in 0..n {
                            for ci in 0..c {
                                for j in 0..inner {
                                    let idx = ni * per + ci * inner + j;
                                    sg[ci] += g[idx] as f64;
                                    sgx[ci] += g[idx] as f64 * ctx.xhat[idx] as f64;
                                }
                            }
                        }
                        for ni in 0..n {
                            for ci in 0..c {
                                let coef = gam[ci] as f64 * ctx.invstd[ci] as f64 / m;
                                for j in 0..inner {
                                    let idx = ni * per + ci * inner + j;
                                    dx[idx] = (coef
                                        * (m * g[idx] as f64
                                            - sg[ci]
                                            - ctx.xhat[idx] as f64 * sgx[ci]))
                                        as f32;
                                }
                            }
                        }
                    } else {
                        for ni in 0..n {
                            for ci in 0..c {
                                let coef = gam[ci] * ctx.invstd[ci];
                                for j in 0..inner {
                                    let idx = ni * per + ci * inner + j;
                                    dx[idx] = g[idx] * coef;
                                }
                            }
                        }
                    }
                    self.acc_owned(grads, ctx.x, dx);
                }
            }
            Op::SoftmaxCrossEntropy(ctx) => {
                if self.nodes[ctx.logits.0].requires_grad {
                    let n = ctx.labels.len();
                    let k = ctx.classes;
                    let scale = g[0] / n as f32;
                    let mut dl = vec![0.0f32; n * k];
                    for r in 0..n {
                        for j in 0..k {
                            let onehot = if j == ctx.labels[r] { 1.0 } else { 0.0 };
                            dl[r * k + j] = scale * (ctx.probs[r * k + j] - onehot);
                        }
                    }
                    self.acc_owned(grads, ctx.logits, dl);
                }
            }
        }
    }
}

/// (channels, inner extent) for rank-2 [N, F] and rank-4 [N, C, H, W] layouts.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize)> {
    match shape.len() {
        2 => Some((shape[1], 1)),
        4 => Some((shape[1], shape[2] * shape[3])),
        _ => None,
    }
}

pub(crate) fn conv_out(h: usize, w: usize, stride: usize) -> (usize, usize) {
    ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1)
}

/// 3x3/pad-1 patch extraction: output rows are (n, oy, ox), columns (c, ky, kx).
fn im2col(x: &[f32], n: usize, c: usize, h: usize, w: usize, stride: usize) -> Vec<f32> {
    let (oh, ow) = conv_out(h, w, stride);
    let k = c * 9;
    let mut cols = vec![0.0f32; n * oh * ow * k];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * k;
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[row + ci * 9 + ky * 3 + kx] =
                                x[base + iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-accumulate patch gradients back to the input.
fn col2im(cols: &[f32], n: usize, c: usize, h: usize, w: usize, stride: usize) -> Vec<f32> {
    let (oh, ow) = conv_out(h, w, stride);
    let k = c * 9;
    let mut dx = vec![0.0f32; n * c * h * w];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * k;
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[base + iy as usize * w + ix as usize] +=
                                cols[row + ci * 9 + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}
