//! Minimal reverse-mode automatic differentiation over f64 `ndarray`
//! tensors.
//!
//! A [`Graph`] is a single-use tape: ops append nodes, `backward` walks the
//! tape in reverse. Everything is f64 and single-threaded by design so that
//! gradient checks against central finite differences hold to tight
//! tolerances and results are bit-reproducible. Parallelism belongs one
//! level up (independent samples build independent graphs).

use std::collections::BTreeMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};

pub type Tensor = ArrayD<f64>;

/// Named parameter gradients collected after a backward pass.
pub type Grads = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// x * s where s is a single-element node.
    MulScalarNode(NodeId, NodeId),
    /// x + s where s is a single-element node.
    AddScalarNode(NodeId, NodeId),
    Silu(NodeId),
    Square(NodeId),
    /// -log(sigmoid(x)), elementwise.
    NegLogSigmoid(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    ConcatAxis1(NodeId, NodeId),
    UpsampleNearest2(NodeId),
    /// x: [B,C,H,W] plus a per-(batch, channel) bias [B,C].
    AddBroadcastBc(NodeId, NodeId),
    SoftmaxLast(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        mean: Array2<f64>,
        inv_std: Array2<f64>,
    },
    Bmm {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
}

pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    params: Vec<(String, NodeId)>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            params: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        debug_assert!(value.is_standard_layout());
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        NodeId(self.values.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.needs_grad[id.0])
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.values[id.0].shape()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.values[id.0].len(), 1);
        *self.values[id.0].iter().next().expect("scalar node")
    }

    /// A constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.push(value, Op::Leaf, false)
    }

    /// A named trainable leaf; its gradient is collected by [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.values[a.0] + &self.values[b.0];
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.values[a.0] - &self.values[b.0];
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.values[a.0] * &self.values[b.0];
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.values[x.0].mapv(|v| v * c);
        let ng = self.needs_grad[x.0];
        self.push(v, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.values[x.0].mapv(|v| v + c);
        let ng = self.needs_grad[x.0];
        self.push(v, Op::AddScalar(x), ng)
    }

    /// Multiplies a tensor by a single-element node (gradient flows to both).
    pub fn mul_scalar_node(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.values[s.0].len(), 1, "scalar node expected");
        let sv = self.scalar(s);
        let v = self.values[x.0].mapv(|v| v * sv);
        let ng = self.any_grad(&[x, s]);
        self.push(v, Op::MulScalarNode(x, s), ng)
    }

    /// Adds a single-element node to every element of a tensor.
    pub fn add_scalar_node(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.values[s.0].len(), 1, "scalar node expected");
        let sv = self.scalar(s);
        let v = self.values[x.0].mapv(|v| v + sv);
        let ng = self.any_grad(&[x, s]);
        self.push(v, Op::AddScalarNode(x, s), ng)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].mapv(|v| v * sigmoid(v));
        let ng = self.needs_grad[x.0];
        self.push(v, Op::Silu(x), ng)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].mapv(|v| v * v);
        let ng = self.needs_grad[x.0];
        self.push(v, Op::Square(x), ng)
    }

    /// Numerically stable -log(sigmoid(x)) = softplus(-x).
    pub fn neg_log_sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].mapv(softplus_neg);
        let ng = self.needs_grad[x.0];
        self.push(v, Op::NegLogSigmoid(x), ng)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.values[x.0].len() as f64;
        let s = self.values[x.0].sum() / n;
        let ng = self.needs_grad[x.0];
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::MeanAll(x), ng)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.values[x.0].sum();
        let ng = self.needs_grad[x.0];
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(x), ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.values[x.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count mismatch");
        let ng = self.needs_grad[x.0];
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let v = self.values[x.0]
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let ng = self.needs_grad[x.0];
        self.push(v, Op::Permute(x, axes.to_vec()), ng)
    }

    /// Concatenates two [B,C,H,W] tensors along the channel axis.
    pub fn concat_axis1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ndarray::concatenate(
            Axis(1),
            &[self.values[a.0].view(), self.values[b.0].view()],
        )
        .expect("concat shape mismatch")
        .as_standard_layout()
        .to_owned();
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::ConcatAxis1(a, b), ng)
    }

    /// Nearest-neighbor 2x spatial upsampling of a [B,C,H,W] tensor.
    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        let s = xv.shape();
        assert_eq!(s.len(), 4, "upsample expects [B,C,H,W]");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = xv[[bi, ci, y, xx]];
                        out[[bi, ci, 2 * y, 2 * xx]] = v;
                        out[[bi, ci, 2 * y, 2 * xx + 1]] = v;
                        out[[bi, ci, 2 * y + 1, 2 * xx]] = v;
                        out[[bi, ci, 2 * y + 1, 2 * xx + 1]] = v;
                    }
                }
            }
        }
        let ng = self.needs_grad[x.0];
        self.push(out, Op::UpsampleNearest2(x), ng)
    }

    /// Adds a [B,C] bias across the spatial dims of a [B,C,H,W] tensor.
    pub fn add_broadcast_bc(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        let bv = &self.values[bias.0];
        let s = xv.shape();
        assert_eq!(s.len(), 4);
        assert_eq!(bv.shape(), &[s[0], s[1]], "bias must be [B,C]");
        let mut out = xv.clone();
        for bi in 0..s[0] {
            for ci in 0..s[1] {
                let add = bv[[bi, ci]];
                out.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|v| v + add);
            }
        }
        let ng = self.any_grad(&[x, bias]);
        self.push(out, Op::AddBroadcastBc(x, bias), ng)
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        let mut out = xv.clone();
        let last = out.ndim() - 1;
        for mut row in out.lanes_mut(Axis(last)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.needs_grad[x.0];
        self.push(out, Op::SoftmaxLast(x), ng)
    }

    /// y = x . w^T + b with x: [..., Din], w: [Dout, Din], b: [Dout].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        let din = *xv.shape().last().expect("linear input must have an axis");
        let (dout, win) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(din, win, "linear dims mismatch");
        let rows: usize = xv.len() / din;
        let x2 = xv.view().into_shape_with_order((rows, din)).expect("contiguous");
        let w2 = wv.view().into_dimensionality::<ndarray::Ix2>().expect("w is 2-d");
        let mut y = Array2::<f64>::zeros((rows, dout));
        general_mat_mul(1.0, &x2, &w2.t(), 0.0, &mut y);
        if let Some(bid) = b {
            let bv = &self.values[bid.0];
            assert_eq!(bv.len(), dout);
            let b1 = bv.view().into_shape_with_order(dout).expect("bias 1-d");
            y += &b1.broadcast((rows, dout)).expect("broadcast bias");
        }
        let mut out_shape: Vec<usize> = xv.shape()[..xv.ndim() - 1].to_vec();
        out_shape.push(dout);
        let v = y.into_shape_with_order(IxDyn(&out_shape)).expect("linear reshape");
        let ng = self.any_grad(&[x, w]) || b.map(|bid| self.needs_grad[bid.0]).unwrap_or(false);
        self.push(v, Op::Linear { x, w, b }, ng)
    }

    /// 2-D convolution, x: [B,Cin,H,W], w: [Cout,Cin,kh,kw].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        let xs = xv.shape();
        let ws = wv.shape();
        assert_eq!(xs.len(), 4, "conv input must be [B,Cin,H,W]");
        assert_eq!(ws.len(), 4, "conv weight must be [Cout,Cin,kh,kw]");
        assert_eq!(xs[1], ws[1], "conv channel mismatch");
        let (bsz, cin, h, w_in) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w_in + 2 * pad - kw) / stride + 1;
        let k = cin * kh * kw;
        let w2 = wv.view().into_shape_with_order((cout, k)).expect("weight reshape");
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[bsz, cout, ho, wo]));
        for bi in 0..bsz {
            let cols = im2col(xv, bi, kh, kw, stride, pad, ho, wo);
            let mut y = Array2::<f64>::zeros((cout, ho * wo));
            general_mat_mul(1.0, &w2, &cols.view(), 0.0, &mut y);
            if let Some(bid) = b {
                let bv = &self.values[bid.0];
                for co in 0..cout {
                    let add = bv[[co]];
                    y.row_mut(co).mapv_inplace(|v| v + add);
                }
            }
            let mut out_b = out.slice_mut(ndarray::s![bi, .., .., ..]);
            let y4 = y.into_shape_with_order((cout, ho, wo)).expect("conv reshape");
            out_b.assign(&y4);
        }
        let ng = self.any_grad(&[x, w]) || b.map(|bid| self.needs_grad[bid.0]).unwrap_or(false);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// Group normalization over [B,C,H,W] with per-channel affine.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64) -> NodeId {
        let xv = &self.values[x.0];
        let s = xv.shape();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        let cpg = c / groups;
        let n = (cpg * h * w) as f64;
        let mut mean = Array2::<f64>::zeros((b, groups));
        let mut inv_std = Array2::<f64>::zeros((b, groups));
        let mut out = xv.clone();
        let gv = self.values[gamma.0].clone();
        let bv = self.values[beta.0].clone();
        for bi in 0..b {
            for g in 0..groups {
                let sl = ndarray::s![bi, g * cpg..(g + 1) * cpg, .., ..];
                let grp = xv.slice(sl);
                let m = grp.sum() / n;
                let var = grp.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                let is = 1.0 / (var + eps).sqrt();
                mean[[bi, g]] = m;
                inv_std[[bi, g]] = is;
                for ci in 0..cpg {
                    let ch = g * cpg + ci;
                    let gamma_c = gv[[ch]];
                    let beta_c = bv[[ch]];
                    out.slice_mut(ndarray::s![bi, ch, .., ..])
                        .mapv_inplace(|v| (v - m) * is * gamma_c + beta_c);
                }
            }
        }
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, mean, inv_std }, ng)
    }

    /// Batched matmul: a [B,N,K] x b [B,K,M] (or b [B,M,K] if `transpose_b`).
    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        let (ab, n, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let m = if transpose_b { bv.shape()[1] } else { bv.shape()[2] };
        let bk = if transpose_b { bv.shape()[2] } else { bv.shape()[1] };
        assert_eq!(av.shape().len(), 3);
        assert_eq!(bv.shape().len(), 3);
        assert_eq!(ab, bv.shape()[0], "bmm batch mismatch");
        assert_eq!(k, bk, "bmm inner dim mismatch");
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[ab, n, m]));
        for bi in 0..ab {
            let a2 = av
                .slice(ndarray::s![bi, .., ..])
                .into_dimensionality::<ndarray::Ix2>()
                .expect("2-d");
            let b2 = bv
                .slice(ndarray::s![bi, .., ..])
                .into_dimensionality::<ndarray::Ix2>()
                .expect("2-d");
            let mut y = Array2::<f64>::zeros((n, m));
            if transpose_b {
                general_mat_mul(1.0, &a2, &b2.t(), 0.0, &mut y);
            } else {
                general_mat_mul(1.0, &a2, &b2, 0.0, &mut y);
            }
            out.slice_mut(ndarray::s![bi, .., ..]).assign(&y);
        }
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::Bmm { a, b, transpose_b }, ng)
    }

    /// Returns an error naming `step` if the node holds any non-finite value.
    pub fn check_finite(&self, id: NodeId, step: usize, what: &str) -> Result<()> {
        if self.values[id.0].iter().any(|v| !v.is_finite()) {
            Err(Error::Numeric { step, msg: format!("non-finite {what}") })
        } else {
            Ok(())
        }
    }

    /// Reverse pass from a scalar node. Returns per-node gradients for the
    /// trainable leaves via [`Graph::param_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::parameter("backward requires a scalar loss node"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.values[loss.0].raw_dim(), 1.0));
        for idx in (0..self.values.len()).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the loss with respect to any node (after `backward`).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Collects gradients of all named parameter leaves.
    pub fn param_grads(&self) -> Grads {
        let mut out = Grads::new();
        for (name, id) in &self.params {
            let g = match self.grad(*id) {
                Some(g) => g.clone(),
                None => ArrayD::zeros(self.values[id.0].raw_dim()),
            };
            match out.entry(name.clone()) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    *e.get_mut() = e.get() + &g;
                }
            }
        }
        out
    }

    fn backprop_node(&self, idx: usize, gout: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let acc = |grads: &mut Vec<Option<Tensor>>, id: NodeId, delta: Tensor, needs: &Vec<bool>| {
            if !needs[id.0] {
                return;
            }
            match &mut grads[id.0] {
                Some(g) => *g += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let needs = &self.needs_grad;
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, gout.clone(), needs);
                acc(grads, *b, gout.clone(), needs);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gout.clone(), needs);
                acc(grads, *b, gout.mapv(|v| -v), needs);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, gout * &self.values[b.0], needs);
                acc(grads, *b, gout * &self.values[a.0], needs);
            }
            Op::Scale(x, c) => acc(grads, *x, gout.mapv(|v| v * c), needs),
            Op::AddScalar(x) => acc(grads, *x, gout.clone(), needs),
            Op::MulScalarNode(x, s) => {
                let sv = self.scalar(*s);
                acc(grads, *x, gout.mapv(|v| v * sv), needs);
                if needs[s.0] {
                    let d: f64 = gout
                        .iter()
                        .zip(self.values[x.0].iter())
                        .map(|(g, xv)| g * xv)
                        .sum();
                    acc(grads, *s, ArrayD::from_elem(self.values[s.0].raw_dim(), d), needs);
                }
            }
            Op::AddScalarNode(x, s) => {
                acc(grads, *x, gout.clone(), needs);
                if needs[s.0] {
                    let d: f64 = gout.iter().sum();
                    acc(grads, *s, ArrayD::from_elem(self.values[s.0].raw_dim(), d), needs);
                }
            }
            Op::Silu(x) => {
                let xv = &self.values[x.0];
                let mut d = gout.clone();
                ndarray::Zip::from(&mut d).and(xv).for_each(|g, &v| {
                    let s = sigmoid(v);
                    *g *= s * (1.0 + v * (1.0 - s));
                });
                acc(grads, *x, d, needs);
            }
            Op::Square(x) => {
                let d = gout * &self.values[x.0].mapv(|v| 2.0 * v);
                acc(grads, *x, d, needs);
            }
            Op::NegLogSigmoid(x) => {
                let xv = &self.values[x.0];
                let mut d = gout.clone();
                ndarray::Zip::from(&mut d).and(xv).for_each(|g, &v| {
                    *g *= sigmoid(v) - 1.0;
                });
                acc(grads, *x, d, needs);
            }
            Op::MeanAll(x) => {
                let n = self.values[x.0].len() as f64;
                let g = gout.iter().next().copied().unwrap_or(0.0) / n;
                acc(grads, *x, ArrayD::from_elem(self.values[x.0].raw_dim(), g), needs);
            }
            Op::SumAll(x) => {
                let g = gout.iter().next().copied().unwrap_or(0.0);
                acc(grads, *x, ArrayD::from_elem(self.values[x.0].raw_dim(), g), needs);
            }
            Op::Reshape(x) => {
                let d = gout
                    .clone()
                    .into_shape_with_order(self.values[x.0].raw_dim())
                    .expect("reshape grad");
                acc(grads, *x, d, needs);
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let d = gout
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                acc(grads, *x, d, needs);
            }
            Op::ConcatAxis1(a, b) => {
                let ca = self.values[a.0].shape()[1];
                let da = gout.slice(ndarray::s![.., ..ca, .., ..]).to_owned().into_dyn();
                let db = gout.slice(ndarray::s![.., ca.., .., ..]).to_owned().into_dyn();
                acc(grads, *a, da.as_standard_layout().to_owned(), needs);
                acc(grads, *b, db.as_standard_layout().to_owned(), needs);
            }
            Op::UpsampleNearest2(x) => {
                let s = self.values[x.0].shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut d = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                d[[bi, ci, y, xx]] = gout[[bi, ci, 2 * y, 2 * xx]]
                                    + gout[[bi, ci, 2 * y, 2 * xx + 1]]
                                    + gout[[bi, ci, 2 * y + 1, 2 * xx]]
                                    + gout[[bi, ci, 2 * y + 1, 2 * xx + 1]];
                            }
                        }
                    }
                }
                acc(grads, *x, d, needs);
            }
            Op::AddBroadcastBc(x, bias) => {
                acc(grads, *x, gout.clone(), needs);
                if needs[bias.0] {
                    let s = gout.shape();
                    let mut d = Array2::<f64>::zeros((s[0], s[1]));
                    for bi in 0..s[0] {
                        for ci in 0..s[1] {
                            d[[bi, ci]] = gout.slice(ndarray::s![bi, ci, .., ..]).sum();
                        }
                    }
                    acc(grads, *bias, d.into_dyn(), needs);
                }
            }
            Op::SoftmaxLast(x) => {
                let y = &self.values[idx];
                let last = y.ndim() - 1;
                let mut d = gout * y;
                // subtract y * sum(dy*y) along the last axis
                for (mut drow, yrow) in d.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                    let dot: f64 = drow.iter().sum();
                    for (dv, yv) in drow.iter_mut().zip(yrow.iter()) {
                        *dv -= yv * dot;
                    }
                }
                acc(grads, *x, d, needs);
            }
            Op::Linear { x, w, b } => {
                let xv = &self.values[x.0];
                let wv = &self.values[w.0];
                let din = *xv.shape().last().unwrap();
                let dout = wv.shape()[0];
                let rows = xv.len() / din;
                let x2 = xv.view().into_shape_with_order((rows, din)).unwrap();
                let w2 = wv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let g2 = gout.view().into_shape_with_order((rows, dout)).unwrap();
                if needs[x.0] {
                    let mut dx = Array2::<f64>::zeros((rows, din));
                    general_mat_mul(1.0, &g2, &w2, 0.0, &mut dx);
                    acc(
                        grads,
                        *x,
                        dx.into_shape_with_order(xv.raw_dim()).unwrap(),
                        needs,
                    );
                }
                if needs[w.0] {
                    let mut dw = Array2::<f64>::zeros((dout, din));
                    general_mat_mul(1.0, &g2.t(), &x2, 0.0, &mut dw);
                    acc(grads, *w, dw.into_dyn(), needs);
                }
                if let Some(bid) = b {
                    if needs[bid.0] {
                        let db = g2.sum_axis(Axis(0));
                        acc(grads, *bid, db.into_dyn(), needs);
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = &self.values[x.0];
                let wv = &self.values[w.0];
                let xs = xv.shape();
                let ws = wv.shape();
                let (bsz, cin, h, w_in) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let ho = (h + 2 * pad - kh) / stride + 1;
                let wo = (w_in + 2 * pad - kw) / stride + 1;
                let k = cin * kh * kw;
                let w2 = wv.view().into_shape_with_order((cout, k)).unwrap();
                let mut dw = Array2::<f64>::zeros((cout, k));
                let mut dx = ArrayD::<f64>::zeros(xv.raw_dim());
                let mut db = Array1::<f64>::zeros(cout);
                for bi in 0..bsz {
                    let g_b = gout
                        .slice(ndarray::s![bi, .., .., ..])
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order((cout, ho * wo))
                        .unwrap();
                    if needs[w.0] {
                        let cols = im2col(xv, bi, kh, kw, *stride, *pad, ho, wo);
                        general_mat_mul(1.0, &g_b.view(), &cols.t(), 1.0, &mut dw);
                    }
                    if needs[x.0] {
                        let mut dcols = Array2::<f64>::zeros((k, ho * wo));
                        general_mat_mul(1.0, &w2.t(), &g_b.view(), 0.0, &mut dcols);
                        col2im(&dcols, &mut dx, bi, cin, kh, kw, *stride, *pad, ho, wo);
                    }
                    if b.is_some() {
                        for co in 0..cout {
                            db[co] += g_b.row(co).sum();
                        }
                    }
                }
                if needs[x.0] {
                    acc(grads, *x, dx, needs);
                }
                if needs[w.0] {
                    acc(grads, *w, dw.into_shape_with_order(wv.raw_dim()).unwrap(), needs);
                }
                if let Some(bid) = b {
                    if needs[bid.0] {
                        acc(grads, *bid, db.into_dyn(), needs);
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, inv_std } => {
                let xv = &self.values[x.0];
                let s = xv.shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let cpg = c / groups;
                let n = (cpg * h * w) as f64;
                let gv = &self.values[gamma.0];
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut dx = ArrayD::<f64>::zeros(xv.raw_dim());
                for bi in 0..b {
                    for g in 0..*groups {
                        let m = mean[[bi, g]];
                        let is = inv_std[[bi, g]];
                        // per-group reductions of dxhat and dxhat*xhat
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for ci in 0..cpg {
                            let ch = g * cpg + ci;
                            let gamma_c = gv[[ch]];
                            for y in 0..h {
                                for xx in 0..w {
                                    let go = gout[[bi, ch, y, xx]];
                                    let xh = (xv[[bi, ch, y, xx]] - m) * is;
                                    let dxh = go * gamma_c;
                                    sum_dxh += dxh;
                                    sum_dxh_xh += dxh * xh;
                                    dgamma[ch] += go * xh;
                                    dbeta[ch] += go;
                                }
                            }
                        }
                        let mean_dxh = sum_dxh / n;
                        let mean_dxh_xh = sum_dxh_xh / n;
                        for ci in 0..cpg {
                            let ch = g * cpg + ci;
                            let gamma_c = gv[[ch]];
                            for y in 0..h {
                                for xx in 0..w {
                                    let go = gout[[bi, ch, y, xx]];
                                    let xh = (xv[[bi, ch, y, xx]] - m) * is;
                                    let dxh = go * gamma_c;
                                    dx[[bi, ch, y, xx]] = is * (dxh - mean_dxh - xh * mean_dxh_xh);
                                }
                            }
                        }
                    }
                }
                if needs[x.0] {
                    acc(grads, *x, dx, needs);
                }
                if needs[gamma.0] {
                    acc(grads, *gamma, dgamma.into_dyn(), needs);
                }
                if needs[beta.0] {
                    acc(grads, *beta, dbeta.into_dyn(), needs);
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let av = &self.values[a.0];
                let bv = &self.values[b.0];
                let bsz = av.shape()[0];
                let (n, k) = (av.shape()[1], av.shape()[2]);
                let m = if *transpose_b { bv.shape()[1] } else { bv.shape()[2] };
                let mut da = ArrayD::<f64>::zeros(av.raw_dim());
                let mut dbv = ArrayD::<f64>::zeros(bv.raw_dim());
                for bi in 0..bsz {
                    let a2 = av.slice(ndarray::s![bi, .., ..]).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let b2 = bv.slice(ndarray::s![bi, .., ..]).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let g2v = gout.slice(ndarray::s![bi, .., ..]);
                    let g2 = g2v.as_standard_layout();
                    let g2 = g2.view().into_shape_with_order((n, m)).unwrap();
                    if needs[a.0] {
                        let mut d = Array2::<f64>::zeros((n, k));
                        if *transpose_b {
                            general_mat_mul(1.0, &g2, &b2, 0.0, &mut d);
                        } else {
                            general_mat_mul(1.0, &g2, &b2.t(), 0.0, &mut d);
                        }
                        da.slice_mut(ndarray::s![bi, .., ..]).assign(&d);
                    }
                    if needs[b.0] {
                        if *transpose_b {
                            // c = a . b^T => db = c^T(grad) . a  => [M,K]
                            let mut d = Array2::<f64>::zeros((m, k));
                            general_mat_mul(1.0, &g2.t(), &a2, 0.0, &mut d);
                            dbv.slice_mut(ndarray::s![bi, .., ..]).assign(&d);
                        } else {
                            // db = a^T . grad => [K,M]
                            let mut d = Array2::<f64>::zeros((k, m));
                            general_mat_mul(1.0, &a2.t(), &g2, 0.0, &mut d);
                            dbv.slice_mut(ndarray::s![bi, .., ..]).assign(&d);
                        }
                    }
                }
                if needs[a.0] {
                    acc(grads, *a, da, needs);
                }
                if needs[b.0] {
                    acc(grads, *b, dbv, needs);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// softplus(-x) = -log(sigmoid(x)), stable for large |x|.
pub fn softplus_neg(x: f64) -> f64 {
    if x <= 0.0 {
        -x + (1.0 + x.exp()).ln()
    } else {
        (-x).exp().ln_1p()
    }
}

fn im2col(
    x: &Tensor,
    batch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let s = x.shape();
    let (cin, h, w) = (s[1], s[2], s[3]);
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[batch, c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    dx: &mut Tensor,
    batch: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let s = dx.shape();
    let (h, w) = (s[2], s[3]);
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[batch, c, iy as usize, ix as usize]] += dcols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn randt(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d loss/d input against central finite differences, where the
    /// graph is rebuilt from scratch for every perturbed input.
    fn check_grad<F>(shape_sets: &[Vec<usize>], build: F, seed: u64)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shape_sets.iter().map(|s| randt(&mut rng, s)).collect();

        let eval = |inputs: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| g.param(&format!("p{i}"), t.clone()))
                .collect();
            let out = build(&mut g, &ids);
            let loss = g.mean_all(out);
            g.backward(loss).unwrap();
            let grads: Vec<Tensor> = ids
                .iter()
                .map(|id| {
                    g.grad(*id)
                        .cloned()
                        .unwrap_or_else(|| ArrayD::zeros(g.value(*id).raw_dim()))
                })
                .collect();
            (g.scalar(loss), grads)
        };

        let (_, analytic) = eval(&inputs);
        let h = 1e-5;
        for (pi, input) in inputs.iter().enumerate() {
            for flat in 0..input.len().min(24) {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[pi].as_slice_mut().unwrap()[flat] += h;
                minus[pi].as_slice_mut().unwrap()[flat] -= h;
                let (lp, _) = eval(&plus);
                let (lm, _) = eval(&minus);
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic[pi].as_slice().unwrap()[flat];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() < 1e-8 || ((fd - an) / denom).abs() < 1e-5,
                    "param {pi} elem {flat}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_ops() {
        check_grad(&[vec![3, 4], vec![3, 4]], |g, ids| {
            let s = g.add(ids[0], ids[1]);
            let d = g.sub(s, ids[1]);
            let m = g.mul(d, ids[0]);
            let sc = g.scale(m, 1.7);
            let a = g.add_scalar(sc, 0.3);
            g.square(a)
        }, 1);
    }

    #[test]
    fn grad_scalar_node_ops() {
        check_grad(&[vec![3, 3], vec![1], vec![1]], |g, ids| {
            let m = g.mul_scalar_node(ids[0], ids[1]);
            g.add_scalar_node(m, ids[2])
        }, 21);
    }

    #[test]
    fn grad_silu_and_nls() {
        check_grad(&[vec![2, 5]], |g, ids| {
            let s = g.silu(ids[0]);
            g.neg_log_sigmoid(s)
        }, 2);
    }

    #[test]
    fn grad_linear() {
        check_grad(&[vec![2, 3, 4], vec![5, 4], vec![5]], |g, ids| {
            g.linear(ids[0], ids[1], Some(ids[2]))
        }, 3);
    }

    #[test]
    fn grad_conv2d() {
        check_grad(&[vec![2, 3, 5, 5], vec![4, 3, 3, 3], vec![4]], |g, ids| {
            g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)
        }, 4);
    }

    #[test]
    fn grad_conv2d_strided() {
        check_grad(&[vec![1, 2, 6, 6], vec![3, 2, 3, 3], vec![3]], |g, ids| {
            g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)
        }, 5);
    }

    #[test]
    fn grad_group_norm() {
        check_grad(&[vec![2, 4, 3, 3], vec![4], vec![4]], |g, ids| {
            g.group_norm(ids[0], ids[1], ids[2], 2, 1e-5)
        }, 6);
    }

    #[test]
    fn grad_softmax_bmm_attention() {
        // q [B,L,D], k [B,S,D], v [B,S,D] -> attention output
        check_grad(&[vec![1, 3, 4], vec![1, 5, 4], vec![1, 5, 4]], |g, ids| {
            let scores = g.bmm(ids[0], ids[1], true);
            let scaled = g.scale(scores, 0.5);
            let attn = g.softmax_last(scaled);
            g.bmm(attn, ids[2], false)
        }, 7);
    }

    #[test]
    fn grad_reshape_permute_concat_upsample() {
        check_grad(&[vec![1, 2, 2, 2], vec![1, 2, 2, 2]], |g, ids| {
            let c = g.concat_axis1(ids[0], ids[1]);
            let u = g.upsample_nearest2(c);
            let p = g.permute(u, &[0, 2, 3, 1]);
            let r = g.reshape(p, &[1, 16, 4]);
            g.square(r)
        }, 8);
    }

    #[test]
    fn grad_add_broadcast_bc() {
        check_grad(&[vec![2, 3, 2, 2], vec![2, 3]], |g, ids| {
            let y = g.add_broadcast_bc(ids[0], ids[1]);
            g.square(y)
        }, 9);
    }

    #[test]
    fn constants_block_gradients() {
        let mut g = Graph::new();
        let p = g.param("w", ArrayD::from_elem(IxDyn(&[2]), 1.5));
        let c = g.constant(ArrayD::from_elem(IxDyn(&[2]), 2.0));
        let m = g.mul(p, c);
        let loss = g.sum_all(m);
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        let gw = g.grad(p).unwrap();
        assert_eq!(gw.as_slice().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn param_grads_accumulate_shared_names() {
        // The same parameter bound twice accumulates both contributions.
        let mut g = Graph::new();
        let w = ArrayD::from_elem(IxDyn(&[1]), 3.0);
        let p1 = g.param("w", w.clone());
        let p2 = g.param("w", w);
        let m = g.mul(p1, p2);
        let loss = g.sum_all(m);
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        // d(w*w)/dw = 2w = 6
        assert_eq!(grads["w"].as_slice().unwrap(), &[6.0]);
    }

    #[test]
    fn softplus_neg_is_stable() {
        assert!((softplus_neg(0.0) - (2.0_f64).ln()).abs() < 1e-15);
        assert!(softplus_neg(800.0) < 1e-300);
        assert!(softplus_neg(-800.0) > 700.0);
        assert!(softplus_neg(-800.0).is_finite());
    }

    #[test]
    fn mean_all_value() {
        let mut g = Graph::new();
        let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = g.mean_all(x);
        assert!((g.scalar(m) - 2.5).abs() < 1e-15);
    }
}
