use std::fmt;

use super::conv::{self, Conv3dSpec};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type DerivFn = Box<dyn Fn(f64, f64) -> f64>;

enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Conv3d { x: Var, k: Var, spec: Conv3dSpec },
    ChannelBias { x: Var, b: Var },
    AvgPool { x: Var, factor: usize },
    Upsample { x: Var, factor: usize },
    Concat { xs: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    Reshape { x: Var },
    Sigmoid { x: Var },
    Silu { x: Var },
    Ln { x: Var },
    Map { x: Var, deriv: DerivFn },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Bce { pred: Var, target: Vec<f64> },
    SoftDice { pred: Var, target: Vec<f64>, eps: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Conv3d { .. } => "conv3d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::AvgPool { .. } => "avg_pool3d",
            Op::Upsample { .. } => "upsample_nearest3d",
            Op::Concat { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Reshape { .. } => "reshape",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Silu { .. } => "silu",
            Op::Ln { .. } => "ln",
            Op::Map { .. } => "map",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Bce { .. } => "bce",
            Op::SoftDice { .. } => "soft_dice",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A dynamic computation tape.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers; a fresh graph is built for every forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` requires grad
    /// and the loss depends on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Clamp applied to probabilities before taking logs in [`Graph::bce`].
pub const PROB_CLAMP: f64 = 1e-7;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_unit_interval(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Domain(format!("{what} value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shape {:?} does not match {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "{} produced non-finite value {} at index {i}",
                op.name(),
                data[i]
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `y = W·x + b` for a vector `x` of length n, `W` of shape m×n.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let [m, n] = wv.shape()[..] else {
            return Err(Error::dim(format!(
                "affine weight must be m×n, got {:?}",
                wv.shape()
            )));
        };
        if xv.shape() != [n] || bv.shape() != [m] {
            return Err(Error::dim(format!(
                "affine: x {:?}, W {:?}, b {:?} do not agree",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &wd[i * n..(i + 1) * n];
                row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>() + bd[i]
            })
            .collect();
        self.push(vec![m], out, Op::Affine { x, w, b }, &[x, w, b])
    }

    pub fn conv3d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let spec = Conv3dSpec::new(self.value(x).shape(), self.value(k).shape(), stride, pad)?;
        let out = conv::conv3d_forward(&spec, self.value(x).data(), self.value(k).data());
        let [o0, o1, o2] = spec.output;
        self.push(
            vec![spec.c_out, o0, o1, o2],
            out,
            Op::Conv3d { x, k, spec },
            &[x, k],
        )
    }

    /// Adds `b[c]` to every voxel of channel `c`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, _) = self.value(x).volume_dims()?;
        if self.value(b).shape() != [c] {
            return Err(Error::dim(format!(
                "channel bias of shape {:?} for {c} channels",
                self.value(b).shape()
            )));
        }
        let per = self.value(x).len() / c;
        let bd = self.value(b).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i / per])
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(shape, out, Op::ChannelBias { x, b }, &[x, b])
    }

    pub fn avg_pool3d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, fine, coarse) = conv::pool_dims(self.value(x).shape(), factor)?;
        let out = conv::avg_pool_forward(c, fine, factor, self.value(x).data());
        self.push(
            vec![c, coarse[0], coarse[1], coarse[2]],
            out,
            Op::AvgPool { x, factor },
            &[x],
        )
    }

    pub fn upsample_nearest3d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, coarse) = self.value(x).volume_dims()?;
        if factor == 0 {
            return Err(Error::dim("upsampling factor must be at least 1"));
        }
        let fine = coarse
            .iter()
            .map(|s| s.checked_mul(factor))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::dim("upsampled shape overflows"))?;
        let out = conv::upsample_forward(c, coarse, factor, self.value(x).data());
        self.push(
            vec![c, fine[0], fine[1], fine[2]],
            out,
            Op::Upsample { x, factor },
            &[x],
        )
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat_channels needs at least one input"))?;
        let (_, spatial) = self.value(*first).volume_dims()?;
        let mut channels = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (c, s) = self.value(x).volume_dims()?;
            if s != spatial {
                return Err(Error::dim(format!(
                    "concat_channels: spatial shape {s:?} differs from {spatial:?}"
                )));
            }
            channels += c;
            out.extend_from_slice(self.value(x).data());
        }
        self.push(
            vec![channels, spatial[0], spatial[1], spatial[2]],
            out,
            Op::Concat { xs: xs.to_vec() },
            xs,
        )
    }

    /// Channels `start..start + len` of a C×D×H×W tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, spatial) = self.value(x).volume_dims()?;
        if len == 0 || start + len > c {
            return Err(Error::dim(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let per: usize = spatial.iter().product();
        let out = self.value(x).data()[start * per..(start + len) * per].to_vec();
        self.push(
            vec![len, spatial[0], spatial[1], spatial[2]],
            out,
            Op::SliceChannels { x, start },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Reshape { x }, &[x])
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, vec![n])
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x).map(f);
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), op, &[x])
    }

    /// Logistic function, evaluated without overflow for large |x|.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    /// `x · sigmoid(x)`, the smooth activation used inside the network.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * sigmoid(v), Op::Silu { x })
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("ln of non-positive value {v}")));
        }
        self.unary(x, f64::ln, Op::Ln { x })
    }

    /// Elementwise map with a caller-supplied derivative `deriv(x, y)`.
    pub fn map(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        deriv: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        self.unary(
            x,
            f,
            Op::Map {
                x,
                deriv: Box::new(deriv),
            },
        )
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(op.name(), self.value(a), self.value(b))?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        self.push(vec![1], vec![m], Op::Mean { x }, &[x])
    }

    /// Mean binary cross entropy between probabilities `pred` and targets in
    /// `[0, 1]` (hard or soft). Probabilities are clamped to
    /// `[PROB_CLAMP, 1 − PROB_CLAMP]` before the logs.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        same_shape("bce", self.value(pred), target)?;
        check_unit_interval("bce prediction", self.value(pred).data())?;
        check_unit_interval("bce target", target.data())?;
        let n = target.len() as f64;
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| bce_term(p, y))
            .sum();
        self.push(
            vec![1],
            vec![total / n],
            Op::Bce {
                pred,
                target: target.data().to_vec(),
            },
            &[pred],
        )
    }

    /// Smoothed soft Dice loss `1 − (2Σps + eps)/(Σp + Σs + eps)`.
    pub fn soft_dice(&mut self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        same_shape("dice", self.value(pred), target)?;
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Domain(format!("dice smoothing must be positive, got {eps}")));
        }
        let (inter, total) = dice_sums(self.value(pred).data(), target.data());
        let loss = 1.0 - (2.0 * inter + eps) / (total + eps);
        self.push(
            vec![1],
            vec![loss],
            Op::SoftDice {
                pred,
                target: target.data().to_vec(),
                eps,
            },
            &[pred],
        )
    }

    /// Reverse pass from the scalar `loss`.
    ///
    /// Each node is visited once, in reverse recording order; only nodes on
    /// a path to a `param` leaf receive gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter()) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite gradient flowing through {}",
                        node.op.name()
                    )));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let mut acc = |v: Var, data: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(&data) {
                        *a += b;
                    }
                }
                slot @ None => {
                    let shape = self.nodes[v.0].value.shape().to_vec();
                    *slot = Some(Tensor::from_parts(shape, data));
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let (m, n) = (gd.len(), xd.len());
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; n];
                    for (i, gi) in gd.iter().enumerate() {
                        for (o, wij) in gx.iter_mut().zip(&wd[i * n..(i + 1) * n]) {
                            *o += gi * wij;
                        }
                    }
                    acc(*x, gx);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; m * n];
                    for (i, gi) in gd.iter().enumerate() {
                        for (o, xj) in gw[i * n..(i + 1) * n].iter_mut().zip(xd) {
                            *o = gi * xj;
                        }
                    }
                    acc(*w, gw);
                }
                acc(*b, gd.to_vec());
            }
            Op::Conv3d { x, k, spec } => {
                let (gx, gk) =
                    conv::conv3d_backward(spec, self.value(*x).data(), self.value(*k).data(), gd);
                acc(*x, gx);
                acc(*k, gk);
            }
            Op::ChannelBias { x, b } => {
                let c = self.value(*b).len();
                let per = gd.len() / c;
                let gb = gd.chunks(per).map(|ch| ch.iter().sum()).collect();
                acc(*x, gd.to_vec());
                acc(*b, gb);
            }
            Op::AvgPool { x, factor } => {
                let (c, fine) = self.value(*x).volume_dims().expect("checked in forward");
                acc(*x, conv::avg_pool_backward(c, fine, *factor, gd));
            }
            Op::Upsample { x, factor } => {
                let (c, coarse) = self.value(*x).volume_dims().expect("checked in forward");
                acc(*x, conv::upsample_backward(c, coarse, *factor, gd));
            }
            Op::Concat { xs } => {
                let mut start = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    acc(x, gd[start..start + len].to_vec());
                    start += len;
                }
            }
            Op::SliceChannels { x, start } => {
                let xv = self.value(*x);
                let (_, spatial) = xv.volume_dims().expect("checked in forward");
                let off = start * spatial.iter().product::<usize>();
                let mut gx = vec![0.0; xv.len()];
                gx[off..off + gd.len()].copy_from_slice(gd);
                acc(*x, gx);
            }
            Op::Reshape { x } => acc(*x, gd.to_vec()),
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(*x, gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Silu { x } => {
                let xd = self.value(*x).data();
                acc(
                    *x,
                    gd.iter()
                        .zip(xd)
                        .map(|(g, &v)| {
                            let s = sigmoid(v);
                            g * s * (1.0 + v * (1.0 - s))
                        })
                        .collect(),
                );
            }
            Op::Ln { x } => {
                let xd = self.value(*x).data();
                acc(*x, gd.iter().zip(xd).map(|(g, v)| g / v).collect());
            }
            Op::Map { x, deriv } => {
                let xd = self.value(*x).data();
                let y = node.value.data();
                acc(
                    *x,
                    gd.iter()
                        .zip(xd.iter().zip(y))
                        .map(|(g, (&xv, &yv))| g * deriv(xv, yv))
                        .collect(),
                );
            }
            Op::Add { a, b } => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub { a, b } => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|g| -g).collect());
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gd.iter().zip(bd).map(|(g, v)| g * v).collect());
                acc(*b, gd.iter().zip(ad).map(|(g, v)| g * v).collect());
            }
            Op::Scale { x, factor } => acc(*x, gd.iter().map(|g| g * factor).collect()),
            Op::AddScalar { x } => acc(*x, gd.to_vec()),
            Op::Sum { x } => acc(*x, vec![gd[0]; self.value(*x).len()]),
            Op::Mean { x } => {
                let n = self.value(*x).len();
                acc(*x, vec![gd[0] / n as f64; n]);
            }
            Op::Bce { pred, target } => {
                let pd = self.value(*pred).data();
                let scale = gd[0] / target.len() as f64;
                acc(
                    *pred,
                    pd.iter()
                        .zip(target)
                        .map(|(&p, &y)| {
                            if p < PROB_CLAMP || p > 1.0 - PROB_CLAMP {
                                0.0
                            } else {
                                scale * (p - y) / (p * (1.0 - p))
                            }
                        })
                        .collect(),
                );
            }
            Op::SoftDice { pred, target, eps } => {
                let (inter, total) = dice_sums(self.value(*pred).data(), target);
                let num = 2.0 * inter + eps;
                let den = total + eps;
                let g0 = gd[0];
                acc(
                    *pred,
                    target
                        .iter()
                        .map(|s| -g0 * (2.0 * s * den - num) / (den * den))
                        .collect(),
                );
            }
        }
    }
}

/// One clamped cross-entropy term.
pub(crate) fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn dice_sums(pred: &[f64], target: &[f64]) -> (f64, f64) {
    let inter: f64 = pred.iter().zip(target).map(|(p, s)| p * s).sum();
    let total: f64 = pred.iter().sum::<f64>() + target.iter().sum::<f64>();
    (inter, total)
}
