use std::fmt;
use std::sync::Arc;

use super::ops::{self, conv, deform, dynfilter, sample, shuffle};
use super::Conv2dOpts;
use super::Tensor;
use crate::error::{Error, Result};

/// A fixed linear operator usable inside a graph; gradients flow through
/// its adjoint.
pub trait LinearMap: Send + Sync {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn adjoint(&self, y: &Tensor) -> Result<Tensor>;
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Conv { opts: Conv2dOpts, has_bias: bool },
    Deform { has_bias: bool },
    Bilinear,
    DynFilter { radius: usize, scale: usize },
    PixelShuffle(usize),
    PixelUnshuffle(usize),
    LeakyRelu(f64),
    Sigmoid,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Concat(Vec<usize>),
    Narrow { start: usize },
    Sum,
    Charbonnier(f64),
    MatMul,
    AddBias,
    Linear(Arc<dyn LinearMap>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Option<Op>,
    inputs: Vec<Var>,
}

/// Tape of operations for reverse-mode differentiation.
///
/// A graph is single-use: after [`Graph::backward`] it only serves reads of
/// values and leaf gradients. Build a fresh graph for the next step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
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

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is collected.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: None,
            inputs: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Result<Var> {
        if self.consumed {
            return Err(Error::Graph("graph already differentiated".into()));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: requires_grad.then_some(op),
            inputs,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), opts)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            out,
            Op::Conv {
                opts,
                has_bias: b.is_some(),
            },
            inputs,
        )
    }

    pub fn deformable_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        offsets: Var,
        modulation: Var,
    ) -> Result<Var> {
        let out = deform::deformable_conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            self.value(offsets),
            self.value(modulation),
        )?;
        let mut inputs = vec![x, w, offsets, modulation];
        inputs.extend(b);
        self.push(
            out,
            Op::Deform {
                has_bias: b.is_some(),
            },
            inputs,
        )
    }

    pub fn bilinear_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        let out = sample::bilinear_sample(self.value(x), self.value(coords))?;
        self.push(out, Op::Bilinear, vec![x, coords])
    }

    pub fn dynamic_local_filter(
        &mut self,
        z: Var,
        c: Var,
        r: Var,
        radius: usize,
        scale: usize,
    ) -> Result<Var> {
        let out = dynfilter::dynamic_local_filter(
            self.value(z),
            self.value(c),
            self.value(r),
            radius,
            scale,
        )?;
        self.push(out, Op::DynFilter { radius, scale }, vec![z, c, r])
    }

    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = shuffle::pixel_shuffle(self.value(x), s)?;
        self.push(out, Op::PixelShuffle(s), vec![x])
    }

    pub fn pixel_unshuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = shuffle::pixel_unshuffle(self.value(x), s)?;
        self.push(out, Op::PixelUnshuffle(s), vec![x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = ops::leaky_relu(self.value(x), slope);
        self.push(out, Op::LeakyRelu(slope), vec![x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid, vec![x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).scale(factor);
        self.push(out, Op::Scale(factor), vec![x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&values)?;
        let widths = values.iter().map(|t| t.shape()[1]).collect();
        self.push(out, Op::Concat(widths), parts.to_vec())
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow_channels(start, len)?;
        self.push(out, Op::Narrow { start }, vec![x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum, vec![x])
    }

    /// Summed Charbonnier penalty `Σ √((u − v)² + ε²)`.
    pub fn charbonnier(&mut self, u: Var, v: Var, eps: f64) -> Result<Var> {
        let out = Tensor::scalar(ops::charbonnier(self.value(u), self.value(v), eps)?);
        self.push(out, Op::Charbonnier(eps), vec![u, v])
    }

    /// Product of rank-2 tensors `(m, k) · (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b), false, false)?;
        self.push(out, Op::MatMul, vec![a, b])
    }

    /// Adds a length-`n` bias to every row of an `(m, n)` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = *xv.shape().last().unwrap_or(&0);
        if xv.rank() != 2 || bv.shape() != [n] {
            return Err(Error::shape(format!(
                "add_bias: {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        self.push(out, Op::AddBias, vec![x, b])
    }

    pub fn linear(&mut self, x: Var, map: Arc<dyn LinearMap>) -> Result<Var> {
        let out = map.apply(self.value(x))?;
        self.push(out, Op::Linear(map), vec![x])
    }

    /// Populates leaf gradients of the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph(
                "backward already ran on this graph; rebuild it with a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        self.nodes[loss.0].grad = Some(seed);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(grad_out) = node.grad.as_ref() else {
                continue;
            };
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let grads = op.backward(&inputs, &node.value, grad_out, &need)?;
            let targets = node.inputs.clone();
            // interior gradients are no longer needed once propagated
            self.nodes[idx].grad = None;
            for (var, g) in targets.into_iter().zip(grads) {
                let Some(g) = g else { continue };
                let slot = &mut self.nodes[var.0].grad;
                match slot {
                    Some(acc) => acc.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    use super::gemm::{gemm, MatRef};
    let (&[ar, ac], &[br, bc]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    let mut am = MatRef::new(a.data(), ar, ac);
    let mut bm = MatRef::new(b.data(), br, bc);
    if ta {
        am = am.t();
    }
    if tb {
        bm = bm.t();
    }
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(am, bm, 0.0, &mut out);
    Tensor::new(&[m, n], out)
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Conv { .. } => "conv2d",
            Op::Deform { .. } => "deformable_conv2d",
            Op::Bilinear => "bilinear_sample",
            Op::DynFilter { .. } => "dynamic_local_filter",
            Op::PixelShuffle(_) => "pixel_shuffle",
            Op::PixelUnshuffle(_) => "pixel_unshuffle",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Concat(_) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Sum => "sum",
            Op::Charbonnier(_) => "charbonnier",
            Op::MatMul => "matmul",
            Op::AddBias => "add_bias",
            Op::Linear(_) => "linear",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        g: &Tensor,
        need: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let want = |i: usize| need.get(i).copied().unwrap_or(false);
        Ok(match self {
            Op::Conv { opts, has_bias } => {
                let grads = conv::conv2d_backward(
                    inputs[0],
                    inputs[1],
                    *has_bias,
                    *opts,
                    g,
                    [want(0), want(1), want(2)],
                )?;
                let mut v = vec![grads.input, grads.weight];
                if *has_bias {
                    v.push(grads.bias);
                }
                v
            }
            Op::Deform { has_bias } => {
                let d = deform::deformable_conv2d_backward(
                    inputs[0], inputs[1], inputs[2], inputs[3], g,
                )?;
                let mut v = vec![Some(d.input), Some(d.weight), Some(d.offsets), Some(d.modulation)];
                if *has_bias {
                    v.push(Some(d.bias));
                }
                v
            }
            Op::Bilinear => {
                let (dx, dc) = sample::bilinear_sample_backward(inputs[0], inputs[1], g)?;
                vec![Some(dx), Some(dc)]
            }
            Op::DynFilter { radius, scale } => {
                let (dz, dc) =
                    dynfilter::dynamic_local_filter_backward(inputs[0], inputs[1], g, *radius, *scale)?;
                vec![Some(dz), Some(dc), Some(g.clone())]
            }
            Op::PixelShuffle(s) => vec![Some(shuffle::pixel_unshuffle(g, *s)?)],
            Op::PixelUnshuffle(s) => vec![Some(shuffle::pixel_shuffle(g, *s)?)],
            Op::LeakyRelu(slope) => {
                vec![Some(inputs[0].zip_map(g, |x, gv| if x >= 0.0 { gv } else { slope * gv })?)]
            }
            Op::Sigmoid => vec![Some(output.zip_map(g, |y, gv| gv * y * (1.0 - y))?)],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
            Op::Mul => vec![
                want(0).then(|| inputs[1].zip_map(g, |b, gv| b * gv)).transpose()?,
                want(1).then(|| inputs[0].zip_map(g, |a, gv| a * gv)).transpose()?,
            ],
            Op::Scale(f) => vec![Some(g.scale(*f))],
            Op::Concat(widths) => {
                let mut start = 0;
                let mut v = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    v.push(want(i).then(|| g.narrow_channels(start, w)).transpose()?);
                    start += w;
                }
                v
            }
            Op::Narrow { start } => {
                let (n, c, h, w) = inputs[0].dims4()?;
                let len = output.shape()[1];
                let mut dx = Tensor::zeros(inputs[0].shape());
                let plane = h * w;
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    let src = b * len * plane;
                    dx.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[src..src + len * plane]);
                }
                vec![Some(dx)]
            }
            Op::Sum => vec![Some(Tensor::full(inputs[0].shape(), g.item()))],
            Op::Charbonnier(eps) => {
                let gs = g.item();
                let du = inputs[0].zip_map(inputs[1], |a, b| {
                    let d = a - b;
                    gs * d / (d * d + eps * eps).sqrt()
                })?;
                let dv = du.scale(-1.0);
                vec![Some(du), Some(dv)]
            }
            Op::MatMul => vec![
                want(0).then(|| matmul(g, inputs[1], false, true)).transpose()?,
                want(1).then(|| matmul(inputs[0], g, true, false)).transpose()?,
            ],
            Op::AddBias => {
                let n = inputs[1].len();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::new(&[n], db)?)]
            }
            Op::Linear(map) => vec![Some(map.adjoint(g)?)],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn chain_rule_through_scales() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[4], |i| i as f64 - 1.5));
        let a = g.scale(x, 3.0).unwrap();
        let b = g.scale(a, 2.0).unwrap();
        let s = g.sum(b).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0; 4]);
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[3], 2.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[5.0; 3]);
    }

    #[test]
    fn second_backward_and_non_scalar_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[3], 1.0));
        assert!(g.backward(x).is_err());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
        assert!(g.scale(x, 2.0).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.input(Tensor::full(&[2], 1.0));
        let p = g.param(Tensor::full(&[2], 3.0));
        let y = g.mul(c, p).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_results_are_reported() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1], f64::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }
}
