//! Reverse-mode differentiation over a recorded tape of tensor ops.
//!
//! Values are pushed onto a [`Tape`] as leaves (trainable) or constants, every
//! op appends a node holding its output and the handles it needs for the
//! backward pass, and [`Tape::backward`] walks the nodes in reverse applying
//! each op's vector-Jacobian product.
//!
//! ```
//! use harmonize_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, SamplingPlan};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Quotient with `x / 0 := 0` (and zero gradient there).
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Abs(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    AddBias(Var, Var),
    Upsample2x(Var),
    AvgPool(Var, usize),
    Concat(Vec<Var>),
    BoxFilter(Var, usize),
    Sample(Var, Arc<SamplingPlan>),
    /// `fg * m + bg * (1 - m)` with `m` a constant `[1,H,W]` mask.
    Blend {
        fg: Var,
        bg: Var,
        mask: Arc<Tensor>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded recording of tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every recorded value that
/// depends on a leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn bilinear_check(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a value that gradients are taken with respect to.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a value that is treated as constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Elementwise quotient; positions with a zero denominator yield zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out =
            self.value(a).zip_map(
                self.value(b),
                "div",
                |x, y| if y == 0.0 { 0.0 } else { x / y },
            )?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Div(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.needs(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let ng = self.needs(a);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), stride, pad)?;
        let ng = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            ng,
        ))
    }

    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let out = ops::add_bias(self.value(input), self.value(bias))?;
        let ng = self.needs(input) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(input, bias), ng))
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let out = ops::upsample2x(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Upsample2x(a), ng))
    }

    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Result<Var> {
        let out = ops::avg_pool(self.value(a), factor)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::AvgPool(a, factor), ng))
    }

    /// Channel concatenation of `[C_i,H,W]` values.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&vals)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    pub fn box_filter(&mut self, a: Var, radius: usize) -> Result<Var> {
        let out = ops::box_filter(self.value(a), radius)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::BoxFilter(a, radius), ng))
    }

    /// Resamples every channel of `a` through a precomputed bilinear plan.
    pub fn sample(&mut self, a: Var, plan: Arc<SamplingPlan>) -> Result<Var> {
        let out = plan.apply(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Sample(a, plan), ng))
    }

    /// `fg * mask + bg * (1 - mask)`, with the mask broadcast over channels.
    ///
    /// Where the mask is exactly 0 (resp. 1) the output copies `bg` (resp.
    /// `fg`) bit for bit.
    pub fn blend(&mut self, fg: Var, bg: Var, mask: Arc<Tensor>) -> Result<Var> {
        let (f, b) = (self.value(fg), self.value(bg));
        bilinear_check(f, b, "blend")?;
        let (c, h, w) = f.chw()?;
        if mask.shape() != [1, h, w] {
            return Err(shape_err(
                "blend",
                format!("mask {:?} for image {:?}", mask.shape(), f.shape()),
            ));
        }
        let m = mask.data();
        let plane = h * w;
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            for i in 0..plane {
                let k = ch * plane + i;
                out[k] = match m[i] {
                    0.0 => b.data()[k],
                    1.0 => f.data()[k],
                    mv => f.data()[k] * mv + b.data()[k] * (1.0 - mv),
                };
            }
        }
        let out = Tensor::new(&[c, h, w], out)?;
        let ng = self.needs(fg) || self.needs(bg);
        Ok(self.push(out, Op::Blend { fg, bg, mask }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let ng = self.needs(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// Back-propagates from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::ones(self.value(out).shape()));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            let mut contribs: Vec<(Var, Tensor)> = Vec::with_capacity(2);
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g.clone()));
                }
                Op::Sub(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g.scale(-1.0)));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        contribs.push((*a, g.mul(vb)?));
                    }
                    if self.needs(*b) {
                        contribs.push((*b, g.mul(va)?));
                    }
                }
                Op::Div(a, b) => {
                    let vb = self.value(*b);
                    if self.needs(*a) {
                        let ga =
                            g.zip_map(vb, "div", |gg, y| if y == 0.0 { 0.0 } else { gg / y })?;
                        contribs.push((*a, ga));
                    }
                    if self.needs(*b) {
                        let q = &node.value;
                        let gq = g.mul(q)?;
                        let gb =
                            gq.zip_map(vb, "div", |gg, y| if y == 0.0 { 0.0 } else { -gg / y })?;
                        contribs.push((*b, gb));
                    }
                }
                Op::Scale(a, s) => contribs.push((*a, g.scale(*s))),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    contribs.push((
                        *a,
                        g.zip_map(x, "relu", |gg, v| if v > 0.0 { gg } else { 0.0 })?,
                    ));
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let s = *slope;
                    contribs.push((
                        *a,
                        g.zip_map(x, "leaky_relu", |gg, v| if v > 0.0 { gg } else { s * gg })?,
                    ));
                }
                Op::Tanh(a) => {
                    contribs.push((
                        *a,
                        g.zip_map(&node.value, "tanh", |gg, t| gg * (1.0 - t * t))?,
                    ));
                }
                Op::Abs(a) => {
                    let x = self.value(*a);
                    contribs.push((*a, g.zip_map(x, "abs", |gg, v| gg * sign(v))?));
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (x, k) = (self.value(*input), self.value(*kernel));
                    if self.needs(*input) {
                        contribs.push((
                            *input,
                            ops::conv2d_grad_input(x.shape(), k, &g, *stride, *pad)?,
                        ));
                    }
                    if self.needs(*kernel) {
                        contribs.push((
                            *kernel,
                            ops::conv2d_grad_kernel(x, k.shape(), &g, *stride, *pad)?,
                        ));
                    }
                }
                Op::AddBias(input, bias) => {
                    if self.needs(*bias) {
                        let (c, h, w) = g.chw()?;
                        let sums: Vec<f64> = (0..c)
                            .map(|ch| g.data()[ch * h * w..(ch + 1) * h * w].iter().sum())
                            .collect();
                        contribs.push((*bias, Tensor::new(self.value(*bias).shape(), sums)?));
                    }
                    contribs.push((*input, g.clone()));
                }
                Op::Upsample2x(a) => contribs.push((*a, ops::upsample2x_grad(&g)?)),
                Op::AvgPool(a, f) => contribs.push((*a, ops::avg_pool_grad(&g, *f)?)),
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.value(p).shape()[0];
                        if self.needs(p) {
                            contribs.push((p, g.channels(start, start + c)?));
                        }
                        start += c;
                    }
                }
                Op::BoxFilter(a, r) => contribs.push((*a, ops::box_filter_grad(&g, *r)?)),
                Op::Sample(a, plan) => contribs.push((*a, plan.apply_grad(&g)?)),
                Op::Blend { fg, bg, mask } => {
                    let (c, h, w) = g.chw()?;
                    let plane = h * w;
                    let m = mask.data();
                    let gf = Tensor::from_fn(&[c, h, w], |k| g.data()[k] * m[k % plane]);
                    let gb = Tensor::from_fn(&[c, h, w], |k| g.data()[k] * (1.0 - m[k % plane]));
                    contribs.push((*fg, gf));
                    contribs.push((*bg, gb));
                }
                Op::Sum(a) => {
                    contribs.push((*a, Tensor::full(self.value(*a).shape(), g.data()[0])));
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    contribs.push((*a, Tensor::full(self.value(*a).shape(), g.data()[0] / n)));
                }
            }
            grads[idx] = Some(g);
            for (v, c) in contribs {
                if !self.needs(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.axpy(1.0, &c)?,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Subgradient of `|x|`, taking 0 at the kink.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
        let c = tape.constant(Tensor::new(&[3], vec![2.0, 2.0, 2.0]).unwrap());
        let xc = tape.mul(x, c).unwrap();
        let xx = tape.mul(x, x).unwrap();
        let s = tape.add(xc, xx).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, -2.0, 8.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn div_by_zero_is_zero_with_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[2], vec![1.0, 3.0]).unwrap());
        let b = tape.leaf(Tensor::new(&[2], vec![0.0, 2.0]).unwrap());
        let q = tape.div(a, b).unwrap();
        assert_eq!(tape.value(q).data(), &[0.0, 1.5]);
        let loss = tape.sum(q);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 0.5]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0, -0.75]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn blend_is_exact_at_mask_extremes() {
        let mut tape = Tape::new();
        let fg = tape.constant(Tensor::full(&[2, 1, 3], 0.3));
        let bg =
            tape.constant(Tensor::new(&[2, 1, 3], vec![-0.0, 0.1, 0.7, 0.2, -0.5, 0.9]).unwrap());
        let mask = Arc::new(Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 0.5]).unwrap());
        let out = tape.blend(fg, bg, mask).unwrap();
        let v = tape.value(out).data();
        assert_eq!(v[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(v[1], 0.3);
        assert!((v[2] - 0.5).abs() < 1e-15);
        assert_eq!(v[3], 0.2);
    }
}
