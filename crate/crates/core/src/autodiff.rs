//! Reverse-mode differentiation over a linear operation record.
//!
//! A [`Graph`] appends one node per executed operation, so inputs always
//! precede their consumers. [`Graph::backward`] walks the record once in
//! reverse, accumulating gradients additively in record order.

use crate::conv::{conv_backward, conv_forward, ConvGeom, ConvShapes};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialAxis {
    Height,
    Width,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        shapes: ConvShapes,
    },
    GroupNorm {
        input: Var,
        scale: Var,
        shift: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu(Var),
    Upsample {
        input: Var,
        factors: [usize; 3],
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    BoxFilter {
        input: Var,
        size: usize,
    },
    AvgPool2(Var),
    SpatialDiff {
        input: Var,
        axis: SpatialAxis,
    },
    CenterChannels(Var),
    ConcatFrames(Vec<Var>),
    SelectChannels {
        input: Var,
        indices: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record plus the values it produced.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], contribution: Vec<f64>) {
    match slot {
        Some(t) => t.data_mut().iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
        None => *slot = Some(Tensor::from_parts(shape.to_vec(), contribution)),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Dimension, "{}: shapes {:?} and {:?} differ", what, a.shape(), b.shape());
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Grouped causal convolution. Rank-4 weights `[C_out, C_in, kh, kw]` are
    /// treated as frame-wise kernels with `kt = 1`.
    pub fn conv(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        groups: usize,
    ) -> Result<Var> {
        let wshape = self.value(weight).shape().to_vec();
        let w5 = match wshape.as_slice() {
            &[o, i, kt, kh, kw] => [o, i, kt, kh, kw],
            &[o, i, kh, kw] => [o, i, 1, kh, kw],
            other => bail!(Dimension, "conv weight must be rank 4 or 5, got {:?}", other),
        };
        let geom = ConvGeom::new([w5[2], w5[3], w5[4]])
            .with_stride(stride)
            .with_groups(groups);
        let shapes = ConvShapes::resolve(self.value(input).shape(), &w5, geom)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [shapes.c_out] {
                bail!(
                    Dimension,
                    "bias shape {:?} does not match {} output channels",
                    self.value(b).shape(),
                    shapes.c_out
                );
            }
        }
        let out = conv_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &shapes,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(shapes.out_shape(), out),
            Op::Conv {
                input,
                weight,
                bias,
                shapes,
            },
            rg,
        ))
    }

    /// Group normalization with statistics taken per frame, so that frame
    /// `t` of the output depends on frame `t` of the input only.
    pub fn group_norm(&mut self, input: Var, scale: Var, shift: Var, groups: usize, eps: f64) -> Result<Var> {
        let x = self.value(input);
        let [c, t, h, w] = x.dims4()?;
        if groups == 0 || c % groups != 0 {
            bail!(Dimension, "{} groups do not divide {} channels", groups, c);
        }
        if self.value(scale).shape() != [c] || self.value(shift).shape() != [c] {
            bail!(Dimension, "norm affine parameters must have shape [{}]", c);
        }
        let cg = c / groups;
        let hw = h * w;
        let n = (cg * hw) as f64;
        let xd = x.data();
        let sd = self.value(scale).data();
        let bd = self.value(shift).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; groups * t];
        for g in 0..groups {
            for ti in 0..t {
                let mut sum = 0.0;
                for ci in g * cg..(g + 1) * cg {
                    sum += xd[(ci * t + ti) * hw..][..hw].iter().sum::<f64>();
                }
                let mean = sum / n;
                let mut var = 0.0;
                for ci in g * cg..(g + 1) * cg {
                    var += xd[(ci * t + ti) * hw..][..hw]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let r = 1.0 / (var / n + eps).sqrt();
                rstd[g * t + ti] = r;
                for ci in g * cg..(g + 1) * cg {
                    let off = (ci * t + ti) * hw;
                    for k in off..off + hw {
                        let z = (xd[k] - mean) * r;
                        xhat[k] = z;
                        out[k] = z * sd[ci] + bd[ci];
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(scale) || self.rg(shift);
        let shape = x.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GroupNorm {
                input,
                scale,
                shift,
                groups,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    /// Nearest-neighbour repetition along `(frames, height, width)`.
    pub fn upsample(&mut self, input: Var, factors: [usize; 3]) -> Result<Var> {
        if factors.contains(&0) {
            bail!(Contract, "upsample factors must be >= 1, got {:?}", factors);
        }
        let x = self.value(input);
        let [c, t, h, w] = x.dims4()?;
        let [ft, fh, fw] = factors;
        let (to, ho, wo) = (t * ft, h * fh, w * fw);
        let xd = x.data();
        let mut out = vec![0.0; c * to * ho * wo];
        for ci in 0..c {
            for tt in 0..to {
                for hh in 0..ho {
                    let src = &xd[((ci * t + tt / ft) * h + hh / fh) * w..][..w];
                    let dst = &mut out[((ci * to + tt) * ho + hh) * wo..][..wo];
                    for (ww, d) in dst.iter_mut().enumerate() {
                        *d = src[ww / fw];
                    }
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::from_parts(vec![c, to, ho, wo], out),
            Op::Upsample { input, factors },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "elementwise op")?;
        let out = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(out, Op::Sqrt(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Mean over every `size x size` spatial window that fits inside each
    /// frame (no padding).
    pub fn box_filter(&mut self, input: Var, size: usize) -> Result<Var> {
        let x = self.value(input);
        let [c, t, h, w] = x.dims4()?;
        if size == 0 || size > h || size > w {
            bail!(Dimension, "window {} does not fit a {}x{} frame", size, h, w);
        }
        let (ho, wo) = (h - size + 1, w - size + 1);
        let norm = 1.0 / (size * size) as f64;
        let xd = x.data();
        let mut out = vec![0.0; c * t * ho * wo];
        for plane in 0..c * t {
            let src = &xd[plane * h * w..][..h * w];
            let dst = &mut out[plane * ho * wo..][..ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for di in 0..size {
                        s += src[(i + di) * w + j..][..size].iter().sum::<f64>();
                    }
                    dst[i * wo + j] = s * norm;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::from_parts(vec![c, t, ho, wo], out),
            Op::BoxFilter { input, size },
            rg,
        ))
    }

    /// 2x2 spatial average pooling (trailing odd row/column dropped).
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [c, t, h, w] = x.dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            bail!(Dimension, "cannot pool a {}x{} frame", h, w);
        }
        let xd = x.data();
        let mut out = vec![0.0; c * t * ho * wo];
        for plane in 0..c * t {
            let src = &xd[plane * h * w..][..h * w];
            for i in 0..ho {
                for j in 0..wo {
                    out[(plane * ho + i) * wo + j] = 0.25
                        * (src[2 * i * w + 2 * j]
                            + src[2 * i * w + 2 * j + 1]
                            + src[(2 * i + 1) * w + 2 * j]
                            + src[(2 * i + 1) * w + 2 * j + 1]);
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::from_parts(vec![c, t, ho, wo], out), Op::AvgPool2(input), rg))
    }

    /// Forward difference along one spatial axis. Both axes crop to
    /// `(H-1) x (W-1)` so their outputs align.
    pub fn spatial_diff(&mut self, input: Var, axis: SpatialAxis) -> Result<Var> {
        let x = self.value(input);
        let [c, t, h, w] = x.dims4()?;
        if h < 2 || w < 2 {
            bail!(Dimension, "spatial difference needs frames of at least 2x2");
        }
        let (ho, wo) = (h - 1, w - 1);
        let step = match axis {
            SpatialAxis::Height => w,
            SpatialAxis::Width => 1,
        };
        let xd = x.data();
        let mut out = vec![0.0; c * t * ho * wo];
        for plane in 0..c * t {
            let src = &xd[plane * h * w..][..h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let k = i * w + j;
                    out[(plane * ho + i) * wo + j] = src[k + step] - src[k];
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::from_parts(vec![c, t, ho, wo], out),
            Op::SpatialDiff { input, axis },
            rg,
        ))
    }

    /// Subtracts each channel's mean over all of its positions.
    pub fn center_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let Some(&c) = x.shape().first() else {
            bail!(Dimension, "cannot center a scalar");
        };
        let inner = x.numel() / c.max(1);
        let mut out = x.data().to_vec();
        for chunk in out.chunks_mut(inner.max(1)) {
            let m = chunk.iter().sum::<f64>() / inner as f64;
            chunk.iter_mut().for_each(|v| *v -= m);
        }
        let shape = x.shape().to_vec();
        let rg = self.rg(input);
        Ok(self.push(Tensor::from_parts(shape, out), Op::CenterChannels(input), rg))
    }

    pub fn concat_frames(&mut self, inputs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_frames(&parts)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::ConcatFrames(inputs.to_vec()), rg))
    }

    pub fn select_channels(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(input).select_axis0(indices)?;
        let rg = self.rg(input);
        Ok(self.push(
            out,
            Op::SelectChannels {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// required one. Only leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", lv.shape());
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Vec<f64>) {
        if self.rg(v) {
            accumulate(&mut grads[v.0], self.value(v).shape(), contribution);
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                shapes,
            } => {
                let need = (self.rg(*input), self.rg(*weight), bias.is_some_and(|b| self.rg(b)));
                let cg = conv_backward(self.value(*input).data(), self.value(*weight).data(), gd, shapes, need);
                if let Some(gi) = cg.input {
                    self.send(grads, *input, gi);
                }
                if let Some(gw) = cg.weight {
                    self.send(grads, *weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    self.send(grads, *b, gb);
                }
            }
            Op::GroupNorm {
                input,
                scale,
                shift,
                groups,
                xhat,
                rstd,
            } => {
                let [c, t, h, w] = node.value.dims4().expect("norm output is rank 4");
                let hw = h * w;
                let cg = c / groups;
                let n = (cg * hw) as f64;
                let sd = self.value(*scale).data();
                let mut gscale = vec![0.0; c];
                let mut gshift = vec![0.0; c];
                let mut gx = vec![0.0; gd.len()];
                for ci in 0..c {
                    for ti in 0..t {
                        let off = (ci * t + ti) * hw;
                        for k in off..off + hw {
                            gscale[ci] += gd[k] * xhat[k];
                            gshift[ci] += gd[k];
                        }
                    }
                }
                if self.rg(*input) {
                    for gi in 0..*groups {
                        for ti in 0..t {
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for ci in gi * cg..(gi + 1) * cg {
                                let off = (ci * t + ti) * hw;
                                for k in off..off + hw {
                                    let d = gd[k] * sd[ci];
                                    sum_d += d;
                                    sum_dx += d * xhat[k];
                                }
                            }
                            let r = rstd[gi * t + ti];
                            for ci in gi * cg..(gi + 1) * cg {
                                let off = (ci * t + ti) * hw;
                                for k in off..off + hw {
                                    let d = gd[k] * sd[ci];
                                    gx[k] = r / n * (n * d - sum_d - xhat[k] * sum_dx);
                                }
                            }
                        }
                    }
                    self.send(grads, *input, gx);
                }
                self.send(grads, *scale, gscale);
                self.send(grads, *shift, gshift);
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let out = x
                    .iter()
                    .zip(gd)
                    .map(|(&x, &g)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.send(grads, *a, out);
            }
            Op::Upsample { input, factors } => {
                let [c, t, h, w] = self.value(*input).dims4().expect("rank 4");
                let [ft, fh, fw] = *factors;
                let (to, ho, wo) = (t * ft, h * fh, w * fw);
                let mut gx = vec![0.0; c * t * h * w];
                for ci in 0..c {
                    for tt in 0..to {
                        for hh in 0..ho {
                            let src = &gd[((ci * to + tt) * ho + hh) * wo..][..wo];
                            let dst = &mut gx[((ci * t + tt / ft) * h + hh / fh) * w..][..w];
                            for (ww, &v) in src.iter().enumerate() {
                                dst[ww / fw] += v;
                            }
                        }
                    }
                }
                self.send(grads, *input, gx);
            }
            Op::Add(a, b) => {
                self.send(grads, *a, gd.to_vec());
                self.send(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, gd.to_vec());
                self.send(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.send(grads, *a, gd.iter().zip(bd).map(|(g, y)| g * y).collect());
                self.send(grads, *b, gd.iter().zip(ad).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.send(grads, *a, gd.iter().zip(bd).map(|(g, y)| g / y).collect());
                let gb = gd
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.send(grads, *b, gb);
            }
            Op::Scale(a, c) => self.send(grads, *a, gd.iter().map(|g| g * c).collect()),
            Op::AddScalar(a) => self.send(grads, *a, gd.to_vec()),
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let out = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.send(grads, *a, out);
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                self.send(grads, *a, gd.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect());
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.send(grads, *a, gd.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.send(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.send(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::BoxFilter { input, size } => {
                let [c, t, h, w] = self.value(*input).dims4().expect("rank 4");
                let size = *size;
                let (ho, wo) = (h - size + 1, w - size + 1);
                let norm = 1.0 / (size * size) as f64;
                let mut gx = vec![0.0; c * t * h * w];
                for plane in 0..c * t {
                    let src = &gd[plane * ho * wo..][..ho * wo];
                    let dst = &mut gx[plane * h * w..][..h * w];
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = src[i * wo + j] * norm;
                            for di in 0..size {
                                dst[(i + di) * w + j..][..size].iter_mut().for_each(|d| *d += v);
                            }
                        }
                    }
                }
                self.send(grads, *input, gx);
            }
            Op::AvgPool2(a) => {
                let [c, t, h, w] = self.value(*a).dims4().expect("rank 4");
                let (ho, wo) = (h / 2, w / 2);
                let mut gx = vec![0.0; c * t * h * w];
                for plane in 0..c * t {
                    let dst = &mut gx[plane * h * w..][..h * w];
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = 0.25 * gd[(plane * ho + i) * wo + j];
                            dst[2 * i * w + 2 * j] += v;
                            dst[2 * i * w + 2 * j + 1] += v;
                            dst[(2 * i + 1) * w + 2 * j] += v;
                            dst[(2 * i + 1) * w + 2 * j + 1] += v;
                        }
                    }
                }
                self.send(grads, *a, gx);
            }
            Op::SpatialDiff { input, axis } => {
                let [c, t, h, w] = self.value(*input).dims4().expect("rank 4");
                let (ho, wo) = (h - 1, w - 1);
                let step = match axis {
                    SpatialAxis::Height => w,
                    SpatialAxis::Width => 1,
                };
                let mut gx = vec![0.0; c * t * h * w];
                for plane in 0..c * t {
                    let dst = &mut gx[plane * h * w..][..h * w];
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = gd[(plane * ho + i) * wo + j];
                            let k = i * w + j;
                            dst[k + step] += v;
                            dst[k] -= v;
                        }
                    }
                }
                self.send(grads, *input, gx);
            }
            Op::CenterChannels(a) => {
                let c = node.value.shape()[0];
                let inner = gd.len() / c.max(1);
                let mut gx = gd.to_vec();
                for chunk in gx.chunks_mut(inner.max(1)) {
                    let m = chunk.iter().sum::<f64>() / inner as f64;
                    chunk.iter_mut().for_each(|v| *v -= m);
                }
                self.send(grads, *a, gx);
            }
            Op::ConcatFrames(inputs) => {
                let [c, _, h, w] = node.value.dims4().expect("rank 4");
                let total: usize = node.value.shape()[1];
                let mut t0 = 0;
                for &v in inputs {
                    let tv = self.value(v).shape()[1];
                    let mut part = Vec::with_capacity(c * tv * h * w);
                    for ci in 0..c {
                        let start = (ci * total + t0) * h * w;
                        part.extend_from_slice(&gd[start..start + tv * h * w]);
                    }
                    self.send(grads, v, part);
                    t0 += tv;
                }
            }
            Op::SelectChannels { input, indices } => {
                let src = self.value(*input);
                let c = src.shape()[0];
                let inner = src.numel() / c.max(1);
                let mut gx = vec![0.0; src.numel()];
                for (row, &i) in indices.iter().enumerate() {
                    gx[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&gd[row * inner..(row + 1) * inner])
                        .for_each(|(d, s)| *d += s);
                }
                self.send(grads, *input, gx);
            }
        }
    }
}
