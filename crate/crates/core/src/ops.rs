//! Eager versions of the decoder operators.
//!
//! These run a throwaway [`Graph`] and return the value. Training code uses
//! the graph methods directly so gradients can be taken.

use crate::autodiff::Graph;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Weights of one convolution layer in any of its operator forms.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvWeights {
    /// `[C_out, C_in, kt, kh, kw]` causal spatio-temporal kernel.
    Causal3d { kernel: Tensor, bias: Tensor },
    /// `[C_out, C_in, kh, kw]` kernel applied to each frame independently.
    Frame2d { kernel: Tensor, bias: Tensor },
    /// Per-channel `[C, 1, kt, kh, kw]` filter followed by a
    /// `[C_out, C, 1, 1, 1]` channel mix.
    Separable {
        depthwise: Tensor,
        pointwise: Tensor,
        bias: Tensor,
    },
}

pub fn conv3d_causal(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: [usize; 3]) -> Result<Tensor> {
    if kernel.rank() != 5 {
        bail!(Dimension, "causal 3D kernel must be rank 5, got {:?}", kernel.shape());
    }
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(kernel.clone());
    let b = g.constant(bias.clone());
    let y = g.conv(x, w, Some(b), stride, 1)?;
    Ok(g.value(y).clone())
}

pub fn conv2d_framewise(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if kernel.rank() != 4 {
        bail!(Dimension, "frame-wise kernel must be rank 4, got {:?}", kernel.shape());
    }
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(kernel.clone());
    let b = g.constant(bias.clone());
    let y = g.conv(x, w, Some(b), [1, 1, 1], 1)?;
    Ok(g.value(y).clone())
}

pub fn dwsep_conv3d(input: &Tensor, depthwise: &Tensor, pointwise: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let dw = g.constant(depthwise.clone());
    let pw = g.constant(pointwise.clone());
    let b = g.constant(bias.clone());
    let y = separable(&mut g, x, dw, pw, b)?;
    Ok(g.value(y).clone())
}

/// Depthwise stage then pointwise stage on graph values.
pub(crate) fn separable(
    g: &mut Graph,
    x: crate::autodiff::Var,
    dw: crate::autodiff::Var,
    pw: crate::autodiff::Var,
    bias: crate::autodiff::Var,
) -> Result<crate::autodiff::Var> {
    let c = g.value(x).shape().first().copied().unwrap_or(0);
    let dshape = g.value(dw).shape().to_vec();
    if dshape.len() != 5 || dshape[0] != c || dshape[1] != 1 {
        bail!(
            Dimension,
            "depthwise kernel {:?} does not match {} input channels",
            dshape,
            c
        );
    }
    let pshape = g.value(pw).shape().to_vec();
    if pshape.len() != 5 || pshape[1] != c || pshape[2..] != [1, 1, 1] {
        bail!(
            Dimension,
            "pointwise kernel {:?} does not consume {} depthwise channels",
            pshape,
            c
        );
    }
    let d = g.conv(x, dw, None, [1, 1, 1], c)?;
    g.conv(d, pw, Some(bias), [1, 1, 1], 1)
}

impl ConvWeights {
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            ConvWeights::Causal3d { kernel, bias } => conv3d_causal(input, kernel, bias, [1, 1, 1]),
            ConvWeights::Frame2d { kernel, bias } => conv2d_framewise(input, kernel, bias),
            ConvWeights::Separable {
                depthwise,
                pointwise,
                bias,
            } => dwsep_conv3d(input, depthwise, pointwise, bias),
        }
    }
}

/// Applies a `[C_out, C_in]` matrix across channels at every position.
pub fn conv1x1(input: &Tensor, matrix: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let &[co, ci] = matrix.shape() else {
        bail!(Dimension, "conv1x1 matrix must be rank 2, got {:?}", matrix.shape());
    };
    let kernel = matrix.clone().reshape(vec![co, ci, 1, 1, 1])?;
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(kernel);
    let b = bias.map(|b| g.constant(b.clone()));
    let y = g.conv(x, w, b, [1, 1, 1], 1)?;
    Ok(g.value(y).clone())
}

pub fn nearest_upsample(input: &Tensor, factors: [usize; 3]) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = g.upsample(x, factors)?;
    Ok(g.value(y).clone())
}

pub const DEFAULT_NORM_EPS: f64 = 1e-6;

pub fn group_norm(input: &Tensor, groups: usize, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let s = g.constant(scale.clone());
    let b = g.constant(shift.clone());
    let y = g.group_norm(x, s, b, groups, eps)?;
    Ok(g.value(y).clone())
}

pub fn silu(input: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = g.silu(x);
    g.value(y).clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1x1_forced_arithmetic() {
        let x = Tensor::full(&[2, 1, 2, 2], 1.0);
        let m = Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap();
        let y = conv1x1(&x, &m, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn separable_channel_mismatch_is_rejected() {
        let x = Tensor::zeros(&[3, 1, 2, 2]);
        let dw = Tensor::zeros(&[2, 1, 1, 1, 1]);
        let pw = Tensor::zeros(&[2, 2, 1, 1, 1]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(
            dwsep_conv3d(&x, &dw, &pw, &b),
            Err(crate::Error::Dimension(_))
        ));
        let dw = Tensor::zeros(&[3, 1, 1, 1, 1]);
        assert!(matches!(
            dwsep_conv3d(&x, &dw, &pw, &b),
            Err(crate::Error::Dimension(_))
        ));
    }
}
