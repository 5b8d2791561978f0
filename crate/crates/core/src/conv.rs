//! Causal 3D convolution kernels (forward and backward).
//!
//! Every convolution in the toolkit (causal 3D, frame-wise 2D, depthwise,
//! pointwise) is lowered onto one grouped kernel: inputs are unfolded into a
//! column matrix per group and multiplied with the flattened weights.
//! Temporal padding is `kt - 1` zero frames on the left only, so output frame
//! `t` reads input frames `<= t`. Spatial padding is `k / 2` zeros per side.

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    /// Kernel extents `(kt, kh, kw)`.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(kernel: [usize; 3]) -> Self {
        Self {
            kernel,
            stride: [1, 1, 1],
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// `(front temporal pad, height pad, width pad)`.
    pub fn padding(&self) -> [usize; 3] {
        [self.kernel[0] - 1, self.kernel[1] / 2, self.kernel[2] / 2]
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn out_extents(&self, t: usize, h: usize, w: usize) -> Result<[usize; 3]> {
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            bail!(
                Contract,
                "kernel {:?} / stride {:?} must be positive",
                self.kernel,
                self.stride
            );
        }
        let [_, ph, pw] = self.padding();
        let padded = [t + self.kernel[0] - 1, h + 2 * ph, w + 2 * pw];
        let mut out = [0; 3];
        for axis in 0..3 {
            if padded[axis] < self.kernel[axis] || [t, h, w][axis] == 0 {
                bail!(
                    Dimension,
                    "kernel {:?} exceeds padded input extents {:?}",
                    self.kernel,
                    padded
                );
            }
            out[axis] = (padded[axis] - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }

    /// Multiply-accumulate count of one forward pass, padding taps included.
    pub fn macs(&self, c_in: usize, c_out: usize, out: [usize; 3]) -> u64 {
        (out[0] * out[1] * out[2]) as u64 * c_out as u64 * (c_in / self.groups) as u64 * self.kernel_volume() as u64
    }
}

/// Shape bookkeeping shared by forward and backward.
#[derive(Debug, Clone, Copy)]
pub struct ConvShapes {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub geom: ConvGeom,
}

impl ConvShapes {
    /// Validates a `[C,T,H,W]` input against a weight of shape
    /// `[C_out, C_in/groups, kt, kh, kw]`.
    pub fn resolve(input_shape: &[usize], weight_shape: &[usize], geom: ConvGeom) -> Result<Self> {
        let [c_in, t, h, w] = match input_shape {
            &[c, t, h, w] => [c, t, h, w],
            other => bail!(Dimension, "conv input must be [C,T,H,W], got {:?}", other),
        };
        let (c_out, c_in_group, kernel) = match weight_shape {
            &[o, i, kt, kh, kw] => (o, i, [kt, kh, kw]),
            other => bail!(Dimension, "conv weight must be rank 5, got {:?}", other),
        };
        if kernel != geom.kernel {
            bail!(Dimension, "weight kernel {:?} vs geometry {:?}", kernel, geom.kernel);
        }
        if geom.groups == 0 || c_in % geom.groups != 0 || c_out % geom.groups != 0 {
            bail!(
                Dimension,
                "groups {} must divide input channels {} and output channels {}",
                geom.groups,
                c_in,
                c_out
            );
        }
        if c_in / geom.groups != c_in_group {
            bail!(
                Dimension,
                "kernel expects {} input channels per group, input has {} channels in {} groups",
                c_in_group,
                c_in,
                geom.groups
            );
        }
        let output = geom.out_extents(t, h, w)?;
        Ok(Self {
            c_in,
            c_out,
            input: [t, h, w],
            output,
            geom,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.output[0], self.output[1], self.output[2]]
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn col_rows(&self) -> usize {
        (self.c_in / self.geom.groups) * self.geom.kernel_volume()
    }
}

/// Unfolds one channel group into a `(C_in/groups * K) x P` column matrix.
fn im2col(input: &[f64], s: &ConvShapes, group: usize, col: &mut [f64]) {
    let [t_in, h_in, w_in] = s.input;
    let [t_out, h_out, w_out] = s.output;
    let [kt, kh, kw] = s.geom.kernel;
    let [st, sh, sw] = s.geom.stride;
    let [pt, ph, pw] = s.geom.padding();
    let cig = s.c_in / s.geom.groups;
    let p = s.positions();
    col.fill(0.0);
    let mut row = 0;
    for ci in 0..cig {
        let plane = &input[(group * cig + ci) * t_in * h_in * w_in..][..t_in * h_in * w_in];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    for to in 0..t_out {
                        let ti = (to * st + dt) as isize - pt as isize;
                        if ti < 0 || ti >= t_in as isize {
                            continue;
                        }
                        for ho in 0..h_out {
                            let hi = (ho * sh + dh) as isize - ph as isize;
                            if hi < 0 || hi >= h_in as isize {
                                continue;
                            }
                            let src = &plane[(ti as usize * h_in + hi as usize) * w_in..][..w_in];
                            let out_row = &mut dst[(to * h_out + ho) * w_out..][..w_out];
                            for (wo, o) in out_row.iter_mut().enumerate() {
                                let wi = (wo * sw + dw) as isize - pw as isize;
                                if wi >= 0 && wi < w_in as isize {
                                    *o = src[wi as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatters a column-matrix gradient back onto the input gradient.
fn col2im(col: &[f64], s: &ConvShapes, group: usize, grad_input: &mut [f64]) {
    let [t_in, h_in, w_in] = s.input;
    let [t_out, h_out, w_out] = s.output;
    let [kt, kh, kw] = s.geom.kernel;
    let [st, sh, sw] = s.geom.stride;
    let [pt, ph, pw] = s.geom.padding();
    let cig = s.c_in / s.geom.groups;
    let p = s.positions();
    let mut row = 0;
    for ci in 0..cig {
        let plane = &mut grad_input[(group * cig + ci) * t_in * h_in * w_in..][..t_in * h_in * w_in];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    for to in 0..t_out {
                        let ti = (to * st + dt) as isize - pt as isize;
                        if ti < 0 || ti >= t_in as isize {
                            continue;
                        }
                        for ho in 0..h_out {
                            let hi = (ho * sh + dh) as isize - ph as isize;
                            if hi < 0 || hi >= h_in as isize {
                                continue;
                            }
                            let dst = &mut plane[(ti as usize * h_in + hi as usize) * w_in..][..w_in];
                            let in_row = &src[(to * h_out + ho) * w_out..][..w_out];
                            for (wo, &g) in in_row.iter().enumerate() {
                                let wi = (wo * sw + dw) as isize - pw as isize;
                                if wi >= 0 && wi < w_in as isize {
                                    dst[wi as usize] += g;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // Safety: callers pass slices whose extents cover the strided views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

pub fn conv_forward(input: &[f64], weight: &[f64], bias: Option<&[f64]>, s: &ConvShapes) -> Vec<f64> {
    let p = s.positions();
    let rows = s.col_rows();
    let cog = s.c_out / s.geom.groups;
    let mut out = vec![0.0; s.c_out * p];
    let mut col = vec![0.0; rows * p];
    for g in 0..s.geom.groups {
        im2col(input, s, g, &mut col);
        let w = &weight[g * cog * rows..(g + 1) * cog * rows];
        let o = &mut out[g * cog * p..(g + 1) * cog * p];
        gemm(
            cog,
            rows,
            p,
            w,
            (rows as isize, 1),
            &col,
            (p as isize, 1),
            0.0,
            o,
            (p as isize, 1),
        );
    }
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    s: &ConvShapes,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_input, need_weight, need_bias) = need;
    let p = s.positions();
    let rows = s.col_rows();
    let cog = s.c_out / s.geom.groups;
    let mut grad_input = need_input.then(|| vec![0.0; input.len()]);
    let mut grad_weight = need_weight.then(|| vec![0.0; weight.len()]);
    let grad_bias = need_bias.then(|| grad_out.chunks(p).map(|c| c.iter().sum()).collect());

    if need_input || need_weight {
        let mut col = vec![0.0; rows * p];
        for g in 0..s.geom.groups {
            let go = &grad_out[g * cog * p..(g + 1) * cog * p];
            if let Some(gw) = grad_weight.as_mut() {
                im2col(input, s, g, &mut col);
                // gw_g (cog x rows) = go_g (cog x p) * col^T (p x rows)
                gemm(
                    cog,
                    p,
                    rows,
                    go,
                    (p as isize, 1),
                    &col,
                    (1, p as isize),
                    0.0,
                    &mut gw[g * cog * rows..(g + 1) * cog * rows],
                    (rows as isize, 1),
                );
            }
            if let Some(gi) = grad_input.as_mut() {
                // gcol (rows x p) = w_g^T (rows x cog) * go_g (cog x p)
                let w = &weight[g * cog * rows..(g + 1) * cog * rows];
                gemm(
                    rows,
                    cog,
                    p,
                    w,
                    (1, rows as isize),
                    go,
                    (p as isize, 1),
                    0.0,
                    &mut col,
                    (p as isize, 1),
                );
                col2im(&col, s, g, gi);
            }
        }
    }
    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extents_follow_causal_padding() {
        let g = ConvGeom::new([3, 3, 3]);
        assert_eq!(g.out_extents(4, 5, 5).unwrap(), [4, 5, 5]);
        let g = ConvGeom::new([3, 3, 3]).with_stride([2, 2, 1]);
        assert_eq!(g.out_extents(4, 5, 5).unwrap(), [2, 3, 5]);
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let g = ConvGeom::new([1, 5, 5]);
        // padded height 1 + 2*2 = 5 fits, width 0 does not
        assert!(g.out_extents(1, 1, 1).is_ok());
        let g = ConvGeom::new([1, 4, 1]);
        // even kernel: pad 2 per side, 1 + 4 >= 4
        assert!(g.out_extents(1, 1, 1).is_ok());
        let g = ConvGeom::new([1, 1, 1]).with_stride([0, 1, 1]);
        assert!(g.out_extents(1, 1, 1).is_err());
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let err = ConvShapes::resolve(&[3, 2, 4, 4], &[2, 4, 1, 1, 1], ConvGeom::new([1, 1, 1])).unwrap_err();
        assert!(matches!(err, crate::Error::Dimension(_)));
    }
}
