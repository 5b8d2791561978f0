//! Dense row-major tensors.
//!
//! Video activations use the layout `[channels, frames, height, width]`
//! without a batch axis; batches are lists of tensors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail!(
                Dimension,
                "shape {:?} holds {} elements but {} were supplied",
                shape,
                n,
                data.len()
            );
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] for internal call sites whose sizes are correct by
    /// construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = if bound > 0.0 {
            let dist = Uniform::new(-bound, bound).expect("finite positive bound");
            (0..n).map(|_| dist.sample(rng)).collect()
        } else {
            vec![0.0; n]
        };
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            bail!(Contract, "tensor with shape {:?} is not a scalar", self.shape);
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Interprets a rank-4 tensor as `(channels, frames, height, width)`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[c, t, h, w] => Ok([c, t, h, w]),
            other => bail!(Dimension, "expected a [C,T,H,W] tensor, got shape {:?}", other),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len().max(1) as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            bail!(
                Dimension,
                "elementwise op on shapes {:?} and {:?}",
                self.shape,
                other.shape
            );
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Extracts channel rows `indices` from a tensor whose axis 0 is channels.
    pub fn select_axis0(&self, indices: &[usize]) -> Result<Tensor> {
        let Some(&c) = self.shape.first() else {
            bail!(Dimension, "cannot select channels of a scalar");
        };
        let inner = self.data.len() / c.max(1);
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= c {
                bail!(Dimension, "channel index {} out of range for {} channels", i, c);
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// Extracts indices along axis 1 (conv kernel input channels).
    pub fn select_axis1(&self, indices: &[usize]) -> Result<Tensor> {
        if self.shape.len() < 2 {
            bail!(Dimension, "axis-1 selection needs rank >= 2, got {:?}", self.shape);
        }
        let (outer, c1) = (self.shape[0], self.shape[1]);
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                if i >= c1 {
                    bail!(Dimension, "index {} out of range for axis of {}", i, c1);
                }
                let start = (o * c1 + i) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[1] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// Concatenates `[C,T,H,W]` tensors along the frame axis.
    pub fn concat_frames(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            bail!(Contract, "concat of zero tensors");
        };
        let [c, _, h, w] = first.dims4()?;
        let mut total_t = 0;
        for p in parts {
            let [pc, pt, ph, pw] = p.dims4()?;
            if (pc, ph, pw) != (c, h, w) {
                bail!(Dimension, "concat of {:?} with {:?}", first.shape, p.shape);
            }
            total_t += pt;
        }
        let mut data = Vec::with_capacity(c * total_t * h * w);
        for ch in 0..c {
            for p in parts {
                let plane = p.shape[1] * h * w;
                data.extend_from_slice(&p.data[ch * plane..(ch + 1) * plane]);
            }
        }
        Ok(Tensor {
            shape: vec![c, total_t, h, w],
            data,
        })
    }
}
