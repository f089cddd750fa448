//! Eager (non-recording) tensor operations over single, unbatched samples.
//!
//! These share kernels with [`Graph`](super::Graph); the graph versions are
//! batched and differentiable.

use super::kernels::{self, ConvGeometry, Conv3dDims};
use super::tensor::{Scalar, Tensor};
use super::NumericsError;

/// Norms at or below this are treated as zero vectors.
pub const NORM_EPS: f64 = 1e-12;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let data = kernels::matmul(a.data(), b.data(), sa[0], sa[1], sb[1]);
    Tensor::new(vec![sa[0], sb[1]], data)?.check_finite("matmul")
}

/// `x: C_in×T×H×W`, `w: C_out×C_in×kt×kh×kw`.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>, NumericsError> {
    if x.ndim() != 4 {
        return Err(NumericsError::ShapeMismatch {
            op: "conv3d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let xs: Vec<usize> = std::iter::once(1).chain(x.shape().iter().copied()).collect();
    let d = Conv3dDims::infer(&xs, w.shape(), geom)?;
    let data = kernels::conv3d_forward(x.data(), w.data(), &d);
    Tensor::new(d.out_shape()[1..].to_vec(), data)?.check_finite("conv3d")
}

/// `x: C_in×H×W`, `w: C_out×C_in×kh×kw`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>, NumericsError> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 4 {
        return Err(NumericsError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let x3 = x.clone().reshape(vec![xs[0], 1, xs[1], xs[2]])?;
    let w3 = w.clone().reshape(vec![ws[0], ws[1], 1, ws[2], ws[3]])?;
    let y = conv3d(&x3, &w3, ConvGeometry::new([1, stride.0, stride.1], [0, pad.0, pad.1]))?;
    let s = y.shape().to_vec();
    y.reshape(vec![s[0], s[2], s[3]])
}

/// Temporal convolution of per-channel series `x: C×T` with `w: C'×C×k`, stride 1.
pub fn conv1d_temporal<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>, NumericsError> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 3 {
        return Err(NumericsError::ShapeMismatch {
            op: "conv1d_temporal",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let x3 = x.clone().reshape(vec![xs[0], xs[1], 1, 1])?;
    let w3 = w.clone().reshape(vec![ws[0], ws[1], ws[2], 1, 1])?;
    let y = conv3d(&x3, &w3, ConvGeometry::new([1, 1, 1], [pad, 0, 0]))?;
    let t = y.shape()[1];
    y.reshape(vec![ws[0], t])
}

/// Training-mode batch normalization of `x: N×C×…` per channel (axis 1).
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>, NumericsError> {
    let s = x.shape();
    if s.len() < 2 || gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
        return Err(NumericsError::ShapeMismatch {
            op: "batch_norm",
            lhs: s.to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let (outer, c, inner) = kernels::axis_split(s, 1);
    let count = outer * inner;
    if count < 2 {
        return Err(NumericsError::DegenerateAxis {
            op: "batch_norm",
            len: count,
        });
    }
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for ch in 0..c {
        let idx = |o: usize, i: usize| (o * c + ch) * inner + i;
        let mut mean = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                mean += xd[idx(o, i)].f64();
            }
        }
        mean /= count as f64;
        let mut var = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                var += (xd[idx(o, i)].f64() - mean).powi(2);
            }
        }
        var /= count as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let (g, b) = (gamma.data()[ch].f64(), beta.data()[ch].f64());
        for o in 0..outer {
            for i in 0..inner {
                let p = idx(o, i);
                out[p] = T::of((xd[p].f64() - mean) * inv * g + b);
            }
        }
    }
    Tensor::new(s.to_vec(), out)?.check_finite("batch_norm")
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(kernels::gelu)
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(kernels::sigmoid)
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, NumericsError> {
    if axis >= x.ndim() {
        return Err(NumericsError::InvalidArgument(format!(
            "softmax axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let data = kernels::softmax(x.data(), x.shape(), axis);
    Tensor::new(x.shape().to_vec(), data)?.check_finite("softmax")
}

/// Mean over `axis`, removing it.
pub fn mean_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, NumericsError> {
    if axis >= x.ndim() {
        return Err(NumericsError::InvalidArgument(format!(
            "mean axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = kernels::axis_split(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = T::zero();
            for j in 0..len {
                acc = acc + x.data()[(o * len + j) * inner + i];
            }
            out[o * inner + i] = acc / T::of(len as f64);
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

pub fn l2_norm<T: Scalar>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |s, &v| s + v * v).sqrt()
}

/// Cosine of the angle between two equal-length vectors.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na.f64() <= NORM_EPS || nb.f64() <= NORM_EPS {
        return Err(NumericsError::ZeroNorm {
            op: "cosine_similarity",
        });
    }
    let dot = a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y);
    Ok(dot / (na * nb))
}
