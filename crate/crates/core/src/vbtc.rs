//! Frame-embedding head: temporal average pooling of per-frame CLIP
//! embeddings, a bottleneck adapter and a residual blend with the pooled
//! embedding.

use rand::Rng;

use crate::numerics::layers::{BatchNorm, Conv3d};
use crate::numerics::{ConvGeometry, NumericsError, ParamStore, Scalar, Session, Tensor, Var};

/// Per-frame embeddings `z_i`, stored as `T×D` or `T×D×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEmbeddingSequence<T> {
    z: Tensor<T>,
}

impl<T: Scalar> FrameEmbeddingSequence<T> {
    pub fn new(z: Tensor<T>) -> Result<Self, NumericsError> {
        match z.ndim() {
            2 | 4 => Ok(Self { z }),
            _ => Err(NumericsError::InvalidShape(format!(
                "frame embeddings must be T×D or T×D×H×W, got {:?}",
                z.shape()
            ))),
        }
    }

    pub fn frames(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn grid(&self) -> (usize, usize) {
        match self.z.shape() {
            [_, _, h, w] => (*h, *w),
            _ => (1, 1),
        }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.z
    }

    /// The embeddings as `T×D×H×W`, with `H = W = 1` for pooled providers.
    pub fn to_4d(&self) -> Tensor<T> {
        let (h, w) = self.grid();
        self.z
            .clone()
            .reshape(vec![self.frames(), self.dim(), h, w])
            .expect("same element count")
    }

    /// Keeps the frames at `indices`, in order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self, NumericsError> {
        let per = self.z.numel() / self.frames();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= self.frames() {
                return Err(NumericsError::InvalidArgument(format!(
                    "frame index {i} out of range for {} frames",
                    self.frames()
                )));
            }
            data.extend_from_slice(&self.z.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.z.shape().to_vec();
        shape[0] = indices.len();
        Self::new(Tensor::new(shape, data)?)
    }
}

/// Arithmetic mean over the frame axis, `T×D×H×W → D×H×W`.
pub fn temporal_pool<T: Scalar>(seq: &FrameEmbeddingSequence<T>) -> Tensor<T> {
    let z = seq.to_4d();
    crate::numerics::ops::mean_axis(&z, 0).expect("frame axis exists")
}

/// `alpha·az + (1 − alpha)·z`, elementwise.
pub fn residual_blend<T: Scalar>(az: &Tensor<T>, z: &Tensor<T>, alpha: f64) -> Result<Tensor<T>, NumericsError> {
    check_alpha(alpha)?;
    if az.shape() != z.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "residual_blend",
            lhs: az.shape().to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    let (a, b) = (T::of(alpha), T::of(1.0 - alpha));
    let data = az.data().iter().zip(z.data()).map(|(&x, &y)| a * x + b * y).collect();
    Tensor::new(z.shape().to_vec(), data)
}

fn check_alpha(alpha: f64) -> Result<(), NumericsError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(NumericsError::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

#[derive(Clone, Debug)]
pub struct VbtcConfig {
    pub dim: usize,
    pub reduction: usize,
    pub alpha: f64,
}

impl Default for VbtcConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            reduction: 4,
            alpha: 0.4,
        }
    }
}

/// Two 1×1 conv + BN + ReLU blocks, `D → D/r → D`.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub reduce: Conv3d,
    pub reduce_bn: BatchNorm,
    pub expand: Conv3d,
    pub expand_bn: BatchNorm,
}

impl Adapter {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        if reduction == 0 || dim % reduction != 0 || dim / reduction == 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "embedding width {dim} is not divisible by reduction ratio {reduction}"
            )));
        }
        let hidden = dim / reduction;
        let k = [1, 1, 1];
        Ok(Self {
            reduce: Conv3d::new(store, &format!("{name}.reduce"), dim, hidden, k, ConvGeometry::unit(), false, rng),
            reduce_bn: BatchNorm::new(store, &format!("{name}.reduce_bn"), hidden, rng),
            expand: Conv3d::new(store, &format!("{name}.expand"), hidden, dim, k, ConvGeometry::unit(), false, rng),
            expand_bn: BatchNorm::new(store, &format!("{name}.expand_bn"), dim, rng),
        })
    }

    /// `z: N×D×H×W → N×D×H×W`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, z: Var) -> Result<Var, NumericsError> {
        let shape = s.graph.shape(z).to_vec();
        let [n, d, h, w] = shape[..] else {
            return Err(NumericsError::InvalidShape(format!("adapter expects N×D×H×W, got {shape:?}")));
        };
        // D on the channel axis, a unit time axis for the 3D kernels.
        let x = s.graph.reshape(z, &[n, d, 1, h, w])?;
        let x = self.reduce.forward(s, x)?;
        let x = self.reduce_bn.forward(s, x)?;
        let x = s.graph.relu(x)?;
        let x = self.expand.forward(s, x)?;
        let x = self.expand_bn.forward(s, x)?;
        let x = s.graph.relu(x)?;
        s.graph.reshape(x, &[n, d, h, w])
    }
}

#[derive(Clone, Debug)]
pub struct VbtcHead {
    pub adapter: Adapter,
    pub alpha: f64,
    pub dim: usize,
}

impl VbtcHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &VbtcConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        check_alpha(cfg.alpha)?;
        Ok(Self {
            adapter: Adapter::new(store, "vbtc.adapter", cfg.dim, cfg.reduction, rng)?,
            alpha: cfg.alpha,
            dim: cfg.dim,
        })
    }

    /// Blended features before spatial pooling, `N×D×H×W`.
    pub fn blend<T: Scalar>(&self, s: &mut Session<T>, pooled: Var) -> Result<Var, NumericsError> {
        let adapted = self.adapter.forward(s, pooled)?;
        let a = s.graph.scale(adapted, T::of(self.alpha))?;
        let b = s.graph.scale(pooled, T::of(1.0 - self.alpha))?;
        s.graph.add(a, b)
    }

    /// `frames: N×T×D×H×W → N×D`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, frames: Var) -> Result<Var, NumericsError> {
        let shape = s.graph.shape(frames).to_vec();
        let [n, _, d, h, w] = shape[..] else {
            return Err(NumericsError::InvalidShape(format!("vbtc expects N×T×D×H×W, got {shape:?}")));
        };
        if d != self.dim {
            return Err(NumericsError::ShapeMismatch {
                op: "vbtc",
                lhs: shape,
                rhs: vec![self.dim],
            });
        }
        let pooled = s.graph.mean_axes(frames, &[1])?;
        let pooled = s.graph.reshape(pooled, &[n, d, h, w])?;
        let blended = self.blend(s, pooled)?;
        let out = s.graph.mean_axes(blended, &[2, 3])?;
        s.graph.reshape(out, &[n, d])
    }
}
