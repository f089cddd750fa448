//! Parameterized building blocks used by the heads.

use rand::Rng;

use super::graph::Var;
use super::kernels::ConvGeometry;
use super::ops::NORM_EPS;
use super::param::{Init, ParamId, ParamKind, ParamStore, Session};
use super::tensor::{Scalar, Tensor};
use super::NumericsError;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// 3D convolution over `N×C×T×H×W` inputs, optional per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
    pub out_channels: usize,
}

impl Conv3d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        geom: ConvGeometry,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let weight = store.register(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel[0], kernel[1], kernel[2]],
            ParamKind::Weight,
            Init::KaimingUniform { fan_in },
            rng,
        );
        let bias = bias.then(|| {
            store.register(format!("{name}.bias"), &[out_channels], ParamKind::Bias, Init::Zeros, rng)
        });
        Self {
            weight,
            bias,
            geom,
            out_channels,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let w = s.param(self.weight);
        let y = s.graph.conv3d(x, w, self.geom)?;
        match self.bias {
            Some(b) => add_channel_bias(s, y, b),
            None => Ok(y),
        }
    }
}

/// Adds a `[C]` parameter along axis 1 of `y`.
pub fn add_channel_bias<T: Scalar>(s: &mut Session<T>, y: Var, bias: ParamId) -> Result<Var, NumericsError> {
    let b = s.param(bias);
    let shape = channel_shape(s.graph.shape(y), s.graph.shape(b)[0]);
    let b = s.graph.reshape(b, &shape)?;
    s.graph.add(y, b)
}

fn channel_shape(of: &[usize], c: usize) -> Vec<usize> {
    let mut shape = vec![1; of.len()];
    shape[1] = c;
    shape
}

/// Affine map `x·W + b` for `x: N×in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            &[input, output],
            ParamKind::Weight,
            Init::KaimingUniform { fan_in: input },
            rng,
        );
        let bias = bias
            .then(|| store.register(format!("{name}.bias"), &[output], ParamKind::Bias, Init::Zeros, rng));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let w = s.param(self.weight);
        let y = s.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => add_channel_bias(s, y, b),
            None => Ok(y),
        }
    }
}

/// Per-channel (axis 1) batch normalization with running statistics.
///
/// Training mode normalizes with batch statistics and emits a running-stat
/// update through the session; eval mode uses the stored running stats.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let c = [channels];
        Self {
            gamma: store.register(format!("{name}.gamma"), &c, ParamKind::Norm, Init::Ones, rng),
            beta: store.register(format!("{name}.beta"), &c, ParamKind::Norm, Init::Zeros, rng),
            running_mean: store.register(format!("{name}.running_mean"), &c, ParamKind::Buffer, Init::Zeros, rng),
            running_var: store.register(format!("{name}.running_var"), &c, ParamKind::Buffer, Init::Ones, rng),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(NumericsError::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: vec![self.channels],
            });
        }
        let cshape = channel_shape(&shape, self.channels);
        let axes: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let eps = T::of(BN_EPS);
        let xhat = if s.is_training() {
            if count < 2 {
                return Err(NumericsError::DegenerateAxis {
                    op: "batch_norm",
                    len: count,
                });
            }
            let mean = s.graph.mean_axes(x, &axes)?;
            let xc = s.graph.sub(x, mean)?;
            let sq = s.graph.mul(xc, xc)?;
            let var = s.graph.mean_axes(sq, &axes)?;
            let ve = s.graph.add_scalar(var, eps)?;
            let inv = s.graph.pow(ve, T::of(-0.5))?;

            let m = T::of(BN_MOMENTUM);
            let unbias = T::of(count as f64 / (count as f64 - 1.0));
            let blend = |old: &Tensor<T>, new: &Tensor<T>, k: T| {
                let data = old.data().iter().zip(new.data()).map(|(&o, &n)| (T::one() - m) * o + m * n * k).collect();
                Tensor::from_parts(old.shape().to_vec(), data)
            };
            let rm = blend(s.buffer(self.running_mean), s.graph.value(mean), T::one());
            let rv = blend(s.buffer(self.running_var), s.graph.value(var), unbias);
            s.push_update(self.running_mean, rm);
            s.push_update(self.running_var, rv);
            s.graph.mul(xc, inv)?
        } else {
            let rm = s.buffer(self.running_mean).clone().reshape(cshape.clone())?;
            let inv = s
                .buffer(self.running_var)
                .map(|v| (v + eps).powf(T::of(-0.5)))
                .reshape(cshape.clone())?;
            let rm = s.graph.constant(rm);
            let inv = s.graph.constant(inv);
            let xc = s.graph.sub(x, rm)?;
            s.graph.mul(xc, inv)?
        };
        let g = s.param(self.gamma);
        let g = s.graph.reshape(g, &cshape)?;
        let scaled = s.graph.mul(xhat, g)?;
        add_channel_bias(s, scaled, self.beta)
    }
}

/// Row-wise cosine similarity of `a: N×D` against `b: N×D` or `b: 1×D`, as `N×1`.
pub fn cosine_rows<T: Scalar>(s: &mut Session<T>, a: Var, b: Var) -> Result<Var, NumericsError> {
    let g = &mut s.graph;
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] || (sb[0] != sa[0] && sb[0] != 1) {
        return Err(NumericsError::ShapeMismatch {
            op: "cosine_rows",
            lhs: sa,
            rhs: sb,
        });
    }
    let ab = g.mul(a, b)?;
    let dot = g.sum_axes(ab, &[1])?;
    let aa = g.mul(a, a)?;
    let na2 = g.sum_axes(aa, &[1])?;
    let bb = g.mul(b, b)?;
    let nb2 = g.sum_axes(bb, &[1])?;
    let eps2 = NORM_EPS * NORM_EPS;
    if g.value(na2).data().iter().chain(g.value(nb2).data()).any(|v| v.f64() <= eps2) {
        return Err(NumericsError::ZeroNorm { op: "cosine_rows" });
    }
    let inv_a = g.pow(na2, T::of(-0.5))?;
    let inv_b = g.pow(nb2, T::of(-0.5))?;
    let c = g.mul(dot, inv_a)?;
    g.mul(c, inv_b)
}
