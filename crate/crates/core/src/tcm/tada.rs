use rand::Rng;

use crate::numerics::layers::{add_channel_bias, Conv3d};
use crate::numerics::{ConvGeometry, Init, NumericsError, ParamId, ParamKind, ParamStore, Scalar, Session, Tensor, Var};

/// Temporal-adaptive convolution: a spatial kernel `W_b` shared over time,
/// rescaled per output channel and time step by `α = 1 + calib(x)`.
#[derive(Clone, Debug)]
pub struct TadaConv {
    pub base: ParamId,
    pub bias: ParamId,
    pub calib_reduce: Conv3d,
    pub calib_out: Conv3d,
    pub geom: ConvGeometry,
    pub out_channels: usize,
}

/// Channel bottleneck of the calibration branch.
pub const CALIB_REDUCTION: usize = 4;

impl TadaConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        rng: &mut impl Rng,
    ) -> Self {
        let [kh, kw] = kernel;
        let base = store.register(
            format!("{name}.base"),
            &[out_channels, in_channels, 1, kh, kw],
            ParamKind::Weight,
            Init::KaimingUniform {
                fan_in: in_channels * kh * kw,
            },
            rng,
        );
        let bias = store.register(format!("{name}.bias"), &[out_channels], ParamKind::Bias, Init::Zeros, rng);
        let hidden = (in_channels / CALIB_REDUCTION).max(1);
        let temporal = ConvGeometry::new([1, 1, 1], [1, 0, 0]);
        let calib_reduce = Conv3d::new(store, &format!("{name}.calib.reduce"), in_channels, hidden, [3, 1, 1], temporal, true, rng);
        let calib_out = Conv3d::new(store, &format!("{name}.calib.out"), hidden, out_channels, [3, 1, 1], temporal, true, rng);
        let w = calib_out.weight;
        let shape = store.get(w).value.shape().to_vec();
        store.get_mut(w).value = Tensor::zeros(shape);
        Self {
            base,
            bias,
            calib_reduce,
            calib_out,
            geom: ConvGeometry::new([1, 1, 1], [0, kh / 2, kw / 2]),
            out_channels,
        }
    }

    /// Calibration factors `α`, shaped `N×C_out×T×1×1`.
    pub fn calibration<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let gap = s.graph.mean_axes(x, &[3, 4])?;
        let h = self.calib_reduce.forward(s, gap)?;
        let h = s.graph.relu(h)?;
        let a = self.calib_out.forward(s, h)?;
        s.graph.add_scalar(a, T::one())
    }

    /// The time-shared convolution with `W_b`, before calibration and bias.
    pub fn shared_conv<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let w = s.param(self.base);
        s.graph.conv3d(x, w, self.geom)
    }

    /// Applies given calibration factors `alpha: N×C_out×T×1×1`.
    pub fn forward_with_alpha<T: Scalar>(&self, s: &mut Session<T>, x: Var, alpha: Var) -> Result<Var, NumericsError> {
        let y = self.shared_conv(s, x)?;
        let (ys, ash) = (s.graph.shape(y).to_vec(), s.graph.shape(alpha).to_vec());
        if ash.len() != 5 || ash[0] != ys[0] || ash[1] != ys[1] || ash[2] != ys[2] {
            return Err(NumericsError::ShapeMismatch {
                op: "tada_conv calibration",
                lhs: ys,
                rhs: ash,
            });
        }
        // (α·W_b) * x == α·(W_b * x) since α is constant over the kernel.
        let y = s.graph.mul(y, alpha)?;
        add_channel_bias(s, y, self.bias)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let alpha = self.calibration(s, x)?;
        self.forward_with_alpha(s, x, alpha)
    }
}
