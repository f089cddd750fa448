use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::layers::{Conv3d, Linear};
use crate::numerics::{ConvGeometry, NumericsError, ParamStore, Scalar, Session, Var};

/// How the two attention maps are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbamOrder {
    /// `F · Mc(F) · Ms(F)`, both gates computed from the input.
    #[default]
    Parallel,
    /// `F' = F · Mc(F)`, then `F' · Ms(F')`.
    Sequential,
}

/// Channel and spatial sigmoid gating over `N×C×T×H×W` volumes.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv3d,
    pub order: CbamOrder,
    pub channels: usize,
}

impl Cbam {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        kernel: usize,
        order: CbamOrder,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "CBAM channels {channels} not divisible by reduction {reduction}"
            )));
        }
        if kernel % 2 == 0 {
            return Err(NumericsError::InvalidArgument(format!("CBAM spatial kernel must be odd, got {kernel}")));
        }
        let hidden = channels / reduction;
        let geom = ConvGeometry::new([1, 1, 1], [0, kernel / 2, kernel / 2]);
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.mlp1"), channels, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.mlp2"), hidden, channels, true, rng),
            spatial: Conv3d::new(store, &format!("{name}.spatial"), 2, 1, [1, kernel, kernel], geom, true, rng),
            order,
            channels,
        })
    }

    fn mlp<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let h = self.fc1.forward(s, x)?;
        let h = s.graph.relu(h)?;
        self.fc2.forward(s, h)
    }

    /// Per-channel gate, `N×C×1×1×1`.
    pub fn channel_gate<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let n = s.graph.shape(x)[0];
        let avg = s.graph.mean_axes(x, &[2, 3, 4])?;
        let avg = s.graph.reshape(avg, &[n, self.channels])?;
        let max = s.graph.max_axes(x, &[2, 3, 4])?;
        let max = s.graph.reshape(max, &[n, self.channels])?;
        let a = self.mlp(s, avg)?;
        let m = self.mlp(s, max)?;
        let logits = s.graph.add(a, m)?;
        let gate = s.graph.sigmoid(logits)?;
        s.graph.reshape(gate, &[n, self.channels, 1, 1, 1])
    }

    /// Per-position gate, `N×1×T×H×W`.
    pub fn spatial_gate<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let avg = s.graph.mean_axes(x, &[1])?;
        let max = s.graph.max_axes(x, &[1])?;
        let cat = s.graph.concat(&[avg, max], 1)?;
        let logits = self.spatial.forward(s, cat)?;
        s.graph.sigmoid(logits)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        match self.order {
            CbamOrder::Parallel => {
                let mc = self.channel_gate(s, x)?;
                let ms = self.spatial_gate(s, x)?;
                let y = s.graph.mul(x, mc)?;
                s.graph.mul(y, ms)
            }
            CbamOrder::Sequential => {
                let mc = self.channel_gate(s, x)?;
                let y = s.graph.mul(x, mc)?;
                let ms = self.spatial_gate(s, y)?;
                s.graph.mul(y, ms)
            }
        }
    }
}
