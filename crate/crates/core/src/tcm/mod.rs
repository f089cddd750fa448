//! Temporal context head: a small 3D-CNN stem, temporal-adaptive
//! convolutions, temporal aggregation and CBAM attention, reduced to a
//! `D`-vector.

mod cbam;
mod tada;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::layers::{BatchNorm, Conv3d, Linear};
use crate::numerics::{ConvGeometry, NumericsError, ParamStore, Scalar, Session, Tensor, Var};

pub use cbam::{Cbam, CbamOrder};
pub use tada::{TadaConv, CALIB_REDUCTION};

/// A `C×T×H×W` volume with at least two frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipVolume<T> {
    x: Tensor<T>,
}

impl<T: Scalar> ClipVolume<T> {
    pub fn new(x: Tensor<T>) -> Result<Self, NumericsError> {
        if x.ndim() != 4 {
            return Err(NumericsError::InvalidShape(format!("clip volume must be C×T×H×W, got {:?}", x.shape())));
        }
        if x.shape()[1] < 2 {
            return Err(NumericsError::InvalidArgument(format!(
                "clip volume needs at least 2 frames, got {}",
                x.shape()[1]
            )));
        }
        Ok(Self { x })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.x
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.x
    }

    pub fn frames(&self) -> usize {
        self.x.shape()[1]
    }
}

/// Two strided 3D conv + BN + ReLU layers: `3 → 16 → 32` channels,
/// spatial stride 2, time preserved.
#[derive(Clone, Debug)]
pub struct Stem {
    pub layers: Vec<(Conv3d, BatchNorm)>,
}

impl Stem {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, channels: &[usize], rng: &mut impl Rng) -> Self {
        let geom = ConvGeometry::new([1, 2, 2], [1, 1, 1]);
        let layers = channels
            .windows(2)
            .enumerate()
            .map(|(i, c)| {
                let conv = Conv3d::new(store, &format!("tcm.stem{i}"), c[0], c[1], [3, 3, 3], geom, true, rng);
                let bn = BatchNorm::new(store, &format!("tcm.stem{i}_bn"), c[1], rng);
                (conv, bn)
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, mut x: Var) -> Result<Var, NumericsError> {
        for (conv, bn) in &self.layers {
            x = conv.forward(s, x)?;
            x = bn.forward(s, x)?;
            x = s.graph.relu(x)?;
        }
        Ok(x)
    }
}

/// `relu(BN1(F) + BN2(pool_t(F)))`.
///
/// Without a window the pool averages over all frames and broadcasts back;
/// with an odd window it is a centred moving average.
#[derive(Clone, Debug)]
pub struct Aggregate {
    pub bn_frame: BatchNorm,
    pub bn_pooled: BatchNorm,
    pub window: Option<usize>,
}

impl Aggregate {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        window: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            bn_frame: BatchNorm::new(store, &format!("{name}.bn1"), channels, rng),
            bn_pooled: BatchNorm::new(store, &format!("{name}.bn2"), channels, rng),
            window,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let pooled = match self.window {
            None => s.graph.mean_axes(x, &[2])?,
            Some(w) => s.graph.avg_pool_axis(x, 2, w)?,
        };
        let a = self.bn_frame.forward(s, x)?;
        let b = self.bn_pooled.forward(s, pooled)?;
        let sum = s.graph.add(a, b)?;
        s.graph.relu(sum)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalConvKind {
    #[default]
    Tadaconv,
    C3d,
    R2plus1d,
}

impl std::str::FromStr for TemporalConvKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tadaconv" => Ok(Self::Tadaconv),
            "c3d" => Ok(Self::C3d),
            "r2plus1d" => Ok(Self::R2plus1d),
            other => Err(format!("unknown temporal conv {other:?} (expected tadaconv, c3d or r2plus1d)")),
        }
    }
}

/// One temporal convolution layer, channel-preserving.
#[derive(Clone, Debug)]
pub enum TemporalConv {
    Tada(TadaConv),
    /// Plain 3×3×3 convolution.
    C3d(Conv3d),
    /// 1×3×3 spatial then 3×1×1 temporal, ReLU between.
    R2plus1d(Conv3d, Conv3d),
}

impl TemporalConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: TemporalConvKind,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let c = channels;
        match kind {
            TemporalConvKind::Tadaconv => Self::Tada(TadaConv::new(store, name, c, c, [3, 3], rng)),
            TemporalConvKind::C3d => {
                let geom = ConvGeometry::new([1, 1, 1], [1, 1, 1]);
                Self::C3d(Conv3d::new(store, name, c, c, [3, 3, 3], geom, true, rng))
            }
            TemporalConvKind::R2plus1d => {
                let spatial = ConvGeometry::new([1, 1, 1], [0, 1, 1]);
                let temporal = ConvGeometry::new([1, 1, 1], [1, 0, 0]);
                Self::R2plus1d(
                    Conv3d::new(store, &format!("{name}.spatial"), c, c, [1, 3, 3], spatial, true, rng),
                    Conv3d::new(store, &format!("{name}.temporal"), c, c, [3, 1, 1], temporal, true, rng),
                )
            }
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        match self {
            Self::Tada(t) => t.forward(s, x),
            Self::C3d(c) => c.forward(s, x),
            Self::R2plus1d(sp, tm) => {
                let h = sp.forward(s, x)?;
                let h = s.graph.relu(h)?;
                tm.forward(s, h)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TcmConfig {
    pub in_channels: usize,
    pub stem_channels: Vec<usize>,
    pub dim: usize,
    pub temporal_conv: TemporalConvKind,
    pub cbam_reduction: usize,
    pub cbam_kernel: usize,
    pub cbam_order: CbamOrder,
    pub pool_window: Option<usize>,
}

impl Default for TcmConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: vec![16, 32],
            dim: 512,
            temporal_conv: TemporalConvKind::Tadaconv,
            cbam_reduction: 4,
            cbam_kernel: 7,
            cbam_order: CbamOrder::Parallel,
            pool_window: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TcmHead {
    pub stem: Stem,
    pub conv1: TemporalConv,
    pub aggregate: Aggregate,
    pub conv2: TemporalConv,
    pub cbam: Cbam,
    pub proj: Linear,
    pub channels: usize,
}

impl TcmHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &TcmConfig, rng: &mut impl Rng) -> Result<Self, NumericsError> {
        if cfg.stem_channels.is_empty() {
            return Err(NumericsError::InvalidArgument("stem needs at least one layer".into()));
        }
        let mut chans = vec![cfg.in_channels];
        chans.extend_from_slice(&cfg.stem_channels);
        let c = *chans.last().unwrap();
        let stem = Stem::new(store, &chans, rng);
        let conv1 = TemporalConv::new(store, "tcm.conv1", cfg.temporal_conv, c, rng);
        let aggregate = Aggregate::new(store, "tcm.agg", c, cfg.pool_window, rng);
        let conv2 = TemporalConv::new(store, "tcm.conv2", cfg.temporal_conv, c, rng);
        let cbam = Cbam::new(store, "tcm.cbam", c, cfg.cbam_reduction, cfg.cbam_kernel, cfg.cbam_order, rng)?;
        let proj = Linear::new(store, "tcm.proj", c, cfg.dim, true, rng);
        Ok(Self {
            stem,
            conv1,
            aggregate,
            conv2,
            cbam,
            proj,
            channels: c,
        })
    }

    /// Feature volume after CBAM, before pooling.
    pub fn features<T: Scalar>(&self, s: &mut Session<T>, clip: Var) -> Result<Var, NumericsError> {
        let shape = s.graph.shape(clip);
        if shape.len() != 5 || shape[2] < 2 {
            return Err(NumericsError::InvalidShape(format!(
                "tcm expects N×C×T×H×W with T ≥ 2, got {shape:?}"
            )));
        }
        let x = self.stem.forward(s, clip)?;
        let x = self.conv1.forward(s, x)?;
        let x = self.aggregate.forward(s, x)?;
        let x = self.conv2.forward(s, x)?;
        self.cbam.forward(s, x)
    }

    /// `clip: N×C×T×H×W → N×D`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, clip: Var) -> Result<Var, NumericsError> {
        let n = s.graph.shape(clip)[0];
        let x = self.features(s, clip)?;
        let pooled = s.graph.mean_axes(x, &[2, 3, 4])?;
        let pooled = s.graph.reshape(pooled, &[n, self.channels])?;
        self.proj.forward(s, pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::BN_EPS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(kind: TemporalConvKind) -> TcmConfig {
        TcmConfig {
            stem_channels: vec![4, 8],
            dim: 6,
            temporal_conv: kind,
            ..TcmConfig::default()
        }
    }

    #[test]
    fn clip_volume_needs_two_frames() {
        assert!(ClipVolume::new(Tensor::<f32>::ones(vec![3, 1, 4, 4])).is_err());
        assert!(ClipVolume::new(Tensor::<f32>::ones(vec![3, 4, 4])).is_err());
        assert_eq!(ClipVolume::new(Tensor::<f32>::ones(vec![3, 2, 4, 4])).unwrap().frames(), 2);
    }

    #[test]
    fn stem_preserves_time_and_halves_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let stem = Stem::new(&mut store, &[3, 16, 32], &mut rng);
        let mut s = Session::new(&store, true);
        let x = s.graph.constant(Tensor::from_fn(vec![2, 3, 5, 8, 8], |i| (i as f64).sin()));
        let y = stem.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[2, 32, 5, 2, 2]);
    }

    #[test]
    fn stem_conv_of_zero_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let stem = Stem::new(&mut store, &[3, 16], &mut rng);
        let mut s = Session::new(&store, true);
        let x = s.graph.constant(Tensor::zeros(vec![1, 3, 4, 6, 6]));
        let y = stem.layers[0].0.forward(&mut s, x).unwrap();
        assert!(s.graph.value(y).data().iter().all(|&v| v == 0.0));
    }

    /// Step-by-step scalar evaluation of the aggregate at unit BN affine.
    fn aggregate_oracle(x: &Tensor<f64>) -> Vec<f64> {
        let (c, t, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut out = vec![0.0; x.numel()];
        for ch in 0..c {
            let vals: Vec<f64> = (0..t * h * w).map(|k| x.data()[ch * t * h * w + k]).collect();
            let pooled: Vec<f64> = (0..h * w)
                .map(|p| (0..t).map(|ti| vals[ti * h * w + p]).sum::<f64>() / t as f64)
                .collect();
            let norm = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64;
                v.iter().map(|a| (a - m) / (var + BN_EPS).sqrt()).collect::<Vec<_>>()
            };
            let (a, b) = (norm(&vals), norm(&pooled));
            for ti in 0..t {
                for p in 0..h * w {
                    out[ch * t * h * w + ti * h * w + p] = (a[ti * h * w + p] + b[p]).max(0.0);
                }
            }
        }
        out
    }

    #[test]
    fn aggregate_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::<f64>::new();
        let agg = Aggregate::new(&mut store, "agg", 2, None, &mut rng);
        let x = Tensor::from_fn(vec![2, 4, 5, 5], |_| rng.random_range(-2.0..2.0));
        let mut s = Session::new(&store, true);
        let xv = s.graph.constant(x.clone().reshape(vec![1, 2, 4, 5, 5]).unwrap());
        let y = agg.forward(&mut s, xv).unwrap();
        let want = aggregate_oracle(&x);
        let got = s.graph.value(y).data();
        assert!(got.iter().all(|&v| v >= 0.0));
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-10, "{g} vs {e}");
        }
    }

    #[test]
    fn aggregate_of_constant_in_time_is_constant_in_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let agg = Aggregate::new(&mut store, "agg", 3, None, &mut rng);
        let frame: Vec<f64> = (0..3 * 9).map(|i| (i as f64 * 0.7).cos()).collect();
        let x = Tensor::from_fn(vec![2, 3, 4, 3, 3], |i| {
            let (n, rest) = (i / 108, i % 108);
            let (c, p) = (rest / 36, rest % 9);
            frame[c * 9 + p] + n as f64
        });
        let mut s = Session::new(&store, true);
        let xv = s.graph.constant(x);
        let y = agg.forward(&mut s, xv).unwrap();
        let out = s.graph.value(y);
        for n in 0..2 {
            for c in 0..3 {
                for t in 1..4 {
                    for i in 0..3 {
                        for j in 0..3 {
                            assert_eq!(out.get(&[n, c, t, i, j]), out.get(&[n, c, 0, i, j]));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn windowed_aggregate_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let agg = Aggregate::new(&mut store, "agg", 2, Some(3), &mut rng);
        let mut s = Session::new(&store, true);
        let xv = s.graph.constant(Tensor::from_fn(vec![2, 2, 5, 2, 2], |i| (i as f64).sin()));
        let y = agg.forward(&mut s, xv).unwrap();
        assert_eq!(s.graph.shape(y), &[2, 2, 5, 2, 2]);
    }

    #[test]
    fn head_shape_for_every_variant() {
        for kind in [TemporalConvKind::Tadaconv, TemporalConvKind::C3d, TemporalConvKind::R2plus1d] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut store = ParamStore::<f64>::new();
            let head = TcmHead::new(&mut store, &small_cfg(kind), &mut rng).unwrap();
            let mut s = Session::new(&store, true);
            let x = s.graph.constant(Tensor::from_fn(vec![3, 3, 4, 8, 8], |i| (i as f64 * 0.1).sin()));
            let y = head.forward(&mut s, x).unwrap();
            assert_eq!(s.graph.shape(y), &[3, 6]);
        }
    }

    #[test]
    fn head_rejects_single_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let head = TcmHead::new(&mut store, &small_cfg(TemporalConvKind::Tadaconv), &mut rng).unwrap();
        let mut s = Session::new(&store, true);
        let x = s.graph.constant(Tensor::ones(vec![2, 3, 1, 8, 8]));
        assert!(head.forward(&mut s, x).is_err());
    }

    #[test]
    fn parses_kind_names() {
        assert_eq!("r2plus1d".parse::<TemporalConvKind>().unwrap(), TemporalConvKind::R2plus1d);
        assert!("c2d".parse::<TemporalConvKind>().is_err());
    }
}
