//! Low-level detail head: fragment grid sampling and the two-layer 3D conv
//! refinement over local fragment features.
//!
//! Fragment offsets are drawn from a SplitMix64 stream seeded directly with
//! the user seed. Regions are visited row-major; for each, the row offset
//! is `next() % (span_y + 1)` and then the column offset is
//! `next() % (span_x + 1)`, where `span = region_extent − s`. Region `i` of
//! `g` along an axis of length `L` covers `[i·L/g, (i+1)·L/g)` (integer
//! division). The same offsets are used for every frame.

use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::numerics::layers::{Conv3d, Linear};
use crate::numerics::{ConvGeometry, NumericsError, ParamStore, Scalar, Session, Tensor, Var};

/// Sampled fragments and the source positions they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FragmentGrid<T> {
    /// `C×T×(g·s)×(g·s)`.
    pub patches: Tensor<T>,
    /// Top-left `(row, col)` of each crop in the source frame, row-major over regions.
    pub offsets: Vec<(usize, usize)>,
    pub grid: usize,
    pub patch: usize,
}

fn region(i: usize, g: usize, len: usize) -> (usize, usize) {
    (i * len / g, (i + 1) * len / g)
}

/// Crop positions for a `g×g` grid of `s×s` patches over an `h×w` frame.
pub fn fragment_offsets(h: usize, w: usize, g: usize, s: usize, seed: u64) -> Result<Vec<(usize, usize)>, NumericsError> {
    if g == 0 || s == 0 {
        return Err(NumericsError::InvalidArgument(format!("grid {g} and patch {s} must be positive")));
    }
    if h / g < s || w / g < s {
        return Err(NumericsError::InvalidArgument(format!(
            "frame {h}×{w} split {g}×{g} has regions smaller than the {s}×{s} patch"
        )));
    }
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut out = Vec::with_capacity(g * g);
    for i in 0..g {
        let (y0, y1) = region(i, g, h);
        for j in 0..g {
            let (x0, x1) = region(j, g, w);
            let dy = rng.next_u64() % ((y1 - y0 - s) as u64 + 1);
            let dx = rng.next_u64() % ((x1 - x0 - s) as u64 + 1);
            out.push((y0 + dy as usize, x0 + dx as usize));
        }
    }
    Ok(out)
}

/// Assembles `frames: C×T×H×W` into a `C×T×(g·s)×(g·s)` fragment mosaic.
pub fn sample_fragments<T: Scalar>(frames: &Tensor<T>, g: usize, s: usize, seed: u64) -> Result<FragmentGrid<T>, NumericsError> {
    let [c, t, h, w] = frames.shape()[..] else {
        return Err(NumericsError::InvalidShape(format!("frames must be C×T×H×W, got {:?}", frames.shape())));
    };
    let offsets = fragment_offsets(h, w, g, s, seed)?;
    let side = g * s;
    let src = frames.data();
    let mut data = vec![T::zero(); c * t * side * side];
    for plane in 0..c * t {
        let (inp, out) = (&src[plane * h * w..], &mut data[plane * side * side..]);
        for (k, &(oy, ox)) in offsets.iter().enumerate() {
            let (gi, gj) = (k / g, k % g);
            for r in 0..s {
                let from = (oy + r) * w + ox;
                let to = (gi * s + r) * side + gj * s;
                out[to..to + s].copy_from_slice(&inp[from..from + s]);
            }
        }
    }
    Ok(FragmentGrid {
        patches: Tensor::new(vec![c, t, side, side], data)?,
        offsets,
        grid: g,
        patch: s,
    })
}

/// `F_local`, a rank-4 `C_l×T×H×W` feature volume.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeatureVolume<T> {
    f: Tensor<T>,
}

impl<T: Scalar> LocalFeatureVolume<T> {
    pub fn new(f: Tensor<T>) -> Result<Self, NumericsError> {
        if f.ndim() != 4 {
            return Err(NumericsError::InvalidShape(format!("local features must be rank 4, got {:?}", f.shape())));
        }
        Ok(Self { f })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.f
    }

    pub fn channels(&self) -> usize {
        self.f.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct BvfeConfig {
    pub in_channels: usize,
    pub dim: usize,
}

/// `proj(mean(conv2(gelu(conv1(F_local)))))`, both convs `1×3×3`,
/// channels `C_l → C_l/2 → C_l/4`.
#[derive(Clone, Debug)]
pub struct BvfeHead {
    pub conv1: Conv3d,
    pub conv2: Conv3d,
    pub proj: Linear,
    pub in_channels: usize,
    out_channels: usize,
}

impl BvfeHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &BvfeConfig, rng: &mut impl Rng) -> Result<Self, NumericsError> {
        let c = cfg.in_channels;
        if c < 4 || c % 4 != 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "local feature channels must be a positive multiple of 4, got {c}"
            )));
        }
        let geom = ConvGeometry::new([1, 1, 1], [0, 1, 1]);
        Ok(Self {
            conv1: Conv3d::new(store, "bvfe.conv1", c, c / 2, [1, 3, 3], geom, true, rng),
            conv2: Conv3d::new(store, "bvfe.conv2", c / 2, c / 4, [1, 3, 3], geom, true, rng),
            proj: Linear::new(store, "bvfe.proj", c / 4, cfg.dim, true, rng),
            in_channels: c,
            out_channels: c / 4,
        })
    }

    /// `f: N×C_l×T×H×W → N×D`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, f: Var) -> Result<Var, NumericsError> {
        let shape = s.graph.shape(f).to_vec();
        if shape.len() != 5 || shape[1] != self.in_channels {
            return Err(NumericsError::ShapeMismatch {
                op: "bvfe",
                lhs: shape,
                rhs: vec![self.in_channels],
            });
        }
        let x = self.conv1.forward(s, f)?;
        let x = s.graph.gelu(x)?;
        let x = self.conv2.forward(s, x)?;
        let x = s.graph.mean_axes(x, &[2, 3, 4])?;
        let x = s.graph.reshape(x, &[shape[0], self.out_channels])?;
        self.proj.forward(s, x)
    }
}
