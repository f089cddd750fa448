//! Raw slice kernels shared by the eager ops and the autodiff graph.

use super::tensor::Scalar;
use super::NumericsError;

pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a^T · g` for `a: m×k`, `g: m×n`.
pub(crate) fn matmul_at_b<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in row.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
    out
}

/// `g · b^T` for `g: m×n`, `b: k×n`.
pub(crate) fn matmul_a_bt<T: Scalar>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// Stride and zero padding per (time, height, width) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub const fn unit() -> Self {
        Self {
            stride: [1, 1, 1],
            pad: [0, 0, 0],
        }
    }

    pub const fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { stride, pad }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv3dDims {
    pub n: usize,
    pub c: usize,
    pub o: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub geom: ConvGeometry,
}

impl Conv3dDims {
    /// `x: N×C×T×H×W`, `w: O×C×kt×kh×kw`.
    pub fn infer(
        x: &[usize],
        w: &[usize],
        geom: ConvGeometry,
    ) -> Result<Self, NumericsError> {
        if x.len() != 5 || w.len() != 5 || x[1] != w[1] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv3d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        if geom.stride.iter().any(|&s| s == 0) {
            return Err(NumericsError::InvalidArgument("conv stride must be positive".into()));
        }
        let mut output = [0; 3];
        for d in 0..3 {
            let padded = x[2 + d] + 2 * geom.pad[d];
            if padded < w[2 + d] {
                return Err(NumericsError::ShapeMismatch {
                    op: "conv3d (kernel larger than padded input)",
                    lhs: x.to_vec(),
                    rhs: w.to_vec(),
                });
            }
            output[d] = (padded - w[2 + d]) / geom.stride[d] + 1;
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            o: w[0],
            input: [x[2], x[3], x[4]],
            kernel: [w[2], w[3], w[4]],
            output,
            geom,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.output[0], self.output[1], self.output[2]]
    }
}

/// Output positions `o` whose input coordinate `o*stride + k - pad` lies inside `[0, len)`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if len + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Visits every contiguous output row touched by one kernel tap.
///
/// The callback receives `(n, o, c, weight_index, out_offset, in_offset, count)`;
/// consecutive outputs advance by 1 and consecutive inputs by the width stride.
fn for_each_tap(d: &Conv3dDims, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
    let [it, ih, iw] = d.input;
    let [kt, kh, kw] = d.kernel;
    let [ot, oh, ow] = d.output;
    let [st, sh, sw] = d.geom.stride;
    let [pt, ph, pw] = d.geom.pad;
    let in_plane = ih * iw;
    let in_chan = it * in_plane;
    let out_plane = oh * ow;
    let out_chan = ot * out_plane;
    for n in 0..d.n {
        for o in 0..d.o {
            for c in 0..d.c {
                for a in 0..kt {
                    let (t0, t1) = valid_range(a, pt, st, it, ot);
                    for b in 0..kh {
                        let (h0, h1) = valid_range(b, ph, sh, ih, oh);
                        for e in 0..kw {
                            let (w0, w1) = valid_range(e, pw, sw, iw, ow);
                            if w1 <= w0 {
                                continue;
                            }
                            let widx = (((o * d.c + c) * kt + a) * kh + b) * kw + e;
                            for t in t0..t1 {
                                let ti = t * st + a - pt;
                                for h in h0..h1 {
                                    let hi = h * sh + b - ph;
                                    let out_off =
                                        (n * d.o + o) * out_chan + t * out_plane + h * ow + w0;
                                    let in_off = (n * d.c + c) * in_chan
                                        + ti * in_plane
                                        + hi * iw
                                        + (w0 * sw + e - pw);
                                    f(n, o, c, widx, out_off, in_off, w1 - w0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], d: &Conv3dDims) -> Vec<T> {
    let mut out = vec![T::zero(); d.n * d.o * d.output.iter().product::<usize>()];
    let sw = d.geom.stride[2];
    for_each_tap(d, |_, _, _, widx, oo, io, cnt| {
        let wv = w[widx];
        let dst = &mut out[oo..oo + cnt];
        for (j, v) in dst.iter_mut().enumerate() {
            *v = *v + wv * x[io + j * sw];
        }
    });
    out
}

pub(crate) fn conv3d_backward_input<T: Scalar>(g: &[T], w: &[T], d: &Conv3dDims) -> Vec<T> {
    let mut gx = vec![T::zero(); d.n * d.c * d.input.iter().product::<usize>()];
    let sw = d.geom.stride[2];
    for_each_tap(d, |_, _, _, widx, oo, io, cnt| {
        let wv = w[widx];
        for j in 0..cnt {
            let p = io + j * sw;
            gx[p] = gx[p] + wv * g[oo + j];
        }
    });
    gx
}

pub(crate) fn conv3d_backward_weight<T: Scalar>(g: &[T], x: &[T], d: &Conv3dDims) -> Vec<T> {
    let mut gw = vec![T::zero(); d.o * d.c * d.kernel.iter().product::<usize>()];
    let sw = d.geom.stride[2];
    for_each_tap(d, |_, _, _, widx, oo, io, cnt| {
        let mut acc = T::zero();
        for j in 0..cnt {
            acc = acc + g[oo + j] * x[io + j * sw];
        }
        gw[widx] = gw[widx] + acc;
    });
    gw
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mx = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - mx).exp();
                out[at(j)] = e;
                z = z + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / z;
            }
        }
    }
    out
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let v = x.f64();
    T::of(0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let v = x.f64();
    let cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::of(cdf + v * pdf)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_handles_padding_and_stride() {
        // len 5, pad 1, kernel tap 0, stride 2: inputs -1,1,3 -> outputs 1,2 valid
        assert_eq!(valid_range(0, 1, 2, 5, 3), (1, 3));
        assert_eq!(valid_range(2, 1, 2, 5, 3), (0, 2));
        assert_eq!(valid_range(1, 0, 1, 3, 2), (0, 2));
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let g: Vec<f64> = (0..8).map(|v| v as f64 * 0.5).collect(); // 2x4
        let atg = matmul_at_b(&a, &g, 2, 3, 4);
        // explicit transpose then matmul
        let at: Vec<f64> = (0..3).flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f64)).collect();
        assert_eq!(atg, matmul(&at, &g, 3, 2, 4));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }
}
