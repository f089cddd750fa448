//! Measurements shared by the acceptance suite and the per-area tests.

use std::path::Path;

use dvlta_core::fusion::{fuse, fusion_weights, Fusion, FusionMode, FusionWeights};
use dvlta_core::numerics::layers::add_channel_bias;
use dvlta_core::numerics::{ParamStore, Session, Tensor};
use dvlta_core::scoring::{plcc, quality_score, srocc, ScoreBatch};
use dvlta_core::storage::{encode_tensor, read_tensor, write_tensor};
use dvlta_core::tcm::TadaConv;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{pearson_exact, srocc_brute_force};

fn uniform(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Largest `|tada_conv(x) − (W_b * x + b)|` over random instances whose
/// calibration output layer is left at its zero initialization.
pub fn tada_identity_max_diff(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for i in 0..instances {
        let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..7), rng.random_range(1..7));
        let (t, h, w) = (rng.random_range(2..6), rng.random_range(2..7), rng.random_range(2..7));
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let mut store = ParamStore::<f64>::new();
        let tada = TadaConv::new(&mut store, &format!("t{i}"), c, o, [k, k], &mut rng);
        let calib_out = tada.calib_out.weight;
        for id in [tada.base, tada.bias, tada.calib_reduce.weight] {
            let shape = store.get(id).value.shape().to_vec();
            store.get_mut(id).value = uniform(shape, &mut rng);
        }
        assert!(store.get(calib_out).value.data().iter().all(|&v| v == 0.0));
        let x = uniform(vec![n, c, t, h, w], &mut rng);
        let mut s = Session::new(&store, true);
        let xv = s.graph.constant(x);
        let y = tada.forward(&mut s, xv).unwrap();
        let shared = tada.shared_conv(&mut s, xv).unwrap();
        let shared = add_channel_bias(&mut s, shared, tada.bias).unwrap();
        worst = worst.max(s.graph.value(y).max_abs_diff(s.graph.value(shared)));
    }
    worst
}

pub struct FusionChecks {
    pub rescale_max_diff: f64,
    pub graph_rescale_max_diff: f64,
    pub weights_in_range: bool,
    pub linearity_max_err: f64,
}

/// Weight invariance under positive rescaling, weight range and linearity of
/// the weighted sum, over `cases` random draws.
pub fn fusion_checks(cases: usize, dim: usize, seed: u64) -> FusionChecks {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = FusionChecks {
        rescale_max_diff: 0.0,
        graph_rescale_max_diff: 0.0,
        weights_in_range: true,
        linearity_max_err: 0.0,
    };
    let vec = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let mut store = ParamStore::<f64>::new();
    let fusion = Fusion::new(&mut store, FusionMode::TextGuided, 3, dim, false, &mut rng).unwrap();
    for _ in 0..cases {
        let f = [vec(&mut rng), vec(&mut rng), vec(&mut rng)];
        let g = vec(&mut rng);
        let base = fusion_weights(&f[0], &f[1], &f[2], &g).unwrap();
        out.weights_in_range &= base.as_array().iter().all(|w| (-1.0..=1.0).contains(w));

        let which = rng.random_range(0..4);
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let scale = |v: &[f64]| v.iter().map(|x| x * c).collect::<Vec<_>>();
        let mut fs = f.clone();
        let mut gs = g.clone();
        if which < 3 {
            fs[which] = scale(&f[which]);
        } else {
            gs = scale(&g);
        }
        let moved = fusion_weights(&fs[0], &fs[1], &fs[2], &gs).unwrap();
        for (a, b) in base.as_array().iter().zip(moved.as_array()) {
            out.rescale_max_diff = out.rescale_max_diff.max((a - b).abs());
        }

        // Same property through the differentiable path, batched.
        let graph_weights = |fs: &[Vec<f64>; 3], g: &[f64]| {
            let mut s = Session::new(&store, false);
            let vars: Vec<_> = fs
                .iter()
                .map(|v| s.graph.constant(Tensor::new(vec![1, dim], v.clone()).unwrap()))
                .collect();
            let gv = s.graph.constant(Tensor::new(vec![1, dim], g.to_vec()).unwrap());
            let fused = fusion.forward(&mut s, &vars, gv).unwrap();
            s.graph.value(fused.weights.unwrap()).data().to_vec()
        };
        for (a, b) in graph_weights(&f, &g).iter().zip(graph_weights(&fs, &gs)) {
            out.graph_rescale_max_diff = out.graph_rescale_max_diff.max((a - b).abs());
        }

        // Linear in the features for fixed weights, and in the weights.
        let h = [vec(&mut rng), vec(&mut rng), vec(&mut rng)];
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix: Vec<Vec<f64>> = (0..3)
            .map(|k| f[k].iter().zip(&h[k]).map(|(x, y)| a * x + b * y).collect())
            .collect();
        let lhs = fuse([&mix[0], &mix[1], &mix[2]], &base).unwrap();
        let ff = fuse([&f[0], &f[1], &f[2]], &base).unwrap();
        let fh = fuse([&h[0], &h[1], &h[2]], &base).unwrap();
        for i in 0..dim {
            out.linearity_max_err = out.linearity_max_err.max((lhs[i] - (a * ff[i] + b * fh[i])).abs());
        }
        let w2 = FusionWeights {
            w_bvfe: rng.random_range(-1.0..1.0),
            w_tcm: rng.random_range(-1.0..1.0),
            w_vbtc: rng.random_range(-1.0..1.0),
        };
        let wsum = FusionWeights {
            w_bvfe: base.w_bvfe + w2.w_bvfe,
            w_tcm: base.w_tcm + w2.w_tcm,
            w_vbtc: base.w_vbtc + w2.w_vbtc,
        };
        let fs_sum = fuse([&f[0], &f[1], &f[2]], &wsum).unwrap();
        let f2 = fuse([&f[0], &f[1], &f[2]], &w2).unwrap();
        for i in 0..dim {
            out.linearity_max_err = out.linearity_max_err.max((fs_sum[i] - (ff[i] + f2[i])).abs());
        }
        // A single non-zero weight selects that branch.
        let only = FusionWeights {
            w_bvfe: 0.0,
            w_tcm: 1.0,
            w_vbtc: 0.0,
        };
        let sel = fuse([&f[0], &f[1], &f[2]], &only).unwrap();
        for i in 0..dim {
            out.linearity_max_err = out.linearity_max_err.max((sel[i] - f[1][i]).abs());
        }
    }
    out
}

pub struct ScoringChecks {
    pub in_open_unit: bool,
    pub equal_is_half: bool,
    pub monotone: bool,
}

/// Contracts of the two-way softmax over a `points × points` grid of
/// similarities in `[-range, range]`.
pub fn scoring_checks(points: usize, range: f64) -> ScoringChecks {
    let grid: Vec<f64> = (0..points)
        .map(|i| -range + 2.0 * range * i as f64 / (points - 1) as f64)
        .collect();
    let mut c = ScoringChecks {
        in_open_unit: true,
        equal_is_half: true,
        monotone: true,
    };
    for &sn in &grid {
        c.equal_is_half &= quality_score(sn, sn) == 0.5;
        let mut prev = f64::NEG_INFINITY;
        for &sp in &grid {
            let q = quality_score(sp, sn);
            c.in_open_unit &= q > 0.0 && q < 1.0;
            c.monotone &= q > prev;
            prev = q;
        }
        let mut prev = f64::INFINITY;
        for &sp in &grid {
            // Decreasing in s_neg.
            let q = quality_score(sn, sp);
            c.monotone &= q < prev;
            prev = q;
        }
    }
    c
}

/// Largest deviation of `plcc` from the exact-arithmetic oracle.
pub fn plcc_oracle_max_err(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..cases {
        let n = rng.random_range(2..60);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| rng.random_range(-1.0..1.0) * 5.0 + v).collect();
        let got = plcc(&ScoreBatch::new(x.clone(), y.clone()).unwrap()).unwrap();
        worst = worst.max((got - pearson_exact(&x, &y)).abs());
    }
    worst
}

/// Largest deviation of `srocc` from the rank-enumeration oracle over tied
/// inputs with `2 ≤ n ≤ 8`. Draws with a constant side are skipped.
pub fn srocc_oracle_max_err(cases: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut checked) = (0f64, 0);
    while checked < cases {
        let n = rng.random_range(2..=8);
        let levels = rng.random_range(2..6);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5).collect();
        if x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]) {
            continue;
        }
        let got = srocc(&ScoreBatch::new(x.clone(), y.clone()).unwrap()).unwrap();
        worst = worst.max((got - srocc_brute_force(&x, &y)).abs());
        checked += 1;
    }
    (worst, checked)
}

fn pair(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    n.prop_flat_map(|n| (prop::collection::vec(-1e3..1e3f64, n), prop::collection::vec(-1e3..1e3f64, n)))
}

/// Affine invariance of PLCC over `cases` generated inputs.
pub fn plcc_affine_property(cases: u32, seed: u64) -> Result<(), String> {
    let mut runner = TestRunner::new_with_rng(
        Config::with_cases(cases),
        proptest::test_runner::TestRng::from_seed(proptest::test_runner::RngAlgorithm::ChaCha, &seed_bytes(seed)),
    );
    runner
        .run(&(pair(3..50), 1e-2..1e2f64, -1e3..1e3f64, any::<bool>()), |((x, y), a, b, neg)| {
            let Ok(r) = plcc(&ScoreBatch::new(x.clone(), y.clone()).unwrap()) else {
                return Ok(());
            };
            let s = if neg { -a } else { a };
            let xt: Vec<f64> = x.iter().map(|v| s * v + b).collect();
            let yt: Vec<f64> = y.iter().map(|v| a * v - b).collect();
            let r2 = plcc(&ScoreBatch::new(xt, yt).unwrap()).unwrap();
            let expected = if neg { -r } else { r };
            prop_assert!((r2 - expected).abs() < 1e-9, "{r2} vs {expected}");
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Invariance of SROCC under strictly increasing transforms.
pub fn srocc_monotone_property(cases: u32, seed: u64) -> Result<(), String> {
    let mut runner = TestRunner::new_with_rng(
        Config::with_cases(cases),
        proptest::test_runner::TestRng::from_seed(proptest::test_runner::RngAlgorithm::ChaCha, &seed_bytes(seed)),
    );
    runner
        .run(&(pair(3..50), 0usize..3), |((x, y), which)| {
            let Ok(r) = srocc(&ScoreBatch::new(x.clone(), y.clone()).unwrap()) else {
                return Ok(());
            };
            let f = |v: f64| match which {
                0 => v.powi(3),
                1 => (v / 1e3).exp(),
                _ => v.atan() * 7.0 + v,
            };
            let xt: Vec<f64> = x.iter().map(|&v| f(v)).collect();
            let yt: Vec<f64> = y.iter().map(|&v| f(v)).collect();
            let r2 = srocc(&ScoreBatch::new(xt, yt).unwrap()).unwrap();
            prop_assert!((r - r2).abs() < 1e-12, "{r} vs {r2}");
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn seed_bytes(seed: u64) -> [u8; 32] {
    let mut b = [0u8; 32];
    b[..8].copy_from_slice(&seed.to_le_bytes());
    b
}

fn disk_round_trip<T: dvlta_core::Scalar>(t: &Tensor<T>, path: &Path) -> bool {
    write_tensor(t, path).unwrap();
    let on_disk = std::fs::read(path).unwrap();
    let Ok(back) = read_tensor(path) else { return false };
    let u = back.to::<T>();
    let same_dtype = back.dtype() == T::DTYPE;
    same_dtype
        && u.shape() == t.shape()
        && encode_tensor(t).unwrap() == on_disk
        && encode_tensor(&u).unwrap() == on_disk
}

/// Writes random tensors (rank 0 to 5, both dtypes, arbitrary bit patterns)
/// to disk, reads them back and re-encodes them; returns how many cases were
/// not byte-identical.
pub fn storage_round_trip_failures(cases: usize, seed: u64, dir: &Path) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for i in 0..cases {
        let rank = rng.random_range(0..=5);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..5)).collect();
        let n = shape.iter().product::<usize>();
        let path = dir.join(format!("case{i}.dvlt"));
        let ok = if rng.random_bool(0.5) {
            let t = Tensor::new(shape, (0..n).map(|_| f32::from_bits(rng.random())).collect()).unwrap();
            disk_round_trip(&t, &path)
        } else {
            let t = Tensor::new(shape, (0..n).map(|_| f64::from_bits(rng.random())).collect()).unwrap();
            disk_round_trip(&t, &path)
        };
        failures += usize::from(!ok);
    }
    failures
}
