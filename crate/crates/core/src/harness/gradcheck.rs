//! Finite-difference checks of every head, the fusion/scoring path and the
//! full model under the correlation loss.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bvfe::{BvfeConfig, BvfeHead};
use crate::fusion::{Fusion, FusionMode, TextAdapter, TextEmbeddingSet};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, Init, NumericsError, ParamKind, ParamStore, Session, Tensor, Var};
use crate::scoring::{plcc_loss_graph, prompt_scores};
use crate::tcm::{TcmConfig, TcmHead, TemporalConvKind};
use crate::vbtc::{VbtcConfig, VbtcHead};

use super::{BatchInput, DvltaModel, HarnessError, ModelShapes, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub dim: usize,
    pub frames: usize,
    pub side: usize,
    pub batch: usize,
    pub local_channels: usize,
    pub stem_channels: Vec<usize>,
    /// Entries checked per parameter; `None` checks all of them.
    pub entries_per_param: Option<usize>,
    /// Half-width of the uniform perturbation applied to every trainable
    /// parameter, so zero-initialized parts are exercised too.
    pub perturbation: f64,
    pub seed: u64,
    pub step: f64,
    pub tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        let o = GradCheckOptions::default();
        Self {
            dim: 32,
            frames: 4,
            side: 8,
            batch: 4,
            local_channels: 8,
            stem_channels: vec![4, 8],
            entries_per_param: Some(8),
            perturbation: 0.1,
            seed: 0,
            step: o.step,
            tol: o.tol,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub name: String,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

pub const CASES: [&str; 8] = [
    "vbtc",
    "tcm_tadaconv",
    "tcm_c3d",
    "tcm_r2plus1d",
    "bvfe",
    "fusion_text_guided",
    "fusion_concat_softmax",
    "model_plcc",
];

fn uniform(shape: &[usize], half: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-half..half))
}

fn perturb(store: &mut ParamStore<f64>, half: f64, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut().filter(|p| p.trainable) {
        let noise = uniform(p.value.shape(), half, rng);
        p.value = Tensor::new(
            p.value.shape().to_vec(),
            p.value.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect(),
        )
        .expect("same shape");
    }
}

/// `mean(out ⊙ R)` for a fixed random `R`, so every output entry matters.
/// Averaging keeps the loss O(1), which keeps rounding noise on exactly-zero
/// gradients (e.g. a bias feeding batch norm) well below the floor.
fn projected_mean(s: &mut Session<f64>, out: Var, r: &Tensor<f64>) -> Result<Var, NumericsError> {
    let rv = s.graph.constant(r.clone());
    let prod = s.graph.mul(out, rv)?;
    let axes: Vec<usize> = (0..r.ndim()).collect();
    s.graph.mean_axes(prod, &axes)
}

fn options(cfg: &GradCheckConfig) -> GradCheckOptions {
    GradCheckOptions {
        step: cfg.step,
        tol: cfg.tol,
        max_entries_per_param: cfg.entries_per_param,
        seed: cfg.seed,
        ..GradCheckOptions::default()
    }
}

fn head_case<H>(
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
    build: impl FnOnce(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<H, HarnessError>,
    input_shape: &[usize],
    forward: impl Fn(&H, &mut Session<f64>, Var) -> Result<Var, NumericsError>,
) -> Result<GradCheckReport, HarnessError> {
    let mut store = ParamStore::new();
    let head = build(&mut store, rng)?;
    perturb(&mut store, cfg.perturbation, rng);
    let x = uniform(input_shape, 1.0, rng);
    let out_shape = {
        let mut s = Session::new(&store, true);
        let xv = s.graph.constant(x.clone());
        let out = forward(&head, &mut s, xv)?;
        s.graph.shape(out).to_vec()
    };
    let r = uniform(&out_shape, 1.0, rng);
    Ok(grad_check(
        &store,
        |s| {
            let xv = s.graph.constant(x.clone());
            let out = forward(&head, s, xv)?;
            projected_mean(s, out, &r)
        },
        &options(cfg),
    )?)
}

fn tcm_case(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng, kind: TemporalConvKind) -> Result<GradCheckReport, HarnessError> {
    let tc = TcmConfig {
        in_channels: 3,
        stem_channels: cfg.stem_channels.clone(),
        dim: cfg.dim,
        temporal_conv: kind,
        ..TcmConfig::default()
    };
    head_case(
        cfg,
        rng,
        |st, r| Ok(TcmHead::new(st, &tc, r)?),
        &[cfg.batch, 3, cfg.frames, cfg.side, cfg.side],
        |h, s, x| h.forward(s, x),
    )
}

fn text_set(d: usize, rng: &mut ChaCha8Rng) -> Result<TextEmbeddingSet<f64>, NumericsError> {
    TextEmbeddingSet::new(uniform(&[d], 1.0, rng), uniform(&[d], 1.0, rng), uniform(&[d], 1.0, rng))
}

fn row(s: &mut Session<f64>, t: &Tensor<f64>) -> Result<Var, NumericsError> {
    let v = s.graph.constant(t.clone());
    s.graph.reshape(v, &[1, t.numel()])
}

/// Branch features are parameters here, so gradients flow into them as well.
fn fusion_case(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng, mode: FusionMode, softmax: bool) -> Result<GradCheckReport, HarnessError> {
    let (n, d) = (cfg.batch, cfg.dim);
    let mut store = ParamStore::new();
    let feats: Vec<_> = (0..3)
        .map(|i| store.register(format!("input.f{i}"), &[n, d], ParamKind::Weight, Init::Zeros, rng))
        .collect();
    let adapter = TextAdapter::new(&mut store, d, 0.4, rng)?;
    let fusion = Fusion::new(&mut store, mode, 3, d, softmax, rng)?;
    perturb(&mut store, 1.0, rng);
    let text = text_set(d, rng)?;
    let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    Ok(grad_check(
        &store,
        |s| {
            let fs: Vec<Var> = feats.iter().map(|&id| s.param(id)).collect();
            let g = row(s, &text.guide)?;
            let guide = adapter.forward(s, g)?;
            let p = row(s, &text.pos)?;
            let pos = adapter.forward(s, p)?;
            let neg = row(s, &text.neg)?;
            let fused = fusion.forward(s, &fs, guide)?;
            let scores = prompt_scores(s, fused.features, pos, neg, 1.0)?;
            plcc_loss_graph(s, scores.q_pre, &gt)
        },
        &options(cfg),
    )?)
}

fn model_case(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<GradCheckReport, HarnessError> {
    let (n, d, t) = (cfg.batch, cfg.dim, cfg.frames);
    let run = RunConfig {
        dim: d,
        num_frames: t,
        stem_channels: cfg.stem_channels.clone(),
        ..RunConfig::default()
    };
    let shapes = ModelShapes {
        dim: d,
        local_channels: Some(cfg.local_channels),
        clip_channels: Some(3),
    };
    let mut store = ParamStore::new();
    let model = DvltaModel::new(&mut store, &run, shapes, rng)?;
    perturb(&mut store, cfg.perturbation, rng);
    let batch = BatchInput {
        frames: Some(uniform(&[n, t, d, 2, 2], 1.0, rng)),
        fragments: Some(uniform(&[n, cfg.local_channels, t, 2, 2], 1.0, rng)),
        clip: Some(uniform(&[n, 3, t, cfg.side, cfg.side], 1.0, rng)),
        gt: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        ids: (0..n).map(|i| format!("v{i}")).collect(),
    };
    let text = text_set(d, rng)?;
    Ok(grad_check(
        &store,
        |s| {
            let out = model.forward(s, &batch, &text).map_err(|e| match e {
                HarnessError::Numerics(e) => e,
                other => NumericsError::InvalidArgument(other.to_string()),
            })?;
            plcc_loss_graph(s, out.scores.q_pre, &batch.gt)
        },
        &options(cfg),
    )?)
}

/// Runs one named case from [`CASES`].
pub fn run_case(name: &str, cfg: &GradCheckConfig) -> Result<GradCheckCase, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    let (n, d, t) = (cfg.batch, cfg.dim, cfg.frames);
    let report = match name {
        "vbtc" => head_case(
            cfg,
            &mut rng,
            |st, r| {
                let vc = VbtcConfig {
                    dim: d,
                    ..VbtcConfig::default()
                };
                Ok(VbtcHead::new(st, &vc, r)?)
            },
            &[n, t, d, 2, 2],
            |h, s, x| h.forward(s, x),
        )?,
        "tcm_tadaconv" => tcm_case(cfg, &mut rng, TemporalConvKind::Tadaconv)?,
        "tcm_c3d" => tcm_case(cfg, &mut rng, TemporalConvKind::C3d)?,
        "tcm_r2plus1d" => tcm_case(cfg, &mut rng, TemporalConvKind::R2plus1d)?,
        "bvfe" => head_case(
            cfg,
            &mut rng,
            |st, r| {
                let bc = BvfeConfig {
                    in_channels: cfg.local_channels,
                    dim: d,
                };
                Ok(BvfeHead::new(st, &bc, r)?)
            },
            &[n, cfg.local_channels, t, 2, 2],
            |h, s, x| h.forward(s, x),
        )?,
        "fusion_text_guided" => fusion_case(cfg, &mut rng, FusionMode::TextGuided, false)?,
        "fusion_concat_softmax" => fusion_case(cfg, &mut rng, FusionMode::Concat, true)?,
        "model_plcc" => model_case(cfg, &mut rng)?,
        other => return Err(HarnessError::Config(format!("unknown gradient check {other:?}"))),
    };
    Ok(GradCheckCase {
        name: name.to_string(),
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_all(cfg: &GradCheckConfig) -> Result<Vec<GradCheckCase>, HarnessError> {
    CASES.iter().map(|c| run_case(c, cfg)).collect()
}
