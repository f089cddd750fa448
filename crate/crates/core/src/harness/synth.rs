use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bvfe::sample_fragments;
use crate::numerics::Tensor;
use crate::storage::{write_tensor, Manifest, ManifestEntry, TextEmbeddingPaths};

use super::HarnessError;

/// Parameters of a synthetic corpus.
///
/// Every video has a latent mean embedding `μ`; frame embeddings are `μ`
/// plus per-frame jitter, and `MOS = σ(⟨mean_t z_t, w⟩) + noise·ε` for a
/// unit planted direction `w`. Pixels carry the same quality signal as
/// texture contrast, so the fragment and clip volumes are informative too.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub dim: usize,
    pub noise: f64,
    /// Seed for videos and MOS noise.
    pub seed: u64,
    /// Seed for the planted direction, text embeddings and feature projection.
    pub direction_seed: u64,
    /// Explicit planted direction of length `dim`, used as given. When absent
    /// a unit vector is drawn from `direction_seed`.
    pub planted_direction: Option<Vec<f64>>,
    pub frames: usize,
    pub frame_side: usize,
    pub fragment_grid: usize,
    pub fragment_size: usize,
    pub local_channels: usize,
    pub clip_side: usize,
    /// Standard deviation of each component of `μ`.
    pub signal_scale: f64,
    pub frame_jitter: f64,
    pub dataset: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 200,
            dim: 32,
            noise: 0.02,
            seed: 0,
            direction_seed: 7,
            planted_direction: None,
            frames: 20,
            frame_side: 8,
            fragment_grid: 2,
            fragment_size: 4,
            local_channels: 16,
            clip_side: 4,
            signal_scale: 1.5,
            frame_jitter: 0.2,
            dataset: "synthetic".into(),
        }
    }
}

/// What [`synth_dataset`] wrote.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub planted: Vec<f64>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Shared {
    planted: Vec<f64>,
    text: [Vec<f64>; 3],
    projection: Vec<[f64; 2]>,
}

fn shared(cfg: &SynthConfig) -> Shared {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.direction_seed);
    let mut planted: Vec<f64> = (0..cfg.dim).map(|_| normal(&mut rng)).collect();
    let norm = planted.iter().map(|v| v * v).sum::<f64>().sqrt();
    planted.iter_mut().for_each(|v| *v /= norm);
    if let Some(p) = &cfg.planted_direction {
        planted = p.clone();
    }
    let mut vec = || (0..cfg.dim).map(|_| normal(&mut rng)).collect::<Vec<_>>();
    let text = [vec(), vec(), vec()];
    let projection = (0..cfg.local_channels).map(|_| [normal(&mut rng), normal(&mut rng)]).collect();
    Shared {
        planted,
        text,
        projection,
    }
}

fn check(cfg: &SynthConfig) -> Result<(), HarnessError> {
    let bad = |m: &str| Err(HarnessError::Config(format!("synthetic corpus: {m}")));
    if cfg.n_videos < 2 || cfg.dim == 0 || cfg.frames == 0 {
        return bad("need at least 2 videos, a positive width and frames");
    }
    if cfg.clip_side == 0 || cfg.frame_side % cfg.clip_side != 0 {
        return bad("clip_side must divide frame_side");
    }
    if cfg.local_channels == 0 || cfg.fragment_grid == 0 || cfg.fragment_size == 0 {
        return bad("fragment geometry and channels must be positive");
    }
    if let Some(p) = &cfg.planted_direction {
        if p.len() != cfg.dim || p.iter().any(|v| !v.is_finite()) {
            return bad("planted_direction must have dim finite entries");
        }
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return bad("noise must be non-negative");
    }
    Ok(())
}

/// Per-cell mean and standard deviation of a `3×T×(g·s)×(g·s)` mosaic,
/// projected to `C_l` channels: `C_l×T×g×g`.
fn local_features(patches: &Tensor<f64>, g: usize, s: usize, projection: &[[f64; 2]]) -> Tensor<f32> {
    let [c, t, _, _] = patches.shape()[..] else {
        unreachable!("mosaic is rank 4")
    };
    let cl = projection.len();
    let mut out = vec![0f32; cl * t * g * g];
    for ti in 0..t {
        for cell in 0..g * g {
            let (gi, gj) = (cell / g, cell % g);
            let mut vals = Vec::with_capacity(c * s * s);
            for ch in 0..c {
                for r in 0..s {
                    for q in 0..s {
                        vals.push(patches.get(&[ch, ti, gi * s + r, gj * s + q]));
                    }
                }
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            for (k, p) in projection.iter().enumerate() {
                out[((k * t + ti) * g + gi) * g + gj] = (p[0] * mean + p[1] * sd) as f32;
            }
        }
    }
    Tensor::new(vec![cl, t, g, g], out).expect("consistent shape")
}

fn avg_pool_spatial(x: &Tensor<f64>, side: usize) -> Tensor<f32> {
    let [c, t, h, w] = x.shape()[..] else {
        unreachable!("video is rank 4")
    };
    let (fh, fw) = (h / side, w / side);
    Tensor::from_fn(vec![c, t, side, side], |i| {
        let (plane, cell) = (i / (side * side), i % (side * side));
        let (ci, ti) = (plane / t, plane % t);
        let (y, xq) = (cell / side, cell % side);
        let mut acc = 0.0;
        for a in 0..fh {
            for b in 0..fw {
                acc += x.get(&[ci, ti, y * fh + a, xq * fw + b]);
            }
        }
        (acc / (fh * fw) as f64) as f32
    })
}

/// Writes a synthetic corpus (tensor files and `manifest.json`) into `dir`.
pub fn synth_dataset(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<SynthOutput, HarnessError> {
    check(cfg)?;
    let dir = dir.as_ref();
    let sh = shared(cfg);
    let text_paths = TextEmbeddingPaths {
        guide: "text/guide.dvlt".into(),
        pos: "text/pos.dvlt".into(),
        neg: "text/neg.dvlt".into(),
    };
    for (v, p) in sh.text.iter().zip([&text_paths.guide, &text_paths.pos, &text_paths.neg]) {
        write_tensor(&Tensor::from_vec(v.iter().map(|&x| x as f32).collect()), dir.join(p))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, f, side) = (cfg.dim, cfg.frames, cfg.frame_side);
    let mut entries = Vec::with_capacity(cfg.n_videos);
    for v in 0..cfg.n_videos {
        let id = format!("{}_{v:04}", cfg.dataset);
        let mu: Vec<f64> = (0..d).map(|_| cfg.signal_scale * normal(&mut rng)).collect();
        let z: Vec<f64> = (0..f * d)
            .map(|i| mu[i % d] + cfg.frame_jitter * normal(&mut rng))
            .collect();
        let latent: f64 = (0..d)
            .map(|j| (0..f).map(|t| z[t * d + j]).sum::<f64>() / f as f64 * sh.planted[j])
            .sum();
        let quality = sigmoid(latent);
        let mos = quality + cfg.noise * normal(&mut rng);

        let contrast = 0.1 + 0.4 * quality;
        let video = Tensor::from_fn(vec![3, f, side, side], |_| 0.5 + contrast * rng.random_range(-1.0..1.0));
        let frag_seed: u64 = rng.random();
        let grid = sample_fragments(&video, cfg.fragment_grid, cfg.fragment_size, frag_seed)?;
        let local = local_features(&grid.patches, cfg.fragment_grid, cfg.fragment_size, &sh.projection);
        let clip = avg_pool_spatial(&video, cfg.clip_side);

        let base = PathBuf::from("videos").join(&id);
        let frames_path = base.join("frames.dvlt");
        let fragments_path = base.join("fragments.dvlt");
        let clip_path = base.join("clip.dvlt");
        write_tensor(&Tensor::new(vec![f, d], z.iter().map(|&x| x as f32).collect())?, dir.join(&frames_path))?;
        write_tensor(&local, dir.join(&fragments_path))?;
        write_tensor(&clip, dir.join(&clip_path))?;
        entries.push(ManifestEntry {
            video_id: id,
            mos,
            mos_scale: [0.0, 1.0],
            frames_path,
            fragments_path,
            clip_path: Some(clip_path),
            num_frames: f,
            split: None,
            dataset: cfg.dataset.clone(),
        });
    }
    let lo = entries.iter().map(|e| e.mos).fold(0.0, f64::min).floor();
    let hi = entries.iter().map(|e| e.mos).fold(1.0, f64::max).ceil();
    entries.iter_mut().for_each(|e| e.mos_scale = [lo, hi]);

    let mut manifest = Manifest::new(entries, text_paths);
    manifest.encoder = Some("synthetic".into());
    let manifest_path = dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(SynthOutput {
        manifest: manifest.with_base_dir(dir),
        manifest_path,
        planted: sh.planted,
    })
}
