use std::fs;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::fusion::{Branch, TextEmbeddingSet};
use crate::numerics::{Scalar, Tensor};
use crate::storage::{decode_tensor, validate_manifest, AnyTensor, Manifest, Split, StorageError};

use super::{HarnessError, RunConfig};

/// `t` contiguous frame indices out of `available`.
///
/// With a seed the window start is uniform over the valid range; without
/// one the window is centred. Short videos repeat their last frame.
pub fn sample_frames(available: usize, t: usize, seed: Option<u64>) -> Result<Vec<usize>, HarnessError> {
    if available == 0 || t == 0 {
        return Err(HarnessError::Data(format!("cannot sample {t} frames from {available}")));
    }
    if available <= t {
        return Ok((0..t).map(|i| i.min(available - 1)).collect());
    }
    let slack = available - t;
    let start = match seed {
        Some(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..=slack),
        None => slack / 2,
    };
    Ok((start..start + t).collect())
}

/// Keeps `indices` along `axis` of `x`.
pub fn select_axis<T: Scalar>(x: &Tensor<T>, axis: usize, indices: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let mut data = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            let start = (o * len + i) * inner;
            data.extend_from_slice(&x.data()[start..start + inner]);
        }
    }
    let mut out = shape.to_vec();
    out[axis] = indices.len();
    Tensor::new(out, data).expect("selection keeps shape consistent")
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>, HarnessError> {
    let first = items.first().ok_or_else(|| HarnessError::Data("empty batch".into()))?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(HarnessError::Data(format!(
                "cannot batch tensors of shapes {:?} and {:?}",
                first.shape(),
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::new(shape, data)?)
}

/// One video's stored inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub mos: f64,
    pub num_frames: usize,
    pub split: Option<Split>,
    /// `T×D×H×W`.
    pub frames: Option<Tensor<f32>>,
    /// `C_l×T'×H'×W'`.
    pub fragments: Option<Tensor<f32>>,
    /// `3×T×H×W`.
    pub clip: Option<Tensor<f32>>,
}

/// A manifest with the tensors needed by a set of branches loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<VideoRecord>,
    pub text: TextEmbeddingSet<f32>,
    /// SHA-256 over the manifest JSON and every tensor file read.
    pub digest: String,
}

fn read(m: &Manifest, p: &std::path::Path, hasher: &mut Sha256) -> Result<AnyTensor, HarnessError> {
    let path = m.resolve(p);
    let bytes = fs::read(&path).map_err(|e| StorageError::io(&path, e))?;
    hasher.update(&bytes);
    Ok(decode_tensor(&bytes).map_err(|e| e.at(&path))?)
}

impl Dataset {
    /// Validates `manifest` and loads what `branches` need.
    pub fn load(manifest: &Manifest, branches: &[Branch]) -> Result<Self, HarnessError> {
        validate_manifest(manifest).into_result()?;
        let mut hasher = Sha256::new();
        hasher.update(manifest.to_json().as_bytes());
        let tp = &manifest.text_embeddings;
        let text = TextEmbeddingSet::new(
            read(manifest, &tp.guide, &mut hasher)?.to(),
            read(manifest, &tp.pos, &mut hasher)?.to(),
            read(manifest, &tp.neg, &mut hasher)?.to(),
        )?;
        let mut records = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let frames = match branches.contains(&Branch::Vbtc) {
                true => {
                    let z: Tensor<f32> = read(manifest, &e.frames_path, &mut hasher)?.to();
                    let s = z.shape().to_vec();
                    let (h, w) = if s.len() == 4 { (s[2], s[3]) } else { (1, 1) };
                    Some(z.reshape(vec![s[0], s[1], h, w])?)
                }
                false => None,
            };
            let need_frag = branches.contains(&Branch::Bvfe);
            let need_clip = branches.contains(&Branch::Tcm);
            let fragments: Option<Tensor<f32>> = match need_frag || (need_clip && e.clip_path.is_none()) {
                true => Some(read(manifest, &e.fragments_path, &mut hasher)?.to()),
                false => None,
            };
            let clip = match (need_clip, &e.clip_path) {
                (false, _) => None,
                (true, Some(p)) => Some(read(manifest, p, &mut hasher)?.to()),
                (true, None) => match &fragments {
                    Some(f) if f.shape()[0] == 3 => Some(f.clone()),
                    _ => {
                        return Err(HarnessError::Data(format!(
                            "{}: the temporal branch needs clip_path or 3-channel fragments",
                            e.video_id
                        )))
                    }
                },
            };
            if let Some(c) = &clip {
                if c.shape()[1] != e.num_frames {
                    return Err(HarnessError::Data(format!(
                        "{}: clip has {} frames, manifest says {}",
                        e.video_id,
                        c.shape()[1],
                        e.num_frames
                    )));
                }
            }
            records.push(VideoRecord {
                video_id: e.video_id.clone(),
                mos: e.mos,
                num_frames: e.num_frames,
                split: e.split,
                frames,
                fragments: fragments.filter(|_| need_frag),
                clip,
            });
        }
        let name = manifest
            .entries
            .first()
            .map(|e| e.dataset.clone())
            .unwrap_or_default();
        Ok(Self {
            name,
            records,
            text,
            digest: hex::encode(hasher.finalize()),
        })
    }

    pub fn dim(&self) -> usize {
        self.text.dim()
    }

    pub fn local_channels(&self) -> Option<usize> {
        self.records.first()?.fragments.as_ref().map(|f| f.shape()[0])
    }

    pub fn clip_channels(&self) -> Option<usize> {
        self.records.first()?.clip.as_ref().map(|c| c.shape()[0])
    }

    /// Record indices per split. Labelled manifests use their labels;
    /// unlabelled ones get a seeded 70/10/20 shuffle.
    pub fn splits(&self, seed: u64) -> Result<Splits, HarnessError> {
        let labelled = self.records.iter().filter(|r| r.split.is_some()).count();
        let mut out = Splits::default();
        if labelled == self.records.len() {
            for (i, r) in self.records.iter().enumerate() {
                out.get_mut(r.split.unwrap()).push(i);
            }
        } else if labelled == 0 {
            let mut order: Vec<usize> = (0..self.records.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n = order.len();
            let n_train = (n * 7).div_ceil(10);
            let n_val = n / 10;
            out.train = order[..n_train].to_vec();
            out.val = order[n_train..n_train + n_val].to_vec();
            out.test = order[n_train + n_val..].to_vec();
            for v in [&mut out.train, &mut out.val, &mut out.test] {
                v.sort_unstable();
            }
        } else {
            return Err(HarnessError::Data(format!(
                "{labelled} of {} entries carry split labels; label all or none",
                self.records.len()
            )));
        }
        Ok(out)
    }

    /// Indices for a split selection (`None` means every record).
    pub fn select(&self, split: Option<Split>, seed: u64) -> Result<Vec<usize>, HarnessError> {
        match split {
            None => Ok((0..self.records.len()).collect()),
            Some(s) => Ok(self.splits(seed)?.get(s).to_vec()),
        }
    }

    /// Assembles a batch. `frame_seeds` switches to random frame windows.
    pub fn batch<T: Scalar>(
        &self,
        indices: &[usize],
        num_frames: usize,
        mut frame_seeds: Option<&mut ChaCha8Rng>,
    ) -> Result<BatchInput<T>, HarnessError> {
        let mut frames = Vec::new();
        let mut fragments = Vec::new();
        let mut clips = Vec::new();
        let mut gt = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = &self.records[i];
            let seed = frame_seeds.as_deref_mut().map(|g| g.random::<u64>());
            let idx = sample_frames(r.num_frames, num_frames, seed)?;
            if let Some(z) = &r.frames {
                frames.push(select_axis(z, 0, &idx).cast());
            }
            if let Some(f) = &r.fragments {
                let f = if f.shape()[1] == r.num_frames { select_axis(f, 1, &idx) } else { f.clone() };
                fragments.push(f.cast());
            }
            if let Some(c) = &r.clip {
                clips.push(select_axis(c, 1, &idx).cast());
            }
            gt.push(r.mos);
        }
        let opt = |v: Vec<Tensor<T>>| if v.is_empty() { Ok(None) } else { stack(&v).map(Some) };
        Ok(BatchInput {
            frames: opt(frames)?,
            fragments: opt(fragments)?,
            clip: opt(clips)?,
            gt,
            ids: indices.iter().map(|&i| self.records[i].video_id.clone()).collect(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, s: Split) -> &[usize] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, s: Split) -> &mut Vec<usize> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Model inputs for `N` videos.
#[derive(Clone, Debug)]
pub struct BatchInput<T> {
    /// `N×T×D×H×W`.
    pub frames: Option<Tensor<T>>,
    /// `N×C_l×T'×H'×W'`.
    pub fragments: Option<Tensor<T>>,
    /// `N×3×T×H×W`.
    pub clip: Option<Tensor<T>>,
    pub gt: Vec<f64>,
    pub ids: Vec<String>,
}

impl<T> BatchInput<T> {
    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }
}

impl RunConfig {
    /// Checks that the data fits the configured model.
    pub fn check_dataset(&self, data: &Dataset) -> Result<(), HarnessError> {
        if data.dim() != self.dim {
            return Err(HarnessError::Config(format!(
                "config dim {} does not match the text embedding width {}",
                self.dim,
                data.dim()
            )));
        }
        Ok(())
    }
}
