//! Text adapter and text-guided fusion of the head outputs.
//!
//! Each head feature is weighted by its cosine similarity to the guide
//! embedding and the weighted features are summed. The raw cosines are used
//! as weights; a softmax-normalized variant and two untrained-weight
//! baselines (concat + linear, equal add) are available for ablation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::layers::{cosine_rows, Linear};
use crate::numerics::ops::{cosine_similarity, l2_norm, NORM_EPS};
use crate::numerics::{NumericsError, ParamStore, Scalar, Session, Tensor, Var};

/// Guide and prompt-pair embeddings, all of one width.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingSet<T> {
    pub guide: Tensor<T>,
    pub pos: Tensor<T>,
    pub neg: Tensor<T>,
}

impl<T: Scalar> TextEmbeddingSet<T> {
    pub fn new(guide: Tensor<T>, pos: Tensor<T>, neg: Tensor<T>) -> Result<Self, NumericsError> {
        let d = guide.numel();
        for (name, t) in [("guide", &guide), ("pos", &pos), ("neg", &neg)] {
            if t.ndim() != 1 || t.numel() != d {
                return Err(NumericsError::InvalidShape(format!(
                    "text embedding {name} must be a vector of width {d}, got {:?}",
                    t.shape()
                )));
            }
            if l2_norm(t.data()).f64() <= NORM_EPS {
                return Err(NumericsError::ZeroNorm { op: "text embedding" });
            }
        }
        Ok(Self { guide, pos, neg })
    }

    pub fn dim(&self) -> usize {
        self.guide.numel()
    }

    /// Rows `[guide, pos, neg]` as a `3×D` matrix.
    pub fn stacked(&self) -> Tensor<T> {
        let mut data = self.guide.data().to_vec();
        data.extend_from_slice(self.pos.data());
        data.extend_from_slice(self.neg.data());
        Tensor::new(vec![3, self.dim()], data).expect("three rows of width D")
    }

    pub fn cast<U: Scalar>(&self) -> TextEmbeddingSet<U> {
        TextEmbeddingSet {
            guide: self.guide.cast(),
            pos: self.pos.cast(),
            neg: self.neg.cast(),
        }
    }
}

pub const TEXT_ADAPTER_REDUCTION: usize = 4;

/// `β·MLP(t) + (1 − β)·t` with a `D → D/4 → D` ReLU bottleneck.
#[derive(Clone, Debug)]
pub struct TextAdapter {
    pub fc1: Linear,
    pub fc2: Linear,
    pub beta: f64,
}

impl TextAdapter {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, dim: usize, beta: f64, rng: &mut impl Rng) -> Result<Self, NumericsError> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(NumericsError::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
        }
        let hidden = (dim / TEXT_ADAPTER_REDUCTION).max(1);
        Ok(Self {
            fc1: Linear::new(store, "text_adapter.fc1", dim, hidden, true, rng),
            fc2: Linear::new(store, "text_adapter.fc2", hidden, dim, true, rng),
            beta,
        })
    }

    /// `t: M×D → M×D`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, t: Var) -> Result<Var, NumericsError> {
        let h = self.fc1.forward(s, t)?;
        let h = s.graph.relu(h)?;
        let h = self.fc2.forward(s, h)?;
        let a = s.graph.scale(h, T::of(self.beta))?;
        let b = s.graph.scale(t, T::of(1.0 - self.beta))?;
        s.graph.add(a, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Bvfe,
    Tcm,
    Vbtc,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Bvfe, Branch::Tcm, Branch::Vbtc];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Bvfe => "bvfe",
            Branch::Tcm => "tcm",
            Branch::Vbtc => "vbtc",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Branch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Branch::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown branch {s:?} (expected bvfe, tcm or vbtc)"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    TextGuided,
    Concat,
    Add,
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text_guided" => Ok(Self::TextGuided),
            "concat" => Ok(Self::Concat),
            "add" => Ok(Self::Add),
            other => Err(format!("unknown fusion mode {other:?} (expected text_guided, concat or add)")),
        }
    }
}

/// Cosine weights of the three head features against the guide.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w_bvfe: f64,
    pub w_tcm: f64,
    pub w_vbtc: f64,
}

impl FusionWeights {
    pub fn as_array(&self) -> [f64; 3] {
        [self.w_bvfe, self.w_tcm, self.w_vbtc]
    }
}

pub fn fusion_weights<T: Scalar>(f_bvfe: &[T], f_tcm: &[T], f_vbtc: &[T], guide: &[T]) -> Result<FusionWeights, NumericsError> {
    Ok(FusionWeights {
        w_bvfe: cosine_similarity(f_bvfe, guide)?.f64(),
        w_tcm: cosine_similarity(f_tcm, guide)?.f64(),
        w_vbtc: cosine_similarity(f_vbtc, guide)?.f64(),
    })
}

/// `Σ_k w_k · F_k` over `[bvfe, tcm, vbtc]`.
pub fn fuse<T: Scalar>(features: [&[T]; 3], weights: &FusionWeights) -> Result<Vec<T>, NumericsError> {
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(NumericsError::InvalidArgument("fused features must share a width".into()));
    }
    let w = weights.as_array().map(T::of);
    Ok((0..d)
        .map(|i| w[0] * features[0][i] + w[1] * features[1][i] + w[2] * features[2][i])
        .collect())
}

/// Unweighted sum of the features.
pub fn fuse_add<T: Scalar>(features: &[&[T]]) -> Result<Vec<T>, NumericsError> {
    let d = features.first().map_or(0, |f| f.len());
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(NumericsError::InvalidArgument("fused features must share a nonzero width".into()));
    }
    Ok((0..d).map(|i| features.iter().map(|f| f[i]).sum()).collect())
}

/// Graph output of [`Fusion::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    /// `N×D`.
    pub features: Var,
    /// `N×k` branch weights, text-guided mode only.
    pub weights: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub mode: FusionMode,
    pub softmax_weights: bool,
    pub concat: Option<Linear>,
    pub branches: usize,
}

impl Fusion {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        mode: FusionMode,
        branches: usize,
        dim: usize,
        softmax_weights: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        if branches == 0 {
            return Err(NumericsError::InvalidArgument("fusion needs at least one branch".into()));
        }
        let concat = (mode == FusionMode::Concat).then(|| Linear::new(store, "fusion.concat", branches * dim, dim, true, rng));
        Ok(Self {
            mode,
            softmax_weights,
            concat,
            branches,
        })
    }

    /// `features`: one `N×D` per branch; `guide`: `1×D`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, features: &[Var], guide: Var) -> Result<Fused, NumericsError> {
        if features.len() != self.branches {
            return Err(NumericsError::InvalidArgument(format!(
                "fusion built for {} branches, got {}",
                self.branches,
                features.len()
            )));
        }
        match self.mode {
            FusionMode::TextGuided => {
                let mut ws = Vec::with_capacity(features.len());
                for &f in features {
                    ws.push(cosine_rows(s, f, guide)?);
                }
                if self.softmax_weights {
                    ws = softmax_columns(s, &ws)?;
                }
                let mut acc = s.graph.mul(features[0], ws[0])?;
                for (&f, &w) in features.iter().zip(&ws).skip(1) {
                    let term = s.graph.mul(f, w)?;
                    acc = s.graph.add(acc, term)?;
                }
                let weights = s.graph.concat(&ws, 1)?;
                Ok(Fused {
                    features: acc,
                    weights: Some(weights),
                })
            }
            FusionMode::Concat => {
                let cat = s.graph.concat(features, 1)?;
                let proj = self.concat.as_ref().expect("concat mode has a projection");
                Ok(Fused {
                    features: proj.forward(s, cat)?,
                    weights: None,
                })
            }
            FusionMode::Add => {
                let mut acc = features[0];
                for &f in &features[1..] {
                    acc = s.graph.add(acc, f)?;
                }
                Ok(Fused {
                    features: acc,
                    weights: None,
                })
            }
        }
    }
}

/// Softmax across a list of `N×1` columns.
fn softmax_columns<T: Scalar>(s: &mut Session<T>, ws: &[Var]) -> Result<Vec<Var>, NumericsError> {
    // Cosines are bounded, so exp needs no max shift.
    let exps = ws.iter().map(|&w| s.graph.exp(w)).collect::<Result<Vec<_>, _>>()?;
    let mut total = exps[0];
    for &e in &exps[1..] {
        total = s.graph.add(total, e)?;
    }
    let inv = s.graph.pow(total, -T::one())?;
    exps.iter().map(|&e| s.graph.mul(e, inv)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_parallel_and_orthogonal() {
        let g = [1.0, 0.0];
        let w = fusion_weights(&[2.0, 0.0], &[0.0, 3.0], &[-1.0, 0.0], &g).unwrap();
        assert!((w.w_bvfe - 1.0).abs() < 1e-15);
        assert!(w.w_tcm.abs() < 1e-15);
        assert!((w.w_vbtc + 1.0).abs() < 1e-15);
        assert!(fusion_weights(&[0.0, 0.0], &g, &g, &g).is_err());
    }

    #[test]
    fn fuse_by_hand() {
        let (a, b, c) = ([1.0, 2.0, 3.0, 4.0], [0.5, 0.0, -1.0, 2.0], [-2.0, 1.0, 0.0, 1.0]);
        let w = FusionWeights {
            w_bvfe: 0.5,
            w_tcm: -1.0,
            w_vbtc: 0.25,
        };
        let got = fuse([&a, &b, &c], &w).unwrap();
        assert_eq!(got, vec![-0.5, 1.25, 2.5, 0.25]);
        let zero = FusionWeights {
            w_bvfe: 0.0,
            w_tcm: 0.0,
            w_vbtc: 0.0,
        };
        assert!(fuse([&a, &b, &c], &zero).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(fuse_add(&[&a[..], &a[..], &a[..]]).unwrap(), vec![3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn adapter_beta_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let adapter = TextAdapter::new(&mut store, 8, 0.0, &mut rng).unwrap();
        let t = Tensor::from_fn(vec![3, 8], |i| (i as f64).sin());
        let mut s = Session::new(&store, false);
        let tv = s.graph.constant(t.clone());
        let out = adapter.forward(&mut s, tv).unwrap();
        assert_eq!(s.graph.value(out), &t);
        assert!(TextAdapter::new(&mut store, 8, 1.5, &mut rng).is_err());
    }

    #[test]
    fn graph_fusion_matches_eager() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let fusion = Fusion::new(&mut store, FusionMode::TextGuided, 3, 4, false, &mut rng).unwrap();
        let feats: Vec<Tensor<f64>> = (0..3)
            .map(|k| Tensor::from_fn(vec![1, 4], |i| ((i + 3 * k) as f64 * 0.9).cos()))
            .collect();
        let guide = Tensor::new(vec![1, 4], vec![0.3, -0.2, 1.0, 0.4]).unwrap();
        let mut s = Session::new(&store, false);
        let fv: Vec<Var> = feats.iter().map(|f| s.graph.constant(f.clone())).collect();
        let gv = s.graph.constant(guide.clone());
        let out = fusion.forward(&mut s, &fv, gv).unwrap();
        let w = fusion_weights(feats[0].data(), feats[1].data(), feats[2].data(), guide.data()).unwrap();
        let want = fuse([feats[0].data(), feats[1].data(), feats[2].data()], &w).unwrap();
        for (g, e) in s.graph.value(out.features).data().iter().zip(&want) {
            assert!((g - e).abs() < 1e-12);
        }
        let ws = s.graph.value(out.weights.unwrap()).data().to_vec();
        for (g, e) in ws.iter().zip(w.as_array()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let fusion = Fusion::new(&mut store, FusionMode::TextGuided, 2, 3, true, &mut rng).unwrap();
        let mut s = Session::new(&store, false);
        let a = s.graph.constant(Tensor::from_fn(vec![2, 3], |i| i as f64 + 1.0));
        let b = s.graph.constant(Tensor::from_fn(vec![2, 3], |i| 1.0 - i as f64));
        let g = s.graph.constant(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.5]).unwrap());
        let out = fusion.forward(&mut s, &[a, b], g).unwrap();
        let w = s.graph.value(out.weights.unwrap()).data().to_vec();
        for row in w.chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn baselines_have_width_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [FusionMode::Concat, FusionMode::Add] {
            let mut store = ParamStore::<f64>::new();
            let fusion = Fusion::new(&mut store, mode, 3, 5, false, &mut rng).unwrap();
            let mut s = Session::new(&store, false);
            let f = s.graph.constant(Tensor::from_fn(vec![2, 5], |i| i as f64));
            let g = s.graph.constant(Tensor::ones(vec![1, 5]));
            let out = fusion.forward(&mut s, &[f, f, f], g).unwrap();
            assert_eq!(s.graph.shape(out.features), &[2, 5]);
            if mode == FusionMode::Add {
                assert_eq!(s.graph.value(out.features).data()[4], 12.0);
            }
        }
    }

    #[test]
    fn embedding_set_validation() {
        let v = Tensor::from_vec(vec![1.0f32, 2.0]);
        assert!(TextEmbeddingSet::new(v.clone(), v.clone(), Tensor::zeros(vec![2])).is_err());
        assert!(TextEmbeddingSet::new(v.clone(), v.clone(), Tensor::ones(vec![3])).is_err());
        let set = TextEmbeddingSet::new(v.clone(), v.clone(), v).unwrap();
        assert_eq!(set.stacked().shape(), &[3, 2]);
    }

    #[test]
    fn parses_names() {
        assert_eq!("vbtc".parse::<Branch>().unwrap(), Branch::Vbtc);
        assert_eq!("concat".parse::<FusionMode>().unwrap(), FusionMode::Concat);
        assert!("mul".parse::<FusionMode>().is_err());
    }
}
