use serde::{Deserialize, Serialize};

use crate::fusion::{Branch, FusionMode};
use crate::scoring::{DEFAULT_NEGATIVE_PROMPT, DEFAULT_POSITIVE_PROMPT};
use crate::tcm::{CbamOrder, TemporalConvKind};

use super::HarnessError;

pub const DEFAULT_GUIDE_PROMPT: &str = "video quality";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prompts {
    pub positive: String,
    pub negative: String,
    pub guide: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            positive: DEFAULT_POSITIVE_PROMPT.into(),
            negative: DEFAULT_NEGATIVE_PROMPT.into(),
            guide: DEFAULT_GUIDE_PROMPT.into(),
        }
    }
}

/// Everything that determines a run. JSON keys match the field names;
/// missing keys take their defaults and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Frames sampled per video.
    pub num_frames: usize,
    /// Fragment grid side `g` and patch side `s`, used when sampling fragments from pixels.
    pub fragment_grid: usize,
    pub fragment_size: usize,
    /// Residual weight of the frame-embedding adapter.
    pub alpha: f64,
    /// Adapter bottleneck ratio.
    pub reduction: usize,
    /// Feature width shared by heads and text embeddings.
    pub dim: usize,
    pub lr: f64,
    pub optimizer: AdamWConfig,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub fusion_mode: FusionMode,
    pub temporal_conv: TemporalConvKind,
    pub branches: Vec<Branch>,
    /// Temperature applied to prompt cosines.
    pub temperature: f64,
    pub prompts: Prompts,
    /// Residual weight of the text adapter.
    pub text_beta: f64,
    /// Also pass the quality prompts through the text adapter (the guide always is).
    pub adapt_prompts: bool,
    pub softmax_fusion_weights: bool,
    pub cbam_order: CbamOrder,
    /// Odd temporal window for aggregation; `None` pools all frames.
    pub pool_window: Option<usize>,
    pub stem_channels: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_frames: 16,
            fragment_grid: 7,
            fragment_size: 32,
            alpha: 0.4,
            reduction: 4,
            dim: 512,
            lr: 1e-3,
            optimizer: AdamWConfig::default(),
            batch: 8,
            epochs: 50,
            seed: 0,
            fusion_mode: FusionMode::TextGuided,
            temporal_conv: TemporalConvKind::Tadaconv,
            branches: Branch::ALL.to_vec(),
            temperature: 1.0,
            prompts: Prompts::default(),
            text_beta: 0.4,
            adapt_prompts: true,
            softmax_fusion_weights: false,
            cbam_order: CbamOrder::Parallel,
            pool_window: None,
            stem_channels: vec![16, 32],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn has(&self, b: Branch) -> bool {
        self.branches.contains(&b)
    }

    /// Enabled branches in canonical `bvfe, tcm, vbtc` order.
    pub fn active_branches(&self) -> Vec<Branch> {
        Branch::ALL.into_iter().filter(|b| self.has(*b)).collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.batch < 2 {
            return bad(format!("batch must be at least 2 for correlation losses, got {}", self.batch));
        }
        if self.branches.is_empty() {
            return bad("branches must not be empty".into());
        }
        let mut seen = self.branches.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.branches.len() {
            return bad("branches contain duplicates".into());
        }
        if self.num_frames == 0 {
            return bad("num_frames must be positive".into());
        }
        if self.has(Branch::Tcm) && self.num_frames < 2 {
            return bad("the temporal branch needs num_frames >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.text_beta) {
            return bad("alpha and text_beta must lie in [0, 1]".into());
        }
        if self.reduction == 0 || self.dim % self.reduction != 0 {
            return bad(format!("dim {} is not divisible by reduction {}", self.dim, self.reduction));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return bad("invalid optimizer settings".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive".into());
        }
        if self.fragment_grid == 0 || self.fragment_size == 0 {
            return bad("fragment geometry must be positive".into());
        }
        if let Some(w) = self.pool_window {
            if w % 2 == 0 {
                return bad(format!("pool_window must be odd, got {w}"));
            }
        }
        if self.stem_channels.is_empty() || self.stem_channels.contains(&0) {
            return bad("stem_channels must be non-empty and positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.num_frames, c.fragment_grid, c.fragment_size, c.dim, c.batch), (16, 7, 32, 512, 8));
        assert_eq!((c.alpha, c.lr, c.optimizer.weight_decay), (0.4, 1e-3, 0.01));
        assert_eq!(c.prompts.positive, "high quality");
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json(r#"{"dim": 32, "fusion_mode": "add", "branches": ["vbtc", "tcm"]}"#).unwrap();
        assert_eq!(c.dim, 32);
        assert_eq!(c.fusion_mode, FusionMode::Add);
        assert_eq!(c.active_branches(), vec![Branch::Tcm, Branch::Vbtc]);
        assert_eq!(c.num_frames, 16);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::from_json(r#"{"batch": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"branches": []}"#).is_err());
        assert!(RunConfig::from_json(r#"{"num_frames": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"num_frames": 1, "branches": ["vbtc"]}"#).is_ok());
        assert!(RunConfig::from_json(r#"{"dim": 30}"#).is_err());
        assert!(RunConfig::from_json(r#"{"learning_rate": 0.1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"temporal_conv": "c2d"}"#).is_err());
    }

    #[test]
    fn round_trips() {
        let c = RunConfig {
            pool_window: Some(3),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
