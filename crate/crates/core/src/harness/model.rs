use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bvfe::{BvfeConfig, BvfeHead};
use crate::fusion::{Branch, Fusion, TextAdapter, TextEmbeddingSet};
use crate::numerics::{ParamStore, Scalar, Session, Tensor, Var};
use crate::scoring::{prompt_scores, PromptScores};
use crate::tcm::{TcmConfig, TcmHead};
use crate::vbtc::{VbtcConfig, VbtcHead};

use super::{BatchInput, HarnessError, RunConfig};

/// Input widths the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShapes {
    pub dim: usize,
    pub local_channels: Option<usize>,
    pub clip_channels: Option<usize>,
}

/// The full model: enabled heads, text adapter, fusion and prompt scoring.
#[derive(Clone, Debug)]
pub struct DvltaModel {
    pub bvfe: Option<BvfeHead>,
    pub tcm: Option<TcmHead>,
    pub vbtc: Option<VbtcHead>,
    pub text_adapter: TextAdapter,
    pub fusion: Fusion,
    pub branches: Vec<Branch>,
    pub temperature: f64,
    pub adapt_prompts: bool,
    pub shapes: ModelShapes,
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub scores: PromptScores,
    /// `N×k` fusion weights in text-guided mode.
    pub weights: Option<Var>,
    /// Per-branch `N×D` features, in `branches` order.
    pub features: Vec<Var>,
}

impl DvltaModel {
    /// Registers all parameters in `store`. Registration order is fixed, so
    /// the same seed always yields the same initial weights.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &RunConfig,
        shapes: ModelShapes,
        rng: &mut impl Rng,
    ) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let d = shapes.dim;
        if d != cfg.dim {
            return Err(HarnessError::Config(format!("config dim {} does not match data width {d}", cfg.dim)));
        }
        let branches = cfg.active_branches();
        let missing = |what: &str| HarnessError::Data(format!("{what} required by the enabled branches is missing"));
        let bvfe = match cfg.has(Branch::Bvfe) {
            true => {
                let c = shapes.local_channels.ok_or_else(|| missing("fragment features"))?;
                Some(BvfeHead::new(store, &BvfeConfig { in_channels: c, dim: d }, rng)?)
            }
            false => None,
        };
        let tcm = match cfg.has(Branch::Tcm) {
            true => {
                let tc = TcmConfig {
                    in_channels: shapes.clip_channels.ok_or_else(|| missing("clip volume"))?,
                    stem_channels: cfg.stem_channels.clone(),
                    dim: d,
                    temporal_conv: cfg.temporal_conv,
                    cbam_order: cfg.cbam_order,
                    pool_window: cfg.pool_window,
                    ..TcmConfig::default()
                };
                Some(TcmHead::new(store, &tc, rng)?)
            }
            false => None,
        };
        let vbtc = match cfg.has(Branch::Vbtc) {
            true => {
                let vc = VbtcConfig {
                    dim: d,
                    reduction: cfg.reduction,
                    alpha: cfg.alpha,
                };
                Some(VbtcHead::new(store, &vc, rng)?)
            }
            false => None,
        };
        let text_adapter = TextAdapter::new(store, d, cfg.text_beta, rng)?;
        let fusion = Fusion::new(store, cfg.fusion_mode, branches.len(), d, cfg.softmax_fusion_weights, rng)?;
        Ok(Self {
            bvfe,
            tcm,
            vbtc,
            text_adapter,
            fusion,
            branches,
            temperature: cfg.temperature,
            adapt_prompts: cfg.adapt_prompts,
            shapes,
        })
    }

    fn text_row<T: Scalar>(&self, s: &mut Session<T>, t: &Tensor<T>, adapt: bool) -> Result<Var, HarnessError> {
        let row = s.graph.constant(t.clone().reshape(vec![1, t.numel()])?);
        Ok(if adapt { self.text_adapter.forward(s, row)? } else { row })
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<T>,
        batch: &BatchInput<T>,
        text: &TextEmbeddingSet<T>,
    ) -> Result<ModelOutput, HarnessError> {
        let input = |t: &Option<Tensor<T>>, what: &str| {
            t.clone()
                .ok_or_else(|| HarnessError::Data(format!("batch lacks {what} for an enabled branch")))
        };
        let mut features = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let f = match b {
                Branch::Bvfe => {
                    let x = s.graph.constant(input(&batch.fragments, "fragment features")?);
                    self.bvfe.as_ref().expect("built with bvfe").forward(s, x)?
                }
                Branch::Tcm => {
                    let x = s.graph.constant(input(&batch.clip, "clip volumes")?);
                    self.tcm.as_ref().expect("built with tcm").forward(s, x)?
                }
                Branch::Vbtc => {
                    let x = s.graph.constant(input(&batch.frames, "frame embeddings")?);
                    self.vbtc.as_ref().expect("built with vbtc").forward(s, x)?
                }
            };
            features.push(f);
        }
        let guide = self.text_row(s, &text.guide, true)?;
        let pos = self.text_row(s, &text.pos, self.adapt_prompts)?;
        let neg = self.text_row(s, &text.neg, self.adapt_prompts)?;
        let fused = self.fusion.forward(s, &features, guide)?;
        let scores = prompt_scores(s, fused.features, pos, neg, self.temperature)?;
        Ok(ModelOutput {
            scores,
            weights: fused.weights,
            features,
        })
    }
}
