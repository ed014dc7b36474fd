//! Analytic compute model of a ViT forward pass. One multiply–accumulate counts as one
//! floating-point operation, the convention under which ViT-B/16 at 224px costs ≈17.5 G.

use serde::Serialize;

use crate::vit::ModelConfig;

/// Costs in GFLOPs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsEstimate {
    /// Sequence length including the class token and registers.
    pub tokens: usize,
    pub embedding: f64,
    /// QKV and output projections, all layers.
    pub attention_projections: f64,
    /// `QKᵀ` and `AV`, all layers; grows as `T²`.
    pub attention_scores: f64,
    pub mlp: f64,
    pub head: f64,
    pub total: f64,
}

/// Cost of encoding `n_live_tokens` patch tokens plus the special tokens.
pub fn flops_estimate(cfg: &ModelConfig, n_live_tokens: usize) -> FlopsEstimate {
    let t = (n_live_tokens + 1 + cfg.n_registers) as f64;
    let d = cfg.embed_dim as f64;
    let layers = cfg.n_layers as f64;
    let g = 1e-9;
    let embedding = n_live_tokens as f64 * cfg.patch_dim() as f64 * d * g;
    let attention_projections = layers * 4.0 * t * d * d * g;
    let attention_scores = layers * 2.0 * t * t * d * g;
    let mlp = layers * 2.0 * t * d * cfg.mlp_dim() as f64 * g;
    let head = d * cfg.n_classes as f64 * g;
    FlopsEstimate {
        tokens: t as usize,
        embedding,
        attention_projections,
        attention_scores,
        mlp,
        head,
        total: embedding + attention_projections + attention_scores + mlp + head,
    }
}
