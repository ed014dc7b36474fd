use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ablation, Architecture, IfamConfig};
use crate::selector::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: IfamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the selector (stage-1 transformer, prototypes, part classifier).
    pub lr_stage1: f64,
    /// Learning rate of the predictor, or of the whole dense baseline.
    pub lr_stage2: f64,
    /// Half-cosine decay of both learning rates over all steps.
    pub cosine: bool,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Maximum global gradient norm.
    pub clip: f64,
    pub part_dropout: f64,
    /// Gumbel noise on part assignments during training.
    pub gumbel: bool,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: IfamConfig::default(),
            epochs: 10,
            batch_size: 32,
            lr_stage1: 1e-3,
            lr_stage2: 1e-3,
            cosine: true,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 2.0,
            part_dropout: 0.3,
            gumbel: true,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::config("clip must be positive"));
        }
        if !(0.0..=1.0).contains(&self.part_dropout) {
            return Err(Error::config("part_dropout must be in [0, 1]"));
        }
        for (name, v) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_stage2", self.lr_stage2),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::config("invalid optimizer moments"));
        }
        Ok(())
    }

    /// Loss weights after the ablation is applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss.clone();
        match self.model.ablation {
            Some(Ablation::K1NoShaping) => w = w.without_shaping(),
            Some(Ablation::NoStage1Classif) => w.stage1_ce = 0.0,
            _ => {}
        }
        if self.model.architecture == Architecture::Dense {
            w = w.without_shaping();
            w.stage1_ce = 0.0;
        }
        w
    }
}
