//! The complete classifier: a stage-1 selector feeding a hard token mask to a stage-2
//! predictor, plus the ablated variants and the dense baseline.

use serde::{Deserialize, Serialize};

use crate::databench::{fg_miou, kp_regression, part_centroids, GroupedDataset, MetricsReport, Sample, Split};
use crate::error::{Error, Result};
use crate::interventions::{token_distances, token_removal, InterventionPlan, ThresholdTable};
use crate::numcore::{argmax_first, Bound, Graph, ParamStore, Rng, Tensor, Var};
use crate::predictor::{Predictor, SpecialTokenPolicy};
use crate::selector::{discretize, HardTokenMask, PartAssignment, Selector, SelectorOutput, TokenMask};
use crate::vit::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Selector and masked predictor.
    #[default]
    TwoStage,
    /// A single unmasked transformer.
    Dense,
}

/// Variants of the two-stage model with one component removed or altered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Predict from the stage-1 part-pooled features (late masking).
    NoSecondStage,
    /// Weight stage-2 patch tokens by the soft foreground probability instead of masking.
    SoftMasks,
    /// A single foreground part and no shaping losses.
    K1NoShaping,
    /// Drop the stage-1 classification loss.
    NoStage1Classif,
    /// Keep the stage-2 transformer at its initialization; only its head trains.
    FrozenStage2,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IfamConfig {
    pub model: ModelConfig,
    pub architecture: Architecture,
    pub ablation: Option<Ablation>,
    pub policy: SpecialTokenPolicy,
}

impl IfamConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.architecture == Architecture::Dense && self.ablation.is_some() {
            return Err(Error::config("ablations apply to the two-stage architecture only"));
        }
        if self.architecture == Architecture::TwoStage && self.model.n_parts == 0 {
            return Err(Error::config("n_parts must be at least 1"));
        }
        Ok(())
    }

    /// Model dimensions after the ablation is applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.ablation == Some(Ablation::K1NoShaping) {
            m.n_parts = 1;
        }
        m
    }
}

/// Everything one forward pass recorded.
pub struct ForwardPass<'g> {
    pub selector: Option<SelectorOutput<'g>>,
    /// Assignment after token removal.
    pub assignment: Option<PartAssignment<'g>>,
    pub mask: Option<HardTokenMask<'g>>,
    pub removed: Vec<usize>,
    pub stage1_logits: Option<Var<'g>>,
    pub stage2_logits: Option<Var<'g>>,
}

impl<'g> ForwardPass<'g> {
    /// The logits the model predicts with.
    pub fn logits(&self) -> Var<'g> {
        self.stage2_logits
            .or(self.stage1_logits)
            .expect("a forward pass produces logits")
    }
}

/// Result of classifying one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub predicted: usize,
    /// Hard part index per token before token removal (0 = background).
    pub parts: Option<Vec<usize>>,
    /// Tokens moved to background by token removal.
    pub removed_tokens: Vec<usize>,
    /// Tokens visible to stage 2.
    pub mask: Option<TokenMask>,
    /// Whether the empty-mask fallback fired.
    pub fallback: bool,
}

#[derive(Clone, Debug)]
pub struct IfamModel {
    config: IfamConfig,
    pub store: ParamStore,
    selector: Option<Selector>,
    predictor: Option<Predictor>,
}

impl IfamModel {
    pub fn new(config: IfamConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let cfg = config.effective_model();
        let mut store = ParamStore::new();
        let two_stage = config.architecture == Architecture::TwoStage;
        let selector = two_stage.then(|| Selector::new(&cfg, &mut store, rng)).transpose()?;
        let predictor = if config.ablation == Some(Ablation::NoSecondStage) {
            None
        } else {
            let mut p = Predictor::new("stage2", &cfg, &mut store, rng)?;
            p.policy = config.policy;
            Some(p)
        };
        Ok(Self {
            config,
            store,
            selector,
            predictor,
        })
    }

    /// Rebuilds a model from saved parameters; names and shapes must match the layout
    /// implied by `config` exactly.
    pub fn from_params(config: IfamConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, &mut Rng::new(0))?;
        if params.len() != model.store.len() {
            return Err(Error::config(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                params.len()
            )));
        }
        for (name, value) in params {
            if model.store.id(&name).is_none() {
                return Err(Error::config(format!("unexpected parameter '{name}'")));
            }
            model.store.set(&name, value)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &IfamConfig {
        &self.config
    }

    pub fn model_config(&self) -> ModelConfig {
        self.config.effective_model()
    }

    pub fn ablation(&self) -> Option<Ablation> {
        self.config.ablation
    }

    pub fn selector(&self) -> Option<&Selector> {
        self.selector.as_ref()
    }

    pub fn predictor(&self) -> Option<&Predictor> {
        self.predictor.as_ref()
    }

    /// Foreground parts; 0 for the dense baseline.
    pub fn n_parts(&self) -> usize {
        self.selector.as_ref().map_or(0, Selector::n_parts)
    }

    pub fn all_parts(&self) -> Vec<usize> {
        (1..=self.n_parts()).collect()
    }

    /// Whether a parameter receives gradients under the configured ablation.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.config.ablation == Some(Ablation::FrozenStage2) && name.starts_with("stage2.vit."))
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        self.store.bind(g, |n| self.is_trainable(n))
    }

    /// Runs the model. `kept` lists the foreground parts stage 2 may see; `table` enables
    /// token removal; `gumbel` adds assignment noise (training). Stage-1 logits are computed
    /// when the prediction needs them or `stage1` is set.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        image: &Tensor,
        kept: &[usize],
        table: Option<&ThresholdTable>,
        gumbel: Option<&mut Rng>,
        stage1: bool,
    ) -> Result<ForwardPass<'g>> {
        let Some(selector) = &self.selector else {
            let predictor = self.predictor.as_ref().expect("dense model has a predictor");
            return Ok(ForwardPass {
                selector: None,
                assignment: None,
                mask: None,
                removed: Vec::new(),
                stage1_logits: None,
                stage2_logits: Some(predictor.dense_forward(g, p, image)?),
            });
        };
        let out = selector.forward(g, p, image, gumbel)?;
        let mut assignment = out.assignment.clone();
        let mut removed = Vec::new();
        if let Some(table) = table {
            if table.n_parts() != selector.n_parts() {
                return Err(Error::arg(format!(
                    "threshold table has {} parts, model has {}",
                    table.n_parts(),
                    selector.n_parts()
                )));
            }
            let (hard, r) = token_removal(&assignment.hard, &assignment.cosine, table);
            assignment.hard = hard;
            removed = r;
        }
        let mask = discretize(&assignment, kept)?;
        let stage1_logits = if stage1 || self.predictor.is_none() {
            Some(selector.classify(g, p, &out, kept)?)
        } else {
            None
        };
        let stage2_logits = match &self.predictor {
            None => None,
            Some(pred) if self.config.ablation == Some(Ablation::SoftMasks) => Some(pred.soft_forward(g, p, image, mask.p_fg)?),
            Some(pred) => Some(pred.stage2_forward(g, p, image, &mask.mask, Some(mask.output))?),
        };
        Ok(ForwardPass {
            selector: Some(out),
            assignment: Some(assignment),
            mask: Some(mask),
            removed,
            stage1_logits,
            stage2_logits,
        })
    }

    fn check_plan(&self, plan: &InterventionPlan) -> Result<()> {
        if self.selector.is_none() {
            if !plan.is_empty() {
                return Err(Error::arg("the dense baseline has no parts to intervene on"));
            }
            return Ok(());
        }
        plan.validate(self.n_parts())
    }

    /// Classifies one image under an intervention plan. Deterministic.
    pub fn predict(&self, image: &Tensor, plan: &InterventionPlan) -> Result<Prediction> {
        self.check_plan(plan)?;
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let kept = plan.kept_parts(self.n_parts());
        let table = plan.table();
        let pass = self.forward(&g, &p, image, &kept, table.as_ref(), None, false)?;
        let logits = pass.logits().value().data().to_vec();
        let (predicted, _) = argmax_first(&logits);
        Ok(Prediction {
            predicted,
            logits,
            parts: pass.selector.as_ref().map(|s| s.assignment.hard.clone()),
            removed_tokens: pass.removed,
            mask: pass.mask.as_ref().map(|m| m.mask.clone()),
            fallback: pass.mask.as_ref().map_or(false, |m| m.fallback),
        })
    }

    /// Hard part map and token–prototype cosine `[N, K+1]` without noise or interventions.
    pub fn assign(&self, image: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        let selector = self
            .selector
            .as_ref()
            .ok_or_else(|| Error::arg("the dense baseline has no part assignment"))?;
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let out = selector.forward(&g, &p, image, None)?;
        Ok((out.assignment.hard, out.assignment.cosine))
    }

    /// Thresholds at percentile `q` of the distances of `samples`' tokens to their parts.
    pub fn calibrate(&self, samples: &[Sample], q: f64) -> Result<ThresholdTable> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset("calibration set is empty".into()));
        }
        let mut per_part = vec![Vec::new(); self.n_parts()];
        for s in samples {
            let (hard, cosine) = self.assign(&s.image)?;
            for (i, d) in token_distances(&cosine, &hard).into_iter().enumerate() {
                if hard[i] > 0 {
                    per_part[hard[i] - 1].push(d);
                }
            }
        }
        ThresholdTable::calibrate(&per_part, q)
    }

    pub fn predict_all(&self, samples: &[Sample], plan: &InterventionPlan) -> Result<Vec<Prediction>> {
        samples.iter().map(|s| self.predict(&s.image, plan)).collect()
    }

    /// Accuracy metrics on `samples`, plus foreground mIoU for two-stage models.
    pub fn evaluate(&self, samples: &[Sample], plan: &InterventionPlan, n_classes: usize, n_backgrounds: usize) -> Result<MetricsReport> {
        let preds = self.predict_all(samples, plan)?;
        let labels: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
        let mut report = MetricsReport::from_predictions(&labels, samples, n_classes, n_backgrounds)?;
        if self.selector.is_some() {
            let masks: Vec<TokenMask> = preds.iter().filter_map(|p| p.mask.clone()).collect();
            let truth: Vec<TokenMask> = samples.iter().map(|s| s.token_mask.clone()).collect();
            report.fg_miou = Some(fg_miou(&masks, &truth)?);
        }
        Ok(report)
    }

    pub fn evaluate_split(&self, data: &GroupedDataset, split: Split, plan: &InterventionPlan) -> Result<MetricsReport> {
        self.evaluate(data.split(split), plan, data.spec.n_classes, data.spec.n_backgrounds)
    }

    /// Reports on the three test splits, with the background gap set on the mixed-rand one.
    pub fn evaluate_tests(&self, data: &GroupedDataset, plan: &InterventionPlan) -> Result<TestReports> {
        let iid = self.evaluate_split(data, Split::TestIid, plan)?;
        let same = self.evaluate_split(data, Split::TestMixedSame, plan)?;
        let mut rand = self.evaluate_split(data, Split::TestMixedRand, plan)?;
        let gap = same.aa - rand.aa;
        rand.bg_gap = Some(gap);
        Ok(TestReports {
            iid,
            mixed_same: same,
            mixed_rand: rand,
            bg_gap: gap,
        })
    }

    /// Keypoint regression error from part centroids, fitted on `fit` and scored on `test`.
    pub fn kp_error(&self, fit: &[Sample], test: &[Sample]) -> Result<f64> {
        let cfg = self.model_config();
        let feats = |samples: &[Sample]| -> Result<Vec<Vec<f64>>> {
            samples
                .iter()
                .map(|s| Ok(part_centroids(&self.assign(&s.image)?.0, cfg.grid(), cfg.patch_size, self.n_parts())))
                .collect()
        };
        let targets = |samples: &[Sample]| samples.iter().map(Sample::keypoint_vector).collect::<Vec<_>>();
        let diagonal = (2.0f64).sqrt() * cfg.image_size as f64;
        kp_regression(&feats(fit)?, &targets(fit), &feats(test)?, &targets(test), diagonal)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReports {
    pub iid: MetricsReport,
    pub mixed_same: MetricsReport,
    pub mixed_rand: MetricsReport,
    pub bg_gap: f64,
}
