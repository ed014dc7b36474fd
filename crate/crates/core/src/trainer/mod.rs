//! Joint training of both stages.

mod config;
mod optim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use config::TrainConfig;
pub use optim::{clip_grad_norm, lr_scale, AdamW};

use crate::databench::{GroupedDataset, Sample};
use crate::error::{Error, Result};
use crate::interventions::InterventionPlan;
use crate::model::IfamModel;
use crate::numcore::{Graph, Rng, Tensor};
use crate::predictor::part_dropout;
use crate::selector::{shaping_losses, LossWeights};

/// Mean loss terms of one step, keyed by name.
pub type Losses = BTreeMap<String, f64>;

#[derive(Clone, Debug)]
pub struct StepStats {
    pub losses: Losses,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Whether a parameter belongs to the selector.
pub fn is_stage1_param(name: &str) -> bool {
    name.starts_with("stage1.") || name.starts_with("selector.")
}

/// Averages the losses over `batch` and returns them with the summed parameter gradients
/// (store order). `rng` drives part dropout and Gumbel noise.
pub fn loss_and_gradients(
    model: &IfamModel,
    batch: &[&Sample],
    cfg: &TrainConfig,
    weights: &LossWeights,
    rng: &mut Rng,
) -> Result<(Losses, Vec<Option<Tensor>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let grid = model.model_config().grid();
    let mut losses = Losses::new();
    let mut total: Vec<Option<Tensor>> = vec![None; model.store.len()];
    for sample in batch {
        let g = Graph::new();
        let p = model.bind(&g);
        let kept = part_dropout(&model.all_parts(), cfg.part_dropout, rng, true);
        let kept = if kept.is_empty() { model.all_parts() } else { kept };
        let noise = if cfg.gumbel { Some(&mut *rng) } else { None };
        let pass = model.forward(&g, &p, &sample.image, &kept, None, noise, weights.stage1_ce > 0.0)?;
        let mut terms = Vec::new();
        let mut record = |name: &str, v: f64| *losses.entry(name.to_string()).or_insert(0.0) += v * scale;
        if let Some(l) = pass.stage1_logits {
            let ce = l.cross_entropy(sample.label)?;
            record("stage1_ce", ce.item());
            if weights.stage1_ce > 0.0 {
                terms.push(ce.scale(weights.stage1_ce));
            }
        }
        if let Some(l) = pass.stage2_logits {
            let ce = l.cross_entropy(sample.label)?;
            record("stage2_ce", ce.item());
            if weights.stage2_ce > 0.0 {
                terms.push(ce.scale(weights.stage2_ce));
            }
        }
        if let Some(sel) = &pass.selector {
            let shaping = shaping_losses(&g, &sel.assignment, sel.prototypes, weights, grid)?;
            for (name, v) in shaping.named() {
                record(name, v);
            }
            terms.push(shaping.weighted);
        }
        let mut loss = terms.first().copied().ok_or_else(|| Error::config("every loss term is disabled"))?;
        for t in &terms[1..] {
            loss = loss.add(*t)?;
        }
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                detail: format!("loss {value} on sample {}", sample.id),
            });
        }
        record("total", value);
        let mut grads = g.backward(loss.scale(scale))?;
        for (acc, gr) in total.iter_mut().zip(p.gradients(&mut grads)) {
            match (acc.as_mut(), gr) {
                (Some(a), Some(gr)) => a.data_mut().iter_mut().zip(gr.data()).for_each(|(x, y)| *x += y),
                (None, Some(gr)) => *acc = Some(gr),
                _ => {}
            }
        }
    }
    Ok((losses, total))
}

/// Trainer state: the model and its optimizer.
pub struct Trainer {
    pub model: IfamModel,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    weights: LossWeights,
    base_lr: Vec<f64>,
    decay: Vec<bool>,
}

impl Trainer {
    pub fn new(model: IfamModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let weights = config.effective_weights();
        Self::with_weights(model, config, weights)
    }

    pub fn with_weights(model: IfamModel, config: TrainConfig, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        let optimizer = AdamW::new(&model.store, config.beta1, config.beta2, config.eps, config.weight_decay);
        let base_lr = model
            .store
            .iter()
            .map(|(name, _)| {
                if !model.is_trainable(name) {
                    0.0
                } else if is_stage1_param(name) {
                    config.lr_stage1
                } else {
                    config.lr_stage2
                }
            })
            .collect();
        let decay = model.store.iter().map(|(_, t)| t.ndim() >= 2).collect();
        Ok(Self {
            model,
            config,
            optimizer,
            weights,
            base_lr,
            decay,
        })
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    /// Loss, clipped gradient and one optimizer update at learning-rate multiplier `lr_mult`.
    pub fn step(&mut self, batch: &[&Sample], lr_mult: f64, rng: &mut Rng) -> Result<StepStats> {
        let (losses, mut grads) = loss_and_gradients(&self.model, batch, &self.config, &self.weights, rng)?;
        let grad_norm = clip_grad_norm(&mut grads, self.config.clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.optimizer.steps() as usize,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        let lr: Vec<f64> = self.base_lr.iter().map(|l| l * lr_mult).collect();
        self.optimizer.step(&mut self.model.store, &grads, &lr, &self.decay);
        Ok(StepStats { losses, grad_norm })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub aa: f64,
    pub wga: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fg_miou: Option<f64>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: Losses,
    pub val: ValMetrics,
    /// Learning-rate multiplier at the epoch's last step.
    pub lr: f64,
}

pub struct FitResult {
    /// The model with the best validation WGA (ties: higher AA, then earlier epoch).
    pub model: IfamModel,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochRecord>,
}

impl FitResult {
    /// The log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("log records serialize") + "\n")
            .collect()
    }
}

/// Trains a fresh model on the train split, selecting by validation WGA after each epoch.
pub fn fit(data: &GroupedDataset, config: &TrainConfig) -> Result<FitResult> {
    fit_with(data, config, |_| {})
}

/// As [`fit`], calling `on_epoch` after every epoch.
pub fn fit_with(data: &GroupedDataset, config: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<FitResult> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::EmptyDataset("training needs non-empty train and val splits".into()));
    }
    let root = Rng::new(config.seed);
    let model = IfamModel::new(config.model.clone(), &mut root.fork(1))?;
    let mut weights = config.effective_weights();
    if !data.spec.boundary_prior {
        weights.background_prior = 0.0;
    }
    let mut trainer = Trainer::with_weights(model, config.clone(), weights)?;
    let mut order_rng = root.fork(2);
    let mut noise_rng = root.fork(3);
    let n = data.train.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let mut step = 0;
    let mut best: Option<(f64, f64, usize, IfamModel)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order_rng.shuffle(&mut order);
        let mut sums = Losses::new();
        let mut mult = 1.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            mult = lr_scale(step, total_steps, config.cosine);
            let stats = trainer.step(&batch, mult, &mut noise_rng).map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
                e => e,
            })?;
            for (k, v) in stats.losses {
                *sums.entry(k).or_insert(0.0) += v * batch.len() as f64 / n as f64;
            }
            step += 1;
        }
        let report = trainer.model.evaluate(&data.val, &InterventionPlan::empty(), data.spec.n_classes, data.spec.n_backgrounds)?;
        let record = EpochRecord {
            epoch,
            losses: sums,
            val: ValMetrics {
                aa: report.aa,
                wga: report.wga,
                fg_miou: report.fg_miou,
            },
            lr: mult,
        };
        log::info!("epoch {epoch}: val aa {:.3} wga {:.3}", report.aa, report.wga);
        on_epoch(&record);
        log.push(record);
        let better = best
            .as_ref()
            .map_or(true, |(w, a, _, _)| (report.wga, report.aa) > (*w, *a));
        if better {
            best = Some((report.wga, report.aa, epoch, trainer.model.clone()));
        }
    }
    Ok(match best {
        Some((_, _, epoch, model)) => FitResult {
            model,
            best_epoch: Some(epoch),
            log,
        },
        None => FitResult {
            model: trainer.model,
            best_epoch: None,
            log,
        },
    })
}
