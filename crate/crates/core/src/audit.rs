//! Receptive-field audits: perturb the pixels stage 2 must not see and measure how far the
//! logits move.

use crate::databench::Sample;
use crate::error::{Error, Result};
use crate::model::{Ablation, IfamModel};
use crate::numcore::{Graph, Rng, Tensor};
use crate::selector::TokenMask;

/// Copy of `image` (`[C, H, W]`) with Gaussian noise of deviation `std` added to every pixel
/// of every patch that `s` masks out.
pub fn perturb_masked_patches(image: &Tensor, s: &TokenMask, patch_size: usize, std: f64, rng: &mut Rng) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || patch_size == 0 || shape[1] % patch_size != 0 || shape[2] % patch_size != 0 {
        return Err(Error::arg(format!("cannot tile image {shape:?} with patch {patch_size}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let gw = w / patch_size;
    if s.len() != (h / patch_size) * gw {
        return Err(Error::arg(format!("mask has {} entries for a {}x{gw} grid", s.len(), h / patch_size)));
    }
    let mut out = image.clone();
    let data = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if !s.0[(y / patch_size) * gw + x / patch_size] {
                    data[(ch * h + y) * w + x] += std * rng.normal();
                }
            }
        }
    }
    Ok(out)
}

/// `max_i |a_i − b_i| / max_i |a_i|`.
pub fn relative_change(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().map(|x| x.abs()).fold(f64::MIN_POSITIVE, f64::max);
    diff / scale
}

/// Stage-2 logits with the mask `s` imposed instead of the selector's.
pub fn stage2_logits(model: &IfamModel, image: &Tensor, s: &TokenMask) -> Result<Vec<f64>> {
    let predictor = model
        .predictor()
        .ok_or_else(|| Error::arg("model has no stage-2 predictor"))?;
    let g = Graph::new();
    let p = model.store.bind_frozen(&g);
    let logits = predictor.stage2_forward(&g, &p, image, s, None)?;
    Ok(logits.value().data().to_vec())
}

/// Hard mask and soft foreground weights the selector produces for `image` with all parts kept.
fn selector_masks(model: &IfamModel, image: &Tensor) -> Result<(TokenMask, Tensor)> {
    let g = Graph::new();
    let p = model.store.bind_frozen(&g);
    let pass = model.forward(&g, &p, image, &model.all_parts(), None, None, false)?;
    let mask = pass.mask.ok_or_else(|| Error::arg("model has no selector"))?;
    let weights = (*mask.p_fg.value()).clone();
    Ok((mask.mask, weights))
}

/// Stage-2 logits of the soft-mask variant with fixed foreground weights.
fn soft_logits(model: &IfamModel, image: &Tensor, weights: &Tensor) -> Result<Vec<f64>> {
    let predictor = model
        .predictor()
        .ok_or_else(|| Error::arg("model has no stage-2 predictor"))?;
    let g = Graph::new();
    let p = model.store.bind_frozen(&g);
    let logits = predictor.soft_forward(&g, &p, image, g.constant(weights.clone()))?;
    Ok(logits.value().data().to_vec())
}

/// One perturbation trial.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub sample: usize,
    pub live_tokens: usize,
    pub change: f64,
}

/// Random perturbation trials on `samples`.
///
/// For hard-mask models each trial draws a random non-empty token mask, perturbs the
/// masked-out patches and compares stage-2 logits. The soft-mask variant has no hard mask
/// of its own, so its trials keep the selector's foreground weights fixed and perturb the
/// patches its hard mask would exclude.
pub fn faithfulness_trials(model: &IfamModel, samples: &[Sample], trials: usize, std: f64, rng: &mut Rng) -> Result<Vec<Trial>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples to audit".into()));
    }
    let cfg = model.model_config();
    let n = cfg.n_patches();
    let soft = model.ablation() == Some(Ablation::SoftMasks);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let idx = rng.below(samples.len());
        let image = &samples[idx].image;
        let (s, before, after) = if soft {
            let (s, weights) = selector_masks(model, image)?;
            let noisy = perturb_masked_patches(image, &s, cfg.patch_size, std, rng)?;
            let before = soft_logits(model, image, &weights)?;
            let after = soft_logits(model, &noisy, &weights)?;
            (s, before, after)
        } else {
            let mut s = TokenMask((0..n).map(|_| rng.bernoulli(0.5)).collect());
            if s.live_count() == 0 {
                s.0[rng.below(n)] = true;
            }
            let noisy = perturb_masked_patches(image, &s, cfg.patch_size, std, rng)?;
            (s.clone(), stage2_logits(model, image, &s)?, stage2_logits(model, &noisy, &s)?)
        };
        out.push(Trial {
            sample: idx,
            live_tokens: s.live_count(),
            change: relative_change(&before, &after),
        });
    }
    Ok(out)
}

/// Largest relative logit change over every non-empty mask on a grid of at most 16 tokens.
pub fn exhaustive_faithfulness(model: &IfamModel, image: &Tensor, std: f64, rng: &mut Rng) -> Result<f64> {
    let cfg = model.model_config();
    let n = cfg.n_patches();
    if n > 16 {
        return Err(Error::arg(format!("{n} tokens is too many to enumerate")));
    }
    let mut worst: f64 = 0.0;
    for bits in 1u32..(1 << n) {
        let s = TokenMask((0..n).map(|i| bits >> i & 1 == 1).collect());
        let noisy = perturb_masked_patches(image, &s, cfg.patch_size, std, rng)?;
        worst = worst.max(relative_change(&stage2_logits(model, image, &s)?, &stage2_logits(model, &noisy, &s)?));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturbs_only_masked_patches() {
        let img = Tensor::zeros(&[2, 4, 4]);
        let s = TokenMask(vec![true, false, false, true]);
        let out = perturb_masked_patches(&img, &s, 2, 1.0, &mut Rng::new(1)).unwrap();
        for ch in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let v = out.data()[(ch * 4 + y) * 4 + x];
                    let live = s.0[(y / 2) * 2 + x / 2];
                    assert_eq!(v == 0.0, live, "({ch},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn relative_change_scale() {
        assert_eq!(relative_change(&[2.0, -4.0], &[2.0, -4.0]), 0.0);
        assert_eq!(relative_change(&[2.0, -4.0], &[3.0, -4.0]), 0.25);
    }
}
