//! Stage 2: classifies an image through a transformer whose attention can only reach the
//! patch tokens selected by stage 1.
//!
//! Three execution paths produce the same logits for a given mask: the masked full
//! sequence, the compacted sequence of live tokens only, and a right-padded batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{concat_rows, Bound, Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::selector::TokenMask;
use crate::vit::{AttentionMask, ModelConfig, TokenGrid, Vit};

/// Which token kinds one query row may attend to. Masked-out patches are never keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeySet {
    pub live_patches: bool,
    pub class: bool,
    pub registers: bool,
}

impl KeySet {
    pub const ALL: KeySet = KeySet {
        live_patches: true,
        class: true,
        registers: true,
    };
}

/// Key visibility for class, register and live patch queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecialTokenPolicy {
    pub class: KeySet,
    pub registers: KeySet,
    pub patches: KeySet,
}

impl Default for SpecialTokenPolicy {
    fn default() -> Self {
        Self {
            class: KeySet::ALL,
            registers: KeySet::ALL,
            patches: KeySet::ALL,
        }
    }
}

/// Builds the `T×T` additive mask for `[patches; class; registers]`.
///
/// Patch-to-patch entries are open iff both tokens are live. Rows of masked patches are
/// entirely masked. Class and register queries see live patches, the class token and the
/// registers as the policy allows; every live query always sees itself.
pub fn build_attention_mask(s: &TokenMask, policy: &SpecialTokenPolicy, n_registers: usize) -> AttentionMask {
    let n = s.len();
    let t = n + 1 + n_registers;
    let cls = n;
    AttentionMask::from_fn(t, |q, k| {
        if q < n && !s.0[q] {
            return false;
        }
        if q == k {
            return true;
        }
        let keys = if q < n {
            policy.patches
        } else if q == cls {
            policy.class
        } else {
            policy.registers
        };
        if k < n {
            keys.live_patches && s.0[k]
        } else if k == cls {
            keys.class
        } else {
            keys.registers
        }
    })
}

/// Keeps only live patch tokens, in grid order, with their position embeddings.
pub fn compact_tokens<'g>(grid: &TokenGrid<'g>, s: &TokenMask) -> Result<TokenGrid<'g>> {
    if s.len() != grid.n_patches() {
        return Err(Error::arg(format!(
            "mask has {} entries, grid has {} patches",
            s.len(),
            grid.n_patches()
        )));
    }
    let live = s.live_indices();
    Ok(TokenGrid {
        patches: grid.patches.select_rows(&live)?,
        class: grid.class,
        registers: grid.registers,
        grid: grid.grid,
        positions: live.iter().map(|&i| grid.positions[i]).collect(),
    })
}

/// Compacted grids right-padded with zero tokens to the longest live count.
#[derive(Clone, Debug)]
pub struct PaddedBatch<'g> {
    /// `B` stacked sequences `[K_max patches; class; registers]`.
    pub tokens: Var<'g>,
    /// Per image, which of the `K_max` patch slots hold a real token.
    pub valid: Vec<TokenMask>,
    pub k_max: usize,
    pub n_registers: usize,
}

impl PaddedBatch<'_> {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.k_max + 1 + self.n_registers
    }
}

pub fn pad_batch<'g>(g: &'g Graph, grids: &[TokenGrid<'g>]) -> Result<PaddedBatch<'g>> {
    let first = grids.first().ok_or_else(|| Error::arg("cannot pad an empty batch"))?;
    let d = first.patches.value().cols();
    let n_registers = first.n_registers();
    let k_max = grids.iter().map(TokenGrid::n_patches).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(grids.len() * 3);
    let mut valid = Vec::with_capacity(grids.len());
    for grid in grids {
        let k = grid.n_patches();
        if grid.n_registers() != n_registers {
            return Err(Error::arg("register count differs within batch"));
        }
        if k > 0 {
            rows.push(grid.patches);
        }
        if k < k_max {
            rows.push(g.constant(Tensor::zeros(&[k_max - k, d])));
        }
        rows.push(grid.class);
        if let Some(r) = grid.registers {
            rows.push(r);
        }
        let mut v = vec![false; k_max];
        v[..k].iter_mut().for_each(|x| *x = true);
        valid.push(TokenMask(v));
    }
    Ok(PaddedBatch {
        tokens: concat_rows(&rows)?,
        valid,
        k_max,
        n_registers,
    })
}

/// Drops each part independently with probability `rate` during training, restoring one
/// uniformly chosen part if all were dropped. Identity at evaluation.
pub fn part_dropout(kept: &[usize], rate: f64, rng: &mut Rng, training: bool) -> Vec<usize> {
    if !training || rate <= 0.0 || kept.is_empty() {
        return kept.to_vec();
    }
    let survivors: Vec<usize> = kept.iter().copied().filter(|_| !rng.bernoulli(rate)).collect();
    if survivors.is_empty() {
        vec![kept[rng.below(kept.len())]]
    } else {
        survivors
    }
}

/// Stage-2 transformer and classification head.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub vit: Vit,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub policy: SpecialTokenPolicy,
}

impl Predictor {
    pub fn new(prefix: &str, cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let vit = Vit::new(&format!("{prefix}.vit"), cfg, store, rng)?;
        let d = cfg.embed_dim;
        let head_w = store.normal(&format!("{prefix}.head.w"), &[d, cfg.n_classes], (1.0 / d as f64).sqrt(), rng);
        let head_b = store.zeros(&format!("{prefix}.head.b"), &[cfg.n_classes]);
        Ok(Self {
            vit,
            head_w,
            head_b,
            policy: SpecialTokenPolicy::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.vit.config()
    }

    pub fn attention_mask(&self, s: &TokenMask) -> AttentionMask {
        build_attention_mask(s, &self.policy, self.config().n_registers)
    }

    fn head<'g>(&self, p: &Bound<'g>, class: Var<'g>) -> Result<Var<'g>> {
        let c = self.config().n_classes;
        class.matmul(p.var(self.head_w))?.add_row(p.var(self.head_b))?.reshape(&[c])
    }

    /// Masked forward. `scale`, when given, multiplies each patch token before encoding;
    /// it carries the straight-through mask so stage-2 gradients reach stage 1.
    pub fn stage2_forward<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        image: &Tensor,
        s: &TokenMask,
        scale: Option<Var<'g>>,
    ) -> Result<Var<'g>> {
        let mut grid = self.vit.patchify_embed(g, p, image)?;
        if s.len() != grid.n_patches() {
            return Err(Error::arg(format!("mask has {} entries, expected {}", s.len(), grid.n_patches())));
        }
        if let Some(scale) = scale {
            grid.patches = grid.patches.mul_col(scale)?;
        }
        let mask = self.attention_mask(s);
        let (class, _) = self.vit.forward_grid(g, p, &grid, Some(&mask))?;
        self.head(p, class)
    }

    /// Unmasked forward over the full image.
    pub fn dense_forward<'g>(&self, g: &'g Graph, p: &Bound<'g>, image: &Tensor) -> Result<Var<'g>> {
        let (class, _) = self.vit.forward(g, p, image, None)?;
        self.head(p, class)
    }

    /// Patch tokens weighted by a soft foreground probability, no attention mask.
    pub fn soft_forward<'g>(&self, g: &'g Graph, p: &Bound<'g>, image: &Tensor, weights: Var<'g>) -> Result<Var<'g>> {
        let mut grid = self.vit.patchify_embed(g, p, image)?;
        grid.patches = grid.patches.mul_col(weights)?;
        let (class, _) = self.vit.forward_grid(g, p, &grid, None)?;
        self.head(p, class)
    }

    /// Unmasked forward over the live tokens only.
    pub fn compacted_forward<'g>(&self, g: &'g Graph, p: &Bound<'g>, image: &Tensor, s: &TokenMask) -> Result<Var<'g>> {
        let grid = self.vit.patchify_embed(g, p, image)?;
        let compact = compact_tokens(&grid, s)?;
        let (class, _) = self.vit.forward_grid(g, p, &compact, None)?;
        self.head(p, class)
    }

    /// Forward over a padded batch; padding slots are dead in every attention mask.
    pub fn padded_forward<'g>(&self, g: &'g Graph, p: &Bound<'g>, batch: &PaddedBatch<'g>) -> Result<Vec<Var<'g>>> {
        let t = batch.seq_len();
        let masks: Vec<AttentionMask> = batch
            .valid
            .iter()
            .map(|v| build_attention_mask(v, &self.policy, batch.n_registers))
            .collect();
        let refs: Vec<Option<&AttentionMask>> = masks.iter().map(Some).collect();
        let segments = vec![t; batch.len()];
        let out = self.vit.encode_segments(g, p, batch.tokens, &segments, &refs)?;
        (0..batch.len())
            .map(|b| self.head(p, out.slice_rows(b * t + batch.k_max, 1)?))
            .collect()
    }

    /// Embeds and compacts each image, pads the batch and runs it.
    pub fn batch_forward<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        images: &[&Tensor],
        masks: &[TokenMask],
    ) -> Result<Vec<Var<'g>>> {
        if images.len() != masks.len() {
            return Err(Error::arg("one mask per image required"));
        }
        let grids = images
            .iter()
            .zip(masks)
            .map(|(img, s)| compact_tokens(&self.vit.patchify_embed(g, p, img)?, s))
            .collect::<Result<Vec<_>>>()?;
        let batch = pad_batch(g, &grids)?;
        self.padded_forward(g, p, &batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::is_masked;

    #[test]
    fn eq3_patch_block() {
        let m = build_attention_mask(&TokenMask(vec![true, false, true]), &SpecialTokenPolicy::default(), 0);
        assert!(!m.allows(0, 1));
        for j in 0..3 {
            assert!(!m.allows(1, j));
        }
        assert!(m.allows(0, 2));
        assert!(m.allows(2, 0));
        assert!(is_masked(m.matrix().at(0, 1)));
    }

    #[test]
    fn all_live_is_open() {
        let m = build_attention_mask(&TokenMask::all(5), &SpecialTokenPolicy::default(), 2);
        assert!(m.is_open());
    }

    #[test]
    fn register_row_skips_masked_patch() {
        let m = build_attention_mask(&TokenMask(vec![true, true, false]), &SpecialTokenPolicy::default(), 1);
        let reg = 4;
        assert!(!m.allows(reg, 2));
        assert!(m.allows(reg, 0) && m.allows(reg, 1));
        assert!(m.allows(reg, 3));
    }

    #[test]
    fn exhaustive_row_and_column_structure() {
        for n in 1..=6usize {
            for bits in 0..(1u32 << n) {
                let s = TokenMask((0..n).map(|i| bits >> i & 1 == 1).collect());
                let m = build_attention_mask(&s, &SpecialTokenPolicy::default(), 1);
                let t = n + 2;
                for i in 0..n {
                    let row_dead = (0..t).all(|k| !m.allows(i, k));
                    let col_dead = (0..t).all(|q| !m.allows(q, i));
                    assert_eq!(row_dead, !s.0[i]);
                    assert_eq!(col_dead, !s.0[i]);
                }
                for q in 0..t {
                    if m.is_live_row(q) {
                        assert!(m.allows(q, q));
                    }
                }
                assert_eq!(m, build_attention_mask(&s, &SpecialTokenPolicy::default(), 1));
            }
        }
    }

    #[test]
    fn dropout_rates() {
        let mut rng = Rng::new(0);
        let all = vec![1, 2, 3, 4];
        assert_eq!(part_dropout(&all, 0.0, &mut rng, true), all);
        assert_eq!(part_dropout(&all, 0.9, &mut rng, false), all);
        for _ in 0..100 {
            assert_eq!(part_dropout(&all, 1.0, &mut rng, true).len(), 1);
        }
    }

    #[test]
    fn dropout_keep_frequency() {
        let mut rng = Rng::new(7);
        let all = vec![1, 2, 3, 4];
        let mut counts = [0usize; 5];
        let trials = 10_000;
        for _ in 0..trials {
            for p in part_dropout(&all, 0.3, &mut rng, true) {
                counts[p] += 1;
            }
        }
        // keep rate 0.7 plus the restoration mass 0.3^4/4
        for c in &counts[1..] {
            let f = *c as f64 / trials as f64;
            assert!((f - 0.70).abs() < 0.02, "{f}");
        }
    }

    #[test]
    fn compaction_keeps_order() {
        let g = Graph::new();
        let grid = TokenGrid {
            patches: g.constant(Tensor::from_fn(&[4, 2], |i| i as f64)),
            class: g.constant(Tensor::zeros(&[1, 2])),
            registers: None,
            grid: (2, 2),
            positions: vec![0, 1, 2, 3],
        };
        let c = compact_tokens(&grid, &TokenMask(vec![false, true, false, true])).unwrap();
        assert_eq!(c.positions, vec![1, 3]);
        assert_eq!(c.patches.value().data(), &[2.0, 3.0, 6.0, 7.0]);
        let same = compact_tokens(&grid, &TokenMask::all(4)).unwrap();
        assert_eq!(*same.patches.value(), *grid.patches.value());
    }

    #[test]
    fn padding_length() {
        let g = Graph::new();
        let mk = |k: usize| TokenGrid {
            patches: g.constant(Tensor::zeros(&[k, 2])),
            class: g.constant(Tensor::zeros(&[1, 2])),
            registers: None,
            grid: (8, 8),
            positions: (0..k).collect(),
        };
        let b = pad_batch(&g, &[mk(10), mk(60)]).unwrap();
        assert_eq!(b.k_max, 60);
        assert_eq!(b.valid[0].live_count(), 10);
        assert_eq!(b.tokens.value().rows(), 2 * 61);
        let b = pad_batch(&g, &[mk(7), mk(7)]).unwrap();
        assert_eq!(b.tokens.value().rows(), 2 * 8);
        assert!(pad_batch(&g, &[]).is_err());
    }
}
