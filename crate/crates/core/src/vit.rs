//! Minimal vision transformer: patch embedding, learned positions, a class token,
//! register tokens and pre-norm blocks whose self-attention accepts an additive mask.
//!
//! Sequences are laid out as `[patch_0 .. patch_{N-1}, class, register_0 .. register_{R-1}]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{concat_cols, concat_rows, is_masked, Bound, Graph, ParamId, ParamStore, Rng, Tensor, Var, MASKED};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: usize,
    pub n_registers: usize,
    pub n_classes: usize,
    pub n_parts: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            n_heads: 4,
            n_layers: 4,
            mlp_ratio: 4,
            n_registers: 2,
            n_classes: 4,
            n_parts: 4,
        }
    }
}

impl ModelConfig {
    /// ViT-B/16 at 224 pixels, used for cost estimates.
    pub fn vit_b() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            n_heads: 12,
            n_layers: 12,
            mlp_ratio: 4,
            n_registers: 0,
            n_classes: 1000,
            n_parts: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.patch_size > 0 && self.image_size > 0, "image and patch size must be positive"),
            (self.image_size % self.patch_size.max(1) == 0, "image_size must be divisible by patch_size"),
            (self.n_heads > 0 && self.embed_dim % self.n_heads == 0, "embed_dim must be divisible by n_heads"),
            (self.channels > 0, "channels must be positive"),
            (self.mlp_ratio > 0, "mlp_ratio must be positive"),
            (self.n_classes >= 2, "need at least two classes"),
            (self.n_parts >= 1, "need at least one foreground part"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::config(msg));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let side = self.image_size / self.patch_size;
        (side, side)
    }

    pub fn n_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// `N + 1 + R`.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1 + self.n_registers
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Additive `T×T` attention mask with entries in `{0, MASKED}`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    matrix: Tensor,
    live_rows: Vec<bool>,
}

impl AttentionMask {
    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        if matrix.ndim() != 2 || matrix.rows() != matrix.cols() {
            return Err(Error::ShapeMismatch {
                op: "AttentionMask",
                lhs: matrix.shape().to_vec(),
                rhs: vec![],
            });
        }
        let t = matrix.cols();
        let mut live_rows = Vec::with_capacity(t);
        for r in 0..t {
            let row = matrix.row(r);
            for &e in row {
                if e != 0.0 && !is_masked(e) {
                    return Err(Error::InvalidMask(e));
                }
            }
            live_rows.push(row.iter().any(|&e| e == 0.0));
        }
        Ok(Self { matrix, live_rows })
    }

    /// Mask with every entry zero.
    pub fn open(t: usize) -> Self {
        Self {
            matrix: Tensor::zeros(&[t, t]),
            live_rows: vec![true; t],
        }
    }

    /// Builds the mask from a key-visibility predicate `allowed(query, key)`.
    pub fn from_fn(t: usize, allowed: impl Fn(usize, usize) -> bool) -> Self {
        let m = Tensor::from_fn(&[t, t], |idx| {
            if allowed(idx / t, idx % t) {
                0.0
            } else {
                MASKED
            }
        });
        Self::from_matrix(m).expect("entries are 0 or MASKED")
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.live_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live_rows.is_empty()
    }

    pub fn is_live_row(&self, i: usize) -> bool {
        self.live_rows[i]
    }

    pub fn is_open(&self) -> bool {
        self.matrix.data().iter().all(|&e| e == 0.0)
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.matrix.at(query, key) == 0.0
    }
}

/// Embedded tokens of one image. `positions` are the original grid indices of the patch
/// rows, so compacted grids keep track of where their tokens came from.
#[derive(Clone, Debug)]
pub struct TokenGrid<'g> {
    pub patches: Var<'g>,
    pub class: Var<'g>,
    pub registers: Option<Var<'g>>,
    pub grid: (usize, usize),
    pub positions: Vec<usize>,
}

impl<'g> TokenGrid<'g> {
    pub fn n_patches(&self) -> usize {
        self.positions.len()
    }

    pub fn n_registers(&self) -> usize {
        self.registers.map_or(0, |r| r.value().rows())
    }

    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1 + self.n_registers()
    }

    /// `[patches; class; registers]`.
    pub fn sequence(&self) -> Result<Var<'g>> {
        let mut parts = vec![self.patches, self.class];
        if let Some(r) = self.registers {
            parts.push(r);
        }
        concat_rows(&parts)
    }
}

/// Cuts a `[C,H,W]` image into row-major `[N, C·p·p]` patch vectors.
pub fn patchify(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != cfg.channels {
        return Err(Error::arg(format!(
            "expected image [{}, H, W], got {shape:?}",
            cfg.channels
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::arg(format!(
            "image is {h}x{w}, model expects {0}x{0}",
            cfg.image_size
        )));
    }
    let p = cfg.patch_size;
    if h % p != 0 || w % p != 0 {
        return Err(Error::config("image size not divisible by patch size"));
    }
    let (gh, gw) = (h / p, w / p);
    let px = image.data();
    let mut out = Vec::with_capacity(gh * gw * cfg.patch_dim());
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..cfg.channels {
                for dy in 0..p {
                    let row = (c * h + gy * p + dy) * w + gx * p;
                    out.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    Tensor::new(&[gh * gw, cfg.patch_dim()], out)
}

#[derive(Clone, Debug)]
struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

/// Parameter handles of one transformer; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Vit {
    cfg: ModelConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    cls: ParamId,
    cls_pos: ParamId,
    reg: Option<(ParamId, ParamId)>,
    blocks: Vec<BlockParams>,
    norm_g: ParamId,
    norm_b: ParamId,
}

/// Linear layer init: `N(0, 1/fan_in)`.
fn linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> (ParamId, ParamId) {
    let w = store.normal(&format!("{name}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng);
    let b = store.zeros(&format!("{name}.b"), &[fan_out]);
    (w, b)
}

impl Vit {
    pub fn new(prefix: &str, cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let (patch_w, patch_b) = linear(store, &format!("{prefix}.patch"), cfg.patch_dim(), d, rng);
        let pos = store.normal(&format!("{prefix}.pos"), &[cfg.n_patches(), d], 0.02, rng);
        let cls = store.normal(&format!("{prefix}.cls"), &[1, d], 0.02, rng);
        let cls_pos = store.normal(&format!("{prefix}.cls_pos"), &[1, d], 0.02, rng);
        let reg = (cfg.n_registers > 0).then(|| {
            let r = store.normal(&format!("{prefix}.reg"), &[cfg.n_registers, d], 0.02, rng);
            let rp = store.normal(&format!("{prefix}.reg_pos"), &[cfg.n_registers, d], 0.02, rng);
            (r, rp)
        });
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("{prefix}.blocks.{l}");
            let ln1_g = store.ones(&format!("{p}.ln1.g"), &[d]);
            let ln1_b = store.zeros(&format!("{p}.ln1.b"), &[d]);
            let (qkv_w, qkv_b) = linear(store, &format!("{p}.qkv"), d, 3 * d, rng);
            let (proj_w, proj_b) = linear(store, &format!("{p}.proj"), d, d, rng);
            let ln2_g = store.ones(&format!("{p}.ln2.g"), &[d]);
            let ln2_b = store.zeros(&format!("{p}.ln2.b"), &[d]);
            let (fc1_w, fc1_b) = linear(store, &format!("{p}.fc1"), d, cfg.mlp_dim(), rng);
            let (fc2_w, fc2_b) = linear(store, &format!("{p}.fc2"), cfg.mlp_dim(), d, rng);
            blocks.push(BlockParams {
                ln1_g,
                ln1_b,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
                ln2_g,
                ln2_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }
        let norm_g = store.ones(&format!("{prefix}.norm.g"), &[d]);
        let norm_b = store.zeros(&format!("{prefix}.norm.b"), &[d]);
        Ok(Self {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            pos,
            cls,
            cls_pos,
            reg,
            blocks,
            norm_g,
            norm_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Handle of the patch projection weight `[patch_dim, d]`.
    pub fn patch_weight(&self) -> ParamId {
        self.patch_w
    }

    pub fn position_embedding(&self) -> ParamId {
        self.pos
    }

    /// Patch projection plus position embedding, and the class/register tokens with
    /// their own position embeddings.
    pub fn patchify_embed<'g>(&self, g: &'g Graph, p: &Bound<'g>, image: &Tensor) -> Result<TokenGrid<'g>> {
        let patches = g.constant(patchify(image, &self.cfg)?);
        let tokens = patches
            .matmul(p.var(self.patch_w))?
            .add_row(p.var(self.patch_b))?
            .add(p.var(self.pos))?;
        let class = p.var(self.cls).add(p.var(self.cls_pos))?;
        let registers = match self.reg {
            Some((r, rp)) => Some(p.var(r).add(p.var(rp))?),
            None => None,
        };
        Ok(TokenGrid {
            patches: tokens,
            class,
            registers,
            grid: self.cfg.grid(),
            positions: (0..self.cfg.n_patches()).collect(),
        })
    }

    /// Multi-head self-attention of one block over one sequence.
    pub fn masked_attention<'g>(
        &self,
        p: &Bound<'g>,
        layer: usize,
        tokens: Var<'g>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'g>> {
        let b = &self.blocks[layer];
        let qkv = tokens.matmul(p.var(b.qkv_w))?.add_row(p.var(b.qkv_b))?;
        let out = self.attend(qkv, mask)?;
        out.matmul(p.var(b.proj_w))?.add_row(p.var(b.proj_b))
    }

    /// Per-head masked softmax attention over a `[T, 3d]` packed QKV matrix.
    fn attend<'g>(&self, qkv: Var<'g>, mask: Option<&AttentionMask>) -> Result<Var<'g>> {
        let t = qkv.value().rows();
        if let Some(m) = mask {
            if m.len() != t {
                return Err(Error::ShapeMismatch {
                    op: "masked_attention",
                    lhs: vec![t, t],
                    rhs: m.matrix().shape().to_vec(),
                });
            }
        }
        let d = self.cfg.embed_dim;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let q = qkv.slice_cols(h * hd, hd)?;
            let k = qkv.slice_cols(d + h * hd, hd)?;
            let v = qkv.slice_cols(2 * d + h * hd, hd)?;
            let scores = q.matmul(k.t()?)?.scale(scale);
            let weights = match mask {
                Some(m) => scores.masked_softmax(m.matrix())?,
                None => scores.softmax(),
            };
            heads.push(weights.matmul(v)?);
        }
        concat_cols(&heads)
    }

    /// Runs every block over one or more independent sequences stacked row-wise
    /// (`segments[i]` rows each, one mask per segment), then the final norm.
    ///
    /// Rows of dead queries leave attention as exact zeros.
    pub fn encode_segments<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        x: Var<'g>,
        segments: &[usize],
        masks: &[Option<&AttentionMask>],
    ) -> Result<Var<'g>> {
        let total: usize = segments.iter().sum();
        if total != x.value().rows() || masks.len() != segments.len() {
            return Err(Error::arg("segment lengths do not cover the token matrix"));
        }
        // Rows to zero after attention, if any segment has dead queries.
        let mut live = Vec::with_capacity(total);
        for (&len, m) in segments.iter().zip(masks) {
            for i in 0..len {
                live.push(m.map_or(true, |m| m.is_live_row(i)));
            }
        }
        let row_gate = live
            .iter()
            .any(|l| !l)
            .then(|| g.constant(Tensor::vector(live.iter().map(|&l| f64::from(u8::from(l))).collect())));

        let mut x = x;
        for b in &self.blocks {
            let h = x.layer_norm(p.var(b.ln1_g), p.var(b.ln1_b), LN_EPS)?;
            let qkv = h.matmul(p.var(b.qkv_w))?.add_row(p.var(b.qkv_b))?;
            let attn = if segments.len() == 1 {
                self.attend(qkv, masks[0])?
            } else {
                let mut outs = Vec::with_capacity(segments.len());
                let mut offset = 0;
                for (&len, m) in segments.iter().zip(masks) {
                    outs.push(self.attend(qkv.slice_rows(offset, len)?, *m)?);
                    offset += len;
                }
                concat_rows(&outs)?
            };
            let mut attn = attn.matmul(p.var(b.proj_w))?.add_row(p.var(b.proj_b))?;
            if let Some(gate) = row_gate {
                attn = attn.mul_col(gate)?;
            }
            x = x.add(attn)?;
            let h = x.layer_norm(p.var(b.ln2_g), p.var(b.ln2_b), LN_EPS)?;
            let mlp = h
                .matmul(p.var(b.fc1_w))?
                .add_row(p.var(b.fc1_b))?
                .gelu()
                .matmul(p.var(b.fc2_w))?
                .add_row(p.var(b.fc2_b))?;
            x = x.add(mlp)?;
        }
        x.layer_norm(p.var(self.norm_g), p.var(self.norm_b), LN_EPS)
    }

    pub fn encode<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        x: Var<'g>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'g>> {
        let t = x.value().rows();
        self.encode_segments(g, p, x, &[t], &[mask])
    }

    /// Full forward over an embedded grid: returns the class embedding `[1,d]` and the
    /// patch features `[N,d]`. Features of dead patches are zero.
    pub fn forward_grid<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        grid: &TokenGrid<'g>,
        mask: Option<&AttentionMask>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let n = grid.n_patches();
        let out = self.encode(g, p, grid.sequence()?, mask)?;
        let class = out.slice_rows(n, 1)?;
        let mut patches = out.slice_rows(0, n)?;
        if let Some(m) = mask {
            if (0..n).any(|i| !m.is_live_row(i)) {
                let gate = Tensor::vector((0..n).map(|i| f64::from(u8::from(m.is_live_row(i)))).collect());
                patches = patches.mul_col(g.constant(gate))?;
            }
        }
        Ok((class, patches))
    }

    /// Embeds and encodes an image.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        image: &Tensor,
        mask: Option<&AttentionMask>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let grid = self.patchify_embed(g, p, image)?;
        self.forward_grid(g, p, &grid, mask)
    }
}
