//! Stage 1: assigns patch tokens to `K` shared foreground parts plus background through
//! learned prototypes, shapes those parts with spatial priors, classifies from pooled part
//! features, and merges the kept parts into a binary token mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{argmax_first, gumbel_sample, Bound, Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::vit::{ModelConfig, Vit};

/// Initial assignment temperature.
pub const INITIAL_TEMPERATURE: f64 = 0.1;
/// Temperature of the Gumbel perturbation during training.
pub const GUMBEL_TEMPERATURE: f64 = 1.0;

/// Binary token mask `s ∈ {0,1}^N`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenMask(pub Vec<bool>);

impl TokenMask {
    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn live_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn live_indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn as_f64(&self) -> Tensor {
        Tensor::vector(self.0.iter().map(|&b| f64::from(u8::from(b))).collect())
    }
}

/// Soft assignment `A: [K+1, N]` (row 0 is background) and its column-wise argmax.
#[derive(Clone, Debug)]
pub struct PartAssignment<'g> {
    pub soft: Var<'g>,
    /// Part index per token; ties go to the lowest index.
    pub hard: Vec<usize>,
    /// Cosine similarity `[N, K+1]` between token features and prototypes.
    pub cosine: Tensor,
    pub gumbel: bool,
    pub temperature: f64,
}

impl PartAssignment<'_> {
    pub fn n_parts(&self) -> usize {
        self.soft.value().rows() - 1
    }

    pub fn n_tokens(&self) -> usize {
        self.hard.len()
    }

    pub fn soft_values(&self) -> Tensor {
        (*self.soft.value()).clone()
    }
}

/// Column-wise argmax of `[K+1, N]`, lowest index on ties.
pub fn hard_map(soft: &Tensor) -> Vec<usize> {
    let (rows, n) = (soft.rows(), soft.cols());
    (0..n)
        .map(|i| {
            let col: Vec<f64> = (0..rows).map(|k| soft.at(k, i)).collect();
            argmax_first(&col).0
        })
        .collect()
}

/// Assigns each token to a part: `softmax_k(cos(f_i, p_k) / τ [+ gumbel])`.
pub fn assign_parts<'g>(
    features: Var<'g>,
    prototypes: Var<'g>,
    temperature: Var<'g>,
    gumbel: Option<&mut Rng>,
) -> Result<PartAssignment<'g>> {
    let tau = temperature.item();
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::arg(format!("temperature must be positive, got {tau}")));
    }
    let f = features.l2_normalize_rows()?;
    let p = prototypes.l2_normalize_rows()?;
    let cosine = f.matmul(p.t()?)?;
    let mut logits = cosine.div_scalar(temperature)?;
    let use_gumbel = gumbel.is_some();
    if let Some(rng) = gumbel {
        let noise = gumbel_sample(&logits.shape(), rng);
        logits = logits.add_const(&noise)?.scale(1.0 / GUMBEL_TEMPERATURE);
    }
    let soft = logits.softmax().t()?;
    let hard = hard_map(&soft.value());
    Ok(PartAssignment {
        soft,
        hard,
        cosine: (*cosine.value()).clone(),
        gumbel: use_gumbel,
        temperature: tau,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub total_variation: f64,
    pub presence: f64,
    pub concentration: f64,
    pub orthogonality: f64,
    pub entropy: f64,
    /// Weight of the boundary-background prior; zero disables it.
    pub background_prior: f64,
    pub stage1_ce: f64,
    pub stage2_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            total_variation: 1.0,
            presence: 1.0,
            concentration: 1.0,
            orthogonality: 1.0,
            entropy: 1.0,
            background_prior: 1.0,
            stage1_ce: 1.0,
            stage2_ce: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.total_variation,
            self.presence,
            self.concentration,
            self.orthogonality,
            self.entropy,
            self.background_prior,
            self.stage1_ce,
            self.stage2_ce,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Shaping terms disabled, classification terms kept.
    pub fn without_shaping(&self) -> Self {
        Self {
            total_variation: 0.0,
            presence: 0.0,
            concentration: 0.0,
            orthogonality: 0.0,
            entropy: 0.0,
            background_prior: 0.0,
            ..self.clone()
        }
    }
}

/// Part-shaping terms, each non-negative.
#[derive(Clone, Debug)]
pub struct ShapingLosses<'g> {
    pub total_variation: Var<'g>,
    pub presence: Var<'g>,
    pub concentration: Var<'g>,
    pub orthogonality: Var<'g>,
    pub entropy: Var<'g>,
    pub background_prior: Var<'g>,
    /// `max(0, 1 − max_i A[k,i])` for each foreground part.
    pub presence_per_part: Var<'g>,
    /// Normalized spatial variance of each foreground part.
    pub concentration_per_part: Var<'g>,
    /// Weighted sum; terms with zero weight are not part of its graph.
    pub weighted: Var<'g>,
}

impl ShapingLosses<'_> {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("total_variation", self.total_variation.item()),
            ("presence", self.presence.item()),
            ("concentration", self.concentration.item()),
            ("orthogonality", self.orthogonality.item()),
            ("entropy", self.entropy.item()),
            ("background_prior", self.background_prior.item()),
        ]
    }
}

/// Token indices on the outermost ring of an `h×w` grid, row-major.
pub fn boundary_tokens(grid: (usize, usize)) -> Vec<usize> {
    let (h, w) = grid;
    (0..h * w)
        .filter(|&i| {
            let (r, c) = (i / w, i % w);
            r == 0 || c == 0 || r + 1 == h || c + 1 == w
        })
        .collect()
}

/// 4-neighbour pairs `(i, j)` with `i < j`.
pub fn neighbour_pairs(grid: (usize, usize)) -> Vec<(usize, usize)> {
    let (h, w) = grid;
    let mut pairs = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                pairs.push((i, i + 1));
            }
            if r + 1 < h {
                pairs.push((i, i + w));
            }
        }
    }
    pairs
}

/// Part-shaping priors over an assignment:
///
/// - total variation: mean `|A[k,i] − A[k,j]|` over parts and 4-neighbour pairs
/// - presence: mean over foreground parts of `max(0, 1 − max_i A[k,i])`
/// - concentration: mean over foreground parts of the `A`-weighted spatial variance of token
///   coordinates, divided by the squared grid diagonal
/// - orthogonality: mean squared off-diagonal cosine between prototypes
/// - entropy: mean per-token entropy of the part distribution
/// - background prior: `1 − mean A[0,i]` over the outer token ring
pub fn shaping_losses<'g>(
    g: &'g Graph,
    a: &PartAssignment<'g>,
    prototypes: Var<'g>,
    weights: &LossWeights,
    grid: (usize, usize),
) -> Result<ShapingLosses<'g>> {
    let soft = a.soft;
    let (kp1, n) = (soft.value().rows(), soft.value().cols());
    if grid.0 * grid.1 != n {
        return Err(Error::arg(format!("grid {grid:?} does not match {n} tokens")));
    }
    let k = kp1 - 1;

    let pairs = neighbour_pairs(grid);
    let total_variation = if pairs.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let mut diff = Tensor::zeros(&[n, pairs.len()]);
        for (col, &(i, j)) in pairs.iter().enumerate() {
            diff.data_mut()[i * pairs.len() + col] = 1.0;
            diff.data_mut()[j * pairs.len() + col] = -1.0;
        }
        soft.matmul(g.constant(diff))?.abs().mean()
    };

    let fg_rows: Vec<usize> = (1..=k).collect();
    let fg = soft.select_rows(&fg_rows)?;
    let presence_per_part = fg.max_cols().affine(-1.0, 1.0).relu();
    let presence = presence_per_part.mean();

    let (h, w) = grid;
    let coords = Tensor::from_fn(&[n, 2], |idx| {
        let (i, axis) = (idx / 2, idx % 2);
        if axis == 0 {
            (i / w) as f64
        } else {
            (i % w) as f64
        }
    });
    let sq = Tensor::from_fn(&[n, 1], |i| {
        let (r, c) = ((i / w) as f64, (i % w) as f64);
        r * r + c * c
    });
    let mass = fg.sum_cols();
    let weights_k = fg.div_col(mass)?;
    let mean = weights_k.matmul(g.constant(coords))?;
    let second = weights_k.matmul(g.constant(sq))?.reshape(&[k])?;
    let diag_sq = (h * h + w * w) as f64;
    let concentration_per_part = second
        .sub(mean.square().sum_cols())?
        .relu()
        .scale(1.0 / diag_sq);
    let concentration = concentration_per_part.mean();

    let pn = prototypes.l2_normalize_rows()?;
    let gram = pn.matmul(pn.t()?)?;
    let off = Tensor::from_fn(&[kp1, kp1], |idx| if idx / kp1 == idx % kp1 { 0.0 } else { 1.0 });
    let orthogonality = gram
        .square()
        .mul_const(&off)?
        .sum()
        .scale(1.0 / (kp1 * (kp1 - 1)).max(1) as f64);

    let entropy = soft.xlogx().sum().scale(-1.0 / n as f64);

    let ring = boundary_tokens(grid);
    let mut ring_avg = Tensor::zeros(&[n, 1]);
    for &i in &ring {
        ring_avg.data_mut()[i] = 1.0 / ring.len() as f64;
    }
    let background_prior = soft
        .slice_rows(0, 1)?
        .matmul(g.constant(ring_avg))?
        .reshape(&[])?
        .affine(-1.0, 1.0);

    let terms = [
        (weights.total_variation, total_variation),
        (weights.presence, presence),
        (weights.concentration, concentration),
        (weights.orthogonality, orthogonality),
        (weights.entropy, entropy),
        (weights.background_prior, background_prior),
    ];
    let mut weighted = g.constant(Tensor::scalar(0.0));
    for (wt, term) in terms {
        if wt != 0.0 {
            weighted = weighted.add(term.reshape(&[])?.scale(wt))?;
        }
    }

    Ok(ShapingLosses {
        total_variation: total_variation.reshape(&[])?,
        presence,
        concentration,
        orthogonality,
        entropy,
        background_prior,
        presence_per_part,
        concentration_per_part,
        weighted,
    })
}

/// Binary mask with its straight-through surrogate.
#[derive(Clone, Debug)]
pub struct HardTokenMask<'g> {
    pub mask: TokenMask,
    /// Foreground probability `Σ_{k∈kept} A[k,i]`.
    pub p_fg: Var<'g>,
    /// Forward value `s`, backward as if it were `p_fg`.
    pub output: Var<'g>,
    pub kept: Vec<usize>,
    pub fallback: bool,
}

pub(crate) fn validate_kept(kept: &[usize], k: usize) -> Result<()> {
    if kept.is_empty() {
        return Err(Error::arg("kept parts must be non-empty"));
    }
    if let Some(bad) = kept.iter().find(|&&p| p == 0 || p > k) {
        return Err(Error::arg(format!("part {bad} is not a foreground part in 1..={k}")));
    }
    Ok(())
}

/// `s_i = 1` iff the hard part of token `i` is kept.
pub fn merge_parts(hard: &[usize], kept: &[usize]) -> TokenMask {
    TokenMask(hard.iter().map(|h| kept.contains(h)).collect())
}

/// Merges the kept parts of `a` into a binary mask with straight-through gradients. An
/// all-background result promotes the token with the largest foreground probability.
pub fn discretize<'g>(a: &PartAssignment<'g>, kept: &[usize]) -> Result<HardTokenMask<'g>> {
    validate_kept(kept, a.n_parts())?;
    let mut kept = kept.to_vec();
    kept.sort_unstable();
    kept.dedup();
    let p_fg = a.soft.select_rows(&kept)?.sum_rows();
    let mut mask = merge_parts(&a.hard, &kept);
    let mut fallback = false;
    if mask.live_count() == 0 {
        let (best, _) = argmax_first(p_fg.value().data());
        log::info!("empty foreground; promoting token {best}");
        mask.0[best] = true;
        fallback = true;
    }
    let output = p_fg.straight_through(&mask.as_f64())?;
    Ok(HardTokenMask {
        mask,
        p_fg,
        output,
        kept,
        fallback,
    })
}

/// Stage-1 parameters: backbone, prototypes, temperature and the part classifier.
#[derive(Clone, Debug)]
pub struct Selector {
    pub vit: Vit,
    pub prototypes: ParamId,
    pub log_temperature: ParamId,
    pub modulation: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    n_parts: usize,
}

/// Stage-1 outputs for one image.
pub struct SelectorOutput<'g> {
    pub features: Var<'g>,
    pub prototypes: Var<'g>,
    pub assignment: PartAssignment<'g>,
}

impl Selector {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let vit = Vit::new("stage1", cfg, store, rng)?;
        let k = cfg.n_parts;
        let d = cfg.embed_dim;
        let prototypes = store.normal("selector.prototypes", &[k + 1, d], 1.0, rng);
        let log_temperature = store.insert("selector.log_temperature", Tensor::scalar(INITIAL_TEMPERATURE.ln()));
        let modulation = store.ones("selector.modulation", &[k, d]);
        let head_w = store.normal("selector.head.w", &[d, cfg.n_classes], (1.0 / d as f64).sqrt(), rng);
        let head_b = store.zeros("selector.head.b", &[cfg.n_classes]);
        Ok(Self {
            vit,
            prototypes,
            log_temperature,
            modulation,
            head_w,
            head_b,
            n_parts: k,
        })
    }

    pub fn n_parts(&self) -> usize {
        self.n_parts
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        image: &Tensor,
        gumbel: Option<&mut Rng>,
    ) -> Result<SelectorOutput<'g>> {
        let (_, features) = self.vit.forward(g, p, image, None)?;
        let prototypes = p.var(self.prototypes);
        let temperature = p.var(self.log_temperature).exp();
        let assignment = assign_parts(features, prototypes, temperature, gumbel)?;
        Ok(SelectorOutput {
            features,
            prototypes,
            assignment,
        })
    }

    /// Stage-1 logits from pooled part features; see [`stage1_classify`].
    pub fn classify<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        out: &SelectorOutput<'g>,
        kept: &[usize],
    ) -> Result<Var<'g>> {
        stage1_classify(
            g,
            &out.assignment,
            out.features,
            p.var(self.modulation),
            p.var(self.head_w),
            p.var(self.head_b),
            kept,
        )
    }
}

/// Pools features per kept foreground part, `z_k = Σ_i A[k,i] f_i / Σ_i A[k,i]`, modulates
/// each by its own vector, averages over kept parts and applies a linear head.
///
/// Parts with zero mass contribute nothing; if every kept part has zero mass the features
/// are pooled uniformly instead.
pub fn stage1_classify<'g>(
    g: &'g Graph,
    a: &PartAssignment<'g>,
    features: Var<'g>,
    modulation: Var<'g>,
    head_w: Var<'g>,
    head_b: Var<'g>,
    kept: &[usize],
) -> Result<Var<'g>> {
    validate_kept(kept, a.n_parts())?;
    let d = features.value().cols();
    let n = features.value().rows();
    let fg = a.soft.select_rows(kept)?;
    let mass = fg.value().sum_cols_vec();
    let live: Vec<usize> = (0..kept.len()).filter(|&i| mass[i] > 0.0).collect();
    let modulation_rows: Vec<usize> = kept.iter().map(|k| k - 1).collect();
    let m = modulation.select_rows(&modulation_rows)?;
    let pooled = if live.is_empty() {
        let uniform = g.constant(Tensor::full(&[1, n], 1.0 / n as f64));
        let z = uniform.matmul(features)?;
        let mut rows = Vec::with_capacity(kept.len());
        rows.resize(kept.len(), 0);
        z.select_rows(&rows)?.mul(m)?
    } else {
        let fg_live = fg.select_rows(&live)?;
        let z = fg_live.matmul(features)?.div_col(fg_live.sum_cols())?;
        z.mul(m.select_rows(&live)?)?
    };
    let summary = pooled.sum_rows().scale(1.0 / kept.len() as f64).reshape(&[1, d])?;
    summary.matmul(head_w)?.add_row(head_b)?.reshape(&[head_b.value().len()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assignment_from<'g>(g: &'g Graph, cols: &[Vec<f64>]) -> PartAssignment<'g> {
        let n = cols.len();
        let k1 = cols[0].len();
        let t = Tensor::from_fn(&[k1, n], |idx| cols[idx % n][idx / n]);
        let hard = hard_map(&t);
        PartAssignment {
            soft: g.param(t),
            hard,
            cosine: Tensor::zeros(&[n, k1]),
            gumbel: false,
            temperature: 1.0,
        }
    }

    #[test]
    fn aligned_prototype_wins() {
        let g = Graph::new();
        let f = g.constant(Tensor::matrix(1, 3, vec![0.0, 2.0, 0.0]).unwrap());
        let p = g.constant(Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let t = g.constant(Tensor::scalar(0.1));
        let a = assign_parts(f, p, t, None).unwrap();
        assert_eq!(a.hard, vec![1]);
    }

    #[test]
    fn hot_temperature_is_uniform() {
        let mut rng = Rng::new(1);
        let g = Graph::new();
        let f = g.constant(rng.normal_tensor(&[5, 4], 1.0));
        let p = g.constant(rng.normal_tensor(&[3, 4], 1.0));
        let t = g.constant(Tensor::scalar(1e9));
        let a = assign_parts(f, p, t, None).unwrap();
        for v in a.soft.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_temperature_rejected() {
        let g = Graph::new();
        let f = g.constant(Tensor::full(&[1, 2], 1.0));
        let t = g.constant(Tensor::scalar(0.0));
        assert!(assign_parts(f, f, t, None).is_err());
    }

    #[test]
    fn zero_feature_rejected() {
        let g = Graph::new();
        let f = g.constant(Tensor::zeros(&[1, 2]));
        let p = g.constant(Tensor::full(&[2, 2], 1.0));
        let t = g.constant(Tensor::scalar(0.1));
        assert!(matches!(assign_parts(f, p, t, None), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn constant_map_has_no_variation() {
        let g = Graph::new();
        let cols = vec![vec![0.2, 0.5, 0.3]; 4];
        let a = assignment_from(&g, &cols);
        let protos = g.constant(Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let l = shaping_losses(&g, &a, protos, &LossWeights::default(), (2, 2)).unwrap();
        assert_eq!(l.total_variation.item(), 0.0);
        assert_eq!(l.orthogonality.item(), 0.0);
    }

    #[test]
    fn one_hot_has_zero_entropy() {
        let g = Graph::new();
        let cols = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let a = assignment_from(&g, &cols);
        let protos = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = shaping_losses(&g, &a, protos, &LossWeights::default(), (2, 2)).unwrap();
        assert_eq!(l.entropy.item(), 0.0);
        // every token is on the ring of a 2x2 grid; half of them are background
        assert!((l.background_prior.item() - 0.5).abs() < 1e-15);
        assert_eq!(l.presence.item(), 0.0);
        for (_, v) in l.named() {
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn background_on_ring_satisfies_prior() {
        let g = Graph::new();
        // 3x3 grid, centre token foreground
        let cols: Vec<Vec<f64>> = (0..9).map(|i| if i == 4 { vec![0.0, 1.0] } else { vec![1.0, 0.0] }).collect();
        let a = assignment_from(&g, &cols);
        let protos = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = shaping_losses(&g, &a, protos, &LossWeights::default(), (3, 3)).unwrap();
        assert_eq!(l.background_prior.item(), 0.0);
        // a single-token part has zero spatial variance
        assert!(l.concentration.item().abs() < 1e-15);
    }

    #[test]
    fn discretize_picks_foreground_majority() {
        let g = Graph::new();
        let a = assignment_from(&g, &[vec![0.3, 0.7], vec![0.5, 0.5]]);
        let m = discretize(&a, &[1]).unwrap();
        assert_eq!(m.mask.0, vec![true, false]);
        assert_eq!(*m.output.value().data(), [1.0, 0.0]);
        assert!(!m.fallback);
    }

    #[test]
    fn discretize_fallback_promotes_best_token() {
        let g = Graph::new();
        let a = assignment_from(&g, &[vec![0.9, 0.1], vec![0.6, 0.4], vec![0.8, 0.2]]);
        let m = discretize(&a, &[1]).unwrap();
        assert!(m.fallback);
        assert_eq!(m.mask.0, vec![false, true, false]);
    }

    #[test]
    fn discretize_rejects_bad_kept_sets() {
        let g = Graph::new();
        let a = assignment_from(&g, &[vec![0.3, 0.7]]);
        assert!(discretize(&a, &[]).is_err());
        assert!(discretize(&a, &[0]).is_err());
        assert!(discretize(&a, &[2]).is_err());
    }

    #[test]
    fn straight_through_backward_equals_surrogate() {
        // loss = Σ w_i · out_i, compare against the same graph with p_fg in place of out
        let cols = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.1, 0.1, 0.8]];
        let w = Tensor::vector(vec![0.7, -1.3, 2.1]);
        let g1 = Graph::new();
        let a1 = assignment_from(&g1, &cols);
        let m1 = discretize(&a1, &[1, 2]).unwrap();
        let l1 = m1.output.mul_const(&w).unwrap().sum();
        let g1r = g1.backward(l1).unwrap();
        let g2 = Graph::new();
        let a2 = assignment_from(&g2, &cols);
        let m2 = discretize(&a2, &[1, 2]).unwrap();
        let l2 = m2.p_fg.mul_const(&w).unwrap().sum();
        let g2r = g2.backward(l2).unwrap();
        assert_eq!(g1r.wrt(a1.soft).unwrap(), g2r.wrt(a2.soft).unwrap());
        // hard forward is exactly binary
        assert!(m1.output.value().data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn stage1_classify_single_part_mass() {
        let g = Graph::new();
        let mut rng = Rng::new(3);
        let cols = vec![vec![0.0, 1.0, 0.0]; 4];
        let a = assignment_from(&g, &cols);
        let f = g.constant(rng.normal_tensor(&[4, 3], 1.0));
        let m = g.constant(rng.normal_tensor(&[2, 3], 1.0));
        let w = g.constant(rng.normal_tensor(&[3, 2], 1.0));
        let b = g.constant(Tensor::zeros(&[2]));
        let base = stage1_classify(&g, &a, f, m, w, b, &[1, 2]).unwrap().value();
        // changing part 2's modulation has no effect because part 2 has no mass
        let m2 = g.constant(rng.normal_tensor(&[2, 3], 1.0));
        let mut mixed = (*m.value()).clone();
        mixed.data_mut()[3..].copy_from_slice(&m2.value().data()[3..]);
        let other = stage1_classify(&g, &a, f, g.constant(mixed), w, b, &[1, 2]).unwrap().value();
        assert_eq!(*base, *other);
    }

    #[test]
    fn zero_modulation_silences_part() {
        let g = Graph::new();
        let mut rng = Rng::new(4);
        let cols: Vec<Vec<f64>> = (0..4).map(|_| vec![0.2, 0.4, 0.4]).collect();
        let a = assignment_from(&g, &cols);
        let f = g.constant(rng.normal_tensor(&[4, 3], 1.0));
        let mut m = rng.normal_tensor(&[2, 3], 1.0);
        m.data_mut()[3..].iter_mut().for_each(|v| *v = 0.0);
        let w = g.constant(rng.normal_tensor(&[3, 2], 1.0));
        let b = g.constant(Tensor::zeros(&[2]));
        let both = stage1_classify(&g, &a, f, g.constant(m.clone()), w, b, &[1, 2]).unwrap().value();
        let only1 = stage1_classify(&g, &a, f, g.constant(m), w, b, &[1]).unwrap().value();
        // averaging over two parts vs one: part 2 adds nothing, so logits scale by 1/2
        for (x, y) in both.data().iter().zip(only1.data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn all_background_uses_uniform_pooling() {
        let g = Graph::new();
        let mut rng = Rng::new(5);
        let cols = vec![vec![1.0, 0.0]; 3];
        let a = assignment_from(&g, &cols);
        let f = rng.normal_tensor(&[3, 2], 1.0);
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[2]));
        let m = g.constant(Tensor::full(&[1, 2], 1.0));
        let out = stage1_classify(&g, &a, g.constant(f.clone()), m, w, b, &[1]).unwrap().value();
        for j in 0..2 {
            let mean = (0..3).map(|i| f.at(i, j)).sum::<f64>() / 3.0;
            assert!((out.data()[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn ring_and_pairs() {
        assert_eq!(boundary_tokens((3, 3)), vec![0, 1, 2, 3, 5, 6, 7, 8]);
        assert_eq!(neighbour_pairs((2, 2)), vec![(0, 1), (0, 2), (1, 3), (2, 3)]);
    }
}
