//! Procedural shapes over class-correlated backgrounds.

use serde::{Deserialize, Serialize};

use super::{GroupedDataset, Sample, Split};
use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};
use crate::selector::TokenMask;

/// Which nuisance attribute is correlated with the class in the training split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    /// The background texture.
    #[default]
    Background,
    /// A small coloured square placed beside the object over a neutral background.
    Blob,
}

/// How background textures differ from one another.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundStyle {
    /// Each background has its own hue and pattern.
    #[default]
    HueAndPattern,
    /// All backgrounds share one hue and differ only in pattern (solid, stripes, ...).
    Pattern,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_classes: usize,
    /// Number of background textures, or blob colours for [`BiasKind::Blob`].
    pub n_backgrounds: usize,
    /// Probability that a training (and test-iid) image carries its class's paired nuisance.
    pub rho: f64,
    pub n_train: usize,
    pub n_val: usize,
    /// Size of each of the three test splits.
    pub n_test: usize,
    pub image_size: usize,
    /// Token geometry used for the token-level ground truth.
    pub patch_size: usize,
    /// Pixels on each side kept free of objects.
    pub margin: usize,
    /// Smallest and largest object bounding-box side, pixels.
    pub min_extent: usize,
    pub max_extent: usize,
    pub blob_size: usize,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
    pub bias: BiasKind,
    pub style: BackgroundStyle,
    /// Whether objects are guaranteed to avoid the image border; when false the
    /// boundary-background prior should be disabled during training.
    pub boundary_prior: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_backgrounds: 2,
            rho: 0.95,
            n_train: 2000,
            n_val: 400,
            n_test: 400,
            image_size: 32,
            patch_size: 4,
            margin: 4,
            min_extent: 13,
            max_extent: 19,
            blob_size: 8,
            noise: 0.04,
            bias: BiasKind::Background,
            style: BackgroundStyle::default(),
            boundary_prior: true,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config(format!("rho must be in [0, 1], got {}", self.rho)));
        }
        if self.n_classes == 0 || self.n_classes > Shape::ALL.len() {
            return Err(Error::config(format!("n_classes must be in 1..={}", Shape::ALL.len())));
        }
        let max_bg = match self.style {
            BackgroundStyle::HueAndPattern => PALETTE.len(),
            BackgroundStyle::Pattern => 4,
        };
        if self.n_backgrounds == 0 || self.n_backgrounds > max_bg {
            return Err(Error::config(format!("n_backgrounds must be in 1..={max_bg}")));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config("image_size must be a multiple of patch_size"));
        }
        if self.min_extent == 0 || self.min_extent > self.max_extent {
            return Err(Error::config("object extent range is empty"));
        }
        let room = self.image_size.saturating_sub(2 * self.margin);
        if self.max_extent > room {
            return Err(Error::config(format!(
                "object of side {} does not fit a {}px image with margin {}",
                self.max_extent, self.image_size, self.margin
            )));
        }
        if self.bias == BiasKind::Blob && self.max_extent + self.blob_size + 1 > room {
            return Err(Error::config("object and blob do not fit side by side"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be non-negative"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    /// Nuisance index paired with a class.
    pub fn paired(&self, class: usize) -> usize {
        class % self.n_backgrounds
    }

    pub fn n_groups(&self) -> usize {
        self.n_classes * self.n_backgrounds
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disc,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

impl Shape {
    /// Class order; the first two are the most dissimilar pair.
    pub const ALL: [Shape; 6] = [
        Shape::Disc,
        Shape::Cross,
        Shape::Triangle,
        Shape::Square,
        Shape::Diamond,
        Shape::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Disc => "disc",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Diamond => "diamond",
            Shape::Ring => "ring",
        }
    }

    /// Membership of a point in `[-1, 1]²` box coordinates (`v` grows downwards).
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => u.abs() <= 0.9 && v.abs() <= 0.9,
            Shape::Disc => u * u + v * v <= 1.0,
            Shape::Triangle => v <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
            Shape::Cross => (u.abs() <= 0.34 || v.abs() <= 0.34) && u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Ring => {
                let r = u * u + v * v;
                (0.3..=1.0).contains(&r)
            }
        }
    }
}

pub fn class_names(n_classes: usize) -> Vec<String> {
    Shape::ALL[..n_classes].iter().map(|s| s.name().to_string()).collect()
}

const PALETTE: [[f64; 3]; 6] = [
    [0.10, 0.15, 0.45],
    [0.12, 0.40, 0.15],
    [0.45, 0.12, 0.10],
    [0.35, 0.10, 0.40],
    [0.40, 0.35, 0.08],
    [0.08, 0.35, 0.40],
];

const BLOB_COLOURS: [[f64; 3]; 6] = [
    [0.95, 0.20, 0.20],
    [0.20, 0.90, 0.25],
    [0.25, 0.35, 1.00],
    [0.95, 0.85, 0.15],
    [0.90, 0.25, 0.90],
    [0.20, 0.90, 0.90],
];

/// Object geometry and colour, shared by the two mixed test splits.
struct Foreground {
    class: usize,
    x0: usize,
    y0: usize,
    extent: usize,
    colour: [f64; 3],
}

fn draw_foreground(spec: &DatasetSpec, class: usize, rng: &mut Rng) -> Foreground {
    let extent = spec.min_extent + rng.below(spec.max_extent - spec.min_extent + 1);
    let reserve = if spec.bias == BiasKind::Blob { spec.blob_size + 1 } else { 0 };
    let room = spec.image_size - 2 * spec.margin - extent - reserve;
    let x0 = spec.margin + rng.below(room + 1);
    let y0 = spec.margin + rng.below(spec.image_size - 2 * spec.margin - extent + 1);
    let colour = [rng.range(0.75, 1.0), rng.range(0.75, 1.0), rng.range(0.75, 1.0)];
    Foreground {
        class,
        x0,
        y0,
        extent,
        colour,
    }
}

fn rasterize(spec: &DatasetSpec, fg: &Foreground) -> Vec<bool> {
    let s = spec.image_size;
    let shape = Shape::ALL[fg.class];
    let half = fg.extent as f64 / 2.0;
    let mut mask = vec![false; s * s];
    for y in fg.y0..fg.y0 + fg.extent {
        for x in fg.x0..fg.x0 + fg.extent {
            let u = (x - fg.x0) as f64 + 0.5 - half;
            let v = (y - fg.y0) as f64 + 0.5 - half;
            mask[y * s + x] = shape.contains(u / half, v / half);
        }
    }
    mask
}

fn background_pixel(pattern: usize, base: [f64; 3], x: usize, y: usize) -> [f64; 3] {
    let bright = match pattern % 4 {
        0 => true,
        1 => (y / 2) % 2 == 0,
        2 => ((x + y) / 2) % 2 == 0,
        _ => (x / 2 + y / 2) % 2 == 0,
    };
    let k = if bright { 1.0 } else { 0.55 };
    base.map(|c| c * k)
}

/// Composes one image. `nuisance` selects the background texture, or the blob colour.
fn compose(spec: &DatasetSpec, fg: &Foreground, nuisance: usize, rng: &mut Rng) -> (Tensor, Vec<bool>, Option<Vec<bool>>) {
    let s = spec.image_size;
    let mask = rasterize(spec, fg);
    let texture = match spec.bias {
        BiasKind::Background => nuisance,
        BiasKind::Blob => rng.below(spec.n_backgrounds),
    };
    let jitter = rng.range(-0.05, 0.05);
    let (hue, pattern) = match spec.style {
        BackgroundStyle::HueAndPattern => (texture, texture),
        BackgroundStyle::Pattern => (0, texture),
    };
    let base = PALETTE[hue].map(|c| (c + jitter).max(0.0));
    let mut blob = None;
    if spec.bias == BiasKind::Blob {
        let b = spec.blob_size;
        let bx = fg.x0 + fg.extent + 1 + rng.below(spec.image_size - spec.margin - (fg.x0 + fg.extent + 1) - b + 1);
        let by = spec.margin + rng.below(s - 2 * spec.margin - b + 1);
        let mut m = vec![false; s * s];
        for y in by..by + b {
            for x in bx..bx + b {
                m[y * s + x] = true;
            }
        }
        blob = Some(m);
    }
    let mut img = Tensor::zeros(&[3, s, s]);
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let rgb = if mask[i] {
                fg.colour
            } else if blob.as_ref().map_or(false, |m| m[i]) {
                BLOB_COLOURS[nuisance]
            } else {
                background_pixel(pattern, base, x, y)
            };
            for (c, v) in rgb.iter().enumerate() {
                let noisy = v + spec.noise * rng.normal();
                img.data_mut()[(c * s + y) * s + x] = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    (img, mask, blob)
}

/// Token is foreground iff strictly more than half of its pixels are.
pub fn token_majority(mask: &[bool], image_size: usize, patch_size: usize) -> TokenMask {
    let g = image_size / patch_size;
    let half = patch_size * patch_size / 2;
    TokenMask(
        (0..g * g)
            .map(|t| {
                let (r, c) = (t / g, t % g);
                let mut n = 0;
                for dy in 0..patch_size {
                    for dx in 0..patch_size {
                        n += usize::from(mask[(r * patch_size + dy) * image_size + c * patch_size + dx]);
                    }
                }
                n > half
            })
            .collect(),
    )
}

/// Centroid and topmost point (mean column of the first row) of a pixel mask, in pixel
/// coordinates `(x, y)` measured at pixel centres.
pub fn keypoints(mask: &[bool], image_size: usize) -> [[f64; 2]; 2] {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    let mut top: Option<(usize, f64, f64)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = ((i % image_size) as f64 + 0.5, (i / image_size) as f64 + 0.5);
        sx += x;
        sy += y;
        n += 1.0;
        let row = i / image_size;
        top = match top {
            Some((r, tx, tn)) if r == row => Some((r, tx + x, tn + 1.0)),
            None => Some((row, x, 1.0)),
            keep => keep,
        };
    }
    if n == 0.0 {
        let c = image_size as f64 / 2.0;
        return [[c, c], [c, c]];
    }
    let (row, tx, tn) = top.expect("non-empty mask");
    [[sx / n, sy / n], [tx / tn, row as f64 + 0.5]]
}

fn nuisance_for(spec: &DatasetSpec, class: usize, correlated: Option<f64>, rng: &mut Rng) -> usize {
    let paired = spec.paired(class);
    match correlated {
        Some(rho) if spec.n_backgrounds > 1 => {
            if rng.bernoulli(rho) {
                paired
            } else {
                // uniform over the other nuisances
                let j = rng.below(spec.n_backgrounds - 1);
                if j >= paired {
                    j + 1
                } else {
                    j
                }
            }
        }
        Some(_) => 0,
        None => rng.below(spec.n_backgrounds),
    }
}

fn make_sample(spec: &DatasetSpec, id: usize, fg: &Foreground, nuisance: usize, rng: &mut Rng) -> Sample {
    let (image, mask, blob) = compose(spec, fg, nuisance, rng);
    let token_mask = token_majority(&mask, spec.image_size, spec.patch_size);
    let bias_tokens = blob.as_ref().map(|b| token_majority(b, spec.image_size, spec.patch_size));
    Sample {
        id,
        keypoints: keypoints(&mask, spec.image_size),
        image,
        label: fg.class,
        background: nuisance,
        group: fg.class * spec.n_backgrounds + nuisance,
        mask,
        token_mask,
        bias_tokens,
    }
}

fn stream(split: Split, i: usize, part: u64) -> u64 {
    ((split as u64) << 40) | ((i as u64) << 2) | part
}

pub fn generate(spec: &DatasetSpec) -> Result<GroupedDataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let simple = |split: Split, n: usize, correlated: Option<f64>| -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut rng = root.fork(stream(split, i, 0));
                let class = rng.below(spec.n_classes);
                let nuisance = nuisance_for(spec, class, correlated, &mut rng);
                let fg = draw_foreground(spec, class, &mut rng);
                make_sample(spec, i, &fg, nuisance, &mut rng)
            })
            .collect()
    };
    let train = simple(Split::Train, spec.n_train, Some(spec.rho));
    let val = simple(Split::Val, spec.n_val, None);
    let test_iid = simple(Split::TestIid, spec.n_test, Some(spec.rho));
    let mut same = Vec::with_capacity(spec.n_test);
    let mut rand = Vec::with_capacity(spec.n_test);
    for i in 0..spec.n_test {
        let mut rng = root.fork(stream(Split::TestMixedSame, i, 0));
        let class = rng.below(spec.n_classes);
        let fg = draw_foreground(spec, class, &mut rng);
        let mut r = root.fork(stream(Split::TestMixedSame, i, 1));
        same.push(make_sample(spec, i, &fg, spec.paired(class), &mut r));
        let mut r = root.fork(stream(Split::TestMixedRand, i, 1));
        let nuisance = r.below(spec.n_backgrounds);
        rand.push(make_sample(spec, i, &fg, nuisance, &mut r));
    }
    Ok(GroupedDataset {
        spec: spec.clone(),
        train,
        val,
        test_iid,
        test_mixed_same: same,
        test_mixed_rand: rand,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            n_train: 50,
            n_val: 10,
            n_test: 10,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn shapes_differ() {
        let spec = small();
        let masks: Vec<Vec<bool>> = (0..6)
            .map(|c| {
                rasterize(
                    &spec,
                    &Foreground {
                        class: c,
                        x0: 4,
                        y0: 4,
                        extent: 16,
                        colour: [1.0; 3],
                    },
                )
            })
            .collect();
        for i in 0..6 {
            for j in i + 1..6 {
                assert_ne!(masks[i], masks[j], "{i} vs {j}");
            }
        }
    }

    #[test]
    fn area_fraction_in_range() {
        let spec = DatasetSpec::default();
        let ds = generate(&DatasetSpec { n_train: 200, ..spec.clone() }).unwrap();
        for s in &ds.train {
            let f = s.mask.iter().filter(|&&m| m).count() as f64 / 1024.0;
            assert!((0.08..=0.36).contains(&f), "{f}");
        }
    }

    #[test]
    fn objects_avoid_margin() {
        let ds = generate(&small()).unwrap();
        for s in ds.train.iter().chain(&ds.test_mixed_rand) {
            for (i, &m) in s.mask.iter().enumerate() {
                let (x, y) = (i % 32, i / 32);
                if m {
                    assert!((4..28).contains(&x) && (4..28).contains(&y));
                }
            }
        }
    }

    #[test]
    fn mixed_splits_share_foreground() {
        let ds = generate(&small()).unwrap();
        for (a, b) in ds.test_mixed_same.iter().zip(&ds.test_mixed_rand) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.background, ds.spec.paired(a.label));
        }
    }

    #[test]
    fn majority_is_strict() {
        let mut mask = vec![false; 16];
        for m in mask.iter_mut().take(8) {
            *m = true;
        }
        // 4x4 image, one 4x4 patch with exactly half foreground
        assert!(!token_majority(&mask, 4, 4).0[0]);
        mask[8] = true;
        assert!(token_majority(&mask, 4, 4).0[0]);
    }

    #[test]
    fn keypoint_values() {
        let mut mask = vec![false; 16];
        mask[5] = true;
        mask[6] = true;
        mask[9] = true;
        mask[10] = true;
        let kp = keypoints(&mask, 4);
        assert_eq!(kp[0], [2.0, 2.0]);
        assert_eq!(kp[1], [2.0, 1.5]);
    }

    #[test]
    fn blob_kind_places_blob() {
        let spec = DatasetSpec {
            bias: BiasKind::Blob,
            min_extent: 11,
            max_extent: 14,
            blob_size: 6,
            ..small()
        };
        let ds = generate(&spec).unwrap();
        for s in &ds.train {
            let blob = s.bias_tokens.as_ref().unwrap();
            assert!(blob.live_count() >= 1);
            assert!(!blob.0.iter().zip(&s.token_mask.0).any(|(a, b)| *a && *b));
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&DatasetSpec { rho: 1.5, ..small() }).is_err());
        assert!(generate(&DatasetSpec { max_extent: 40, ..small() }).is_err());
        assert!(generate(&DatasetSpec { n_classes: 9, ..small() }).is_err());
    }
}
