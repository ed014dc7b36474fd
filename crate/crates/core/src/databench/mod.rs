//! Synthetic spurious-correlation benchmark, robustness metrics and a FLOPs model.

mod flops;
mod generate;
mod metrics;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::numcore::Tensor;
use crate::selector::TokenMask;

pub use flops::{flops_estimate, FlopsEstimate};
pub use generate::{class_names, generate, keypoints, token_majority, BackgroundStyle, BiasKind, DatasetSpec, Shape};
pub use metrics::{bg_gap, fg_miou, fit_affine, iou, kp_regression, part_centroids, GroupAccuracy, MetricsReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "test-iid")]
    TestIid,
    #[serde(rename = "test-mixed-same")]
    TestMixedSame,
    #[serde(rename = "test-mixed-rand")]
    TestMixedRand,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::Val,
        Split::TestIid,
        Split::TestMixedSame,
        Split::TestMixedRand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestIid => "test-iid",
            Split::TestMixedSame => "test-mixed-same",
            Split::TestMixedRand => "test-mixed-rand",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split '{s}'")))
    }
}

/// One labelled image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Index within its split.
    pub id: usize,
    /// `[3, H, W]`, values in `[0, 1]` quantized to 8 bits.
    pub image: Tensor,
    pub label: usize,
    /// Background texture, or blob colour for blob-biased data.
    pub background: usize,
    /// `label · n_backgrounds + background`.
    pub group: usize,
    /// Pixel foreground mask, row-major.
    pub mask: Vec<bool>,
    pub token_mask: TokenMask,
    /// Object centroid and topmost point, `(x, y)` in pixels.
    pub keypoints: [[f64; 2]; 2],
    /// Tokens covered by the planted blob, for blob-biased data.
    pub bias_tokens: Option<TokenMask>,
}

impl Sample {
    pub fn keypoint_vector(&self) -> Vec<f64> {
        self.keypoints.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test_iid: Vec<Sample>,
    pub test_mixed_same: Vec<Sample>,
    pub test_mixed_rand: Vec<Sample>,
}

impl GroupedDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::TestIid => &self.test_iid,
            Split::TestMixedSame => &self.test_mixed_same,
            Split::TestMixedRand => &self.test_mixed_rand,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::TestIid => &mut self.test_iid,
            Split::TestMixedSame => &mut self.test_mixed_same,
            Split::TestMixedRand => &mut self.test_mixed_rand,
        }
    }

    /// Sample counts per group of a split.
    pub fn group_histogram(&self, split: Split) -> Vec<usize> {
        let mut h = vec![0; self.spec.n_groups()];
        for s in self.split(split) {
            h[s.group] += 1;
        }
        h
    }
}
