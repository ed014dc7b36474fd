//! On-disk dataset layout.
//!
//! ```text
//! DIR/spec.json                 generator spec (also fixes class/background counts)
//! DIR/<split>/manifest.json     [{file, class, background, group, mask_file, keypoints, bias_tokens?}]
//! DIR/<split>/NNNNN.png         8-bit RGB image
//! DIR/<split>/NNNNN_mask.png    1-bit foreground mask
//! ```

use std::fs;
use std::path::Path;

use ifam_core::databench::{token_majority, DatasetSpec, GroupedDataset, Sample, Split};
use ifam_core::selector::TokenMask;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::pngio;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub class: usize,
    pub background: usize,
    pub group: usize,
    pub mask_file: String,
    /// Object centroid and topmost point, `(x, y)` pixels.
    pub keypoints: [[f64; 2]; 2],
    /// Token indices covered by a planted blob.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_tokens: Option<Vec<usize>>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))
}

pub fn save(data: &GroupedDataset, dir: &Path) -> Result<()> {
    let spec = serde_json::to_vec_pretty(&data.spec).expect("spec serializes");
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    write(&dir.join("spec.json"), &spec)?;
    let size = data.spec.image_size;
    for split in Split::ALL {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| CliError::io(format!("creating {}", sub.display()), e))?;
        let mut manifest = Vec::new();
        for s in data.split(split) {
            let file = format!("{:05}.png", s.id);
            let mask_file = format!("{:05}_mask.png", s.id);
            write(&sub.join(&file), &pngio::encode_rgb(&s.image))?;
            write(&sub.join(&mask_file), &pngio::encode_mask(&s.mask, size, size))?;
            manifest.push(ManifestEntry {
                file,
                class: s.label,
                background: s.background,
                group: s.group,
                mask_file,
                keypoints: s.keypoints,
                bias_tokens: s.bias_tokens.as_ref().map(TokenMask::live_indices),
            });
        }
        write(&sub.join("manifest.json"), &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
    }
    Ok(())
}

pub fn load_spec(dir: &Path) -> Result<DatasetSpec> {
    let path = dir.join("spec.json");
    let spec: DatasetSpec = serde_json::from_slice(&read(&path)?).map_err(|e| CliError::Config {
        what: "dataset spec",
        path: path.clone(),
        detail: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_split(dir: &Path, spec: &DatasetSpec, split: Split) -> Result<Vec<Sample>> {
    let sub = dir.join(split.name());
    let path = sub.join("manifest.json");
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&read(&path)?).map_err(|e| CliError::Config {
        what: "manifest",
        path: path.clone(),
        detail: e.to_string(),
    })?;
    let size = spec.image_size;
    let n_tokens = spec.grid().0 * spec.grid().1;
    let bad = |file: &str, detail: String| CliError::Dataset(format!("{}/{file}: {detail}", sub.display()));
    manifest
        .into_iter()
        .enumerate()
        .map(|(id, e)| {
            let image = pngio::decode_rgb(&read(&sub.join(&e.file))?).map_err(|d| bad(&e.file, d))?;
            if image.shape() != [3, size, size] {
                return Err(bad(&e.file, format!("expected {size}x{size}, got {:?}", image.shape())));
            }
            let (mask, w, h) = pngio::decode_mask(&read(&sub.join(&e.mask_file))?).map_err(|d| bad(&e.mask_file, d))?;
            if (w, h) != (size, size) {
                return Err(bad(&e.mask_file, format!("expected {size}x{size}, got {w}x{h}")));
            }
            if e.class >= spec.n_classes || e.background >= spec.n_backgrounds || e.group != e.class * spec.n_backgrounds + e.background {
                return Err(bad(&e.file, "class, background and group disagree with the spec".into()));
            }
            let bias_tokens = match e.bias_tokens {
                Some(idx) if idx.iter().any(|&i| i >= n_tokens) => {
                    return Err(bad(&e.file, "bias token out of range".into()));
                }
                Some(idx) => Some(TokenMask((0..n_tokens).map(|i| idx.contains(&i)).collect())),
                None => None,
            };
            Ok(Sample {
                id,
                image,
                label: e.class,
                background: e.background,
                group: e.group,
                token_mask: token_majority(&mask, size, spec.patch_size),
                mask,
                keypoints: e.keypoints,
                bias_tokens,
            })
        })
        .collect()
}

pub fn load(dir: &Path) -> Result<GroupedDataset> {
    let spec = load_spec(dir)?;
    Ok(GroupedDataset {
        train: load_split(dir, &spec, Split::Train)?,
        val: load_split(dir, &spec, Split::Val)?,
        test_iid: load_split(dir, &spec, Split::TestIid)?,
        test_mixed_same: load_split(dir, &spec, Split::TestMixedSame)?,
        test_mixed_rand: load_split(dir, &spec, Split::TestMixedRand)?,
        spec,
    })
}
