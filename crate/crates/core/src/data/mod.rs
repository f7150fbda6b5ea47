//! Labeled image records, split manifests, augmentation and the synthetic
//! planted-square corpus.

mod augment;
mod loader;
mod split;
mod synth;

pub use augment::{flip_horizontal, resize_bilinear, rotate_nearest, AugmentConfig};
pub use loader::{load_dir, read_image, write_dir, write_image};
pub use split::stratified_split;
pub use synth::{synth_dataset, SynthSpec};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One `C×H×W` image with values in `[0, 1]` before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image: Tensor,
    pub class_id: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

/// Per-channel statistics applied as `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and population standard deviation per channel over `images`.
    /// A constant channel gets std 1 so normalization stays finite.
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for img in images {
            let (c, plane) = channel_layout(img)?;
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::Data(format!(
                    "mixed channel counts: {} and {c}",
                    sum.len()
                )));
            }
            for (ch, px) in img.data().chunks(plane).enumerate() {
                sum[ch] += px.iter().sum::<f64>();
                sq[ch] += px.iter().map(|v| v * v).sum::<f64>();
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::Data("cannot compute statistics of an empty set".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let (c, plane) = channel_layout(image)?;
        if self.mean.len() != c || self.std.len() != c {
            return Err(Error::Data(format!(
                "normalization has {} channels, image has {c}",
                self.mean.len()
            )));
        }
        let mut out = image.clone();
        for (ch, px) in out.data_mut().chunks_mut(plane).enumerate() {
            for v in px {
                *v = (*v - self.mean[ch]) / self.std[ch];
            }
        }
        Ok(out)
    }
}

pub(crate) fn channel_layout(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h * w)),
        s => Err(Error::Data(format!("expected a non-empty C×H×W image, got {s:?}"))),
    }
}

/// Class names, labels and split assignment of a corpus. Serialized as
/// JSON with sorted keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    /// source id → class id
    pub labels: BTreeMap<String, usize>,
    /// source id → split
    pub splits: BTreeMap<String, Split>,
    /// split → per-class counts
    pub counts: BTreeMap<Split, Vec<usize>>,
    pub normalization: Normalization,
}

impl DatasetManifest {
    pub(crate) fn build(
        class_names: Vec<String>,
        labels: BTreeMap<String, usize>,
        splits: BTreeMap<String, Split>,
        normalization: Normalization,
    ) -> Result<Self> {
        let mut counts: BTreeMap<Split, Vec<usize>> = Split::ALL
            .iter()
            .map(|&s| (s, vec![0; class_names.len()]))
            .collect();
        for (id, split) in &splits {
            let class = *labels
                .get(id)
                .ok_or_else(|| Error::Data(format!("split entry `{id}` has no label")))?;
            let slot = counts
                .get_mut(split)
                .and_then(|c| c.get_mut(class))
                .ok_or_else(|| Error::Data(format!("`{id}` has class {class} out of range")))?;
            *slot += 1;
        }
        let m = Self {
            class_names,
            labels,
            splits,
            counts,
            normalization,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        if c < 2 {
            return Err(Error::Data("a manifest needs at least two classes".into()));
        }
        if self.labels.len() != self.splits.len() || self.labels.keys().ne(self.splits.keys()) {
            return Err(Error::Data(
                "every source id must have exactly one label and one split".into(),
            ));
        }
        let mut recount: BTreeMap<Split, Vec<usize>> =
            Split::ALL.iter().map(|&s| (s, vec![0; c])).collect();
        for (id, split) in &self.splits {
            let class = self.labels[id];
            if class >= c {
                return Err(Error::Data(format!("`{id}` has class {class} out of range")));
            }
            recount.get_mut(split).expect("all splits present")[class] += 1;
        }
        if recount != self.counts {
            return Err(Error::Data("manifest counts do not match assignments".into()));
        }
        Ok(())
    }

    /// Source ids assigned to `split`, in sorted order.
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.splits
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Examples of `split`, in the order they appear in `examples`.
    pub fn select<'a>(&self, examples: &'a [LabeledExample], split: Split) -> Vec<&'a LabeledExample> {
        examples
            .iter()
            .filter(|e| self.splits.get(&e.source_id) == Some(&split))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
