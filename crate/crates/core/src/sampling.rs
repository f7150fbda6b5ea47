//! Inverse-frequency weighted sampling with replacement.
//!
//! Each class gets weight `N / (C * N_c)`; example `i` is drawn with
//! probability `w[y_i] / sum_j w[y_j]`, so every class carries total mass
//! `1 / C`. Draws use a Vose alias table.

use rand::Rng as _;

use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSpec {
    pub class_counts: Vec<usize>,
    pub total: usize,
    pub num_classes: usize,
    /// Weight of each class.
    pub class_weights: Vec<f64>,
    /// `w[y_i]` for every example.
    pub per_sample_weights: Vec<f64>,
    pub selection_probs: Vec<f64>,
    alias_prob: Vec<f64>,
    alias: Vec<usize>,
}

impl SamplerSpec {
    /// Builds the sampler over `labels`; every class in `0..num_classes`
    /// must occur at least once.
    pub fn from_labels(labels: &[usize], num_classes: usize, class_names: Option<&[String]>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("cannot sample from an empty split".into()));
        }
        let mut class_counts = vec![0usize; num_classes];
        for &y in labels {
            *class_counts
                .get_mut(y)
                .ok_or_else(|| Error::Data(format!("label {y} out of range for {num_classes} classes")))? += 1;
        }
        if let Some(c) = class_counts.iter().position(|&n| n == 0) {
            let name = class_names
                .and_then(|n| n.get(c))
                .cloned()
                .unwrap_or_else(|| c.to_string());
            return Err(Error::Config(format!("class `{name}` has no examples in this split")));
        }
        Ok(Self::with_counts(labels, class_counts))
    }

    fn with_counts(labels: &[usize], class_counts: Vec<usize>) -> Self {
        let total = labels.len();
        let num_classes = class_counts.len();
        let class_weights: Vec<f64> = class_counts
            .iter()
            .map(|&n| total as f64 / (num_classes as f64 * n as f64))
            .collect();
        let per_sample_weights: Vec<f64> = labels.iter().map(|&y| class_weights[y]).collect();
        let norm: f64 = per_sample_weights.iter().sum();
        let selection_probs: Vec<f64> = per_sample_weights.iter().map(|w| w / norm).collect();
        let (alias_prob, alias) = alias_table(&selection_probs);
        Self {
            class_counts,
            total,
            num_classes,
            class_weights,
            per_sample_weights,
            selection_probs,
            alias_prob,
            alias,
        }
    }

    /// Total selection probability of each class.
    pub fn class_mass(&self, labels: &[usize]) -> Vec<f64> {
        let mut mass = vec![0.0; self.num_classes];
        for (&y, p) in labels.iter().zip(&self.selection_probs) {
            mass[y] += p;
        }
        mass
    }

    /// Batches per epoch: `ceil(N / batch_size)`.
    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.total.div_ceil(batch_size.max(1))
    }
}

fn alias_table(probs: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = probs.len();
    let mut scaled: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
    let mut alias: Vec<usize> = (0..n).collect();
    let mut small: Vec<usize> = Vec::new();
    let mut large: Vec<usize> = Vec::new();
    for (i, &s) in scaled.iter().enumerate() {
        if s < 1.0 {
            small.push(i);
        } else {
            large.push(i);
        }
    }
    while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
        small.pop();
        alias[s] = l;
        scaled[l] -= 1.0 - scaled[s];
        if scaled[l] < 1.0 {
            large.pop();
            small.push(l);
        }
    }
    // leftovers are 1 up to rounding
    for i in small.into_iter().chain(large) {
        scaled[i] = 1.0;
    }
    (scaled, alias)
}

/// Sampler over `split` of `manifest`. Returned indices refer to
/// `manifest.ids(split)`.
pub fn build_sampler(manifest: &DatasetManifest, split: Split) -> Result<SamplerSpec> {
    let labels: Vec<usize> = manifest
        .ids(split)
        .iter()
        .map(|id| manifest.labels[*id])
        .collect();
    SamplerSpec::from_labels(&labels, manifest.num_classes(), Some(&manifest.class_names))
}

/// `batch_size` i.i.d. indices drawn with replacement.
pub fn draw_batch(spec: &SamplerSpec, batch_size: usize, rng: &mut Rng) -> Vec<usize> {
    let n = spec.alias.len();
    (0..batch_size)
        .map(|_| {
            let i = rng.random_range(0..n);
            if rng.random::<f64>() < spec.alias_prob[i] {
                i
            } else {
                spec.alias[i]
            }
        })
        .collect()
}
