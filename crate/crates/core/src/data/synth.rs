use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{stratified_split, DatasetManifest, LabeledExample};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Cells per side of the grid that hosts the planted squares.
pub const GRID_CELLS: usize = 4;

/// Planted-square corpus: class `c` has a bright square filling cell `c`
/// of a 4×4 grid over uniform background noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Background pixels are drawn from `[0, noise)`, square pixels from
    /// `[1 - noise, 1)`.
    pub noise: f64,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 7,
            per_class: 20,
            image_size: 32,
            channels: 3,
            noise: 0.25,
            fractions: [0.7, 0.15, 0.15],
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn new(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Self {
        Self {
            num_classes,
            per_class,
            image_size,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs at least two classes".into()));
        }
        if self.num_classes > GRID_CELLS * GRID_CELLS {
            return Err(Error::Config(format!(
                "at most {} synthetic classes fit the pattern grid",
                GRID_CELLS * GRID_CELLS
            )));
        }
        if self.image_size < 2 * GRID_CELLS || self.image_size % GRID_CELLS != 0 {
            return Err(Error::Config(format!(
                "synthetic image size {} is too small or not a multiple of {GRID_CELLS}",
                self.image_size
            )));
        }
        if self.per_class == 0 || self.channels == 0 {
            return Err(Error::Config("per_class and channels must be positive".into()));
        }
        if !(self.noise > 0.0 && self.noise <= 0.5) {
            return Err(Error::Config("synthetic noise must lie in (0, 0.5]".into()));
        }
        Ok(())
    }

    /// Top-left pixel `(row, col)` and side of the square planted for `class`.
    pub fn square(&self, class: usize) -> (usize, usize, usize) {
        let side = self.image_size / GRID_CELLS;
        ((class / GRID_CELLS) * side, (class % GRID_CELLS) * side, side)
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("class{c}")).collect()
    }

    pub fn generate(&self) -> Result<(Vec<LabeledExample>, DatasetManifest)> {
        self.validate()?;
        let n = self.image_size;
        let mut examples = Vec::with_capacity(self.num_classes * self.per_class);
        for class in 0..self.num_classes {
            let (r0, c0, side) = self.square(class);
            for i in 0..self.per_class {
                let source_id = format!("class{class}/synth{i:05}");
                let mut r = rng::stream(self.seed, &format!("synth/{source_id}"));
                let mut data = Vec::with_capacity(self.channels * n * n);
                for _ in 0..self.channels {
                    for y in 0..n {
                        for x in 0..n {
                            let inside = (r0..r0 + side).contains(&y) && (c0..c0 + side).contains(&x);
                            let base = if inside { 1.0 - self.noise } else { 0.0 };
                            data.push(base + r.random_range(0.0..self.noise));
                        }
                    }
                }
                examples.push(LabeledExample {
                    image: Tensor::new(&[self.channels, n, n], data)?,
                    class_id: class,
                    source_id,
                });
            }
        }
        let manifest = stratified_split(&examples, &self.class_names(), self.fractions, self.seed)?;
        Ok((examples, manifest))
    }
}

/// Planted-square dataset with default noise and a 70/15/15 split.
pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<(Vec<LabeledExample>, DatasetManifest)> {
    SynthSpec::new(num_classes, per_class, image_size, seed).generate()
}
