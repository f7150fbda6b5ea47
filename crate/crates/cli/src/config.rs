use std::path::{Path, PathBuf};

use fedsim::data::{stratified_split, AugmentConfig, DatasetManifest, LabeledExample, SynthSpec};
use fedsim::distill::DistillConfig;
use fedsim::fed::FederationConfig;
use fedsim::model::ModelConfig;
use fedsim::train::OptimConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Where examples come from: an image directory (one sub-directory per
/// class) or the planted-square generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SynthSpec>,
    /// Train/validation/test fractions for directory datasets.
    pub fractions: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: None,
            fractions: [0.7, 0.15, 0.15],
        }
    }
}

/// Frozen network pre-trained centrally on the training split before the
/// federation starts. Disabled, or with `distill.alpha = 1`, training uses
/// cross-entropy only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub lr: f64,
    pub embed_dim: usize,
    pub depth: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs: 30,
            lr: 1e-3,
            embed_dim: 32,
            depth: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Class-balancing sampler on; otherwise plain shuffling.
    pub use_sampler: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub optim: OptimConfig,
    pub federation: FederationConfig,
    pub augment: AugmentConfig,
    pub teacher: TeacherConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            use_sampler: true,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            distill: DistillConfig::default(),
            optim: OptimConfig::default(),
            federation: FederationConfig::default(),
            augment: AugmentConfig::default(),
            teacher: TeacherConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let checks = [
            self.model.validate(),
            self.distill.validate(),
            self.optim.validate(),
            self.federation.validate(),
            self.augment.validate(),
        ];
        for c in checks {
            c.map_err(|e| CliError::usage(e.to_string()))?;
        }
        if self.augment.resize != self.model.image_size {
            return Err(CliError::usage(format!(
                "augment.resize ({}) must equal model.image_size ({})",
                self.augment.resize, self.model.image_size
            )));
        }
        if let Some(s) = &self.data.synthetic {
            s.validate().map_err(|e| CliError::usage(e.to_string()))?;
            if s.num_classes != self.model.num_classes || s.channels != self.model.in_channels {
                return Err(CliError::usage(
                    "data.synthetic classes and channels must match model.num_classes and model.in_channels".into(),
                ));
            }
        }
        if self.teacher.enabled && (self.teacher.epochs == 0 || !(self.teacher.lr > 0.0)) {
            return Err(CliError::usage("teacher.epochs and teacher.lr must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with the output directory left
    /// out, so relocating a run keeps its identity.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("struct").remove("output_dir");
        Sha256::digest(v.to_string().as_bytes()).into()
    }

    /// Examples and their split, generated or loaded as configured. With
    /// `force_synthetic`, the synthetic settings (or their defaults) are used even
    /// when a path is set.
    pub fn dataset(&self, force_synthetic: bool) -> Result<(Vec<LabeledExample>, DatasetManifest), CliError> {
        if force_synthetic || self.data.path.is_none() {
            let spec = match (&self.data.synthetic, force_synthetic) {
                (Some(s), _) => s.clone(),
                (None, true) => SynthSpec {
                    num_classes: self.model.num_classes,
                    image_size: self.model.image_size,
                    channels: self.model.in_channels,
                    seed: self.seed,
                    ..SynthSpec::default()
                },
                (None, false) => {
                    return Err(CliError::usage(
                        "no dataset: set data.path, add a [data.synthetic] table, or pass --synthetic".into(),
                    ))
                }
            };
            return spec.generate().map_err(CliError::from_core);
        }
        let path = self.data.path.as_ref().expect("checked above");
        let (examples, names) = fedsim::data::load_dir(path, self.model.image_size).map_err(CliError::from_core)?;
        if names.len() != self.model.num_classes {
            return Err(CliError::usage(format!(
                "dataset has {} classes, model.num_classes is {}",
                names.len(),
                self.model.num_classes
            )));
        }
        let manifest = stratified_split(&examples, &names, self.data.fractions, self.seed).map_err(CliError::from_core)?;
        Ok((examples, manifest))
    }
}
