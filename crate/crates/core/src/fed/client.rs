use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::LoraStateDict;
use crate::data::{DatasetManifest, LabeledExample, Normalization, Split};
use crate::distill::Teacher;
use crate::error::{Error, Result};
use crate::model::MsDeit;
use crate::rng::{self, Rng};
use crate::sampling::SamplerSpec;
use crate::train::{loss_and_accuracy, predict_examples, train_epoch, Adam, EpochStats, TrainConfig};

/// Source ids owned by one client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Splits the train and validation ids across `num_clients`, class by
/// class. Each class is shuffled with its own stream and dealt round-robin,
/// continuing from where the previous class stopped, so client sizes differ
/// by at most one.
pub fn partition_clients(manifest: &DatasetManifest, num_clients: usize, seed: u64) -> Result<Vec<ClientPartition>> {
    if num_clients == 0 {
        return Err(Error::Config("federation needs at least one client".into()));
    }
    let train_counts = manifest
        .counts
        .get(&Split::Train)
        .cloned()
        .unwrap_or_else(|| vec![0; manifest.num_classes()]);
    for (c, &n) in train_counts.iter().enumerate() {
        if n < num_clients {
            return Err(Error::Config(format!(
                "class `{}` has {n} training examples, fewer than {num_clients} clients",
                manifest.class_names[c]
            )));
        }
    }
    let mut parts: Vec<ClientPartition> = (0..num_clients)
        .map(|client| ClientPartition {
            client,
            train: Vec::new(),
            val: Vec::new(),
        })
        .collect();
    for split in [Split::Train, Split::Val] {
        let ids = manifest.ids(split);
        let mut next = 0;
        for (c, name) in manifest.class_names.iter().enumerate() {
            let mut members: Vec<&str> = ids.iter().copied().filter(|id| manifest.labels[*id] == c).collect();
            let mut r = rng::stream(seed, &format!("partition/{}/{name}", split.name()));
            members.shuffle(&mut r);
            for id in members {
                let p = &mut parts[next % num_clients];
                match split {
                    Split::Train => p.train.push(id.to_string()),
                    _ => p.val.push(id.to_string()),
                }
                next += 1;
            }
        }
    }
    Ok(parts)
}

/// One simulated site. Its images never leave this struct: the server sees
/// only adapter state and scalar statistics.
pub struct Client {
    id: usize,
    train: Vec<LabeledExample>,
    val: Vec<LabeledExample>,
    sampler: SamplerSpec,
    norm: Normalization,
    model: MsDeit,
    opt: Adam,
    rng: Rng,
    config: TrainConfig,
}

impl Client {
    /// Builds a client holding copies of its partition's examples and a
    /// private copy of `model` (frozen base plus adapters).
    pub fn new(
        partition: &ClientPartition,
        examples: &[LabeledExample],
        manifest: &DatasetManifest,
        model: &MsDeit,
        config: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let by_id: HashMap<&str, &LabeledExample> = examples.iter().map(|e| (e.source_id.as_str(), e)).collect();
        let fetch = |ids: &[String]| -> Result<Vec<LabeledExample>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|e| (*e).clone())
                        .ok_or_else(|| Error::Data(format!("example `{id}` is not in the dataset")))
                })
                .collect()
        };
        let train = fetch(&partition.train)?;
        if train.is_empty() {
            return Err(Error::Config(format!("client {} has no training data", partition.client)));
        }
        let labels: Vec<usize> = train.iter().map(|e| e.class_id).collect();
        let sampler = SamplerSpec::from_labels(&labels, manifest.num_classes(), Some(&manifest.class_names))?;
        Ok(Self {
            id: partition.client,
            val: fetch(&partition.val)?,
            train,
            sampler,
            norm: manifest.normalization.clone(),
            model: model.clone(),
            opt: Adam::new(config.optim.clone()),
            rng: rng::stream(seed, &format!("client{}/train", partition.client)),
            config,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Training-partition size, the client's aggregation weight.
    pub fn num_examples(&self) -> usize {
        self.train.len()
    }

    pub fn base_checksum(&self) -> [u8; 32] {
        self.model.base_checksum()
    }

    /// Loads `global` into the local adapters and trains them for `epochs`.
    /// Optimizer moments and the random stream persist across calls.
    pub fn local_train(
        &mut self,
        global: &LoraStateDict,
        epochs: usize,
        teacher: Option<&dyn Teacher>,
    ) -> Result<(LoraStateDict, Vec<EpochStats>)> {
        let before = self.model.base_checksum();
        self.model.load_lora_state(global)?;
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            history.push(train_epoch(
                &mut self.model,
                &mut self.opt,
                &self.train,
                &self.sampler,
                &self.norm,
                teacher,
                &self.config,
                &mut self.rng,
            )?);
        }
        if self.model.base_checksum() != before {
            return Err(Error::Contract(format!("client {} modified frozen weights", self.id)));
        }
        Ok((self.model.lora_state(), history))
    }

    /// Loss and accuracy of the local model on the client's validation
    /// partition, if it has one.
    pub fn local_validation(&self) -> Result<Option<(f64, f64)>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let refs: Vec<&LabeledExample> = self.val.iter().collect();
        let logits = predict_examples(&self.model, &refs, &self.norm)?;
        let labels: Vec<usize> = self.val.iter().map(|e| e.class_id).collect();
        loss_and_accuracy(&logits, &labels).map(Some)
    }
}
