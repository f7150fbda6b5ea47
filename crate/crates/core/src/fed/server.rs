use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fedavg, partition_clients, Client, LoraStateDict};
use crate::data::{DatasetManifest, LabeledExample, Split};
use crate::distill::Teacher;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_logits, MetricsReport};
use crate::model::MsDeit;
use crate::train::{predict_examples, EpochStats, TrainConfig};

/// Environment variable capping how many clients train at once.
pub const THREADS_ENV: &str = "FEDSIM_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    /// Rounds without a validation-loss improvement before stopping.
    pub patience: usize,
    /// Reload the adapters of the best round when the run ends.
    pub restore_best: bool,
    /// Stop as soon as pooled validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 4,
            rounds: 30,
            local_epochs: 1,
            patience: 10,
            restore_best: true,
            target_accuracy: None,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("federation.clients must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("federation.rounds must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("federation.patience must be at least 1".into()));
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config("federation.target_accuracy must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// What one client reported in a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub client: usize,
    pub examples: usize,
    pub train: Vec<EpochStats>,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Scalar part of a validation report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub loss: f64,
    pub accuracy: f64,
    pub auc_macro: f64,
    pub f1_macro: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub top5_accuracy: f64,
}

impl From<&MetricsReport> for ValidationSummary {
    fn from(r: &MetricsReport) -> Self {
        Self {
            loss: r.mean_loss,
            accuracy: r.accuracy,
            auc_macro: r.auc_macro,
            f1_macro: r.f1_macro,
            precision_macro: r.precision_macro,
            recall_macro: r.recall_macro,
            top5_accuracy: r.top5_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    pub clients: Vec<ClientRound>,
    pub validation: ValidationSummary,
    /// Serialized size of one adapter state.
    pub adapter_bytes: usize,
    /// Broadcast plus upload over all clients: `2 × clients × adapter_bytes`.
    pub bytes_exchanged: usize,
    pub improved: bool,
}

/// Everything a federated run needs. The examples are handed to the
/// clients at construction; the server itself reads only the pooled
/// validation split.
pub struct Federation<'a> {
    pub model: MsDeit,
    pub examples: &'a [LabeledExample],
    pub manifest: &'a DatasetManifest,
    pub train: TrainConfig,
    pub config: FederationConfig,
    pub teacher: Option<&'a dyn Teacher>,
    pub seed: u64,
}

pub struct FederationOutcome {
    /// Global model holding the final (or best, when restoring) adapters.
    pub model: MsDeit,
    pub adapters: LoraStateDict,
    pub history: Vec<RoundRecord>,
    /// 1-based round whose adapters are in `adapters`.
    pub best_round: usize,
}

impl FederationOutcome {
    /// First round whose pooled validation accuracy reached `threshold`.
    pub fn rounds_to_accuracy(&self, threshold: f64) -> Option<usize> {
        self.history.iter().find(|r| r.validation.accuracy >= threshold).map(|r| r.round)
    }
}

fn thread_count(clients: usize) -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(clients)
        .min(clients)
}

/// Pooled validation metrics of `model`.
pub fn validate_global(model: &MsDeit, examples: &[LabeledExample], manifest: &DatasetManifest) -> Result<MetricsReport> {
    let val = manifest.select(examples, Split::Val);
    if val.is_empty() {
        return Err(Error::Config("the validation split is empty".into()));
    }
    let logits = predict_examples(model, &val, &manifest.normalization)?;
    let labels: Vec<usize> = val.iter().map(|e| e.class_id).collect();
    evaluate_logits(&logits, &labels)
}

/// Synchronous rounds of broadcast, local training, FedAvg and pooled
/// validation, with early stopping on the validation loss.
pub fn run_federation(fed: Federation<'_>) -> Result<FederationOutcome> {
    fed.config.validate()?;
    let Federation {
        mut model,
        examples,
        manifest,
        train,
        config,
        teacher,
        seed,
    } = fed;
    let partitions = partition_clients(manifest, config.clients, seed)?;
    let mut clients = partitions
        .iter()
        .map(|p| Client::new(p, examples, manifest, &model, train.clone(), seed))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(clients.len()))
        .build()
        .map_err(|e| Error::Config(format!("cannot start client threads: {e}")))?;

    let base = model.base_checksum();
    let mut global = model.lora_state();
    let mut best = (f64::INFINITY, global.clone(), 0usize);
    let mut stale = 0;
    let mut history = Vec::new();
    for round in 1..=config.rounds {
        let results: Vec<Result<(LoraStateDict, Vec<EpochStats>, Option<(f64, f64)>)>> = pool.install(|| {
            clients
                .par_iter_mut()
                .map(|c| {
                    let (state, stats) = c.local_train(&global, config.local_epochs, teacher)?;
                    Ok((state, stats, c.local_validation()?))
                })
                .collect()
        });
        let mut updates = Vec::with_capacity(clients.len());
        let mut reports = Vec::with_capacity(clients.len());
        for (c, r) in clients.iter().zip(results) {
            let (state, stats, val) = r.map_err(|e| Error::Protocol(format!("round {round} aborted: client {} failed: {e}", c.id())))?;
            updates.push((state, c.num_examples()));
            reports.push(ClientRound {
                client: c.id(),
                examples: c.num_examples(),
                train: stats,
                val_loss: val.map(|v| v.0),
                val_accuracy: val.map(|v| v.1),
            });
        }
        global = fedavg(&updates)?;
        model.load_lora_state(&global)?;
        let report = validate_global(&model, examples, manifest)?;
        let improved = report.mean_loss < best.0;
        if improved {
            best = (report.mean_loss, global.clone(), round);
            stale = 0;
        } else {
            stale += 1;
        }
        let adapter_bytes = global.serialized_size();
        history.push(RoundRecord {
            round,
            clients: reports,
            validation: ValidationSummary::from(&report),
            adapter_bytes,
            bytes_exchanged: 2 * clients.len() * adapter_bytes,
            improved,
        });
        let reached = config.target_accuracy.is_some_and(|t| report.accuracy >= t);
        if stale >= config.patience || reached {
            break;
        }
    }
    let mut best_round = history.len();
    if config.restore_best && best.2 > 0 {
        global = best.1;
        best_round = best.2;
        model.load_lora_state(&global)?;
    }
    if model.base_checksum() != base || clients.iter().any(|c| c.base_checksum() != base) {
        return Err(Error::Contract("frozen weights changed during federation".into()));
    }
    Ok(FederationOutcome {
        model,
        adapters: global,
        history,
        best_round,
    })
}

/// Trains one client holding the whole training split for `epochs`,
/// starting from the model's adapters.
pub fn train_centralized(
    model: &MsDeit,
    examples: &[LabeledExample],
    manifest: &DatasetManifest,
    train: TrainConfig,
    teacher: Option<&dyn Teacher>,
    epochs: usize,
    seed: u64,
) -> Result<(LoraStateDict, Vec<EpochStats>)> {
    let partition = partition_clients(manifest, 1, seed)?.remove(0);
    let mut client = Client::new(&partition, examples, manifest, model, train, seed)?;
    client.local_train(&model.lora_state(), epochs, teacher)
}

/// Writes one JSON object per round.
pub fn write_history(history: &[RoundRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::File::create(path.as_ref())?.write_all(&out)?;
    Ok(())
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    std::fs::read_to_string(path.as_ref())?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
