//! Adam with L2 weight decay and the minibatch training loop shared by
//! clients and teacher pre-training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, LabeledExample, Normalization};
use crate::distill::{total_loss, DistillConfig, ModelTeacher, Teacher};
use crate::error::{Error, Result};
use crate::model::{Ctx, ModelConfig, MsDeit, ParamId, ParamStore, Trainable};
use crate::rng::{self, Rng};
use crate::sampling::{draw_batch, SamplerSpec};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            weight_decay: 1e-5,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optim.{m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }
}

/// Adam over the parameters of one store; moments are keyed by parameter
/// position and persist across calls.
#[derive(Debug, Clone)]
pub struct Adam {
    config: OptimConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        let c = &self.config;
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            if self.moments.len() <= i {
                self.moments.resize(i + 1, None);
            }
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let w = store.value_mut(*id).data_mut();
            for k in 0..w.len() {
                let grad = g.data()[k] + c.weight_decay * w[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * grad;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * grad * grad;
                let mhat = m[k] / bias1;
                let vhat = v[k] / bias2;
                w[k] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Settings of one local training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub distill: DistillConfig,
    /// Draw batches with the class-balancing sampler; otherwise shuffle.
    pub use_sampler: bool,
    pub augment: AugmentConfig,
    pub trainable: Trainable,
}

/// Mean loss and accuracy over the batches of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// One epoch of `ceil(N / batch)` minibatches over `data`.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut MsDeit,
    opt: &mut Adam,
    data: &[LabeledExample],
    sampler: &SamplerSpec,
    norm: &Normalization,
    teacher: Option<&dyn Teacher>,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<EpochStats> {
    if data.len() != sampler.total {
        return Err(Error::Contract(format!(
            "sampler covers {} examples, data has {}",
            sampler.total,
            data.len()
        )));
    }
    let batch = config.optim.batch_size;
    let batches = sampler.batches_per_epoch(batch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    if !config.use_sampler {
        order.shuffle(rng);
    }
    let teacher = teacher.filter(|_| config.distill.alpha < 1.0);
    let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
    for b in 0..batches {
        let idx = if config.use_sampler {
            draw_batch(sampler, batch, rng)
        } else {
            order[b * batch..((b + 1) * batch).min(order.len())].to_vec()
        };
        let mut images = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in &idx {
            let ex = config.augment.apply(&data[i], norm, rng)?;
            labels.push(ex.class_id);
            images.push(ex.image);
        }
        let zt = teacher.map(|t| t.logits(&images)).transpose()?;

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, config.trainable);
        let vars: Vec<_> = images.into_iter().map(|im| tape.constant(im)).collect();
        let dropout = model.config().lora_dropout;
        let mut ctx = Ctx::train(&mut tape, bound, rng, dropout);
        let logits = model.forward_batch(&mut ctx, &vars)?;
        let bound = ctx.bound;
        let zt = zt.map(|z| tape.constant(z));
        let (loss, parts) = total_loss(&mut tape, logits, zt, &labels, &config.distill)?;
        tape.check_finite()?;
        tape.backward(loss)?;

        let grads: Vec<(ParamId, Tensor)> = model
            .params()
            .iter()
            .filter(|(_, p)| config.trainable.includes(p.kind))
            .filter_map(|(id, _)| tape.grad(bound.var(id)).map(|g| (id, g.clone())))
            .collect();
        opt.step(model.params_mut(), &grads);

        let z = tape.value(logits);
        correct += labels.iter().enumerate().filter(|(r, &y)| argmax(z.row(*r)) == y).count();
        seen += labels.len();
        loss_sum += parts.total;
    }
    Ok(EpochStats {
        loss: loss_sum / batches as f64,
        accuracy: correct as f64 / seen as f64,
    })
}

/// Logits of `examples` after deterministic preprocessing.
pub fn predict_examples(model: &MsDeit, examples: &[&LabeledExample], norm: &Normalization) -> Result<Tensor> {
    let prep = AugmentConfig::plain(model.config().image_size);
    let images = examples
        .iter()
        .map(|e| {
            let resized = crate::data::resize_bilinear(&e.image, prep.resize, prep.resize)?;
            norm.apply(&resized)
        })
        .collect::<Result<Vec<_>>>()?;
    model.predict(&images)
}

/// Mean cross-entropy and accuracy of `logits` against `labels`.
pub fn loss_and_accuracy(logits: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let ce = crate::distill::cross_entropy(&mut tape, z, labels)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax(logits.row(*r)) == y)
        .count();
    Ok((tape.value(ce).item()?, correct as f64 / labels.len() as f64))
}

/// Trains every weight of a fresh network on `data` and freezes it as a
/// teacher.
pub fn pretrain_teacher(
    config: ModelConfig,
    data: &[LabeledExample],
    norm: &Normalization,
    epochs: usize,
    optim: OptimConfig,
    seed: u64,
) -> Result<(ModelTeacher, Vec<EpochStats>)> {
    let mut model = MsDeit::new(config, seed)?;
    let labels: Vec<usize> = data.iter().map(|e| e.class_id).collect();
    let sampler = SamplerSpec::from_labels(&labels, model.config().num_classes, None)?;
    let train = TrainConfig {
        optim: optim.clone(),
        distill: DistillConfig {
            alpha: 1.0,
            ..DistillConfig::default()
        },
        use_sampler: true,
        augment: AugmentConfig::plain(model.config().image_size),
        trainable: Trainable::All,
    };
    let mut opt = Adam::new(optim);
    let mut rng = rng::stream(seed, "teacher");
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        history.push(train_epoch(&mut model, &mut opt, data, &sampler, norm, None, &train, &mut rng)?);
    }
    Ok((ModelTeacher::new(model, format!("pretrained-{seed}")), history))
}
