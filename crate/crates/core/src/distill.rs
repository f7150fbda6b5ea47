//! Cross-entropy, temperature-scaled distillation and their blend.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MsDeit;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the cross-entropy term; `1 - alpha` goes to distillation.
    pub alpha: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            alpha: 0.25,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "distill.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("distill.alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Loss components of one batch, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub distillation: f64,
    pub total: f64,
}

fn logits_dims(tape: &Tape, z: Var) -> Result<(usize, usize)> {
    match tape.shape(z) {
        &[b, c] if b > 0 && c > 0 => Ok((b, c)),
        s => Err(Error::Contract(format!("logits must be B×C, got {s:?}"))),
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = logits_dims(tape, logits)?;
    if labels.len() != b {
        return Err(Error::Contract(format!("{} labels for {b} logit rows", labels.len())));
    }
    let mut onehot = Tensor::zeros(&[b, c]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Data(format!("label {y} out of range for {c} classes")));
        }
        onehot.data_mut()[i * c + y] = 1.0;
    }
    let logp = tape.log_softmax(logits, 1.0)?;
    let picked = tape.mul_const(logp, &onehot)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / b as f64))
}

/// `T^2 / B * sum_i q_i (log q_i - log p_i)` with `q = softmax(zt / T)` and
/// `p = softmax(zs / T)`. Teacher logits are read as constants; no gradient
/// flows into them.
pub fn kd_loss(tape: &mut Tape, zs: Var, zt: Var, temperature: f64) -> Result<Var> {
    let (b, _) = logits_dims(tape, zs)?;
    if tape.shape(zs) != tape.shape(zt) {
        return Err(Error::Contract(format!(
            "student logits {:?} and teacher logits {:?} differ in shape",
            tape.shape(zs),
            tape.shape(zt)
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {temperature}")));
    }
    let q = tape.value(zt).softmax_lastdim(temperature)?;
    let entropy_term: f64 = q
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum();
    let log_p = tape.log_softmax(zs, temperature)?;
    let cross = tape.mul_const(log_p, &q)?;
    let cross = tape.sum(cross);
    // entropy_term - cross, scaled
    let neg = tape.scale(cross, -1.0);
    let offset = tape.constant(Tensor::scalar(entropy_term));
    let kl = tape.add(neg, offset)?;
    Ok(tape.scale(kl, temperature * temperature / b as f64))
}

/// `alpha * CE + (1 - alpha) * KD`. Without a teacher the distillation term
/// is absent and the loss is plain cross-entropy.
pub fn total_loss(
    tape: &mut Tape,
    zs: Var,
    zt: Option<Var>,
    labels: &[usize],
    config: &DistillConfig,
) -> Result<(Var, LossBreakdown)> {
    config.validate()?;
    let ce = cross_entropy(tape, zs, labels)?;
    let ce_value = tape.value(ce).item()?;
    let Some(zt) = zt else {
        return Ok((
            ce,
            LossBreakdown {
                cross_entropy: ce_value,
                distillation: 0.0,
                total: ce_value,
            },
        ));
    };
    let kd = kd_loss(tape, zs, zt, config.temperature)?;
    let kd_value = tape.value(kd).item()?;
    let a = tape.scale(ce, config.alpha);
    let k = tape.scale(kd, 1.0 - config.alpha);
    let total = tape.add(a, k)?;
    let total_value = tape.value(total).item()?;
    Ok((
        total,
        LossBreakdown {
            cross_entropy: ce_value,
            distillation: kd_value,
            total: total_value,
        },
    ))
}

/// A frozen source of logits for distillation.
pub trait Teacher: Send + Sync {
    /// `B×classes` logits; identical inputs give identical outputs.
    fn logits(&self, images: &[Tensor]) -> Result<Tensor>;

    fn name(&self) -> &str;
}

/// A trained network used read-only as a teacher.
#[derive(Debug, Clone)]
pub struct ModelTeacher {
    model: MsDeit,
    name: String,
}

impl ModelTeacher {
    pub fn new(model: MsDeit, name: impl Into<String>) -> Self {
        Self {
            model,
            name: name.into(),
        }
    }

    pub fn model(&self) -> &MsDeit {
        &self.model
    }
}

impl Teacher for ModelTeacher {
    fn logits(&self, images: &[Tensor]) -> Result<Tensor> {
        self.model.predict(images)
    }

    fn name(&self) -> &str {
        &self.name
    }
}
