use sha2::{Digest, Sha256};

use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether a parameter belongs to the frozen base network or to a
/// low-rank adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Base,
    Adapter,
}

/// Which parameters receive gradients during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// Only adapter matrices (federated fine-tuning).
    Adapters,
    /// Everything (teacher pre-training).
    All,
}

impl Trainable {
    pub fn includes(self, kind: ParamKind) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Adapters => kind == ParamKind::Adapter,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self, filter: impl Fn(&Param) -> bool) -> usize {
        self.params.iter().filter(|p| filter(p)).map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape`; only those selected by `trainable`
    /// become gradient-carrying leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable.includes(p.kind) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names and little-endian values of every parameter of `kind`.
    pub fn checksum(&self, kind: ParamKind) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.kind == kind) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Tape handles for one binding of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Substitutes the tape handle of one parameter (gradient probes).
    pub fn set(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}
