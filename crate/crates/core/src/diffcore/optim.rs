use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// First-order optimizer with Adam state keyed by parameter path.
///
/// Each slot carries its own step counter, so a parameter that is only
/// updated by some of the calls still gets the right bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    slots: BTreeMap<String, AdamSlot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            slots: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn slots(&self) -> &BTreeMap<String, AdamSlot> {
        &self.slots
    }

    pub fn restore_slot(&mut self, path: String, slot: AdamSlot) {
        self.slots.insert(path, slot);
    }

    /// Updates every parameter named in `scope` from its gradient buffer.
    /// Gradients are left in place; callers clear them with
    /// [`ParamSet::zero_grad`].
    pub fn step<S: AsRef<str>>(&mut self, params: &mut ParamSet, scope: &[S]) -> Result<()> {
        // Check every gradient before touching anything.
        for path in scope {
            let path = path.as_ref();
            if params.get(path)?.grad().is_none() {
                return Err(Error::Contract(format!("no gradient for parameter {path}")));
            }
        }
        for path in scope {
            let path = path.as_ref();
            let t = params.get_mut(path)?;
            let g = t.grad().expect("checked above").to_vec();
            match self.kind {
                OptimizerKind::Sgd { lr } => {
                    for (p, gi) in t.data_mut().iter_mut().zip(&g) {
                        *p -= lr * gi;
                    }
                }
                OptimizerKind::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let slot = self.slots.entry(path.to_string()).or_insert_with(|| AdamSlot {
                        step: 0,
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                    });
                    slot.step += 1;
                    let bc1 = 1.0 - beta1.powi(slot.step as i32);
                    let bc2 = 1.0 - beta2.powi(slot.step as i32);
                    for (((p, gi), m), v) in t
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .zip(slot.m.iter_mut())
                        .zip(slot.v.iter_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * gi;
                        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
