//! Optimizers for the adapter partitions.
//!
//! Plain SGD is the default: it keeps the step-delta gradient oracle exact
//! (`delta = -lr * grad`) and training-path equivalence testable. Adam is
//! available for the actual fine-tuning runs; its moment state is carried
//! in f64 keyed by tensor name, so updates are deterministic and identical
//! across element precisions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::TransformerModel;
use crate::tape::Gradients;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state for one training run.
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, step: 0, moments: BTreeMap::new() }
    }

    /// Applies one update to every adapter partition that received
    /// gradient, then rebuilds the fused weight caches.
    pub fn step<E: Element>(
        &mut self,
        model: &mut TransformerModel<E>,
        grads: &Gradients<E>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => model.apply_sgd(grads, E::from_f64(lr)),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bias1 = 1.0 - beta1.powi(t);
                let bias2 = 1.0 - beta2.powi(t);
                let moments = &mut self.moments;
                model.update_trainable(&mut |name, tensor| {
                    let g = grads.get(tensor)?;
                    let state = moments.entry(name.to_string()).or_insert_with(|| Moments {
                        m: vec![0.0; tensor.len()],
                        v: vec![0.0; tensor.len()],
                    });
                    let data: Vec<E> = tensor
                        .data()
                        .iter()
                        .zip(g.data())
                        .enumerate()
                        .map(|(i, (&p, &gi))| {
                            let gi = gi.to_f64();
                            state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * gi;
                            state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * gi * gi;
                            let m_hat = state.m[i] / bias1;
                            let v_hat = state.v[i] / bias2;
                            let upd = lr * m_hat / (v_hat.sqrt() + eps);
                            E::from_f64(p.to_f64() - upd)
                        })
                        .collect();
                    Some(Tensor::from_vec(tensor.rows(), tensor.cols(), data).expect("same shape"))
                })
            }
        }
    }
}
