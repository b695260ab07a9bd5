//! Freeze-base adapter fine-tuning on synthetic sequence tasks.
//!
//! Plain SGD with a constant learning rate; per-step batches are assembled
//! to a fixed token budget. Only adapter partitions move: the frozen-base
//! hash is asserted unchanged after every run. Checkpoints are written at
//! the end of each epoch and scored on the held-out validation split.

pub mod eval;
pub mod optimizer;
pub mod sweep;
pub mod task;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{ExecPath, Variant};
use crate::error::{Error, Result};
use crate::model::checkpoint::save_checkpoint;
use crate::model::TransformerModel;
use crate::tape::{Gradients, Tape};
use crate::tensor::Element;
pub use eval::{evaluate, Metrics};
pub use optimizer::{Optimizer, OptimizerKind};
pub use task::{Dataset, Example, SyntheticTask, TaskKind};

/// Learning-rate schedule. Only a constant schedule exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Token budget per optimizer step (full stream tokens).
    #[serde(default = "default_batch_tokens")]
    pub batch_tokens: usize,
    pub seed: u64,
    #[serde(default)]
    pub schedule: Schedule,
    /// SGD by default; the gradient oracles only cover SGD.
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

fn default_batch_tokens() -> usize {
    4096
}

impl TrainConfig {
    pub fn new(learning_rate: f64, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate,
            epochs,
            batch_tokens: default_batch_tokens(),
            seed,
            schedule: Schedule::Constant,
            optimizer: OptimizerKind::Sgd,
        }
    }

    pub fn with_optimizer(mut self, optimizer: OptimizerKind) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub tokens_seen: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainResult {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Set when training aborted on a non-finite loss; completed epochs and
    /// their checkpoints are retained.
    pub aborted: Option<String>,
}

impl TrainResult {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Fine-tunes the adapter partitions of `model` on the dataset's training
/// split. The frozen base is hash-checked before and after.
pub fn train_adapters<E: Element>(
    model: &mut TransformerModel<E>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if model.config().adapter.variant == Variant::None {
        return Err(Error::Config(
            "training requires an adapter variant; the base model is frozen".into(),
        ));
    }
    if dataset.train.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    let frozen_before = model.frozen_hash();
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut result = TrainResult { steps: Vec::new(), epochs: Vec::new(), aborted: None };
    let mut tokens_seen = 0usize;
    let mut step = 0usize;

    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut cursor = 0usize;
        let mut epoch_losses = Vec::new();

        while cursor < order.len() {
            // assemble a batch up to the token budget (at least one example)
            let mut batch = Vec::new();
            let mut batch_tokens = 0usize;
            while cursor < order.len() {
                let ex = &dataset.train[order[cursor]];
                let len = ex.stream().len();
                if !batch.is_empty() && batch_tokens + len > cfg.batch_tokens {
                    break;
                }
                batch.push(ex);
                batch_tokens += len;
                cursor += 1;
                if batch_tokens >= cfg.batch_tokens {
                    break;
                }
            }

            let answer_total: usize = batch.iter().map(|e| e.answer_tokens()).sum();
            let mut grads: Option<Gradients<E>> = None;
            let mut batch_loss = 0.0f64;
            for ex in &batch {
                let (inputs, targets) = ex.training_pair();
                let mut tape = Tape::recording();
                let logits = model.forward_sequence(&mut tape, &inputs, ExecPath::Train)?;
                let loss = tape.cross_entropy_cols(&logits, &targets)?;
                let weight = ex.answer_tokens() as f64 / answer_total as f64;
                let scaled = tape.scale(&loss, E::from_f64(weight))?;
                batch_loss += scaled.item().to_f64();
                let g = tape.backward(&scaled)?;
                match grads.as_mut() {
                    Some(acc) => acc.accumulate(g),
                    None => grads = Some(g),
                }
            }

            tokens_seen += batch_tokens;
            step += 1;
            result.steps.push(StepRecord { step, tokens_seen, loss: batch_loss });

            if !batch_loss.is_finite() {
                result.aborted = Some(format!(
                    "loss became non-finite at step {step} (epoch {epoch}); \
                     completed checkpoints retained"
                ));
                break 'epochs;
            }
            epoch_losses.push(batch_loss);
            optimizer.step(model, grads.as_ref().expect("nonempty batch"), cfg.learning_rate)?;
        }

        let val = evaluate(model, &dataset.val)?;
        let checkpoint = match out_dir {
            Some(dir) => {
                let path = dir.join("checkpoints").join(format!("epoch_{epoch:02}.ckpt"));
                save_checkpoint(model, &path)?;
                Some(path)
            }
            None => None,
        };
        let train_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        result.epochs.push(EpochRecord { epoch, train_loss, val, checkpoint });
    }

    if model.frozen_hash() != frozen_before {
        return Err(Error::Contract(
            "frozen base weights changed during training".into(),
        ));
    }
    if let Some(dir) = out_dir {
        write_loss_log(&result, dir)?;
    }
    Ok(result)
}

fn write_loss_log(result: &TrainResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("step,tokens_seen,loss\n");
    for s in &result.steps {
        csv.push_str(&format!("{},{},{}\n", s.step, s.tokens_seen, s.loss));
    }
    std::fs::write(dir.join("loss.csv"), csv)?;
    Ok(())
}
