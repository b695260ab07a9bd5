//! Learning-rate sweep: trains one model per learning rate from identical
//! initialization and picks the best (lr, epoch) cell by validation
//! accuracy.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::tensor::Element;
use crate::train::{evaluate, train_adapters, Dataset, Metrics, TrainConfig, TrainResult};

/// Seven learning rates, log-spaced over a 3-decade range (the protocol's
/// sweep shape), with endpoints scaled to suit the toy tasks.
pub fn default_learning_rates() -> Vec<f64> {
    log_spaced_rates(1e-4, 1e-1, 7)
}

/// `n` log-spaced rates from `lo` to `hi` inclusive.
pub fn log_spaced_rates(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && lo > 0.0 && hi > lo);
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub lr: f64,
    pub epoch: usize,
    pub val: Metrics,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub grid: Vec<SweepCell>,
    pub best: SweepCell,
    /// Learning rates whose runs aborted on divergence.
    pub diverged: Vec<f64>,
}

/// Deterministic argmax over the grid by validation token accuracy.
/// Ties break to the lower learning rate, then the earlier epoch.
pub fn select_best(grid: &[SweepCell]) -> Option<&SweepCell> {
    let mut best: Option<&SweepCell> = None;
    for cell in grid {
        let better = match best {
            None => true,
            Some(cur) => {
                if cell.val.token_accuracy != cur.val.token_accuracy {
                    cell.val.token_accuracy > cur.val.token_accuracy
                } else if cell.lr != cur.lr {
                    cell.lr < cur.lr
                } else {
                    cell.epoch < cur.epoch
                }
            }
        };
        if better {
            best = Some(cell);
        }
    }
    best
}

/// Runs the sweep. Every learning rate trains a fresh model built from the
/// same seed (identical initialization). Runs are independent and execute
/// on up to `jobs` threads.
pub fn lr_sweep<E: Element>(
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    base: &TrainConfig,
    rates: &[f64],
    out_dir: Option<&Path>,
    jobs: usize,
) -> Result<SweepOutcome> {
    if rates.is_empty() {
        return Err(Error::Config("lr sweep requires at least one rate".into()));
    }
    let jobs = jobs.max(1);
    let mut runs: Vec<Option<Result<TrainResult>>> = Vec::new();
    runs.resize_with(rates.len(), || None);

    for wave in (0..rates.len()).collect::<Vec<_>>().chunks(jobs) {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &idx in wave {
                let lr = rates[idx];
                let run_dir = out_dir.map(|d| d.join(format!("lr_{idx}")));
                let handle = scope.spawn(move || -> Result<TrainResult> {
                    let mut cfg = base.clone();
                    cfg.learning_rate = lr;
                    let mut model = TransformerModel::<E>::new(model_cfg.clone(), base.seed)?;
                    train_adapters(&mut model, dataset, &cfg, run_dir.as_deref())
                });
                handles.push((idx, handle));
            }
            for (idx, handle) in handles {
                runs[idx] = Some(handle.join().expect("sweep worker panicked"));
            }
        });
    }

    let mut grid = Vec::new();
    let mut diverged = Vec::new();
    for (idx, run) in runs.into_iter().enumerate() {
        let result = run.expect("every rate ran")?;
        if result.aborted.is_some() {
            diverged.push(rates[idx]);
        }
        for epoch in &result.epochs {
            grid.push(SweepCell {
                lr: rates[idx],
                epoch: epoch.epoch,
                val: epoch.val,
                checkpoint: epoch.checkpoint.clone(),
            });
        }
    }

    let best = select_best(&grid)
        .cloned()
        .ok_or_else(|| Error::Diverged("every learning rate diverged before epoch 1".into()))?;

    let outcome = SweepOutcome { grid, best, diverged };
    if let Some(dir) = out_dir {
        persist(&outcome, rates, dir)?;
    }
    Ok(outcome)
}

/// Re-scores a checkpoint cell on a split (used after selection).
pub fn rescore<E: Element>(model: &TransformerModel<E>, dataset: &Dataset) -> Result<Metrics> {
    evaluate(model, &dataset.test)
}

fn persist(outcome: &SweepOutcome, rates: &[f64], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from(
        "lr,epoch,val_token_accuracy,val_sequence_exact_match,val_mean_loss,checkpoint\n",
    );
    for cell in &outcome.grid {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            cell.lr,
            cell.epoch,
            cell.val.token_accuracy,
            cell.val.sequence_exact_match,
            cell.val.mean_loss,
            cell.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        ));
    }
    std::fs::write(dir.join("sweep.csv"), csv)?;

    #[derive(Serialize)]
    struct Selection<'a> {
        rates: &'a [f64],
        best: &'a SweepCell,
        diverged: &'a [f64],
    }
    let json = serde_json::to_vec_pretty(&Selection {
        rates,
        best: &outcome.best,
        diverged: &outcome.diverged,
    })?;
    std::fs::write(dir.join("selection.json"), json)?;
    Ok(())
}
