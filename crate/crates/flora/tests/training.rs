//! Training-loop contracts: zero-step identity, frozen base, gradient-step
//! correctness, twin-variant equivalence, divergence handling, evaluation
//! metrics, and sweep reproducibility.

use flora::adapters::{AdapterSpec, ExecPath, Variant};
use flora::error::Error;
use flora::model::{ModelConfig, TransformerModel};
use flora::tape::Tape;
use flora::train::sweep::{lr_sweep, log_spaced_rates};
use flora::train::{
    evaluate, train_adapters, Dataset, Example, OptimizerKind, SyntheticTask, TaskKind,
    TrainConfig,
};
use flora::verify::oracle;

fn micro_task() -> SyntheticTask {
    let mut task = SyntheticTask::new(TaskKind::Copy);
    task.alphabet = 6;
    task.min_len = 2;
    task.max_len = 4;
    task.train_size = 48;
    task.val_size = 12;
    task.test_size = 12;
    task.seed = 11;
    task
}

fn micro_cfg(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::micro();
    cfg.vocab_size = 16;
    cfg.with_adapter(AdapterSpec::new(variant, 2))
}

#[test]
fn zero_learning_rate_leaves_weights_bitwise_identical() {
    let dataset = micro_task().generate().unwrap();
    let cfg = micro_cfg(Variant::PfLora);
    let mut model = TransformerModel::<f64>::new(cfg.clone(), 3).unwrap();
    let before: Vec<_> = model.all_tensors();

    let tc = TrainConfig { batch_tokens: 128, ..TrainConfig::new(0.0, 2, 5) };
    let result = train_adapters(&mut model, &dataset, &tc, None).unwrap();
    assert!(result.aborted.is_none());

    for ((n1, t1), (n2, t2)) in before.iter().zip(model.all_tensors().iter()) {
        assert_eq!(n1, n2);
        assert!(t1.bits_eq(t2), "{n1} changed under lr=0");
    }
}

#[test]
fn training_requires_an_adapter() {
    let dataset = micro_task().generate().unwrap();
    let mut model = TransformerModel::<f64>::new(ModelConfig::micro(), 3).unwrap();
    let tc = TrainConfig::new(0.1, 1, 5);
    assert!(matches!(
        train_adapters(&mut model, &dataset, &tc, None),
        Err(Error::Config(_))
    ));
}

/// One SGD step must equal `-lr * grad` to finite-difference accuracy.
#[test]
fn sgd_step_delta_matches_finite_difference_gradient() {
    let cfg = micro_cfg(Variant::FfbaAorb);
    let model = TransformerModel::<f64>::new(cfg.clone(), 7).unwrap();
    let tokens = [0u32, 4, 5, 1, 4, 5];
    let targets = [None, None, None, Some(4u32), Some(5), Some(2)];

    // analytic step
    let mut stepped = TransformerModel::<f64>::new(cfg.clone(), 7).unwrap();
    let lr = 0.05;
    let mut tape = Tape::recording();
    let logits = stepped.forward_sequence(&mut tape, &tokens, ExecPath::Train).unwrap();
    let loss = tape.cross_entropy_cols(&logits, &targets).unwrap();
    let grads = tape.backward(&loss).unwrap();
    stepped.apply_sgd(&grads, lr).unwrap();

    // finite-difference gradient for every adapter tensor
    let tensors: std::collections::BTreeMap<String, flora::tensor::Tensor<f64>> =
        model.all_tensors().into_iter().collect();
    let loss_of = |m: &TransformerModel<f64>| -> f64 {
        let mut tape = Tape::inference();
        let logits = m.forward_sequence(&mut tape, &tokens, ExecPath::Train).unwrap();
        tape.cross_entropy_cols(&logits, &targets).unwrap().item()
    };
    let before: std::collections::BTreeMap<String, flora::tensor::Tensor<f64>> =
        model.all_tensors().into_iter().collect();
    let after: std::collections::BTreeMap<String, flora::tensor::Tensor<f64>> =
        stepped.all_tensors().into_iter().collect();

    let mut worst = 0.0f64;
    for (name, t) in &before {
        if !t.requires_grad() {
            continue;
        }
        let mut fd = Vec::with_capacity(t.len());
        for idx in 0..t.len() {
            let probe = |delta: f64| -> f64 {
                let mut map = tensors.clone();
                let mut data = t.to_f64_vec();
                data[idx] += delta;
                map.insert(
                    name.clone(),
                    flora::tensor::Tensor::from_vec(t.rows(), t.cols(), data).unwrap(),
                );
                loss_of(&TransformerModel::from_tensors(cfg.clone(), map).unwrap())
            };
            fd.push((probe(1e-5) - probe(-1e-5)) / 2e-5);
        }
        let delta: Vec<f64> = after[name]
            .to_f64_vec()
            .iter()
            .zip(t.to_f64_vec())
            .map(|(a, b)| a - b)
            .collect();
        let expected: Vec<f64> = fd.iter().map(|g| -lr * g).collect();
        worst = worst.max(oracle::max_rel_err(&delta, &expected));
    }
    assert!(worst < 1e-3, "step delta vs -lr*grad: {worst}");
}

/// A naive-LoRA model and its partially fused twin trained from identical
/// init and update order produce near-identical loss curves.
#[test]
fn lora_and_pf_lora_twins_track_each_other() {
    let dataset = micro_task().generate().unwrap();
    let mut lora = TransformerModel::<f64>::new(micro_cfg(Variant::Lora), 9).unwrap();
    let mut pf = TransformerModel::<f64>::new(micro_cfg(Variant::PfLora), 9).unwrap();

    let tc = TrainConfig { batch_tokens: 128, ..TrainConfig::new(0.2, 3, 21) };
    let r1 = train_adapters(&mut lora, &dataset, &tc, None).unwrap();
    let r2 = train_adapters(&mut pf, &dataset, &tc, None).unwrap();

    assert_eq!(r1.steps.len(), r2.steps.len());
    for (a, b) in r1.steps.iter().zip(&r2.steps) {
        let rel = (a.loss - b.loss).abs() / a.loss.abs().max(1e-12);
        assert!(rel < 1e-4, "step {}: {} vs {} (rel {rel})", a.step, a.loss, b.loss);
    }
}

#[test]
fn divergence_aborts_with_partial_results() {
    let dataset = micro_task().generate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_cfg(Variant::PfLora);
    let mut model = TransformerModel::<f32>::new(cfg, 3).unwrap();
    // absurd learning rate: adapter products overflow f32 within a few steps
    let tc = TrainConfig { batch_tokens: 128, ..TrainConfig::new(1e30, 4, 5) };
    let result = train_adapters(&mut model, &dataset, &tc, Some(dir.path())).unwrap();
    assert!(result.aborted.is_some(), "expected divergence abort");
    assert!(!result.steps.is_empty());
    // the loss log is still written for the completed steps
    assert!(dir.path().join("loss.csv").exists());
}

#[test]
fn evaluate_contracts() {
    let cfg = micro_cfg(Variant::PfLora);
    let model = TransformerModel::<f32>::new(cfg, 3).unwrap();

    // empty split is a contract error
    assert!(matches!(evaluate(&model, &[]), Err(Error::Contract(_))));

    // micro-averaged metrics are invariant to partitioning
    let dataset = micro_task().generate().unwrap();
    let all = evaluate(&model, &dataset.val).unwrap();
    let (lo, hi) = dataset.val.split_at(5);
    let a = evaluate(&model, lo).unwrap();
    let b = evaluate(&model, hi).unwrap();
    let merged_acc = (a.token_accuracy * answer_tokens(lo) as f64
        + b.token_accuracy * answer_tokens(hi) as f64)
        / answer_tokens(&dataset.val) as f64;
    assert!((all.token_accuracy - merged_acc).abs() < 1e-12);
}

fn answer_tokens(examples: &[Example]) -> usize {
    examples.iter().map(|e| e.answer_tokens()).sum()
}

/// An untrained model's greedy output matches a uniformly random target at
/// roughly chance level (binomial bounds around 1/vocab).
#[test]
fn untrained_accuracy_is_at_chance_level() {
    let mut cfg = ModelConfig::toy();
    cfg.adapter = AdapterSpec::new(Variant::PfLora, 8);
    let model = TransformerModel::<f32>::new(cfg, 31).unwrap();

    let mut task = SyntheticTask::new(TaskKind::ModularSum);
    task.alphabet = 253; // fills the 256-token vocab alongside the specials
    task.min_len = 4;
    task.max_len = 12;
    task.train_size = 2;
    task.val_size = 250;
    task.test_size = 2;
    task.seed = 4;
    let dataset = task.generate().unwrap();

    let m = evaluate(&model, &dataset.val).unwrap();
    let n = answer_tokens(&dataset.val) as f64;
    let p = 1.0 / 256.0;
    let bound = 3.0 * (p * (1.0 - p) / n).sqrt();
    assert!(
        (m.token_accuracy - p).abs() <= bound,
        "accuracy {} vs chance {} +- {}",
        m.token_accuracy,
        p,
        bound
    );
}

#[test]
fn memorizing_a_single_example_reaches_exact_match() {
    let ex = Example { src: vec![1, 3], target: vec![1, 3] };
    let dataset = Dataset {
        train: vec![ex.clone(); 16],
        val: vec![ex.clone()],
        test: vec![ex],
    };
    let cfg = micro_cfg(Variant::FfbaAorb);
    let mut model = TransformerModel::<f32>::new(cfg, 7).unwrap();
    let tc = TrainConfig { batch_tokens: 128, ..TrainConfig::new(0.01, 30, 3) }
        .with_optimizer(OptimizerKind::adam());
    train_adapters(&mut model, &dataset, &tc, None).unwrap();
    let m = evaluate(&model, &dataset.val).unwrap();
    assert_eq!(m.sequence_exact_match, 1.0, "metrics: {m:?}");
}

#[test]
fn sweep_selects_reproducibly_and_persists_grid() {
    let dataset = micro_task().generate().unwrap();
    let cfg = micro_cfg(Variant::PfLora);
    let tc = TrainConfig { batch_tokens: 128, ..TrainConfig::new(0.0, 2, 5) }
        .with_optimizer(OptimizerKind::adam());
    let rates = log_spaced_rates(1e-3, 1e-1, 3);

    let dir = tempfile::tempdir().unwrap();
    let a = lr_sweep::<f32>(&cfg, &dataset, &tc, &rates, Some(dir.path()), 2).unwrap();
    let b = lr_sweep::<f32>(&cfg, &dataset, &tc, &rates, None, 1).unwrap();

    assert_eq!(a.best.lr, b.best.lr);
    assert_eq!(a.best.epoch, b.best.epoch);
    assert_eq!(a.best.val.token_accuracy, b.best.val.token_accuracy);
    assert!(dir.path().join("sweep.csv").exists());
    assert!(dir.path().join("selection.json").exists());

    // per-epoch checkpoints exist for each rate
    for idx in 0..rates.len() {
        assert!(dir
            .path()
            .join(format!("lr_{idx}/checkpoints/epoch_02.ckpt"))
            .exists());
    }
}
