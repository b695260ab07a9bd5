use flora::adapters::{AdapterSpec, Variant};
use flora::model::{ModelConfig, TransformerModel};
use flora::train::{evaluate, train_adapters, OptimizerKind, SyntheticTask, TaskKind, TrainConfig};
use std::time::Instant;

fn main() {
    // args: lr epochs train_size rank layers alphabet maxlen batch [sgd|adam]
    let a: Vec<String> = std::env::args().collect();
    let lr: f64 = a.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.003);
    let epochs: usize = a.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let train_size: usize = a.get(3).map(|s| s.parse().unwrap()).unwrap_or(1500);
    let rank: usize = a.get(4).map(|s| s.parse().unwrap()).unwrap_or(16);
    let layers: usize = a.get(5).map(|s| s.parse().unwrap()).unwrap_or(4);
    let alphabet: usize = a.get(6).map(|s| s.parse().unwrap()).unwrap_or(8);
    let maxlen: usize = a.get(7).map(|s| s.parse().unwrap()).unwrap_or(5);
    let batch: usize = a.get(8).map(|s| s.parse().unwrap()).unwrap_or(1024);
    let opt = a.get(9).map(|s| s.to_string()).unwrap_or("adam".into());
    let d_ff: usize = a.get(10).map(|s| s.parse().unwrap()).unwrap_or(256);
    let vocab: usize = a.get(11).map(|s| s.parse().unwrap()).unwrap_or(256);

    let mut task = SyntheticTask::new(TaskKind::Copy);
    task.alphabet = alphabet;
    task.min_len = 2;
    task.max_len = maxlen;
    task.train_size = train_size;
    let dataset = task.generate().unwrap();

    let mut cfg = ModelConfig::toy().with_adapter(AdapterSpec::new(Variant::FfbaAorb, rank));
    cfg.n_layers = layers;
    cfg.d_ff = d_ff;
    cfg.vocab_size = vocab;
    let mut model = TransformerModel::<f32>::new(cfg, 7).unwrap();
    let mut tc = TrainConfig::new(lr, epochs, 13);
    tc.batch_tokens = batch;
    if opt == "adam" { tc = tc.with_optimizer(OptimizerKind::adam()); }

    let t0 = Instant::now();
    let result = train_adapters(&mut model, &dataset, &tc, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let steps = result.steps.len();
    println!("lr={lr} ep={epochs} n={train_size} r={rank} L={layers} A={alphabet} len2-{maxlen} bt={batch} {opt} | {steps} steps {dt:.0}s");
    if let Some(ab) = &result.aborted { println!("  ABORTED: {ab}"); }
    for e in result.epochs.iter().filter(|e| e.epoch % 2 == 0 || e.epoch == 1) {
        println!("  ep{:2} loss {:.3} val_acc {:.3}", e.epoch, e.train_loss, e.val.token_accuracy);
    }
    let test = evaluate(&model, &dataset.test).unwrap();
    println!("  TEST acc {:.4} exact {:.4}", test.token_accuracy, test.sequence_exact_match);
}
