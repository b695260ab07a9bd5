use flora::adapters::{AdapterSpec, ExecPath, Variant};
use flora::model::{ModelConfig, TransformerModel};
use flora::tape::Tape;
use flora::train::{train_adapters, Dataset, Example, TrainConfig, OptimizerKind};

fn main() {
    // 1. sensitivity: do answer-position logits depend on src tokens?
    let cfg = ModelConfig::toy();
    let model = TransformerModel::<f64>::new(cfg, 7).unwrap();
    let mut tape = Tape::inference();
    let a = model.forward_sequence(&mut tape, &[0, 5, 6, 1, 5, 6], ExecPath::Fused).unwrap();
    let b = model.forward_sequence(&mut tape, &[0, 9, 6, 1, 5, 6], ExecPath::Fused).unwrap();
    // logits at the last column (answer region) with src[0] changed 5->9
    let mut diff = 0.0f64;
    for i in 0..a.rows() {
        diff = diff.max((a.get(i, 5) - b.get(i, 5)).abs());
    }
    println!("answer-logit sensitivity to src change: {diff:.6}");

    // 2. single-example overfit with aorb
    let ex = Example { src: vec![2, 5, 1], target: vec![2, 5, 1] };
    let ds = Dataset { train: vec![ex.clone(); 8], val: vec![ex.clone()], test: vec![ex.clone()] };
    let cfg = ModelConfig::toy().with_adapter(AdapterSpec::new(Variant::FfbaAorb, 8));
    let mut model = TransformerModel::<f32>::new(cfg, 7).unwrap();
    let tc = TrainConfig::new(0.01, 40, 3).with_optimizer(OptimizerKind::adam());
    let r = train_adapters(&mut model, &ds, &tc, None).unwrap();
    println!("single-example overfit: first {:.4} last {:.4} val_acc {:.3}",
        r.steps[0].loss, r.final_loss().unwrap(), r.epochs.last().unwrap().val.token_accuracy);
}
