//! Whole-model behavior: base preservation, augmented-path routing, KV
//! cache consistency, decoding determinism, and checkpoint round-trips.

use std::collections::BTreeMap;

use flora::adapters::{AdapterSpec, ExecPath, Nonlinearity, Variant, ALL_VARIANTS};
use flora::error::Error;
use flora::model::checkpoint;
use flora::model::{backward_adapters_per_layer, ModelConfig, TransformerModel};
use flora::tape::Tape;
use flora::tensor::Tensor;
use flora::verify::oracle;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 7;

fn toy_with(variant: Variant, rank: usize) -> ModelConfig {
    let adapter = if variant == Variant::None {
        AdapterSpec::none()
    } else {
        AdapterSpec::new(variant, rank)
    };
    ModelConfig::toy().with_adapter(adapter)
}

fn random_prompt(len: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

#[test]
fn base_preservation_across_all_variants() {
    let base = TransformerModel::<f64>::new(toy_with(Variant::None, 0), SEED).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let prompts: Vec<Vec<u32>> =
        (0..4).map(|_| random_prompt(12, 256, &mut rng)).collect();

    for variant in ALL_VARIANTS {
        if variant == Variant::None {
            continue;
        }
        let model = TransformerModel::<f64>::new(toy_with(variant, 8), SEED).unwrap();
        for prompt in &prompts {
            let mut tape = Tape::inference();
            let l_base = base.forward_sequence(&mut tape, prompt, ExecPath::Fused).unwrap();
            let l_var = model.forward_sequence(&mut tape, prompt, ExecPath::Fused).unwrap();
            let err = oracle::max_rel_err(&l_base.to_f64_vec(), &l_var.to_f64_vec());
            assert!(err < 1e-12, "variant {variant}: base deviation {err}");
        }
    }
}

#[test]
fn ffba_relu_variant_also_preserves_base() {
    let base = TransformerModel::<f64>::new(toy_with(Variant::None, 0), SEED).unwrap();
    let spec = AdapterSpec::new(Variant::FfbaAorb, 8).with_nonlinearity(Nonlinearity::Relu);
    let model =
        TransformerModel::<f64>::new(ModelConfig::toy().with_adapter(spec), SEED).unwrap();
    let prompt = [3u32, 1, 4, 1, 5, 9, 2, 6];
    let mut tape = Tape::inference();
    let a = base.forward_sequence(&mut tape, &prompt, ExecPath::Fused).unwrap();
    let b = model.forward_sequence(&mut tape, &prompt, ExecPath::Fused).unwrap();
    assert!(oracle::max_rel_err(&a.to_f64_vec(), &b.to_f64_vec()) < 1e-12);
}

/// aorb keeps B at zero init, so logits equal the base block regardless of
/// what the forward adapters hold.
#[test]
fn aorb_with_zero_b_ignores_forward_adapters() {
    let cfg = toy_with(Variant::FfbaAorb, 8);
    let model = TransformerModel::<f64>::new(cfg.clone(), SEED).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // overwrite every forward adapter with random values, keep B at zero
    let mut tensors: BTreeMap<String, Tensor<f64>> = model.all_tensors().into_iter().collect();
    for (name, t) in tensors.iter_mut() {
        if name.ends_with("adapter_a") {
            *t = Tensor::from_fn(t.rows(), t.cols(), |_, _| rng.random_range(-0.5..0.5));
        }
    }
    let modified = TransformerModel::from_tensors(cfg, tensors).unwrap();

    let base = TransformerModel::<f64>::new(toy_with(Variant::None, 0), SEED).unwrap();
    let prompt = [10u32, 20, 30, 40];
    let mut tape = Tape::inference();
    let a = base.forward_sequence(&mut tape, &prompt, ExecPath::Fused).unwrap();
    let b = modified.forward_sequence(&mut tape, &prompt, ExecPath::Fused).unwrap();
    assert!(oracle::max_rel_err(&a.to_f64_vec(), &b.to_f64_vec()) < 1e-12);
}

/// QG-Add self-adds touch only the query and gate paths: with B zero, the
/// key/value/up forward adapters cannot reach the output at all, while a
/// query adapter can.
#[test]
fn qg_add_touches_only_query_and_gate_paths() {
    let cfg = toy_with(Variant::FfbaQgAdd, 8);
    let reference = TransformerModel::<f64>::new(cfg.clone(), SEED).unwrap();
    let prompt = [1u32, 2, 3, 4, 5];
    let mut tape = Tape::inference();
    let logits_ref = reference
        .forward_sequence(&mut tape, &prompt, ExecPath::Fused)
        .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // randomize adapters on k/v/up (not in the add set): logits unchanged
    let mut tensors: BTreeMap<String, Tensor<f64>> =
        reference.all_tensors().into_iter().collect();
    for (name, t) in tensors.iter_mut() {
        let is_non_add_a = name.ends_with("adapter_a")
            && (name.contains(".k.") || name.contains(".v.") || name.contains(".up."));
        if is_non_add_a {
            *t = Tensor::from_fn(t.rows(), t.cols(), |_, _| rng.random_range(-0.5..0.5));
        }
    }
    let modified = TransformerModel::from_tensors(cfg.clone(), tensors).unwrap();
    let logits_mod = modified
        .forward_sequence(&mut tape, &prompt, ExecPath::Fused)
        .unwrap();
    assert!(logits_ref.bits_eq(&logits_mod), "k/v/up adapters must be inert when B = 0");

    // randomize the query adapter: logits must move
    let mut tensors: BTreeMap<String, Tensor<f64>> =
        reference.all_tensors().into_iter().collect();
    for (name, t) in tensors.iter_mut() {
        if name.ends_with("adapter_a") && name.contains(".q.") {
            *t = Tensor::from_fn(t.rows(), t.cols(), |_, _| rng.random_range(-0.5..0.5));
        }
    }
    let modified = TransformerModel::from_tensors(cfg, tensors).unwrap();
    let logits_mod = modified
        .forward_sequence(&mut tape, &prompt, ExecPath::Fused)
        .unwrap();
    let err = oracle::max_rel_err(&logits_ref.to_f64_vec(), &logits_mod.to_f64_vec());
    assert!(err > 1e-9, "query self-add must affect attention, err {err}");
}

#[test]
fn shared_backward_adapter_count_is_two_per_layer() {
    for variant in [Variant::FfbaAb, Variant::FfbaAorb, Variant::FfbaQgAdd, Variant::Fpa] {
        let model = TransformerModel::<f64>::new(toy_with(variant, 8), SEED).unwrap();
        assert_eq!(backward_adapters_per_layer(&model), vec![2, 2], "variant {variant}");
    }
}

/// Block-level fused vs explicitly unfused adapter math, per spec dims
/// (d_model=8, heads=2, r=2).
#[test]
fn block_level_fused_matches_unfused_route() {
    for variant in ALL_VARIANTS {
        if variant == Variant::None {
            continue;
        }
        // ffa stores rank 2r, which must stay low-rank against kv_dim = 4
        let rank = if variant == Variant::Ffa { 1 } else { 2 };
        let cfg = ModelConfig::micro().with_adapter(AdapterSpec::new(variant, rank));
        let model = TransformerModel::<f64>::new(cfg.clone(), SEED).unwrap();

        // make all partitions nonzero so the comparison has teeth
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tensors: BTreeMap<String, Tensor<f64>> = model.all_tensors().into_iter().collect();
        for (name, t) in tensors.iter_mut() {
            if name.contains("adapter_") {
                *t = Tensor::from_fn(t.rows(), t.cols(), |_, _| rng.random_range(-0.4..0.4));
            }
        }
        let model = TransformerModel::from_tensors(cfg.clone(), tensors).unwrap();

        let h = Tensor::from_fn(cfg.d_model, 3, |i, j| ((i * 3 + j) as f64 * 0.17).sin());
        let mut tape = Tape::inference();
        let fused_mha = model.mha_forward(&mut tape, 0, &h, None, ExecPath::Fused).unwrap();
        let unfused_mha = model.mha_forward(&mut tape, 0, &h, None, ExecPath::Unfused).unwrap();
        let err = oracle::max_rel_err(&fused_mha.to_f64_vec(), &unfused_mha.to_f64_vec());
        assert!(err < 1e-12, "{variant} mha fused-vs-unfused {err}");

        let fused_ffn = model.ffn_forward(&mut tape, 0, &h, ExecPath::Fused).unwrap();
        let unfused_ffn = model.ffn_forward(&mut tape, 0, &h, ExecPath::Unfused).unwrap();
        let err = oracle::max_rel_err(&fused_ffn.to_f64_vec(), &unfused_ffn.to_f64_vec());
        assert!(err < 1e-12, "{variant} ffn fused-vs-unfused {err}");
    }
}

/// A ReLU bottleneck kills an all-negative augmented sum: the fused output
/// then equals the base output even with a nonzero backward adapter.
#[test]
fn relu_bottleneck_kills_negative_delta() {
    let spec = AdapterSpec::new(Variant::FfbaAorb, 2).with_nonlinearity(Nonlinearity::Relu);
    let cfg = ModelConfig::micro().with_adapter(spec);
    let model = TransformerModel::<f64>::new(cfg.clone(), SEED).unwrap();

    let mut tensors: BTreeMap<String, Tensor<f64>> = model.all_tensors().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (name, t) in tensors.iter_mut() {
        if name.ends_with("adapter_b") {
            *t = Tensor::from_fn(t.rows(), t.cols(), |_, _| rng.random_range(-0.5..0.5));
        }
        // gate/up forward adapters: strictly negative first column
        if name.ends_with("adapter_a") && (name.contains(".gate.") || name.contains(".up.")) {
            *t = Tensor::from_fn(t.rows(), t.cols(), |_, j| if j == 0 { -1.0 } else { 0.0 });
        }
    }
    let model = TransformerModel::from_tensors(cfg.clone(), tensors.clone()).unwrap();

    // h = e1: the delta sum is the (all-negative) first column, relu -> 0
    let h = Tensor::from_fn(cfg.d_model, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
    let mut tape = Tape::inference();
    let with_adapters = model.ffn_forward(&mut tape, 0, &h, ExecPath::Fused).unwrap();

    for (name, t) in tensors.iter_mut() {
        if name.ends_with("adapter_b") {
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }
    let zeroed = TransformerModel::from_tensors(cfg, tensors).unwrap();
    let base_out = zeroed.ffn_forward(&mut tape, 0, &h, ExecPath::Fused).unwrap();
    assert!(with_adapters.bits_eq(&base_out), "relu must zero the adapter contribution");
}

#[test]
fn kv_cached_decode_matches_full_recompute() {
    for variant in [Variant::Lora, Variant::PfLora, Variant::Ffa, Variant::FfbaQgAdd] {
        let cfg = toy_with(variant, 8);
        // nonzero adapters so the cache carries adapter effects
        let model = nonzero_adapters(TransformerModel::<f64>::new(cfg.clone(), SEED).unwrap(), &cfg);

        let prompt = [5u32, 6, 7];
        let continuation = [8u32, 9];
        let mut tape = Tape::inference();
        let mut cache = model.new_cache();
        let mut cached_logits = vec![model.prefill(&mut tape, &prompt, &mut cache).unwrap()];
        for &tok in &continuation {
            cached_logits.push(model.decode_step(&mut tape, tok, &mut cache).unwrap());
        }

        // full recompute of each prefix
        let mut stream = prompt.to_vec();
        for (step, cached) in cached_logits.iter().enumerate() {
            if step > 0 {
                stream.push(continuation[step - 1]);
            }
            let full = model
                .forward_sequence(&mut tape, &stream, ExecPath::Fused)
                .unwrap();
            let last = Tensor::<f64>::from_fn(full.rows(), 1, |i, _| full.get(i, full.cols() - 1));
            let err = oracle::max_rel_err(&cached.to_f64_vec(), &last.to_f64_vec());
            assert!(err < 1e-12, "{variant} step {step}: cached vs recompute {err}");
        }
    }

    // and at f32 the spec tolerance is 1e-5
    let cfg = toy_with(Variant::PfLora, 8);
    let model = TransformerModel::<f32>::new(cfg, SEED).unwrap();
    let mut tape = Tape::inference();
    let mut cache = model.new_cache();
    let prompt = [1u32, 2, 3, 4];
    let cached = model.prefill(&mut tape, &prompt, &mut cache).unwrap();
    let full = model.forward_sequence(&mut tape, &prompt, ExecPath::Fused).unwrap();
    let last = Tensor::<f32>::from_fn(full.rows(), 1, |i, _| full.get(i, full.cols() - 1));
    let err = oracle::max_rel_err(&cached.to_f64_vec(), &last.to_f64_vec());
    assert!(err < 1e-5, "f32 cached vs recompute {err}");
}

fn nonzero_adapters(model: TransformerModel<f64>, cfg: &ModelConfig) -> TransformerModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut tensors: BTreeMap<String, Tensor<f64>> = model.all_tensors().into_iter().collect();
    for (name, t) in tensors.iter_mut() {
        if name.contains("adapter_") {
            *t = Tensor::from_fn(t.rows(), t.cols(), |_, _| rng.random_range(-0.2..0.2));
        }
    }
    TransformerModel::from_tensors(cfg.clone(), tensors).unwrap()
}

#[test]
fn greedy_decode_is_deterministic_and_base_preserving() {
    let cfg = toy_with(Variant::FfbaAorb, 8);
    let model = TransformerModel::<f32>::new(cfg, SEED).unwrap();
    let base = TransformerModel::<f32>::new(toy_with(Variant::None, 0), SEED).unwrap();

    let prompt = [9u32, 8, 7, 6];
    let out1 = model.generate(&prompt, 16).unwrap();
    let out2 = model.generate(&prompt, 16).unwrap();
    assert_eq!(out1, out2, "same seed/weights/prompt must decode identically");

    let base_out = base.generate(&prompt, 16).unwrap();
    assert_eq!(out1, base_out, "zero-initialized adapters must decode like the base model");
}

#[test]
fn cache_overflow_is_a_capacity_error() {
    let mut cfg = toy_with(Variant::None, 0);
    cfg.max_seq_len = 4;
    let model = TransformerModel::<f32>::new(cfg, SEED).unwrap();
    let mut tape = Tape::inference();
    let mut cache = model.new_cache();
    model.prefill(&mut tape, &[1, 2, 3], &mut cache).unwrap();
    model.decode_step(&mut tape, 4, &mut cache).unwrap();
    match model.decode_step(&mut tape, 5, &mut cache) {
        Err(Error::Capacity(_)) => {}
        other => panic!("expected capacity error, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = toy_with(Variant::FfbaAb, 8);
    let model = TransformerModel::<f32>::new(cfg.clone(), SEED).unwrap();
    let bytes = checkpoint::checkpoint_bytes(&model).unwrap();
    let parsed = checkpoint::parse_checkpoint(&bytes).unwrap();
    assert_eq!(parsed.config, cfg);
    let tensors = parsed.into_tensors::<f32>().unwrap();
    let reloaded = TransformerModel::from_tensors(cfg, tensors).unwrap();

    for ((n1, t1), (n2, t2)) in model.all_tensors().iter().zip(reloaded.all_tensors().iter()) {
        assert_eq!(n1, n2);
        assert!(t1.bits_eq(t2), "tensor {n1} changed across round trip");
        assert_eq!(t1.requires_grad(), t2.requires_grad(), "trainability of {n1}");
    }
    assert_eq!(model.frozen_hash(), reloaded.frozen_hash());

    // serialization itself is deterministic
    let bytes2 = checkpoint::checkpoint_bytes(&model).unwrap();
    assert_eq!(bytes, bytes2);
}

#[test]
fn checkpoint_rejects_malformed_input() {
    let model = TransformerModel::<f32>::new(toy_with(Variant::Lora, 4), SEED).unwrap();
    let bytes = checkpoint::checkpoint_bytes(&model).unwrap();

    assert!(checkpoint::parse_checkpoint(&[]).is_err());
    assert!(checkpoint::parse_checkpoint(&bytes[..8]).is_err());

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(checkpoint::parse_checkpoint(&bad_magic).is_err());

    let mut truncated = bytes.clone();
    truncated.truncate(bytes.len() - 100);
    assert!(checkpoint::parse_checkpoint(&truncated).is_err());

    // wrong precision request
    let parsed = checkpoint::parse_checkpoint(&bytes).unwrap();
    match parsed.into_tensors::<f64>() {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("precision")),
        other => panic!("expected checkpoint error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn same_seed_reproduces_the_model_bitwise() {
    let cfg = toy_with(Variant::FfbaQgAdd, 8);
    let a = TransformerModel::<f64>::new(cfg.clone(), 42).unwrap();
    let b = TransformerModel::<f64>::new(cfg.clone(), 42).unwrap();
    for ((_, t1), (_, t2)) in a.all_tensors().iter().zip(b.all_tensors().iter()) {
        assert!(t1.bits_eq(t2));
    }
    let c = TransformerModel::<f64>::new(cfg, 43).unwrap();
    let differs = a
        .all_tensors()
        .iter()
        .zip(c.all_tensors().iter())
        .any(|((_, t1), (_, t2))| !t1.bits_eq(t2));
    assert!(differs, "different seeds must differ");
}
