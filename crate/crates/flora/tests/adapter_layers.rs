//! Per-layer forward rules: hand-computed cases, fused-vs-unfused
//! reference comparisons, weight assembly round-trips, op-ledger counts,
//! and gradient routing.

use flora::adapters::{
    assemble_fused_weight, disassemble_fused_weight, AdapterSpec, ExecPath, FusedLinearLayer,
    LayerKind, LayerOut, Proj, Role, Variant,
};
use flora::error::Error;
use flora::tape::Tape;
use flora::tensor::Tensor;
use flora::verify::oracle;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

fn set_parts(
    layer: &mut FusedLinearLayer<f64>,
    a: Option<Tensor<f64>>,
    b: Option<Tensor<f64>>,
    c: Option<Tensor<f64>>,
) {
    if let Some(a) = a {
        layer.set_partition("adapter_a", a).unwrap();
    }
    if let Some(b) = b {
        layer.set_partition("adapter_b", b).unwrap();
    }
    if let Some(c) = c {
        layer.set_partition("adapter_c", c).unwrap();
    }
    layer.rebuild_fused();
}

fn eye(n: usize) -> Tensor<f64> {
    Tensor::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
}

#[test]
fn lora_naive_hand_computation() {
    let mut r = rng(1);
    let mut layer = FusedLinearLayer::lora(Proj::Query, eye(2), 1, true, &mut r).unwrap();
    set_parts(
        &mut layer,
        Some(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()),
        Some(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap()),
        None,
    );
    let x = Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
    let mut tape = Tape::inference();
    let z = layer.forward(&mut tape, &x, None, ExecPath::Fused).unwrap().plain();
    assert_eq!(z.data(), &[7.0, 8.0]);

    // same weights through the partially fused rule
    let mut pf = FusedLinearLayer::lora(Proj::Query, eye(2), 1, false, &mut r).unwrap();
    set_parts(
        &mut pf,
        Some(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()),
        Some(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap()),
        None,
    );
    let z = pf.forward(&mut tape, &x, None, ExecPath::Fused).unwrap().plain();
    assert_eq!(z.data(), &[7.0, 8.0]);
}

#[test]
fn zero_backward_adapter_preserves_base() {
    // B starts at zero by construction: output bitwise equals Wx
    let mut r = rng(2);
    let w = random_tensor(6, 5, &mut r);
    let x = random_tensor(5, 4, &mut r);
    let mut tape = Tape::inference();
    let wx = tape.matmul(&w, &x).unwrap();

    for naive in [true, false] {
        let layer = FusedLinearLayer::lora(Proj::Query, w.clone(), 2, naive, &mut r).unwrap();
        let z = layer.forward(&mut tape, &x, None, ExecPath::Fused).unwrap().plain();
        assert!(z.bits_eq(&wx), "naive={naive}");
    }

    // ffa zero-initializes A itself
    let w8 = random_tensor(8, 5, &mut r);
    let wx8 = tape.matmul(&w8, &x).unwrap();
    let ffa = FusedLinearLayer::ffa(Proj::Query, w8, 2).unwrap();
    let z = ffa.forward(&mut tape, &x, None, ExecPath::Fused).unwrap().plain();
    assert!(z.bits_eq(&wx8));
}

#[test]
fn pf_lora_zero_forward_adapter_ignores_b() {
    let mut r = rng(3);
    let w = random_tensor(4, 3, &mut r);
    let x = random_tensor(3, 2, &mut r);
    let mut layer = FusedLinearLayer::lora(Proj::Query, w.clone(), 2, false, &mut r).unwrap();
    set_parts(
        &mut layer,
        Some(Tensor::zeros(2, 3)),
        Some(random_tensor(4, 2, &mut r)),
        None,
    );
    let mut tape = Tape::inference();
    let z = layer.forward(&mut tape, &x, None, ExecPath::Fused).unwrap().plain();
    let wx = tape.matmul(&w, &x).unwrap();
    let err = oracle::max_rel_err(&z.to_f64_vec(), &wx.to_f64_vec());
    assert!(err < 1e-15);
}

#[test]
fn pf_lora_matches_naive_on_spec_dims() {
    // d_i=16, d_o=12, r=4, L=3
    let mut r = rng(4);
    let w = random_tensor(12, 16, &mut r);
    let a = random_tensor(4, 16, &mut r);
    let b = random_tensor(12, 4, &mut r);
    let x = random_tensor(16, 3, &mut r);

    let mut naive = FusedLinearLayer::lora(Proj::Query, w.clone(), 4, true, &mut r).unwrap();
    set_parts(&mut naive, Some(a.clone()), Some(b.clone()), None);
    let mut pf = FusedLinearLayer::lora(Proj::Query, w, 4, false, &mut r).unwrap();
    set_parts(&mut pf, Some(a), Some(b), None);

    let mut tape = Tape::inference();
    let zn = naive.forward(&mut tape, &x, None, ExecPath::Fused).unwrap().plain();
    let zp = pf.forward(&mut tape, &x, None, ExecPath::Fused).unwrap().plain();
    let err = oracle::max_rel_err(&zn.to_f64_vec(), &zp.to_f64_vec());
    assert!(err < 1e-10, "pf vs naive error {err}");
}

#[test]
fn pf_lora_vs_naive_thousand_randomized_trials() {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d_i = r.random_range(2..=16);
        let d_o = r.random_range(2..=16);
        let rank = r.random_range(1..d_i.min(d_o));
        let l = r.random_range(1..=4);
        let w = random_tensor(d_o, d_i, &mut r);
        let a = random_tensor(rank, d_i, &mut r);
        let b = random_tensor(d_o, rank, &mut r);
        let x = random_tensor(d_i, l, &mut r);

        let mut naive = FusedLinearLayer::lora(Proj::Query, w.clone(), rank, true, &mut r).unwrap();
        set_parts(&mut naive, Some(a.clone()), Some(b.clone()), None);
        let mut pf = FusedLinearLayer::lora(Proj::Query, w, rank, false, &mut r).unwrap();
        set_parts(&mut pf, Some(a), Some(b), None);

        let mut tape = Tape::inference();
        let zn = naive.forward(&mut tape, &x, None, ExecPath::Fused).unwrap().plain();
        let zp = pf.forward(&mut tape, &x, None, ExecPath::Fused).unwrap().plain();
        worst = worst.max(oracle::max_rel_err(&zn.to_f64_vec(), &zp.to_f64_vec()));
    }
    assert!(worst < 1e-12, "max pf-vs-naive deviation {worst}");
}

#[test]
fn ffa_pure_tiling_case() {
    // d_o=4, 2r=2, W=0, A=I2: x=[[1],[2]] -> [[1],[2],[1],[2]]
    let mut layer = FusedLinearLayer::ffa(Proj::Query, Tensor::zeros(4, 2), 1).unwrap();
    set_parts(&mut layer, Some(eye(2)), None, None);
    let x = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
    let mut tape = Tape::inference();
    let z = layer.forward(&mut tape, &x, None, ExecPath::Fused).unwrap().plain();
    assert_eq!(z.data(), &[1.0, 2.0, 1.0, 2.0]);
}

#[test]
fn ffa_matches_unfused_reference() {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let rank = r.random_range(1..=3);
        let d_i = r.random_range(2 * rank + 1..=16);
        let f = r.random_range(1..=4);
        let d_o = 2 * rank * f;
        if d_o <= rank {
            continue;
        }
        let l = r.random_range(1..=3);
        let w = random_tensor(d_o, d_i, &mut r);
        let a = random_tensor(2 * rank, d_i, &mut r);
        let x = random_tensor(d_i, l, &mut r);

        let mut layer = FusedLinearLayer::ffa(Proj::Query, w.clone(), rank).unwrap();
        set_parts(&mut layer, Some(a.clone()), None, None);
        let mut tape = Tape::inference();
        let z = layer.forward(&mut tape, &x, None, ExecPath::Fused).unwrap().plain();

        let reference = oracle::ffa_ref(
            &w.to_f64_vec(),
            d_o,
            d_i,
            &a.to_f64_vec(),
            2 * rank,
            &x.to_f64_vec(),
            l,
        );
        worst = worst.max(oracle::max_rel_err(&z.to_f64_vec(), &reference));
    }
    assert!(worst < 1e-12, "ffa vs unfused reference {worst}");
}

#[test]
fn ffa_divisibility_violation_fails_early() {
    // d_o=6 not divisible by 2r=4
    match FusedLinearLayer::<f64>::ffa(Proj::Query, Tensor::zeros(6, 8), 2) {
        Err(Error::Precondition(_)) => {}
        Err(e) => panic!("expected precondition error, got {e}"),
        Ok(_) => panic!("construction should fail"),
    }
}

#[test]
fn ffbl_hand_computation() {
    // W=I2, B=[[1],[1]], A=[[1,0]], C=[[2]], x=[[1],[2]], dx=[[3]]
    // -> y=[[4],[5]], dy=[[7]]
    let mut r = rng(7);
    let mut layer =
        FusedLinearLayer::ffbl(Proj::Output, eye(2), 1, false, true, &mut r).unwrap();
    set_parts(
        &mut layer,
        Some(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()),
        Some(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap()),
        Some(Tensor::from_rows(&[vec![2.0]]).unwrap()),
    );
    let x = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
    let dx = Tensor::from_rows(&[vec![3.0]]).unwrap();
    let mut tape = Tape::inference();
    let (y, dy) = layer
        .forward(&mut tape, &x, Some(&dx), ExecPath::Fused)
        .unwrap()
        .augmented();
    assert_eq!(y.data(), &[4.0, 5.0]);
    assert_eq!(dy.data(), &[7.0]);
}

#[test]
fn ffbl_zero_inputs_preserve_base() {
    let mut r = rng(8);
    let w = random_tensor(4, 3, &mut r);
    let x = random_tensor(3, 2, &mut r);
    let mut layer = FusedLinearLayer::ffbl(Proj::Output, w.clone(), 2, false, false, &mut r).unwrap();
    set_parts(&mut layer, Some(Tensor::zeros(2, 3)), None, None);
    let dx = Tensor::zeros(2, 2);
    let mut tape = Tape::inference();
    let (y, dy) = layer
        .forward(&mut tape, &x, Some(&dx), ExecPath::Fused)
        .unwrap()
        .augmented();
    let wx = tape.matmul(&w, &x).unwrap();
    assert!(oracle::max_rel_err(&y.to_f64_vec(), &wx.to_f64_vec()) < 1e-15);
    assert!(dy.data().iter().all(|&v| v == 0.0));
}

#[test]
fn ffbl_fused_block_matches_four_products() {
    let mut r = rng(9);
    let mut worst = 0.0f64;
    for with_c in [false, true] {
        for _ in 0..100 {
            let rank = r.random_range(1..=3);
            let d_i = r.random_range(rank + 1..=12);
            let d_o = r.random_range(rank + 1..=12);
            let l = r.random_range(1..=3);
            let w = random_tensor(d_o, d_i, &mut r);
            let a = random_tensor(rank, d_i, &mut r);
            let b = random_tensor(d_o, rank, &mut r);
            let c = with_c.then(|| random_tensor(rank, rank, &mut r));
            let x = random_tensor(d_i, l, &mut r);
            let dx = random_tensor(rank, l, &mut r);

            let mut layer =
                FusedLinearLayer::ffbl(Proj::Output, w.clone(), rank, false, with_c, &mut r)
                    .unwrap();
            set_parts(&mut layer, Some(a.clone()), Some(b.clone()), c.clone());
            let mut tape = Tape::inference();
            let (y, dy) = layer
                .forward(&mut tape, &x, Some(&dx), ExecPath::Fused)
                .unwrap()
                .augmented();

            let (y_ref, dy_ref) = oracle::ffbl_ref(
                &w.to_f64_vec(),
                d_o,
                d_i,
                &a.to_f64_vec(),
                rank,
                &b.to_f64_vec(),
                c.as_ref().map(|c| c.to_f64_vec()).as_deref(),
                &x.to_f64_vec(),
                &dx.to_f64_vec(),
                l,
            );
            worst = worst.max(oracle::max_rel_err(&y.to_f64_vec(), &y_ref));
            worst = worst.max(oracle::max_rel_err(&dy.to_f64_vec(), &dy_ref));
        }
    }
    assert!(worst < 1e-12, "ffbl vs four products {worst}");
}

#[test]
fn fbl_cases() {
    let mut r = rng(10);
    let w = random_tensor(4, 3, &mut r);
    let x = random_tensor(3, 2, &mut r);
    let layer = FusedLinearLayer::fbl(Proj::Output, w.clone(), 2).unwrap();
    let mut tape = Tape::inference();

    // zero augmented input -> Wx
    let z = layer
        .forward(&mut tape, &x, Some(&Tensor::zeros(2, 2)), ExecPath::Fused)
        .unwrap()
        .plain();
    let wx = tape.matmul(&w, &x).unwrap();
    assert!(oracle::max_rel_err(&z.to_f64_vec(), &wx.to_f64_vec()) < 1e-15);

    // W zero and a unit column in B selects dx rows
    let mut unit = FusedLinearLayer::fbl(Proj::Output, Tensor::zeros(2, 2), 1).unwrap();
    set_parts(&mut unit, None, Some(Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap()), None);
    let dx = Tensor::from_rows(&[vec![5.0]]).unwrap();
    let x2 = Tensor::zeros(2, 1);
    let z = unit
        .forward(&mut tape, &x2, Some(&dx), ExecPath::Fused)
        .unwrap()
        .plain();
    assert_eq!(z.data(), &[5.0, 0.0]);

    // randomized vs separate Wx + B dx
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let rank = r.random_range(1..=3);
        let d_i = r.random_range(rank + 1..=12);
        let d_o = r.random_range(rank + 1..=12);
        let l = r.random_range(1..=3);
        let w = random_tensor(d_o, d_i, &mut r);
        let b = random_tensor(d_o, rank, &mut r);
        let x = random_tensor(d_i, l, &mut r);
        let dx = random_tensor(rank, l, &mut r);
        let mut layer = FusedLinearLayer::fbl(Proj::Output, w.clone(), rank).unwrap();
        set_parts(&mut layer, None, Some(b.clone()), None);
        let z = layer
            .forward(&mut tape, &x, Some(&dx), ExecPath::Fused)
            .unwrap()
            .plain();
        let reference = oracle::fbl_ref(
            &w.to_f64_vec(),
            d_o,
            d_i,
            &b.to_f64_vec(),
            rank,
            &x.to_f64_vec(),
            &dx.to_f64_vec(),
            l,
        );
        worst = worst.max(oracle::max_rel_err(&z.to_f64_vec(), &reference));
    }
    assert!(worst < 1e-12, "fbl vs separate products {worst}");
}

#[test]
fn assembly_shapes_and_round_trip() {
    let mut r = rng(11);

    // ffl with d_o=2, d_i=2, r=1 assembles to 3x2
    let ffl = FusedLinearLayer::ffl(Proj::Query, random_tensor(2, 2, &mut r), 1, false, &mut r)
        .unwrap();
    let fused = assemble_fused_weight(&ffl).unwrap();
    assert_eq!(fused.shape(), (3, 2));

    // plain assembles to W itself
    let plain = FusedLinearLayer::plain(Proj::Query, random_tensor(3, 4, &mut r));
    assert!(assemble_fused_weight(&plain).unwrap().bits_eq(plain.weight()));

    // ffbl round-trip is bit exact
    let mut ffbl =
        FusedLinearLayer::ffbl(Proj::Output, random_tensor(5, 4, &mut r), 2, false, true, &mut r)
            .unwrap();
    set_parts(
        &mut ffbl,
        Some(random_tensor(2, 4, &mut r)),
        Some(random_tensor(5, 2, &mut r)),
        Some(random_tensor(2, 2, &mut r)),
    );
    let fused = assemble_fused_weight(&ffbl).unwrap();
    assert_eq!(fused.shape(), (7, 6));
    let parts = disassemble_fused_weight(&fused, Role::Ffbl, 5, 4, 2).unwrap();
    assert!(parts.w.bits_eq(ffbl.weight()));
    assert!(parts.a.unwrap().bits_eq(ffbl.adapter_a().unwrap()));
    assert!(parts.b.unwrap().bits_eq(ffbl.adapter_b().unwrap()));
    assert!(parts.c.unwrap().bits_eq(ffbl.adapter_c().unwrap()));

    // fbl assembles to d_o x (d_i + r)
    let fbl = FusedLinearLayer::fbl(Proj::Down, random_tensor(4, 6, &mut r), 2).unwrap();
    assert_eq!(assemble_fused_weight(&fbl).unwrap().shape(), (4, 8));
}

#[test]
fn equivalence_chain_with_merged_weights() {
    // naive == pf == plain forward with W' = W + BA, up to d=64
    let mut r = rng(12);
    for d in [8usize, 32, 64] {
        let rank = 4;
        let w = random_tensor(d, d, &mut r);
        let a = random_tensor(rank, d, &mut r);
        let b = random_tensor(d, rank, &mut r);
        let x = random_tensor(d, 3, &mut r);

        let mut naive = FusedLinearLayer::lora(Proj::Query, w.clone(), rank, true, &mut r).unwrap();
        set_parts(&mut naive, Some(a.clone()), Some(b.clone()), None);
        let mut pf = FusedLinearLayer::lora(Proj::Query, w.clone(), rank, false, &mut r).unwrap();
        set_parts(&mut pf, Some(a.clone()), Some(b.clone()), None);

        let ba = oracle::matmul_ref(&b.to_f64_vec(), d, rank, &a.to_f64_vec(), d);
        let merged_w = Tensor::from_vec(d, d, oracle::add_ref(&w.to_f64_vec(), &ba)).unwrap();
        let merged = FusedLinearLayer::plain(Proj::Query, merged_w);

        let mut tape = Tape::inference();
        let zn = naive.forward(&mut tape, &x, None, ExecPath::Fused).unwrap().plain();
        let zp = pf.forward(&mut tape, &x, None, ExecPath::Fused).unwrap().plain();
        let zm = merged.forward(&mut tape, &x, None, ExecPath::Fused).unwrap().plain();

        assert!(oracle::max_rel_err(&zn.to_f64_vec(), &zp.to_f64_vec()) < 1e-12);
        assert!(oracle::max_rel_err(&zn.to_f64_vec(), &zm.to_f64_vec()) < 1e-12);
    }
}

#[test]
fn op_ledger_counts_per_layer_kind() {
    let mut r = rng(13);
    let x = random_tensor(8, 1, &mut r);
    let dx = random_tensor(2, 1, &mut r);

    // naive LoRA: 4 sequential ops, 3 adapter-attributed
    let layer = FusedLinearLayer::lora(Proj::Query, random_tensor(8, 8, &mut r), 2, true, &mut r)
        .unwrap();
    let mut tape = Tape::inference();
    layer.forward(&mut tape, &x, None, ExecPath::Fused).unwrap();
    let c = tape.take_counter();
    assert_eq!(c.total_all(), 4);
    assert_eq!(c.base.plain_matmul, 1);
    assert_eq!(c.adapter.small_matmul, 2);
    assert_eq!(c.adapter.add, 1);
    assert_eq!(c.adapter_by_site["query"].total(), 3);

    // pf-LoRA: 3 sequential ops, 2 beyond the fused matmul
    let layer = FusedLinearLayer::lora(Proj::Query, random_tensor(8, 8, &mut r), 2, false, &mut r)
        .unwrap();
    layer.forward(&mut tape, &x, None, ExecPath::Fused).unwrap();
    let c = tape.take_counter();
    assert_eq!(c.total_all(), 3);
    assert_eq!(c.base.fused_matmul, 1);
    assert_eq!(c.adapter_by_site["query"].total(), 2);

    // FFA: 2 sequential ops, 1 adapter-attributed repeat_add
    let layer = FusedLinearLayer::ffa(Proj::Query, random_tensor(8, 8, &mut r), 2).unwrap();
    layer.forward(&mut tape, &x, None, ExecPath::Fused).unwrap();
    let c = tape.take_counter();
    assert_eq!(c.total_all(), 2);
    assert_eq!(c.base.fused_matmul, 1);
    assert_eq!(c.adapter.repeat_add, 1);

    // FBL: 1 fused matmul plus 1 concat memory op, 0 other adapter ops
    let layer = FusedLinearLayer::fbl(Proj::Output, random_tensor(8, 8, &mut r), 2).unwrap();
    layer.forward(&mut tape, &x, Some(&dx), ExecPath::Fused).unwrap();
    let c = tape.take_counter();
    assert_eq!(c.base.fused_matmul, 1);
    assert_eq!(c.adapter.concat, 1);
    assert_eq!(c.total_all(), 2);

    // FFBL with shrink: concat + fused matmul + repeat_add
    let layer =
        FusedLinearLayer::ffbl(Proj::Output, random_tensor(8, 8, &mut r), 2, true, false, &mut r)
            .unwrap();
    layer.forward(&mut tape, &x, Some(&dx), ExecPath::Fused).unwrap();
    let c = tape.take_counter();
    assert_eq!(c.base.fused_matmul, 1);
    assert_eq!(c.adapter.concat, 1);
    assert_eq!(c.adapter.repeat_add, 1);
    assert_eq!(c.total_all(), 3);
}

#[test]
fn gradients_flow_only_into_adapter_partitions() {
    let mut r = rng(14);
    let x = random_tensor(6, 2, &mut r);
    let mut layer =
        FusedLinearLayer::lora(Proj::Query, random_tensor(4, 6, &mut r), 2, false, &mut r).unwrap();
    set_parts(&mut layer, None, Some(random_tensor(4, 2, &mut r)), None);

    let mut tape = Tape::recording();
    let z = layer.forward(&mut tape, &x, None, ExecPath::Train).unwrap().plain();
    let loss = tape.sum(&z).unwrap();
    let grads = tape.backward(&loss).unwrap();

    assert!(grads.get(layer.weight()).is_none(), "frozen W must have no gradient");
    assert!(grads.get(layer.adapter_a().unwrap()).is_some());
    assert!(grads.get(layer.adapter_b().unwrap()).is_some());
    let ga = grads.get(layer.adapter_a().unwrap()).unwrap();
    assert!(ga.data().iter().any(|&g| g != 0.0), "B nonzero so A receives signal");
}

#[test]
fn train_path_matches_fused_path_bitwise() {
    let mut r = rng(15);
    let x = random_tensor(6, 3, &mut r);
    for kind in ["pf", "ffa", "ffl", "fbl", "ffbl"] {
        let w = random_tensor(8, 6, &mut r);
        let (layer, dx) = match kind {
            "pf" => {
                let mut l = FusedLinearLayer::lora(Proj::Query, w, 2, false, &mut r).unwrap();
                set_parts(&mut l, None, Some(random_tensor(8, 2, &mut r)), None);
                (l, None)
            }
            "ffa" => {
                let mut l = FusedLinearLayer::ffa(Proj::Query, w, 2).unwrap();
                set_parts(&mut l, Some(random_tensor(4, 6, &mut r)), None, None);
                (l, None)
            }
            "ffl" => (
                FusedLinearLayer::ffl(Proj::Query, w, 2, true, &mut r).unwrap(),
                None,
            ),
            "fbl" => {
                let mut l = FusedLinearLayer::fbl(Proj::Output, w, 2).unwrap();
                set_parts(&mut l, None, Some(random_tensor(8, 2, &mut r)), None);
                (l, Some(random_tensor(2, 3, &mut r)))
            }
            _ => {
                let mut l =
                    FusedLinearLayer::ffbl(Proj::Output, w, 2, true, false, &mut r).unwrap();
                set_parts(&mut l, None, Some(random_tensor(8, 2, &mut r)), None);
                (l, Some(random_tensor(2, 3, &mut r)))
            }
        };
        let mut tape = Tape::inference();
        let fused = layer.forward(&mut tape, &x, dx.as_ref(), ExecPath::Fused).unwrap();
        let mut tape2 = Tape::recording();
        let trained = layer.forward(&mut tape2, &x, dx.as_ref(), ExecPath::Train).unwrap();
        match (fused, trained) {
            (LayerOut::Plain(a), LayerOut::Plain(b)) => assert!(a.bits_eq(&b), "{kind}"),
            (LayerOut::Augmented { y: y1, dy: d1 }, LayerOut::Augmented { y: y2, dy: d2 }) => {
                assert!(y1.bits_eq(&y2) && d1.bits_eq(&d2), "{kind}");
            }
            _ => panic!("output kind mismatch for {kind}"),
        }
    }
}

#[test]
fn adapter_spec_validation() {
    assert!(AdapterSpec::none().validate().is_ok());
    assert!(AdapterSpec::new(Variant::Lora, 8).validate().is_ok());
    assert!(AdapterSpec::new(Variant::Lora, 0).validate().is_err());

    let qg = AdapterSpec::new(Variant::FfbaQgAdd, 4);
    assert!(qg.validate().is_ok());
    assert!(qg.add_set.contains(&Proj::Query) && qg.add_set.contains(&Proj::Gate));

    // add_set may not contain output/down
    let mut bad = AdapterSpec::new(Variant::FfbaQgAdd, 4);
    bad.add_set.insert(Proj::Down);
    assert!(bad.validate().is_err());

    // fpa must have an empty add_set
    let mut fpa = AdapterSpec::new(Variant::Fpa, 4);
    fpa.add_set.insert(Proj::Query);
    assert!(fpa.validate().is_err());

    // ffa stores doubled forward rank
    assert_eq!(AdapterSpec::new(Variant::Ffa, 8).forward_rank(), 16);
    assert_eq!(AdapterSpec::new(Variant::Lora, 8).forward_rank(), 8);
}

#[test]
fn layer_kind_roles() {
    assert_eq!(LayerKind::Plain.role(), Role::Plain);
    assert_eq!(LayerKind::LoraNaive.role(), Role::Plain);
    assert_eq!(LayerKind::PfLora.role(), Role::Ffl);
    assert_eq!(LayerKind::Ffa.role(), Role::Ffl);
    assert_eq!(LayerKind::Ffl { self_add: false }.role(), Role::Ffl);
    assert_eq!(LayerKind::Fbl.role(), Role::Fbl);
    assert_eq!(LayerKind::Ffbl { shrink: true }.role(), Role::Ffbl);
}

#[test]
fn missing_augmented_input_is_config_error() {
    let mut r = rng(16);
    let layer = FusedLinearLayer::fbl(Proj::Output, random_tensor(4, 4, &mut r), 2).unwrap();
    let x = random_tensor(4, 1, &mut r);
    let mut tape = Tape::inference();
    assert!(matches!(
        layer.forward(&mut tape, &x, None, ExecPath::Fused),
        Err(Error::Config(_))
    ));

    // and a wrongly shaped dx is a shape error
    let dx = random_tensor(3, 1, &mut r);
    assert!(matches!(
        layer.forward(&mut tape, &x, Some(&dx), ExecPath::Fused),
        Err(Error::ShapeMismatch { .. })
    ));
}
