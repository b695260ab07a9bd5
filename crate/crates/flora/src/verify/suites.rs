//! Implementations of the verification suites.
//!
//! All suites run at 64-bit precision. Same-math refactorings (fusion only
//! reorders accumulation within dot products) are held to 1e-10 relative;
//! finite-difference gradient checks to 1e-6 at primitive/layer scope and
//! 1e-4 at block/model scope where truncation error accumulates.

use std::collections::BTreeMap;

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{
    AdapterSpec, ExecPath, FusedLinearLayer, LayerKind, Nonlinearity, Proj, Variant, ALL_VARIANTS,
};
use crate::error::Result;
use crate::model::{enumerated_trainable, param_count, ModelConfig, TransformerModel};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{train_adapters, SyntheticTask, TaskKind, TrainConfig};
use crate::verify::oracle;
use crate::verify::VerifyReport;

pub const EQUIV_TOL: f64 = 1e-10;
pub const BASE_PRESERVE_TOL: f64 = 1e-12;
pub const GRAD_TOL_PRIMITIVE: f64 = 1e-6;
pub const GRAD_TOL_MODEL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt))
}

fn rand_tensor(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

/// Micro config carrying `variant`; rank chosen to satisfy every tiling
/// and low-rank constraint of the shape.
fn micro_with(variant: Variant) -> ModelConfig {
    let rank = if variant == Variant::Ffa { 1 } else { 2 };
    let adapter = if variant == Variant::None {
        AdapterSpec::none()
    } else {
        AdapterSpec::new(variant, rank)
    };
    ModelConfig::micro().with_adapter(adapter)
}

fn toy_with(variant: Variant) -> ModelConfig {
    let adapter = if variant == Variant::None {
        AdapterSpec::none()
    } else {
        AdapterSpec::new(variant, 8)
    };
    ModelConfig::toy().with_adapter(adapter)
}

/// Model with all adapter partitions set to nonzero random values, so
/// equivalence comparisons exercise every term.
fn randomized_model(cfg: &ModelConfig, seed: u64, salt: u64) -> Result<TransformerModel<f64>> {
    let model = TransformerModel::<f64>::new(cfg.clone(), seed)?;
    let mut rng = rng_for(seed, salt);
    let mut tensors: BTreeMap<String, Tensor<f64>> = model.all_tensors().into_iter().collect();
    for (name, t) in tensors.iter_mut() {
        if name.contains("adapter_") {
            *t = Tensor::from_fn(t.rows(), t.cols(), |_, _| rng.random_range(-0.3..0.3));
        }
    }
    TransformerModel::from_tensors(cfg.clone(), tensors)
}

// ----- equivalence ----------------------------------------------------------

/// Layer-level, block-level, and full-model equivalence cells for one
/// variant: the fused execution route against independent unfused
/// references, `trials` seeded random instances each.
pub fn equivalence_suite(
    variant: Variant,
    d_max: usize,
    trials: usize,
    seed: u64,
) -> Result<VerifyReport> {
    let mut report = VerifyReport::new();
    layer_equivalence(variant, d_max, trials, seed, &mut report)?;
    block_equivalence(variant, trials, seed, &mut report)?;
    model_equivalence(variant, trials.min(100), seed, &mut report)?;
    Ok(report)
}

fn layer_equivalence(
    variant: Variant,
    d_max: usize,
    trials: usize,
    seed: u64,
    report: &mut VerifyReport,
) -> Result<()> {
    let mut rng = rng_for(seed, 1);
    let mut worst = 0.0f64;
    let mut worst_cross = 0.0f64; // pf-vs-naive product-route comparison
    let mut dims = String::new();
    for _ in 0..trials {
        let rank = rng.random_range(1..=3);
        let d_i = rng.random_range(2 * rank + 1..=d_max.max(2 * rank + 2));
        let tile = rng.random_range(1..=3);
        // shrink/self-add layers need d_o divisible by the tile height
        let d_o = match variant {
            Variant::Ffa => 2 * rank * tile.max(2),
            v if v.ffba_family() => rank * (tile + 1),
            _ => rng.random_range(rank + 1..=d_max.max(rank + 2)),
        };
        let l = rng.random_range(1..=4);
        dims = format!("d_i<={d_max}, r<=3, L<=4");

        let w = rand_tensor(d_o, d_i, &mut rng);
        let x = rand_tensor(d_i, l, &mut rng);
        let wv = w.to_f64_vec();
        let xv = x.to_f64_vec();
        let mut tape = Tape::inference();

        match variant {
            Variant::None => {
                let layer = FusedLinearLayer::plain(Proj::Query, w.clone());
                let z = layer.forward(&mut tape, &x, None, ExecPath::Fused)?.plain();
                let reference = oracle::matmul_ref(&wv, d_o, d_i, &xv, l);
                worst = worst.max(oracle::max_rel_err(&z.to_f64_vec(), &reference));
            }
            Variant::Lora | Variant::PfLora => {
                let a = rand_tensor(rank, d_i, &mut rng);
                let b = rand_tensor(d_o, rank, &mut rng);
                let naive = layer_with(
                    LayerKind::LoraNaive,
                    &w,
                    Some(&a),
                    Some(&b),
                    None,
                )?;
                let pf = layer_with(LayerKind::PfLora, &w, Some(&a), Some(&b), None)?;
                let reference = oracle::lora_ref(
                    &wv, d_o, d_i, &a.to_f64_vec(), rank, &b.to_f64_vec(), &xv, l,
                );
                let level = if variant == Variant::Lora { &naive } else { &pf };
                let z = level.forward(&mut tape, &x, None, ExecPath::Fused)?.plain();
                worst = worst.max(oracle::max_rel_err(&z.to_f64_vec(), &reference));

                let zn = naive.forward(&mut tape, &x, None, ExecPath::Fused)?.plain();
                let zp = pf.forward(&mut tape, &x, None, ExecPath::Fused)?.plain();
                worst_cross =
                    worst_cross.max(oracle::max_rel_err(&zn.to_f64_vec(), &zp.to_f64_vec()));
            }
            Variant::Ffa => {
                let a = rand_tensor(2 * rank, d_i, &mut rng);
                let layer = layer_with(LayerKind::Ffa, &w, Some(&a), None, None)?;
                let z = layer.forward(&mut tape, &x, None, ExecPath::Fused)?.plain();
                let reference =
                    oracle::ffa_ref(&wv, d_o, d_i, &a.to_f64_vec(), 2 * rank, &xv, l);
                worst = worst.max(oracle::max_rel_err(&z.to_f64_vec(), &reference));
            }
            Variant::FfbaAb | Variant::FfbaAorb | Variant::FfbaQgAdd | Variant::Fpa => {
                let a = rand_tensor(rank, d_i, &mut rng);
                let b = rand_tensor(d_o, rank, &mut rng);
                let dx = rand_tensor(rank, l, &mut rng);
                let (av, bv, dxv) = (a.to_f64_vec(), b.to_f64_vec(), dx.to_f64_vec());

                // forward layer, with self-add for the qg variant
                let self_add = variant == Variant::FfbaQgAdd;
                let ffl = layer_with(LayerKind::Ffl { self_add }, &w, Some(&a), None, None)?;
                let (y, dy) = ffl.forward(&mut tape, &x, None, ExecPath::Fused)?.augmented();
                let wx = oracle::matmul_ref(&wv, d_o, d_i, &xv, l);
                let ax = oracle::matmul_ref(&av, rank, d_i, &xv, l);
                let y_ref = if self_add {
                    oracle::repeat_add_ref(&wx, d_o, l, &ax, rank)
                } else {
                    wx
                };
                worst = worst.max(oracle::max_rel_err(&y.to_f64_vec(), &y_ref));
                worst = worst.max(oracle::max_rel_err(&dy.to_f64_vec(), &ax));

                // backward layer
                if variant == Variant::FfbaAb {
                    let ffbl =
                        layer_with(LayerKind::Ffbl { shrink: true }, &w, Some(&a), Some(&b), None)?;
                    let (y, dy) =
                        ffbl.forward(&mut tape, &x, Some(&dx), ExecPath::Fused)?.augmented();
                    let (y_ref, dy_ref) =
                        oracle::ffbl_ref(&wv, d_o, d_i, &av, rank, &bv, None, &xv, &dxv, l);
                    let y_ref = oracle::repeat_add_ref(&y_ref, d_o, l, &dy_ref, rank);
                    worst = worst.max(oracle::max_rel_err(&y.to_f64_vec(), &y_ref));
                    worst = worst.max(oracle::max_rel_err(&dy.to_f64_vec(), &dy_ref));
                } else {
                    let fbl = layer_with(LayerKind::Fbl, &w, None, Some(&b), None)?;
                    let z = fbl.forward(&mut tape, &x, Some(&dx), ExecPath::Fused)?.plain();
                    let reference = oracle::fbl_ref(&wv, d_o, d_i, &bv, rank, &xv, &dxv, l);
                    worst = worst.max(oracle::max_rel_err(&z.to_f64_vec(), &reference));
                }
            }
        }
    }
    report.record(
        format!("equiv/{variant}/layer"),
        worst,
        EQUIV_TOL,
        seed,
        format!("{trials} trials, {dims}"),
    );
    if matches!(variant, Variant::Lora | Variant::PfLora) {
        report.record(
            format!("equiv/{variant}/pf_vs_naive"),
            worst_cross,
            EQUIV_TOL,
            seed,
            format!("{trials} trials, {dims}"),
        );
    }
    Ok(())
}

fn layer_with(
    kind: LayerKind,
    w: &Tensor<f64>,
    a: Option<&Tensor<f64>>,
    b: Option<&Tensor<f64>>,
    c: Option<&Tensor<f64>>,
) -> Result<FusedLinearLayer<f64>> {
    FusedLinearLayer::from_parts(
        Proj::Query,
        kind,
        w.clone(),
        a.cloned(),
        b.cloned(),
        c.cloned(),
    )
}

fn block_equivalence(
    variant: Variant,
    trials: usize,
    seed: u64,
    report: &mut VerifyReport,
) -> Result<()> {
    let cfg = micro_with(variant);
    let model = randomized_model(&cfg, seed, 2)?;
    let mut rng = rng_for(seed, 3);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let h = rand_tensor(cfg.d_model, rng.random_range(1..=4), &mut rng);
        let mut tape = Tape::inference();
        for layer in 0..cfg.n_layers {
            let fused = model.mha_forward(&mut tape, layer, &h, None, ExecPath::Fused)?;
            let unfused = model.mha_forward(&mut tape, layer, &h, None, ExecPath::Unfused)?;
            worst = worst.max(oracle::max_rel_err(&fused.to_f64_vec(), &unfused.to_f64_vec()));

            let fused = model.ffn_forward(&mut tape, layer, &h, ExecPath::Fused)?;
            let unfused = model.ffn_forward(&mut tape, layer, &h, ExecPath::Unfused)?;
            worst = worst.max(oracle::max_rel_err(&fused.to_f64_vec(), &unfused.to_f64_vec()));
        }
    }
    report.record(
        format!("equiv/{variant}/block"),
        worst,
        EQUIV_TOL,
        seed,
        format!("{trials} trials, d_model={}", cfg.d_model),
    );
    Ok(())
}

fn model_equivalence(
    variant: Variant,
    trials: usize,
    seed: u64,
    report: &mut VerifyReport,
) -> Result<()> {
    let cfg = toy_with(variant);
    let model = randomized_model(&cfg, seed, 4)?;
    let mut rng = rng_for(seed, 5);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let len = rng.random_range(3..=10);
        let prompt: Vec<u32> = (0..len)
            .map(|_| rng.random_range(0..cfg.vocab_size as u32))
            .collect();
        let mut tape = Tape::inference();
        let fused = model.forward_sequence(&mut tape, &prompt, ExecPath::Fused)?;
        let unfused = model.forward_sequence(&mut tape, &prompt, ExecPath::Unfused)?;
        worst = worst.max(oracle::max_rel_err(&fused.to_f64_vec(), &unfused.to_f64_vec()));
    }
    report.record(
        format!("equiv/{variant}/model"),
        worst,
        EQUIV_TOL,
        seed,
        format!("{trials} prompts, d_model={}", cfg.d_model),
    );
    Ok(())
}

// ----- gradient checks ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    Primitive,
    Layer,
    Block,
    Model,
}

impl std::str::FromStr for GradScope {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitive" => Ok(GradScope::Primitive),
            "layer" => Ok(GradScope::Layer),
            "block" => Ok(GradScope::Block),
            "model" => Ok(GradScope::Model),
            other => Err(crate::error::Error::Config(format!(
                "unknown gradient scope {other:?}"
            ))),
        }
    }
}

/// Central finite differences against the tape's analytic gradients at the
/// requested scope.
pub fn grad_check_suite(scope: GradScope, seed: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport::new();
    match scope {
        GradScope::Primitive => primitive_grads(seed, &mut report)?,
        GradScope::Layer => layer_grads(seed, &mut report)?,
        GradScope::Block => block_grads(seed, &mut report)?,
        GradScope::Model => model_grads(seed, &mut report)?,
    }
    Ok(report)
}

/// Loss used by the primitive checks: a probe-weighted sum, so gradients
/// are nontrivial for normalizing ops.
fn probe_loss(tape: &mut Tape<f64>, y: &Tensor<f64>) -> Result<f64> {
    let probe = Tensor::from_fn(y.rows(), y.cols(), |i, j| ((2 * i + 3 * j) as f64 * 0.29).sin());
    let p = tape.mul(y, &probe)?;
    Ok(tape.sum(&p)?.item())
}

fn probe_loss_grad(tape: &mut Tape<f64>, y: &Tensor<f64>) -> Result<Tensor<f64>> {
    let probe = Tensor::from_fn(y.rows(), y.cols(), |i, j| ((2 * i + 3 * j) as f64 * 0.29).sin());
    let p = tape.mul(y, &probe)?;
    tape.sum(&p)
}

fn primitive_grads(seed: u64, report: &mut VerifyReport) -> Result<()> {
    let mut rng = rng_for(seed, 10);
    let rows = 5;
    let cols = 4;
    let point: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.2..1.2)).collect();
    let aux: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.2..1.2)).collect();

    type Builder = fn(&mut Tape<f64>, &Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>;
    let ops: Vec<(&str, Builder)> = vec![
        ("matmul", |t, x, aux| {
            let xt = t.transpose(aux)?;
            t.matmul(x, &xt)
        }),
        ("concat_slice", |t, x, _| {
            let up = t.slice_rows(x, 0, 2)?;
            let down = t.slice_rows(x, 2, 5)?;
            t.concat_rows(&[&down, &up])
        }),
        ("repeat_add", |t, x, _| {
            let dy = t.slice_rows(x, 0, 1)?;
            let y = t.concat_rows(&[x, x])?;
            t.repeat_add(&y, &dy)
        }),
        ("add_mul", |t, x, aux| {
            let s = t.add(x, aux)?;
            t.mul(&s, aux)
        }),
        ("scale", |t, x, _| t.scale(x, -1.75)),
        ("relu", |t, x, _| t.relu(x)),
        ("silu", |t, x, _| t.silu(x)),
        ("softmax_cols", |t, x, _| t.softmax_cols(x)),
        ("rmsnorm_cols", |t, x, _| {
            let gain = Tensor::from_fn(x.rows(), 1, |i, _| 1.0 + 0.2 * i as f64);
            t.rmsnorm_cols(x, &gain)
        }),
        ("transpose", |t, x, _| t.transpose(x)),
        ("rope", |t, x, _| {
            // rows = 5 is not a multiple of an even head_dim; use 4 rows
            let x4 = t.slice_rows(x, 0, 4)?;
            t.rope(&x4, 2, 3)
        }),
        ("sum_chain", |t, x, _| {
            let s = t.sum(x)?;
            t.scale(&s, 2.0)
        }),
    ];

    for (name, build) in ops {
        let aux_t = Tensor::from_vec(rows, cols, aux.clone()).unwrap();
        let fd = oracle::finite_diff_grad(
            |p| {
                let mut tape = Tape::inference();
                let x = Tensor::from_vec(rows, cols, p.to_vec()).unwrap();
                let y = build(&mut tape, &x, &aux_t).unwrap();
                probe_loss(&mut tape, &y).unwrap()
            },
            &point,
            FD_STEP,
        );
        let mut tape = Tape::recording();
        let x = Tensor::from_vec(rows, cols, point.clone()).unwrap().trainable();
        let y = build(&mut tape, &x, &aux_t)?;
        let loss = probe_loss_grad(&mut tape, &y)?;
        let grads = tape.backward(&loss)?;
        let err = oracle::max_rel_err(grads.get_or_zeros(&x).data(), &fd);
        report.record(
            format!("grad/primitive/{name}"),
            err,
            GRAD_TOL_PRIMITIVE,
            seed,
            format!("{rows}x{cols}"),
        );
    }

    // embedding gather
    let ids = [2u32, 0, 2, 1];
    let fd = oracle::finite_diff_grad(
        |p| {
            let mut tape = Tape::inference();
            let table = Tensor::from_vec(3, 4, p[..12].to_vec()).unwrap();
            let y = tape.embed_cols(&table, &ids).unwrap();
            probe_loss(&mut tape, &y).unwrap()
        },
        &point[..12],
        FD_STEP,
    );
    let mut tape = Tape::recording();
    let table = Tensor::from_vec(3, 4, point[..12].to_vec()).unwrap().trainable();
    let y = tape.embed_cols(&table, &ids)?;
    let loss = probe_loss_grad(&mut tape, &y)?;
    let grads = tape.backward(&loss)?;
    let err = oracle::max_rel_err(grads.get_or_zeros(&table).data(), &fd);
    report.record("grad/primitive/embed_cols", err, GRAD_TOL_PRIMITIVE, seed, "3x4");

    // masked cross entropy
    let targets = [Some(1u32), None, Some(4)];
    let lp: Vec<f64> = (0..15).map(|i| point[i] * 1.5).collect();
    let fd = oracle::finite_diff_grad(
        |p| {
            let mut tape = Tape::inference();
            let logits = Tensor::from_vec(5, 3, p.to_vec()).unwrap();
            tape.cross_entropy_cols(&logits, &targets).unwrap().item()
        },
        &lp,
        FD_STEP,
    );
    let mut tape = Tape::recording();
    let logits = Tensor::from_vec(5, 3, lp.clone()).unwrap().trainable();
    let loss = tape.cross_entropy_cols(&logits, &targets)?;
    let grads = tape.backward(&loss)?;
    let err = oracle::max_rel_err(grads.get_or_zeros(&logits).data(), &fd);
    report.record("grad/primitive/cross_entropy_cols", err, GRAD_TOL_PRIMITIVE, seed, "5x3");
    Ok(())
}

fn layer_grads(seed: u64, report: &mut VerifyReport) -> Result<()> {
    let mut rng = rng_for(seed, 11);
    let (d_o, d_i, rank, l) = (6, 5, 2, 3);
    let kinds: Vec<(&str, LayerKind)> = vec![
        ("lora_naive", LayerKind::LoraNaive),
        ("pf_lora", LayerKind::PfLora),
        ("ffa", LayerKind::Ffa),
        ("ffl", LayerKind::Ffl { self_add: true }),
        ("fbl", LayerKind::Fbl),
        ("ffbl", LayerKind::Ffbl { shrink: true }),
    ];
    for (name, kind) in kinds {
        let stored = if kind == LayerKind::Ffa { 2 * rank } else { rank };
        let d_o = if matches!(
            kind,
            LayerKind::Ffa | LayerKind::Ffl { self_add: true } | LayerKind::Ffbl { shrink: true }
        ) {
            2 * stored
        } else {
            d_o
        };
        let w = rand_tensor(d_o, d_i, &mut rng);
        let a = kind.has_a().then(|| rand_tensor(stored, d_i, &mut rng));
        let b = kind.has_b().then(|| rand_tensor(d_o, rank, &mut rng));
        let x = rand_tensor(d_i, l, &mut rng);
        let dx = kind.takes_augmented_input().then(|| rand_tensor(rank, l, &mut rng));

        // pack trainable partitions into a flat parameter vector
        let mut point = Vec::new();
        if let Some(a) = &a {
            point.extend(a.to_f64_vec());
        }
        if let Some(b) = &b {
            point.extend(b.to_f64_vec());
        }
        let a_len = a.as_ref().map_or(0, |t| t.len());

        let forward = |params: &[f64], record: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let a2 = a
                .as_ref()
                .map(|t| Tensor::from_vec(t.rows(), t.cols(), params[..a_len].to_vec()).unwrap());
            let b2 = b
                .as_ref()
                .map(|t| Tensor::from_vec(t.rows(), t.cols(), params[a_len..].to_vec()).unwrap());
            let layer = FusedLinearLayer::from_parts(
                Proj::Query,
                kind,
                w.clone(),
                a2,
                b2,
                None,
            )?;
            let mut tape = if record { Tape::recording() } else { Tape::inference() };
            let out = layer.forward(&mut tape, &x, dx.as_ref(), ExecPath::Train)?;
            let y = match out {
                crate::adapters::LayerOut::Plain(t) => t,
                crate::adapters::LayerOut::Augmented { y, dy } => {
                    // fold both outputs into the loss so A gets signal
                    let yp = probe_loss_grad(&mut tape, &y)?;
                    let dp = probe_loss_grad(&mut tape, &dy)?;
                    let total = tape.add(&yp, &dp)?;
                    if record {
                        let grads = tape.backward(&total)?;
                        let mut analytic = Vec::new();
                        if let Some(a) = layer.adapter_a() {
                            analytic.extend(grads.get_or_zeros(a).to_f64_vec());
                        }
                        if let Some(b) = layer.adapter_b() {
                            analytic.extend(grads.get_or_zeros(b).to_f64_vec());
                        }
                        return Ok((total.item(), Some(analytic)));
                    }
                    return Ok((total.item(), None));
                }
            };
            let loss = probe_loss_grad(&mut tape, &y)?;
            if record {
                let grads = tape.backward(&loss)?;
                let mut analytic = Vec::new();
                if let Some(a) = layer.adapter_a() {
                    analytic.extend(grads.get_or_zeros(a).to_f64_vec());
                }
                if let Some(b) = layer.adapter_b() {
                    analytic.extend(grads.get_or_zeros(b).to_f64_vec());
                }
                Ok((loss.item(), Some(analytic)))
            } else {
                Ok((loss.item(), None))
            }
        };

        let fd = oracle::finite_diff_grad(|p| forward(p, false).unwrap().0, &point, FD_STEP);
        let (_, analytic) = forward(&point, true)?;
        let err = oracle::max_rel_err(&analytic.unwrap(), &fd);
        report.record(
            format!("grad/layer/{name}"),
            err,
            GRAD_TOL_PRIMITIVE,
            seed,
            format!("{d_o}x{d_i} r={rank}"),
        );
    }
    Ok(())
}

/// Finite differences of a model-scope loss with respect to one named
/// tensor, rebuilding the model per perturbed element.
fn fd_model_tensor(
    cfg: &ModelConfig,
    tensors: &BTreeMap<String, Tensor<f64>>,
    name: &str,
    loss_fn: &dyn Fn(&TransformerModel<f64>) -> Result<f64>,
) -> Result<Vec<f64>> {
    let base = &tensors[name];
    let mut out = Vec::with_capacity(base.len());
    for idx in 0..base.len() {
        let probe = |delta: f64| -> Result<f64> {
            let mut map = tensors.clone();
            let mut data = base.to_f64_vec();
            data[idx] += delta;
            map.insert(
                name.to_string(),
                Tensor::from_vec(base.rows(), base.cols(), data).unwrap(),
            );
            let model = TransformerModel::from_tensors(cfg.clone(), map)?;
            loss_fn(&model)
        };
        let up = probe(FD_STEP)?;
        let down = probe(-FD_STEP)?;
        out.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(out)
}

fn block_grads(seed: u64, report: &mut VerifyReport) -> Result<()> {
    for variant in [Variant::Lora, Variant::FfbaAb, Variant::FfbaQgAdd] {
        let cfg = micro_with(variant);
        let model = randomized_model(&cfg, seed, 12)?;
        let tensors: BTreeMap<String, Tensor<f64>> = model.all_tensors().into_iter().collect();
        let h = Tensor::from_fn(cfg.d_model, 3, |i, j| ((i + 5 * j) as f64 * 0.23).sin());

        for (site, is_mha) in [("mha", true), ("ffn", false)] {
            let h_in = h.clone();
            let loss_fn = move |m: &TransformerModel<f64>| -> Result<f64> {
                let mut tape = Tape::inference();
                let out = if is_mha {
                    m.mha_forward(&mut tape, 0, &h_in, None, ExecPath::Train)?
                } else {
                    m.ffn_forward(&mut tape, 0, &h_in, ExecPath::Train)?
                };
                probe_loss(&mut tape, &out)
            };

            // analytic gradients
            let mut tape = Tape::recording();
            let out = if is_mha {
                model.mha_forward(&mut tape, 0, &h, None, ExecPath::Train)?
            } else {
                model.ffn_forward(&mut tape, 0, &h, ExecPath::Train)?
            };
            let loss = probe_loss_grad(&mut tape, &out)?;
            let grads = tape.backward(&loss)?;

            let mut worst = 0.0f64;
            let group = if is_mha { "attn" } else { "ffn" };
            for (name, t) in model.trainable_tensors() {
                if !name.contains(&format!("layers.0.{group}.")) {
                    continue;
                }
                let fd = fd_model_tensor(&cfg, &tensors, &name, &loss_fn)?;
                let analytic = grads.get_or_zeros(&t).to_f64_vec();
                worst = worst.max(oracle::max_rel_err(&analytic, &fd));
            }
            report.record(
                format!("grad/block/{variant}/{site}"),
                worst,
                GRAD_TOL_MODEL,
                seed,
                format!("d_model={}", cfg.d_model),
            );
        }
    }
    Ok(())
}

fn model_grads(seed: u64, report: &mut VerifyReport) -> Result<()> {
    for variant in [Variant::Lora, Variant::FfbaAorb] {
        let cfg = micro_with(variant);
        let model = randomized_model(&cfg, seed, 13)?;
        let tensors: BTreeMap<String, Tensor<f64>> = model.all_tensors().into_iter().collect();
        let tokens: Vec<u32> = vec![1, 5, 3, 7, 2, 9];
        let targets: Vec<Option<u32>> =
            vec![None, Some(3), Some(7), Some(2), Some(9), Some(1)];

        let t2 = targets.clone();
        let toks = tokens.clone();
        let loss_fn = move |m: &TransformerModel<f64>| -> Result<f64> {
            let mut tape = Tape::inference();
            let logits = m.forward_sequence(&mut tape, &toks, ExecPath::Train)?;
            Ok(tape.cross_entropy_cols(&logits, &t2)?.item())
        };

        let mut tape = Tape::recording();
        let logits = model.forward_sequence(&mut tape, &tokens, ExecPath::Train)?;
        let loss = tape.cross_entropy_cols(&logits, &targets)?;
        let grads = tape.backward(&loss)?;

        let mut worst = 0.0f64;
        for (name, t) in model.trainable_tensors() {
            let fd = fd_model_tensor(&cfg, &tensors, &name, &loss_fn)?;
            let analytic = grads.get_or_zeros(&t).to_f64_vec();
            worst = worst.max(oracle::max_rel_err(&analytic, &fd));
        }
        report.record(
            format!("grad/model/{variant}"),
            worst,
            GRAD_TOL_MODEL,
            seed,
            format!("d_model={} layers={}", cfg.d_model, cfg.n_layers),
        );

        // frozen tensors must have no gradient at all
        let frozen_clean = model
            .all_tensors()
            .iter()
            .filter(|(_, t)| !t.requires_grad())
            .all(|(_, t)| grads.get(t).is_none());
        report.record_bool(
            format!("grad/model/{variant}/frozen_w_absent"),
            frozen_clean,
            seed,
            "all frozen tensors",
        );
    }
    Ok(())
}

// ----- base preservation, frozen weights, canary ----------------------------

/// Zero-initialized adapters must leave full-model logits equal to the
/// adapter-free model's, for every variant.
pub fn base_preservation_suite(seed: u64, prompts: usize) -> Result<VerifyReport> {
    let mut report = VerifyReport::new();
    let base = TransformerModel::<f64>::new(toy_with(Variant::None), seed)?;
    let mut rng = rng_for(seed, 20);
    let prompt_list: Vec<Vec<u32>> = (0..prompts)
        .map(|_| {
            let len = rng.random_range(3..=12);
            (0..len).map(|_| rng.random_range(0..256u32)).collect()
        })
        .collect();

    let mut specs: Vec<(String, AdapterSpec)> = ALL_VARIANTS
        .iter()
        .filter(|v| **v != Variant::None)
        .map(|v| (v.name().to_string(), AdapterSpec::new(*v, 8)))
        .collect();
    specs.push((
        "ffba_aorb+relu".into(),
        AdapterSpec::new(Variant::FfbaAorb, 8).with_nonlinearity(Nonlinearity::Relu),
    ));

    for (name, spec) in specs {
        let model = TransformerModel::<f64>::new(ModelConfig::toy().with_adapter(spec), seed)?;
        let mut worst = 0.0f64;
        for prompt in &prompt_list {
            let mut tape = Tape::inference();
            let a = base.forward_sequence(&mut tape, prompt, ExecPath::Fused)?;
            let b = model.forward_sequence(&mut tape, prompt, ExecPath::Fused)?;
            worst = worst.max(oracle::max_rel_err(&a.to_f64_vec(), &b.to_f64_vec()));
        }
        report.record(
            format!("base_preserve/{name}"),
            worst,
            BASE_PRESERVE_TOL,
            seed,
            format!("{prompts} prompts, toy shape"),
        );
    }
    Ok(report)
}

/// A short real training run: the frozen-base hash must be unchanged and
/// the adapters must actually move.
pub fn frozen_weight_suite(seed: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport::new();
    let cfg = micro_with(Variant::FfbaAorb);
    let mut model = TransformerModel::<f64>::new(cfg, seed)?;
    let before = model.frozen_hash();
    let adapters_before: Vec<Tensor<f64>> =
        model.trainable_tensors().into_iter().map(|(_, t)| t).collect();

    let mut task = SyntheticTask::new(TaskKind::Copy);
    task.alphabet = 8;
    task.train_size = 48;
    task.val_size = 8;
    task.test_size = 8;
    task.seed = seed;
    let dataset = task.generate()?;
    let tc = TrainConfig { batch_tokens: 256, ..TrainConfig::new(0.5, 1, seed) };
    let result = train_adapters(&mut model, &dataset, &tc, None)?;

    report.record_bool(
        "frozen_weights/hash_unchanged",
        model.frozen_hash() == before && result.aborted.is_none(),
        seed,
        "micro model, 1 epoch",
    );
    let moved = model
        .trainable_tensors()
        .iter()
        .zip(&adapters_before)
        .any(|((_, now), was)| !now.bits_eq(was));
    report.record_bool("frozen_weights/adapters_updated", moved, seed, "micro model, 1 epoch");
    Ok(report)
}

/// Self-test of the harness: a deliberately perturbed weight must make the
/// equivalence comparison fail.
pub fn canary_suite(seed: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport::new();
    let mut rng = rng_for(seed, 30);
    let (d_o, d_i, rank, l) = (8, 8, 2, 3);
    let w = rand_tensor(d_o, d_i, &mut rng);
    let a = rand_tensor(rank, d_i, &mut rng);
    let b = rand_tensor(d_o, rank, &mut rng);
    let x = rand_tensor(d_i, l, &mut rng);

    let layer = layer_with(LayerKind::PfLora, &w, Some(&a), Some(&b), None)?;
    let mut tape = Tape::inference();
    let z = layer.forward(&mut tape, &x, None, ExecPath::Fused)?.plain();

    // reference computed against a perturbed B
    let mut bv = b.to_f64_vec();
    bv[0] += 1e-3;
    let reference =
        oracle::lora_ref(&w.to_f64_vec(), d_o, d_i, &a.to_f64_vec(), rank, &bv, &x.to_f64_vec(), l);
    let err = oracle::max_rel_err(&z.to_f64_vec(), &reference);
    report.record_bool(
        "canary/perturbed_equivalence_fails",
        err > EQUIV_TOL,
        seed,
        format!("{d_o}x{d_i} r={rank}, B[0] += 1e-3"),
    );
    Ok(report)
}

// ----- parameter table ------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct ParamRow {
    pub shape: String,
    pub variant: String,
    pub rank: usize,
    pub trainable: u64,
    pub trainable_human: String,
    pub total: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
}

/// Renders a count the way the latency table does: millions to one decimal.
pub fn human_millions(count: u64) -> String {
    format!("{:.1}M", count as f64 / 1e6)
}

pub fn format_grouped(count: u64) -> String {
    let digits = count.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Trainable-parameter table across shapes and variants.
pub fn param_table(ranks: &[(String, ModelConfig, usize)]) -> ParamTable {
    let mut rows = Vec::new();
    for (shape_name, shape, rank) in ranks {
        for variant in ALL_VARIANTS {
            let adapter = if variant == Variant::None {
                AdapterSpec::none()
            } else {
                AdapterSpec::new(variant, *rank)
            };
            let cfg = shape.clone().with_adapter(adapter);
            let pc = param_count(&cfg);
            rows.push(ParamRow {
                shape: shape_name.clone(),
                variant: variant.name().to_string(),
                rank: if variant == Variant::None { 0 } else { *rank },
                trainable: pc.trainable,
                trainable_human: human_millions(pc.trainable),
                total: pc.total,
            });
        }
    }
    ParamTable { rows }
}

impl ParamTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| shape | variant | rank | trainable | #Param |\n");
        out.push_str("|---|---|---:|---:|---:|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.shape,
                r.variant,
                r.rank,
                format_grouped(r.trainable),
                r.trainable_human
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("shape,variant,rank,trainable,trainable_human,total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.shape, r.variant, r.rank, r.trainable, r.trainable_human, r.total
            ));
        }
        out
    }
}

/// Parameter accounting checks: closed form vs manifest enumeration on
/// every shape and variant, plus the pinned published counts.
pub fn param_checks(seed: u64) -> VerifyReport {
    let mut report = VerifyReport::new();
    let shapes = [
        ("toy", ModelConfig::toy(), 8usize),
        ("llama1b", ModelConfig::llama1b_shape(), 32),
        ("llama3b", ModelConfig::llama3b_shape(), 32),
    ];
    for (name, shape, rank) in &shapes {
        for variant in ALL_VARIANTS {
            let adapter = if variant == Variant::None {
                AdapterSpec::none()
            } else {
                AdapterSpec::new(variant, *rank)
            };
            let cfg = shape.clone().with_adapter(adapter);
            let closed = param_count(&cfg).trainable;
            let enumerated = enumerated_trainable(&cfg);
            report.record_bool(
                format!("params/closed_vs_enum/{name}/{variant}"),
                closed == enumerated,
                seed,
                format!("closed={closed} enum={enumerated}"),
            );
        }
    }
    let lora1b = param_count(
        &ModelConfig::llama1b_shape().with_adapter(AdapterSpec::new(Variant::Lora, 32)),
    )
    .trainable;
    report.record_bool(
        "params/published/llama1b_lora_r32",
        lora1b == 22_544_384,
        seed,
        format!("got {lora1b}, want 22,544,384 (22.5M)"),
    );
    let lora3b = param_count(
        &ModelConfig::llama3b_shape().with_adapter(AdapterSpec::new(Variant::Lora, 32)),
    )
    .trainable;
    report.record_bool(
        "params/published/llama3b_lora_r32",
        lora3b == 48_627_712,
        seed,
        format!("got {lora3b}, want 48,627,712 (48.6M)"),
    );
    report
}

// ----- composition -----------------------------------------------------------

/// Every suite, one report. `variant_filter` narrows the equivalence and
/// base-preservation suites; the full run also asserts coverage of every
/// variant x {layer, block, model} cell.
pub fn run_all(seed: u64, variant_filter: Option<Variant>, trials: usize) -> Result<VerifyReport> {
    let mut report = VerifyReport::new();
    let variants: Vec<Variant> = match variant_filter {
        Some(v) => vec![v],
        None => ALL_VARIANTS.to_vec(),
    };
    for v in &variants {
        report.merge(equivalence_suite(*v, 32, trials, seed)?);
    }
    if variant_filter.is_none() {
        let mut covered = true;
        for v in ALL_VARIANTS {
            for cell in ["layer", "block", "model"] {
                if !report.checks.iter().any(|c| c.name == format!("equiv/{v}/{cell}")) {
                    covered = false;
                }
            }
        }
        report.record_bool(
            "equiv/coverage",
            covered,
            seed,
            "every variant x {layer, block, model}",
        );
    }
    for scope in [GradScope::Primitive, GradScope::Layer, GradScope::Block, GradScope::Model] {
        report.merge(grad_check_suite(scope, seed)?);
    }
    report.merge(base_preservation_suite(seed, 20)?);
    report.merge(frozen_weight_suite(seed)?);
    report.merge(param_checks(seed));
    report.merge(canary_suite(seed)?);
    Ok(report)
}
