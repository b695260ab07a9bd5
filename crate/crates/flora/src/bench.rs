//! Latency and sequential-operation benchmarking.
//!
//! Timing follows the double-pass discipline: every prefill and decode step
//! executes twice on identical state and only the second pass is timed.
//! TTFT is the timed prefill; TPOT is the median timed decode step within a
//! repeat, reported as the median over repeats with min/max kept. Op counts
//! come from the instrumented fused path and are exact integers.
//!
//! Wall-clock results on this harness support ordering claims only, never
//! absolute figures.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::adapters::{AdapterSpec, Nonlinearity, Variant};
use crate::error::{Error, Result};
use crate::model::{argmax_col, param_count, ModelConfig, TransformerModel};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};
use crate::trace::{CategoryCounts, OpCounter};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchParams {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams { prompt_len: 64, gen_len: 64, repeats: 5, seed: 17 }
    }
}

impl BenchParams {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 3 {
            return Err(Error::Config("latency measurement requires repeats >= 3".into()));
        }
        if self.prompt_len == 0 || self.gen_len == 0 {
            return Err(Error::Config("prompt_len and gen_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LatencyStats {
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub ttft_min_ms: f64,
    pub ttft_max_ms: f64,
    pub tpot_min_ms: f64,
    pub tpot_max_ms: f64,
    /// Set when the timer's resolution exceeds 1% of a measured value.
    pub timer_unreliable: bool,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Smallest positive interval the monotonic clock can resolve, in ms.
pub fn timer_resolution_ms() -> f64 {
    let mut best = f64::MAX;
    for _ in 0..64 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1.duration_since(t0).as_secs_f64() * 1e3);
    }
    best
}

fn random_prompt(len: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Measures TTFT and TPOT with double-pass timing. One warmup run is
/// excluded; each of `repeats` runs replays the same prompt greedily.
pub fn measure_latency<E: Element>(
    model: &TransformerModel<E>,
    prompt_len: usize,
    gen_len: usize,
    repeats: usize,
    seed: u64,
) -> Result<LatencyStats> {
    BenchParams { prompt_len, gen_len, repeats, seed }.validate()?;
    let vocab = model.config().vocab_size;
    let prompt = random_prompt(prompt_len, vocab, seed);

    // warmup pass, excluded from measurement
    run_once(model, &prompt, gen_len, false)?;

    let mut ttfts = Vec::with_capacity(repeats);
    let mut tpots = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let (ttft, mut steps) = run_once(model, &prompt, gen_len, true)?;
        ttfts.push(ttft);
        tpots.push(median(&mut steps));
    }
    let (mut t1, mut t2) = (ttfts.clone(), tpots.clone());
    let ttft_ms = median(&mut t1);
    let tpot_ms = median(&mut t2);
    let resolution = timer_resolution_ms();
    let unreliable = resolution > 0.01 * ttft_ms.min(tpot_ms);
    Ok(LatencyStats {
        ttft_ms,
        tpot_ms,
        ttft_min_ms: ttfts.iter().copied().fold(f64::MAX, f64::min),
        ttft_max_ms: ttfts.iter().copied().fold(0.0, f64::max),
        tpot_min_ms: tpots.iter().copied().fold(f64::MAX, f64::min),
        tpot_max_ms: tpots.iter().copied().fold(0.0, f64::max),
        timer_unreliable: unreliable,
    })
}

/// Interleaved measurement across several models for the ordering table.
///
/// Within a session every model prefills, then the models decode in
/// lockstep: each token round times one double-pass step per model, so a
/// host noise burst lands on every model in the same round instead of on
/// whichever variant happened to run last. Per model, TPOT is the median
/// timed step within a session, then the median over sessions (`repeats`).
pub fn measure_latency_group<E: Element>(
    models: &[&TransformerModel<E>],
    prompt_len: usize,
    gen_len: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<LatencyStats>> {
    BenchParams { prompt_len, gen_len, repeats, seed }.validate()?;
    let n = models.len();
    let prompts: Vec<Vec<u32>> = models
        .iter()
        .map(|m| random_prompt(prompt_len, m.config().vocab_size, seed))
        .collect();

    // warmup session, excluded
    for (model, prompt) in models.iter().zip(&prompts) {
        run_once(model, prompt, gen_len, false)?;
    }

    let mut ttfts = vec![Vec::with_capacity(repeats); n];
    let mut tpots = vec![Vec::with_capacity(repeats); n];
    let mut tape = Tape::inference();
    for _ in 0..repeats {
        let mut caches = Vec::with_capacity(n);
        let mut tokens = Vec::with_capacity(n);
        for (idx, (model, prompt)) in models.iter().zip(&prompts).enumerate() {
            let mut cache = model.new_cache();
            let mut scratch = cache.clone();
            model.prefill(&mut tape, prompt, &mut scratch)?;
            let t0 = Instant::now();
            let logits = model.prefill(&mut tape, prompt, &mut cache)?;
            ttfts[idx].push(t0.elapsed().as_secs_f64() * 1e3);
            caches.push(cache);
            tokens.push(argmax_col(&logits));
        }
        let mut steps = vec![Vec::with_capacity(gen_len); n];
        for _ in 0..gen_len {
            for (idx, model) in models.iter().enumerate() {
                let mut scratch = caches[idx].clone();
                model.decode_step(&mut tape, tokens[idx], &mut scratch)?;
                let t0 = Instant::now();
                let logits = model.decode_step(&mut tape, tokens[idx], &mut caches[idx])?;
                steps[idx].push(t0.elapsed().as_secs_f64() * 1e3);
                tokens[idx] = argmax_col(&logits);
            }
        }
        for idx in 0..n {
            tpots[idx].push(median(&mut steps[idx]));
        }
    }

    let resolution = timer_resolution_ms();
    Ok((0..n)
        .map(|idx| {
            let (mut t1, mut t2) = (ttfts[idx].clone(), tpots[idx].clone());
            let ttft_ms = median(&mut t1);
            let tpot_ms = median(&mut t2);
            LatencyStats {
                ttft_ms,
                tpot_ms,
                ttft_min_ms: ttfts[idx].iter().copied().fold(f64::MAX, f64::min),
                ttft_max_ms: ttfts[idx].iter().copied().fold(0.0, f64::max),
                tpot_min_ms: tpots[idx].iter().copied().fold(f64::MAX, f64::min),
                tpot_max_ms: tpots[idx].iter().copied().fold(0.0, f64::max),
                timer_unreliable: resolution > 0.01 * ttft_ms.min(tpot_ms),
            }
        })
        .collect())
}

/// One prompt+generation cycle. With `timed`, every model pass runs twice
/// on identical state and the second pass is timed.
fn run_once<E: Element>(
    model: &TransformerModel<E>,
    prompt: &[u32],
    gen_len: usize,
    timed: bool,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::inference();
    let mut cache = model.new_cache();

    let ttft = if timed {
        let mut scratch = cache.clone();
        model.prefill(&mut tape, prompt, &mut scratch)?;
        let t0 = Instant::now();
        let logits = model.prefill(&mut tape, prompt, &mut cache)?;
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        (dt, logits)
    } else {
        (0.0, model.prefill(&mut tape, prompt, &mut cache)?)
    };
    let (ttft_ms, mut logits) = ttft;

    let mut steps = Vec::with_capacity(gen_len);
    let mut token = argmax_col(&logits);
    for _ in 0..gen_len {
        if timed {
            let mut scratch = cache.clone();
            model.decode_step(&mut tape, token, &mut scratch)?;
            let t0 = Instant::now();
            logits = model.decode_step(&mut tape, token, &mut cache)?;
            steps.push(t0.elapsed().as_secs_f64() * 1e3);
        } else {
            logits = model.decode_step(&mut tape, token, &mut cache)?;
        }
        token = argmax_col(&logits);
    }
    Ok((ttft_ms, steps))
}

#[derive(Debug, Clone, Serialize)]
pub struct OpCountReport {
    /// Exact counts for the whole prefill pass.
    pub prefill: OpCounter,
    /// Exact counts for one decode step (identical across steps).
    pub per_decode_step: OpCounter,
}

/// Instrumented decode: exact sequential-op counts, a pure function of
/// (config, variant, prompt_len, gen_len).
pub fn count_ops<E: Element>(
    model: &TransformerModel<E>,
    prompt_len: usize,
    gen_len: usize,
) -> Result<OpCountReport> {
    if prompt_len == 0 || gen_len == 0 {
        return Err(Error::Config("count_ops requires positive prompt_len and gen_len".into()));
    }
    let prompt = random_prompt(prompt_len, model.config().vocab_size, 0);
    let mut tape = Tape::inference();
    let mut cache = model.new_cache();
    let logits = model.prefill(&mut tape, &prompt, &mut cache)?;
    let prefill = tape.take_counter();

    let mut token = argmax_col(&logits);
    for _ in 0..gen_len {
        let logits = model.decode_step(&mut tape, token, &mut cache)?;
        token = argmax_col(&logits);
    }
    let decode_total = tape.take_counter();
    Ok(OpCountReport { prefill, per_decode_step: decode_total.div_exact(gen_len as u64) })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub variant: String,
    pub params_trainable: u64,
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    /// 100 * (tpot - tpot_base) / tpot_base, from the same run batch.
    pub pct_increase: f64,
    /// Adapter-attributed ops per decode step (the CSV ledger columns).
    pub ops_adapter: CategoryCounts,
    /// Base-attributed ops per decode step.
    pub ops_base: CategoryCounts,
    /// Adapter-attributed ops per decode step, by projection site.
    pub per_site: BTreeMap<String, CategoryCounts>,
    pub latency: LatencyStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnvMeta {
    pub host: String,
    pub precision: String,
    pub repeats: usize,
    pub seed: u64,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub pinned: bool,
    pub timer_resolution_ms: f64,
    pub threads_available: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub env: EnvMeta,
}

/// The full latency-table variant list at one rank.
pub fn standard_specs(rank: usize) -> Vec<(String, AdapterSpec)> {
    let mut specs: Vec<(String, AdapterSpec)> = vec![("base".into(), AdapterSpec::none())];
    for v in [
        Variant::Lora,
        Variant::PfLora,
        Variant::Ffa,
        Variant::FfbaAb,
        Variant::FfbaAorb,
        Variant::FfbaQgAdd,
        Variant::Fpa,
    ] {
        specs.push((v.name().to_string(), AdapterSpec::new(v, rank)));
    }
    specs.push((
        "ffba_relu_aorb".into(),
        AdapterSpec::new(Variant::FfbaAorb, rank).with_nonlinearity(Nonlinearity::Relu),
    ));
    specs
}

/// Builds one model per spec (shared base weights via the seed), measures
/// latency, counts ops, and assembles the report. The base row is always
/// included and anchors the percentage column.
pub fn run_bench<E: Element>(
    shape: &ModelConfig,
    specs: &[(String, AdapterSpec)],
    params: &BenchParams,
) -> Result<BenchReport> {
    params.validate()?;
    let mut all = specs.to_vec();
    if !all.iter().any(|(_, s)| s.variant == Variant::None) {
        all.insert(0, ("base".into(), AdapterSpec::none()));
    }

    let mut models = Vec::new();
    for (label, spec) in &all {
        let cfg = shape.clone().with_adapter(spec.clone());
        let model =
            randomized_adapters(TransformerModel::<E>::new(cfg.clone(), params.seed)?, &cfg)?;
        models.push((label.clone(), cfg, model));
    }
    let refs: Vec<&TransformerModel<E>> = models.iter().map(|(_, _, m)| m).collect();
    let stats = measure_latency_group(
        &refs,
        params.prompt_len,
        params.gen_len,
        params.repeats,
        params.seed,
    )?;

    let mut rows = Vec::new();
    let mut base_tpot = None;
    for ((label, cfg, model), latency) in models.iter().zip(stats) {
        let ops = count_ops(model, params.prompt_len, params.gen_len)?;
        if cfg.adapter.variant == Variant::None {
            base_tpot = Some(latency.tpot_ms);
        }
        rows.push(BenchRow {
            variant: label.clone(),
            params_trainable: param_count(cfg).trainable,
            ttft_ms: latency.ttft_ms,
            tpot_ms: latency.tpot_ms,
            pct_increase: 0.0,
            ops_adapter: ops.per_decode_step.adapter,
            ops_base: ops.per_decode_step.base,
            per_site: ops.per_decode_step.adapter_by_site,
            latency,
        });
    }

    let base = base_tpot.ok_or_else(|| {
        Error::Contract("bench requires the base row; the percent column is undefined".into())
    })?;
    for row in &mut rows {
        row.pct_increase = 100.0 * (row.tpot_ms - base) / base;
    }

    Ok(BenchReport {
        rows,
        env: EnvMeta {
            host: hostname(),
            precision: E::DTYPE.name().to_string(),
            repeats: params.repeats,
            seed: params.seed,
            prompt_len: params.prompt_len,
            gen_len: params.gen_len,
            pinned: process_pinned(),
            timer_resolution_ms: timer_resolution_ms(),
            threads_available: std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    })
}

/// Post-training realism: adapters carry nonzero values (op structure is
/// identical either way; values only guard against zero-operand shortcuts).
fn randomized_adapters<E: Element>(
    model: TransformerModel<E>,
    cfg: &ModelConfig,
) -> Result<TransformerModel<E>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xADA7);
    let mut tensors: BTreeMap<String, Tensor<E>> = model.all_tensors().into_iter().collect();
    for (name, t) in tensors.iter_mut() {
        if name.contains("adapter_") {
            *t = Tensor::from_fn(t.rows(), t.cols(), |_, _| {
                E::from_f64(rng.random_range(-0.05..0.05))
            });
        }
    }
    TransformerModel::from_tensors(cfg.clone(), tensors)
}

fn hostname() -> String {
    std::fs::read_to_string("/proc/sys/kernel/hostname")
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| "unknown".into())
}

/// Whether the process runs under a restricted CPU affinity mask.
fn process_pinned() -> bool {
    #[cfg(target_os = "linux")]
    {
        unsafe {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) == 0 {
                let allowed = libc::CPU_COUNT(&set) as usize;
                let online = std::thread::available_parallelism().map_or(allowed, |n| n.get());
                return allowed < online;
            }
        }
    }
    false
}

/// Writes report.csv, report.json, and report.md under `dir`.
pub fn emit_report(report: &BenchReport, dir: &Path) -> Result<()> {
    if !report.rows.iter().any(|r| r.variant == "base") {
        return Err(Error::Contract(
            "bench report is missing the base row; the percent column is undefined".into(),
        ));
    }
    std::fs::create_dir_all(dir)?;

    let mut csv = String::from(
        "variant,params_trainable,ttft_ms,tpot_ms,pct_increase,\
         ops_fused_matmul,ops_small_matmul,ops_add,ops_repeat_add,ops_concat\n",
    );
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{:.4},{:.4},{:.1},{},{},{},{},{}\n",
            r.variant,
            r.params_trainable,
            r.ttft_ms,
            r.tpot_ms,
            r.pct_increase,
            r.ops_adapter.fused_matmul,
            r.ops_adapter.small_matmul,
            r.ops_adapter.add,
            r.ops_adapter.repeat_add,
            r.ops_adapter.concat,
        ));
    }
    std::fs::write(dir.join("report.csv"), &csv)?;

    let json = serde_json::to_vec_pretty(report)?;
    std::fs::write(dir.join("report.json"), json)?;

    let mut md = String::from(
        "| Adapter | #Param | TTFT (ms) | TPOT (ms) | % increase |\n|---|---:|---:|---:|---:|\n",
    );
    for r in &report.rows {
        md.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.1} |\n",
            r.variant,
            crate::verify::human_millions(r.params_trainable),
            r.ttft_ms,
            r.tpot_ms,
            r.pct_increase,
        ));
    }
    std::fs::write(dir.join("report.md"), md)?;
    Ok(())
}
