use flora::adapters::{AdapterSpec, Variant};
use flora::bench::{run_bench, BenchParams};
use flora::model::ModelConfig;
use std::time::Instant;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let gen_len: usize = a.get(1).map(|s| s.parse().unwrap()).unwrap_or(32);
    let repeats: usize = a.get(2).map(|s| s.parse().unwrap()).unwrap_or(5);
    let shape = ModelConfig::bench();
    let specs = vec![
        ("base".to_string(), AdapterSpec::none()),
        ("lora".to_string(), AdapterSpec::new(Variant::Lora, 32)),
        ("pf_lora".to_string(), AdapterSpec::new(Variant::PfLora, 32)),
        ("ffa".to_string(), AdapterSpec::new(Variant::Ffa, 32)),
        ("ffba_ab".to_string(), AdapterSpec::new(Variant::FfbaAb, 32)),
        ("ffba_aorb".to_string(), AdapterSpec::new(Variant::FfbaAorb, 32)),
    ];
    let params = BenchParams { prompt_len: 32, gen_len, repeats, seed: 17 };
    let t = Instant::now();
    let report = run_bench::<f32>(&shape, &specs, &params).unwrap();
    for r in &report.rows {
        println!("{:<12} tpot {:.4} ms  ttft {:.3} ms  (min {:.4} max {:.4})",
            r.variant, r.tpot_ms, r.ttft_ms, r.latency.tpot_min_ms, r.latency.tpot_max_ms);
    }
    println!("total bench time {:.1}s", t.elapsed().as_secs_f64());
}
