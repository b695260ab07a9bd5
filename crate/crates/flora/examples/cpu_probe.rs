use flora::tape::Tape;
use flora::tensor::Tensor;
use std::time::Instant;

fn main() {
    // fixed matvec workload: 576x512 f32, 200 reps
    let a = Tensor::<f32>::from_fn(576, 512, |i, j| ((i * 7 + j) as f32 * 0.001).sin());
    let x = Tensor::<f32>::from_fn(512, 1, |i, _| (i as f32 * 0.01).cos());
    let mut tape = Tape::inference();
    for _ in 0..20 { tape.matmul(&a, &x).unwrap(); }
    let t0 = Instant::now();
    let n = 200;
    for _ in 0..n { std::hint::black_box(tape.matmul(&a, &x).unwrap()); }
    let dt = t0.elapsed().as_secs_f64();
    let macs = 576.0 * 512.0 * n as f64;
    println!("matvec 576x512 f32: {:.1} us/call, {:.2} GMAC/s", dt / n as f64 * 1e6, macs / dt / 1e9);
    // steal time
    let stat = std::fs::read_to_string("/proc/stat").unwrap();
    println!("{}", stat.lines().next().unwrap());
}
