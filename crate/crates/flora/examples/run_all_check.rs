fn main() {
    let t = std::time::Instant::now();
    let report = flora::verify::run_all(7, None, 100).unwrap();
    println!("run_all: passed={} checks={} time={:.1}s", report.passed(), report.checks.len(), t.elapsed().as_secs_f64());
    for f in report.failures() { println!("FAIL: {} err={:?}", f.name, f.max_rel_err); }
}
