use texshield_core::harness::{train, RunConfig};
use std::time::Instant;

fn main() {
    let cfg = RunConfig { iterations: 20, train_size: 16, ..RunConfig::default() };
    let t0 = Instant::now();
    let out = train(&cfg, 1, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("20 iters (adaptive): {:.2}s total, {:.3}s/iter", dt, dt / 20.0);
    println!("first loss {:.4}, last {:.4}", out.loss_rows[0].total, out.loss_rows.last().unwrap().total);

    let cfg2 = RunConfig { iterations: 20, train_size: 16, no_afm: true, ..RunConfig::default() };
    let t0 = Instant::now();
    let _ = train(&cfg2, 1, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("20 iters (no_afm):   {:.2}s total, {:.3}s/iter", dt, dt / 20.0);
}
