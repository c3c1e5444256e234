use texshield_core::harness::{evaluate, train, LambdaSetting, RunConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(600);
    let variant = args.get(2).cloned().unwrap_or_else(|| "full".into());
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);
    let lr: f32 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2.5e-4);
    let mut cfg = RunConfig { iterations: iters, lr, ..RunConfig::default() };
    match variant.as_str() {
        "full" => {}
        "wo_afm" => cfg.no_afm = true,
        "fixed1" => cfg.lambda_mode = LambdaSetting::Fixed(1.0),
        "fixed2" => cfg.lambda_mode = LambdaSetting::Fixed(2.0),
        other => panic!("unknown variant {other}"),
    }
    let t0 = Instant::now();
    let out = train(&cfg, seed, None).unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    let first = &out.loss_rows[0];
    let last = out.loss_rows.last().unwrap();
    eprintln!("[{variant} seed {seed}] {iters} iters in {train_time:.0}s; loss {:.3} -> {:.3} (seg {:.3} -> {:.3})",
        first.total, last.total, first.seg, last.seg);
    let evals = evaluate(&out.models, &cfg, seed).unwrap();
    for e in &evals {
        eprintln!("  {:<14} miou {:.4}  mean_lambda {:.3}", e.domain, e.miou, e.mean_lambda);
    }
    let tgt: Vec<f64> = evals.iter().filter(|e| e.domain != "src_textured").map(|e| e.miou).collect();
    eprintln!("  target mean: {:.4}", tgt.iter().sum::<f64>() / tgt.len() as f64);
}
