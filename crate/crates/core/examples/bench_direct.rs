use texshield_core::filter::{self, GuidedImage, SolveOptions};
use texshield_core::scene;
use std::time::Instant;

fn main() {
    let domains = scene::benchmark_domains(4);
    let s = scene::gen_sample(&domains[0], 64, 1, 0).unwrap();
    let img = GuidedImage::unguided(s.image.clone()).unwrap();
    let system = filter::compute_weights(&img);
    let opts = SolveOptions::direct();
    let t0 = Instant::now();
    let n = 20;
    for _ in 0..n {
        let (res, ds) = filter::decompose_with_derivative(&system, &img, 1.5, &opts, true).unwrap();
        assert!(res.converged && ds.is_some());
    }
    println!("decompose+ds (direct): {:.1}ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
    let t0 = Instant::now();
    for _ in 0..n { let _ = filter::compute_weights(&img); }
    println!("compute_weights: {:.2}ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
