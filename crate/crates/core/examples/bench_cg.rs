use texshield_core::filter::{self, GuidedImage, SolveOptions};
use texshield_core::scene;
use std::time::Instant;

fn main() {
    let domains = scene::benchmark_domains(4);
    let s = scene::gen_sample(&domains[0], 64, 1, 0).unwrap();
    let img = GuidedImage::unguided(s.image.clone()).unwrap();
    for lambda in [0.5f32, 1.0, 2.0, 4.0] {
        for tol in [1e-6f64, 1e-4] {
            let t0 = Instant::now();
            let res = filter::solve_wls(&img, lambda, &SolveOptions { tol, max_iter: None }).unwrap();
            let dt = t0.elapsed().as_secs_f64() * 1000.0;
            let (ds, _) = filter::ds_dlambda(&img, &res, &SolveOptions { tol, max_iter: None }).unwrap();
            let dt2 = t0.elapsed().as_secs_f64() * 1000.0 - dt;
            println!("λ={lambda} tol={tol:.0e}: iters={:?} res={:.1e} solve={dt:.1}ms dsdl={dt2:.1}ms  |ds|max={:.3}",
                res.cg_iterations, res.final_residual[0], ds.max_abs());
        }
    }
}
