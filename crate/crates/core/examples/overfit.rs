//! Throwaway experiment driver: single-sample overfit quality vs. time.
//! Usage: overfit [iters] [lr] [seed] [wd]

use std::time::Instant;

use depthar::evalio::{compute_metrics, generate_scene, SceneConfig};
use depthar::mtbin::DepthMap;
use depthar::numerics::{Graph, Scalar};
use depthar::pipeline::{
    train_step, AdamW, AdamWConfig, Dar, ModelConfig, StepSchedule, TrainSample,
};

fn main() {
    depthar::tune_allocator_for_large_buffers();
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(120);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(7);
    let wd: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.0);

    let cfg =
        ModelConfig::test_preset(StepSchedule::square(&[16, 64]).unwrap(), 64, 64);
    let scene =
        generate_scene(&SceneConfig::new(64, 64, cfg.d_min, cfg.d_max, 42)).unwrap();
    let sample: TrainSample<f32> = scene.to_sample();

    let mut model: Dar<f32> = Dar::new(cfg.clone(), seed).unwrap();
    let mut opt = AdamW::new(AdamWConfig::new(lr, wd, iters), model.params()).unwrap();

    let t0 = Instant::now();
    for it in 0..iters {
        let out = train_step(&mut model, &mut opt, std::slice::from_ref(&sample)).unwrap();
        if it % 10 == 0 || it + 1 == iters {
            println!(
                "iter {it:>4} loss {:>10.6} lr {:.3e}  [{:.1}s]",
                out.loss,
                out.lr,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    let train_s = t0.elapsed().as_secs_f64();

    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &sample.image, cfg.steps()).unwrap();
    for (k, &var) in fwd.step_full.iter().enumerate() {
        let depth: Vec<f64> = g.value(var).data().iter().map(|v| v.as_f64()).collect();
        let pred = DepthMap::full_valid(64, 64, depth).unwrap();
        let m = compute_metrics(&pred, &scene.gt, cfg.d_max).unwrap();
        println!("step {} rmse {:.4} delta1 {:.4}", k + 1, m.rmse, m.delta1);
    }
    println!("total {train_s:.1}s  ({:.2} s/iter)", train_s / iters as f64);
}
