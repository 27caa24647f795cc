//! Throwaway timing probe for the hot forward/backward kernels at the
//! shapes the smoke tests exercise. Not part of the test suite.

use std::time::Instant;

use depthar::numerics::{kernels, Graph, Tensor};
use depthar::pipeline::{si_log_total, Dar, ModelConfig, StepSchedule, TrainSample};

fn fill(t: &mut Tensor<f32>, seed: u64) {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    for v in t.data_mut() {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        *v = ((s >> 40) as f32 / (1u64 << 24) as f32) - 0.5;
    }
}

fn timed<R>(label: &str, reps: usize, mut f: impl FnMut() -> R) {
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(f());
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("{label:<46} {:>9.3} ms", dt * 1e3);
}

fn main() {
    // Token layout of the 16x16,64x64 schedule: 256 + 4096 tokens.
    let t1 = 256usize;
    let t2 = 4096usize;
    let tq = t1 + t2;
    let d = 16usize; // head dim at hidden 64 / 4 heads
    let hidden = 64usize;
    let mut plens = vec![t1; t1];
    plens.extend(std::iter::repeat(tq).take(t2));

    let mut q = Tensor::<f32>::zeros(&[tq, d]);
    let mut k = Tensor::<f32>::zeros(&[tq, d]);
    let mut v = Tensor::<f32>::zeros(&[tq, d]);
    fill(&mut q, 1);
    fill(&mut k, 2);
    fill(&mut v, 3);
    let scale = 1.0 / (d as f64).sqrt();

    let probs = kernels::attn_probs_prefix(&q, &k, scale, &plens).unwrap();
    let out = kernels::matmul_prefix(&probs, &v, &plens).unwrap();
    let mut gprobs = Tensor::<f32>::zeros(&[tq, tq]);
    fill(&mut gprobs, 9);
    timed("attn_probs_prefix 4352 tokens d16", 3, || {
        kernels::attn_probs_prefix(&q, &k, scale, &plens).unwrap()
    });
    timed("matmul_prefix", 3, || {
        kernels::matmul_prefix(&probs, &v, &plens).unwrap()
    });
    timed("attn_probs_prefix_bwd", 3, || {
        kernels::attn_probs_prefix_bwd(&probs, &gprobs, &q, &k, scale, &plens)
    });
    timed("matmul_prefix_bwd", 3, || {
        kernels::matmul_prefix_bwd(&probs, &v, &out, &plens)
    });
    // Softmax share: exp over the same number of entries.
    let mut flat = vec![0.3f32; 17_891_072];
    timed("exp over 17.9M f32", 3, || {
        for v in flat.iter_mut() {
            *v = (*v - 0.25f32).exp();
        }
        flat[0]
    });

    let mut x = Tensor::<f32>::zeros(&[tq, hidden]);
    let mut wq = Tensor::<f32>::zeros(&[hidden, hidden]);
    fill(&mut x, 4);
    fill(&mut wq, 5);
    timed("matmul (4352,64)x(64,64)", 10, || {
        kernels::matmul(&x, &wq).unwrap()
    });
    let mut xb = Tensor::<f32>::zeros(&[1360, 256]);
    let mut wb = Tensor::<f32>::zeros(&[256, 256]);
    fill(&mut xb, 14);
    fill(&mut wb, 15);
    timed("matmul (1360,256)x(256,256)", 10, || {
        kernels::matmul(&xb, &wb).unwrap()
    });
    timed("matmul_nt (1360,256)x(1360,256)^T.. (256)", 10, || {
        kernels::matmul_nt(&xb, &wb).unwrap()
    });
    timed("matmul_tn (1360,256)^T x (1360,256)", 10, || {
        kernels::matmul_tn(&xb, &xb).unwrap()
    });

    let mut img = Tensor::<f32>::zeros(&[1, 64, 64]);
    fill(&mut img, 6);
    let mut cw = Tensor::<f32>::zeros(&[hidden, hidden, 3, 3]);
    fill(&mut cw, 7);
    let cb = Tensor::<f32>::zeros(&[hidden]);
    let mut feat = Tensor::<f32>::zeros(&[hidden, 64, 64]);
    fill(&mut feat, 8);
    timed("conv2d 3x3 64ch 64x64", 3, || {
        kernels::conv2d_fwd(&feat, &cw, &cb, 1).unwrap()
    });

    // Whole train-like iteration: forward + loss + backward.
    let cfg = ModelConfig::test_preset(StepSchedule::square(&[16, 64]).unwrap(), 64, 64);
    let mut model: Dar<f32> = Dar::new(cfg.clone(), 1).unwrap();
    let mut gt = depthar::mtbin::DepthMap::full_valid(64, 64, vec![1.0; 4096]).unwrap();
    for (i, dv) in gt.depth_mut().iter_mut().enumerate() {
        *dv = 0.2 + 9.0 * ((i % 97) as f64 / 97.0);
    }
    let sample = TrainSample {
        image: img.clone(),
        gt,
    };
    let t0 = Instant::now();
    let mut g: Graph<f32> = Graph::new();
    let fwd = model.forward(&mut g, &sample.image, cfg.steps()).unwrap();
    println!("{:<46} {:>9.3} ms", "model.forward 16,64", t0.elapsed().as_secs_f64() * 1e3);
    let t0 = Instant::now();
    let loss = si_log_total(&mut g, &fwd, &sample.gt, cfg.d_min, cfg.d_max).unwrap();
    println!("{:<46} {:>9.3} ms", "si_log_total", t0.elapsed().as_secs_f64() * 1e3);
    let t0 = Instant::now();
    g.backward(loss).unwrap();
    println!("{:<46} {:>9.3} ms", "backward", t0.elapsed().as_secs_f64() * 1e3);
    let _ = model;
}
