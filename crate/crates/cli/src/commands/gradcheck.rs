use depthar::evalio::{generate_scene, SceneConfig};
use depthar::numerics::{finite_diff_check, FdSettings, Graph, Tensor};
use depthar::pipeline::{si_log_total, Dar};
use depthar::{Error, Result};

use super::ConfigArgs;

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 8)]
    pub coords: usize,
    /// Seed for coordinate sampling and the probe scene.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale analytic gradients by 1.01 first; the check must then fail.
    #[arg(long)]
    pub corrupt_gradients: bool,
}

pub fn run(args: Args) -> Result<()> {
    let rc = args.config.load()?;
    let mcfg = rc.model.to_model_config()?;
    let k = mcfg.steps();
    let (d_min, d_max) = (mcfg.d_min, mcfg.d_max);

    let scene_cfg = SceneConfig {
        seed: rc.data.base_seed.wrapping_add(args.seed),
        ..rc.data.template(&mcfg)
    };
    let scene = generate_scene(&scene_cfg)?;
    let sample = scene.to_sample::<f64>();

    // Analytic gradients of the full training loss at the initial point.
    let mut model: Dar<f64> = Dar::new(mcfg.clone(), rc.train.seed)?;
    let mut g: Graph<f64> = Graph::new();
    let fwd = model.forward(&mut g, &sample.image, k)?;
    let loss = si_log_total(&mut g, &fwd, &sample.gt, d_min, d_max)?;
    g.backward(loss)?;
    let names: Vec<String> = model.params().names().to_vec();
    let inputs: Vec<Tensor<f64>> = model.params().tensors().to_vec();
    let mut analytic: Vec<Tensor<f64>> = fwd
        .bound
        .ordered
        .iter()
        .zip(&inputs)
        .map(|(&var, t)| match g.grad(var) {
            Some(grad) => grad.clone(),
            None => Tensor::zeros(t.shape()),
        })
        .collect();
    drop(g);

    if args.corrupt_gradients {
        println!("gradcheck: deliberately scaling analytic gradients by 1.01");
        for t in &mut analytic {
            for v in t.data_mut() {
                *v *= 1.01;
            }
        }
    }

    let settings = FdSettings {
        max_coords_per_input: Some(args.coords.max(1)),
        seed: args.seed,
        ..FdSettings::default()
    };
    let report = finite_diff_check(&inputs, &analytic, &settings, |xs| {
        for (t, x) in model.params_mut().tensors_mut().iter_mut().zip(xs) {
            t.data_mut().copy_from_slice(x.data());
        }
        let mut g: Graph<f64> = Graph::new();
        let fwd = model.forward(&mut g, &sample.image, k)?;
        let loss = si_log_total(&mut g, &fwd, &sample.gt, d_min, d_max)?;
        Ok(g.value(loss).data()[0])
    })?;

    let width = names.iter().map(String::len).max().unwrap_or(0);
    for (name, &err) in names.iter().zip(&report.per_input_max) {
        let verdict = if err < report.tol { "ok" } else { "FAIL" };
        println!("group {name:<width$}  max rel err {err:.3e}  {verdict}");
    }
    println!(
        "gradcheck: {} parameter groups, {} coordinates checked",
        inputs.len(),
        report.coords_checked
    );
    if let Some(worst) = &report.worst {
        println!(
            "gradcheck: worst rel err {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            worst.rel_err, names[worst.input], worst.coord, worst.analytic, worst.numeric
        );
    }
    if report.pass() {
        println!("gradcheck: PASS (tol {:.1e})", report.tol);
        Ok(())
    } else {
        Err(Error::numerical(
            "gradcheck",
            format!(
                "max rel err {:.3e} exceeds tol {:.1e}",
                report.max_rel_err, report.tol
            ),
        ))
    }
}
