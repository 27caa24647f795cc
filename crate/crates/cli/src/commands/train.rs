use std::path::PathBuf;

use depthar::evalio::{generate_dataset, Scene};
use depthar::pipeline::{write_checkpoint, AdamW, Dar, TrainSample};
use depthar::pipeline::train_step;
use depthar::{Error, Result};

use super::{create_dir, eval, write_file, ConfigArgs};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory for the config, loss curve, checkpoints and metrics.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Shorthand for --set train.seed=SEED.
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
    /// Shorthand for --set train.iters=N.
    #[arg(long, value_name = "N")]
    pub iters: Option<usize>,
}

pub fn run(args: Args) -> Result<()> {
    let mut rc = args.config.load()?;
    if let Some(seed) = args.seed {
        rc.train.seed = seed;
    }
    if let Some(iters) = args.iters {
        rc.train.iters = iters;
    }
    let mcfg = rc.model.to_model_config()?;
    if rc.train.iters == 0 || rc.train.batch_size == 0 || rc.data.scenes == 0 {
        return Err(Error::Config(
            "train.iters, train.batch_size and data.scenes must be positive".into(),
        ));
    }
    create_dir(&args.out)?;
    write_file(&args.out.join("config.toml"), &rc.to_toml()?)?;
    println!("model digest {}", mcfg.digest_hex());

    let template = rc.data.template(&mcfg);
    let train_scenes = generate_dataset(&template, rc.data.scenes, rc.data.base_seed)?;
    let samples: Vec<TrainSample<f32>> = train_scenes.iter().map(Scene::to_sample).collect();

    let mut model: Dar<f32> = Dar::new(mcfg.clone(), rc.train.seed)?;
    let mut opt = AdamW::new(rc.train.optimizer()?, model.params())?;
    let batch_size = rc.train.batch_size.min(samples.len());
    let report_every = (rc.train.iters / 10).max(1);
    let mut loss_csv = String::from("iter,loss,lr\n");
    for it in 0..rc.train.iters {
        let batch: Vec<TrainSample<f32>> = (0..batch_size)
            .map(|j| samples[(it * batch_size + j) % samples.len()].clone())
            .collect();
        let outcome = train_step(&mut model, &mut opt, &batch)?;
        loss_csv.push_str(&format!("{it},{},{}\n", outcome.loss, outcome.lr));
        if it % report_every == 0 || it + 1 == rc.train.iters {
            println!("iter {it:>5} loss {:>10.6} lr {:.3e}", outcome.loss, outcome.lr);
        }
        if rc.train.checkpoint_every > 0
            && (it + 1) % rc.train.checkpoint_every == 0
            && it + 1 != rc.train.iters
        {
            let path = args.out.join(format!("checkpoint_{:06}.bin", it + 1));
            write_checkpoint(&path, &mcfg, model.params())?;
        }
    }
    write_file(&args.out.join("loss.csv"), &loss_csv)?;
    let ckpt = args.out.join("checkpoint_final.bin");
    write_checkpoint(&ckpt, &mcfg, model.params())?;
    println!("checkpoint written to {}", ckpt.display());

    if rc.data.holdout > 0 {
        let holdout =
            generate_dataset(&template, rc.data.holdout, rc.data.holdout_base_seed())?;
        let per_step = eval::evaluate_per_step(&model, &holdout)?;
        eval::print_metrics(&per_step);
        eval::write_metrics(&args.out, &per_step)?;
    }
    Ok(())
}
