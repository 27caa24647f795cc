use std::path::{Path, PathBuf};

use depthar::evalio::{
    compute_metrics, generate_dataset, mean_metrics, DepthMetrics, Scene, CSV_HEADER,
};
use depthar::mtbin::DepthMap;
use depthar::numerics::{Graph, Scalar};
use depthar::pipeline::{load_for_config, Dar};
use depthar::{Error, Result};

use super::{create_dir, write_file, ConfigArgs};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint to evaluate; its config digest must match.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Directory for metrics CSVs (metrics are printed regardless).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    let rc = args.config.load()?;
    let mcfg = rc.model.to_model_config()?;
    if rc.data.holdout == 0 {
        return Err(Error::Config("data.holdout must be positive for eval".into()));
    }
    let store = load_for_config(&args.checkpoint, &mcfg)?;
    let model = Dar::from_parts(mcfg.clone(), store)?;
    let holdout = generate_dataset(
        &rc.data.template(&mcfg),
        rc.data.holdout,
        rc.data.holdout_base_seed(),
    )?;
    let per_step = evaluate_per_step(&model, &holdout)?;
    print_metrics(&per_step);
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_metrics(dir, &per_step)?;
    }
    Ok(())
}

/// Mean metrics over `scenes` for each refinement step's full-resolution
/// prediction. Entry `k` covers step `k + 1`.
pub(crate) fn evaluate_per_step(model: &Dar<f32>, scenes: &[Scene]) -> Result<Vec<DepthMetrics>> {
    let k = model.config().steps();
    let (h, w) = (model.config().input_h, model.config().input_w);
    let d_max = model.config().d_max;
    let mut per_step: Vec<Vec<DepthMetrics>> = vec![Vec::new(); k];
    for scene in scenes {
        let sample = scene.to_sample::<f32>();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &sample.image, k)?;
        for (ki, &var) in fwd.step_full.iter().enumerate() {
            let depth: Vec<f64> = g.value(var).data().iter().map(|v| v.as_f64()).collect();
            let pred = DepthMap::full_valid(h, w, depth)?;
            per_step[ki].push(compute_metrics(&pred, &scene.gt, d_max)?);
        }
    }
    per_step.iter().map(|rows| mean_metrics(rows)).collect()
}

/// Writes `metrics_steps.csv` (row k is step k + 1) and
/// `metrics_final.csv` (the last step only).
pub(crate) fn write_metrics(dir: &Path, per_step: &[DepthMetrics]) -> Result<()> {
    let mut steps_csv = String::from(CSV_HEADER);
    steps_csv.push('\n');
    for m in per_step {
        steps_csv.push_str(&m.to_csv_row());
        steps_csv.push('\n');
    }
    write_file(&dir.join("metrics_steps.csv"), &steps_csv)?;
    let last = per_step
        .last()
        .ok_or_else(|| Error::numerical("eval", "no steps evaluated"))?;
    write_file(
        &dir.join("metrics_final.csv"),
        &format!("{CSV_HEADER}\n{}\n", last.to_csv_row()),
    )
}

pub(crate) fn print_metrics(per_step: &[DepthMetrics]) {
    for (k, m) in per_step.iter().enumerate() {
        println!(
            "step {} abs_rel {:.4} rmse {:.4} delta1 {:.4} delta2 {:.4} delta3 {:.4}",
            k + 1,
            m.abs_rel,
            m.rmse,
            m.delta1,
            m.delta2,
            m.delta3
        );
    }
}
