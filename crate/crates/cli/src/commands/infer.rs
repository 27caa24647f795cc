use std::path::PathBuf;

use depthar::evalio::write_depth_png;
use depthar::mtbin::DepthMap;
use depthar::numerics::{Graph, Scalar};
use depthar::pipeline::{load_for_config, Dar};
use depthar::Result;

use super::{read_intensity_png, ConfigArgs};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Grayscale input PNG (8- or 16-bit) at the model's input size.
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// Output 16-bit depth PNG (scaled by io.png_scale).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let rc = args.config.load()?;
    let mcfg = rc.model.to_model_config()?;
    let store = load_for_config(&args.checkpoint, &mcfg)?;
    let model: Dar<f32> = Dar::from_parts(mcfg.clone(), store)?;

    let image = read_intensity_png::<f32>(&args.image, mcfg.input_h, mcfg.input_w)?;
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &image, mcfg.steps())?;
    let var = *fwd.step_full.last().expect("at least one step");
    let depth: Vec<f64> = g.value(var).data().iter().map(|v| v.as_f64()).collect();
    let (lo, hi) = depth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &d| {
            (l.min(d), h.max(d))
        });
    let map = DepthMap::full_valid(mcfg.input_h, mcfg.input_w, depth)?;
    write_depth_png(&args.out, &map, rc.io.png_scale)?;
    println!(
        "predicted depth in [{lo:.4}, {hi:.4}], written to {}",
        args.out.display()
    );
    Ok(())
}
