use std::path::PathBuf;

use depthar::evalio::{generate_scene, SceneConfig};
use depthar::mtbin::{locate_px, trace_line};
use depthar::numerics::{Graph, Tensor};
use depthar::pipeline::{load_for_config, Dar};
use depthar::{Error, Result};

use super::{read_intensity_png, ConfigArgs};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Probe pixel "row,col" at input resolution (default: center).
    #[arg(long, value_name = "ROW,COL")]
    pub px: Option<String>,
    /// Parameters checkpoint; a fresh seeded init is traced when omitted.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Grayscale input PNG; a synthetic probe scene is used when omitted.
    #[arg(long, value_name = "FILE")]
    pub image: Option<PathBuf>,
    /// Seed for the synthetic probe scene.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: Args) -> Result<()> {
    let rc = args.config.load()?;
    let mcfg = rc.model.to_model_config()?;
    let (full_h, full_w) = (mcfg.input_h, mcfg.input_w);
    let (py, px) = match &args.px {
        Some(s) => parse_px(s, full_h, full_w)?,
        None => (full_h / 2, full_w / 2),
    };
    // Image and (when synthetic) the ground truth at the probe pixel.
    let (image, gt): (Tensor<f64>, Option<f64>) = match &args.image {
        Some(path) => (read_intensity_png::<f64>(path, full_h, full_w)?, None),
        None => {
            let scene_cfg = SceneConfig {
                seed: rc.data.base_seed.wrapping_add(args.seed),
                ..rc.data.template(&mcfg)
            };
            let scene = generate_scene(&scene_cfg)?;
            let gt = scene.gt.depth()[py * full_w + px];
            (scene.to_sample::<f64>().image, Some(gt))
        }
    };
    let model: Dar<f64> = match &args.checkpoint {
        Some(path) => Dar::from_parts(mcfg.clone(), load_for_config(path, &mcfg)?.cast())?,
        None => Dar::new(mcfg.clone(), rc.train.seed)?,
    };
    let mut g: Graph<f64> = Graph::new();
    let fwd = model.forward(&mut g, &image, mcfg.steps())?;

    match gt {
        Some(d) => println!("probe pixel ({py},{px}) of {full_h}x{full_w}, gt depth {d:.6}"),
        None => println!("probe pixel ({py},{px}) of {full_h}x{full_w}"),
    }
    let full_range = mcfg.d_max - mcfg.d_min;
    let mut first_width = 0.0;
    let mut width = 0.0;
    for k in 0..mcfg.steps() {
        let (hk, wk) = mcfg.schedule.dim(k);
        let p = (py * hk / full_h) * wk + px * wk / full_w;
        let bounds = fwd.bins[k].bounds_at(p);
        let depth = g.value(fwd.step_native[k]).data()[p];
        let t = locate_px(bounds, depth);
        println!("{}", trace_line(k + 1, t, depth, bounds));

        if bounds.windows(2).any(|pair| pair[1] <= pair[0]) {
            return Err(Error::numerical(
                "bins-trace",
                format!("bounds not strictly ascending at step {}", k + 1),
            ));
        }
        if bounds[0] < mcfg.d_min - 1e-12 || bounds[bounds.len() - 1] > mcfg.d_max + 1e-12 {
            return Err(Error::numerical(
                "bins-trace",
                format!("bounds escape the depth range at step {}", k + 1),
            ));
        }
        width = bounds[bounds.len() - 1] - bounds[0];
        // Each refinement re-splits at most a three-bin window of its
        // (upsampled) parent state, so the range contracts geometrically.
        let cap = full_range * (3.0 / mcfg.n_bins as f64).powi(k as i32) * (1.0 + 1e-9);
        if width > cap {
            return Err(Error::numerical(
                "bins-trace",
                format!("range width {width} exceeds the step-{} cap {cap}", k + 1),
            ));
        }
        if k == 0 {
            first_width = width;
        }
    }
    println!(
        "trace OK: range width {first_width:.6} -> {width:.9} over {} steps",
        mcfg.steps()
    );
    Ok(())
}

fn parse_px(s: &str, h: usize, w: usize) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--px {s:?} must be \"row,col\""));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let row: usize = a.trim().parse().map_err(|_| bad())?;
    let col: usize = b.trim().parse().map_err(|_| bad())?;
    if row >= h || col >= w {
        return Err(Error::Config(format!(
            "--px ({row},{col}) outside the {h}x{w} input"
        )));
    }
    Ok((row, col))
}
