pub mod bins_trace;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod train;

use std::path::Path;

use image::DynamicImage;

use depthar::numerics::{Scalar, Tensor};
use depthar::{Error, Result};

use crate::config::{self, RunConfig};

/// Flags shared by every subcommand that reads a run configuration.
/// Precedence, lowest to highest: defaults, --preset, --config, --set.
#[derive(clap::Args, Debug)]
pub struct ConfigArgs {
    /// Named settings bundle: "test" (small) or "train" (large).
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    /// TOML run configuration; built-in defaults are used when omitted.
    #[arg(long, value_name = "FILE")]
    pub config: Option<std::path::PathBuf>,
    /// Override one configuration key, e.g. --set train.lr=3e-4. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        config::load(self.preset.as_deref(), self.config.as_deref(), &self.sets)
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

/// Loads a grayscale PNG as a `[1, h, w]` intensity map in `[0, 1]`.
pub(crate) fn read_intensity_png<F: Scalar>(path: &Path, h: usize, w: usize) -> Result<Tensor<F>> {
    let img = image::open(path)?;
    let (iw, ih) = (img.width() as usize, img.height() as usize);
    if (ih, iw) != (h, w) {
        return Err(Error::shape(
            "input image",
            format!("{} is {ih}x{iw}, model expects {h}x{w}", path.display()),
        ));
    }
    let data: Vec<F> = match img {
        DynamicImage::ImageLuma8(b) => b
            .into_raw()
            .into_iter()
            .map(|v| F::lit(v as f64 / 255.0))
            .collect(),
        DynamicImage::ImageLuma16(b) => b
            .into_raw()
            .into_iter()
            .map(|v| F::lit(v as f64 / 65535.0))
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "expected 8- or 16-bit grayscale PNG, got {:?}",
                other.color()
            )))
        }
    };
    Tensor::from_vec(&[1, h, w], data)
}
