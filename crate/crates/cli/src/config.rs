//! Run configuration: built-in defaults, an optional named preset, an
//! optional TOML file, and `--set section.key=value` overrides applied
//! in that order (later layers win).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use depthar::evalio::SceneConfig;
use depthar::numerics::UpsampleMode;
use depthar::pipeline::{AdamWConfig, ModelConfig, StepSchedule};
use depthar::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub io: IoSection,
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("serializing config: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub n_bins: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Comma-separated step grids, e.g. `"4x4,8x8,16x16"`; a bare `"4"`
    /// means `4x4`.
    pub schedule: String,
    pub input_h: usize,
    pub input_w: usize,
    pub shared_blocks: bool,
    /// `"nearest"` or `"bilinear"`.
    pub feat_upsample: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: 64,
            heads: 4,
            layers: 2,
            n_bins: 16,
            d_min: 0.1,
            d_max: 10.0,
            schedule: "4x4,8x8,16x16".into(),
            input_h: 16,
            input_w: 16,
            shared_blocks: true,
            feat_upsample: "bilinear".into(),
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> Result<ModelConfig> {
        let schedule = parse_schedule(&self.schedule)?;
        let feat_upsample: UpsampleMode = self.feat_upsample.parse()?;
        let cfg = ModelConfig {
            hidden: self.hidden,
            heads: self.heads,
            layers: self.layers,
            n_bins: self.n_bins,
            d_min: self.d_min,
            d_max: self.d_max,
            schedule,
            input_h: self.input_h,
            input_w: self.input_w,
            shared_blocks: self.shared_blocks,
            feat_upsample,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_schedule(s: &str) -> Result<StepSchedule> {
    let mut dims = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        let (h, w) = match part.split_once('x') {
            Some((a, b)) => (parse_dim(a)?, parse_dim(b)?),
            None => {
                let side = parse_dim(part)?;
                (side, side)
            }
        };
        dims.push((h, w));
    }
    StepSchedule::new(dims)
}

fn parse_dim(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad schedule entry {s:?}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    /// Parameter initialization seed.
    pub seed: u64,
    /// Also write a checkpoint every this many iterations (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            iters: 100,
            batch_size: 1,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_frac: 0.1,
            seed: 7,
            checkpoint_every: 0,
        }
    }
}

impl TrainSection {
    pub fn optimizer(&self) -> Result<AdamWConfig> {
        let cfg = AdamWConfig {
            warmup_frac: self.warmup_frac,
            ..AdamWConfig::new(self.lr, self.weight_decay, self.iters)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Training scenes, seeded `base_seed..base_seed + scenes`.
    pub scenes: usize,
    /// Held-out scenes, seeded directly after the training ones.
    pub holdout: usize,
    pub base_seed: u64,
    pub invalid_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            scenes: 8,
            holdout: 2,
            base_seed: 100,
            invalid_frac: 0.0,
        }
    }
}

impl DataSection {
    /// Scene template at the model's input size and depth range.
    pub fn template(&self, model: &ModelConfig) -> SceneConfig {
        SceneConfig {
            h: model.input_h,
            w: model.input_w,
            d_min: model.d_min,
            d_max: model.d_max,
            invalid_frac: self.invalid_frac,
            seed: 0,
        }
    }

    pub fn holdout_base_seed(&self) -> u64 {
        self.base_seed.wrapping_add(self.scenes as u64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    /// Meters-to-code scale for 16-bit depth PNGs.
    pub png_scale: f64,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection { png_scale: 1000.0 }
    }
}

/// Settings bundles selectable with `--preset`. `test` is a small model
/// for checks and smoke runs; `train` is the larger training shape.
pub fn preset_table(name: &str) -> Result<toml::Table> {
    let text = match name {
        "test" => {
            "[model]\n\
             hidden = 64\n\
             heads = 4\n\
             layers = 2\n\
             schedule = \"4x4,8x8,16x16\"\n\
             input_h = 16\n\
             input_w = 16\n"
        }
        "train" => {
            "[model]\n\
             hidden = 256\n\
             heads = 8\n\
             layers = 5\n\
             schedule = \"4x4,8x8,16x16,32x32\"\n\
             input_h = 32\n\
             input_w = 32\n\
             [train]\n\
             iters = 600\n\
             batch_size = 8\n\
             lr = 3e-4\n\
             [data]\n\
             scenes = 512\n\
             holdout = 64\n"
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected \"test\" or \"train\""
            )))
        }
    };
    text.parse()
        .map_err(|e| Error::Format(format!("preset {name}: {e}")))
}

/// Loads defaults, then the preset, then the file, then each override.
pub fn load(preset: Option<&str>, path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut root = match preset {
        Some(name) => preset_table(name)?,
        None => toml::Table::new(),
    };
    if let Some(p) = path {
        let text = fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
        let file: toml::Table = text
            .parse()
            .map_err(|e| Error::Format(format!("config {}: {e}", p.display())))?;
        merge_into(&mut root, file);
    }
    for spec in sets {
        apply_set(&mut root, spec)?;
    }
    toml::Value::Table(root)
        .try_into()
        .map_err(|e| Error::Format(format!("config: {e}")))
}

/// Key-wise merge with `over` winning; tables merge recursively.
fn merge_into(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match v {
            toml::Value::Table(o) => {
                let slot = base
                    .entry(k)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                match slot {
                    toml::Value::Table(b) => merge_into(b, o),
                    other => *other = toml::Value::Table(o),
                }
            }
            v => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_set(root: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((path, raw)) = spec.split_once('=') else {
        return Err(Error::Config(format!(
            "override {spec:?} must look like section.key=value"
        )));
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key {path:?} is malformed")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        table = table
            .entry(k.to_string())
            .or_insert(toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override path {path:?} crosses a non-table value"))
            })?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_override(raw));
    Ok(())
}

/// Parses the right-hand side as a TOML value, falling back to a plain
/// string (so `--set model.schedule=4x4,8x8` works unquoted).
fn parse_override(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
