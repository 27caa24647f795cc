//! Model configuration: resolution schedule, architecture sizes, presets,
//! and a stable digest for checkpoint compatibility checks.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mtbin::DepthRangeConfig;
use crate::numerics::UpsampleMode;

/// Token-grid resolutions visited by the coarse-to-fine loop, coarsest
/// first. Consecutive entries grow by a shared power-of-two factor per
/// axis so features move between steps through repeated 2x upsampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSchedule {
    dims: Vec<(usize, usize)>,
}

impl StepSchedule {
    pub fn new(dims: Vec<(usize, usize)>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        for &(h, w) in &dims {
            if h == 0 || w == 0 {
                return Err(Error::Config(format!("empty step grid {h}x{w}")));
            }
        }
        for (k, pair) in dims.windows(2).enumerate() {
            let ((h1, w1), (h2, w2)) = (pair[0], pair[1]);
            if h2 % h1 != 0 || w2 % w1 != 0 {
                return Err(Error::Config(format!(
                    "step {} grid {h2}x{w2} must be a multiple of {h1}x{w1}",
                    k + 1
                )));
            }
            let (rh, rw) = (h2 / h1, w2 / w1);
            if rh != rw || !rh.is_power_of_two() {
                return Err(Error::Config(format!(
                    "step {} growth {rh}x{rw} must be the same power of two per axis",
                    k + 1
                )));
            }
        }
        Ok(StepSchedule { dims })
    }

    /// Square grids from a list of side lengths.
    pub fn square(sides: &[usize]) -> Result<Self> {
        StepSchedule::new(sides.iter().map(|&s| (s, s)).collect())
    }

    /// Number of steps.
    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty schedules
    }

    pub fn dims(&self) -> &[(usize, usize)] {
        &self.dims
    }

    pub fn dim(&self, k: usize) -> (usize, usize) {
        self.dims[k]
    }

    pub fn final_dim(&self) -> (usize, usize) {
        *self.dims.last().expect("non-empty")
    }

    /// Per-axis growth factor from step `k` to `k + 1` (a power of two,
    /// possibly 1).
    pub fn ratio_to_next(&self, k: usize) -> usize {
        self.dims[k + 1].0 / self.dims[k].0
    }

    /// Tokens per step, in step order.
    pub fn block_sizes(&self) -> Vec<usize> {
        self.dims.iter().map(|&(h, w)| h * w).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.block_sizes().iter().sum()
    }
}

/// Everything that determines the network's architecture and depth range.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub n_bins: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub schedule: StepSchedule,
    pub input_h: usize,
    pub input_w: usize,
    /// One block stack reused at every step (default), or a separate stack
    /// per step.
    pub shared_blocks: bool,
    /// Interpolation used when carrying features to the next resolution.
    pub feat_upsample: UpsampleMode,
}

/// Factor by which the image encoder reduces each spatial axis.
pub const ENCODER_STRIDE: usize = 8;

impl ModelConfig {
    /// Small architecture for tests and gradient checks.
    pub fn test_preset(schedule: StepSchedule, input_h: usize, input_w: usize) -> Self {
        ModelConfig {
            hidden: 64,
            heads: 4,
            layers: 2,
            n_bins: 16,
            d_min: 0.1,
            d_max: 10.0,
            schedule,
            input_h,
            input_w,
            shared_blocks: true,
            feat_upsample: UpsampleMode::Bilinear,
        }
    }

    /// Full training architecture.
    pub fn train_preset(schedule: StepSchedule, input_h: usize, input_w: usize) -> Self {
        ModelConfig {
            hidden: 256,
            heads: 8,
            layers: 5,
            ..ModelConfig::test_preset(schedule, input_h, input_w)
        }
    }

    pub fn depth_range(&self) -> Result<DepthRangeConfig> {
        DepthRangeConfig::new(self.d_min, self.d_max, self.n_bins)
    }

    pub fn steps(&self) -> usize {
        self.schedule.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads must divide hidden size {}",
                self.heads, self.hidden
            )));
        }
        if self.hidden % 4 != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be divisible by 4 for the encoder pyramid",
                self.hidden
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("need at least one block layer".into()));
        }
        self.depth_range()?;
        if self.d_min <= 0.0 {
            return Err(Error::Config(format!(
                "d_min must be positive for log-depth losses, got {}",
                self.d_min
            )));
        }
        if self.input_h % ENCODER_STRIDE != 0 || self.input_w % ENCODER_STRIDE != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by {ENCODER_STRIDE}",
                self.input_h, self.input_w
            )));
        }
        let (fh, fw) = self.schedule.final_dim();
        for (axis, fin, inp) in [("height", fh, self.input_h), ("width", fw, self.input_w)] {
            if fin > inp || inp % fin != 0 || !(inp / fin).is_power_of_two() {
                return Err(Error::Config(format!(
                    "final step {axis} {fin} must divide input {axis} {inp} by a power of two"
                )));
            }
        }
        if self.input_h / fh != self.input_w / fw {
            return Err(Error::Config(format!(
                "final step grid {fh}x{fw} must scale uniformly to input {}x{}",
                self.input_h, self.input_w
            )));
        }
        Ok(())
    }

    /// Canonical text rendering used for digesting; one `key=value` line
    /// per field in a fixed order.
    pub fn digest_text(&self) -> String {
        let dims: Vec<String> = self
            .schedule
            .dims()
            .iter()
            .map(|(h, w)| format!("{h}x{w}"))
            .collect();
        format!(
            "hidden={}\nheads={}\nlayers={}\nn_bins={}\nd_min={}\nd_max={}\nschedule={}\ninput={}x{}\nshared_blocks={}\nfeat_upsample={:?}\n",
            self.hidden,
            self.heads,
            self.layers,
            self.n_bins,
            self.d_min,
            self.d_max,
            dims.join(","),
            self.input_h,
            self.input_w,
            self.shared_blocks,
            self.feat_upsample,
        )
    }

    /// SHA-256 of [`Self::digest_text`]; stored in checkpoints and verified
    /// at load time.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.digest_text().as_bytes());
        hasher.finalize().into()
    }

    /// Hex form of [`Self::digest`] for logs and run directories.
    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_accepts_power_of_two_growth() {
        let s = StepSchedule::square(&[4, 8, 16, 32, 64]).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.block_sizes(), vec![16, 64, 256, 1024, 4096]);
        assert_eq!(s.total_tokens(), 5456);
        assert_eq!(s.ratio_to_next(0), 2);
        // Repeated resolutions are allowed (ratio 1).
        StepSchedule::square(&[8, 8, 16]).unwrap();
        // A jump by 4 is still a power of two.
        StepSchedule::square(&[4, 16]).unwrap();
    }

    #[test]
    fn schedule_rejects_bad_growth() {
        assert!(StepSchedule::square(&[]).is_err());
        assert!(StepSchedule::square(&[0, 4]).is_err());
        assert!(StepSchedule::square(&[4, 12]).is_err()); // x3
        assert!(StepSchedule::square(&[8, 4]).is_err()); // shrinking
        assert!(StepSchedule::new(vec![(4, 4), (8, 16)]).is_err()); // skewed
    }

    #[test]
    fn config_validation_covers_divisibility() {
        let ok = ModelConfig::test_preset(StepSchedule::square(&[4, 8, 16]).unwrap(), 16, 16);
        ok.validate().unwrap();

        let mut bad = ok.clone();
        bad.heads = 5;
        assert!(bad.validate().is_err());

        let mut bad = ok.clone();
        bad.input_h = 20; // not divisible by 8
        assert!(bad.validate().is_err());

        let mut bad = ok.clone();
        bad.d_min = 0.0;
        assert!(bad.validate().is_err());

        let mut bad = ok.clone();
        bad.schedule = StepSchedule::square(&[4, 8, 32]).unwrap();
        assert!(bad.validate().is_err(), "final grid exceeds the input");

        let mut bad = ok;
        bad.n_bins = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = ModelConfig::test_preset(StepSchedule::square(&[4, 8, 16]).unwrap(), 16, 16);
        let b = a.clone();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest_hex().len(), 64);
        let mut c = a.clone();
        c.n_bins = 8;
        assert_ne!(a.digest(), c.digest());
        let mut d = a;
        d.feat_upsample = UpsampleMode::Nearest;
        assert_ne!(d.digest(), b.digest());
    }
}
