//! Procedural synthetic scenes: a tilted background plane with a handful of
//! rectangles and sphere caps in front, rendered to a single-channel image
//! whose shading is strongly correlated with depth.
//!
//! Generation is fully seeded and uses only exactly-rounded IEEE-754
//! operations (`+ - * /`, `sqrt`, `min`/`max`, `floor`/`round`) plus uniform
//! draws from ChaCha8, so a scene's byte-level digest is reproducible across
//! platforms. No transcendental functions are involved.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mtbin::DepthMap;
use crate::numerics::{Scalar, Tensor};
use crate::pipeline::TrainSample;

/// Parameters for [`generate_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub h: usize,
    pub w: usize,
    /// Closest depth any surface may take.
    pub d_min: f64,
    /// Farthest depth any surface may take.
    pub d_max: f64,
    /// Expected fraction of pixels marked invalid (sensor dropout).
    pub invalid_frac: f64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn new(h: usize, w: usize, d_min: f64, d_max: f64, seed: u64) -> Self {
        SceneConfig {
            h,
            w,
            d_min,
            d_max,
            invalid_frac: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::Config(format!(
                "scene extent {}x{} must be nonzero",
                self.h, self.w
            )));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return Err(Error::Config(format!(
                "scene depth range [{}, {}] must satisfy 0 < d_min < d_max",
                self.d_min, self.d_max
            )));
        }
        if !(0.0..1.0).contains(&self.invalid_frac) {
            return Err(Error::Config(format!(
                "invalid_frac {} must lie in [0, 1)",
                self.invalid_frac
            )));
        }
        Ok(())
    }
}

/// A rendered scene: the observed image and its ground-truth depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Intensity image, shape `(1, h, w)`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    pub gt: DepthMap,
}

impl Scene {
    /// Converts to a training sample at the requested precision.
    pub fn to_sample<F: Scalar>(&self) -> TrainSample<F> {
        TrainSample {
            image: self.image.cast::<F>(),
            gt: self.gt.clone(),
        }
    }

    /// SHA-256 over the exact bytes of extents, depth, validity and image.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"DARSCENE");
        hasher.update((self.gt.height() as u64).to_le_bytes());
        hasher.update((self.gt.width() as u64).to_le_bytes());
        for &d in self.gt.depth() {
            hasher.update(d.to_le_bytes());
        }
        for &v in self.gt.valid() {
            hasher.update([u8::from(v)]);
        }
        for &p in self.image.data() {
            hasher.update(p.to_le_bytes());
        }
        hasher.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Renders one scene. Identical configs always produce bitwise-identical
/// scenes; every field of the config participates in the outcome.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = (cfg.h, cfg.w);
    let range = cfg.d_max - cfg.d_min;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut uniform = move || rng.random::<f64>();

    // Background plane, tilted along both axes, sitting in the far part of
    // the range. `albedo` here is a small brightness perturbation in [0, 1].
    let bg_albedo = uniform();
    let bg_base = cfg.d_min + range * (0.62 + 0.22 * uniform());
    let tilt_x = range * 0.12 * (2.0 * uniform() - 1.0);
    let tilt_y = range * 0.12 * (2.0 * uniform() - 1.0);

    let mut depth = vec![0.0f64; h * w];
    let mut albedo = vec![bg_albedo; h * w];
    for y in 0..h {
        for x in 0..w {
            let xf = x as f64 / w as f64;
            let yf = y as f64 / h as f64;
            let d = bg_base + tilt_x * (xf - 0.5) + tilt_y * (yf - 0.5);
            depth[y * w + x] = d.max(cfg.d_min).min(cfg.d_max);
        }
    }

    // Between three and six foreground objects; nearest surface wins.
    let n_obj = 3 + (uniform() * 4.0).floor() as usize;
    for _ in 0..n_obj {
        // Fixed number of draws per object regardless of kind, so geometry
        // after object i never depends on the kind of object i.
        let kind = uniform();
        let cx = (0.15 + 0.7 * uniform()) * w as f64;
        let cy = (0.15 + 0.7 * uniform()) * h as f64;
        let s1 = uniform();
        let s2 = uniform();
        let front = cfg.d_min + range * (0.06 + 0.45 * uniform());
        let obj_albedo = uniform();

        if kind < 0.5 {
            // Axis-aligned flat rectangle.
            let half_x = (0.07 + 0.16 * s1) * w as f64;
            let half_y = (0.07 + 0.16 * s2) * h as f64;
            for y in 0..h {
                for x in 0..w {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    if dx.max(-dx) <= half_x && dy.max(-dy) <= half_y {
                        let i = y * w + x;
                        if front < depth[i] {
                            depth[i] = front;
                            albedo[i] = obj_albedo;
                        }
                    }
                }
            }
        } else {
            // Sphere cap bulging toward the camera: nearest at the centre,
            // receding toward the rim.
            let r = (0.08 + 0.16 * s1) * (h.min(w)) as f64;
            let bulge = range * (0.04 + 0.10 * s2);
            let back = front + bulge;
            for y in 0..h {
                for x in 0..w {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let dist2 = dx * dx + dy * dy;
                    if dist2 <= r * r {
                        let surf = back - bulge * ((r * r - dist2).max(0.0)).sqrt() / r;
                        let i = y * w + x;
                        if surf < depth[i] {
                            depth[i] = surf;
                            albedo[i] = obj_albedo;
                        }
                    }
                }
            }
        }
    }

    // Shade by depth (near is bright), perturb mildly by per-surface albedo
    // and per-pixel texture noise, clamp into [0, 1].
    let mut image = vec![0.0f64; h * w];
    for i in 0..h * w {
        let near = (cfg.d_max - depth[i]) / range;
        let noise = 0.03 * (2.0 * uniform() - 1.0);
        let v = 0.12 + 0.72 * near + 0.10 * (albedo[i] - 0.5) + noise;
        image[i] = v.max(0.0).min(1.0);
    }

    // Sensor dropout. The draw happens for every pixel even when the
    // fraction is zero, so configs differing only in `invalid_frac` share
    // identical geometry and image.
    let mut valid = vec![true; h * w];
    for v in valid.iter_mut() {
        if uniform() < cfg.invalid_frac {
            *v = false;
        }
    }
    if valid.iter().all(|&v| !v) {
        // Degenerate draw (only reachable at extreme fractions): keep one
        // pixel so the map stays usable as ground truth.
        valid[0] = true;
    }
    for (d, &v) in depth.iter_mut().zip(&valid) {
        if !v {
            *d = 0.0;
        }
    }

    let gt = DepthMap::new(h, w, depth, valid)?;
    let image = Tensor::from_vec(&[1, h, w], image)?;
    Ok(Scene { image, gt })
}

/// `n` scenes sharing every parameter except the seed, which walks
/// `base_seed, base_seed + 1, ...`.
pub fn generate_dataset(template: &SceneConfig, n: usize, base_seed: u64) -> Result<Vec<Scene>> {
    (0..n)
        .map(|i| {
            let cfg = SceneConfig {
                seed: base_seed.wrapping_add(i as u64),
                ..template.clone()
            };
            generate_scene(&cfg)
        })
        .collect()
}
