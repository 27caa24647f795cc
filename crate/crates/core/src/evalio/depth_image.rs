//! Depth map storage as 16-bit grayscale PNG.
//!
//! Stored value = `round(depth * scale)`; the stored value 0 is reserved
//! for invalid pixels. Reading divides by the same scale. Depths that
//! would round to 0 or exceed 65535 are errors naming the representable
//! range, not silent clamps.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::mtbin::DepthMap;

/// Largest stored code in a 16-bit channel.
const MAX_CODE: u32 = u16::MAX as u32;

/// Writes `map` as a 16-bit PNG with the given meters-to-code scale.
pub fn write_depth_png(path: &Path, map: &DepthMap, scale: f64) -> Result<()> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("png scale must be positive, got {scale}")));
    }
    let (h, w) = (map.height(), map.width());
    let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (i, (&d, &v)) in map.depth().iter().zip(map.valid()).enumerate() {
        let code = if !v {
            0
        } else {
            let c = (d * scale).round();
            if !(c >= 1.0) {
                return Err(Error::Format(format!(
                    "depth {d} at pixel {i} rounds to the invalid code 0; minimum representable is {}",
                    0.5 / scale
                )));
            }
            if c > MAX_CODE as f64 {
                return Err(Error::Format(format!(
                    "depth {d} at pixel {i} exceeds the maximum representable {}",
                    MAX_CODE as f64 / scale
                )));
            }
            c as u16
        };
        img.put_pixel((i % w) as u32, (i / w) as u32, Luma([code]));
    }
    img.save(path).map_err(Error::from)
}

/// Reads a 16-bit PNG written by [`write_depth_png`] with the same scale.
pub fn read_depth_png(path: &Path, scale: f64) -> Result<DepthMap> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("png scale must be positive, got {scale}")));
    }
    let img = image::open(path)?;
    let img = match img {
        DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(Error::Format(format!(
                "expected 16-bit grayscale PNG, got {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut depth = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let code = img.get_pixel(x as u32, y as u32).0[0];
            if code == 0 {
                depth.push(0.0);
                valid.push(false);
            } else {
                depth.push(code as f64 / scale);
                valid.push(true);
            }
        }
    }
    DepthMap::new(h, w, depth, valid)
}
