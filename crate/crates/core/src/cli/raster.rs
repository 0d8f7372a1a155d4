//! Binary PGM / PPM output for image samples.

use std::path::Path;

use crate::autodiff::Real;
use crate::data::ClampRange;
use crate::error::{Error, Result};

fn to_byte(v: f64, clamp: ClampRange) -> u8 {
    let t = ((v - clamp.lo) / (clamp.hi - clamp.lo)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// Encodes one `[channels, height, width]` sample.
///
/// Three channels become an RGB `P6` image; any other channel count is
/// written as a grayscale `P5` image with the channels stacked vertically.
pub fn encode<T: Real>(sample: &[T], channels: usize, height: usize, width: usize, clamp: ClampRange) -> Vec<u8> {
    let plane = height * width;
    let mut out;
    if channels == 3 {
        out = format!("P6\n{width} {height}\n255\n").into_bytes();
        for p in 0..plane {
            for c in 0..3 {
                out.push(to_byte(sample[c * plane + p].as_f64(), clamp));
            }
        }
    } else {
        out = format!("P5\n{width} {}\n255\n", height * channels).into_bytes();
        out.extend(sample.iter().map(|v| to_byte(v.as_f64(), clamp)));
    }
    out
}

pub fn extension(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

pub fn write<T: Real>(path: &Path, sample: &[T], shape: [usize; 3], clamp: ClampRange) -> Result<()> {
    let [c, h, w] = shape;
    std::fs::write(path, encode(sample, c, h, w, clamp)).map_err(|e| Error::io(path, e))
}
