//! Three-channel floating-point images in `C×H×W` order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; CHANNELS * height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "{} values do not form a 3×{height}×{width} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Rounds every value to the nearest 8-bit level so the image survives a
    /// lossless 8-bit round trip exactly.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn channel_means(&self) -> [f64; CHANNELS] {
        let p = self.plane() as f64;
        std::array::from_fn(|c| self.channel(c).iter().sum::<f64>() / p)
    }
}

/// Per-image, per-channel z-score. A zero-variance channel maps to zeros.
pub fn normalize(img: &Image) -> Image {
    let mut out = img.clone();
    let p = img.plane() as f64;
    for c in 0..CHANNELS {
        let src = img.channel(c);
        let mean = src.iter().sum::<f64>() / p;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p;
        let dst = out.channel_mut(c);
        if var <= 1e-24 {
            dst.fill(0.0);
        } else {
            let inv = 1.0 / var.sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
        }
    }
    out
}

/// Normalizes each image and stacks them into an `N×3×H×W` network input.
pub fn normalized_batch(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let normalized: Vec<Image> = images.iter().map(|i| normalize(i)).collect();
    let views: Vec<&[f64]> = normalized.iter().map(|i| i.data.as_slice()).collect();
    Tensor::stack(&views, [CHANNELS, first.height, first.width])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let n = CHANNELS * h * w;
        Image::from_vec(h, w, (0..n).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap()
    }

    #[test]
    fn constant_image_normalizes_to_zeros() {
        let img = Image::from_vec(4, 4, vec![0.3; 48]).unwrap();
        assert!(normalize(&img).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn normalized_channels_are_standardized() {
        let out = normalize(&ramp(8, 8));
        for c in 0..CHANNELS {
            let ch = out.channel(c);
            let m = ch.iter().sum::<f64>() / 64.0;
            let v = ch.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 64.0;
            assert!(m.abs() < 1e-12);
            assert!((v.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let once = normalize(&ramp(6, 10));
        let twice = normalize(&once);
        for (a, b) in once.data.iter().zip(&twice.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
