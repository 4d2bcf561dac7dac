//! Contour overlays of predictions against both reference masks.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::mask::LabelMap;
use crate::raster::Image;

pub const PREDICTION_COLOR: [u8; 3] = [255, 230, 0];
pub const R1_COLOR: [u8; 3] = [0, 220, 60];
pub const RSTAR_COLOR: [u8; 3] = [0, 160, 255];

/// Boundary pixels of a region: inside, with a 4-neighbour outside.
fn contour(region: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && region[r as usize * w + c as usize]
    };
    (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            region[i] && !(at(r - 1, c) && at(r + 1, c) && at(r, c - 1) && at(r, c + 1))
        })
        .collect()
}

/// Renders the image with disc and cup contours of the references and the
/// prediction drawn on top, each pixel enlarged to `scale`×`scale`.
pub fn render_overlay(
    img: &Image,
    prediction: &LabelMap,
    r1: &LabelMap,
    rstar: &LabelMap,
    scale: u32,
) -> Result<RgbImage> {
    let (h, w) = (img.height, img.width);
    for m in [prediction, r1, rstar] {
        if m.height != h || m.width != w {
            return Err(Error::Shape("overlay mask does not match the image".into()));
        }
    }
    let scale = scale.max(1);
    let plane = img.plane();
    let mut colors: Vec<[u8; 3]> = (0..plane)
        .map(|i| std::array::from_fn(|c| (img.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    for (mask, color) in [(r1, R1_COLOR), (rstar, RSTAR_COLOR), (prediction, PREDICTION_COLOR)] {
        for region in [mask.disc(), mask.cup()] {
            for (i, on) in contour(&region, h, w).into_iter().enumerate() {
                if on {
                    colors[i] = color;
                }
            }
        }
    }
    Ok(RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        Rgb(colors[(y / scale) as usize * w + (x / scale) as usize])
    }))
}

pub struct OverlayInput<'a> {
    pub sample_id: &'a str,
    pub image: &'a Image,
    pub prediction: &'a LabelMap,
    pub r1: &'a LabelMap,
    pub rstar: &'a LabelMap,
}

/// Writes `<out_dir>/<sample_id>.png` for every input.
pub fn export_overlays(inputs: &[OverlayInput<'_>], out_dir: &Path, scale: u32) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let img = render_overlay(inp.image, inp.prediction, inp.r1, inp.rstar, scale)?;
        let path = out_dir.join(format!("{}.png", inp.sample_id));
        img.save(&path)
            .map_err(|e| Error::format("png image", format!("{}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}
