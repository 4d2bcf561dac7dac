//! Simulated annotator: rater-specific boundary preferences applied to base
//! masks, and the correction step that turns a prediction into the rater's
//! mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMap;

/// Largest supported preference radius in pixels.
pub const MAX_RADIUS: i32 = 6;

/// A rater's systematic boundary convention: signed disc and cup radii
/// (positive dilates, negative erodes) plus an optional open/close smoothing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceProfile {
    pub rater: String,
    pub od_radius: i32,
    pub oc_radius: i32,
    #[serde(default)]
    pub boundary_smoothing: u32,
}

impl PreferenceProfile {
    pub fn neutral(rater: impl Into<String>) -> Self {
        Self {
            rater: rater.into(),
            od_radius: 0,
            oc_radius: 0,
            boundary_smoothing: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.od_radius.abs() > MAX_RADIUS
            || self.oc_radius.abs() > MAX_RADIUS
            || self.boundary_smoothing as i32 > MAX_RADIUS
        {
            return Err(Error::Config(format!(
                "rater {}: radii must stay within ±{MAX_RADIUS} px",
                self.rater
            )));
        }
        Ok(())
    }
}

fn disk_offsets(radius: u32) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Binary dilation with a disk; pixels outside the image are background.
pub fn dilate(mask: &[bool], h: usize, w: usize, radius: u32) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let offsets = disk_offsets(radius);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    out
}

/// Binary erosion with a disk; pixels outside the image count as background.
pub fn erode(mask: &[bool], h: usize, w: usize, radius: u32) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let offsets = disk_offsets(radius);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = offsets.iter().all(|&(dy, dx)| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                ny >= 0
                    && nx >= 0
                    && (ny as usize) < h
                    && (nx as usize) < w
                    && mask[ny as usize * w + nx as usize]
            });
        }
    }
    out
}

fn shift_boundary(mask: &[bool], h: usize, w: usize, radius: i32) -> Vec<bool> {
    match radius.signum() {
        1 => dilate(mask, h, w, radius as u32),
        -1 => erode(mask, h, w, (-radius) as u32),
        _ => mask.to_vec(),
    }
}

fn smooth(mask: &[bool], h: usize, w: usize, radius: u32) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let opened = dilate(&erode(mask, h, w, radius), h, w, radius);
    erode(&dilate(&opened, h, w, radius), h, w, radius)
}

/// Moves the disc and cup boundaries by the profile radii, smooths, and clips
/// the cup back into the disc.
pub fn apply_preference(base: &LabelMap, profile: &PreferenceProfile) -> Result<LabelMap> {
    profile.validate()?;
    base.validate()?;
    let (h, w) = (base.height, base.width);
    let disc = shift_boundary(&base.disc(), h, w, profile.od_radius);
    let cup = shift_boundary(&base.cup(), h, w, profile.oc_radius);
    let disc = smooth(&disc, h, w, profile.boundary_smoothing);
    let cup = smooth(&cup, h, w, profile.boundary_smoothing);
    if !disc.iter().any(|v| *v) {
        return Err(Error::DegenerateMask(format!(
            "rater {} erodes the disc away",
            profile.rater
        )));
    }
    Ok(LabelMap::from_regions(h, w, &disc, &cup))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// The annotator redraws the whole mask in their own style.
    FullReplace,
    /// The annotator only redraws a region (disc or cup) when the prediction
    /// disagrees with their reference on more than the threshold fraction.
    ThresholdReplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionPolicy {
    pub mode: CorrectionMode,
    pub disagreement_threshold: f64,
}

impl Default for CorrectionPolicy {
    fn default() -> Self {
        Self {
            mode: CorrectionMode::FullReplace,
            disagreement_threshold: 0.0,
        }
    }
}

impl CorrectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.disagreement_threshold) {
            return Err(Error::Config(format!(
                "disagreement threshold {} outside [0,1]",
                self.disagreement_threshold
            )));
        }
        Ok(())
    }
}

/// `1 − IoU` of two binary regions; two empty regions agree fully.
fn disagreement(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Produces the corrected mask the annotator hands back for `pred`.
pub fn correct(pred: &LabelMap, preferred: &LabelMap, policy: &CorrectionPolicy) -> Result<LabelMap> {
    policy.validate()?;
    if !pred.same_shape(preferred) {
        return Err(Error::Shape("prediction and reference differ in size".into()));
    }
    match policy.mode {
        CorrectionMode::FullReplace => Ok(preferred.clone()),
        CorrectionMode::ThresholdReplace => {
            let t = policy.disagreement_threshold;
            let pick = |p: Vec<bool>, g: Vec<bool>| {
                if disagreement(&p, &g) > t {
                    g
                } else {
                    p
                }
            };
            let disc = pick(pred.disc(), preferred.disc());
            let cup = pick(pred.cup(), preferred.cup());
            Ok(LabelMap::from_regions(pred.height, pred.width, &disc, &cup))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn circle_mask(size: usize, disc_r: f64, cup_r: f64) -> LabelMap {
        let c = (size as f64 - 1.0) / 2.0;
        let mut labels = vec![0u8; size * size];
        for y in 0..size {
            for x in 0..size {
                let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
                labels[y * size + x] = if d <= cup_r {
                    2
                } else if d <= disc_r {
                    1
                } else {
                    0
                };
            }
        }
        LabelMap::new(size, size, labels).unwrap()
    }

    /// Brute-force dilation: a pixel is set when some set pixel lies within
    /// Euclidean distance `r`.
    fn dilate_bruteforce(mask: &[bool], h: usize, w: usize, r: u32) -> Vec<bool> {
        let r2 = (r * r) as isize;
        (0..h * w)
            .map(|p| {
                let (y, x) = ((p / w) as isize, (p % w) as isize);
                (0..h * w).any(|q| {
                    let (qy, qx) = ((q / w) as isize, (q % w) as isize);
                    mask[q] && (qy - y).pow(2) + (qx - x).pow(2) <= r2
                })
            })
            .collect()
    }

    /// Brute-force erosion: every pixel within distance `r` (inside the
    /// image or not) must be set.
    fn erode_bruteforce(mask: &[bool], h: usize, w: usize, r: u32) -> Vec<bool> {
        let ri = r as isize;
        (0..h * w)
            .map(|p| {
                let (y, x) = ((p / w) as isize, (p % w) as isize);
                let mut ok = true;
                for dy in -ri..=ri {
                    for dx in -ri..=ri {
                        if dy * dy + dx * dx > ri * ri {
                            continue;
                        }
                        let (ny, nx) = (y + dy, x + dx);
                        let inside = ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize;
                        ok &= inside && mask[ny as usize * w + nx as usize];
                    }
                }
                ok
            })
            .collect()
    }

    #[test]
    fn zero_radii_are_identity() {
        let base = circle_mask(24, 9.0, 4.0);
        let out = apply_preference(&base, &PreferenceProfile::neutral("R1")).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn disc_dilation_grows_disc_and_keeps_cup() {
        let base = circle_mask(32, 10.0, 4.0);
        let profile = PreferenceProfile {
            rater: "R2".into(),
            od_radius: 2,
            oc_radius: 0,
            boundary_smoothing: 0,
        };
        let out = apply_preference(&base, &profile).unwrap();
        assert!(out.disc_area() > base.disc_area());
        assert_eq!(out.cup(), base.cup());
    }

    #[test]
    fn cup_is_clipped_into_disc() {
        let base = circle_mask(24, 5.0, 4.0);
        let profile = PreferenceProfile {
            rater: "R3".into(),
            od_radius: 0,
            oc_radius: 4,
            boundary_smoothing: 0,
        };
        let out = apply_preference(&base, &profile).unwrap();
        let disc = out.disc();
        assert!(out.cup().iter().zip(&disc).all(|(c, d)| !c || *d));
        assert_eq!(out.disc(), base.disc());
    }

    #[test]
    fn eroding_the_disc_away_is_an_error() {
        let base = circle_mask(16, 2.0, 1.0);
        let profile = PreferenceProfile {
            rater: "R4".into(),
            od_radius: -4,
            oc_radius: 0,
            boundary_smoothing: 0,
        };
        assert!(matches!(
            apply_preference(&base, &profile),
            Err(Error::DegenerateMask(_))
        ));
    }

    #[test]
    fn oversized_radius_is_rejected() {
        let base = circle_mask(16, 5.0, 2.0);
        let profile = PreferenceProfile {
            rater: "R5".into(),
            od_radius: 9,
            oc_radius: 0,
            boundary_smoothing: 0,
        };
        assert!(matches!(apply_preference(&base, &profile), Err(Error::Config(_))));
    }

    #[test]
    fn correction_branches() {
        let pred = circle_mask(20, 7.0, 3.0);
        let gt = circle_mask(20, 8.0, 3.0);
        let full = CorrectionPolicy::default();
        assert_eq!(correct(&pred, &gt, &full).unwrap(), gt);
        assert_eq!(correct(&gt, &gt, &full).unwrap(), gt);

        let never = CorrectionPolicy {
            mode: CorrectionMode::ThresholdReplace,
            disagreement_threshold: 1.0,
        };
        assert_eq!(correct(&pred, &gt, &never).unwrap(), pred);
        assert_eq!(correct(&gt, &gt, &never).unwrap(), gt);

        let always = CorrectionPolicy {
            mode: CorrectionMode::ThresholdReplace,
            disagreement_threshold: 0.0,
        };
        // Cups agree exactly, so only the disc is redrawn.
        assert_eq!(correct(&pred, &gt, &always).unwrap(), gt);

        let bad = CorrectionPolicy {
            mode: CorrectionMode::ThresholdReplace,
            disagreement_threshold: 1.5,
        };
        assert!(correct(&pred, &gt, &bad).is_err());
    }

    proptest! {
        #[test]
        fn morphology_matches_bruteforce(h in 3usize..14, w in 3usize..14, r in 0u32..4, seed in any::<u64>()) {
            let mut s = seed | 1;
            let mask: Vec<bool> = (0..h * w).map(|_| {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                s % 3 == 0
            }).collect();
            prop_assert_eq!(dilate(&mask, h, w, r), dilate_bruteforce(&mask, h, w, r));
            prop_assert_eq!(erode(&mask, h, w, r), erode_bruteforce(&mask, h, w, r));
        }

        #[test]
        fn preference_outputs_nest(size in 12usize..33, disc in 4.0f64..8.0, cup_frac in 0.2f64..0.9,
                                   od in -2i32..4, oc in -2i32..5, sm in 0u32..2) {
            let base = circle_mask(size, disc, disc * cup_frac);
            let profile = PreferenceProfile { rater: "R".into(), od_radius: od, oc_radius: oc, boundary_smoothing: sm };
            if let Ok(out) = apply_preference(&base, &profile) {
                let d = out.disc();
                prop_assert!(out.cup().iter().zip(&d).all(|(c, d)| !c || *d));
                prop_assert!(out.disc_area() > 0);
            }
        }
    }
}
