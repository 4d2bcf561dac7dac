//! Appearance-only augmentations: noise, blur, brightness, contrast, gamma.
//!
//! None of these move pixels (blur only mixes neighbours), so segmentation
//! masks never change.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleKind {
    GaussianNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Gamma,
}

impl StyleKind {
    pub const ALL: [StyleKind; 5] = [
        StyleKind::GaussianNoise,
        StyleKind::GaussianBlur,
        StyleKind::Brightness,
        StyleKind::Contrast,
        StyleKind::Gamma,
    ];

    /// Parameter value that leaves the image unchanged.
    pub fn identity(self) -> f64 {
        match self {
            StyleKind::GaussianNoise | StyleKind::GaussianBlur => 0.0,
            StyleKind::Brightness | StyleKind::Contrast | StyleKind::Gamma => 1.0,
        }
    }
}

/// One drawn augmentation: a kind and its scalar parameter (noise or blur
/// sigma, brightness or contrast factor, gamma exponent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub kind: StyleKind,
    pub value: f64,
}

impl AugmentationSpec {
    pub fn identity(kind: StyleKind) -> Self {
        Self {
            kind,
            value: kind.identity(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// Parameter ranges per augmentation kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleRanges {
    pub noise_sigma: Range,
    pub blur_sigma: Range,
    pub brightness: Range,
    pub contrast: Range,
    pub gamma: Range,
}

impl Default for StyleRanges {
    fn default() -> Self {
        Self {
            noise_sigma: Range::new(0.0, 0.1),
            blur_sigma: Range::new(0.5, 2.0),
            brightness: Range::new(0.7, 1.3),
            contrast: Range::new(0.65, 1.5),
            gamma: Range::new(0.7, 1.5),
        }
    }
}

impl StyleRanges {
    pub fn range(&self, kind: StyleKind) -> Range {
        match kind {
            StyleKind::GaussianNoise => self.noise_sigma,
            StyleKind::GaussianBlur => self.blur_sigma,
            StyleKind::Brightness => self.brightness,
            StyleKind::Contrast => self.contrast,
            StyleKind::Gamma => self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in StyleKind::ALL {
            let r = self.range(kind);
            if !(r.lo.is_finite() && r.hi.is_finite()) || r.lo < 0.0 || r.hi < r.lo {
                return Err(Error::Config(format!("bad {kind:?} range {r:?}")));
            }
            if matches!(
                kind,
                StyleKind::Brightness | StyleKind::Contrast | StyleKind::Gamma
            ) && r.lo <= 0.0
            {
                return Err(Error::Config(format!("{kind:?} range must be positive")));
            }
        }
        Ok(())
    }

    /// Accepts values inside the declared range and the kind's identity value.
    pub fn check(&self, spec: &AugmentationSpec) -> Result<()> {
        let r = self.range(spec.kind);
        if r.contains(spec.value) || spec.value == spec.kind.identity() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{:?} parameter {} outside [{}, {}]",
                spec.kind, spec.value, r.lo, r.hi
            )))
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentationSpec {
        let kind = StyleKind::ALL[rng.random_range(0..StyleKind::ALL.len())];
        let r = self.range(kind);
        let value = if r.hi > r.lo {
            rng.random_range(r.lo..=r.hi)
        } else {
            r.lo
        };
        AugmentationSpec { kind, value }
    }
}

/// Applies one augmentation; the result is clipped to `[0, 1]`.
pub fn apply_style<R: Rng + ?Sized>(
    img: &Image,
    spec: &AugmentationSpec,
    ranges: &StyleRanges,
    rng: &mut R,
) -> Result<Image> {
    ranges.check(spec)?;
    if !img.in_unit_range() {
        return Err(Error::Validation("augmentation input outside [0,1]".into()));
    }
    let v = spec.value;
    let mut out = img.clone();
    match spec.kind {
        StyleKind::GaussianNoise => {
            if v > 0.0 {
                let normal = Normal::new(0.0, v).expect("finite sigma");
                for x in &mut out.data {
                    *x += normal.sample(rng);
                }
            }
        }
        StyleKind::GaussianBlur => {
            if v > 1e-6 {
                out = gaussian_blur(img, v);
            }
        }
        StyleKind::Brightness => {
            for x in &mut out.data {
                *x *= v;
            }
        }
        StyleKind::Contrast => {
            let means = img.channel_means();
            for (c, m) in means.iter().enumerate() {
                for x in out.channel_mut(c) {
                    *x = (*x - m) * v + m;
                }
            }
        }
        StyleKind::Gamma => {
            for x in &mut out.data {
                *x = x.powf(v);
            }
        }
    }
    out.clamp_unit();
    Ok(out)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur, kernel radius `ceil(3σ)`, reflective borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = {
        let raw: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0.0; h * w];
    let mut out = img.clone();
    for c in 0..CHANNELS {
        let src = img.channel(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + k as isize - radius, w);
                    acc += kv * src[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + k as isize - radius, h);
                    acc += kv * tmp[sy * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

/// The unmodified image followed by `B` style-augmented copies.
#[derive(Debug, Clone, PartialEq)]
pub struct AugBatch {
    pub items: Vec<Image>,
    pub specs: Vec<AugmentationSpec>,
}

impl AugBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Item 0 is `img` itself; items `1..=B` each get one uniformly drawn kind
/// with a uniformly drawn parameter.
pub fn make_test_batch<R: Rng + ?Sized>(
    img: &Image,
    copies: usize,
    ranges: &StyleRanges,
    rng: &mut R,
) -> Result<AugBatch> {
    if copies == 0 {
        return Err(Error::Config(
            "at least one augmented copy is needed for a divergence".into(),
        ));
    }
    let mut items = Vec::with_capacity(copies + 1);
    let mut specs = Vec::with_capacity(copies);
    items.push(img.clone());
    for _ in 0..copies {
        let spec = ranges.draw(rng);
        items.push(apply_style(img, &spec, ranges, rng)?);
        specs.push(spec);
    }
    Ok(AugBatch { items, specs })
}
