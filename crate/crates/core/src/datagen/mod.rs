//! Synthetic fundus-like optic disc/cup samples across several imaging
//! domains, with per-domain annotator conventions.

mod store;
mod train;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMap;
use crate::oracle::{apply_preference, PreferenceProfile};
use crate::raster::{Image, CHANNELS};
use crate::styleaug::gaussian_blur;

pub use store::{
    generate_dataset, load_dataset, read_image, read_manifest, read_mask, write_image, write_mask, Dataset, Manifest,
    ManifestEntry, Split,
};
pub use train::{evaluate_dsc, train_source, EpochLog, SourceTrainConfig, TrainReport};

pub const SOURCE_RATER: &str = "R1";

/// Appearance of one imaging domain, applied on top of the rendered scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainStyleSpec {
    pub bias: f64,
    pub contrast: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub tint: [f64; CHANNELS],
    pub texture_scale: f64,
    pub blur_sigma: f64,
}

impl Default for DomainStyleSpec {
    fn default() -> Self {
        Self {
            bias: 0.0,
            contrast: 1.0,
            gamma: 1.0,
            noise_sigma: 0.01,
            tint: [1.0; CHANNELS],
            texture_scale: 1.0,
            blur_sigma: 0.0,
        }
    }
}

impl DomainStyleSpec {
    pub fn validate(&self) -> Result<()> {
        let values = [
            self.bias,
            self.contrast,
            self.gamma,
            self.noise_sigma,
            self.texture_scale,
            self.blur_sigma,
        ];
        if values.iter().chain(self.tint.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("domain style parameters must be finite".into()));
        }
        if self.contrast <= 0.0 || self.gamma <= 0.0 || self.tint.iter().any(|&t| t <= 0.0) {
            return Err(Error::Config("contrast, gamma and tint must be positive".into()));
        }
        if self.noise_sigma < 0.0 || self.texture_scale < 0.0 || self.blur_sigma < 0.0 {
            return Err(Error::Config("noise, texture and blur must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Rater whose conventions define this domain's reference masks.
    pub rater: String,
    pub style: DomainStyleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub size: usize,
    pub seed: u64,
    pub source_train: usize,
    pub source_val: usize,
    pub target_count: usize,
    pub source: DomainSpec,
    pub targets: Vec<DomainSpec>,
    pub raters: Vec<PreferenceProfile>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::with_size(128)
    }
}

impl DatasetConfig {
    /// Five-domain layout at the given image size: one source annotated by
    /// `R1` and four targets annotated by `R2`..`R5`.
    pub fn with_size(size: usize) -> Self {
        let target = |i: usize, style: DomainStyleSpec| DomainSpec {
            name: format!("domain{i}"),
            rater: format!("R{}", i + 1),
            style,
        };
        Self {
            size,
            seed: 2024,
            source_train: 120,
            source_val: 30,
            target_count: 40,
            source: DomainSpec {
                name: "source".into(),
                rater: SOURCE_RATER.into(),
                style: DomainStyleSpec::default(),
            },
            targets: vec![
                target(1, DomainStyleSpec {
                    gamma: 2.2,
                    bias: -0.05,
                    tint: [0.85, 1.0, 1.15],
                    noise_sigma: 0.05,
                    ..DomainStyleSpec::default()
                }),
                target(2, DomainStyleSpec {
                    gamma: 0.55,
                    contrast: 0.75,
                    texture_scale: 2.5,
                    noise_sigma: 0.04,
                    tint: [1.1, 0.9, 0.85],
                    ..DomainStyleSpec::default()
                }),
                target(3, DomainStyleSpec {
                    bias: 0.3,
                    contrast: 1.3,
                    texture_scale: 0.5,
                    noise_sigma: 0.03,
                    ..DomainStyleSpec::default()
                }),
                target(4, DomainStyleSpec {
                    gamma: 1.3,
                    noise_sigma: 0.1,
                    blur_sigma: 1.2,
                    tint: [0.95, 1.1, 1.0],
                    ..DomainStyleSpec::default()
                }),
            ],
            raters: default_raters(size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || !self.size.is_multiple_of(8) {
            return Err(Error::Config("image size must be a multiple of 8 and at least 16".into()));
        }
        if self.source_train == 0 {
            return Err(Error::Config("source domain needs training samples".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for d in std::iter::once(&self.source).chain(&self.targets) {
            d.style.validate()?;
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("duplicate domain name {}", d.name)));
            }
            if d.name.is_empty() || d.name.contains(['/', '\\', '.']) {
                return Err(Error::Config(format!("invalid domain name {:?}", d.name)));
            }
            self.profile(&d.rater)?;
        }
        for p in &self.raters {
            p.validate()?;
        }
        Ok(())
    }

    pub fn profile(&self, rater: &str) -> Result<&PreferenceProfile> {
        self.raters
            .iter()
            .find(|p| p.rater == rater)
            .ok_or_else(|| Error::Config(format!("no preference profile for rater {rater}")))
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSpec> {
        std::iter::once(&self.source)
            .chain(&self.targets)
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("unknown domain {name}")))
    }
}

/// `R1` is neutral; the others shift disc and cup boundaries by signed
/// radii that grow with the image size.
pub fn default_raters(size: usize) -> Vec<PreferenceProfile> {
    let unit = (size as f64 / 64.0).round().max(1.0) as i32;
    let shifted = |name: &str, od: i32, oc: i32| PreferenceProfile {
        rater: name.into(),
        od_radius: od * unit,
        oc_radius: oc * unit,
        boundary_smoothing: 0,
    };
    vec![
        PreferenceProfile::neutral(SOURCE_RATER),
        shifted("R2", 1, 0),
        shifted("R3", 0, 1),
        shifted("R4", -1, 0),
        shifted("R5", 0, -1),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: String,
    pub image: Image,
    pub base_mask: LabelMap,
    pub rater_masks: BTreeMap<String, LabelMap>,
}

impl Sample {
    pub fn mask(&self, rater: &str) -> Result<&LabelMap> {
        self.rater_masks
            .get(rater)
            .ok_or_else(|| Error::Validation(format!("sample {} has no mask for {rater}", self.id)))
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Normalized radius: 1 on the boundary.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

struct Scene {
    disc: Ellipse,
    cup: Ellipse,
    vessels: Vec<(Vec<(f64, f64)>, f64)>,
    gratings: Vec<(f64, f64, f64, f64)>,
}

const MAX_GEOMETRY_TRIES: usize = 32;

fn draw_scene<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Scene {
    let s = size as f64;
    let disc = Ellipse {
        cx: s * (0.5 + rng.random_range(-0.06..0.06)),
        cy: s * (0.5 + rng.random_range(-0.06..0.06)),
        a: s * rng.random_range(0.24..0.30),
        b: 0.0,
        theta: rng.random_range(0.0..PI),
    };
    let disc = Ellipse {
        b: disc.a * rng.random_range(0.85..1.05),
        ..disc
    };
    let ratio = rng.random_range(0.35..0.65);
    let off = 0.12 * disc.a * (1.0 - ratio);
    let cup = Ellipse {
        cx: disc.cx + rng.random_range(-off..=off),
        cy: disc.cy + rng.random_range(-off..=off),
        a: disc.a * ratio,
        b: disc.a * ratio * rng.random_range(0.85..1.1),
        theta: rng.random_range(0.0..PI),
    };
    let n_vessels = rng.random_range(4..=6);
    let mut vessels = Vec::with_capacity(n_vessels);
    for v in 0..n_vessels {
        let mut angle = 2.0 * PI * (v as f64 + rng.random_range(0.0..0.8)) / n_vessels as f64;
        let bend = rng.random_range(-0.04..0.04);
        let width = s * rng.random_range(0.012..0.022);
        let (mut x, mut y) = (disc.cx, disc.cy);
        let mut pts = vec![(x, y)];
        let step = 0.75;
        while (-4.0..s + 4.0).contains(&x) && (-4.0..s + 4.0).contains(&y) {
            angle += bend + rng.random_range(-0.05..0.05);
            x += step * angle.cos();
            y += step * angle.sin();
            pts.push((x, y));
        }
        vessels.push((pts, width));
    }
    let gratings = (0..4)
        .map(|_| {
            let f = 2.0 * PI * rng.random_range(1.0..4.0) / s;
            let dir = rng.random_range(0.0..2.0 * PI);
            (f * dir.cos(), f * dir.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0))
        })
        .collect();
    Scene {
        disc,
        cup,
        vessels,
        gratings,
    }
}

fn scene_mask(scene: &Scene, size: usize) -> LabelMap {
    let mut labels = vec![0u8; size * size];
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            labels[r * size + c] = if scene.cup.radius(x, y) <= 1.0 {
                2
            } else if scene.disc.radius(x, y) <= 1.0 {
                1
            } else {
                0
            };
        }
    }
    LabelMap {
        height: size,
        width: size,
        labels,
    }
}

fn nested(scene: &Scene, size: usize) -> bool {
    (0..size * size).all(|i| {
        let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
        scene.cup.radius(x, y) > 1.0 || scene.disc.radius(x, y) <= 1.0
    })
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * vx).powi(2) + (p.1 - a.1 - t * vy).powi(2)).sqrt()
}

const BACKGROUND: [f64; CHANNELS] = [0.62, 0.30, 0.15];
const DISC: [f64; CHANNELS] = [0.90, 0.66, 0.42];
const CUP: [f64; CHANNELS] = [0.99, 0.88, 0.70];
const VESSEL: [f64; CHANNELS] = [0.36, 0.08, 0.05];

fn render(scene: &Scene, size: usize, texture_scale: f64) -> Image {
    let s = size as f64;
    let mut img = Image::new(size, size);
    let plane = size * size;
    let soft = 0.07;
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let rho = ((x - s / 2.0).powi(2) + (y - s / 2.0).powi(2)).sqrt() / (0.75 * s);
            let vignette = (1.0 - 0.45 * rho * rho).max(0.2);
            let texture: f64 = scene
                .gratings
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (kx * x + ky * y + ph).sin())
                .sum::<f64>()
                * 0.03
                * texture_scale;
            let wd = sigmoid((1.0 - scene.disc.radius(x, y)) / soft);
            let wc = sigmoid((1.0 - scene.cup.radius(x, y)) / soft);
            let vessel = scene
                .vessels
                .iter()
                .map(|(pts, width)| {
                    let d = pts
                        .windows(2)
                        .map(|w| segment_distance((x, y), w[0], w[1]))
                        .fold(f64::INFINITY, f64::min);
                    (-(d / width).powi(2)).exp()
                })
                .fold(0.0, f64::max);
            for ch in 0..CHANNELS {
                let mut v = BACKGROUND[ch] * vignette + texture;
                v += (DISC[ch] - v) * wd;
                v += (CUP[ch] - v) * wc;
                v += (VESSEL[ch] - v) * 0.75 * vessel;
                img.data[ch * plane + r * size + c] = v;
            }
        }
    }
    img.clamp_unit();
    img
}

/// Applies a domain's appearance to a rendered image and quantizes to 8 bits.
pub fn apply_domain_style<R: Rng + ?Sized>(img: &Image, style: &DomainStyleSpec, rng: &mut R) -> Image {
    let mut out = img.clone();
    for ch in 0..CHANNELS {
        for v in out.channel_mut(ch) {
            let t = (*v * style.tint[ch]).max(0.0).powf(style.gamma);
            *v = style.contrast * (t - 0.5) + 0.5 + style.bias;
        }
    }
    if style.blur_sigma > 0.0 {
        out = gaussian_blur(&out, style.blur_sigma);
    }
    if style.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, style.noise_sigma).expect("validated sigma");
        for v in &mut out.data {
            *v += normal.sample(rng);
        }
    }
    out.quantize_u8();
    out
}

/// Renders one sample. Geometry and appearance draw from separate streams so
/// the same anatomy can be shown under different domain styles.
pub fn generate_sample(
    id: &str,
    domain: &DomainSpec,
    size: usize,
    raters: &[&PreferenceProfile],
    geometry_seed: u64,
    style_seed: u64,
) -> Result<Sample> {
    domain.style.validate()?;
    let mut geo = ChaCha8Rng::seed_from_u64(geometry_seed);
    let scene = (0..MAX_GEOMETRY_TRIES)
        .map(|_| draw_scene(size, &mut geo))
        .find(|s| nested(s, size))
        .ok_or_else(|| Error::Validation(format!("could not draw nested geometry for {id}")))?;
    let base_mask = scene_mask(&scene, size);
    if base_mask.cup_area() == 0 || base_mask.cup_area() >= base_mask.disc_area() {
        return Err(Error::Validation(format!("degenerate geometry for {id}")));
    }
    let rendered = render(&scene, size, domain.style.texture_scale);
    let image = apply_domain_style(&rendered, &domain.style, &mut ChaCha8Rng::seed_from_u64(style_seed));
    let mut rater_masks = BTreeMap::new();
    for p in raters {
        rater_masks.insert(p.rater.clone(), apply_preference(&base_mask, p)?);
    }
    Ok(Sample {
        id: id.to_string(),
        domain: domain.name.clone(),
        image,
        base_mask,
        rater_masks,
    })
}

/// SplitMix64 mixing of a base seed with a path of integers.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain(cfg: &DatasetConfig, i: usize) -> &DomainSpec {
        if i == 0 {
            &cfg.source
        } else {
            &cfg.targets[i - 1]
        }
    }

    fn sample(cfg: &DatasetConfig, d: usize, seed: u64) -> Sample {
        let dom = domain(cfg, d);
        let raters = [cfg.profile(SOURCE_RATER).unwrap(), cfg.profile(&dom.rater).unwrap()];
        generate_sample("s", dom, cfg.size, &raters, seed, seed + 1).unwrap()
    }

    #[test]
    fn same_seeds_same_sample() {
        let cfg = DatasetConfig::with_size(32);
        assert_eq!(sample(&cfg, 2, 7), sample(&cfg, 2, 7));
        assert_ne!(sample(&cfg, 2, 7).image, sample(&cfg, 2, 8).image);
    }

    #[test]
    fn masks_are_nested_and_cup_smaller() {
        let cfg = DatasetConfig::with_size(32);
        for seed in 0..30 {
            let s = sample(&cfg, (seed % 5) as usize, seed);
            assert!(s.base_mask.cup_area() < s.base_mask.disc_area());
            for m in s.rater_masks.values() {
                m.validate().unwrap();
            }
            assert!(s.image.in_unit_range());
        }
    }

    #[test]
    fn rater_masks_follow_assignment() {
        let cfg = DatasetConfig::with_size(32);
        let s = sample(&cfg, 3, 1);
        assert_eq!(s.rater_masks.keys().cloned().collect::<Vec<_>>(), vec!["R1", "R4"]);
        assert_eq!(s.mask("R1").unwrap(), &s.base_mask);
        let names: Vec<_> = cfg.targets.iter().map(|t| t.rater.as_str()).collect();
        assert_eq!(names, ["R2", "R3", "R4", "R5"]);
        assert_eq!(cfg.source.rater, "R1");
    }

    #[test]
    fn domains_differ_in_channel_means() {
        let cfg = DatasetConfig::with_size(32);
        let mean = |d: usize| {
            let mut acc = [0.0; CHANNELS];
            for seed in 0..100 {
                let m = sample(&cfg, d, 1000 + seed).image.channel_means();
                for c in 0..CHANNELS {
                    acc[c] += m[c] / 100.0;
                }
            }
            acc
        };
        let src = mean(0);
        for d in 1..=4 {
            let tgt = mean(d);
            let gap = (0..CHANNELS).map(|c| (src[c] - tgt[c]).abs()).fold(0.0, f64::max);
            assert!(gap >= 0.05, "domain{d}: {gap}");
        }
    }

    #[test]
    fn seeds_are_mixed() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(5, &[3]), derive_seed(5, &[3]));
    }
}
