//! Request and response bodies. Masks travel as run-length encoded label
//! maps (`{"height", "width", "runs": [[label, count], ...]}`, row-major);
//! images as base64 of an 8-bit RGB PNG.

use std::io::Cursor;
use std::path::PathBuf;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use hitta_core::feedback_adapt::{HeadTag, PostAdaptConfig, PresentPolicy};
use hitta_core::harness::{MethodName, MethodSettings, Presentation, SampleRow, TentConfig};
use hitta_core::mask::{LabelMap, RleMask};
use hitta_core::oracle::CorrectionPolicy;
use hitta_core::pre_adapt::PreAdaptConfig;
use hitta_core::raster::{Image, CHANNELS};
use hitta_core::{Error, Result};
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

/// Body of `POST /sessions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub method: MethodName,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Target domains in stream order; empty means all of them.
    #[serde(default)]
    pub domains: Vec<String>,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Truncates the stream to its first `limit` samples.
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub pre: PreAdaptConfig,
    #[serde(default)]
    pub post: PostAdaptConfig,
    #[serde(default)]
    pub tent: TentConfig,
    #[serde(default)]
    pub correction: CorrectionPolicy,
    #[serde(default)]
    pub present: Option<PresentPolicy>,
}

fn default_true() -> bool {
    true
}

impl SessionConfig {
    pub fn new(method: MethodName, dataset: impl Into<PathBuf>, checkpoint: impl Into<PathBuf>) -> Self {
        Self {
            method,
            dataset: dataset.into(),
            checkpoint: checkpoint.into(),
            seed: 0,
            domains: Vec::new(),
            shuffle: true,
            limit: None,
            pre: PreAdaptConfig::default(),
            post: PostAdaptConfig::default(),
            tent: TentConfig::default(),
            correction: CorrectionPolicy::default(),
            present: None,
        }
    }

    pub fn settings(&self) -> MethodSettings {
        MethodSettings {
            pre: self.pre.clone(),
            post: self.post.clone(),
            tent: self.tent.clone(),
            correction: self.correction,
            present: self.present,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Ready,
    AwaitingFeedback,
    Adapting,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
    pub cursor: usize,
    pub total: usize,
    pub phase: Phase,
    pub config: SessionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSummary {
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePayload {
    pub index: usize,
    pub sample_id: String,
    pub domain: String,
    pub height: usize,
    pub width: usize,
    pub image_png: String,
    pub main: RleMask,
    pub preference: Option<RleMask>,
    pub divergence: DivergenceSummary,
    pub pre_loss: Vec<f64>,
    pub failed: bool,
}

/// Body of `GET /sessions/{id}/next`; `sample` is absent once `done`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextResponse {
    pub done: bool,
    pub phase: Phase,
    pub sample: Option<SamplePayload>,
}

/// Body of `POST /sessions/{id}/feedback`. Methods without a preference
/// head advance on an empty body; `chosen` defaults to the main head.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeedbackRequest {
    #[serde(default)]
    pub corrected: Option<RleMask>,
    #[serde(default)]
    pub chosen: Option<HeadTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub completed: usize,
    pub remaining: usize,
    pub mean_r1: f64,
    pub mean_rstar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub id: String,
    pub phase: Phase,
    pub cursor: usize,
    pub total: usize,
    pub method: MethodName,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub phase: Phase,
    pub row: SampleRow,
    pub loss_trace: Vec<f64>,
    pub duration_ms: f64,
    pub metrics: MetricsSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub fn encode_png(img: &Image) -> Result<String> {
    let plane = img.plane();
    let mut buf = RgbImage::new(img.width as u32, img.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for c in 0..CHANNELS {
            px.0[c] = (img.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let mut bytes = Cursor::new(Vec::new());
    buf.write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| Error::format("png image", e))?;
    Ok(STANDARD.encode(bytes.into_inner()))
}

pub fn decode_png(text: &str) -> Result<Image> {
    let bytes = STANDARD.decode(text).map_err(|e| Error::format("png image", e))?;
    let buf = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::format("png image", e))?
        .to_rgb8();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let plane = w * h;
    let mut img = Image::new(h, w);
    for (i, px) in buf.pixels().enumerate() {
        for c in 0..CHANNELS {
            img.data[c * plane + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(img)
}

impl SamplePayload {
    pub fn from_presentation(p: &Presentation) -> Result<Self> {
        Ok(Self {
            index: p.index,
            sample_id: p.sample_id.clone(),
            domain: p.domain.clone(),
            height: p.image.height,
            width: p.image.width,
            image_png: encode_png(&p.image)?,
            main: p.main.encode_rle(),
            preference: p.preference.as_ref().map(LabelMap::encode_rle),
            divergence: DivergenceSummary {
                mean: p.mdiv_mean,
                max: p.mdiv_max,
            },
            pre_loss: p.pre_loss.clone(),
            failed: p.failed,
        })
    }

    /// Rebuilds the presentation on the client side.
    pub fn to_presentation(&self) -> Result<Presentation> {
        let image = decode_png(&self.image_png)?;
        if image.height != self.height || image.width != self.width {
            return Err(Error::Validation("image size does not match the echoed dimensions".into()));
        }
        Ok(Presentation {
            index: self.index,
            sample_id: self.sample_id.clone(),
            domain: self.domain.clone(),
            image,
            main: self.main.decode()?,
            preference: self.preference.as_ref().map(RleMask::decode).transpose()?,
            mdiv_mean: self.divergence.mean,
            mdiv_max: self.divergence.max,
            pre_loss: self.pre_loss.clone(),
            failed: self.failed,
        })
    }
}
