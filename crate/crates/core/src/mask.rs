//! Three-label segmentation masks and their run-length wire encoding.
//!
//! Labels: 0 background, 1 disc rim, 2 cup. The optic disc is `label ≥ 1` and
//! the cup `label = 2`, so a label map always nests the cup inside the disc.

use serde::{Deserialize, Serialize};

use crate::backbone::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        let m = Self {
            height,
            width,
            labels,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "{} labels for a {}×{} mask",
                self.labels.len(),
                self.height,
                self.width
            )));
        }
        if let Some(bad) = self.labels.iter().find(|l| **l as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!("label {bad} outside {{0,1,2}}")));
        }
        Ok(())
    }

    /// Builds a label map from binary disc and cup masks, clipping the cup
    /// into the disc.
    pub fn from_regions(height: usize, width: usize, disc: &[bool], cup: &[bool]) -> Self {
        let labels = disc
            .iter()
            .zip(cup)
            .map(|(&d, &c)| match (d, c) {
                (true, true) => 2,
                (true, false) => 1,
                _ => 0,
            })
            .collect();
        Self {
            height,
            width,
            labels,
        }
    }

    pub fn disc(&self) -> Vec<bool> {
        self.labels.iter().map(|l| *l >= 1).collect()
    }

    pub fn cup(&self) -> Vec<bool> {
        self.labels.iter().map(|l| *l == 2).collect()
    }

    pub fn disc_area(&self) -> usize {
        self.labels.iter().filter(|l| **l >= 1).count()
    }

    pub fn cup_area(&self) -> usize {
        self.labels.iter().filter(|l| **l == 2).count()
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// One-hot `1×K×H×W` tensor.
    pub fn one_hot(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut t = Tensor::zeros([1, NUM_CLASSES, self.height, self.width]);
        for (p, &l) in self.labels.iter().enumerate() {
            t.data_mut()[l as usize * plane + p] = 1.0;
        }
        t
    }

    /// Per-pixel argmax of item `n` of a `N×K×H×W` probability tensor.
    pub fn from_probs(probs: &Tensor, n: usize) -> Self {
        Self {
            height: probs.height(),
            width: probs.width(),
            labels: crate::tensor::argmax_channels(probs, n),
        }
    }

    pub fn encode_rle(&self) -> RleMask {
        let mut runs: Vec<(u8, u32)> = Vec::new();
        for &l in &self.labels {
            match runs.last_mut() {
                Some((label, count)) if *label == l => *count += 1,
                _ => runs.push((l, 1)),
            }
        }
        RleMask {
            height: self.height,
            width: self.width,
            runs,
        }
    }
}

/// Row-major run-length encoding: `runs` is a list of `(label, count)` pairs
/// with `count ≥ 1`, covering exactly `height·width` pixels. In JSON the pairs
/// appear as two-element arrays, e.g. `{"height":2,"width":2,"runs":[[0,3],[1,1]]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<(u8, u32)>,
}

impl RleMask {
    pub fn decode(&self) -> Result<LabelMap> {
        let total = self.height * self.width;
        let mut labels = Vec::with_capacity(total);
        for &(label, count) in &self.runs {
            if count == 0 {
                return Err(Error::Validation("zero-length run".into()));
            }
            if labels.len() + count as usize > total {
                return Err(Error::Validation("runs exceed mask size".into()));
            }
            labels.extend(std::iter::repeat_n(label, count as usize));
        }
        if labels.len() != total {
            return Err(Error::Validation(format!(
                "runs cover {} of {total} pixels",
                labels.len()
            )));
        }
        LabelMap::new(self.height, self.width, labels)
    }
}
