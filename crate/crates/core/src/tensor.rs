//! Dense NCHW tensors of `f64`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot be viewed as {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    /// Stacks equally shaped `C×H×W` items into a batch.
    pub fn stack(items: &[&[f64]], chw: [usize; 3]) -> Result<Self> {
        let per = chw[0] * chw[1] * chw[2];
        let mut data = Vec::with_capacity(per * items.len());
        for item in items {
            if item.len() != per {
                return Err(Error::Shape(format!(
                    "stack item has {} values, expected {per}",
                    item.len()
                )));
            }
            data.extend_from_slice(item);
        }
        Ok(Self {
            shape: [items.len(), chw[0], chw[1], chw[2]],
            data,
        })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Returns `[n, c, :, :]`.
    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let plane = self.plane();
        let start = (n * self.shape[1] + c) * plane;
        &self.data[start..start + plane]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let plane = self.plane();
        let start = (n * self.shape[1] + c) * plane;
        &mut self.data[start..start + plane]
    }

    /// Copies item `n` out as a single-item batch.
    pub fn select(&self, n: usize) -> Tensor {
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.item(n).to_vec(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates two batches along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] || a.shape[3] != b.shape[3] {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                a.shape, b.shape
            )));
        }
        let (ca, cb) = (a.shape[1], b.shape[1]);
        let mut out = Tensor::zeros([a.shape[0], ca + cb, a.shape[2], a.shape[3]]);
        for n in 0..a.shape[0] {
            let dst = out.item_mut(n);
            let split = ca * a.plane();
            dst[..split].copy_from_slice(a.item(n));
            dst[split..].copy_from_slice(b.item(n));
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let [n, c, h, w] = self.shape;
        let mut a = Tensor::zeros([n, first, h, w]);
        let mut b = Tensor::zeros([n, c - first, h, w]);
        let split = first * h * w;
        for i in 0..n {
            let src = self.item(i);
            a.item_mut(i).copy_from_slice(&src[..split]);
            b.item_mut(i).copy_from_slice(&src[split..]);
        }
        (a, b)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let [n, k, h, w] = logits.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([n, k, h, w]);
    for i in 0..n {
        let src = logits.item(i);
        let dst = out.item_mut(i);
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                max = max.max(src[c * plane + p]);
            }
            let mut sum = 0.0;
            for c in 0..k {
                let e = (src[c * plane + p] - max).exp();
                dst[c * plane + p] = e;
                sum += e;
            }
            for c in 0..k {
                dst[c * plane + p] /= sum;
            }
        }
    }
    out
}

/// Pulls a gradient with respect to softmax outputs back to the logits.
pub fn softmax_backward(probs: &Tensor, dprobs: &Tensor) -> Tensor {
    let [n, k, h, w] = probs.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([n, k, h, w]);
    for i in 0..n {
        let p = probs.item(i);
        let g = dprobs.item(i);
        let dst = out.item_mut(i);
        for px in 0..plane {
            let mut dot = 0.0;
            for c in 0..k {
                dot += p[c * plane + px] * g[c * plane + px];
            }
            for c in 0..k {
                let idx = c * plane + px;
                dst[idx] = p[idx] * (g[idx] - dot);
            }
        }
    }
    out
}

/// Per-pixel argmax over channels of item `n`.
pub fn argmax_channels(t: &Tensor, n: usize) -> Vec<u8> {
    let k = t.channels();
    let plane = t.plane();
    let item = t.item(n);
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if item[c * plane + p] > item[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
