use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, mut x: Tensor, record: bool) -> Tensor {
        if record {
            self.mask = Some(x.data().iter().map(|v| *v > 0.0).collect());
        }
        for v in x.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        x
    }

    pub fn backward(&mut self, mut dy: Tensor) -> Result<Tensor> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::Shape("relu backward without recorded forward".into()))?;
        for (g, keep) in dy.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = 0.0;
            }
        }
        Ok(dy)
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }
}

/// 2×2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2x2 {
    argmax: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2x2 {
    pub fn forward(&mut self, x: &Tensor, record: bool) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("cannot pool odd spatial size {h}×{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut idx = Vec::with_capacity(if record { n * c * oh * ow } else { 0 });
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                let src = x.channel(i, ch);
                let dst = out.channel_mut(i, ch);
                for y in 0..oh {
                    for xx in 0..ow {
                        let cands = [
                            2 * y * w + 2 * xx,
                            2 * y * w + 2 * xx + 1,
                            (2 * y + 1) * w + 2 * xx,
                            (2 * y + 1) * w + 2 * xx + 1,
                        ];
                        let mut best = cands[0];
                        for &k in &cands[1..] {
                            if src[k] > src[best] {
                                best = k;
                            }
                        }
                        dst[y * ow + xx] = src[best];
                        if record {
                            idx.push(base + best);
                        }
                    }
                }
            }
        }
        if record {
            self.argmax = Some((idx, x.shape()));
        }
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let (idx, shape) = self
            .argmax
            .take()
            .ok_or_else(|| Error::Shape("pool backward without recorded forward".into()))?;
        let mut dx = Tensor::zeros(shape);
        for (g, &i) in dy.data().iter().zip(&idx) {
            dx.data_mut()[i] += g;
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.argmax = None;
    }
}
