use serde::{Deserialize, Serialize};

use super::GradScope;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch-normalization statistics and affine parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BnState {
    /// `mean = 0`, `var = 1`, `gamma = 1`, `beta = 0`.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.mean.len();
        if self.var.len() != c || self.gamma.len() != c || self.beta.len() != c {
            return Err(Error::Shape("BN state vectors differ in channel count".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Validation(format!("BN eps must be positive, got {}", self.eps)));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Validation(format!(
                "BN momentum must lie in (0, 1], got {}",
                self.momentum
            )));
        }
        if self.var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Validation("BN running variance must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Which statistics a BN layer normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BnMode {
    /// Stored running statistics.
    Eval,
    /// Biased mini-batch statistics; running statistics follow the momentum rule.
    Train,
    /// Mini-batch statistics mixed with the stored ones as
    /// `alpha·batch + (1 − alpha)·stored`; stored statistics stay untouched.
    TestBatch { alpha: f64 },
}

impl BnMode {
    pub fn uses_batch(self) -> bool {
        !matches!(self, BnMode::Eval)
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    /// `x − batch mean`, present when batch statistics were used.
    centered: Option<Tensor>,
    alpha: f64,
}

/// Channel batch statistics: biased variance over `N·H·W`.
fn batch_stats(z: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = z.shape();
    let count = (n * z.plane()) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += z.channel(i, ch).iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for i in 0..n {
            v += z.channel(i, ch).iter().map(|x| (x - m) * (x - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

fn normalize(z: &Tensor, state: &mut BnState, mode: BnMode) -> Result<(Tensor, NormCache)> {
    let [n, c, _, _] = z.shape();
    if c != state.channels() {
        return Err(Error::Shape(format!(
            "BN layer has {} channels, input has {c}",
            state.channels()
        )));
    }
    if !z.all_finite() {
        return Err(Error::Numeric("non-finite BN input".into()));
    }
    let (mean, var, batch_mean, alpha) = match mode {
        BnMode::Eval => (state.mean.clone(), state.var.clone(), None, 0.0),
        BnMode::Train | BnMode::TestBatch { .. } => {
            if n * z.plane() <= 1 {
                return Err(Error::Statistics(
                    "batch statistics need more than one value per channel".into(),
                ));
            }
            let (bm, bv) = batch_stats(z);
            let alpha = match mode {
                BnMode::TestBatch { alpha } => alpha,
                _ => 1.0,
            };
            let mean: Vec<f64> = (0..c)
                .map(|i| alpha * bm[i] + (1.0 - alpha) * state.mean[i])
                .collect();
            let var: Vec<f64> = (0..c)
                .map(|i| alpha * bv[i] + (1.0 - alpha) * state.var[i])
                .collect();
            if mode == BnMode::Train {
                let m = state.momentum;
                for i in 0..c {
                    state.mean[i] = (1.0 - m) * state.mean[i] + m * bm[i];
                    state.var[i] = (1.0 - m) * state.var[i] + m * bv[i];
                }
            }
            (mean, var, Some(bm), alpha)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(z.shape());
    let mut out = Tensor::zeros(z.shape());
    let mut centered = batch_mean.as_ref().map(|_| Tensor::zeros(z.shape()));
    for i in 0..n {
        for ch in 0..c {
            let src = z.channel(i, ch);
            let (m, s, g, b) = (mean[ch], inv_std[ch], state.gamma[ch], state.beta[ch]);
            {
                let xh = xhat.channel_mut(i, ch);
                for (d, x) in xh.iter_mut().zip(src) {
                    *d = (x - m) * s;
                }
            }
            let xh = xhat.channel(i, ch);
            for (o, v) in out.channel_mut(i, ch).iter_mut().zip(xh) {
                *o = g * v + b;
            }
            if let (Some(cent), Some(bm)) = (&mut centered, &batch_mean) {
                for (d, x) in cent.channel_mut(i, ch).iter_mut().zip(src) {
                    *d = x - bm[ch];
                }
            }
        }
    }
    Ok((
        out,
        NormCache {
            xhat,
            inv_std,
            centered,
            alpha,
        },
    ))
}

/// `gamma·(z − mean)/sqrt(var + eps) + beta` with statistics chosen by `mode`.
pub fn bn_forward(z: &Tensor, state: &mut BnState, mode: BnMode) -> Result<Tensor> {
    normalize(z, state, mode).map(|(out, _)| out)
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub state: BnState,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
    cache: Option<NormCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self::from_state(BnState::new(channels))
    }

    pub fn from_state(state: BnState) -> Self {
        let c = state.channels();
        Self {
            state,
            grad_gamma: vec![0.0; c],
            grad_beta: vec![0.0; c],
            cache: None,
        }
    }

    pub fn forward(&mut self, z: &Tensor, mode: BnMode, record: bool) -> Result<Tensor> {
        let (out, cache) = normalize(z, &mut self.state, mode)?;
        self.cache = record.then_some(cache);
        Ok(out)
    }

    /// BN affine gradients are always accumulated; every [`GradScope`] covers them.
    pub fn backward(&mut self, dy: &Tensor, _scope: GradScope) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("BN backward without recorded forward".into()))?;
        let [n, c, _, _] = dy.shape();
        let count = (n * dy.plane()) as f64;
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let g = self.state.gamma[ch];
            let s = cache.inv_std[ch];
            let mut dgamma = 0.0;
            let mut dbeta = 0.0;
            // Sums over dxhat and dxhat·xhat drive the statistic gradients.
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for i in 0..n {
                for (d, xh) in dy.channel(i, ch).iter().zip(cache.xhat.channel(i, ch)) {
                    dgamma += d * xh;
                    dbeta += d;
                    sum_dxhat += d * g;
                    sum_dxhat_xhat += d * g * xh;
                }
            }
            self.grad_gamma[ch] += dgamma;
            self.grad_beta[ch] += dbeta;

            match &cache.centered {
                None => {
                    for i in 0..n {
                        for (o, d) in dx.channel_mut(i, ch).iter_mut().zip(dy.channel(i, ch)) {
                            *o = d * g * s;
                        }
                    }
                }
                Some(centered) => {
                    let a = cache.alpha;
                    let dmean = -sum_dxhat * s;
                    // dvar = Σ dxhat·(x − μ)·(−½)·s³ with (x − μ) = xhat/s
                    let dvar = -0.5 * sum_dxhat_xhat * s * s;
                    for i in 0..n {
                        let out = dx.channel_mut(i, ch);
                        let d = dy.channel(i, ch);
                        let cen = centered.channel(i, ch);
                        for j in 0..out.len() {
                            out[j] = d[j] * g * s
                                + a * dmean / count
                                + a * dvar * 2.0 * cen[j] / count;
                        }
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.fill(0.0);
        self.grad_beta.fill(0.0);
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
