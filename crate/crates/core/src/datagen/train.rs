//! Supervised training of the source segmentation network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, SOURCE_RATER};
use crate::backbone::SegNetwork;
use crate::error::{Error, Result};
use crate::mask::LabelMap;
use crate::nn::{BnMode, GradScope};
use crate::objectives::{cross_entropy_loss_with_grad, dsc, soft_dice_loss_with_grad};
use crate::optim::{poly_lr, Sgd};
use crate::raster::{normalized_batch, Image};
use crate::tensor::{softmax_backward, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub max_grad_norm: Option<f64>,
    /// Random horizontal and vertical flips of training pairs.
    pub flips: bool,
    /// Best validation DSC required by the halfway epoch.
    pub min_halfway_dsc: f64,
    pub seed: u64,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr0: 0.01,
            momentum: 0.99,
            poly_power: 0.9,
            batch_size: 8,
            max_grad_norm: Some(12.0),
            flips: true,
            min_halfway_dsc: 0.5,
            seed: 0,
        }
    }
}

impl SourceTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("training needs epochs > 0 and batch size >= 2".into()));
        }
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.poly_power > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
}

fn flip_image(img: &Image, horizontal: bool, vertical: bool) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    for c in 0..crate::raster::CHANNELS {
        let src = img.channel(c);
        let dst = out.channel_mut(c);
        for r in 0..h {
            for col in 0..w {
                let sr = if vertical { h - 1 - r } else { r };
                let sc = if horizontal { w - 1 - col } else { col };
                dst[r * w + col] = src[sr * w + sc];
            }
        }
    }
    out
}

fn flip_mask(m: &LabelMap, horizontal: bool, vertical: bool) -> LabelMap {
    let (h, w) = (m.height, m.width);
    let mut labels = vec![0; h * w];
    for r in 0..h {
        for c in 0..w {
            let sr = if vertical { h - 1 - r } else { r };
            let sc = if horizontal { w - 1 - c } else { c };
            labels[r * w + c] = m.labels[sr * w + sc];
        }
    }
    LabelMap {
        height: h,
        width: w,
        labels,
    }
}

fn stack_targets(masks: &[LabelMap]) -> Result<Tensor> {
    let hots: Vec<Tensor> = masks.iter().map(LabelMap::one_hot).collect();
    let views: Vec<&[f64]> = hots.iter().map(|t| t.data()).collect();
    let [_, k, h, w] = hots[0].shape();
    Tensor::stack(&views, [k, h, w])
}

/// Mean disc/cup DSC of eval-mode predictions against `rater`'s masks.
pub fn evaluate_dsc(net: &mut SegNetwork, samples: &[&Sample], rater: &str) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("no samples to evaluate".into()));
    }
    let mode = net.bn_mode;
    net.bn_mode = BnMode::Eval;
    let mut total = 0.0;
    for chunk in samples.chunks(16) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let out = net.predict(&normalized_batch(&imgs)?);
        let out = match out {
            Ok(o) => o,
            Err(e) => {
                net.bn_mode = mode;
                return Err(e);
            }
        };
        for (i, s) in chunk.iter().enumerate() {
            total += dsc(&LabelMap::from_probs(&out.probs, i), s.mask(rater)?)?.mean;
        }
    }
    net.bn_mode = mode;
    Ok(total / samples.len() as f64)
}

/// Trains `net` on the source training split against `R1` masks and returns
/// the weights with the best validation DSC.
pub fn train_source(
    net: &mut SegNetwork,
    data: &Dataset,
    cfg: &SourceTrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let train = data.source_train();
    let val = data.source_val();
    if train.len() < 2 {
        return Err(Error::Validation("source training split needs at least two samples".into()));
    }
    let val = if val.is_empty() { train.clone() } else { val };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.lr0, cfg.momentum).with_clip(cfg.max_grad_norm);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, f64, SegNetwork)> = None;
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = poly_lr(cfg.lr0, epoch, cfg.epochs, cfg.poly_power);
        order.shuffle(&mut rng);
        net.bn_mode = BnMode::Train;
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = train[i];
                let (hf, vf) = if cfg.flips {
                    (rng.random_bool(0.5), rng.random_bool(0.5))
                } else {
                    (false, false)
                };
                imgs.push(flip_image(&s.image, hf, vf));
                masks.push(flip_mask(s.mask(SOURCE_RATER)?, hf, vf));
            }
            let x = normalized_batch(&imgs.iter().collect::<Vec<_>>())?;
            let y = stack_targets(&masks)?;
            let out = net.forward(&x, true)?;
            let (dice, mut grad) = soft_dice_loss_with_grad(&out.probs, &y, None)?;
            let (ce, gce) = cross_entropy_loss_with_grad(&out.probs, &y, None)?;
            let loss = dice.total + ce.total;
            if !loss.is_finite() {
                net.clear_cache();
                return Err(Error::TrainingDiverged(format!("non-finite loss in epoch {epoch}")));
            }
            grad.add_assign(&gce);
            net.zero_grad();
            net.backward(&softmax_backward(&out.probs, &grad), None, GradScope::All)?;
            opt.step(net.params_mut(), |_| true);
            loss_sum += loss;
            batches += 1;
        }
        net.bn_mode = BnMode::Eval;
        let val_dsc = evaluate_dsc(net, &val, SOURCE_RATER)?;
        tracing::debug!(epoch, lr = opt.lr, val_dsc, "source epoch");
        logs.push(EpochLog {
            epoch,
            lr: opt.lr,
            train_loss: loss_sum / batches.max(1) as f64,
            val_dsc,
        });
        if best.as_ref().is_none_or(|b| val_dsc > b.1) {
            best = Some((epoch, val_dsc, net.clone()));
        }
        let best_dsc = best.as_ref().map_or(0.0, |b| b.1);
        if epoch + 1 == cfg.epochs.div_ceil(2) && best_dsc < cfg.min_halfway_dsc {
            return Err(Error::TrainingDiverged(format!(
                "best validation DSC {best_dsc:.3} below {} after {} epochs",
                cfg.min_halfway_dsc,
                epoch + 1
            )));
        }
    }
    let (best_epoch, best_val_dsc, best_net) = best.expect("at least one epoch");
    *net = best_net;
    net.bn_mode = BnMode::Eval;
    net.clear_cache();
    Ok(TrainReport {
        epochs: logs,
        best_epoch,
        best_val_dsc,
    })
}
