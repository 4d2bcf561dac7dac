//! Pre-inference stage: re-estimate BN statistics on a style-augmented test
//! batch and tune BN scale/bias by minimizing the prediction divergence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardOutput, SegNetwork};
use crate::error::{Error, Result};
use crate::nn::{BnMode, GradScope, ParamKind};
use crate::objectives::{divergence_loss_with_grad, divergence_map, DivergenceMap};
use crate::optim::Sgd;
use crate::raster::{normalized_batch, Image};
use crate::styleaug::{make_test_batch, AugBatch, StyleRanges};
use crate::tensor::{softmax_backward, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreAdaptConfig {
    /// Augmented copies per test batch (`B`).
    pub copies: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the test-batch statistics against the stored ones.
    pub alpha: f64,
    /// Draw a new augmented batch every iteration.
    pub fresh_draws: bool,
    pub ranges: StyleRanges,
}

impl Default for PreAdaptConfig {
    fn default() -> Self {
        Self {
            copies: 6,
            steps: 20,
            lr: 0.01,
            momentum: 0.99,
            alpha: 1.0,
            fresh_draws: true,
            ranges: StyleRanges::default(),
        }
    }
}

impl PreAdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.copies == 0 {
            return Err(Error::Config("pre-inference needs at least one augmented copy".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("pre-inference learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("statistics mixing alpha must lie in [0, 1]".into()));
        }
        self.ranges.validate()
    }

    pub fn bn_mode(&self) -> BnMode {
        BnMode::TestBatch { alpha: self.alpha }
    }
}

/// Magnitude of the BN affine change made by one adaptation call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BnDelta {
    pub gamma_l2: f64,
    pub beta_l2: f64,
}

#[derive(Debug, Clone)]
pub struct PreAdaptResult {
    /// Outputs for the unmodified test image (single-item batch).
    pub y_hat: ForwardOutput,
    /// Divergence of the evaluation batch after adaptation.
    pub mdiv: DivergenceMap,
    /// `L_div` before each update step.
    pub loss_trace: Vec<f64>,
    /// `L_div` on the first iteration's batch after the last update.
    pub final_loss: f64,
    pub bn_delta: BnDelta,
}

impl PreAdaptResult {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace.first().copied().unwrap_or(self.final_loss)
    }
}

/// Stacks normalized batch items into a network input.
pub fn batch_tensor(batch: &AugBatch) -> Result<Tensor> {
    normalized_batch(&batch.items.iter().collect::<Vec<_>>())
}

pub fn image_tensor(img: &Image) -> Result<Tensor> {
    normalized_batch(&[img])
}

/// Switches the network to test-batch statistics for `batch`. Stored
/// running statistics are left as they are.
pub fn reestimate_bn(net: &mut SegNetwork, batch: &AugBatch, alpha: f64) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::Statistics(
            "test-batch statistics need at least two images".into(),
        ));
    }
    net.bn_mode = BnMode::TestBatch { alpha };
    Ok(())
}

fn bn_affine(net: &SegNetwork) -> (Vec<f64>, Vec<f64>) {
    let mut g = Vec::new();
    let mut b = Vec::new();
    for (_, st) in net.bn_layers() {
        g.extend_from_slice(&st.gamma);
        b.extend_from_slice(&st.beta);
    }
    (g, b)
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Runs `cfg.steps` divergence-minimization steps on BN scale and bias only.
/// On a non-finite loss the network is restored and a numeric error returned.
pub fn pre_inference_adapt<R: Rng + ?Sized>(
    net: &mut SegNetwork,
    x: &Image,
    cfg: &PreAdaptConfig,
    rng: &mut R,
) -> Result<PreAdaptResult> {
    cfg.validate()?;
    let snapshot = net.clone();
    let result = adapt_inner(net, x, cfg, rng);
    if result.is_err() {
        *net = snapshot;
    }
    net.clear_cache();
    result
}

fn adapt_inner<R: Rng + ?Sized>(
    net: &mut SegNetwork,
    x: &Image,
    cfg: &PreAdaptConfig,
    rng: &mut R,
) -> Result<PreAdaptResult> {
    let (g0, b0) = bn_affine(net);
    let probe = make_test_batch(x, cfg.copies, &cfg.ranges, rng)?;
    reestimate_bn(net, &probe, cfg.alpha)?;
    let probe_tensor = batch_tensor(&probe)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let input = if step == 0 || !cfg.fresh_draws {
            probe_tensor.clone()
        } else {
            batch_tensor(&make_test_batch(x, cfg.copies, &cfg.ranges, rng)?)?
        };
        let out = net.forward(&input, true)?;
        let (loss, _, dprobs) = divergence_loss_with_grad(&out.probs)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("divergence loss {} at step {step}", loss.total)));
        }
        trace.push(loss.total);
        let dlogits = softmax_backward(&out.probs, &dprobs);
        net.zero_grad();
        net.backward(&dlogits, None, GradScope::BnAffine)?;
        opt.step(net.params_mut(), ParamKind::is_bn_affine);
    }
    let out = net.forward(&probe_tensor, false)?;
    let mdiv = divergence_map(&out.probs)?;
    let final_loss = mdiv.mean();
    if !final_loss.is_finite() {
        return Err(Error::Numeric("divergence after adaptation is not finite".into()));
    }
    let (g1, b1) = bn_affine(net);
    Ok(PreAdaptResult {
        y_hat: ForwardOutput {
            logits: out.logits.select(0),
            probs: out.probs.select(0),
            f_seg: out.f_seg.select(0),
        },
        mdiv,
        loss_trace: trace,
        final_loss,
        bn_delta: BnDelta {
            gamma_l2: l2_diff(&g0, &g1),
            beta_l2: l2_diff(&b0, &b1),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ArchConfig;
    use crate::objectives::divergence_loss;
    use crate::styleaug::Range;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net() -> SegNetwork {
        let arch = ArchConfig {
            levels: 2,
            base_width: 4,
            ..ArchConfig::default()
        };
        SegNetwork::new(arch, 11).unwrap()
    }

    fn image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(8, 8);
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.1..0.9);
        }
        img
    }

    fn identity_ranges() -> StyleRanges {
        let fixed = |v| Range { lo: v, hi: v };
        StyleRanges {
            noise_sigma: fixed(0.0),
            blur_sigma: fixed(0.0),
            brightness: fixed(1.0),
            contrast: fixed(1.0),
            gamma: fixed(1.0),
        }
    }

    fn cfg(steps: usize) -> PreAdaptConfig {
        PreAdaptConfig {
            steps,
            ..PreAdaptConfig::default()
        }
    }

    #[test]
    fn only_bn_affine_moves() {
        let mut net = small_net();
        let frozen = net.non_affine_hash();
        let stats = net.running_stats_hash();
        let affine = net.bn_affine_hash();
        let r = pre_inference_adapt(&mut net, &image(1), &cfg(5), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(r.loss_trace.len(), 5);
        assert_eq!(net.non_affine_hash(), frozen);
        assert_eq!(net.running_stats_hash(), stats);
        assert_ne!(net.bn_affine_hash(), affine);
        assert!(r.bn_delta.gamma_l2 > 0.0 && r.bn_delta.beta_l2 > 0.0);
        assert!(r.mdiv.values.iter().all(|&v| v >= 0.0));
        assert_eq!(r.y_hat.probs.batch(), 1);
    }

    #[test]
    fn zero_steps_is_batch_statistics_forward() {
        let mut net = small_net();
        let before = net.state_hash();
        let img = image(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = pre_inference_adapt(&mut net, &img, &cfg(0), &mut rng).unwrap();
        assert_eq!(net.state_hash(), before);
        assert!(r.loss_trace.is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = make_test_batch(&img, 6, &StyleRanges::default(), &mut rng).unwrap();
        let mut reference = small_net();
        reestimate_bn(&mut reference, &batch, 1.0).unwrap();
        let out = reference.predict(&batch_tensor(&batch).unwrap()).unwrap();
        assert_eq!(out.probs.select(0).data(), r.y_hat.probs.data());
    }

    #[test]
    fn identical_copies_have_zero_divergence() {
        let mut net = small_net();
        let affine = net.bn_affine_hash();
        let c = PreAdaptConfig {
            steps: 3,
            ranges: identity_ranges(),
            ..PreAdaptConfig::default()
        };
        let r = pre_inference_adapt(&mut net, &image(4), &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(r.loss_trace.iter().all(|&l| l == 0.0), "{:?}", r.loss_trace);
        assert_eq!(net.bn_affine_hash(), affine);
    }

    #[test]
    fn deterministic_given_seed() {
        let run = || {
            let mut net = small_net();
            let r = pre_inference_adapt(&mut net, &image(6), &cfg(3), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
            (r.loss_trace, r.y_hat.probs.into_vec(), net.state_hash())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_item_batch_is_rejected() {
        let mut net = small_net();
        let batch = make_test_batch(&image(1), 0, &StyleRanges::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(batch.is_err());
        let one = AugBatch {
            items: vec![image(1)],
            specs: vec![],
        };
        assert!(matches!(reestimate_bn(&mut net, &one, 1.0), Err(Error::Statistics(_))));
    }

    #[test]
    fn gamma_gradient_matches_finite_differences() {
        let arch = ArchConfig {
            levels: 1,
            base_width: 2,
            ..ArchConfig::default()
        };
        let mut net = SegNetwork::new(arch, 5).unwrap();
        let batch = make_test_batch(&image(9), 3, &StyleRanges::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        reestimate_bn(&mut net, &batch, 1.0).unwrap();
        let x = batch_tensor(&batch).unwrap();
        let out = net.forward(&x, true).unwrap();
        let (_, _, dprobs) = divergence_loss_with_grad(&out.probs).unwrap();
        let dlogits = softmax_backward(&out.probs, &dprobs);
        net.zero_grad();
        net.backward(&dlogits, None, GradScope::BnAffine).unwrap();
        let analytic: Vec<f64> = net
            .params_mut()
            .into_iter()
            .find(|p| p.name == "enc0.block0.bn.gamma")
            .unwrap()
            .grad
            .to_vec();
        let eps = 1e-6;
        let eval = |delta: f64, c: usize| {
            let mut n = net.clone();
            n.bn_layers_mut()[0].1.gamma[c] += delta;
            let p = n.predict(&x).unwrap().probs;
            divergence_loss(&divergence_map(&p).unwrap()).unwrap().total
        };
        for (c, g) in analytic.iter().enumerate() {
            let num = (eval(eps, c) - eval(-eps, c)) / (2.0 * eps);
            assert!((num - g).abs() < 1e-6 * (1.0 + g.abs()), "{c}: {num} vs {g}");
        }
    }

    #[test]
    fn non_finite_input_restores_network() {
        let mut net = small_net();
        let before = net.state_hash();
        let mut img = image(1);
        img.data[0] = f64::NAN;
        assert!(pre_inference_adapt(&mut net, &img, &cfg(2), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert_eq!(net.state_hash(), before);
        assert_eq!(net.bn_mode, SegNetwork::new(*net.arch(), 1).unwrap().bn_mode);
    }
}
