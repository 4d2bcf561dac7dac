//! Post-inference stage: a light preference head on top of the segmentation
//! features, trained jointly with the backbone on the annotator's correction.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::SegNetwork;
use crate::error::{Error, Result};
use crate::mask::{LabelMap, RleMask};
use crate::nn::{Conv2d, GradScope, ParamKind, ParamMut, Relu};
use crate::objectives::{divergence_map, dsc, entropy_map, feedback_loss_weighted};
use crate::optim::Sgd;
use crate::pre_adapt::batch_tensor;
use crate::raster::Image;
use crate::styleaug::{make_test_batch, StyleRanges};
use crate::tensor::{softmax_backward, softmax_channels, Tensor};

pub const DEFAULT_HEAD_HIDDEN: usize = 16;

/// `conv3x3 → ReLU → conv3x3` over `concat(f_seg, ŷ)`.
#[derive(Debug, Clone)]
pub struct PreferenceHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    relu: Relu,
}

/// Builds a head whose output layer starts at zero, so `ỹ` is uniform until
/// the first update.
pub fn init_head(c_fseg: usize, k: usize, hidden: usize, seed: u64) -> Result<PreferenceHead> {
    if c_fseg == 0 || k == 0 || hidden == 0 {
        return Err(Error::Config("preference head dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv1 = Conv2d::new(c_fseg + k, hidden, 3, true);
    conv1.init_kaiming(&mut rng);
    let conv2 = Conv2d::new(hidden, k, 3, true);
    Ok(PreferenceHead {
        conv1,
        conv2,
        relu: Relu::default(),
    })
}

impl PreferenceHead {
    pub fn input_channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn feature_channels(&self) -> usize {
        self.conv1.in_channels - self.conv2.out_channels
    }

    pub fn conv_layers(&self) -> [&Conv2d; 2] {
        [&self.conv1, &self.conv2]
    }

    /// `ỹ = softmax(head(concat(f_seg, ŷ)))`.
    pub fn forward(&mut self, f_seg: &Tensor, y_hat: &Tensor, record: bool) -> Result<Tensor> {
        if f_seg.channels() != self.feature_channels()
            || y_hat.channels() != self.num_classes()
        {
            return Err(Error::Shape(format!(
                "head expects {}+{} channels, got {}+{}",
                self.feature_channels(),
                self.num_classes(),
                f_seg.channels(),
                y_hat.channels()
            )));
        }
        let input = Tensor::concat_channels(f_seg, y_hat)?;
        let h = self.conv1.forward(&input, record)?;
        let h = self.relu.forward(h, record);
        let logits = self.conv2.forward(&h, record)?;
        Ok(softmax_channels(&logits))
    }

    /// Back-propagates a gradient on `ỹ`; returns the gradients at
    /// `(f_seg, ŷ)`.
    pub fn backward(&mut self, probs: &Tensor, dprobs: &Tensor) -> Result<(Tensor, Tensor)> {
        let dlogits = softmax_backward(probs, dprobs);
        let g = self.conv2.backward(&dlogits, GradScope::All, true)?.expect("dx");
        let g = self.relu.backward(g)?;
        let g = self.conv1.backward(&g, GradScope::All, true)?.expect("dx");
        Ok(g.split_channels(self.feature_channels()))
    }

    pub fn zero_grad(&mut self) {
        self.conv1.zero_grad();
        self.conv2.zero_grad();
    }

    pub fn clear_cache(&mut self) {
        self.conv1.clear_cache();
        self.conv2.clear_cache();
        self.relu.clear_cache();
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (name, conv) in [("head.conv1", &mut self.conv1), ("head.conv2", &mut self.conv2)] {
            out.push(ParamMut {
                name: format!("{name}.weight"),
                kind: ParamKind::ConvWeight,
                value: &mut conv.weight,
                grad: &mut conv.grad_weight,
            });
            if let (Some(b), Some(g)) = (conv.bias.as_mut(), conv.grad_bias.as_mut()) {
                out.push(ParamMut {
                    name: format!("{name}.bias"),
                    kind: ParamKind::ConvBias,
                    value: b,
                    grad: g,
                });
            }
        }
        out
    }

    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        for conv in [&self.conv1, &self.conv2] {
            for v in conv.weight.iter().chain(conv.bias.iter().flatten()) {
                h.update(v.to_le_bytes());
            }
        }
        crate::backbone::hex(&h.finalize())
    }
}

/// Per-pixel weight applied to the feedback objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `1 + M_div`
    #[default]
    Mdiv,
    /// `1 + H(ŷ)/ln K`
    Entropy,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostAdaptConfig {
    pub steps: usize,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub momentum: f64,
    pub weight_mode: WeightMode,
    pub copies: usize,
    pub alpha: f64,
    pub head_hidden: usize,
    pub ranges: StyleRanges,
}

impl Default for PostAdaptConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            lr_head: 0.01,
            lr_backbone: 0.001,
            momentum: 0.99,
            weight_mode: WeightMode::Mdiv,
            copies: 6,
            alpha: 1.0,
            head_hidden: DEFAULT_HEAD_HIDDEN,
            ranges: StyleRanges::default(),
        }
    }
}

impl PostAdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_head > 0.0 && self.lr_backbone > 0.0) {
            return Err(Error::Config("feedback learning rates must be positive".into()));
        }
        if self.lr_backbone >= self.lr_head {
            return Err(Error::Config(format!(
                "backbone learning rate {} must be smaller than head learning rate {}",
                self.lr_backbone, self.lr_head
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.copies == 0 {
            return Err(Error::Config("feedback stage needs at least one augmented copy".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("statistics mixing alpha must lie in [0, 1]".into()));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head hidden width must be positive".into()));
        }
        self.ranges.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadTag {
    Main,
    Preference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresentPolicy {
    OracleDsc,
    Human,
    MainHead,
}

/// Picks the prediction shown to the annotator. `Ok(None)` means the choice
/// is left to a human. Ties go to the main head.
pub fn select_presented(
    y_hat: &LabelMap,
    y_tilde: Option<&LabelMap>,
    policy: PresentPolicy,
    reference: Option<&LabelMap>,
) -> Result<Option<(LabelMap, HeadTag)>> {
    let main = || Ok(Some((y_hat.clone(), HeadTag::Main)));
    match (policy, y_tilde) {
        (PresentPolicy::MainHead, _) | (_, None) => main(),
        (PresentPolicy::Human, Some(_)) => Ok(None),
        (PresentPolicy::OracleDsc, Some(pref)) => {
            let reference = reference.ok_or_else(|| {
                Error::Config("oracle selection requires a reference mask".into())
            })?;
            let a = dsc(y_hat, reference)?.mean;
            let b = dsc(pref, reference)?.mean;
            if b > a {
                Ok(Some((pref.clone(), HeadTag::Preference)))
            } else {
                main()
            }
        }
    }
}

/// One feedback event as persisted in a session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub sample_id: String,
    pub initial_main: RleMask,
    pub initial_preference: Option<RleMask>,
    pub corrected: RleMask,
    pub chosen: HeadTag,
    pub loss_trace: Vec<f64>,
    pub duration_ms: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct PostAdaptResult {
    /// Total feedback loss before each update.
    pub loss_trace: Vec<f64>,
    pub last_components: Vec<(String, f64)>,
    pub duration_ms: f64,
}

fn weight_map(mode: WeightMode, probs: &Tensor) -> Result<Vec<f64>> {
    let plane = probs.plane();
    Ok(match mode {
        WeightMode::None => vec![1.0; plane],
        WeightMode::Mdiv => divergence_map(probs)?.values.iter().map(|v| 1.0 + v).collect(),
        WeightMode::Entropy => {
            let ln_k = (probs.channels() as f64).ln();
            entropy_map(probs, 0).iter().map(|h| 1.0 + h / ln_k).collect()
        }
    })
}

/// Runs `cfg.steps` joint updates of head and backbone towards the corrected
/// mask `y`. On a non-finite loss both are restored and a numeric error is
/// returned.
pub fn post_inference_adapt<R: Rng + ?Sized>(
    net: &mut SegNetwork,
    head: &mut PreferenceHead,
    x: &Image,
    y: &LabelMap,
    cfg: &PostAdaptConfig,
    rng: &mut R,
) -> Result<PostAdaptResult> {
    cfg.validate()?;
    y.validate()?;
    if y.height != x.height || y.width != x.width {
        return Err(Error::Shape("corrected mask does not match the image".into()));
    }
    let snapshot = (net.clone(), head.clone());
    let start = Instant::now();
    let result = feedback_inner(net, head, x, y, cfg, rng);
    net.clear_cache();
    head.clear_cache();
    match result {
        Ok(mut r) => {
            r.duration_ms = start.elapsed().as_secs_f64() * 1e3;
            Ok(r)
        }
        Err(e) => {
            *net = snapshot.0;
            *head = snapshot.1;
            Err(e)
        }
    }
}

fn feedback_inner<R: Rng + ?Sized>(
    net: &mut SegNetwork,
    head: &mut PreferenceHead,
    x: &Image,
    y: &LabelMap,
    cfg: &PostAdaptConfig,
    rng: &mut R,
) -> Result<PostAdaptResult> {
    let target = y.one_hot();
    let mut opt_net = Sgd::new(cfg.lr_backbone, cfg.momentum);
    let mut opt_head = Sgd::new(cfg.lr_head, cfg.momentum);
    net.bn_mode = crate::nn::BnMode::TestBatch { alpha: cfg.alpha };
    let mut out = PostAdaptResult::default();
    for step in 0..cfg.steps {
        let batch = make_test_batch(x, cfg.copies, &cfg.ranges, rng)?;
        let input = batch_tensor(&batch)?;
        let fwd = net.forward(&input, true)?;
        let weight = weight_map(cfg.weight_mode, &fwd.probs)?;
        let y_hat = fwd.probs.select(0);
        let f0 = fwd.f_seg.select(0);
        let y_tilde = head.forward(&f0, &y_hat, true)?;
        let fb = feedback_loss_weighted(&y_hat, &y_tilde, &target, &weight)?;
        if !fb.value.total.is_finite() {
            return Err(Error::Numeric(format!(
                "feedback loss {} at step {step}",
                fb.value.total
            )));
        }
        out.loss_trace.push(fb.value.total);
        out.last_components = fb.value.components.clone();

        head.zero_grad();
        let (d_f, d_yhat_head) = head.backward(&y_tilde, &fb.grad_pref)?;
        let mut d_yhat = fb.grad_main;
        d_yhat.add_assign(&d_yhat_head);
        let d_logits0 = softmax_backward(&y_hat, &d_yhat);

        let mut d_logits = Tensor::zeros(fwd.logits.shape());
        d_logits.item_mut(0).copy_from_slice(d_logits0.data());
        let mut d_fseg = Tensor::zeros(fwd.f_seg.shape());
        d_fseg.item_mut(0).copy_from_slice(d_f.data());
        net.zero_grad();
        net.backward(&d_logits, Some(&d_fseg), GradScope::All)?;

        let all_finite = head
            .params_mut()
            .iter()
            .chain(net.params_mut().iter())
            .all(|p| p.grad.iter().all(|g| g.is_finite()));
        if !all_finite {
            return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
        }
        opt_net.step(net.params_mut(), |_| true);
        opt_head.step(head.params_mut(), |_| true);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ArchConfig;
    use crate::pre_adapt::image_tensor;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            levels: 2,
            base_width: 4,
            ..ArchConfig::default()
        }
    }

    fn test_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(8, 8);
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.1..0.9);
        }
        img
    }

    #[test]
    fn fresh_head_is_uniform() {
        let mut head = init_head(4, 3, 16, 1).unwrap();
        let f = Tensor::from_vec([1, 4, 5, 5], vec![0.3; 100]).unwrap();
        let y = Tensor::from_vec([1, 3, 5, 5], vec![1.0 / 3.0; 75]).unwrap();
        let out = head.forward(&f, &y, false).unwrap();
        assert!(out.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn head_shape_checks() {
        let mut head = init_head(4, 3, 16, 1).unwrap();
        assert_eq!(head.input_channels(), 7);
        assert_eq!(head.conv_layers().len(), 2);
        assert!(head.conv_layers().iter().all(|c| c.kernel == 3));
        let f = Tensor::zeros([1, 5, 4, 4]);
        let y = Tensor::zeros([1, 3, 4, 4]);
        assert!(matches!(head.forward(&f, &y, false), Err(Error::Shape(_))));
    }

    #[test]
    fn head_init_is_seeded() {
        let a = init_head(4, 3, 16, 9).unwrap();
        let b = init_head(4, 3, 16, 9).unwrap();
        let c = init_head(4, 3, 16, 10).unwrap();
        assert_eq!(a.state_hash(), b.state_hash());
        assert_ne!(a.state_hash(), c.state_hash());
    }

    #[test]
    fn head_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = init_head(2, 3, 4, 3).unwrap();
        for w in head.conv2.weight.iter_mut() {
            *w = rng.random_range(-0.5..0.5);
        }
        let f = Tensor::from_vec([1, 2, 4, 4], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = softmax_channels(
            &Tensor::from_vec([1, 3, 4, 4], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        );
        let probe: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |head: &mut PreferenceHead, f: &Tensor| {
            let out = head.forward(f, &y, false).unwrap();
            out.data().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let out = head.forward(&f, &y, true).unwrap();
        let dprobs = Tensor::from_vec([1, 3, 4, 4], probe.clone()).unwrap();
        let (df, _) = head.backward(&out, &dprobs).unwrap();
        let eps = 1e-6;
        for i in [0, 7, 19, 31] {
            let mut fp = f.clone();
            fp.data_mut()[i] += eps;
            let mut fm = f.clone();
            fm.data_mut()[i] -= eps;
            let num = (loss(&mut head, &fp) - loss(&mut head, &fm)) / (2.0 * eps);
            assert!((num - df.data()[i]).abs() < 1e-7, "{i}: {num} vs {}", df.data()[i]);
        }
    }

    #[test]
    fn learning_rate_order_is_enforced() {
        let cfg = PostAdaptConfig {
            lr_backbone: 0.01,
            ..PostAdaptConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_steps_leave_state_untouched() {
        let mut net = SegNetwork::new(small_arch(), 2).unwrap();
        let mut head = init_head(net.feature_channels(), 3, 16, 2).unwrap();
        let (n0, h0) = (net.state_hash(), head.state_hash());
        let img = test_image(1);
        let y = LabelMap::background(8, 8);
        let cfg = PostAdaptConfig {
            steps: 0,
            ..PostAdaptConfig::default()
        };
        let r = post_inference_adapt(&mut net, &mut head, &img, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(r.loss_trace.is_empty());
        assert_eq!(net.state_hash(), n0);
        assert_eq!(head.state_hash(), h0);
    }

    #[test]
    fn feedback_steps_reduce_loss_and_move_both_parts() {
        let mut net = SegNetwork::new(small_arch(), 2).unwrap();
        let mut head = init_head(net.feature_channels(), 3, 16, 2).unwrap();
        let (n0, h0) = (net.state_hash(), head.state_hash());
        let img = test_image(3);
        let mut disc = vec![false; 64];
        let mut cup = vec![false; 64];
        for r in 2..6 {
            for c in 2..6 {
                disc[r * 8 + c] = true;
                cup[r * 8 + c] = (3..5).contains(&r) && (3..5).contains(&c);
            }
        }
        let y = LabelMap::from_regions(8, 8, &disc, &cup);
        let cfg = PostAdaptConfig {
            steps: 15,
            ..PostAdaptConfig::default()
        };
        let r = post_inference_adapt(&mut net, &mut head, &img, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.loss_trace.len(), 15);
        assert!(r.loss_trace.last().unwrap() < r.loss_trace.first().unwrap());
        assert_ne!(net.state_hash(), n0);
        assert_ne!(head.state_hash(), h0);
    }

    #[test]
    fn failure_restores_snapshot() {
        let mut net = SegNetwork::new(small_arch(), 2).unwrap();
        let mut head = init_head(net.feature_channels(), 3, 16, 2).unwrap();
        head.conv2.weight[0] = f64::NAN;
        let (n0, h0) = (net.state_hash(), head.state_hash());
        let img = test_image(1);
        let y = LabelMap::background(8, 8);
        let r = post_inference_adapt(&mut net, &mut head, &img, &y, &PostAdaptConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert_eq!(net.state_hash(), n0);
        assert_eq!(head.state_hash(), h0);
    }

    #[test]
    fn selection_policies() {
        let a = LabelMap::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let b = LabelMap::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let (m, t) = select_presented(&a, Some(&a), PresentPolicy::OracleDsc, Some(&b)).unwrap().unwrap();
        assert_eq!((m, t), (a.clone(), HeadTag::Main));
        let (m, t) = select_presented(&a, Some(&b), PresentPolicy::OracleDsc, Some(&b)).unwrap().unwrap();
        assert_eq!((m, t), (b.clone(), HeadTag::Preference));
        assert!(select_presented(&a, Some(&b), PresentPolicy::Human, None).unwrap().is_none());
        assert!(matches!(
            select_presented(&a, Some(&b), PresentPolicy::OracleDsc, None),
            Err(Error::Config(_))
        ));
        let (_, t) = select_presented(&a, Some(&b), PresentPolicy::MainHead, Some(&b)).unwrap().unwrap();
        assert_eq!(t, HeadTag::Main);
    }

    #[test]
    fn presented_on_fresh_head_is_main() {
        let mut net = SegNetwork::new(small_arch(), 2).unwrap();
        let mut head = init_head(net.feature_channels(), 3, 16, 2).unwrap();
        let x = image_tensor(&test_image(5)).unwrap();
        let out = net.predict(&x).unwrap();
        let yt = head.forward(&out.f_seg, &out.probs, false).unwrap();
        // uniform probabilities resolve to background everywhere
        assert!(LabelMap::from_probs(&yt, 0).labels.iter().all(|&l| l == 0));
    }
}
