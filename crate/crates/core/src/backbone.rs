//! Compact U-shaped encoder-decoder segmentation network.
//!
//! Every convolution except the final 1×1 classifier is followed by batch
//! normalization and ReLU. The feature map feeding the classifier is exposed
//! as `f_seg`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm2d, BnMode, BnState, Conv2d, ConvTranspose2x2, GradScope, MaxPool2x2, ParamKind,
    ParamMut, Relu,
};
use crate::tensor::{softmax_channels, Tensor};

/// Number of segmentation classes: background, disc rim, cup.
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Resolution levels including the bottleneck.
    pub levels: usize,
    pub base_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: NUM_CLASSES,
            levels: 4,
            base_width: 16,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "network must predict {NUM_CLASSES} classes, got {}",
                self.num_classes
            )));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(1..=6).contains(&self.levels) {
            return Err(Error::Config(format!(
                "levels must be in 1..=6, got {}",
                self.levels
            )));
        }
        Ok(())
    }

    /// Total spatial downsampling between input and bottleneck.
    pub fn downsampling(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: Relu,
}

impl ConvBlock {
    fn new(cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, false),
            bn: BatchNorm2d::new(cout),
            relu: Relu::default(),
        }
    }

    fn forward(&mut self, x: &Tensor, mode: BnMode, record: bool) -> Result<Tensor> {
        let z = self.conv.forward(x, record)?;
        let z = self.bn.forward(&z, mode, record)?;
        Ok(self.relu.forward(z, record))
    }

    fn backward(&mut self, dy: Tensor, scope: GradScope, need_dx: bool) -> Result<Option<Tensor>> {
        let d = self.relu.backward(dy)?;
        let d = self.bn.backward(&d, scope)?;
        self.conv.backward(&d, scope, need_dx)
    }

    fn clear_cache(&mut self) {
        self.conv.clear_cache();
        self.bn.clear_cache();
        self.relu.clear_cache();
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    up: ConvTranspose2x2,
    bn: BatchNorm2d,
    relu: Relu,
}

impl UpBlock {
    fn forward(&mut self, x: &Tensor, mode: BnMode, record: bool) -> Result<Tensor> {
        let z = self.up.forward(x, record)?;
        let z = self.bn.forward(&z, mode, record)?;
        Ok(self.relu.forward(z, record))
    }

    fn backward(&mut self, dy: Tensor, scope: GradScope) -> Result<Tensor> {
        let d = self.relu.backward(dy)?;
        let d = self.bn.backward(&d, scope)?;
        self.up.backward(&d, scope)
    }

    fn clear_cache(&mut self) {
        self.up.clear_cache();
        self.bn.clear_cache();
        self.relu.clear_cache();
    }
}

/// Batched network outputs.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub probs: Tensor,
    /// Features entering the final classifier.
    pub f_seg: Tensor,
}

#[derive(Debug, Clone)]
pub struct SegNetwork {
    arch: ArchConfig,
    pub bn_mode: BnMode,
    encoder: Vec<[ConvBlock; 2]>,
    pools: Vec<MaxPool2x2>,
    ups: Vec<UpBlock>,
    decoder: Vec<[ConvBlock; 2]>,
    classifier: Conv2d,
    skip_channels: Vec<usize>,
}

/// Deterministically initialized network; all BN layers start at
/// `mean = 0, var = 1, gamma = 1, beta = 0`.
pub fn init_network(arch: ArchConfig, seed: u64) -> Result<SegNetwork> {
    SegNetwork::new(arch, seed)
}

impl SegNetwork {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = arch.levels;
        let mut encoder = Vec::with_capacity(levels);
        for l in 0..levels {
            let cin = if l == 0 { arch.in_channels } else { arch.width(l - 1) };
            let c = arch.width(l);
            let mut blocks = [ConvBlock::new(cin, c), ConvBlock::new(c, c)];
            for b in &mut blocks {
                b.conv.init_kaiming(&mut rng);
            }
            encoder.push(blocks);
        }
        let mut ups = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..levels.saturating_sub(1)).rev() {
            let c = arch.width(l);
            let mut up = ConvTranspose2x2::new(arch.width(l + 1), c);
            up.init_kaiming(&mut rng);
            ups.push(UpBlock {
                up,
                bn: BatchNorm2d::new(c),
                relu: Relu::default(),
            });
            let mut blocks = [ConvBlock::new(2 * c, c), ConvBlock::new(c, c)];
            for b in &mut blocks {
                b.conv.init_kaiming(&mut rng);
            }
            decoder.push(blocks);
        }
        let mut classifier = Conv2d::new(arch.base_width, arch.num_classes, 1, true);
        classifier.init_kaiming(&mut rng);
        Ok(Self {
            arch,
            bn_mode: BnMode::Eval,
            encoder,
            pools: vec![MaxPool2x2::default(); levels - 1],
            ups,
            decoder,
            classifier,
            skip_channels: (0..levels - 1).map(|l| arch.width(l)).collect(),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Channel count of `f_seg`.
    pub fn feature_channels(&self) -> usize {
        self.arch.base_width
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.arch.in_channels
            )));
        }
        let f = self.arch.downsampling();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}×{w} is not divisible by the downsampling factor {f}"
            )));
        }
        Ok(())
    }

    /// Runs the network under `self.bn_mode`. With `record`, layer caches are
    /// kept for a following [`SegNetwork::backward`].
    pub fn forward(&mut self, x: &Tensor, record: bool) -> Result<ForwardOutput> {
        self.check_input(x)?;
        if !x.all_finite() {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        let mode = self.bn_mode;
        let levels = self.arch.levels;
        let mut skips = Vec::with_capacity(levels - 1);
        let mut h = x.clone();
        for l in 0..levels {
            let [b0, b1] = &mut self.encoder[l];
            h = b0.forward(&h, mode, record)?;
            h = b1.forward(&h, mode, record)?;
            if l + 1 < levels {
                let pooled = self.pools[l].forward(&h, record)?;
                skips.push(h);
                h = pooled;
            }
        }
        for (d, (up, [b0, b1])) in self.ups.iter_mut().zip(&mut self.decoder).enumerate() {
            let level = levels - 2 - d;
            let u = up.forward(&h, mode, record)?;
            let cat = Tensor::concat_channels(&skips[level], &u)?;
            h = b0.forward(&cat, mode, record)?;
            h = b1.forward(&h, mode, record)?;
        }
        let logits = self.classifier.forward(&h, record)?;
        let probs = softmax_channels(&logits);
        Ok(ForwardOutput {
            logits,
            probs,
            f_seg: h,
        })
    }

    /// Evaluation-only forward that leaves no caches behind.
    pub fn predict(&mut self, x: &Tensor) -> Result<ForwardOutput> {
        self.forward(x, false)
    }

    /// Back-propagates `dlogits` (and optionally a gradient arriving at
    /// `f_seg`) through the last recorded forward, accumulating parameter
    /// gradients selected by `scope`.
    pub fn backward(
        &mut self,
        dlogits: &Tensor,
        df_seg: Option<&Tensor>,
        scope: GradScope,
    ) -> Result<()> {
        let levels = self.arch.levels;
        let mut dh = self
            .classifier
            .backward(dlogits, scope, true)?
            .expect("input gradient requested");
        if let Some(extra) = df_seg {
            if extra.shape() != dh.shape() {
                return Err(Error::Shape("f_seg gradient shape mismatch".into()));
            }
            dh.add_assign(extra);
        }
        let mut dskips: Vec<Option<Tensor>> = vec![None; levels.saturating_sub(1)];
        for d in (0..self.ups.len()).rev() {
            let level = levels - 2 - d;
            let [b0, b1] = &mut self.decoder[d];
            let g = b1.backward(dh, scope, true)?.expect("dx");
            let g = b0.backward(g, scope, true)?.expect("dx");
            let (dskip, du) = g.split_channels(self.skip_channels[level]);
            dskips[level] = Some(dskip);
            dh = self.ups[d].backward(du, scope)?;
        }
        for l in (0..levels).rev() {
            if l + 1 < levels {
                let mut g = self.pools[l].backward(&dh)?;
                if let Some(ds) = dskips[l].take() {
                    g.add_assign(&ds);
                }
                dh = g;
            }
            let [b0, b1] = &mut self.encoder[l];
            let g = b1.backward(dh, scope, true)?.expect("dx");
            match b0.backward(g, scope, l > 0)? {
                Some(g) => dh = g,
                None => break,
            }
        }
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        for blocks in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            for b in blocks {
                b.clear_cache();
            }
        }
        for up in &mut self.ups {
            up.clear_cache();
        }
        for p in &mut self.pools {
            p.clear_cache();
        }
        self.classifier.clear_cache();
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Named BN layers in a stable order.
    pub fn bn_layers(&self) -> Vec<(String, &BnState)> {
        let mut out = Vec::new();
        for (l, blocks) in self.encoder.iter().enumerate() {
            for (j, b) in blocks.iter().enumerate() {
                out.push((format!("enc{l}.bn{j}"), &b.bn.state));
            }
        }
        for (d, (up, blocks)) in self.ups.iter().zip(&self.decoder).enumerate() {
            out.push((format!("up{d}.bn"), &up.bn.state));
            for (j, b) in blocks.iter().enumerate() {
                out.push((format!("dec{d}.bn{j}"), &b.bn.state));
            }
        }
        out
    }

    pub fn bn_layers_mut(&mut self) -> Vec<(String, &mut BnState)> {
        let mut out = Vec::new();
        for (l, blocks) in self.encoder.iter_mut().enumerate() {
            for (j, b) in blocks.iter_mut().enumerate() {
                out.push((format!("enc{l}.bn{j}"), &mut b.bn.state));
            }
        }
        for (d, (up, blocks)) in self.ups.iter_mut().zip(&mut self.decoder).enumerate() {
            out.push((format!("up{d}.bn"), &mut up.bn.state));
            for (j, b) in blocks.iter_mut().enumerate() {
                out.push((format!("dec{d}.bn{j}"), &mut b.bn.state));
            }
        }
        out
    }

    /// Every learnable tensor with its gradient buffer, in a stable order.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        fn block<'a>(out: &mut Vec<ParamMut<'a>>, prefix: String, b: &'a mut ConvBlock) {
            out.push(ParamMut {
                name: format!("{prefix}.conv.weight"),
                kind: ParamKind::ConvWeight,
                value: &mut b.conv.weight,
                grad: &mut b.conv.grad_weight,
            });
            out.push(ParamMut {
                name: format!("{prefix}.bn.gamma"),
                kind: ParamKind::BnGamma,
                value: &mut b.bn.state.gamma,
                grad: &mut b.bn.grad_gamma,
            });
            out.push(ParamMut {
                name: format!("{prefix}.bn.beta"),
                kind: ParamKind::BnBeta,
                value: &mut b.bn.state.beta,
                grad: &mut b.bn.grad_beta,
            });
        }
        let mut out = Vec::new();
        for (l, blocks) in self.encoder.iter_mut().enumerate() {
            for (j, b) in blocks.iter_mut().enumerate() {
                block(&mut out, format!("enc{l}.block{j}"), b);
            }
        }
        for (d, (up, blocks)) in self.ups.iter_mut().zip(&mut self.decoder).enumerate() {
            out.push(ParamMut {
                name: format!("up{d}.upconv.weight"),
                kind: ParamKind::ConvWeight,
                value: &mut up.up.weight,
                grad: &mut up.up.grad_weight,
            });
            out.push(ParamMut {
                name: format!("up{d}.bn.gamma"),
                kind: ParamKind::BnGamma,
                value: &mut up.bn.state.gamma,
                grad: &mut up.bn.grad_gamma,
            });
            out.push(ParamMut {
                name: format!("up{d}.bn.beta"),
                kind: ParamKind::BnBeta,
                value: &mut up.bn.state.beta,
                grad: &mut up.bn.grad_beta,
            });
            for (j, b) in blocks.iter_mut().enumerate() {
                block(&mut out, format!("dec{d}.block{j}"), b);
            }
        }
        out.push(ParamMut {
            name: "classifier.weight".into(),
            kind: ParamKind::ConvWeight,
            value: &mut self.classifier.weight,
            grad: &mut self.classifier.grad_weight,
        });
        if let (Some(b), Some(g)) = (&mut self.classifier.bias, &mut self.classifier.grad_bias) {
            out.push(ParamMut {
                name: "classifier.bias".into(),
                kind: ParamKind::ConvBias,
                value: b,
                grad: g,
            });
        }
        out
    }

    /// Named tensors that make up the full state: learnable parameters plus
    /// BN running statistics (`*.running_mean`, `*.running_var`).
    pub fn named_tensors(&mut self) -> Vec<(String, Option<ParamKind>, Vec<f64>)> {
        let mut out: Vec<(String, Option<ParamKind>, Vec<f64>)> = self
            .params_mut()
            .into_iter()
            .map(|p| (p.name, Some(p.kind), p.value.to_vec()))
            .collect();
        for (name, st) in self.bn_layers() {
            out.push((format!("{name}.running_mean"), None, st.mean.clone()));
            out.push((format!("{name}.running_var"), None, st.var.clone()));
        }
        out
    }

    /// Overwrites the tensor called `name`; lengths must agree.
    pub fn set_tensor(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let assign = |dst: &mut [f64]| -> Result<()> {
            if dst.len() != data.len() {
                return Err(Error::Shape(format!(
                    "{name}: expected {} values, got {}",
                    dst.len(),
                    data.len()
                )));
            }
            dst.copy_from_slice(data);
            Ok(())
        };
        if let Some(layer) = name
            .strip_suffix(".running_mean")
            .or_else(|| name.strip_suffix(".running_var"))
        {
            let is_mean = name.ends_with(".running_mean");
            for (n, st) in self.bn_layers_mut() {
                if n == layer {
                    return assign(if is_mean { &mut st.mean } else { &mut st.var });
                }
            }
        } else {
            for p in self.params_mut() {
                if p.name == name {
                    return assign(p.value);
                }
            }
        }
        Err(Error::format("checkpoint", format!("unknown tensor {name}")))
    }

    pub fn parameter_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over the tensors accepted by `filter` (name and bytes).
    pub fn hash_where(&mut self, filter: impl Fn(&str, Option<ParamKind>) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (name, kind, data) in self.named_tensors() {
            if !filter(&name, kind) {
                continue;
            }
            hasher.update(name.as_bytes());
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    /// Hash of every tensor, including running statistics.
    pub fn state_hash(&mut self) -> String {
        self.hash_where(|_, _| true)
    }

    /// Hash of everything except BN scale and bias.
    pub fn non_affine_hash(&mut self) -> String {
        self.hash_where(|_, k| !k.is_some_and(ParamKind::is_bn_affine))
    }

    pub fn bn_affine_hash(&mut self) -> String {
        self.hash_where(|_, k| k.is_some_and(ParamKind::is_bn_affine))
    }

    pub fn running_stats_hash(&mut self) -> String {
        self.hash_where(|_, k| k.is_none())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
