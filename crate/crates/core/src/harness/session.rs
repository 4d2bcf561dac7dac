//! Sample-by-sample driver of one adaptation stream. Both the batch harness
//! and the HTTP service step through a stream with this type.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::method::{MethodName, MethodSpec};
use super::report::{SampleRow, StreamReport};
use crate::backbone::SegNetwork;
use crate::datagen::{derive_seed, Sample, SOURCE_RATER};
use crate::error::{Error, Result};
use crate::feedback_adapt::{
    init_head, post_inference_adapt, select_presented, FeedbackRecord, HeadTag, PreferenceHead,
};
use crate::mask::LabelMap;
use crate::nn::{BnMode, GradScope, ParamKind};
use crate::objectives::{dsc, prediction_entropy_with_grad};
use crate::optim::Sgd;
use crate::oracle::correct;
use crate::pre_adapt::{image_tensor, pre_inference_adapt};
use crate::raster::Image;
use crate::tensor::softmax_backward;

/// One stream position: a sample and the rater whose conventions the
/// annotator follows for its domain.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamItem {
    pub sample: Sample,
    pub rater: String,
}

/// What the annotator is shown for the current sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Presentation {
    pub index: usize,
    pub sample_id: String,
    pub domain: String,
    pub image: Image,
    pub main: LabelMap,
    pub preference: Option<LabelMap>,
    pub mdiv_mean: f64,
    pub mdiv_max: f64,
    pub pre_loss: Vec<f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub corrected: LabelMap,
    pub chosen: HeadTag,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub row: SampleRow,
    pub record: Option<FeedbackRecord>,
}

/// Hex SHA-256 of the method spec and seed.
pub fn fingerprint(spec: &MethodSpec, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("method spec serializes"));
    h.update(seed.to_le_bytes());
    crate::backbone::hex(&h.finalize()[..8])
}

pub struct StreamSession {
    spec: MethodSpec,
    seed: u64,
    net: SegNetwork,
    head: Option<PreferenceHead>,
    tent_opt: Option<Sgd>,
    items: Vec<StreamItem>,
    cursor: usize,
    pending: Option<Presentation>,
    report: StreamReport,
}

impl StreamSession {
    pub fn new(spec: MethodSpec, net: SegNetwork, items: Vec<StreamItem>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let head = match &spec.post {
            Some(post) => Some(init_head(
                net.feature_channels(),
                net.arch().num_classes,
                post.head_hidden,
                derive_seed(seed, &[0x4EAD]),
            )?),
            None => None,
        };
        Self::resume(spec, net, head, items, seed, StreamReport::default_for_seed(seed))
    }

    /// Continues a stream whose first `report.rows.len()` samples are
    /// already committed.
    pub fn resume(
        spec: MethodSpec,
        mut net: SegNetwork,
        head: Option<PreferenceHead>,
        items: Vec<StreamItem>,
        seed: u64,
        mut report: StreamReport,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.has_head() != head.is_some() {
            return Err(Error::Config("preference head presence does not match the method".into()));
        }
        if let Some(h) = &head {
            if h.feature_channels() != net.feature_channels() {
                return Err(Error::Config("preference head does not match the network".into()));
            }
        }
        let cursor = report.rows.len();
        if cursor > items.len() {
            return Err(Error::Validation("report has more rows than the stream".into()));
        }
        for it in &items {
            it.sample.mask(&it.rater)?;
            it.sample.mask(SOURCE_RATER)?;
        }
        report.method = spec.name.to_string();
        report.fingerprint = fingerprint(&spec, seed);
        report.seed = seed;
        net.clear_cache();
        Ok(Self {
            tent_opt: spec.tent.as_ref().map(|t| Sgd::new(t.lr, t.momentum)),
            spec,
            seed,
            net,
            head,
            items,
            cursor,
            pending: None,
            report,
        })
    }

    pub fn spec(&self) -> &MethodSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_done(&self) -> bool {
        self.cursor >= self.items.len()
    }

    pub fn pending(&self) -> Option<&Presentation> {
        self.pending.as_ref()
    }

    pub fn report(&self) -> &StreamReport {
        &self.report
    }

    pub fn into_report(self) -> StreamReport {
        self.report
    }

    pub fn items(&self) -> &[StreamItem] {
        &self.items
    }

    pub fn network_mut(&mut self) -> &mut SegNetwork {
        &mut self.net
    }

    pub fn head_mut(&mut self) -> Option<&mut PreferenceHead> {
        self.head.as_mut()
    }

    pub fn parts_mut(&mut self) -> (&mut SegNetwork, Option<&mut PreferenceHead>) {
        (&mut self.net, self.head.as_mut())
    }

    fn rng(&self, stage: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[self.cursor as u64, stage]))
    }

    /// Runs the method's pre-prediction work on the next sample and returns
    /// what the annotator sees.
    pub fn present(&mut self) -> Result<&Presentation> {
        if self.pending.is_some() {
            return Err(Error::Conflict("a sample is already awaiting feedback".into()));
        }
        if self.is_done() {
            return Err(Error::Exhausted);
        }
        let x = self.items[self.cursor].sample.image.clone();
        let sample_id = self.items[self.cursor].sample.id.clone();
        let mut pre_loss = Vec::new();
        let mut mdiv = (0.0, 0.0);
        let mut failed = false;
        let name = self.spec.name;
        let output = match name {
            MethodName::NoTta => {
                self.net.bn_mode = BnMode::Eval;
                self.net.predict(&image_tensor(&x)?)?
            }
            // the feedback-only ablation predicts with the same statistics as TBN
            MethodName::Tbn | MethodName::HittaNoDiv => {
                self.net.bn_mode = BnMode::TestBatch { alpha: 1.0 };
                self.net.predict(&image_tensor(&x)?)?
            }
            MethodName::Tent => {
                match self.tent_step(&x) {
                    Ok(trace) => pre_loss = trace,
                    Err(e) => {
                        tracing::warn!(sample = %sample_id, error = %e, "entropy minimization aborted");
                        failed = true;
                    }
                }
                self.net.bn_mode = BnMode::TestBatch { alpha: 1.0 };
                self.net.predict(&image_tensor(&x)?)?
            }
            _ => {
                let cfg = self.spec.pre.clone().expect("validated pre block");
                let mut rng = self.rng(0);
                match pre_inference_adapt(&mut self.net, &x, &cfg, &mut rng) {
                    Ok(r) => {
                        pre_loss = r.loss_trace;
                        mdiv = (r.mdiv.mean(), r.mdiv.max());
                        r.y_hat
                    }
                    Err(e) => {
                        tracing::warn!(sample = %sample_id, error = %e, "pre-inference stage aborted");
                        failed = true;
                        self.net.bn_mode = BnMode::Eval;
                        self.net.predict(&image_tensor(&x)?)?
                    }
                }
            }
        };
        let main = LabelMap::from_probs(&output.probs, 0);
        let preference = match self.head.as_mut() {
            Some(h) => Some(LabelMap::from_probs(&h.forward(&output.f_seg, &output.probs, false)?, 0)),
            None => None,
        };
        let item = &self.items[self.cursor];
        self.pending = Some(Presentation {
            index: self.cursor,
            sample_id: item.sample.id.clone(),
            domain: item.sample.domain.clone(),
            image: x,
            main,
            preference,
            mdiv_mean: mdiv.0,
            mdiv_max: mdiv.1,
            pre_loss,
            failed,
        });
        Ok(self.pending.as_ref().expect("just set"))
    }

    fn tent_step(&mut self, x: &Image) -> Result<Vec<f64>> {
        let cfg = self.spec.tent.clone().expect("validated tent block");
        let snapshot = self.net.clone();
        let input = image_tensor(x)?;
        let opt = self.tent_opt.as_mut().expect("tent optimizer");
        self.net.bn_mode = BnMode::TestBatch { alpha: 1.0 };
        let mut trace = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let out = self.net.forward(&input, true)?;
            let (loss, dprobs) = prediction_entropy_with_grad(&out.probs)?;
            if !loss.total.is_finite() {
                self.net = snapshot;
                return Err(Error::Numeric("entropy loss is not finite".into()));
            }
            trace.push(loss.total);
            self.net.zero_grad();
            self.net
                .backward(&softmax_backward(&out.probs, &dprobs), None, GradScope::BnAffine)?;
            opt.step(self.net.params_mut(), ParamKind::is_bn_affine);
        }
        self.net.clear_cache();
        Ok(trace)
    }

    /// The simulated annotator: picks the better head against the domain
    /// rater's mask and corrects it per the method's correction policy.
    pub fn oracle_feedback(&self) -> Result<Option<Feedback>> {
        let p = self
            .pending
            .as_ref()
            .ok_or_else(|| Error::Conflict("no sample awaiting feedback".into()))?;
        if !self.spec.has_head() {
            return Ok(None);
        }
        let item = &self.items[self.cursor];
        oracle_response(p, item.sample.mask(&item.rater)?, &self.spec)
    }

    /// Scores the presented prediction, applies feedback, and advances.
    /// A rejected feedback leaves the session unchanged.
    pub fn commit(&mut self, feedback: Option<Feedback>) -> Result<StepOutcome> {
        let p = self
            .pending
            .as_ref()
            .ok_or_else(|| Error::Conflict("no sample awaiting feedback".into()))?;
        let chosen = feedback.as_ref().map_or(HeadTag::Main, |f| f.chosen);
        let presented = match chosen {
            HeadTag::Main => p.main.clone(),
            HeadTag::Preference => p
                .preference
                .clone()
                .ok_or_else(|| Error::Validation("this method has no preference head".into()))?,
        };
        if let Some(f) = &feedback {
            f.corrected.validate()?;
            if !f.corrected.same_shape(&presented) {
                return Err(Error::Validation(format!(
                    "corrected mask is {}x{}, expected {}x{}",
                    f.corrected.height, f.corrected.width, presented.height, presented.width
                )));
            }
        }
        let p = self.pending.take().expect("checked above");
        let item = &self.items[self.cursor];
        let mut failed = p.failed;
        let mut post_loss = Vec::new();
        let mut duration_ms = 0.0;
        if let (Some(f), Some(cfg), Some(head)) = (&feedback, self.spec.post.clone(), self.head.as_mut()) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[self.cursor as u64, 1]));
            match post_inference_adapt(&mut self.net, head, &item.sample.image, &f.corrected, &cfg, &mut rng) {
                Ok(r) => {
                    post_loss = r.loss_trace;
                    duration_ms = r.duration_ms;
                }
                Err(e) => {
                    tracing::warn!(sample = %item.sample.id, error = %e, "feedback stage aborted");
                    failed = true;
                }
            }
        }
        let record = feedback.map(|f| FeedbackRecord {
            sample_id: p.sample_id.clone(),
            initial_main: p.main.encode_rle(),
            initial_preference: p.preference.as_ref().map(LabelMap::encode_rle),
            corrected: f.corrected.encode_rle(),
            chosen,
            loss_trace: post_loss.clone(),
            duration_ms,
            failed,
        });
        let row = SampleRow {
            index: self.cursor,
            sample_id: p.sample_id,
            domain: p.domain,
            rater: item.rater.clone(),
            chosen,
            dsc_r1: dsc(&presented, item.sample.mask(SOURCE_RATER)?)?,
            dsc_rstar: dsc(&presented, item.sample.mask(&item.rater)?)?,
            pre_loss: p.pre_loss,
            post_loss,
            mdiv_mean: p.mdiv_mean,
            failed,
            prediction: presented.encode_rle(),
            model_hash: self.net.state_hash(),
        };
        self.report.push(row.clone());
        self.cursor += 1;
        Ok(StepOutcome { row, record })
    }

    /// One full sample with the simulated annotator.
    pub fn step_oracle(&mut self) -> Result<StepOutcome> {
        self.present()?;
        let feedback = self.oracle_feedback()?;
        self.commit(feedback)
    }
}

/// Oracle selection and correction for a presentation, given the rater's
/// reference mask. Returns `None` for methods without feedback.
pub fn oracle_response(p: &Presentation, reference: &LabelMap, spec: &MethodSpec) -> Result<Option<Feedback>> {
    if !spec.has_head() {
        return Ok(None);
    }
    let (presented, chosen) = select_presented(&p.main, p.preference.as_ref(), spec.present, Some(reference))?
        .ok_or_else(|| Error::Config("oracle annotator cannot defer the choice".into()))?;
    let corrected = correct(&presented, reference, &spec.correction)?;
    Ok(Some(Feedback { corrected, chosen }))
}

impl StreamReport {
    fn default_for_seed(seed: u64) -> Self {
        StreamReport::new("", "", seed)
    }
}
