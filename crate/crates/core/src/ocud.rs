//! One-class universal detector: a logistic objectness scorer over candidate
//! box features. It sees every annotation as the same generic "object"
//! class, so category ids never enter training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TrainImage;
use crate::error::{Error, Result};
use crate::geometry::{iou, nms_indices, BBox};
use crate::rng;
use crate::sgd::{dot, sigmoid, EpochSampler, Init, StepSchedule};

/// A candidate region with its feature vector. This is all a detector gets
/// to see of an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bbox: BBox,
    pub feature: Vec<f64>,
}

/// Supplies the candidate regions of an image by id.
pub trait CandidateSource {
    fn candidates(&self, image_id: &str) -> &[Candidate];
}

/// A scored candidate emitted by the OCUD.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcudParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl OcudParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w: vec![0.0; dim],
            b: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    fn logit(&self, feature: &[f64]) -> f64 {
        dot(&self.w, feature) + self.b
    }
}

/// Objectness `sigmoid(w . f + b)`.
pub fn ocud_score(p: &OcudParams, feature: &[f64]) -> Result<f64> {
    if feature.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            actual: feature.len(),
        });
    }
    Ok(sigmoid(p.logit(feature)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcudTrainConfig {
    /// Number of per-image SGD updates.
    pub steps: usize,
    pub lr: f64,
    pub lr_drop_at: f64,
    /// A candidate is positive iff its best IoU with an annotation reaches this.
    pub match_iou: f64,
    /// Negatives kept per positive in each image.
    pub neg_pos_ratio: f64,
    pub init: Init<OcudParams>,
    pub seed: u64,
}

impl Default for OcudTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.5,
            lr_drop_at: 0.7,
            match_iou: 0.5,
            neg_pos_ratio: 3.0,
            init: Init::Scratch,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcudTraining {
    pub params: OcudParams,
    /// Mean training loss before training and after every completed epoch.
    pub loss_trace: Vec<f64>,
}

struct ImageExamples<'a> {
    features: Vec<&'a [f64]>,
    targets: Vec<f64>,
}

impl ImageExamples<'_> {
    fn loss(&self, p: &OcudParams) -> f64 {
        let total: f64 = self
            .features
            .iter()
            .zip(&self.targets)
            .map(|(f, &y)| {
                let z = p.logit(f);
                // log(1 + e^z) - y z, computed stably
                z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
            })
            .sum();
        total / self.features.len() as f64
    }

    fn step(&self, p: &mut OcudParams, lr: f64) {
        let scale = lr / self.features.len() as f64;
        let mut grad_w = vec![0.0; p.dim()];
        let mut grad_b = 0.0;
        for (f, &y) in self.features.iter().zip(&self.targets) {
            let r = sigmoid(p.logit(f)) - y;
            grad_b += r;
            for (g, x) in grad_w.iter_mut().zip(f.iter()) {
                *g += r * x;
            }
        }
        for (w, g) in p.w.iter_mut().zip(&grad_w) {
            *w -= scale * g;
        }
        p.b -= scale * grad_b;
    }
}

fn label_image<'a>(
    img: &TrainImage<'_>,
    cands: &'a [Candidate],
    cfg: &OcudTrainConfig,
    index: u64,
) -> ImageExamples<'a> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for c in cands {
        let best = img
            .annotations
            .iter()
            .map(|a| iou(&c.bbox, &a.bbox))
            .fold(0.0, f64::max);
        if best >= cfg.match_iou {
            pos.push(c.feature.as_slice());
        } else {
            neg.push(c.feature.as_slice());
        }
    }
    if !pos.is_empty() {
        let keep = (cfg.neg_pos_ratio * pos.len() as f64).ceil() as usize;
        if keep < neg.len() {
            neg.shuffle(&mut rng::stream(cfg.seed, "ocud-negatives", index));
            neg.truncate(keep);
        }
    }
    let targets = std::iter::repeat_n(1.0, pos.len())
        .chain(std::iter::repeat_n(0.0, neg.len()))
        .collect();
    pos.extend(neg);
    ImageExamples {
        features: pos,
        targets,
    }
}

fn mean_loss(examples: &[ImageExamples<'_>], p: &OcudParams) -> f64 {
    examples.iter().map(|e| e.loss(p)).sum::<f64>() / examples.len() as f64
}

/// Trains the objectness scorer with per-image logistic-loss SGD.
///
/// Every set contributes its images in order; annotations of any origin and
/// category count as positives. Negatives are subsampled once per call.
pub fn train_ocud(
    sets: &[&[TrainImage<'_>]],
    candidates: &dyn CandidateSource,
    cfg: &OcudTrainConfig,
) -> Result<OcudTraining> {
    if sets.is_empty() {
        return Err(Error::EmptyDatasets);
    }
    if let (0, Init::WarmStart(p)) = (cfg.steps, &cfg.init) {
        return Ok(OcudTraining {
            params: p.clone(),
            loss_trace: Vec::new(),
        });
    }

    let images = sets.iter().flat_map(|s| s.iter());
    let examples: Vec<ImageExamples<'_>> = images
        .enumerate()
        .map(|(i, img)| label_image(img, candidates.candidates(img.id), cfg, i as u64))
        .filter(|e| !e.features.is_empty())
        .collect();

    let mut params = match &cfg.init {
        Init::WarmStart(p) => p.clone(),
        Init::Scratch => match examples.first() {
            Some(e) => OcudParams::zeros(e.features[0].len()),
            None => return Err(Error::NoTrainableImage("no image has candidates".into())),
        },
    };
    if examples.is_empty() {
        return Err(Error::NoTrainableImage("no image has candidates".into()));
    }
    for e in &examples {
        if let Some(f) = e.features.iter().find(|f| f.len() != params.dim()) {
            return Err(Error::DimensionMismatch {
                expected: params.dim(),
                actual: f.len(),
            });
        }
    }

    let schedule = StepSchedule {
        lr: cfg.lr,
        steps: cfg.steps,
        drop_at: cfg.lr_drop_at,
    };
    let mut sampler = EpochSampler::new(examples.len(), rng::stream(cfg.seed, "ocud-order", 0));
    let mut loss_trace = vec![mean_loss(&examples, &params)];
    for step in 0..cfg.steps {
        let (i, epoch_end) = sampler.next();
        examples[i].step(&mut params, schedule.lr_at(step));
        if epoch_end {
            loss_trace.push(mean_loss(&examples, &params));
        }
    }
    Ok(OcudTraining { params, loss_trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Category-agnostic NMS threshold applied to candidates.
    pub nms_iou: f64,
    pub max_proposals: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.7,
            max_proposals: 20,
        }
    }
}

/// Scores all candidates, applies NMS, and keeps the top `max_proposals`,
/// sorted by descending objectness.
pub fn detect_objectness(
    p: &OcudParams,
    candidates: &[Candidate],
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    let scores = candidates
        .iter()
        .map(|c| ocud_score(p, &c.feature))
        .collect::<Result<Vec<f64>>>()?;
    let boxes: Vec<BBox> = candidates.iter().map(|c| c.bbox).collect();
    let mut keep = nms_indices(&boxes, &scores, cfg.nms_iou);
    keep.truncate(cfg.max_proposals);
    Ok(keep
        .into_iter()
        .map(|i| Proposal {
            bbox: candidates[i].bbox,
            objectness: scores[i],
            feature: candidates[i].feature.clone(),
        })
        .collect())
}
