//! Two-branch MIL classifier over OCUD proposals.
//!
//! For proposal `i` and category `j`:
//!
//! ```text
//! sd[i][j]      = sigmoid(Wd_j . f_i + bd_j)
//! sigma_d[i][j] = softmax over i of (beta * sd[i][j])
//! sigma_c[i][j] = softmax over j of (Wc_j . f_i + bc_j)
//! s[i][j]       = sigma_d[i][j] * sigma_c[i][j]
//! yhat[j]       = sum over i of s[i][j]
//! ```
//!
//! The per-image loss is the mean binary cross-entropy of `yhat` against the
//! image labels plus `lambda` times the squared gap between each proposal's
//! best `sd` and its objectness from the OCUD.

use serde::{Deserialize, Serialize};

use crate::data::{CategoryId, Detection, TrainImage};
use crate::error::{Error, Result};
use crate::geometry::nms;
use crate::ocud::{detect_objectness, Candidate, CandidateSource, OcudParams, Proposal, ProposalConfig};
use crate::rng;
use crate::sgd::{dot, sigmoid, EpochSampler, Init, StepSchedule};

/// Bounds applied to `yhat` before taking logs.
pub const YHAT_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilParams {
    /// Dataset category id of each output column.
    pub categories: Vec<CategoryId>,
    pub wd: Vec<Vec<f64>>,
    pub bd: Vec<f64>,
    pub wc: Vec<Vec<f64>>,
    pub bc: Vec<f64>,
    pub beta: f64,
    pub lambda: f64,
}

impl MilParams {
    pub fn zeros(categories: Vec<CategoryId>, dim: usize, beta: f64, lambda: f64) -> Self {
        let c = categories.len();
        Self {
            categories,
            wd: vec![vec![0.0; dim]; c],
            bd: vec![0.0; c],
            wc: vec![vec![0.0; dim]; c],
            bc: vec![0.0; c],
            beta,
            lambda,
        }
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn dim(&self) -> usize {
        self.wd.first().map_or(0, Vec::len)
    }

    fn check_features<F: AsRef<[f64]>>(&self, features: &[F]) -> Result<()> {
        if features.is_empty() {
            return Err(Error::NoProposals);
        }
        for f in features {
            if f.as_ref().len() != self.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.dim(),
                    actual: f.as_ref().len(),
                });
            }
        }
        Ok(())
    }
}

/// Forward-pass tensors, all `R x C` except `yhat`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensors {
    pub sd: Vec<Vec<f64>>,
    pub sigma_d: Vec<Vec<f64>>,
    pub sigma_c: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub yhat: Vec<f64>,
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn mil_forward<F: AsRef<[f64]>>(p: &MilParams, features: &[F]) -> Result<ScoreTensors> {
    p.check_features(features)?;
    let r = features.len();
    let c = p.n_categories();

    let sd: Vec<Vec<f64>> = features
        .iter()
        .map(|f| (0..c).map(|j| sigmoid(dot(&p.wd[j], f.as_ref()) + p.bd[j])).collect())
        .collect();
    let sigma_c: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let mut row: Vec<f64> = (0..c).map(|j| dot(&p.wc[j], f.as_ref()) + p.bc[j]).collect();
            softmax_in_place(&mut row);
            row
        })
        .collect();
    let mut sigma_d = vec![vec![0.0; c]; r];
    for j in 0..c {
        let mut col: Vec<f64> = (0..r).map(|i| p.beta * sd[i][j]).collect();
        softmax_in_place(&mut col);
        for (i, v) in col.into_iter().enumerate() {
            sigma_d[i][j] = v;
        }
    }
    let s: Vec<Vec<f64>> = sigma_d
        .iter()
        .zip(&sigma_c)
        .map(|(d, cl)| d.iter().zip(cl).map(|(a, b)| a * b).collect())
        .collect();
    let yhat = (0..c).map(|j| s.iter().map(|row| row[j]).sum()).collect();
    Ok(ScoreTensors {
        sd,
        sigma_d,
        sigma_c,
        s,
        yhat,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MilLoss {
    pub total: f64,
    pub wsddn: f64,
    pub guide: f64,
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn check_targets(p: &MilParams, r: usize, labels: &[bool], objectness: &[f64]) -> Result<()> {
    if labels.len() != p.n_categories() {
        return Err(Error::DimensionMismatch {
            expected: p.n_categories(),
            actual: labels.len(),
        });
    }
    if objectness.len() != r {
        return Err(Error::DimensionMismatch {
            expected: r,
            actual: objectness.len(),
        });
    }
    Ok(())
}

fn loss_from(t: &ScoreTensors, lambda: f64, labels: &[bool], objectness: &[f64]) -> MilLoss {
    let c = t.yhat.len() as f64;
    let wsddn = -t
        .yhat
        .iter()
        .zip(labels)
        .map(|(&yh, &y)| {
            let yh = yh.clamp(YHAT_CLAMP, 1.0 - YHAT_CLAMP);
            if y {
                yh.ln()
            } else {
                (1.0 - yh).ln()
            }
        })
        .sum::<f64>()
        / c;
    let guide = t
        .sd
        .iter()
        .zip(objectness)
        .map(|(row, &si)| (row[argmax(row)] - si).powi(2))
        .sum::<f64>()
        / t.sd.len() as f64;
    MilLoss {
        total: wsddn + lambda * guide,
        wsddn,
        guide,
    }
}

pub fn mil_loss<F: AsRef<[f64]>>(
    p: &MilParams,
    features: &[F],
    labels: &[bool],
    objectness: &[f64],
) -> Result<MilLoss> {
    let t = mil_forward(p, features)?;
    check_targets(p, features.len(), labels, objectness)?;
    Ok(loss_from(&t, p.lambda, labels, objectness))
}

/// Gradient of the total loss with respect to the weight fields.
#[derive(Debug, Clone, PartialEq)]
pub struct MilGrad {
    pub wd: Vec<Vec<f64>>,
    pub bd: Vec<f64>,
    pub wc: Vec<Vec<f64>>,
    pub bc: Vec<f64>,
}

pub fn mil_grad<F: AsRef<[f64]>>(
    p: &MilParams,
    features: &[F],
    labels: &[bool],
    objectness: &[f64],
) -> Result<MilGrad> {
    Ok(loss_and_grad(p, features, labels, objectness)?.1)
}

fn loss_and_grad<F: AsRef<[f64]>>(
    p: &MilParams,
    features: &[F],
    labels: &[bool],
    objectness: &[f64],
) -> Result<(MilLoss, MilGrad)> {
    let t = mil_forward(p, features)?;
    let r = features.len();
    check_targets(p, r, labels, objectness)?;
    let loss = loss_from(&t, p.lambda, labels, objectness);
    let c = p.n_categories();
    let dim = p.dim();

    // dL/dyhat; zero where the clamp is active.
    let g: Vec<f64> = t
        .yhat
        .iter()
        .zip(labels)
        .map(|(&yh, &y)| {
            if yh <= YHAT_CLAMP || yh >= 1.0 - YHAT_CLAMP {
                0.0
            } else if y {
                -1.0 / (c as f64 * yh)
            } else {
                1.0 / (c as f64 * (1.0 - yh))
            }
        })
        .collect();

    // Detection branch: softmax over proposals, per category.
    let mut dxd = vec![vec![0.0; c]; r];
    for j in 0..c {
        let mean: f64 = (0..r).map(|i| t.sigma_d[i][j] * g[j] * t.sigma_c[i][j]).sum();
        for i in 0..r {
            let a = g[j] * t.sigma_c[i][j];
            let dz = t.sigma_d[i][j] * (a - mean);
            let sd = t.sd[i][j];
            dxd[i][j] = p.beta * sd * (1.0 - sd) * dz;
        }
    }
    if p.lambda != 0.0 {
        for i in 0..r {
            let m = argmax(&t.sd[i]);
            let sd = t.sd[i][m];
            dxd[i][m] += p.lambda * 2.0 / r as f64 * (sd - objectness[i]) * sd * (1.0 - sd);
        }
    }

    // Classification branch: softmax over categories, per proposal.
    let mut dxc = vec![vec![0.0; c]; r];
    for i in 0..r {
        let b: Vec<f64> = (0..c).map(|j| g[j] * t.sigma_d[i][j]).collect();
        let mean: f64 = (0..c).map(|j| t.sigma_c[i][j] * b[j]).sum();
        for j in 0..c {
            dxc[i][j] = t.sigma_c[i][j] * (b[j] - mean);
        }
    }

    let mut grad = MilGrad {
        wd: vec![vec![0.0; dim]; c],
        bd: vec![0.0; c],
        wc: vec![vec![0.0; dim]; c],
        bc: vec![0.0; c],
    };
    for (i, f) in features.iter().enumerate() {
        let f = f.as_ref();
        for j in 0..c {
            let (gd, gc) = (dxd[i][j], dxc[i][j]);
            grad.bd[j] += gd;
            grad.bc[j] += gc;
            for k in 0..dim {
                grad.wd[j][k] += gd * f[k];
                grad.wc[j][k] += gc * f[k];
            }
        }
    }
    Ok((loss, grad))
}

/// Final score `eta * s[i][j] + (1 - eta) * objectness[i]`.
pub fn fuse_scores(s: &[Vec<f64>], objectness: &[f64], eta: f64) -> Result<Vec<Vec<f64>>> {
    if s.len() != objectness.len() {
        return Err(Error::DimensionMismatch {
            expected: s.len(),
            actual: objectness.len(),
        });
    }
    Ok(s.iter()
        .zip(objectness)
        .map(|(row, &si)| row.iter().map(|&v| eta * v + (1.0 - eta) * si).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub lr_drop_at: f64,
    pub beta: f64,
    pub lambda: f64,
    pub init: Init<MilParams>,
    pub seed: u64,
}

impl Default for MilTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 0.5,
            lr_drop_at: 0.7,
            beta: 5.0,
            lambda: 0.2,
            init: Init::Scratch,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilTraining {
    pub params: MilParams,
    /// Mean loss over trainable images before training and after each epoch.
    pub loss_trace: Vec<f64>,
    /// Images dropped because the OCUD produced no proposals for them.
    pub skipped_images: usize,
}

struct MilExample {
    features: Vec<Vec<f64>>,
    objectness: Vec<f64>,
    labels: Vec<bool>,
}

fn mean_mil_loss(p: &MilParams, examples: &[MilExample]) -> Result<f64> {
    let mut total = 0.0;
    for e in examples {
        total += mil_loss(p, &e.features, &e.labels, &e.objectness)?.total;
    }
    Ok(total / examples.len() as f64)
}

/// Per-image SGD on the MIL loss, with proposals from the given OCUD.
pub fn train_mil(
    images: &[TrainImage<'_>],
    candidates: &dyn CandidateSource,
    ocud: &OcudParams,
    proposals: &ProposalConfig,
    categories: &[CategoryId],
    cfg: &MilTrainConfig,
) -> Result<MilTraining> {
    if let (0, Init::WarmStart(p)) = (cfg.steps, &cfg.init) {
        return Ok(MilTraining {
            params: p.clone(),
            loss_trace: Vec::new(),
            skipped_images: 0,
        });
    }
    let mut params = match &cfg.init {
        Init::WarmStart(p) => MilParams {
            beta: cfg.beta,
            lambda: cfg.lambda,
            ..p.clone()
        },
        Init::Scratch => MilParams::zeros(categories.to_vec(), ocud.dim(), cfg.beta, cfg.lambda),
    };

    let mut examples = Vec::new();
    let mut skipped = 0;
    for img in images {
        let props = detect_objectness(ocud, candidates.candidates(img.id), proposals)?;
        if props.is_empty() {
            skipped += 1;
            continue;
        }
        let labels = params.categories.iter().map(|c| img.labels.contains(c)).collect();
        examples.push(MilExample {
            objectness: props.iter().map(|p| p.objectness).collect(),
            features: props.into_iter().map(|p| p.feature).collect(),
            labels,
        });
    }
    if examples.is_empty() {
        return Err(Error::NoTrainableImage(format!(
            "{} image(s), none with proposals",
            images.len()
        )));
    }

    let schedule = StepSchedule {
        lr: cfg.lr,
        steps: cfg.steps,
        drop_at: cfg.lr_drop_at,
    };
    let mut sampler = EpochSampler::new(examples.len(), rng::stream(cfg.seed, "mil-order", 0));
    let mut loss_trace = vec![mean_mil_loss(&params, &examples)?];
    for step in 0..cfg.steps {
        let (i, epoch_end) = sampler.next();
        let e = &examples[i];
        let (_, grad) = loss_and_grad(&params, &e.features, &e.labels, &e.objectness)?;
        let lr = schedule.lr_at(step);
        for j in 0..params.n_categories() {
            for (w, g) in params.wd[j].iter_mut().zip(&grad.wd[j]) {
                *w -= lr * g;
            }
            for (w, g) in params.wc[j].iter_mut().zip(&grad.wc[j]) {
                *w -= lr * g;
            }
            params.bd[j] -= lr * grad.bd[j];
            params.bc[j] -= lr * grad.bc[j];
        }
        if epoch_end {
            loss_trace.push(mean_mil_loss(&params, &examples)?);
        }
    }
    Ok(MilTraining {
        params,
        loss_trace,
        skipped_images: skipped,
    })
}

/// Whether score fusion happens before or after per-category NMS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOrder {
    BeforeNms,
    AfterNms,
}

impl std::str::FromStr for FusionOrder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "before_nms" => Ok(Self::BeforeNms),
            "after_nms" => Ok(Self::AfterNms),
            other => Err(format!("unknown fusion order `{other}`")),
        }
    }
}

/// The target-domain detector: OCUD proposals scored by the MIL classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDetector {
    pub ocud: OcudParams,
    pub mil: MilParams,
    pub eta: f64,
    pub nms_iou: f64,
    pub proposals: ProposalConfig,
    pub fusion: FusionOrder,
}

impl TargetDetector {
    pub fn detect(&self, candidates: &[Candidate]) -> Result<Vec<Detection>> {
        let props = detect_objectness(&self.ocud, candidates, &self.proposals)?;
        self.detect_proposals(&props)
    }

    pub fn detect_proposals(&self, props: &[Proposal]) -> Result<Vec<Detection>> {
        if props.is_empty() {
            return Ok(Vec::new());
        }
        let features: Vec<&[f64]> = props.iter().map(|p| p.feature.as_slice()).collect();
        let objectness: Vec<f64> = props.iter().map(|p| p.objectness).collect();
        let t = mil_forward(&self.mil, &features)?;
        let fused = fuse_scores(&t.s, &objectness, self.eta)?;
        let cats = &self.mil.categories;
        let build = |scores: &[Vec<f64>]| -> Vec<Detection> {
            props
                .iter()
                .enumerate()
                .flat_map(|(i, p)| {
                    cats.iter().enumerate().map(move |(j, &category)| Detection {
                        bbox: p.bbox,
                        category,
                        score: scores[i][j],
                    })
                })
                .collect()
        };
        match self.fusion {
            FusionOrder::BeforeNms => Ok(nms(&build(&fused), self.nms_iou, true)),
            FusionOrder::AfterNms => {
                // Suppress on MIL scores, then rescore survivors.
                let raw = build(&t.s);
                let index_of = |d: &Detection| {
                    let i = props.iter().position(|p| p.bbox == d.bbox).unwrap_or(0);
                    let j = cats.iter().position(|&c| c == d.category).unwrap_or(0);
                    (i, j)
                };
                let mut kept: Vec<Detection> = nms(&raw, self.nms_iou, true)
                    .into_iter()
                    .map(|d| {
                        let (i, j) = index_of(&d);
                        Detection {
                            score: fused[i][j],
                            ..d
                        }
                    })
                    .collect();
                kept.sort_by(|a, b| b.score.total_cmp(&a.score));
                Ok(kept)
            }
        }
    }

    /// Runs the detector on every image, keyed by image id.
    pub fn detect_all<'a>(
        &self,
        images: impl IntoIterator<Item = &'a str>,
        candidates: &dyn CandidateSource,
    ) -> Result<std::collections::BTreeMap<String, Vec<Detection>>> {
        images
            .into_iter()
            .map(|id| Ok((id.to_string(), self.detect(candidates.candidates(id))?)))
            .collect()
    }
}
