//! Pseudo ground-truth mining from target-detector outputs.
//!
//! Source images: a detection becomes a pseudo box when its score exceeds
//! `tau` and it barely overlaps the original annotations (intersection over
//! the detection's own area below `o`). Target images: for each labeled
//! category, keep the top-scoring detection plus every detection above
//! `tau`; other categories are dropped.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{Annotation, CategoryId, Detection, TrainImage};
use crate::error::{Error, Result};
use crate::geometry::{iou, overlap_over_pred, score_order, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub tau: f64,
    pub o: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { tau: 0.8, o: 0.1 }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau {} outside (0, 1)", self.tau)));
        }
        if !(self.o > 0.0 && self.o <= 1.0) {
            return Err(Error::InvalidConfig(format!("o {} outside (0, 1]", self.o)));
        }
        Ok(())
    }
}

fn to_pseudo(d: &Detection) -> Annotation {
    Annotation::pseudo(d.bbox, d.category, d.score)
}

/// Mines one source image against its original boxes.
pub fn mine_source_image(dets: &[Detection], originals: &[BBox], cfg: &MiningConfig) -> Vec<Annotation> {
    dets.iter()
        .filter(|d| d.score > cfg.tau && overlap_over_pred(&d.bbox, originals) < cfg.o)
        .map(to_pseudo)
        .collect()
}

/// Mines one target image given its image-level labels.
pub fn mine_target_image(
    dets: &[Detection],
    labels: &BTreeSet<CategoryId>,
    cfg: &MiningConfig,
) -> Vec<Annotation> {
    let mut out = Vec::new();
    for &y in labels {
        let top = dets
            .iter()
            .filter(|d| d.category == y)
            .map(|d| d.score)
            .fold(f64::NEG_INFINITY, f64::max);
        out.extend(
            dets.iter()
                .filter(|d| d.category == y && (d.score > cfg.tau || d.score == top))
                .map(to_pseudo),
        );
    }
    out
}

/// Source loop: compares against `origin = original` annotations only, so
/// re-mining an augmented image ignores earlier pseudo boxes.
pub fn mine_source<F>(
    images: &[TrainImage<'_>],
    mut detect: F,
    cfg: &MiningConfig,
) -> Result<BTreeMap<String, Vec<Annotation>>>
where
    F: FnMut(&TrainImage<'_>) -> Result<Vec<Detection>>,
{
    let mut out = BTreeMap::new();
    for img in images {
        let dets = detect(img)?;
        let mined = mine_source_image(&dets, &img.original_boxes(), cfg);
        if !mined.is_empty() {
            out.insert(img.id.to_string(), mined);
        }
    }
    Ok(out)
}

pub fn mine_target<F>(
    images: &[TrainImage<'_>],
    mut detect: F,
    cfg: &MiningConfig,
) -> Result<BTreeMap<String, Vec<Annotation>>>
where
    F: FnMut(&TrainImage<'_>) -> Result<Vec<Detection>>,
{
    let mut out = BTreeMap::new();
    for img in images {
        if img.labels.is_empty() {
            continue;
        }
        let dets = detect(img)?;
        let mined = mine_target_image(&dets, img.labels, cfg);
        if !mined.is_empty() {
            out.insert(img.id.to_string(), mined);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningStats {
    pub precision: f64,
    pub recall: f64,
    pub mined: usize,
    pub correct: usize,
    pub ground_truth: usize,
}

/// Precision and recall of mined boxes against held-out truth.
///
/// Mined boxes are matched greedily by descending score, one-to-one, to the
/// best-IoU unmatched ground truth of the same category with IoU >= `iou_thresh`.
/// When `categories` is given, truth boxes outside it are ignored. Zero mined
/// boxes give precision 1 and recall 0.
pub fn mining_stats(
    mined: &BTreeMap<String, Vec<Annotation>>,
    truth: &BTreeMap<String, Vec<Annotation>>,
    iou_thresh: f64,
    categories: Option<&BTreeSet<CategoryId>>,
) -> MiningStats {
    let relevant = |a: &&Annotation| categories.is_none_or(|c| c.contains(&a.category));
    let ground_truth: usize = truth.values().map(|v| v.iter().filter(relevant).count()).sum();
    let n_mined: usize = mined.values().map(Vec::len).sum();
    let mut correct = 0;
    for (id, boxes) in mined {
        let gts: Vec<&Annotation> = truth
            .get(id)
            .map(|v| v.iter().filter(relevant).collect())
            .unwrap_or_default();
        let mut taken = vec![false; gts.len()];
        let scores: Vec<f64> = boxes.iter().map(|a| a.score.unwrap_or(0.0)).collect();
        for i in score_order(&scores) {
            let m = &boxes[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.category != m.category {
                    continue;
                }
                let v = iou(&m.bbox, &gt.bbox);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                correct += 1;
            }
        }
    }
    let (precision, recall) = if n_mined == 0 {
        (1.0, 0.0)
    } else {
        (
            correct as f64 / n_mined as f64,
            if ground_truth == 0 {
                0.0
            } else {
                correct as f64 / ground_truth as f64
            },
        )
    };
    MiningStats {
        precision,
        recall,
        mined: n_mined,
        correct,
        ground_truth,
    }
}
