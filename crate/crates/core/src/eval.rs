//! Detection metrics: VOC-style AP/mAP and CorLoc.
//!
//! mAP matching uses IoU `>=` threshold; CorLoc counts a localization as
//! correct only for IoU strictly above 0.5.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Annotation, CategoryId, Detection};
use crate::geometry::iou;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    #[default]
    ElevenPoint,
    /// Exact area under the interpolated precision envelope.
    AllPoints,
}

impl std::str::FromStr for ApMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "eleven_point" => Ok(Self::ElevenPoint),
            "all_points" => Ok(Self::AllPoints),
            other => Err(format!("unknown AP method `{other}`")),
        }
    }
}

/// Cumulative recall and precision along a ranked list of TP/FP flags.
pub fn pr_curve(tp: &[bool], n_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        recall.push(if n_gt == 0 { 0.0 } else { hits as f64 / n_gt as f64 });
        precision.push(hits as f64 / (k + 1) as f64);
    }
    (recall, precision)
}

/// Average precision from recall/precision pairs in rank order.
pub fn voc_ap(recall: &[f64], precision: &[f64], method: ApMethod) -> f64 {
    if recall.is_empty() {
        return 0.0;
    }
    match method {
        ApMethod::ElevenPoint => {
            let mut ap = 0.0;
            for t in 0..=10 {
                let thr = t as f64 / 10.0;
                let p = recall
                    .iter()
                    .zip(precision)
                    .filter(|(r, _)| **r >= thr)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
                ap += p;
            }
            ap / 11.0
        }
        ApMethod::AllPoints => {
            let mut mrec = Vec::with_capacity(recall.len() + 2);
            mrec.push(0.0);
            mrec.extend_from_slice(recall);
            mrec.push(1.0);
            let mut mpre = Vec::with_capacity(precision.len() + 2);
            mpre.push(0.0);
            mpre.extend_from_slice(precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: CategoryId,
    pub ap: f64,
    pub ground_truth: usize,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub per_category: Vec<CategoryAp>,
    /// Mean over categories that have at least one ground-truth box.
    pub map: f64,
}

fn box_key_cmp(a: &Detection, b: &Detection) -> Ordering {
    a.bbox
        .to_array()
        .iter()
        .zip(b.bbox.to_array().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Detections of one category across images, in a canonical rank order:
/// score descending, then image id, then box coordinates.
fn ranked<'a>(
    dets: &'a BTreeMap<String, Vec<Detection>>,
    category: CategoryId,
) -> Vec<(&'a str, &'a Detection)> {
    let mut all: Vec<(&str, &Detection)> = dets
        .iter()
        .flat_map(|(id, ds)| ds.iter().filter(|d| d.category == category).map(move |d| (id.as_str(), d)))
        .collect();
    all.sort_by(|a, b| {
        b.1.score
            .total_cmp(&a.1.score)
            .then_with(|| a.0.cmp(b.0))
            .then_with(|| box_key_cmp(a.1, b.1))
    });
    all
}

/// Per-category AP and mAP over `categories`.
///
/// A detection is a true positive iff it reaches `iou_thresh` with a still
/// unmatched ground truth of its category; among those the best IoU wins,
/// ties going to the lower ground-truth index.
pub fn evaluate_map(
    dets: &BTreeMap<String, Vec<Detection>>,
    truth: &BTreeMap<String, Vec<Annotation>>,
    categories: &[CategoryId],
    iou_thresh: f64,
    method: ApMethod,
) -> MapReport {
    let mut per_category = Vec::with_capacity(categories.len());
    for &c in categories {
        let gts: BTreeMap<&str, Vec<&Annotation>> = truth
            .iter()
            .map(|(id, v)| (id.as_str(), v.iter().filter(|a| a.category == c).collect()))
            .collect();
        let n_gt: usize = gts.values().map(Vec::len).sum();
        let mut used: BTreeMap<&str, Vec<bool>> =
            gts.iter().map(|(id, v)| (*id, vec![false; v.len()])).collect();
        let order = ranked(dets, c);
        let mut tp = Vec::with_capacity(order.len());
        for (id, d) in &order {
            let mut hit = false;
            if let (Some(g), Some(u)) = (gts.get(id), used.get_mut(id)) {
                let mut best: Option<(usize, f64)> = None;
                for (k, gt) in g.iter().enumerate() {
                    if u[k] {
                        continue;
                    }
                    let v = iou(&d.bbox, &gt.bbox);
                    if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((k, v));
                    }
                }
                if let Some((k, _)) = best {
                    u[k] = true;
                    hit = true;
                }
            }
            tp.push(hit);
        }
        let (rec, prec) = pr_curve(&tp, n_gt);
        per_category.push(CategoryAp {
            category: c,
            ap: if n_gt == 0 { 0.0 } else { voc_ap(&rec, &prec, method) },
            ground_truth: n_gt,
            detections: order.len(),
        });
    }
    let scored: Vec<f64> = per_category
        .iter()
        .filter(|c| c.ground_truth > 0)
        .map(|c| c.ap)
        .collect();
    let map = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    MapReport { per_category, map }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCorLoc {
    pub category: CategoryId,
    pub correct: usize,
    pub images: usize,
    pub corloc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorLocReport {
    pub per_category: Vec<CategoryCorLoc>,
    /// Mean over categories present in at least one image.
    pub mean: f64,
}

/// Fraction of images containing each category whose top-scoring detection
/// of that category overlaps one of its boxes with IoU > 0.5.
pub fn evaluate_corloc(
    dets: &BTreeMap<String, Vec<Detection>>,
    truth: &BTreeMap<String, Vec<Annotation>>,
    categories: &[CategoryId],
) -> CorLocReport {
    let mut per_category = Vec::with_capacity(categories.len());
    for &c in categories {
        let (mut correct, mut images) = (0, 0);
        for (id, gts) in truth {
            let boxes: Vec<&Annotation> = gts.iter().filter(|a| a.category == c).collect();
            if boxes.is_empty() {
                continue;
            }
            images += 1;
            let top = dets.get(id).and_then(|ds| {
                ds.iter()
                    .filter(|d| d.category == c)
                    .reduce(|best, d| if d.score > best.score { d } else { best })
            });
            if let Some(top) = top {
                if boxes.iter().any(|g| iou(&top.bbox, &g.bbox) > 0.5) {
                    correct += 1;
                }
            }
        }
        per_category.push(CategoryCorLoc {
            category: c,
            correct,
            images,
            corloc: if images == 0 { 0.0 } else { correct as f64 / images as f64 },
        });
    }
    let present: Vec<f64> = per_category
        .iter()
        .filter(|c| c.images > 0)
        .map(|c| c.corloc)
        .collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    CorLocReport { per_category, mean }
}

/// A combined per-category metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: MapReport,
    pub corloc: CorLocReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category_names: Option<Vec<String>>,
}

impl MetricsReport {
    /// CSV with one row per category and a trailing `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,name,ap,ground_truth,detections,corloc\n");
        for (ap, cl) in self.map.per_category.iter().zip(&self.corloc.per_category) {
            let name = self
                .category_names
                .as_ref()
                .and_then(|n| n.get(ap.category as usize))
                .map_or("", String::as_str);
            let _ = writeln!(
                out,
                "{},{},{:.6},{},{},{:.6}",
                ap.category, name, ap.ap, ap.ground_truth, ap.detections, cl.corloc
            );
        }
        let _ = writeln!(out, "mean,,{:.6},,,{:.6}", self.map.map, self.corloc.mean);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(bbox: BBox, category: CategoryId, score: f64) -> Detection {
        Detection {
            bbox,
            category,
            score,
        }
    }

    #[test]
    fn ap_fixtures() {
        for m in [ApMethod::ElevenPoint, ApMethod::AllPoints] {
            let (r, p) = pr_curve(&[true], 1);
            assert_eq!(voc_ap(&r, &p, m), 1.0);
            assert_eq!(voc_ap(&[], &[], m), 0.0);
        }
        let (r, p) = pr_curve(&[false, true], 1);
        assert_eq!(r, vec![0.0, 1.0]);
        assert_eq!(p, vec![0.0, 0.5]);
        assert!((voc_ap(&r, &p, ApMethod::ElevenPoint) - 0.5).abs() < 1e-15);
        assert!((voc_ap(&r, &p, ApMethod::AllPoints) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_gt_one_found() {
        // TP then FP with 2 GT: recall 0.5 at precision 1.
        let (r, p) = pr_curve(&[true, false], 2);
        assert!((voc_ap(&r, &p, ApMethod::ElevenPoint) - 6.0 / 11.0).abs() < 1e-12);
        assert!((voc_ap(&r, &p, ApMethod::AllPoints) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_detections_give_map_one() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let truth = BTreeMap::from([(
            "i".to_string(),
            vec![Annotation::original(g, 0), Annotation::original(b(20.0, 20.0, 30.0, 30.0), 1)],
        )]);
        let dets = BTreeMap::from([(
            "i".to_string(),
            vec![det(g, 0, 1.0), det(b(20.0, 20.0, 30.0, 30.0), 1, 1.0)],
        )]);
        let r = evaluate_map(&dets, &truth, &[0, 1, 2], 0.5, ApMethod::ElevenPoint);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_category[2].ground_truth, 0);
    }

    #[test]
    fn mislocalized_box_is_false_positive() {
        // Two images, two categories; the cat-1 box on image b has IoU 0.4.
        let truth = BTreeMap::from([
            (
                "a".to_string(),
                vec![
                    Annotation::original(b(0.0, 0.0, 10.0, 10.0), 0),
                    Annotation::original(b(50.0, 0.0, 60.0, 10.0), 1),
                ],
            ),
            (
                "b".to_string(),
                vec![Annotation::original(b(0.0, 0.0, 10.0, 10.0), 1)],
            ),
        ]);
        // [0,0,10,10] vs [0,0,4,10]: inter 40, union 100 -> 0.4
        let dets = BTreeMap::from([
            (
                "a".to_string(),
                vec![det(b(0.0, 0.0, 10.0, 10.0), 0, 0.9), det(b(50.0, 0.0, 60.0, 10.0), 1, 0.6)],
            ),
            ("b".to_string(), vec![det(b(0.0, 0.0, 4.0, 10.0), 1, 0.8)]),
        ]);
        let r = evaluate_map(&dets, &truth, &[0, 1], 0.5, ApMethod::ElevenPoint);
        assert_eq!(r.per_category[0].ap, 1.0);
        // cat 1 ranking: FP (0.8), TP (0.6) over 2 GT -> recall 0.5 at precision 0.5
        assert!((r.per_category[1].ap - 6.0 * 0.5 / 11.0).abs() < 1e-12);
        assert!((r.map - (1.0 + 3.0 / 11.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn corloc_examples() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let truth = BTreeMap::from([("i".to_string(), vec![Annotation::original(g, 0)])]);
        let run = |d: Vec<Detection>| {
            let dets = BTreeMap::from([("i".to_string(), d)]);
            evaluate_corloc(&dets, &truth, &[0]).per_category[0].corloc
        };
        // IoU 0.6: [0,0,6,10] -> 60/100
        assert_eq!(run(vec![det(b(0.0, 0.0, 6.0, 10.0), 0, 0.9)]), 1.0);
        // IoU 0.5 exactly: [0,0,5,10]
        assert_eq!(run(vec![det(b(0.0, 0.0, 5.0, 10.0), 0, 0.9)]), 0.0);
        assert_eq!(run(vec![]), 0.0);
        assert_eq!(run(vec![det(g, 1, 0.9)]), 0.0);
        // only the top-1 counts
        assert_eq!(
            run(vec![det(b(50.0, 50.0, 60.0, 60.0), 0, 0.95), det(g, 0, 0.9)]),
            0.0
        );
    }

    #[test]
    fn csv_has_summary_row() {
        let truth = BTreeMap::from([(
            "i".to_string(),
            vec![Annotation::original(b(0.0, 0.0, 1.0, 1.0), 0)],
        )]);
        let report = MetricsReport {
            map: evaluate_map(&BTreeMap::new(), &truth, &[0], 0.5, ApMethod::ElevenPoint),
            corloc: evaluate_corloc(&BTreeMap::new(), &truth, &[0]),
            category_names: Some(vec!["dog".into()]),
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("category,"));
        assert!(csv.contains("0,dog,0.000000,1,0,0.000000"));
        assert!(csv.trim_end().ends_with("mean,,0.000000,,,0.000000"));
    }
}
