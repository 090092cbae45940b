//! Brute-force reference implementations shared by the integration tests.
//! They are written from the rule statements, not from the library code.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wsod_core::{mil_forward, mil_grad, mil_loss, Annotation, BBox, CategoryId, Detection, MilParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

pub fn random_box(rng: &mut impl Rng, size: f64) -> BBox {
    let w = rng.random_range(2.0..size * 0.5);
    let h = rng.random_range(2.0..size * 0.5);
    let x = rng.random_range(0.0..size - w);
    let y = rng.random_range(0.0..size - h);
    bx(x, y, x + w, y + h)
}

/// Box near `anchor`, so overlaps are common.
pub fn nearby_box(rng: &mut impl Rng, anchor: &BBox) -> BBox {
    let dx = rng.random_range(-0.6..0.6) * anchor.width();
    let dy = rng.random_range(-0.6..0.6) * anchor.height();
    let s = rng.random_range(0.6..1.4);
    let x1 = anchor.x1() + dx;
    let y1 = anchor.y1() + dy;
    bx(x1, y1, x1 + anchor.width() * s, y1 + anchor.height() * s)
}

fn inter(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2().min(b.x2()) - a.x1().max(b.x1());
    let h = a.y2().min(b.y2()) - a.y1().max(b.y1());
    if w > 0.0 && h > 0.0 {
        w * h
    } else {
        0.0
    }
}

pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let i = inter(a, b);
    let a_area = (a.x2() - a.x1()) * (a.y2() - a.y1());
    let b_area = (b.x2() - b.x1()) * (b.y2() - b.y1());
    i / (a_area + b_area - i)
}

/// O(n^2) NMS: repeatedly take the best remaining box and drop everything
/// that overlaps it by more than `thr`.
pub fn ref_nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        out.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && ref_iou(&boxes[b], &boxes[i]) > thr {
                alive[i] = false;
            }
        }
    }
    out
}

/// Source loop of the mining algorithm, literally.
pub fn ref_mine_source(
    preds: &[Detection],
    originals: &[BBox],
    tau: f64,
    o: f64,
) -> Vec<(BBox, CategoryId, f64)> {
    let mut out = Vec::new();
    for p in preds {
        if p.score <= tau {
            continue;
        }
        let area = (p.bbox.x2() - p.bbox.x1()) * (p.bbox.y2() - p.bbox.y1());
        let mut overlap: f64 = 0.0;
        for g in originals {
            overlap = overlap.max(inter(&p.bbox, g) / area);
        }
        if overlap < o {
            out.push((p.bbox, p.category, p.score));
        }
    }
    out
}

/// Target loop of the mining algorithm, literally.
pub fn ref_mine_target(
    preds: &[Detection],
    labels: &BTreeSet<CategoryId>,
    tau: f64,
) -> Vec<(BBox, CategoryId, f64)> {
    let mut out = Vec::new();
    for &y in labels {
        let py: Vec<&Detection> = preds.iter().filter(|p| p.category == y).collect();
        if py.is_empty() {
            continue;
        }
        let max = py.iter().map(|p| p.score).fold(f64::MIN, f64::max);
        for p in py {
            if p.score > tau || p.score == max {
                out.push((p.bbox, p.category, p.score));
            }
        }
    }
    out
}

pub fn as_triples(v: &[Annotation]) -> Vec<(BBox, CategoryId, f64)> {
    v.iter().map(|a| (a.bbox, a.category, a.score.unwrap())).collect()
}

/// Eleven-point AP by brute force: rank, match, then take the best
/// precision at or beyond each recall level.
pub fn ref_eleven_point_map(
    dets: &BTreeMap<String, Vec<Detection>>,
    truth: &BTreeMap<String, Vec<Annotation>>,
    categories: &[CategoryId],
) -> f64 {
    let mut aps = Vec::new();
    for &c in categories {
        let n_gt: usize = truth.values().flatten().filter(|a| a.category == c).count();
        if n_gt == 0 {
            continue;
        }
        let mut ranked: Vec<(&String, &Detection)> = dets
            .iter()
            .flat_map(|(id, v)| v.iter().filter(|d| d.category == c).map(move |d| (id, d)))
            .collect();
        ranked.sort_by(|a, b| {
            b.1.score
                .total_cmp(&a.1.score)
                .then(a.0.cmp(b.0))
                .then(a.1.bbox.to_array().partial_cmp(&b.1.bbox.to_array()).unwrap())
        });
        let mut used: BTreeMap<&String, Vec<bool>> = BTreeMap::new();
        let mut points = Vec::new();
        let mut tp = 0usize;
        for (k, (id, d)) in ranked.iter().enumerate() {
            let gts: Vec<&Annotation> = truth
                .get(*id)
                .map(|v| v.iter().filter(|a| a.category == c).collect())
                .unwrap_or_default();
            let u = used.entry(id).or_insert_with(|| vec![false; gts.len()]);
            let mut best = None;
            let mut best_iou = 0.0;
            for (g, gt) in gts.iter().enumerate() {
                let v = ref_iou(&d.bbox, &gt.bbox);
                if !u[g] && v >= 0.5 && v > best_iou {
                    best = Some(g);
                    best_iou = v;
                }
            }
            if let Some(g) = best {
                u[g] = true;
                tp += 1;
            }
            points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
        }
        let mut ap = 0.0;
        for t in 0..=10 {
            let best = points
                .iter()
                .filter(|(r, _)| *r >= t as f64 / 10.0)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            ap += best;
        }
        aps.push(ap / 11.0);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Random detection and truth fixture over at most `max_images` images.
pub fn random_eval_fixture(
    rng: &mut impl Rng,
    max_images: usize,
    categories: &[CategoryId],
) -> (BTreeMap<String, Vec<Detection>>, BTreeMap<String, Vec<Annotation>>) {
    let mut dets = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for i in 0..rng.random_range(1..=max_images) {
        let id = format!("im{i}");
        let gts: Vec<Annotation> = (0..rng.random_range(0..4))
            .map(|_| Annotation::original(random_box(rng, 100.0), categories[rng.random_range(0..categories.len())]))
            .collect();
        let mut ds = Vec::new();
        for _ in 0..rng.random_range(0..6) {
            let bbox = match gts.get(rng.random_range(0..gts.len() + 1)) {
                Some(g) => nearby_box(rng, &g.bbox),
                None => random_box(rng, 100.0),
            };
            ds.push(Detection {
                bbox,
                category: categories[rng.random_range(0..categories.len())],
                score: rng.random::<f64>(),
            });
        }
        dets.insert(id.clone(), ds);
        truth.insert(id, gts);
    }
    (dets, truth)
}

pub struct Instance {
    pub params: MilParams,
    pub feats: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub objectness: Vec<f64>,
}

/// Random instance with R <= 5, C <= 4, d <= 8. Instances whose
/// per-proposal category argmax is within 1e-4 of a tie are redrawn, since
/// the guide term has a kink there.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    loop {
        let (r, c, d) = (rng.random_range(1..=5), rng.random_range(1..=4), rng.random_range(1..=8));
        let mut normal = |scale: f64| scale * rng.sample::<f64, _>(StandardNormal);
        let mat = |normal: &mut dyn FnMut(f64) -> f64| -> Vec<Vec<f64>> {
            (0..c).map(|_| (0..d).map(|_| normal(0.7)).collect()).collect()
        };
        let wd = mat(&mut normal);
        let wc = mat(&mut normal);
        let bd: Vec<f64> = (0..c).map(|_| normal(0.5)).collect();
        let bc: Vec<f64> = (0..c).map(|_| normal(0.5)).collect();
        let feats: Vec<Vec<f64>> = (0..r).map(|_| (0..d).map(|_| normal(1.0)).collect()).collect();
        let mut params = MilParams::zeros((0..c as u32).collect(), d, rng.random_range(1.0..8.0), rng.random_range(0.0..1.0));
        params.wd = wd;
        params.bd = bd;
        params.wc = wc;
        params.bc = bc;
        let t = mil_forward(&params, &feats).unwrap();
        let near_tie = t.sd.iter().any(|row| {
            let mut v = row.clone();
            v.sort_by(|a, b| b.total_cmp(a));
            v.len() > 1 && v[0] - v[1] < 1e-4
        });
        let near_clamp = t.yhat.iter().any(|&y| !(1e-6..=1.0 - 1e-6).contains(&y));
        if near_tie || near_clamp {
            continue;
        }
        let labels = (0..c).map(|_| rng.random_bool(0.5)).collect();
        let objectness = (0..r).map(|_| rng.random_range(0.05..0.95)).collect();
        return Instance { params, feats, labels, objectness };
    }
}

fn loss(inst: &Instance, p: &MilParams) -> f64 {
    mil_loss(p, &inst.feats, &inst.labels, &inst.objectness).unwrap().total
}

/// Largest relative error between the analytic gradient and central
/// differences, with relative error |a - n| / max(|a|, |n|, 1e-6).
pub fn max_relative_error(inst: &Instance, h: f64) -> f64 {
    let g = mil_grad(&inst.params, &inst.feats, &inst.labels, &inst.objectness).unwrap();
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, bump: &dyn Fn(&mut MilParams, f64)| {
        let mut plus = inst.params.clone();
        bump(&mut plus, h);
        let mut minus = inst.params.clone();
        bump(&mut minus, -h);
        let numeric = (loss(inst, &plus) - loss(inst, &minus)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    };
    let (c, d) = (inst.params.n_categories(), inst.params.dim());
    for j in 0..c {
        for k in 0..d {
            check(g.wd[j][k], &|p, e| p.wd[j][k] += e);
            check(g.wc[j][k], &|p, e| p.wc[j][k] += e);
        }
        check(g.bd[j], &|p, e| p.bd[j] += e);
        check(g.bc[j], &|p, e| p.bc[j] += e);
    }
    worst
}
