//! Seeded fixtures for the criterion benches.

use std::collections::BTreeMap;

use rand::Rng;
use wsod_core::{rng, Annotation, BBox, Detection, MilParams};

fn random_box(r: &mut impl Rng) -> BBox {
    let (w, h) = (r.random_range(5.0..40.0), r.random_range(5.0..40.0));
    let (x, y) = (r.random_range(0.0..100.0 - w), r.random_range(0.0..100.0 - h));
    BBox::new(x, y, x + w, y + h).expect("positive extent")
}

pub fn detections(n: usize, categories: u32, seed: u64) -> Vec<Detection> {
    let mut r = rng::stream(seed, "bench-dets", 0);
    (0..n)
        .map(|_| Detection {
            bbox: random_box(&mut r),
            category: r.random_range(0..categories),
            score: r.random(),
        })
        .collect()
}

pub fn mil_instance(r_props: usize, c: usize, d: usize, seed: u64) -> (MilParams, Vec<Vec<f64>>, Vec<bool>, Vec<f64>) {
    let mut r = rng::stream(seed, "bench-mil", 0);
    let mut p = MilParams::zeros((0..c as u32).collect(), d, 5.0, 0.2);
    for row in p.wd.iter_mut().chain(p.wc.iter_mut()) {
        row.iter_mut().for_each(|w| *w = r.random_range(-1.0..1.0));
    }
    let feats = (0..r_props).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let labels = (0..c).map(|_| r.random_bool(0.5)).collect();
    let obj = (0..r_props).map(|_| r.random()).collect();
    (p, feats, labels, obj)
}

pub type EvalFixture = (BTreeMap<String, Vec<Detection>>, BTreeMap<String, Vec<Annotation>>);

pub fn eval_fixture(images: usize, categories: u32, seed: u64) -> EvalFixture {
    let mut r = rng::stream(seed, "bench-eval", 0);
    let mut dets = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for i in 0..images {
        let gts: Vec<Annotation> = (0..3)
            .map(|_| Annotation::original(random_box(&mut r), r.random_range(0..categories)))
            .collect();
        let mut ds: Vec<Detection> = gts
            .iter()
            .map(|g| Detection {
                bbox: g.bbox,
                category: g.category,
                score: r.random(),
            })
            .collect();
        ds.extend(detections(20, categories, seed ^ i as u64));
        dets.insert(format!("im{i:04}"), ds);
        truth.insert(format!("im{i:04}"), gts);
    }
    (dets, truth)
}
