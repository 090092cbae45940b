mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::Rng;
use wsod_core::eval::{pr_curve, ApMethod};
use wsod_core::geometry::nms_indices;
use wsod_core::mining::{mine_source_image, mine_target_image};
use wsod_core::{
    evaluate_map, fuse_scores, iou, mil_forward, nms, voc_ap, BBox, Detection, MilParams, MiningConfig,
};

use common::*;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..90.0f64, 0.0..90.0f64, 0.5..40.0f64, 0.5..40.0f64).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
}

fn arb_params(c: usize, d: usize) -> impl Strategy<Value = MilParams> {
    let mat = proptest::collection::vec(proptest::collection::vec(-3.0..3.0f64, d), c);
    let vecs = proptest::collection::vec(-2.0..2.0f64, c);
    (mat.clone(), vecs.clone(), mat, vecs, 0.5..20.0f64).prop_map(move |(wd, bd, wc, bc, beta)| {
        let mut p = MilParams::zeros((0..c as u32).collect(), d, beta, 0.2);
        p.wd = wd;
        p.bd = bd;
        p.wc = wc;
        p.bc = bc;
        p
    })
}

fn arb_instance() -> impl Strategy<Value = (MilParams, Vec<Vec<f64>>)> {
    (1usize..8, 1usize..5, 1usize..6).prop_flat_map(|(r, c, d)| {
        (
            arb_params(c, d),
            proptest::collection::vec(proptest::collection::vec(-2.0..2.0f64, d), r),
        )
    })
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_matches_reference(a in arb_box(), b in arb_box()) {
        prop_assert!((iou(&a, &b) - ref_iou(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn nms_output_is_pairwise_separated(
        boxes in proptest::collection::vec(arb_box(), 0..50),
        thr in 0.0..1.0f64,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let scores: Vec<f64> = boxes.iter().map(|_| r.random()).collect();
        let keep = nms_indices(&boxes, &scores, thr);
        for (a, &i) in keep.iter().enumerate() {
            for &j in &keep[a + 1..] {
                prop_assert!(iou(&boxes[i], &boxes[j]) <= thr);
                prop_assert!(scores[i] >= scores[j]);
            }
        }
        // every dropped box is covered by a kept, higher-scored box
        for i in (0..boxes.len()).filter(|i| !keep.contains(i)) {
            prop_assert!(keep.iter().any(|&k| scores[k] >= scores[i] && iou(&boxes[k], &boxes[i]) > thr));
        }
    }

    #[test]
    fn per_category_nms_is_union_of_single_category_runs(
        boxes in proptest::collection::vec(arb_box(), 0..30),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let dets: Vec<Detection> = boxes
            .iter()
            .map(|&bbox| Detection { bbox, category: r.random_range(0..3), score: r.random() })
            .collect();
        let all = nms(&dets, 0.4, true);
        for c in 0..3 {
            let only: Vec<Detection> = dets.iter().filter(|d| d.category == c).cloned().collect();
            let expect = nms(&only, 0.4, false);
            let got: Vec<Detection> = all.iter().filter(|d| d.category == c).cloned().collect();
            prop_assert_eq!(got, expect);
        }
    }

    #[test]
    fn forward_normalization((p, feats) in arb_instance()) {
        let t = mil_forward(&p, &feats).unwrap();
        let (r, c) = (feats.len(), p.n_categories());
        for j in 0..c {
            let col: f64 = (0..r).map(|i| t.sigma_d[i][j]).sum();
            prop_assert!((col - 1.0).abs() < 1e-9);
            prop_assert!(t.yhat[j] > 0.0 && t.yhat[j] <= 1.0 + 1e-12);
            if c >= 2 {
                prop_assert!(t.yhat[j] < 1.0);
            }
        }
        for i in 0..r {
            let row: f64 = t.sigma_c[i].iter().sum();
            prop_assert!((row - 1.0).abs() < 1e-9);
            for j in 0..c {
                prop_assert!(t.sd[i][j] > 0.0 && t.sd[i][j] < 1.0);
                prop_assert_eq!(t.s[i][j], t.sigma_d[i][j] * t.sigma_c[i][j]);
            }
        }
    }

    #[test]
    fn beta_keeps_argmax_and_sharpens((p, feats) in arb_instance(), bump in 0.0..10.0f64) {
        let lo = mil_forward(&p, &feats).unwrap();
        let hi = mil_forward(&MilParams { beta: p.beta + bump, ..p.clone() }, &feats).unwrap();
        for j in 0..p.n_categories() {
            let col = |t: &wsod_core::mil::ScoreTensors| -> Vec<f64> { t.sigma_d.iter().map(|r| r[j]).collect() };
            let (a, b) = (col(&lo), col(&hi));
            let arg = |v: &[f64]| v.iter().enumerate().fold(0, |m, (i, x)| if *x > v[m] { i } else { m });
            let sd: Vec<f64> = lo.sd.iter().map(|r| r[j]).collect();
            // argmax of sigma_d follows argmax of sd whatever beta is
            prop_assert_eq!(arg(&a), arg(&sd));
            prop_assert_eq!(arg(&b), arg(&sd));
            let (ma, mb) = (a.iter().cloned().fold(0.0, f64::max), b.iter().cloned().fold(0.0, f64::max));
            prop_assert!(mb >= ma - 1e-12);
        }
    }

    #[test]
    fn eta_zero_fusion_follows_objectness(
        s in proptest::collection::vec(proptest::collection::vec(0.0..1.0f64, 3), 1..10),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let obj: Vec<f64> = s.iter().map(|_| r.random()).collect();
        let fused = fuse_scores(&s, &obj, 0.0).unwrap();
        for row in 0..s.len() {
            for j in 0..3 {
                prop_assert_eq!(fused[row][j], obj[row]);
            }
        }
        let same = fuse_scores(&s, &obj, 1.0).unwrap();
        prop_assert_eq!(same, s);
    }

    #[test]
    fn source_mining_is_tau_monotone(seed in any::<u64>()) {
        let mut r = rng(seed);
        let originals: Vec<BBox> = (0..r.random_range(0..4)).map(|_| random_box(&mut r, 100.0)).collect();
        let dets: Vec<Detection> = (0..r.random_range(0..20))
            .map(|_| Detection { bbox: random_box(&mut r, 100.0), category: r.random_range(0..4), score: r.random() })
            .collect();
        let hi = mine_source_image(&dets, &originals, &MiningConfig { tau: 0.9, o: 0.1 });
        let lo = mine_source_image(&dets, &originals, &MiningConfig { tau: 0.6, o: 0.1 });
        for a in &hi {
            prop_assert!(lo.contains(a));
        }
    }

    #[test]
    fn target_mining_keeps_one_per_present_label(seed in any::<u64>()) {
        let mut r = rng(seed);
        let dets: Vec<Detection> = (0..r.random_range(0..20))
            .map(|_| Detection { bbox: random_box(&mut r, 100.0), category: r.random_range(0..4), score: r.random() })
            .collect();
        let labels: BTreeSet<u32> = (0..4).filter(|_| r.random_bool(0.5)).collect();
        let mined = mine_target_image(&dets, &labels, &MiningConfig::default());
        for &y in &labels {
            if dets.iter().any(|d| d.category == y) {
                prop_assert!(mined.iter().any(|a| a.category == y));
            }
        }
        prop_assert!(mined.iter().all(|a| labels.contains(&a.category)));
    }

    #[test]
    fn map_is_invariant_to_detection_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cats = [0, 1, 2];
        let (mut dets, truth) = random_eval_fixture(&mut r, 10, &cats);
        let before = evaluate_map(&dets, &truth, &cats, 0.5, ApMethod::ElevenPoint);
        for v in dets.values_mut() {
            v.reverse();
        }
        let after = evaluate_map(&dets, &truth, &cats, 0.5, ApMethod::ElevenPoint);
        prop_assert_eq!(before, after);
    }

    #[test]
    fn ap_bounded_and_all_points_not_below_zero(tp in proptest::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
        let n_gt = tp.iter().filter(|t| **t).count() + extra;
        if n_gt > 0 {
            let (rec, prec) = pr_curve(&tp, n_gt);
            for m in [ApMethod::ElevenPoint, ApMethod::AllPoints] {
                let ap = voc_ap(&rec, &prec, m);
                prop_assert!((0.0..=1.0).contains(&ap));
            }
        }
    }

    #[test]
    fn appending_a_true_positive_does_not_lower_ap(tp in proptest::collection::vec(any::<bool>(), 0..30), extra in 1usize..5) {
        let n_gt = tp.iter().filter(|t| **t).count() + extra;
        let (rec, prec) = pr_curve(&tp, n_gt);
        let mut more = tp.clone();
        more.insert(0, true);
        let (rec2, prec2) = pr_curve(&more, n_gt);
        for m in [ApMethod::ElevenPoint, ApMethod::AllPoints] {
            prop_assert!(voc_ap(&rec2, &prec2, m) >= voc_ap(&rec, &prec, m) - 1e-12);
        }
    }
}

#[test]
fn map_of_empty_detections_is_zero() {
    let truth = BTreeMap::from([("a".to_string(), vec![wsod_core::Annotation::original(bx(0.0, 0.0, 5.0, 5.0), 0)])]);
    let r = evaluate_map(&BTreeMap::new(), &truth, &[0], 0.5, ApMethod::ElevenPoint);
    assert_eq!(r.map, 0.0);
}
