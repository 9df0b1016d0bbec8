//! Detection post-processing oracles: brute-force NMS reference, a fully
//! hand-computed 5-image PR/AP example, and mAP properties.

use proptest::prelude::*;
use spikefpn_core::detection::{
    decode, evaluate_map, iou, nms, AnchorSet, Detection, EvalGt, Rect,
};
use spikefpn_core::rng::Rng;
use spikefpn_core::tensor::Tensor;

fn det(class_id: u32, score: f64, cx: f64, cy: f64, w: f64, h: f64) -> Detection {
    Detection { class_id, score, cx, cy, w, h }
}

/// Independent greedy reference: repeatedly scan for the highest-score
/// unsuppressed detection (earliest index on ties) and suppress same-class
/// overlaps at or above the threshold.
fn nms_reference(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(dets[b]);
        for i in 0..dets.len() {
            if alive[i]
                && dets[i].class_id == dets[b].class_id
                && iou(&dets[i].rect(), &dets[b].rect()) >= thr
            {
                alive[i] = false;
            }
        }
    }
    out
}

#[test]
fn nms_matches_quadratic_reference_on_1000_instances() {
    let mut rng = Rng::new(0x2415);
    for trial in 0..1000 {
        let n = 200;
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                det(
                    rng.below(3) as u32,
                    // Coarse scores make ties common, exercising stability.
                    (rng.below(32) as f64) / 32.0,
                    rng.range_f64(0.0, 100.0),
                    rng.range_f64(0.0, 100.0),
                    rng.range_f64(2.0, 30.0),
                    rng.range_f64(2.0, 30.0),
                )
            })
            .collect();
        let got = nms(&dets, 0.5);
        let want = nms_reference(&dets, 0.5);
        assert_eq!(got, want, "trial {trial}");
    }
}

/// Worked 5-image single-class example.
///
/// Ground truth: 10x10 boxes; two in image 0, one each in images 1-3, none
/// in image 4 (5 ground truths total). Every prediction is a width-10 box
/// nested in its target, so IoU = h/10 exactly.
///
///   rank score img IoU   match@0.5  TP cum  FP cum  precision  recall
///   1    0.95  0   0.8   yes        1       0       1.000      0.2
///   2    0.90  1   0.3   no         1       1       0.500      0.2
///   3    0.85  0   0.6   yes        2       1       0.667      0.4
///   4    0.80  2   0.7   yes        3       1       0.750      0.6
///   5    0.75  4   -     no (no gt) 3       2       0.600      0.6
///   6    0.70  1   0.55  yes        4       2       0.667      0.8
///   7    0.65  3   0.45  no         4       3       0.571      0.8
///   8    0.60  3   0.65  yes        5       3       0.625      1.0
///
/// All-point interpolation: AP = 0.2*(1 + 0.75 + 0.75 + 2/3 + 0.625)
///                             = 91/120 = 0.758333...
/// At IoU 0.75 only rank 1 matches: AP = 0.2.
#[test]
fn map_reproduces_hand_computed_example() {
    let gt_box = |x: f64, y: f64| EvalGt {
        class_id: 0,
        rect: Rect::from_top_left(x, y, 10.0, 10.0),
    };
    let gts = vec![
        vec![gt_box(0.0, 0.0), gt_box(50.0, 50.0)],
        vec![gt_box(0.0, 0.0)],
        vec![gt_box(0.0, 0.0)],
        vec![gt_box(0.0, 0.0)],
        vec![],
    ];
    // Nested prediction with height h inside the GT at (x, y): IoU = h/10.
    let nested = |score: f64, x: f64, y: f64, h: f64| det(0, score, x + 5.0, y + h / 2.0, 10.0, h);
    let preds = vec![
        vec![nested(0.95, 0.0, 0.0, 8.0), nested(0.85, 50.0, 50.0, 6.0)],
        vec![nested(0.90, 0.0, 0.0, 3.0), nested(0.70, 0.0, 0.0, 5.5)],
        vec![nested(0.80, 0.0, 0.0, 7.0)],
        vec![nested(0.65, 0.0, 0.0, 4.5), nested(0.60, 0.0, 0.0, 6.5)],
        vec![det(0, 0.75, 30.0, 30.0, 10.0, 8.0)],
    ];
    let report = evaluate_map(&preds, &gts, &[0.5]).unwrap();
    assert!(
        (report.map50 - 91.0 / 120.0).abs() < 1e-12,
        "AP50 = {} expected {}",
        report.map50,
        91.0 / 120.0
    );
    let report75 = evaluate_map(&preds, &gts, &[0.75]).unwrap();
    assert!((report75.map50 - 0.2).abs() < 1e-12);
}

// Duplicate-match rule: a second prediction on an already-claimed ground
// truth counts as a false positive.
#[test]
fn second_match_on_same_gt_is_false_positive() {
    let gts = vec![vec![EvalGt {
        class_id: 0,
        rect: Rect::from_top_left(0.0, 0.0, 10.0, 10.0),
    }]];
    let preds = vec![vec![
        det(0, 0.9, 5.0, 4.0, 10.0, 8.0),
        det(0, 0.8, 5.0, 4.0, 10.0, 8.0),
    ]];
    let report = evaluate_map(&preds, &gts, &[0.5]).unwrap();
    // Recall hits 1 at rank 1 with precision 1; the duplicate cannot help.
    assert_eq!(report.map50, 1.0);
}

#[test]
fn map_is_permutation_invariant_over_images() {
    let mut rng = Rng::new(77);
    let n_img = 6;
    let mut gts: Vec<Vec<EvalGt>> = Vec::new();
    let mut preds: Vec<Vec<Detection>> = Vec::new();
    for _ in 0..n_img {
        let n_gt = rng.below(3) as usize;
        let mut g = Vec::new();
        let mut p = Vec::new();
        for _ in 0..n_gt {
            let x = rng.range_f64(0.0, 50.0);
            let y = rng.range_f64(0.0, 50.0);
            g.push(EvalGt { class_id: rng.below(2) as u32, rect: Rect::from_top_left(x, y, 10.0, 10.0) });
            if rng.next_f64() < 0.8 {
                let h = rng.range_f64(3.0, 10.0);
                p.push(det(g.last().unwrap().class_id, rng.next_f64(), x + 5.0, y + h / 2.0, 10.0, h));
            }
        }
        if rng.next_f64() < 0.5 {
            p.push(det(rng.below(2) as u32, rng.next_f64(), 80.0, 80.0, 8.0, 8.0));
        }
        gts.push(g);
        preds.push(p);
    }
    let r1 = evaluate_map(&preds, &gts, &[0.5, 0.75]).unwrap();
    fn rot<T: Clone>(v: &[Vec<T>]) -> Vec<Vec<T>> {
        let mut v2 = v[2..].to_vec();
        v2.extend_from_slice(&v[..2]);
        v2
    }
    let r2 = evaluate_map(&rot(&preds), &rot(&gts), &[0.5, 0.75]).unwrap();
    assert!((r1.map50 - r2.map50).abs() < 1e-12);
    assert!((r1.map50_95 - r2.map50_95).abs() < 1e-12);
}

#[test]
fn adding_a_correct_top_detection_never_decreases_ap() {
    let mut rng = Rng::new(99);
    for _ in 0..50 {
        let gts = vec![vec![
            EvalGt { class_id: 0, rect: Rect::from_top_left(0.0, 0.0, 10.0, 10.0) },
            EvalGt { class_id: 0, rect: Rect::from_top_left(40.0, 40.0, 10.0, 10.0) },
        ]];
        let mut preds = vec![Vec::new()];
        for _ in 0..rng.below(4) {
            let h = rng.range_f64(2.0, 10.0);
            preds[0].push(det(0, rng.range_f64(0.0, 0.9), 5.0, h / 2.0, 10.0, h));
        }
        let before = match evaluate_map(&preds, &gts, &[0.5]) {
            Ok(r) => r.map50,
            Err(_) => continue,
        };
        // New highest-score detection matching the unmatched second GT.
        preds[0].push(det(0, 0.95, 45.0, 44.0, 10.0, 8.0));
        let after = evaluate_map(&preds, &gts, &[0.5]).unwrap().map50;
        assert!(after >= before - 1e-12, "AP dropped from {before} to {after}");
    }
}

#[test]
fn decode_matches_per_cell_bruteforce() {
    let mut rng = Rng::new(0xdeca);
    let anchors = AnchorSet::default_synthetic();
    let (k, c, gh, gw) = (3usize, 2usize, 4usize, 4usize);
    let per_anchor = c + 5;
    let n = k * per_anchor * gh * gw;
    let head = Tensor::from_vec(
        &[k * per_anchor, gh, gw],
        (0..n).map(|_| rng.range_f64(-3.0, 3.0)).collect(),
    )
    .unwrap();
    let (image_w, image_h) = (64.0, 64.0);
    let thr = 0.2;
    let got = decode(&head, 0, &anchors, c, image_w, image_h, thr).unwrap();

    // Independent reimplementation, cell by cell.
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let plane = gh * gw;
    let data = head.data();
    let mut want: Vec<Detection> = Vec::new();
    for a in 0..k {
        for y in 0..gh {
            for x in 0..gw {
                let at = |ch: usize| data[(a * per_anchor + ch) * plane + y * gw + x];
                let conf = sigmoid(at(4));
                let e0 = at(5).exp();
                let e1 = at(6).exp();
                let z = e0 + e1;
                let probs = [e0 / z, e1 / z];
                let (aw, ah) = anchors.per_scale[0][a];
                let cx = (sigmoid(at(0)) + x as f64) * (image_w / gw as f64);
                let cy = (sigmoid(at(1)) + y as f64) * (image_h / gh as f64);
                let bw = aw * at(2).exp();
                let bh = ah * at(3).exp();
                for (cls, p) in probs.iter().enumerate() {
                    if conf * p >= thr {
                        // Clamp to the image like the implementation does.
                        let x1 = (cx - bw / 2.0).clamp(0.0, image_w);
                        let x2 = (cx + bw / 2.0).clamp(0.0, image_w);
                        let y1 = (cy - bh / 2.0).clamp(0.0, image_h);
                        let y2 = (cy + bh / 2.0).clamp(0.0, image_h);
                        want.push(det(
                            cls as u32,
                            conf * p,
                            (x1 + x2) / 2.0,
                            (y1 + y2) / 2.0,
                            x2 - x1,
                            y2 - y1,
                        ));
                    }
                }
            }
        }
    }
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.class_id, w.class_id);
        assert!((g.score - w.score).abs() < 1e-12);
        assert!((g.cx - w.cx).abs() < 1e-9);
        assert!((g.w - w.w).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_symmetric_and_bounded(
        ax in 0.0f64..50.0, ay in 0.0f64..50.0, aw in 0.1f64..30.0, ah in 0.1f64..30.0,
        bx in 0.0f64..50.0, by in 0.0f64..50.0, bw in 0.1f64..30.0, bh in 0.1f64..30.0,
    ) {
        let a = Rect::from_top_left(ax, ay, aw, ah);
        let b = Rect::from_top_left(bx, by, bw, bh);
        let v1 = iou(&a, &b);
        let v2 = iou(&b, &a);
        prop_assert!((v1 - v2).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v1));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }
}
