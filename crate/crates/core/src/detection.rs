//! Anchor-based box decoding, non-maximum suppression and mAP scoring.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned rectangle in corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Rect {
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Rect {
        Rect {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn from_top_left(x: f64, y: f64, w: f64, h: f64) -> Rect {
        Rect { x1: x, y1: y, x2: x + w, y2: y + h }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One decoded detection: center-form box, class and combined score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: u32,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Detection {
    pub fn rect(&self) -> Rect {
        Rect::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Prior box sizes per pyramid scale: `per_scale[scale][k] = (w, h)` pixels.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnchorSet {
    pub per_scale: Vec<Vec<(f64, f64)>>,
}

impl AnchorSet {
    /// Default set for synthetic scenes: base sizes scaled per pyramid level.
    pub fn default_synthetic() -> AnchorSet {
        let base = [(8.0, 8.0), (16.0, 12.0), (24.0, 24.0)];
        AnchorSet {
            per_scale: [1.0, 2.0, 4.0]
                .iter()
                .map(|m| base.iter().map(|(w, h)| (w * m, h * m)).collect())
                .collect(),
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.per_scale.first().map_or(0, |s| s.len())
    }

    pub fn validate(&self, scales: usize, k: usize) -> Result<()> {
        if self.per_scale.len() != scales {
            return Err(Error::Config(alloc::format!(
                "anchor set has {} scales, network expects {scales}",
                self.per_scale.len()
            )));
        }
        if self.per_scale.iter().any(|s| s.len() != k) {
            return Err(Error::Config(alloc::format!("every scale needs exactly {k} anchors")));
        }
        Ok(())
    }
}

/// Cluster training box sizes into anchors: k centroids per scale, fit by
/// k-means under the 1 - shape-IoU distance and assigned to scales by area.
pub fn kmeans_anchors(
    sizes: &[(f64, f64)],
    scales: usize,
    k_per_scale: usize,
    seed: u64,
) -> Result<AnchorSet> {
    let k = scales * k_per_scale;
    if sizes.len() < k {
        return Err(Error::Config(alloc::format!(
            "need at least {k} boxes to fit anchors, got {}",
            sizes.len()
        )));
    }
    let shape_iou = |a: (f64, f64), b: (f64, f64)| -> f64 {
        let inter = a.0.min(b.0) * a.1.min(b.1);
        let union = a.0 * a.1 + b.0 * b.1 - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    };
    let mut rng = crate::rng::Rng::new(seed ^ 0xa2c4_0e11);
    let mut centroids: Vec<(f64, f64)> = (0..k)
        .map(|_| sizes[rng.below(sizes.len() as u64) as usize])
        .collect();
    let mut assign = vec![0usize; sizes.len()];
    for _ in 0..50 {
        for (i, s) in sizes.iter().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for (c, cen) in centroids.iter().enumerate() {
                let d = 1.0 - shape_iou(*s, *cen);
                if d < best.1 {
                    best = (c, d);
                }
            }
            assign[i] = best.0;
        }
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (i, s) in sizes.iter().enumerate() {
            let e = &mut sums[assign[i]];
            e.0 += s.0;
            e.1 += s.1;
            e.2 += 1;
        }
        for (c, (sw, sh, n)) in sums.into_iter().enumerate() {
            if n > 0 {
                centroids[c] = (sw / n as f64, sh / n as f64);
            }
        }
    }
    // Sort by area and hand k_per_scale to each pyramid level, finest first.
    centroids.sort_by(|a, b| (a.0 * a.1).partial_cmp(&(b.0 * b.1)).unwrap());
    Ok(AnchorSet {
        per_scale: centroids.chunks(k_per_scale).map(|c| c.to_vec()).collect(),
    })
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Softmax over a small logit slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| libm::exp(l - m)).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Decode one head tensor of shape [K*(C+5), h, w] for a single image.
///
/// Channel layout per anchor is [tx, ty, tw, th, conf, class_0..]. Box
/// transform: center = (sigmoid(t) + cell) * stride, size = anchor * exp(t).
/// A detection is emitted per class whose sigmoid(conf) * softmax(class)
/// clears the score threshold; boxes are clamped to the image.
#[allow(clippy::too_many_arguments)]
pub fn decode(
    head: &Tensor,
    scale_idx: usize,
    anchors: &AnchorSet,
    num_classes: usize,
    image_w: f64,
    image_h: f64,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let dims = head.shape();
    if dims.len() != 3 {
        return Err(Error::Shape(String::from("head tensor must be [K*(C+5), h, w]")));
    }
    let (ch, gh, gw) = (dims[0], dims[1], dims[2]);
    let k = anchors.per_scale[scale_idx].len();
    let per_anchor = num_classes + 5;
    if ch != k * per_anchor {
        return Err(Error::Shape(alloc::format!(
            "head has {ch} channels, expected {k} anchors x {per_anchor}"
        )));
    }
    let stride_x = image_w / gw as f64;
    let stride_y = image_h / gh as f64;
    let data = head.data();
    let plane = gh * gw;
    let at = |c: usize, y: usize, x: usize| data[c * plane + y * gw + x];

    let mut out = Vec::new();
    for a in 0..k {
        let base = a * per_anchor;
        let (aw, ah) = anchors.per_scale[scale_idx][a];
        for y in 0..gh {
            for x in 0..gw {
                let conf = sigmoid(at(base + 4, y, x));
                if conf * 1.0 < score_threshold {
                    continue; // class probability can only shrink the score
                }
                let logits: Vec<f64> =
                    (0..num_classes).map(|c| at(base + 5 + c, y, x)).collect();
                let probs = softmax(&logits);
                let bx = (sigmoid(at(base, y, x)) + x as f64) * stride_x;
                let by = (sigmoid(at(base + 1, y, x)) + y as f64) * stride_y;
                let bw = aw * libm::exp(at(base + 2, y, x));
                let bh = ah * libm::exp(at(base + 3, y, x));
                for (class_id, p) in probs.iter().enumerate() {
                    let score = conf * p;
                    if score >= score_threshold {
                        let mut det = Detection {
                            class_id: class_id as u32,
                            score,
                            cx: bx,
                            cy: by,
                            w: bw,
                            h: bh,
                        };
                        clamp_detection(&mut det, image_w, image_h);
                        out.push(det);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn clamp_detection(det: &mut Detection, image_w: f64, image_h: f64) {
    let r = det.rect();
    let x1 = r.x1.clamp(0.0, image_w);
    let y1 = r.y1.clamp(0.0, image_h);
    let x2 = r.x2.clamp(0.0, image_w);
    let y2 = r.y2.clamp(0.0, image_h);
    det.cx = (x1 + x2) / 2.0;
    det.cy = (y1 + y2) / 2.0;
    det.w = x2 - x1;
    det.h = y2 - y1;
}

/// Greedy per-class NMS. Ties in score keep input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // Stable sort by descending score preserves input order on ties.
    order.sort_by(|a, b| dets[*b].score.partial_cmp(&dets[*a].score).unwrap());
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(dets[i]);
        for &j in &order[rank + 1..] {
            if !suppressed[j]
                && dets[j].class_id == dets[i].class_id
                && iou(&dets[i].rect(), &dets[j].rect()) >= iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Ground truth for evaluation: class and corner-form box.
#[derive(Debug, Clone, Copy)]
pub struct EvalGt {
    pub class_id: u32,
    pub rect: Rect,
}

/// mAP evaluation report.
#[derive(Debug, Clone)]
pub struct MapReport {
    pub map50: f64,
    pub map50_95: f64,
    /// Per-class AP at the first threshold (IoU 0.5), keyed by class id.
    pub per_class_ap50: BTreeMap<u32, f64>,
}

/// The ten COCO-style thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Average precision across images for every class and IoU threshold.
///
/// Per class and threshold: predictions sorted by descending score greedily
/// claim the highest-IoU unmatched ground truth in their image; AP is the
/// area under the interpolated (monotone envelope) precision-recall curve.
/// Classes with no ground truth are skipped. Errors when there is no ground
/// truth at all (recall undefined).
pub fn evaluate_map(
    preds: &[Vec<Detection>],
    gts: &[Vec<EvalGt>],
    iou_thresholds: &[f64],
) -> Result<MapReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(String::from(
            "prediction and ground-truth image counts differ",
        )));
    }
    if iou_thresholds.is_empty() {
        return Err(Error::Config(String::from("need at least one IoU threshold")));
    }
    let total_gt: usize = gts.iter().map(|g| g.len()).sum();
    if total_gt == 0 {
        return Err(Error::Validation(String::from(
            "no ground truth at all: recall is undefined",
        )));
    }
    let mut classes: Vec<u32> = gts
        .iter()
        .flat_map(|g| g.iter().map(|b| b.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class_ap50 = BTreeMap::new();
    let mut map_per_threshold = Vec::with_capacity(iou_thresholds.len());
    for (ti, thr) in iou_thresholds.iter().enumerate() {
        let mut ap_sum = 0.0;
        for &class in &classes {
            let ap = class_ap(preds, gts, class, *thr);
            if ti == 0 {
                per_class_ap50.insert(class, ap);
            }
            ap_sum += ap;
        }
        map_per_threshold.push(ap_sum / classes.len() as f64);
    }
    let map50 = map_per_threshold[0];
    let map50_95 = map_per_threshold.iter().sum::<f64>() / map_per_threshold.len() as f64;
    Ok(MapReport {
        map50,
        map50_95,
        per_class_ap50,
    })
}

fn class_ap(preds: &[Vec<Detection>], gts: &[Vec<EvalGt>], class: u32, thr: f64) -> f64 {
    let n_gt: usize = gts
        .iter()
        .map(|g| g.iter().filter(|b| b.class_id == class).count())
        .sum();
    if n_gt == 0 {
        return 0.0;
    }
    // (score, image, rect) for this class, globally score-sorted; image
    // index breaks ties so the order is independent of input layout.
    let mut flat: Vec<(f64, usize, Rect)> = Vec::new();
    for (img, dets) in preds.iter().enumerate() {
        for d in dets.iter().filter(|d| d.class_id == class) {
            flat.push((d.score, img, d.rect()));
        }
    }
    flat.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(flat.len());
    for (_, img, rect) in &flat {
        // Highest-IoU unmatched ground truth of this class in this image.
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts[*img].iter().enumerate() {
            if gt.class_id != class || matched[*img][gi] {
                continue;
            }
            let v = iou(rect, &gt.rect);
            if v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[*img][gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // All-point interpolation: area under the monotone precision envelope.
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..curve.len() {
        let (r, _) = curve[i];
        if r > prev_recall {
            let max_p = curve[i..].iter().map(|(_, p)| *p).fold(0.0f64, f64::max);
            ap += (r - prev_recall) * max_p;
            prev_recall = r;
        }
    }
    ap
}
