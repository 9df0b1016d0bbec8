//! Loss construction, AdamW optimization with first-epoch warm-up, and the
//! training loop over stacked event sequences.
//!
//! The loss follows the YOLO-family composition: IoU loss on positive
//! anchors, binary cross-entropy (logits form) on objectness over every
//! anchor, and softmax cross-entropy on the class logits of positives. Each
//! ground-truth box is assigned to the best shape-matching anchor across
//! scales and to the grid cell containing its center. Loss gradients with
//! respect to the head maps are computed in closed form here and seeded
//! into the tape, which handles the rest of the network.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Mode, Tape};
use crate::detection::{
    coco_thresholds, decode, evaluate_map, iou, nms, sigmoid, softmax, AnchorSet, Detection,
    EvalGt, MapReport, Rect,
};
use crate::encoding::FrameStack;
use crate::error::{Error, Result};
use crate::event::GtBox;
use crate::network::{stack_step_tensors, NetworkGraph, Param};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Relative weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossWeights {
    pub box_w: f64,
    pub conf_w: f64,
    pub cls_w: f64,
    /// Weight of the background half of the objectness term relative to
    /// the positive half. Objectness is normalized per population (mean
    /// over positives plus `noobj_w` times the mean over negatives), which
    /// keeps object recall and background suppression in balance no matter
    /// how heavily background anchors outnumber objects.
    pub noobj_w: f64,
    /// Hard-negative emphasis: each background anchor's BCE is scaled by
    /// 1 + hard_neg_k * sigmoid(conf), concentrating background pressure on
    /// confident false positives. Smooth, so gradients stay well-defined.
    pub hard_neg_k: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { box_w: 1.0, conf_w: 2.0, cls_w: 1.0, noobj_w: 3.0, hard_neg_k: 15.0 }
    }
}

/// Optimization and loop parameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossWeights,
    /// Validation fraction of the dataset (held out from the tail).
    pub val_fraction: f64,
    /// Prediction score threshold used for validation decoding.
    pub score_threshold: f64,
    /// IoU threshold for validation NMS.
    pub nms_iou: f64,
    /// Replace hard spikes with the surrogate in forward passes. Exists for
    /// pipeline validation only; spiking results use hard mode.
    pub soft_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 8,
            seed: 1,
            loss: LossWeights::default(),
            val_fraction: 0.1,
            score_threshold: 0.3,
            nms_iou: 0.5,
            soft_mode: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(String::from("learning rate must be positive")));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(String::from("epochs and batch size must be >= 1")));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(String::from("val_fraction must be in [0, 1)")));
        }
        Ok(())
    }
}

/// Warm-up schedule: epoch 0 ramps linearly from a 5% floor to the
/// prescribed rate; constant afterwards (no decay).
pub fn lr_at(step: usize, steps_per_epoch: usize, lr: f64) -> f64 {
    if steps_per_epoch == 0 || step >= steps_per_epoch {
        lr
    } else {
        lr * (step as f64 / steps_per_epoch as f64).max(0.05)
    }
}

/// AdamW first/second moment state.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Param]) -> OptimizerState {
        OptimizerState {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One decoupled-weight-decay update; box-constrained parameters are
/// projected back after the step.
pub fn adamw_step(
    params: &mut [Param],
    grads: &[Option<Tensor>],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(String::from("gradient list must match parameter list")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
    let bc2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
    for (i, p) in params.iter_mut().enumerate() {
        if p.frozen {
            continue;
        }
        let zeros;
        let g = match &grads[i] {
            Some(g) => {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                }
                g
            }
            None => {
                zeros = Tensor::zeros(p.value.shape());
                &zeros
            }
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pd = p.value.data_mut();
        for j in 0..pd.len() {
            let gj = g.data()[j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            pd[j] -= lr * (m_hat / (libm::sqrt(v_hat) + ADAM_EPS) + weight_decay * pd[j]);
        }
        if let Some((lo, hi)) = p.clamp {
            for x in p.value.data_mut() {
                *x = x.clamp(lo, hi);
            }
        }
    }
    Ok(())
}

/// One ground truth mapped to (scale, anchor, cell).
#[derive(Debug, Clone, Copy)]
pub struct ScaleTarget {
    pub anchor: usize,
    pub cj: usize,
    pub ci: usize,
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Targets of one image, split per pyramid scale.
#[derive(Debug, Clone, Default)]
pub struct SampleTargets {
    pub per_scale: [Vec<ScaleTarget>; 3],
}

/// Shape-only IoU of two (w, h) boxes sharing a center.
fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    let union = w1 * h1 + w2 * h2 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Assign each box to its best shape-matching anchor across scales and the
/// grid cell holding its center; colliding assignments keep the first box.
pub fn assign_targets(
    boxes: &[GtBox],
    anchors: &AnchorSet,
    grids: &[(usize, usize); 3],
    image_wh: (f64, f64),
) -> SampleTargets {
    let mut out = SampleTargets::default();
    let mut taken: [Vec<(usize, usize, usize)>; 3] = Default::default();
    for b in boxes {
        let cx = b.x + b.w / 2.0;
        let cy = b.y + b.h / 2.0;
        let mut best = (0usize, 0usize, -1.0f64);
        for (d, scale_anchors) in anchors.per_scale.iter().enumerate() {
            for (a, (aw, ah)) in scale_anchors.iter().enumerate() {
                let s = shape_iou(b.w, b.h, *aw, *ah);
                if s > best.2 {
                    best = (d, a, s);
                }
            }
        }
        let (d, a, _) = best;
        let (gh, gw) = grids[d];
        let ci = ((cx / image_wh.0 * gw as f64) as usize).min(gw - 1);
        let cj = ((cy / image_wh.1 * gh as f64) as usize).min(gh - 1);
        if taken[d].contains(&(a, cj, ci)) {
            continue;
        }
        taken[d].push((a, cj, ci));
        out.per_scale[d].push(ScaleTarget {
            anchor: a,
            cj,
            ci,
            class_id: b.class_id,
            cx,
            cy,
            w: b.w,
            h: b.h,
        });
    }
    out
}

/// Loss value, per-term breakdown, and closed-form head gradients.
pub struct LossOutput {
    pub total: f64,
    pub box_term: f64,
    pub conf_term: f64,
    pub cls_term: f64,
    pub n_pos: usize,
    pub head_grads: [Tensor; 3],
}

/// Composite detection loss over a batch of final-step heads.
///
/// heads[d] has shape [N, K*(C+5), h_d, w_d]; `targets` is per sample.
pub fn detection_loss(
    heads: [&Tensor; 3],
    targets: &[SampleTargets],
    anchors: &AnchorSet,
    num_classes: usize,
    image_wh: (f64, f64),
    weights: &LossWeights,
) -> Result<LossOutput> {
    let per_anchor = num_classes + 5;
    let n_batch = heads[0].dims4()?.0;
    if targets.len() != n_batch {
        return Err(Error::Shape(String::from("targets must match the batch size")));
    }
    let mut grads = [
        Tensor::zeros(heads[0].shape()),
        Tensor::zeros(heads[1].shape()),
        Tensor::zeros(heads[2].shape()),
    ];
    let n_pos_total: usize = targets
        .iter()
        .map(|t| t.per_scale.iter().map(|s| s.len()).sum::<usize>())
        .sum();
    let pos_norm = n_pos_total.max(1) as f64;
    let mut n_conf_total = 0usize;
    for head in heads.iter() {
        let (n, ch, h, w) = head.dims4()?;
        n_conf_total += n * (ch / per_anchor) * h * w;
    }
    // Objectness is balanced between the positive and negative populations:
    // each side contributes half the conf term regardless of how heavily
    // background anchors outnumber objects.
    let neg_norm = 2.0 * (n_conf_total - n_pos_total).max(1) as f64 / weights.noobj_w;
    let obj_norm = 2.0 * pos_norm;

    let (mut box_term, mut conf_term, mut cls_term) = (0.0, 0.0, 0.0);
    for d in 0..3 {
        let (_, ch, gh, gw) = heads[d].dims4()?;
        let k = ch / per_anchor;
        let plane = gh * gw;
        let stride_x = image_wh.0 / gw as f64;
        let stride_y = image_wh.1 / gh as f64;
        let data = heads[d].data();
        let gdata = grads[d].data_mut();
        for n in 0..n_batch {
            let base_n = n * ch * plane;
            // Mark positive slots for the objectness targets.
            let mut pos_slot = vec![false; k * plane];
            for t in &targets[n].per_scale[d] {
                pos_slot[t.anchor * plane + t.cj * gw + t.ci] = true;
            }
            for a in 0..k {
                let conf_c = a * per_anchor + 4;
                for idx in 0..plane {
                    let z = data[base_n + conf_c * plane + idx];
                    let positive = pos_slot[a * plane + idx];
                    let s = sigmoid(z);
                    // Numerically stable BCE-with-logits.
                    let bce_o = |o: f64| z.max(0.0) - z * o + libm::log(1.0 + libm::exp(-z.abs()));
                    if positive {
                        conf_term += bce_o(1.0) / obj_norm;
                        gdata[base_n + conf_c * plane + idx] +=
                            weights.conf_w * (s - 1.0) / obj_norm;
                    } else {
                        let wgt = 1.0 + weights.hard_neg_k * s;
                        let bce = bce_o(0.0);
                        conf_term += wgt * bce / neg_norm;
                        // d/dz of wgt(z) * bce(z): product rule.
                        let dz = weights.hard_neg_k * s * (1.0 - s) * bce + wgt * s;
                        gdata[base_n + conf_c * plane + idx] += weights.conf_w * dz / neg_norm;
                    }
                }
            }
            for t in &targets[n].per_scale[d] {
                let cell = t.cj * gw + t.ci;
                let at = |c: usize| data[base_n + (t.anchor * per_anchor + c) * plane + cell];
                let (aw, ah) = anchors.per_scale[d][t.anchor];
                let (tx, ty, tw, th) = (at(0), at(1), at(2), at(3));
                let sx = sigmoid(tx);
                let sy = sigmoid(ty);
                let bw = aw * libm::exp(tw);
                let bh = ah * libm::exp(th);
                let bx = (sx + t.ci as f64) * stride_x;
                let by = (sy + t.cj as f64) * stride_y;
                let gt = Rect::from_center(t.cx, t.cy, t.w, t.h);
                let pred = Rect::from_center(bx, by, bw, bh);
                let v = iou(&pred, &gt);
                box_term += (1.0 - v) / pos_norm;
                // d(1-IoU)/d(tx,ty,tw,th), piecewise-smooth closed form.
                let g = iou_box_grad(&pred, &gt);
                let scale = -weights.box_w / pos_norm;
                let d_tx = scale * (g.dbx * sx * (1.0 - sx) * stride_x);
                let d_ty = scale * (g.dby * sy * (1.0 - sy) * stride_y);
                let d_tw = scale * (g.dbw * bw);
                let d_th = scale * (g.dbh * bh);
                let gslot =
                    |gdata: &mut [f64], c: usize, v: f64| {
                        gdata[base_n + (t.anchor * per_anchor + c) * plane + cell] += v;
                    };
                gslot(gdata, 0, d_tx);
                gslot(gdata, 1, d_ty);
                gslot(gdata, 2, d_tw);
                gslot(gdata, 3, d_th);
                // Class cross-entropy over softmax.
                let logits: Vec<f64> = (0..num_classes).map(|c| at(5 + c)).collect();
                let probs = softmax(&logits);
                let p_gt = probs[t.class_id as usize].max(1e-12);
                cls_term += -libm::log(p_gt) / pos_norm;
                for (c, p) in probs.iter().enumerate() {
                    let ind = if c == t.class_id as usize { 1.0 } else { 0.0 };
                    gslot(gdata, 5 + c, weights.cls_w * (p - ind) / pos_norm);
                }
            }
        }
    }
    let total = weights.box_w * box_term + weights.conf_w * conf_term + weights.cls_w * cls_term;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss (box {box_term}, conf {conf_term}, cls {cls_term})"
        )));
    }
    Ok(LossOutput {
        total,
        box_term,
        conf_term,
        cls_term,
        n_pos: n_pos_total,
        head_grads: grads,
    })
}

struct IouGrad {
    dbx: f64,
    dby: f64,
    dbw: f64,
    dbh: f64,
}

/// Gradient of IoU(pred, gt) w.r.t. the pred center/size. Zero for disjoint
/// boxes (the intersection contributes no subgradient there).
fn iou_box_grad(pred: &Rect, gt: &Rect) -> IouGrad {
    let ix = (pred.x2.min(gt.x2) - pred.x1.max(gt.x1)).max(0.0);
    let iy = (pred.y2.min(gt.y2) - pred.y1.max(gt.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return IouGrad { dbx: 0.0, dby: 0.0, dbw: 0.0, dbh: 0.0 };
    }
    let area_p = pred.area();
    let area_g = gt.area();
    let union = area_p + area_g - inter;
    let d_i = (union + inter) / (union * union); // dIoU/dI at fixed areas
    let d_ap = -inter / (union * union); // dIoU/dArea_pred
    // Indicator subgradients of the intersection edges.
    let di_dx1 = if pred.x1 > gt.x1 { -iy } else { 0.0 };
    let di_dx2 = if pred.x2 < gt.x2 { iy } else { 0.0 };
    let di_dy1 = if pred.y1 > gt.y1 { -ix } else { 0.0 };
    let di_dy2 = if pred.y2 < gt.y2 { ix } else { 0.0 };
    let w = pred.x2 - pred.x1;
    let h = pred.y2 - pred.y1;
    IouGrad {
        dbx: d_i * (di_dx1 + di_dx2),
        dby: d_i * (di_dy1 + di_dy2),
        dbw: d_i * 0.5 * (di_dx2 - di_dx1) + d_ap * h,
        dbh: d_i * 0.5 * (di_dy2 - di_dy1) + d_ap * w,
    }
}

/// One training/eval sample: an encoded stack and its boxes.
#[derive(Debug, Clone)]
pub struct Sample {
    pub stack: FrameStack,
    pub boxes: Vec<GtBox>,
}

/// Encode one sample per label timestamp with enough history, grouping all
/// boxes that share a timestamp.
pub fn build_samples(
    stream: &crate::event::EventStream,
    labels: &[GtBox],
    encoder: &crate::encoding::EncoderConfig,
    limit: Option<usize>,
) -> Result<Vec<Sample>> {
    use crate::encoding::{encode_sbe, encode_sbt, EncodeMode};
    let mut by_t: alloc::collections::BTreeMap<u64, Vec<GtBox>> = alloc::collections::BTreeMap::new();
    for b in labels {
        by_t.entry(b.t).or_default().push(*b);
    }
    let mut samples = Vec::new();
    for (t, boxes) in by_t {
        let encoded = match encoder.mode {
            EncodeMode::Sbt => encode_sbt(stream, t, encoder),
            EncodeMode::Sbe => encode_sbe(stream, t, encoder),
        };
        match encoded {
            Ok(stack) => samples.push(Sample { stack, boxes }),
            // Early labels without enough history are skipped, matching how
            // real recordings warm up.
            Err(Error::InsufficientHistory { .. }) | Err(Error::InsufficientEvents { .. }) => {}
            Err(e) => return Err(e),
        }
        if limit.is_some_and(|l| samples.len() >= l) {
            break;
        }
    }
    Ok(samples)
}

/// In-memory dataset with a deterministic train/validation split.
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl Dataset {
    /// Split the tail fraction off for validation.
    pub fn split(samples: Vec<Sample>, val_fraction: f64) -> Dataset {
        let n = samples.len();
        let n_val = ((n as f64) * val_fraction) as usize;
        let n_train = n - n_val;
        Dataset {
            samples,
            train_idx: (0..n_train).collect(),
            val_idx: (n_train..n).collect(),
        }
    }
}

/// One metrics-log record per epoch.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub lr: f64,
    pub firing_rate_mean: f64,
}

/// Training result: per-epoch records, final and best graphs.
pub struct TrainOutput {
    pub records: Vec<EpochRecord>,
    pub graph: NetworkGraph,
    pub best: NetworkGraph,
    pub best_map50: f64,
    pub optimizer: OptimizerState,
    /// Set when the loss diverged; the best checkpoint is still valid.
    pub diverged: Option<(usize, f64)>,
}

/// Train a graph on an in-memory dataset. Deterministic in the seed.
pub fn train(
    graph: NetworkGraph,
    dataset: &Dataset,
    anchors: &AnchorSet,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    let opt = OptimizerState::new(graph.params());
    train_resumable(graph, dataset, anchors, config, 0, opt)
}

/// Training entry point that can continue from a saved epoch and optimizer
/// state. Epoch shuffles are derived statelessly from (seed, epoch), so a
/// resumed run walks the same batch sequence as an uninterrupted one.
pub fn train_resumable(
    mut graph: NetworkGraph,
    dataset: &Dataset,
    anchors: &AnchorSet,
    config: &TrainConfig,
    start_epoch: usize,
    mut opt: OptimizerState,
) -> Result<TrainOutput> {
    config.validate()?;
    anchors.validate(3, graph.spec.num_anchors)?;
    if dataset.train_idx.is_empty() {
        return Err(Error::Config(String::from("empty training split")));
    }
    let grids = head_grids(&graph);
    let image_wh = (graph.spec.input_hw.1 as f64, graph.spec.input_hw.0 as f64);
    let num_classes = graph.spec.num_classes;
    let steps_per_epoch = dataset.train_idx.len().div_ceil(config.batch_size);

    let mut records = Vec::new();
    let mut best: Option<(f64, NetworkGraph)> = None;
    let mut global_step = start_epoch * steps_per_epoch;
    let mut diverged = None;

    'epochs: for epoch in start_epoch..config.epochs {
        let mut order = dataset.train_idx.clone();
        let mut rng = Rng::new(config.seed ^ 0x7ea1_7a1e ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut lr_now = config.lr;
        let mut rate_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            lr_now = lr_at(global_step, steps_per_epoch, config.lr);
            let stacks: Vec<FrameStack> = chunk
                .iter()
                .map(|i| dataset.samples[*i].stack.clone())
                .collect();
            let steps = stack_step_tensors(&stacks, &graph.spec)?;
            let mut tape = Tape::new();
            tape.soft_spikes = config.soft_mode;
            let out = graph.forward_batch(&mut tape, &steps, Mode::Train)?;
            let targets: Vec<SampleTargets> = chunk
                .iter()
                .map(|i| {
                    assign_targets(&dataset.samples[*i].boxes, anchors, &grids, image_wh)
                })
                .collect();
            let heads = [
                tape.value(out.heads[0]),
                tape.value(out.heads[1]),
                tape.value(out.heads[2]),
            ];
            let loss = detection_loss(heads, &targets, anchors, num_classes, image_wh, &config.loss)?;
            if !loss.total.is_finite() || loss.total > 1e4 {
                diverged = Some((epoch, loss.total));
                break 'epochs;
            }
            loss_sum += loss.total;
            loss_count += 1;
            rate_sum += out.record.network_mean_rate();
            let [g1, g2, g3] = loss.head_grads;
            let grads = tape.backward(&[
                (out.heads[0], g1),
                (out.heads[1], g2),
                (out.heads[2], g3),
            ])?;
            let mut param_grads: Vec<Option<Tensor>> = Vec::with_capacity(out.param_vals.len());
            let mut grads = grads;
            for v in &out.param_vals {
                param_grads.push(grads.take(*v));
            }
            adamw_step(
                graph.params_mut(),
                &param_grads,
                &mut opt,
                lr_now,
                config.weight_decay,
            )?;
            global_step += 1;
        }
        let train_loss = loss_sum / loss_count.max(1) as f64;

        // Held-out validation with the current running statistics.
        let (map50, map50_95) = if dataset.val_idx.is_empty() {
            (0.0, 0.0)
        } else {
            let report = evaluate_dataset_mode(
                &mut graph,
                &dataset.samples,
                &dataset.val_idx,
                anchors,
                config.score_threshold,
                config.nms_iou,
                config.batch_size,
                config.soft_mode,
            )?;
            (report.0.map50, report.0.map50_95)
        };
        records.push(EpochRecord {
            epoch,
            train_loss,
            map50,
            map50_95,
            lr: lr_now,
            firing_rate_mean: rate_sum / loss_count.max(1) as f64,
        });
        if best.as_ref().is_none_or(|(b, _)| map50 > *b) {
            best = Some((map50, graph.snapshot()));
        }
    }
    let (best_map50, best_graph) = match best {
        Some((m, g)) => (m, g),
        None => (0.0, graph.snapshot()),
    };
    Ok(TrainOutput {
        records,
        graph,
        best: best_graph,
        best_map50,
        optimizer: opt,
        diverged,
    })
}

/// Grid sizes (h, w) of the three heads.
pub fn head_grids(graph: &NetworkGraph) -> [(usize, usize); 3] {
    let table = graph.layer_shape_table();
    let mut grids = [(0, 0); 3];
    for (name, shape) in table {
        match name.as_str() {
            "d1" => grids[0] = (shape[1], shape[2]),
            "d2" => grids[1] = (shape[1], shape[2]),
            "d3" => grids[2] = (shape[1], shape[2]),
            _ => {}
        }
    }
    grids
}

/// Run eval-mode inference over the listed samples and score mAP.
///
/// Returns the report plus the mean network firing rate over the pass.
pub fn evaluate_dataset(
    graph: &mut NetworkGraph,
    samples: &[Sample],
    indices: &[usize],
    anchors: &AnchorSet,
    score_threshold: f64,
    nms_iou: f64,
    batch_size: usize,
) -> Result<(MapReport, f64)> {
    evaluate_dataset_mode(
        graph,
        samples,
        indices,
        anchors,
        score_threshold,
        nms_iou,
        batch_size,
        false,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_dataset_mode(
    graph: &mut NetworkGraph,
    samples: &[Sample],
    indices: &[usize],
    anchors: &AnchorSet,
    score_threshold: f64,
    nms_iou: f64,
    batch_size: usize,
    soft_mode: bool,
) -> Result<(MapReport, f64)> {
    let (dets, gts, rate) = infer_dataset_mode(
        graph,
        samples,
        indices,
        anchors,
        score_threshold,
        nms_iou,
        batch_size,
        soft_mode,
    )?;
    let report = evaluate_map(&dets, &gts, &coco_thresholds())?;
    Ok((report, rate))
}

/// Decode + NMS over the listed samples; also returns per-image ground
/// truth and the mean firing rate.
#[allow(clippy::type_complexity)]
pub fn infer_dataset(
    graph: &mut NetworkGraph,
    samples: &[Sample],
    indices: &[usize],
    anchors: &AnchorSet,
    score_threshold: f64,
    nms_iou: f64,
    batch_size: usize,
) -> Result<(Vec<Vec<Detection>>, Vec<Vec<EvalGt>>, f64)> {
    infer_dataset_mode(
        graph,
        samples,
        indices,
        anchors,
        score_threshold,
        nms_iou,
        batch_size,
        false,
    )
}

#[allow(clippy::type_complexity, clippy::too_many_arguments)]
pub fn infer_dataset_mode(
    graph: &mut NetworkGraph,
    samples: &[Sample],
    indices: &[usize],
    anchors: &AnchorSet,
    score_threshold: f64,
    nms_iou: f64,
    batch_size: usize,
    soft_mode: bool,
) -> Result<(Vec<Vec<Detection>>, Vec<Vec<EvalGt>>, f64)> {
    let image_w = graph.spec.input_hw.1 as f64;
    let image_h = graph.spec.input_hw.0 as f64;
    let num_classes = graph.spec.num_classes;
    let mut all_dets = Vec::with_capacity(indices.len());
    let mut all_gts = Vec::with_capacity(indices.len());
    let mut rate_sum = 0.0;
    let mut rate_count = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let stacks: Vec<FrameStack> = chunk
            .iter()
            .map(|i| samples[*i].stack.clone())
            .collect();
        let steps = stack_step_tensors(&stacks, &graph.spec)?;
        let mut tape = Tape::new();
        tape.soft_spikes = soft_mode;
        let out = graph.forward_batch(&mut tape, &steps, Mode::Eval)?;
        rate_sum += out.record.network_mean_rate();
        rate_count += 1;
        for (bi, sample_idx) in chunk.iter().enumerate() {
            let mut dets = Vec::new();
            for d in 0..3 {
                let head = tape.value(out.heads[d]).slice_outer(bi)?;
                dets.extend(decode(
                    &head,
                    d,
                    anchors,
                    num_classes,
                    image_w,
                    image_h,
                    score_threshold,
                )?);
            }
            all_dets.push(nms(&dets, nms_iou));
            all_gts.push(
                samples[*sample_idx]
                    .boxes
                    .iter()
                    .map(|b| EvalGt {
                        class_id: b.class_id,
                        rect: Rect::from_top_left(b.x, b.y, b.w, b.h),
                    })
                    .collect(),
            );
        }
    }
    let rate = rate_sum / rate_count.max(1) as f64;
    Ok((all_dets, all_gts, rate))
}
