//! Command implementations behind the CLI surface.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use spikefpn_core::cost::{energy_estimate_parts, record_firing};
use spikefpn_core::detection::AnchorSet;
use spikefpn_core::network::{build_network, NetworkGraph, NetworkSpec, NeuronKind};
use spikefpn_core::synth::synthesize_scene;
use spikefpn_core::training::{
    evaluate_dataset, infer_dataset, train_resumable, Dataset, EpochRecord, OptimizerState,
    TrainOutput,
};

use crate::checkpoint::{read_checkpoint, restore_graph, write_checkpoint, TrainState};
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{CliError, Result};
use crate::event_io;
use crate::stacks;

/// Create (or validate) an output directory; refuses to reuse a non-empty
/// one unless forced.
pub fn ensure_out_dir(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        let non_empty = fs::read_dir(path)
            .map_err(CliError::io(path))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CliError::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                path.display()
            )));
        }
    } else {
        fs::create_dir_all(path).map_err(CliError::io(path))?;
    }
    Ok(())
}

/// Generate a synthetic scene and write the event/label files.
pub fn cmd_synthesize(cfg: &RunConfig, out: &Path, force: bool, binary: bool) -> Result<()> {
    ensure_out_dir(out, force)?;
    let (stream, labels) = synthesize_scene(cfg.seed, &cfg.scene)?;
    if binary {
        event_io::save_events_evt1(&stream, &out.join("events.evt1"))?;
    } else {
        event_io::save_events_csv(&stream, &out.join("events.csv"))?;
    }
    event_io::save_labels(&labels, &out.join("labels.csv"))?;
    let label_times: std::collections::BTreeSet<u64> = labels.iter().map(|b| b.t).collect();
    println!(
        "synthesized {} events, {} boxes over {} label timestamps ({}x{}, {:.1} s)",
        stream.len(),
        labels.len(),
        label_times.len(),
        cfg.scene.width,
        cfg.scene.height,
        cfg.scene.duration_us as f64 / 1e6
    );
    Ok(())
}

/// Encode stacks at label timestamps (or a fixed stride) into STK1 files.
pub fn cmd_encode(
    cfg: &RunConfig,
    events: &Path,
    labels: Option<&Path>,
    stride_us: Option<u64>,
    out: &Path,
    force: bool,
) -> Result<()> {
    ensure_out_dir(out, force)?;
    let geometry = cfg.scene.geometry();
    let stream = event_io::load_events(events, geometry)?;
    let window = cfg.encoder.delta_t_us * cfg.encoder.stacks as u64;
    let mut times: Vec<u64> = match (labels, stride_us) {
        (Some(lp), _) => {
            let (boxes, warnings) = event_io::load_labels(lp, geometry)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            let set: std::collections::BTreeSet<u64> = boxes.iter().map(|b| b.t).collect();
            set.into_iter().collect()
        }
        (None, Some(stride)) => {
            let end = stream.events().last().map(|e| e.t + 1).unwrap_or(0);
            (0..)
                .map(|i| window + i * stride)
                .take_while(|t| *t <= end)
                .collect()
        }
        (None, None) => {
            return Err(CliError::Config(String::from(
                "encode needs --labels or --stride-us to pick timestamps",
            )))
        }
    };
    times.retain(|t| *t >= window);
    let mut index = String::from("t_us,file,sparsity\n");
    let mut written = 0usize;
    for t in &times {
        let stack = match cfg.encoder.mode {
            spikefpn_core::encoding::EncodeMode::Sbt => {
                spikefpn_core::encoding::encode_sbt(&stream, *t, &cfg.encoder)
            }
            spikefpn_core::encoding::EncodeMode::Sbe => {
                spikefpn_core::encoding::encode_sbe(&stream, *t, &cfg.encoder)
            }
        };
        let stack = match stack {
            Ok(s) => s,
            Err(spikefpn_core::Error::InsufficientEvents { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let name = format!("stack_{t:012}.stk");
        stacks::save_stack(&stack, &out.join(&name))?;
        index.push_str(&format!(
            "{t},{name},{:.6}\n",
            spikefpn_core::encoding::stack_sparsity(&stack)
        ));
        written += 1;
    }
    fs::write(out.join("index.csv"), index).map_err(CliError::io(out))?;
    println!("encoded {written} stacks into {}", out.display());
    Ok(())
}

/// Resolve anchors for a dataset according to the config.
pub fn resolve_anchors(cfg: &RunConfig, dataset: &Dataset) -> Result<AnchorSet> {
    let sizes = dataset::train_box_sizes(dataset);
    let anchors = cfg
        .anchors
        .resolve(&sizes, cfg.network.num_anchors, cfg.seed)?;
    anchors.validate(3, cfg.network.num_anchors)?;
    Ok(anchors)
}

pub struct TrainArtifacts {
    pub output: TrainOutput,
    pub anchors: AnchorSet,
}

/// Shared training path: load data, encode, train (optionally resuming).
pub fn run_training(
    cfg: &RunConfig,
    data: &Path,
    resume: Option<&Path>,
    spec_override: Option<NetworkSpec>,
) -> Result<TrainArtifacts> {
    let spec = spec_override.unwrap_or_else(|| cfg.network.clone());
    let geometry = (spec.input_hw.1 as u16, spec.input_hw.0 as u16);
    let (stream, labels) = dataset::load_dir(data, geometry)?;
    let mut encoder = cfg.encoder.clone();
    encoder.stacks = spec.time_steps;
    encoder.frames_per_stack = spec.frames_per_stack;
    let ds = dataset::build_dataset(&stream, &labels, &encoder, cfg.train.val_fraction, None)?;
    let anchors = resolve_anchors(cfg, &ds)?;

    let (graph, start_epoch, opt) = match resume {
        Some(ckpt_path) => {
            let ckpt = read_checkpoint(ckpt_path)?;
            if ckpt.spec != spec {
                return Err(CliError::Checkpoint(format!(
                    "checkpoint spec in {} does not match the run configuration",
                    ckpt_path.display()
                )));
            }
            let (graph, ts) = restore_graph(&ckpt)?;
            match ts {
                Some(ts) => (graph, ts.next_epoch, ts.optimizer),
                None => {
                    let opt = OptimizerState::new(graph.params());
                    (graph, 0, opt)
                }
            }
        }
        None => {
            let graph = build_network(&spec, cfg.seed)?;
            let opt = OptimizerState::new(graph.params());
            (graph, 0, opt)
        }
    };
    let output = train_resumable(graph, &ds, &anchors, &cfg.train, start_epoch, opt)?;
    Ok(TrainArtifacts { output, anchors })
}

pub fn write_metrics(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(CliError::io(path))?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| CliError::Other(format!("metrics serialization: {e}")))?;
        writeln!(f, "{line}").map_err(CliError::io(path))?;
    }
    Ok(())
}

/// Train and persist: best checkpoint, resumable last checkpoint, metrics.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    force: bool,
    resume: Option<&Path>,
    first_layer: Option<NeuronKind>,
) -> Result<()> {
    ensure_out_dir(out, force)?;
    let mut spec = cfg.network.clone();
    if let Some(k) = first_layer {
        spec.first_layer_neuron = k;
    }
    let arts = run_training(cfg, data, resume, Some(spec))?;
    let output = &arts.output;
    write_metrics(&output.records, &out.join("metrics.jsonl"))?;
    write_checkpoint(&out.join("checkpoint.sfpn"), &output.best, None)?;
    let ts = TrainState {
        optimizer: output.optimizer.clone(),
        next_epoch: output.records.last().map(|r| r.epoch + 1).unwrap_or(0),
        best_map50: output.best_map50,
    };
    write_checkpoint(&out.join("last.sfpn"), &output.graph, Some(&ts))?;
    fs::write(out.join("config.json"), cfg.to_json()).map_err(CliError::io(out))?;
    if let Some((epoch, loss)) = output.diverged {
        return Err(CliError::Other(format!(
            "training diverged at epoch {epoch} (loss {loss}); best checkpoint saved to {}",
            out.join("checkpoint.sfpn").display()
        )));
    }
    let last = output.records.last();
    println!(
        "trained {} epochs; best mAP50 {:.4}; final loss {:.4}",
        output.records.len(),
        output.best_map50,
        last.map(|r| r.train_loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Evaluate a checkpoint over a data directory and print the mAP report.
pub fn cmd_eval(cfg: &RunConfig, ckpt_path: &Path, data: &Path) -> Result<()> {
    let ckpt = read_checkpoint(ckpt_path)?;
    let (mut graph, _) = restore_graph(&ckpt)?;
    let geometry = (graph.spec.input_hw.1 as u16, graph.spec.input_hw.0 as u16);
    let (stream, labels) = dataset::load_dir(data, geometry)?;
    let mut encoder = cfg.encoder.clone();
    encoder.stacks = graph.spec.time_steps;
    encoder.frames_per_stack = graph.spec.frames_per_stack;
    let ds = dataset::build_dataset(&stream, &labels, &encoder, 0.0, None)?;
    let anchors = resolve_anchors(cfg, &ds)?;
    let all: Vec<usize> = (0..ds.samples.len()).collect();
    let (report, rate) = evaluate_dataset(
        &mut graph,
        &ds.samples,
        &all,
        &anchors,
        cfg.eval.score_threshold,
        cfg.eval.nms_iou,
        cfg.train.batch_size,
    )?;
    println!("samples: {}", ds.samples.len());
    println!("mAP50: {:.4}", report.map50);
    println!("mAP50:95: {:.4}", report.map50_95);
    for (class, ap) in &report.per_class_ap50 {
        println!("AP50 class {class}: {ap:.4}");
    }
    println!("mean firing rate: {rate:.4}");
    Ok(())
}

/// Run a checkpoint over an event file and export detections as CSV.
pub fn cmd_infer(
    cfg: &RunConfig,
    ckpt_path: &Path,
    events: &Path,
    labels: Option<&Path>,
    stride_us: Option<u64>,
    out: &Path,
    force: bool,
) -> Result<()> {
    ensure_out_dir(out, force)?;
    let ckpt = read_checkpoint(ckpt_path)?;
    let (mut graph, _) = restore_graph(&ckpt)?;
    let geometry = (graph.spec.input_hw.1 as u16, graph.spec.input_hw.0 as u16);
    let stream = event_io::load_events(events, geometry)?;
    let mut encoder = cfg.encoder.clone();
    encoder.stacks = graph.spec.time_steps;
    encoder.frames_per_stack = graph.spec.frames_per_stack;
    let window = encoder.delta_t_us * encoder.stacks as u64;
    let times: Vec<u64> = match (labels, stride_us) {
        (Some(lp), _) => {
            let (boxes, _) = event_io::load_labels(lp, geometry)?;
            let set: std::collections::BTreeSet<u64> =
                boxes.iter().map(|b| b.t).filter(|t| *t >= window).collect();
            set.into_iter().collect()
        }
        (None, stride) => {
            let stride = stride.unwrap_or(encoder.delta_t_us);
            let end = stream.events().last().map(|e| e.t + 1).unwrap_or(0);
            (0..)
                .map(|i| window + i * stride)
                .take_while(|t| *t <= end)
                .collect()
        }
    };
    if times.is_empty() {
        return Err(CliError::Config(String::from(
            "no inference timestamps: stream shorter than one stack window",
        )));
    }
    // Build pseudo-samples (no boxes needed for inference).
    let mut samples = Vec::with_capacity(times.len());
    for t in &times {
        let stack = spikefpn_core::encoding::encode_sbt(&stream, *t, &encoder)?;
        samples.push(spikefpn_core::training::Sample { stack, boxes: Vec::new() });
    }
    let anchors = cfg.anchors.resolve(&[], graph.spec.num_anchors, cfg.seed)?;
    let all: Vec<usize> = (0..samples.len()).collect();
    let (dets, _, _) = infer_dataset(
        &mut graph,
        &samples,
        &all,
        &anchors,
        cfg.eval.score_threshold,
        cfg.eval.nms_iou,
        cfg.train.batch_size,
    )?;
    let mut csv = String::from("image_id,class_id,score,x,y,w,h\n");
    for (img, img_dets) in dets.iter().enumerate() {
        for d in img_dets {
            let r = d.rect();
            csv.push_str(&format!(
                "{img},{},{:.6},{:.3},{:.3},{:.3},{:.3}\n",
                d.class_id,
                d.score,
                r.x1,
                r.y1,
                d.w,
                d.h
            ));
        }
    }
    let path = out.join("detections.csv");
    fs::write(&path, csv).map_err(CliError::io(&path))?;
    println!(
        "wrote {} detections over {} stacks to {}",
        dets.iter().map(|d| d.len()).sum::<usize>(),
        times.len(),
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct CostLayerJson {
    name: String,
    s: f64,
    #[serde(rename = "A")]
    a: u64,
    ops: f64,
    energy_pj: f64,
    is_mac: bool,
}

#[derive(Serialize)]
struct CostTotalsJson {
    time_steps: usize,
    snn_additions: f64,
    head_macs: f64,
    energy_j: f64,
    mean_firing_rate: f64,
}

#[derive(Serialize)]
struct CostReportJson {
    per_layer: Vec<CostLayerJson>,
    totals: CostTotalsJson,
}

/// Record firing over a data directory and emit the energy report.
pub fn cmd_cost_report(
    cfg: &RunConfig,
    ckpt_path: &Path,
    data: &Path,
    max_samples: Option<usize>,
    out: &Path,
    force: bool,
    csv: bool,
) -> Result<()> {
    ensure_out_dir(out, force)?;
    let ckpt = read_checkpoint(ckpt_path)?;
    let (mut graph, _) = restore_graph(&ckpt)?;
    let geometry = (graph.spec.input_hw.1 as u16, graph.spec.input_hw.0 as u16);
    let (stream, labels) = dataset::load_dir(data, geometry)?;
    let mut encoder = cfg.encoder.clone();
    encoder.stacks = graph.spec.time_steps;
    encoder.frames_per_stack = graph.spec.frames_per_stack;
    let ds = dataset::build_dataset(&stream, &labels, &encoder, 0.0, max_samples)?;

    // Average the per-layer presynaptic densities over eval batches.
    use spikefpn_core::autograd::{Mode, Tape};
    use spikefpn_core::network::stack_step_tensors;
    let batch = cfg.train.batch_size.max(1);
    let mut merged: Option<spikefpn_core::network::FiringRecord> = None;
    let mut batches = 0.0;
    for chunk in (0..ds.samples.len()).collect::<Vec<_>>().chunks(batch) {
        let stacks: Vec<_> = chunk.iter().map(|i| ds.samples[*i].stack.clone()).collect();
        let steps = stack_step_tensors(&stacks, &graph.spec)?;
        let mut tape = Tape::new();
        let fwd = graph.forward_batch(&mut tape, &steps, Mode::Eval)?;
        match &mut merged {
            None => merged = Some(fwd.record),
            Some(m) => {
                for (dst, src) in m.conv_density.iter_mut().zip(&fwd.record.conv_density) {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
                for (dst, src) in m.spike_rate.iter_mut().zip(&fwd.record.spike_rate) {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
        batches += 1.0;
    }
    let mut record = merged.ok_or_else(|| CliError::Config(String::from("no samples")))?;
    for row in record.conv_density.iter_mut().chain(record.spike_rate.iter_mut()) {
        for v in row.iter_mut() {
            *v /= batches;
        }
    }
    let report = record_firing(&graph, &record)?;
    let json = CostReportJson {
        per_layer: report
            .layers
            .iter()
            .map(|l| CostLayerJson {
                name: l.name.clone(),
                s: l.s,
                a: l.a,
                ops: l.ops,
                energy_pj: l.energy_pj,
                is_mac: l.is_mac,
            })
            .collect(),
        totals: CostTotalsJson {
            time_steps: report.time_steps,
            snn_additions: report.total_snn_additions,
            head_macs: report.total_head_macs,
            energy_j: energy_estimate_parts(report.total_snn_additions, report.total_head_macs),
            mean_firing_rate: report.mean_firing_rate,
        },
    };
    let path = out.join("cost_report.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&json).map_err(|e| CliError::Other(e.to_string()))?,
    )
    .map_err(CliError::io(&path))?;
    if csv {
        let mut rows = String::from("name,s,A,ops,energy_pj,is_mac\n");
        for l in &report.layers {
            rows.push_str(&format!(
                "{},{:.6},{},{:.3},{:.3},{}\n",
                l.name, l.s, l.a, l.ops, l.energy_pj, l.is_mac
            ));
        }
        fs::write(out.join("cost_report.csv"), rows).map_err(CliError::io(out))?;
    }
    println!(
        "total: {:.3e} spike-driven additions, {:.3e} head MACs, {:.3} mJ ({} layers)",
        report.total_snn_additions,
        report.total_head_macs,
        json.totals.energy_j * 1e3,
        report.layers.len()
    );
    println!("report written to {}", path.display());
    Ok(())
}

/// Hyper-parameter axes the sweep command can walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Tau,
    Threshold,
    ScConfig,
    Beta,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tau" => Ok(SweepAxis::Tau),
            "threshold" => Ok(SweepAxis::Threshold),
            "s_c_config" => Ok(SweepAxis::ScConfig),
            "beta" => Ok(SweepAxis::Beta),
            other => Err(format!(
                "unknown axis `{other}` (expected tau, threshold, s_c_config, beta)"
            )),
        }
    }
}

/// One grid point result.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub best_map50: f64,
    pub map50_95: f64,
    pub final_loss: f64,
    pub firing_rate_mean: f64,
}

fn apply_axis(cfg: &mut RunConfig, axis: SweepAxis, raw: &str) -> Result<()> {
    match axis {
        SweepAxis::Tau => {
            cfg.network.neuron.tau = raw
                .parse()
                .map_err(|e| CliError::Config(format!("tau value `{raw}`: {e}")))?;
        }
        SweepAxis::Threshold => {
            cfg.network.neuron.u_th = raw
                .parse()
                .map_err(|e| CliError::Config(format!("threshold value `{raw}`: {e}")))?;
        }
        SweepAxis::Beta => {
            cfg.network.neuron.alif_beta = raw
                .parse()
                .map_err(|e| CliError::Config(format!("beta value `{raw}`: {e}")))?;
        }
        SweepAxis::ScConfig => {
            // "SxC": stacks x frames, holding the frame window fixed.
            let (s, c) = raw
                .split_once('x')
                .ok_or_else(|| CliError::Config(format!("s_c_config value `{raw}` must be SxC")))?;
            let s: usize = s
                .parse()
                .map_err(|e| CliError::Config(format!("S in `{raw}`: {e}")))?;
            let c: usize = c
                .parse()
                .map_err(|e| CliError::Config(format!("C in `{raw}`: {e}")))?;
            let window = cfg.encoder.frame_window_us();
            cfg.network.time_steps = s;
            cfg.network.frames_per_stack = c;
            cfg.encoder.stacks = s;
            cfg.encoder.frames_per_stack = c;
            cfg.encoder.delta_t_us = window * c as u64;
        }
    }
    Ok(())
}

/// Train+eval once per grid value; points run on worker threads and the
/// CSV keeps the input order.
pub fn cmd_sweep(
    cfg: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    data: &Path,
    out: &Path,
    force: bool,
    epochs: Option<usize>,
    jobs: usize,
) -> Result<()> {
    if values.is_empty() {
        return Err(CliError::Config(String::from("empty sweep grid")));
    }
    ensure_out_dir(out, force)?;
    let mut points: Vec<RunConfig> = Vec::with_capacity(values.len());
    for raw in values {
        let mut point_cfg = cfg.clone();
        if let Some(e) = epochs {
            point_cfg.train.epochs = e;
        }
        apply_axis(&mut point_cfg, axis, raw)?;
        points.push(point_cfg);
    }
    let jobs = jobs.max(1).min(points.len());
    // Grid points are independent trainings; run `jobs` at a time and
    // collect in input order so the CSV is deterministic.
    let mut results: Vec<Result<SweepRow>> = Vec::with_capacity(points.len());
    for chunk_start in (0..points.len()).step_by(jobs) {
        let chunk = &points[chunk_start..(chunk_start + jobs).min(points.len())];
        let chunk_values = &values[chunk_start..chunk_start + chunk.len()];
        let mut chunk_results: Vec<Result<SweepRow>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .zip(chunk_values)
                .map(|(point_cfg, value)| {
                    let value = value.clone();
                    scope.spawn(move || -> Result<SweepRow> {
                        let arts = run_training(point_cfg, data, None, None)?;
                        let last = arts.output.records.last().cloned();
                        let best_95 = arts
                            .output
                            .records
                            .iter()
                            .map(|r| r.map50_95)
                            .fold(0.0f64, f64::max);
                        Ok(SweepRow {
                            value,
                            best_map50: arts.output.best_map50,
                            map50_95: best_95,
                            final_loss: last.as_ref().map(|r| r.train_loss).unwrap_or(f64::NAN),
                            firing_rate_mean: last
                                .map(|r| r.firing_rate_mean)
                                .unwrap_or(f64::NAN),
                        })
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        });
        results.append(&mut chunk_results);
    }
    let mut csv = String::from("axis,value,map50,map50_95,final_loss,firing_rate_mean\n");
    let axis_name = match axis {
        SweepAxis::Tau => "tau",
        SweepAxis::Threshold => "threshold",
        SweepAxis::ScConfig => "s_c_config",
        SweepAxis::Beta => "beta",
    };
    for r in results {
        let r = r?;
        csv.push_str(&format!(
            "{axis_name},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.value, r.best_map50, r.map50_95, r.final_loss, r.firing_rate_mean
        ));
    }
    let path = out.join("sweep.csv");
    fs::write(&path, &csv).map_err(CliError::io(&path))?;
    println!("{csv}");
    println!("sweep written to {}", path.display());
    Ok(())
}

/// Forward a trained graph once to sanity-check a checkpoint (used by
/// tests and debugging; not exposed as a subcommand).
pub fn smoke_forward(graph: &mut NetworkGraph) -> Result<f64> {
    use spikefpn_core::autograd::{Mode, Tape};
    use spikefpn_core::tensor::Tensor;
    let (h, w) = graph.spec.input_hw;
    let steps: Vec<Tensor> = (0..graph.spec.time_steps)
        .map(|_| Tensor::zeros(&[1, graph.spec.frames_per_stack, h, w]))
        .collect();
    let mut tape = Tape::new();
    let out = graph.forward_batch(&mut tape, &steps, Mode::Eval)?;
    Ok(tape.value(out.heads[0]).data().iter().sum())
}
