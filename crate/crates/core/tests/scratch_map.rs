use std::collections::BTreeMap;
use spikefpn_core::detection::AnchorSet;
use spikefpn_core::encoding::{encode_sbt, EncoderConfig};
use spikefpn_core::network::{build_network, NetworkSpec, NeuronKind};
use spikefpn_core::synth::{synthesize_scene, SceneConfig};
use spikefpn_core::training::*;

fn desk_dataset(seed: u64, n_samples: usize) -> Vec<Sample> {
    let mut cfg = SceneConfig { duration_us: (n_samples as u64 + 4) * 60_000, ..SceneConfig::default() };
    if let Ok(v) = std::env::var("SCENE_NOISE") { cfg.noise_rate_hz = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("SCENE_OBJECTS") { cfg.num_objects = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("SCENE_SPEED_HI") { cfg.speed_px_per_s.1 = v.parse().unwrap(); }
    let enc = EncoderConfig::default();
    let (stream, labels) = synthesize_scene(seed, &cfg).unwrap();
    let mut by_t: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for b in labels { by_t.entry(b.t).or_default().push(b); }
    let mut samples = Vec::new();
    for (t, boxes) in by_t {
        if t < enc.delta_t_us * enc.stacks as u64 { continue; }
        samples.push(Sample { stack: encode_sbt(&stream, t, &enc).unwrap(), boxes });
        if samples.len() == n_samples { break; }
    }
    samples
}

#[test]
fn probe_map_trajectory() {
    let n: usize = std::env::var("N").ok().and_then(|s| s.parse().ok()).unwrap_or(150);
    let epochs: usize = std::env::var("EPOCHS").ok().and_then(|s| s.parse().ok()).unwrap_or(10);
    let first = std::env::var("FIRST").unwrap_or("lif".into());
    let samples = desk_dataset(1, n);
    let total_boxes: usize = samples.iter().map(|s| s.boxes.len()).sum();
    eprintln!("dataset: {} samples, {} boxes, mean sparsity {:.4}", samples.len(), total_boxes,
        samples.iter().map(|s| spikefpn_core::encoding::stack_sparsity(&s.stack)).sum::<f64>() / samples.len() as f64);
    let mut spec = NetworkSpec::desk();
    spec.first_layer_neuron = match first.as_str() { "alif" => NeuronKind::Alif, "binary" => NeuronKind::Binary, _ => NeuronKind::Lif };
    if let Ok(v) = std::env::var("TAU") { spec.neuron.tau = v.parse().unwrap(); }
    let graph = build_network(&spec, 1).unwrap();
    let dataset = Dataset::split(samples, 0.1);
    let mut config = TrainConfig { epochs, batch_size: 8, seed: 1, ..TrainConfig::default() };
    if let Ok(v) = std::env::var("LR") { config.lr = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("NOOBJ") { config.loss.noobj_w = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("HNK") { config.loss.hard_neg_k = v.parse().unwrap(); }
    if std::env::var("SOFT").is_ok() { config.soft_mode = true; }
    let t0 = std::time::Instant::now();
    let out = train(graph, &dataset, &AnchorSet::default_synthetic(), &config).unwrap();
    for r in &out.records {
        eprintln!("epoch {:2}: loss {:.4} map50 {:.4} map50_95 {:.4} rate {:.3} lr {:.5}",
            r.epoch, r.train_loss, r.map50, r.map50_95, r.firing_rate_mean, r.lr);
    }
    eprintln!("best map50: {:.4}; wall {:.1}s", out.best_map50, t0.elapsed().as_secs_f64());
}
