//! Checkpoint container: magic `SFPN`, a version byte, the network spec as
//! canonical JSON text, then length-prefixed named tensors (u32 name
//! length, UTF-8 name, u32 rank, u32 dims, little-endian f32 data).
//!
//! Optimizer moments and loop counters ride along as `opt.*` / `train.*`
//! tensors so interrupted runs can resume.

use std::fs;
use std::path::Path;

use spikefpn_core::network::{build_network, NetworkGraph, NetworkSpec};
use spikefpn_core::tensor::Tensor;
use spikefpn_core::training::OptimizerState;

use crate::error::{CliError, Result};

pub const SFPN_MAGIC: &[u8; 4] = b"SFPN";
pub const SFPN_VERSION: u8 = 1;

pub type NamedTensor = (String, Vec<usize>, Vec<f64>);

/// Optional training progress stored alongside the weights.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub optimizer: OptimizerState,
    pub next_epoch: usize,
    pub best_map50: f64,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub tensors: Vec<NamedTensor>,
}

pub fn write_checkpoint(
    path: &Path,
    graph: &NetworkGraph,
    train_state: Option<&TrainState>,
) -> Result<()> {
    let mut tensors = graph.named_tensors();
    if let Some(ts) = train_state {
        for (i, p) in graph.params().iter().enumerate() {
            tensors.push((
                format!("opt.m.{}", p.name),
                ts.optimizer.m[i].shape().to_vec(),
                ts.optimizer.m[i].data().to_vec(),
            ));
            tensors.push((
                format!("opt.v.{}", p.name),
                ts.optimizer.v[i].shape().to_vec(),
                ts.optimizer.v[i].data().to_vec(),
            ));
        }
        tensors.push((String::from("opt.step"), vec![1], vec![ts.optimizer.step as f64]));
        tensors.push((String::from("train.next_epoch"), vec![1], vec![ts.next_epoch as f64]));
        tensors.push((String::from("train.best_map50"), vec![1], vec![ts.best_map50]));
    }

    let spec_json = serde_json::to_string(&graph.spec)
        .map_err(|e| CliError::Checkpoint(format!("spec serialization: {e}")))?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(SFPN_MAGIC);
    buf.push(SFPN_VERSION);
    buf.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(spec_json.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(CliError::io(path))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(CliError::Checkpoint(format!(
                "{}: truncated at byte {}",
                path.display(),
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4)?;
    if magic != SFPN_MAGIC {
        return Err(CliError::Checkpoint(format!(
            "{}: bad magic {:?} (corrupt or not a checkpoint)",
            path.display(),
            magic
        )));
    }
    let version = take(&mut pos, 1)?[0];
    if version != SFPN_VERSION {
        return Err(CliError::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    let spec_len = u32_at(&mut pos)? as usize;
    let spec_json = std::str::from_utf8(take(&mut pos, spec_len)?)
        .map_err(|_| CliError::Checkpoint(String::from("spec JSON is not UTF-8")))?;
    let spec: NetworkSpec = serde_json::from_str(spec_json)
        .map_err(|e| CliError::Checkpoint(format!("spec JSON: {e}")))?;
    let n_tensors = u32_at(&mut pos)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = u32_at(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| CliError::Checkpoint(String::from("tensor name is not UTF-8")))?
            .to_string();
        let rank = u32_at(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, shape, data));
    }
    Ok(Checkpoint { spec, tensors })
}

/// Rebuild a graph (and optional training state) from a checkpoint.
pub fn restore_graph(ckpt: &Checkpoint) -> Result<(NetworkGraph, Option<TrainState>)> {
    let mut graph = build_network(&ckpt.spec, 0)?;
    let model_tensors: Vec<NamedTensor> = ckpt
        .tensors
        .iter()
        .filter(|(n, _, _)| !n.starts_with("opt.") && !n.starts_with("train."))
        .cloned()
        .collect();
    graph.load_named_tensors(&model_tensors)?;

    let find = |name: &str| ckpt.tensors.iter().find(|(n, _, _)| n == name);
    let train_state = if find("opt.step").is_some() {
        let mut opt = OptimizerState::new(graph.params());
        for (i, p) in graph.params().iter().enumerate() {
            for (prefix, slot) in [("opt.m.", 0), ("opt.v.", 1)] {
                let key = format!("{prefix}{}", p.name);
                let (_, shape, data) = find(&key).ok_or_else(|| {
                    CliError::Checkpoint(format!("missing optimizer tensor {key}"))
                })?;
                let t = Tensor::from_vec(shape, data.clone())
                    .map_err(|e| CliError::Checkpoint(format!("{key}: {e}")))?;
                if slot == 0 {
                    opt.m[i] = t;
                } else {
                    opt.v[i] = t;
                }
            }
        }
        opt.step = find("opt.step").unwrap().2[0] as u64;
        let next_epoch = find("train.next_epoch")
            .map(|(_, _, d)| d[0] as usize)
            .unwrap_or(0);
        let best_map50 = find("train.best_map50").map(|(_, _, d)| d[0]).unwrap_or(0.0);
        Some(TrainState {
            optimizer: opt,
            next_epoch,
            best_map50,
        })
    } else {
        None
    };
    Ok((graph, train_state))
}
