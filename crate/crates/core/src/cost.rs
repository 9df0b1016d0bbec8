//! Spike-driven operation counting and energy estimation.
//!
//! Synaptic work per layer is s x T x A: the presynaptic activity fraction
//! s, the executed time steps T, and the layer's accumulations at full
//! input density A. Spiking layers run on additions (0.9 pJ each); the
//! real-valued head output convolutions are conventional multiply-
//! accumulates (4.6 pJ each) and are reported separately.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::network::{FiringRecord, NetworkGraph};

/// Energy per SNN addition, joules.
pub const ENERGY_PER_ADD_J: f64 = 0.9e-12;
/// Energy per ANN multiply-accumulate, joules.
pub const ENERGY_PER_MAC_J: f64 = 4.6e-12;

/// Activity and cost of one conv layer.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerCost {
    pub name: String,
    /// Mean presynaptic activity per step, in [0, 1].
    pub s: f64,
    /// Accumulations per execution at full density.
    pub a: u64,
    /// Executed time steps.
    pub t: usize,
    /// s * T * A (additions), or dense T * A MACs for head outputs.
    pub ops: f64,
    pub energy_pj: f64,
    pub is_mac: bool,
}

/// Whole-network firing/cost report.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FiringReport {
    pub time_steps: usize,
    pub layers: Vec<LayerCost>,
    /// Mean output spike rate per spiking block (averaged over steps).
    pub spike_rates: Vec<(String, f64)>,
    /// Activation-weighted network mean firing rate.
    pub mean_firing_rate: f64,
    pub total_snn_additions: f64,
    pub total_head_macs: f64,
    pub total_energy_j: f64,
}

/// Fold a forward pass's firing record into per-layer costs.
pub fn record_firing(graph: &NetworkGraph, record: &FiringRecord) -> Result<FiringReport> {
    let cost_table = graph.conv_cost_table();
    if record.conv_density.len() != cost_table.len() {
        return Err(Error::Shape(String::from(
            "firing record does not match the graph's conv table",
        )));
    }
    let t = record.steps;
    let mut layers = Vec::with_capacity(cost_table.len());
    let mut total_adds = 0.0;
    let mut total_macs = 0.0;
    for (i, (name, a, is_mac)) in cost_table.into_iter().enumerate() {
        let densities = &record.conv_density[i];
        let s = if densities.is_empty() {
            0.0
        } else {
            densities.iter().sum::<f64>() / densities.len() as f64
        };
        let (ops, energy_pj) = if is_mac {
            // Dense multiply-accumulate at every executed step.
            let macs = (t as u64 * a) as f64;
            (macs, macs * ENERGY_PER_MAC_J * 1e12)
        } else {
            let adds = s * t as f64 * a as f64;
            (adds, adds * ENERGY_PER_ADD_J * 1e12)
        };
        if is_mac {
            total_macs += ops;
        } else {
            total_adds += ops;
        }
        layers.push(LayerCost {
            name,
            s,
            a,
            t,
            ops,
            energy_pj,
            is_mac,
        });
    }
    let spike_rates = graph
        .spike_block_names()
        .iter()
        .enumerate()
        .map(|(slot, name)| (name.clone(), record.mean_rate(slot)))
        .collect();
    Ok(FiringReport {
        time_steps: t,
        mean_firing_rate: record.network_mean_rate(),
        spike_rates,
        total_snn_additions: total_adds,
        total_head_macs: total_macs,
        total_energy_j: energy_estimate_parts(total_adds, total_macs),
        layers,
    })
}

/// Per-layer dense additions (and head MACs), independent of activity.
pub fn dense_additions(graph: &NetworkGraph) -> Vec<(String, u64, bool)> {
    graph.conv_cost_table()
}

/// Total energy for a report: adds at 0.9 pJ plus head MACs at 4.6 pJ.
pub fn energy_estimate(report: &FiringReport) -> f64 {
    energy_estimate_parts(report.total_snn_additions, report.total_head_macs)
}

/// E = adds * 0.9 pJ + macs * 4.6 pJ.
pub fn energy_estimate_parts(snn_additions: f64, head_macs: f64) -> f64 {
    snn_additions * ENERGY_PER_ADD_J + head_macs * ENERGY_PER_MAC_J
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_energy_arithmetic() {
        // 2.83 G additions -> 2.55 mJ; 18.73 G MACs -> 86.16 mJ.
        let snn = energy_estimate_parts(2.83e9, 0.0);
        assert!((snn - 2.55e-3).abs() / 2.55e-3 < 5e-3, "snn energy {snn}");
        let ann = energy_estimate_parts(0.0, 18.73e9);
        assert!((ann - 86.16e-3).abs() / 86.16e-3 < 5e-3, "ann energy {ann}");
    }

    #[test]
    fn zero_firing_costs_only_head_macs() {
        assert_eq!(energy_estimate_parts(0.0, 100.0), 100.0 * ENERGY_PER_MAC_J);
    }

    #[test]
    fn energy_monotone_in_additions() {
        assert!(energy_estimate_parts(10.0, 5.0) < energy_estimate_parts(20.0, 5.0));
    }
}
