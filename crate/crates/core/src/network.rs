//! The spiking feature-pyramid detector graph.
//!
//! Topology: two stride-2 spiking stems, ten three-node spiking cells in a
//! four-stage downsampling plan (x32 total), pyramid taps at the last cell
//! of the final three stages, top-down fusion by nearest upsampling plus
//! channel concat and 1x1 spiking blocks, and three prediction heads whose
//! final 1x1 convolution emits real-valued K*(C+5) maps.
//!
//! Cells follow the two-predecessor wiring: nodes 0 and 1 each read both
//! cell inputs, node 2 reads nodes 0 and 1, and every multi-input node sums
//! its per-edge conv+BN currents on the membrane before spiking. Cell
//! inputs are aligned to the node width by 1x1 spiking blocks (stride 2 at
//! stage boundaries); the three node outputs are summed and re-thresholded
//! by a 1x1 spiking block back to the cell's channel count, so the tensor
//! crossing every block boundary is binary.
//!
//! Node width is 5/16 of the cell width; together with the two 3x3 head
//! blocks per scale this sizes the default 48-channel build to 21.5 M
//! parameters at 256x256 input.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{BnStats, Mode, SpikeThreshold, Tape, Val};
use crate::encoding::FrameStack;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::spiking::SurrogateSpec;
use crate::tensor::Tensor;

/// Node width as a fraction of the cell channel count.
const NODE_WIDTH_NUM: usize = 5;
const NODE_WIDTH_DEN: usize = 16;
/// Initial channels must be divisible by this (keeps node widths integral).
pub const CHANNEL_DIVISOR: usize = 8;

/// Neuron model selection per layer group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum NeuronKind {
    Lif,
    Alif,
    Binary,
}

/// Neuron and surrogate hyper-parameters shared by every spiking layer.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct NeuronHyper {
    /// Membrane decay tau in [0, 1].
    pub tau: f64,
    /// Base firing threshold.
    pub u_th: f64,
    /// Dspike temperature.
    pub surrogate_b: f64,
    /// Adaptive threshold increment scale.
    pub alif_beta: f64,
    /// Initial value of the trainable trace decay.
    pub tau_a_init: f64,
    /// Box constraint for tau_a, enforced by projection after each step.
    pub tau_a_bounds: (f64, f64),
    /// Train tau_a (the paper's headline setting).
    pub train_tau_a: bool,
    /// Optionally train beta as well (off by default).
    pub train_beta: bool,
}

impl Default for NeuronHyper {
    fn default() -> Self {
        NeuronHyper {
            tau: 0.2,
            u_th: 0.3,
            surrogate_b: 3.0,
            alif_beta: 0.07,
            tau_a_init: 0.3,
            tau_a_bounds: (0.2, 0.4),
            train_tau_a: true,
            train_beta: false,
        }
    }
}

impl NeuronHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} not in [0, 1]", self.tau)));
        }
        if self.u_th <= 0.0 {
            return Err(Error::Config(String::from("u_th must be positive")));
        }
        if self.surrogate_b <= 0.0 {
            return Err(Error::Config(String::from("surrogate temperature must be positive")));
        }
        if self.alif_beta < 0.0 {
            return Err(Error::Config(String::from("alif_beta must be >= 0")));
        }
        let (lo, hi) = self.tau_a_bounds;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config(String::from("tau_a bounds must satisfy 0 < lo < hi < 1")));
        }
        if !(lo..=hi).contains(&self.tau_a_init) {
            return Err(Error::Config(String::from("tau_a_init must lie inside its bounds")));
        }
        Ok(())
    }
}

/// One backbone stage: cell count and whether its first cell downsamples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StagePlan {
    pub cells: usize,
    pub downsample: bool,
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct NetworkSpec {
    pub initial_channels: usize,
    pub num_classes: usize,
    pub num_anchors: usize,
    pub input_hw: (usize, usize),
    pub time_steps: usize,
    pub frames_per_stack: usize,
    pub first_layer_neuron: NeuronKind,
    pub body_neuron: NeuronKind,
    pub stage_plan: Vec<StagePlan>,
    pub neuron: NeuronHyper,
    /// Keep batch-norm scale/shift at (1, 0). Pinning the affine keeps every
    /// membrane distribution centered near the firing threshold, which
    /// prevents neurons from saturating into input-independent codes.
    pub freeze_bn_affine: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            initial_channels: 48,
            num_classes: 2,
            num_anchors: 3,
            input_hw: (256, 256),
            time_steps: 3,
            frames_per_stack: 3,
            first_layer_neuron: NeuronKind::Alif,
            body_neuron: NeuronKind::Lif,
            stage_plan: vec![
                StagePlan { cells: 2, downsample: false },
                StagePlan { cells: 3, downsample: true },
                StagePlan { cells: 3, downsample: true },
                StagePlan { cells: 2, downsample: true },
            ],
            neuron: NeuronHyper::default(),
            freeze_bn_affine: true,
        }
    }
}

impl NetworkSpec {
    /// Desk-scale preset: 1/6 the channels, 1/4 the input size.
    pub fn desk() -> NetworkSpec {
        NetworkSpec {
            initial_channels: 8,
            input_hw: (64, 64),
            ..NetworkSpec::default()
        }
    }

    /// Total spatial downsampling factor (stems plus reduction stages).
    pub fn downsample_factor(&self) -> usize {
        let stage_red: usize = self.stage_plan.iter().filter(|s| s.downsample).count();
        1 << (2 + stage_red)
    }

    /// Output channels per stage: 2^(i+1) * initial_channels.
    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.stage_plan.len())
            .map(|i| (2 << i) * self.initial_channels)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.neuron.validate()?;
        if self.initial_channels == 0 || self.initial_channels % CHANNEL_DIVISOR != 0 {
            return Err(Error::Config(format!(
                "initial_channels {} must be a nonzero multiple of {CHANNEL_DIVISOR}",
                self.initial_channels
            )));
        }
        if self.num_classes == 0 || self.num_anchors == 0 {
            return Err(Error::Config(String::from("need at least one class and one anchor")));
        }
        if self.stage_plan.len() < 3 {
            return Err(Error::Config(String::from("need at least three stages for the pyramid taps")));
        }
        if self.stage_plan.iter().any(|s| s.cells == 0) {
            return Err(Error::Config(String::from("every stage needs at least one cell")));
        }
        let factor = self.downsample_factor();
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "input geometry {h}x{w} must be divisible by the downsampling factor {factor}"
            )));
        }
        if self.time_steps == 0 || self.frames_per_stack == 0 {
            return Err(Error::Config(String::from("time_steps and frames_per_stack must be >= 1")));
        }
        if self.body_neuron == NeuronKind::Alif {
            return Err(Error::Config(String::from(
                "adaptive neurons are supported on the first layer only",
            )));
        }
        Ok(())
    }

    /// Head channel count K * (C + 5).
    pub fn head_channels(&self) -> usize {
        self.num_anchors * (self.num_classes + 5)
    }
}

/// A learnable tensor with an optional projection box.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub clamp: Option<(f64, f64)>,
    /// Frozen parameters keep their value through training.
    pub frozen: bool,
}

/// Static description of one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvDesc {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_hw: (usize, usize),
    /// Maximum |value| of the input alphabet (1 for spikes and ternary
    /// frames, 3 for the three-node sum), used to normalize densities.
    pub in_magnitude: f64,
    /// Head output convs are real-valued multiply-accumulate layers.
    pub is_mac: bool,
}

impl ConvDesc {
    /// Accumulations at full input density: Cout * H' * W' * Cin * k * k,
    /// with the input alphabet expanded to unit-magnitude sources.
    pub fn dense_additions(&self) -> u64 {
        (self.out_ch * self.out_hw.0 * self.out_hw.1) as u64
            * (self.in_ch as f64 * self.in_magnitude) as u64
            * (self.k * self.k) as u64
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvUnit {
    desc: ConvDesc,
    weight: usize,
    bias: Option<usize>,
    /// (gamma, beta, bn_state index); None for the plain head convs and
    /// for folded graphs.
    bn: Option<(usize, usize, usize)>,
}

/// A spiking block: one or two conv+BN edges summed on the membrane, then
/// the neuron.
#[derive(Debug, Clone)]
struct Block {
    units: Vec<usize>,
    /// Indices of inputs added to the membrane as parameter-free identity
    /// edges (spike-element-wise residuals; gradient highways).
    identity: Vec<usize>,
    first_layer: bool,
    state_slot: usize,
}

#[derive(Debug, Clone, Copy)]
struct CellWiring {
    align_a: usize,
    align_b: usize,
    node0: usize,
    node1: usize,
    node2: usize,
    out: usize,
}

/// Per-layer activity from one forward pass.
#[derive(Debug, Clone)]
pub struct FiringRecord {
    pub steps: usize,
    /// Mean |input| / input magnitude per conv layer per step.
    pub conv_density: Vec<Vec<f64>>,
    /// Spike fraction per spiking block per step.
    pub spike_rate: Vec<Vec<f64>>,
    /// Elements per step of each spiking block's output.
    pub spike_numel: Vec<usize>,
}

impl FiringRecord {
    fn new(n_convs: usize, n_slots: usize, steps: usize) -> FiringRecord {
        FiringRecord {
            steps,
            conv_density: vec![vec![0.0; steps]; n_convs],
            spike_rate: vec![vec![0.0; steps]; n_slots],
            spike_numel: vec![0; n_slots],
        }
    }

    /// Mean spike rate of one block across steps.
    pub fn mean_rate(&self, slot: usize) -> f64 {
        let r = &self.spike_rate[slot];
        if r.is_empty() {
            0.0
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }

    /// Activation-count-weighted mean firing rate over all spiking blocks.
    pub fn network_mean_rate(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (slot, rates) in self.spike_rate.iter().enumerate() {
            let n = self.spike_numel[slot] as f64;
            for r in rates {
                num += r * n;
                den += n;
            }
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }
}

/// Result of unrolling the network over its time steps.
pub struct ForwardOutput {
    /// Final-step head values on the tape, one per scale (d1, d2, d3).
    pub heads: [Val; 3],
    pub record: FiringRecord,
    /// Tape leaves for every parameter, index-aligned with `params()`.
    pub param_vals: Vec<Val>,
}

struct NeuronVals {
    u: Val,
    y: Val,
    a: Option<Val>,
}

/// Instantiated parameterized graph.
pub struct NetworkGraph {
    pub spec: NetworkSpec,
    params: Vec<Param>,
    bn_states: Vec<BnStats>,
    bn_names: Vec<String>,
    convs: Vec<ConvUnit>,
    conv_names: Vec<String>,
    blocks: Vec<Block>,
    block_names: Vec<String>,
    cells: Vec<CellWiring>,
    stem_blocks: [usize; 2],
    fpn_blocks: [usize; 3],
    head_blocks: [(usize, usize, usize); 3],
    taps: [usize; 3],
    n_state_slots: usize,
    tau_a_param: Option<usize>,
    beta_param: Option<usize>,
    shape_table: Vec<(String, [usize; 3])>,
    surrogate: SurrogateSpec,
    /// When set, forward passes record every spiking block's output here
    /// (debugging aid; cleared at each forward call).
    pub trace: bool,
    pub last_trace: Vec<(String, Tensor)>,
}

struct Builder {
    freeze_bn_affine: bool,
    params: Vec<Param>,
    bn_states: Vec<BnStats>,
    bn_names: Vec<String>,
    convs: Vec<ConvUnit>,
    conv_names: Vec<String>,
    blocks: Vec<Block>,
    block_names: Vec<String>,
    slots: usize,
    rng: Rng,
}

impl Builder {
    fn param(&mut self, name: String, value: Tensor, clamp: Option<(f64, f64)>) -> usize {
        self.params.push(Param { name, value, clamp, frozen: false });
        self.params.len() - 1
    }

    fn conv_weight(&mut self, name: &str, out_ch: usize, in_ch: usize, k: usize) -> usize {
        let fan_in = (in_ch * k * k) as f64;
        let bound = libm::sqrt(6.0 / fan_in);
        let value = Tensor::uniform(&[out_ch, in_ch, k, k], bound, &mut self.rng);
        self.param(format!("{name}.weight"), value, None)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        in_hw: (usize, usize),
        in_magnitude: f64,
    ) -> usize {
        let padding = if k == 3 { 1 } else { 0 };
        let out_hw = (
            (in_hw.0 + 2 * padding - k) / stride + 1,
            (in_hw.1 + 2 * padding - k) / stride + 1,
        );
        let weight = self.conv_weight(name, out_ch, in_ch, k);
        let gamma = self.param(format!("{name}.bn.gamma"), Tensor::full(&[out_ch], 1.0), None);
        let beta = self.param(format!("{name}.bn.beta"), Tensor::zeros(&[out_ch]), None);
        if self.freeze_bn_affine {
            self.params[gamma].frozen = true;
            self.params[beta].frozen = true;
        }
        self.bn_states.push(BnStats::new(out_ch));
        self.bn_names.push(format!("{name}.bn"));
        let bn_idx = self.bn_states.len() - 1;
        self.convs.push(ConvUnit {
            desc: ConvDesc {
                in_ch,
                out_ch,
                k,
                stride,
                padding,
                out_hw,
                in_magnitude,
                is_mac: false,
            },
            weight,
            bias: None,
            bn: Some((gamma, beta, bn_idx)),
        });
        self.conv_names.push(String::from(name));
        self.convs.len() - 1
    }

    fn block(&mut self, name: &str, units: Vec<usize>, identity: Vec<usize>, first_layer: bool) -> usize {
        let slot = self.slots;
        self.slots += 1;
        self.blocks.push(Block {
            units,
            identity,
            first_layer,
            state_slot: slot,
        });
        self.block_names.push(String::from(name));
        self.blocks.len() - 1
    }

    /// conv + BN + neuron with a single input edge.
    #[allow(clippy::too_many_arguments)]
    fn spiking_block(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        in_hw: (usize, usize),
        in_magnitude: f64,
        first_layer: bool,
    ) -> usize {
        let unit = self.conv_bn(name, in_ch, out_ch, k, stride, in_hw, in_magnitude);
        self.block(name, vec![unit], Vec::new(), first_layer)
    }
}

/// Build a parameterized graph; deterministic in the seed.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<NetworkGraph> {
    spec.validate()?;
    let surrogate = SurrogateSpec::new(spec.neuron.surrogate_b)?;
    let mut b = Builder {
        freeze_bn_affine: spec.freeze_bn_affine,
        params: Vec::new(),
        bn_states: Vec::new(),
        bn_names: Vec::new(),
        convs: Vec::new(),
        conv_names: Vec::new(),
        blocks: Vec::new(),
        block_names: Vec::new(),
        slots: 0,
        rng: Rng::new(seed ^ 0x5f1e_f9a1),
    };
    let ics = spec.initial_channels;
    let (h, w) = spec.input_hw;
    let mut shape_table = Vec::new();

    // Stems: two stride-2 spiking blocks.
    let stem0_hw = (h / 2, w / 2);
    let stem0 = b.spiking_block(
        "stem0",
        spec.frames_per_stack,
        ics,
        3,
        2,
        (h, w),
        1.0,
        true,
    );
    shape_table.push((String::from("stem0"), [ics, stem0_hw.0, stem0_hw.1]));
    let stem1_hw = (h / 4, w / 4);
    let stem1 = b.spiking_block("stem1", ics, 2 * ics, 3, 2, stem0_hw, 1.0, false);
    shape_table.push((String::from("stem1"), [2 * ics, stem1_hw.0, stem1_hw.1]));

    // Backbone cells.
    let stage_channels = spec.stage_channels();
    let mut cells = Vec::new();
    let mut prev = (2 * ics, stem1_hw); // stem1
    let mut prev_prev = (ics, stem0_hw); // stem0
    let mut cell_hw = stem1_hw;
    let mut cell_idx = 0usize;
    let mut stage_last_cells = Vec::new();
    for (si, stage) in spec.stage_plan.iter().enumerate() {
        let ch = stage_channels[si];
        if ch * NODE_WIDTH_NUM % NODE_WIDTH_DEN != 0 {
            return Err(Error::Config(format!(
                "stage {si} channels {ch} are not compatible with the {NODE_WIDTH_NUM}/{NODE_WIDTH_DEN} node width"
            )));
        }
        let node_ch = ch * NODE_WIDTH_NUM / NODE_WIDTH_DEN;
        for ci in 0..stage.cells {
            if stage.downsample && ci == 0 {
                cell_hw = (cell_hw.0 / 2, cell_hw.1 / 2);
            }
            let name = format!("cell{cell_idx}");
            let stride_of = |hw: (usize, usize)| -> Result<usize> {
                match hw.0 / cell_hw.0 {
                    1 => Ok(1),
                    2 => Ok(2),
                    r => Err(Error::Config(format!(
                        "cell {cell_idx}: input at {r}x the cell resolution is unsupported"
                    ))),
                }
            };
            let sa = stride_of(prev.1)?;
            let sb = stride_of(prev_prev.1)?;
            let align_a = b.spiking_block(
                &format!("{name}.align_a"),
                prev.0,
                node_ch,
                1,
                sa,
                prev.1,
                1.0,
                false,
            );
            let align_b = b.spiking_block(
                &format!("{name}.align_b"),
                prev_prev.0,
                node_ch,
                1,
                sb,
                prev_prev.1,
                1.0,
                false,
            );
            // Nodes 0 and 1 read both aligned inputs through their own
            // 3x3 edges; node 2 reads nodes 0 and 1.
            let node = |b: &mut Builder, node_name: &str, identity: Vec<usize>| {
                let ua = b.conv_bn(
                    &format!("{name}.{node_name}.edge_a"),
                    node_ch,
                    node_ch,
                    3,
                    1,
                    cell_hw,
                    1.0,
                );
                let ub = b.conv_bn(
                    &format!("{name}.{node_name}.edge_b"),
                    node_ch,
                    node_ch,
                    3,
                    1,
                    cell_hw,
                    1.0,
                );
                b.block(&format!("{name}.{node_name}"), vec![ua, ub], identity, false)
            };
            // Identity edges keep a conv-free path through every cell, the
            // usual stabilizer for training deep spiking stacks.
            let node0 = node(&mut b, "node0", vec![0]);
            let node1 = node(&mut b, "node1", vec![1]);
            let node2 = node(&mut b, "node2", vec![0, 1]);
            // Converge: sum of the three node spike maps (values 0..3),
            // re-thresholded to the cell width by a 1x1 spiking block.
            let out = b.spiking_block(
                &format!("{name}.out"),
                node_ch,
                ch,
                1,
                1,
                cell_hw,
                3.0,
                false,
            );
            cells.push(CellWiring {
                align_a,
                align_b,
                node0,
                node1,
                node2,
                out,
            });
            shape_table.push((name, [ch, cell_hw.0, cell_hw.1]));
            prev_prev = prev;
            prev = (ch, cell_hw);
            if ci == stage.cells - 1 {
                stage_last_cells.push((cell_idx, ch, cell_hw));
            }
            cell_idx += 1;
        }
    }

    // Pyramid taps: last cells of the final three stages.
    let n_stages = stage_last_cells.len();
    let tap1 = stage_last_cells[n_stages - 3]; // highest resolution tap
    let tap2 = stage_last_cells[n_stages - 2];
    let tap3 = stage_last_cells[n_stages - 1]; // coarsest tap
    let p3_ch = tap3.1 / 2;
    let p2_ch = tap2.1 / 2;
    let p1_ch = tap1.1 / 2;
    let p3 = b.spiking_block("fpn.p3", tap3.1, p3_ch, 1, 1, tap3.2, 1.0, false);
    let p2 = b.spiking_block(
        "fpn.p2",
        p3_ch + tap2.1,
        p2_ch,
        1,
        1,
        tap2.2,
        1.0,
        false,
    );
    let p1 = b.spiking_block(
        "fpn.p1",
        p2_ch + tap1.1,
        p1_ch,
        1,
        1,
        tap1.2,
        1.0,
        false,
    );
    shape_table.push((String::from("p1"), [p1_ch, tap1.2 .0, tap1.2 .1]));
    shape_table.push((String::from("p2"), [p2_ch, tap2.2 .0, tap2.2 .1]));
    shape_table.push((String::from("p3"), [p3_ch, tap3.2 .0, tap3.2 .1]));

    // Heads: two 3x3 spiking blocks then a plain 1x1 conv with bias whose
    // confidence channels start at -2 so the detector begins near-silent.
    let head_ch = spec.head_channels();
    let mut head_blocks = [(0usize, 0usize, 0usize); 3];
    for (d, (p_block, p_ch, hw)) in [
        (p1, p1_ch, tap1.2),
        (p2, p2_ch, tap2.2),
        (p3, p3_ch, tap3.2),
    ]
    .iter()
    .enumerate()
    {
        let name = format!("head{}", d + 1);
        let b1 = b.spiking_block(&format!("{name}.block1"), *p_ch, 2 * p_ch, 3, 1, *hw, 1.0, false);
        let b2 = b.spiking_block(
            &format!("{name}.block2"),
            2 * p_ch,
            2 * p_ch,
            3,
            1,
            *hw,
            1.0,
            false,
        );
        let weight = b.conv_weight(&format!("{name}.out"), head_ch, 2 * p_ch, 1);
        let mut bias_init = Tensor::zeros(&[head_ch]);
        for a in 0..spec.num_anchors {
            bias_init.data_mut()[a * (spec.num_classes + 5) + 4] = -2.0;
        }
        let bias = b.param(format!("{name}.out.bias"), bias_init, None);
        b.convs.push(ConvUnit {
            desc: ConvDesc {
                in_ch: 2 * p_ch,
                out_ch: head_ch,
                k: 1,
                stride: 1,
                padding: 0,
                out_hw: *hw,
                in_magnitude: 1.0,
                is_mac: true,
            },
            weight,
            bias: Some(bias),
            bn: None,
        });
        b.conv_names.push(format!("{name}.out"));
        let out_conv = b.convs.len() - 1;
        head_blocks[d] = (b1, b2, out_conv);
        shape_table.push((format!("d{}", d + 1), [head_ch, hw.0, hw.1]));
        let _ = p_block;
    }

    // Shared adaptive-threshold scalars, present only when the first layer
    // is adaptive.
    let (tau_a_param, beta_param) = if spec.first_layer_neuron == NeuronKind::Alif {
        let tau_a = b.param(
            String::from("alif.tau_a"),
            Tensor::scalar(spec.neuron.tau_a_init),
            Some(spec.neuron.tau_a_bounds),
        );
        let beta = if spec.neuron.train_beta {
            Some(b.param(
                String::from("alif.beta"),
                Tensor::scalar(spec.neuron.alif_beta),
                Some((0.0, f64::INFINITY)),
            ))
        } else {
            None
        };
        (Some(tau_a), beta)
    } else {
        (None, None)
    };

    Ok(NetworkGraph {
        spec: spec.clone(),
        params: b.params,
        bn_states: b.bn_states,
        bn_names: b.bn_names,
        convs: b.convs,
        conv_names: b.conv_names,
        blocks: b.blocks,
        block_names: b.block_names,
        cells,
        stem_blocks: [stem0, stem1],
        fpn_blocks: [p1, p2, p3],
        head_blocks,
        taps: [tap1.0, tap2.0, tap3.0],
        n_state_slots: b.slots,
        tau_a_param,
        beta_param,
        shape_table,
        surrogate,
        trace: false,
        last_trace: Vec::new(),
    })
}

impl NetworkGraph {
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].value
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Deep copy of the graph (parameters and running statistics).
    pub fn snapshot(&self) -> NetworkGraph {
        self.clone_graph()
    }

    /// Exact count of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Closed-form (channels, height, width) for every named layer output.
    pub fn layer_shape_table(&self) -> &[(String, [usize; 3])] {
        &self.shape_table
    }

    pub fn conv_names(&self) -> &[String] {
        &self.conv_names
    }

    /// Per conv layer: (name, dense additions or MACs, is_mac).
    pub fn conv_cost_table(&self) -> Vec<(String, u64, bool)> {
        self.convs
            .iter()
            .zip(&self.conv_names)
            .map(|(u, n)| (n.clone(), u.desc.dense_additions(), u.desc.is_mac))
            .collect()
    }

    pub fn spike_block_names(&self) -> &[String] {
        &self.block_names
    }

    /// State slot of the first spiking layer (stem0).
    pub fn first_layer_slot(&self) -> usize {
        self.blocks[self.stem_blocks[0]].state_slot
    }

    pub fn tau_a(&self) -> Option<f64> {
        self.tau_a_param.map(|i| self.params[i].value.data()[0])
    }

    /// Named tensors for checkpointing: parameters plus BN running stats.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for p in &self.params {
            out.push((p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()));
        }
        for (st, name) in self.bn_states.iter().zip(&self.bn_names) {
            out.push((
                format!("{name}.running_mean"),
                vec![st.running_mean.len()],
                st.running_mean.clone(),
            ));
            out.push((
                format!("{name}.running_var"),
                vec![st.running_var.len()],
                st.running_var.clone(),
            ));
        }
        out
    }

    /// Load named tensors saved by `named_tensors`. Unknown names error;
    /// missing parameters keep their initialization.
    pub fn load_named_tensors(&mut self, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        use alloc::collections::BTreeMap;
        let mut by_name: BTreeMap<String, usize> = BTreeMap::new();
        for (i, p) in self.params.iter().enumerate() {
            by_name.insert(p.name.clone(), i);
        }
        let mut bn_by_name: BTreeMap<String, usize> = BTreeMap::new();
        for (i, n) in self.bn_names.iter().enumerate() {
            bn_by_name.insert(format!("{n}.running_mean"), i);
            bn_by_name.insert(format!("{n}.running_var"), i);
        }
        for (name, shape, data) in tensors {
            if let Some(&pi) = by_name.get(name) {
                if self.params[pi].value.shape() != &shape[..] {
                    return Err(Error::Shape(format!(
                        "tensor {name} has shape {shape:?}, expected {:?}",
                        self.params[pi].value.shape()
                    )));
                }
                self.params[pi].value = Tensor::from_vec(shape, data.clone())?;
            } else if let Some(&bi) = bn_by_name.get(name) {
                let st = &mut self.bn_states[bi];
                if data.len() != st.running_mean.len() {
                    return Err(Error::Shape(format!("tensor {name} length mismatch")));
                }
                if name.ends_with(".running_mean") {
                    st.running_mean = data.clone();
                } else {
                    st.running_var = data.clone();
                }
                st.initialized = true;
            } else {
                return Err(Error::Validation(format!("unknown tensor {name} in checkpoint")));
            }
        }
        Ok(())
    }

    /// Fold every conv+BN pair into conv weight plus bias (eval graphs).
    pub fn fold_bn(&self) -> Result<NetworkGraph> {
        let mut folded = self.clone_graph();
        for unit in 0..folded.convs.len() {
            let Some((gi, bi, si)) = folded.convs[unit].bn else { continue };
            let stats = &folded.bn_states[si];
            if !stats.initialized {
                return Err(Error::Config(String::from(
                    "cannot fold batch norm before running stats exist",
                )));
            }
            let gamma = folded.params[gi].value.clone();
            let beta = folded.params[bi].value.clone();
            let w = folded.params[folded.convs[unit].weight].value.clone();
            let (w2, b2) = crate::autograd::fold_bn_into_conv(&w, None, &gamma, &beta, stats)?;
            folded.params[folded.convs[unit].weight].value = w2;
            let name = format!("{}.folded_bias", folded.conv_names[unit]);
            folded.params.push(Param {
                name,
                value: b2,
                clamp: None,
                frozen: false,
            });
            folded.convs[unit].bias = Some(folded.params.len() - 1);
            folded.convs[unit].bn = None;
        }
        Ok(folded)
    }

    fn clone_graph(&self) -> NetworkGraph {
        NetworkGraph {
            spec: self.spec.clone(),
            params: self.params.clone(),
            bn_states: self.bn_states.clone(),
            bn_names: self.bn_names.clone(),
            convs: self.convs.clone(),
            conv_names: self.conv_names.clone(),
            blocks: self.blocks.clone(),
            block_names: self.block_names.clone(),
            cells: self.cells.clone(),
            stem_blocks: self.stem_blocks,
            fpn_blocks: self.fpn_blocks,
            head_blocks: self.head_blocks,
            taps: self.taps,
            n_state_slots: self.n_state_slots,
            tau_a_param: self.tau_a_param,
            beta_param: self.beta_param,
            shape_table: self.shape_table.clone(),
            surrogate: self.surrogate,
            trace: false,
            last_trace: Vec::new(),
        }
    }

    /// Unroll the network over the time steps of a batched stack tensor.
    ///
    /// `steps[s]` is the step-s input of shape [N, Cf, H, W]; neuron state
    /// persists across steps and is zero-initialized per call. Only the
    /// final step's head outputs are returned.
    pub fn forward_batch(
        &mut self,
        tape: &mut Tape,
        steps: &[Tensor],
        mode: Mode,
    ) -> Result<ForwardOutput> {
        if steps.len() != self.spec.time_steps {
            return Err(Error::Shape(format!(
                "expected {} time steps, got {}",
                self.spec.time_steps,
                steps.len()
            )));
        }
        for t in steps {
            let (_, c, h, w) = t.dims4()?;
            if c != self.spec.frames_per_stack || (h, w) != self.spec.input_hw {
                return Err(Error::Shape(format!(
                    "step tensor {:?} does not match spec input {}x{}x{:?}",
                    t.shape(),
                    self.spec.frames_per_stack,
                    self.spec.input_hw.0,
                    self.spec.input_hw
                )));
            }
        }
        let requires_grad = mode == Mode::Train;
        let param_vals: Vec<Val> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect();
        let mut states: Vec<Option<NeuronVals>> = (0..self.n_state_slots).map(|_| None).collect();
        let mut record = FiringRecord::new(self.convs.len(), self.n_state_slots, steps.len());
        self.last_trace.clear();
        let mut heads_final = None;

        for (step, x) in steps.iter().enumerate() {
            let input = tape.leaf(x.clone(), false);
            let s0 = self.run_block(
                tape,
                self.stem_blocks[0],
                &[input],
                &param_vals,
                &mut states,
                mode,
                step,
                &mut record,
            )?;
            let s1 = self.run_block(
                tape,
                self.stem_blocks[1],
                &[s0],
                &param_vals,
                &mut states,
                mode,
                step,
                &mut record,
            )?;
            let mut prev_prev = s0;
            let mut prev = s1;
            let mut tap_vals: [Option<Val>; 3] = [None; 3];
            let cells = self.cells.clone();
            for (ci, cell) in cells.iter().enumerate() {
                let aa = self.run_block(
                    tape,
                    cell.align_a,
                    &[prev],
                    &param_vals,
                    &mut states,
                    mode,
                    step,
                    &mut record,
                )?;
                let ab = self.run_block(
                    tape,
                    cell.align_b,
                    &[prev_prev],
                    &param_vals,
                    &mut states,
                    mode,
                    step,
                    &mut record,
                )?;
                let n0 = self.run_block(
                    tape,
                    cell.node0,
                    &[aa, ab],
                    &param_vals,
                    &mut states,
                    mode,
                    step,
                    &mut record,
                )?;
                let n1 = self.run_block(
                    tape,
                    cell.node1,
                    &[aa, ab],
                    &param_vals,
                    &mut states,
                    mode,
                    step,
                    &mut record,
                )?;
                let n2 = self.run_block(
                    tape,
                    cell.node2,
                    &[n0, n1],
                    &param_vals,
                    &mut states,
                    mode,
                    step,
                    &mut record,
                )?;
                let s01 = tape.add(n0, n1)?;
                let sum = tape.add(s01, n2)?;
                let out = self.run_block(
                    tape,
                    cell.out,
                    &[sum],
                    &param_vals,
                    &mut states,
                    mode,
                    step,
                    &mut record,
                )?;
                prev_prev = prev;
                prev = out;
                for (ti, tap) in self.taps.iter().enumerate() {
                    if *tap == ci {
                        tap_vals[ti] = Some(out);
                    }
                }
            }
            let c1 = tap_vals[0].expect("tap 1 missing");
            let c2 = tap_vals[1].expect("tap 2 missing");
            let c3 = tap_vals[2].expect("tap 3 missing");
            let (p1v, p2v, p3v) = self.pyramid_fuse_traced(
                tape,
                c3,
                c2,
                c1,
                &param_vals,
                &mut states,
                mode,
                step,
                &mut record,
            )?;

            let mut step_heads = [p1v; 3];
            for (d, p) in [p1v, p2v, p3v].iter().enumerate() {
                let (b1, b2, out_conv) = self.head_blocks[d];
                let h1 = self.run_block(
                    tape,
                    b1,
                    &[*p],
                    &param_vals,
                    &mut states,
                    mode,
                    step,
                    &mut record,
                )?;
                let h2 = self.run_block(
                    tape,
                    b2,
                    &[h1],
                    &param_vals,
                    &mut states,
                    mode,
                    step,
                    &mut record,
                )?;
                step_heads[d] =
                    self.run_conv(tape, out_conv, h2, &param_vals, mode, step, &mut record)?;
            }
            heads_final = Some(step_heads);
        }
        Ok(ForwardOutput {
            heads: heads_final.expect("at least one time step"),
            record,
            param_vals,
        })
    }

    /// Top-down pyramid fusion for one step: p3 from the coarsest tap, then
    /// upsample-concat-respike toward the finer taps.
    #[allow(clippy::too_many_arguments)]
    fn pyramid_fuse_traced(
        &mut self,
        tape: &mut Tape,
        c_coarse: Val,
        c_mid: Val,
        c_fine: Val,
        param_vals: &[Val],
        states: &mut Vec<Option<NeuronVals>>,
        mode: Mode,
        step: usize,
        record: &mut FiringRecord,
    ) -> Result<(Val, Val, Val)> {
        let p3 = self.run_block(
            tape,
            self.fpn_blocks[2],
            &[c_coarse],
            param_vals,
            states,
            mode,
            step,
            record,
        )?;
        let up3 = tape.upsample_nearest_x2(p3)?;
        let cat2 = tape.concat_channels(up3, c_mid)?;
        let p2 = self.run_block(
            tape,
            self.fpn_blocks[1],
            &[cat2],
            param_vals,
            states,
            mode,
            step,
            record,
        )?;
        let up2 = tape.upsample_nearest_x2(p2)?;
        let cat1 = tape.concat_channels(up2, c_fine)?;
        let p1 = self.run_block(
            tape,
            self.fpn_blocks[0],
            &[cat1],
            param_vals,
            states,
            mode,
            step,
            record,
        )?;
        Ok((p1, p2, p3))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_conv(
        &mut self,
        tape: &mut Tape,
        unit_idx: usize,
        input: Val,
        param_vals: &[Val],
        mode: Mode,
        step: usize,
        record: &mut FiringRecord,
    ) -> Result<Val> {
        let unit = self.convs[unit_idx];
        record.conv_density[unit_idx][step] =
            tape.value(input).mean_abs() / unit.desc.in_magnitude;
        let w = param_vals[unit.weight];
        let bias = unit.bias.map(|b| param_vals[b]);
        let mut v = tape.conv2d(input, w, bias, unit.desc.stride, unit.desc.padding)?;
        if let Some((g, be, si)) = unit.bn {
            v = tape.batch_norm(v, param_vals[g], param_vals[be], &mut self.bn_states[si], mode)?;
        }
        Ok(v)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_block(
        &mut self,
        tape: &mut Tape,
        block_idx: usize,
        inputs: &[Val],
        param_vals: &[Val],
        states: &mut Vec<Option<NeuronVals>>,
        mode: Mode,
        step: usize,
        record: &mut FiringRecord,
    ) -> Result<Val> {
        let block = self.blocks[block_idx].clone();
        debug_assert_eq!(block.units.len(), inputs.len());
        // Per-edge currents aggregate on the membrane before spiking.
        let mut current: Option<Val> = None;
        for (unit, input) in block.units.iter().zip(inputs) {
            let c = self.run_conv(tape, *unit, *input, param_vals, mode, step, record)?;
            current = Some(match current {
                None => c,
                Some(acc) => tape.add(acc, c)?,
            });
        }
        let mut current = current.expect("block has at least one edge");
        for idx in &block.identity {
            current = tape.add(current, inputs[*idx])?;
        }
        let kind = if block.first_layer {
            self.spec.first_layer_neuron
        } else {
            self.spec.body_neuron
        };
        let hyper = self.spec.neuron;
        let tau = match kind {
            NeuronKind::Binary => 0.0,
            _ => hyper.tau,
        };

        let shape = tape.value(current).shape().to_vec();
        let (u_prev, y_prev, a_prev) = match &states[block.state_slot] {
            Some(s) => (s.u, s.y, s.a),
            None => {
                let z1 = tape.leaf(Tensor::zeros(&shape), false);
                let z2 = tape.leaf(Tensor::zeros(&shape), false);
                let za = if kind == NeuronKind::Alif {
                    Some(tape.leaf(Tensor::zeros(&shape), false))
                } else {
                    None
                };
                (z1, z2, za)
            }
        };

        let u = tape.lif_membrane(u_prev, y_prev, current, tau)?;
        let (y, a_new) = match kind {
            NeuronKind::Alif => {
                let tau_a = param_vals[self.tau_a_param.expect("alif requires tau_a")];
                let a = tape.alif_trace(a_prev.expect("alif state"), y_prev, tau_a)?;
                let th = match self.beta_param {
                    Some(bp) => {
                        let scaled = tape.scale_by_scalar(a, param_vals[bp])?;
                        tape.affine(scaled, 1.0, hyper.u_th)?
                    }
                    None => tape.affine(a, hyper.alif_beta, hyper.u_th)?,
                };
                let y = tape.spike(u, SpikeThreshold::Tensor(th), self.surrogate)?;
                (y, Some(a))
            }
            _ => {
                let y = tape.spike(u, SpikeThreshold::Const(hyper.u_th), self.surrogate)?;
                (y, None)
            }
        };
        record.spike_rate[block.state_slot][step] = tape.value(y).density();
        record.spike_numel[block.state_slot] = tape.value(y).numel();
        if self.trace {
            self.last_trace.push((
                format!("{}@{step}", self.block_names[block_idx]),
                tape.value(y).clone(),
            ));
        }
        states[block.state_slot] = Some(NeuronVals { u, y, a: a_new });
        Ok(y)
    }

    /// Single-stack convenience wrapper: returns the final-step head tensors
    /// and the firing record.
    pub fn forward(
        &mut self,
        stack: &FrameStack,
        mode: Mode,
    ) -> Result<([Tensor; 3], FiringRecord)> {
        let steps = stack_step_tensors(core::slice::from_ref(&stack.clone()), &self.spec)?;
        let mut tape = Tape::new();
        let out = self.forward_batch(&mut tape, &steps, mode)?;
        let heads = [
            tape.value(out.heads[0]).clone(),
            tape.value(out.heads[1]).clone(),
            tape.value(out.heads[2]).clone(),
        ];
        Ok((heads, out.record))
    }
}

/// Assemble per-step batch tensors [N, Cf, H, W] from frame stacks.
pub fn stack_step_tensors(stacks: &[FrameStack], spec: &NetworkSpec) -> Result<Vec<Tensor>> {
    if stacks.is_empty() {
        return Err(Error::Shape(String::from("empty batch")));
    }
    let n = stacks.len();
    let (s, c, h, w) = stacks[0].shape();
    if s != spec.time_steps
        || c != spec.frames_per_stack
        || (h, w) != (spec.input_hw.0, spec.input_hw.1)
    {
        return Err(Error::Shape(format!(
            "stack shape {:?} does not match network spec (S={}, C={}, {}x{})",
            stacks[0].shape(),
            spec.time_steps,
            spec.frames_per_stack,
            spec.input_hw.0,
            spec.input_hw.1
        )));
    }
    let mut out = Vec::with_capacity(s);
    for step in 0..s {
        let mut data = Vec::with_capacity(n * c * h * w);
        for st in stacks {
            if st.shape() != (s, c, h, w) {
                return Err(Error::Shape(String::from("ragged stack shapes in batch")));
            }
            data.extend(st.stack_values(step));
        }
        out.push(Tensor::from_vec(&[n, c, h, w], data)?);
    }
    Ok(out)
}
