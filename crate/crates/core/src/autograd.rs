//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! The op set is the minimum needed to express the spiking detector and
//! train it through time: 1x1/3x3 convolution, batch norm, nearest x2
//! upsampling, channel concat, elementwise arithmetic, the fused membrane
//! update, the adaptive-threshold trace, and spike generation with the
//! Dspike surrogate standing in for the Heaviside derivative.
//!
//! Ops execute eagerly and append one node per output; `backward` walks the
//! node list in reverse, accumulating gradients additively wherever a value
//! feeds several consumers. All loops have a fixed iteration order and the
//! parallel sites write disjoint chunks, so forward values and gradients are
//! bit-identical across runs and thread counts.
//!
//! A tape can run in soft mode, which replaces the hard spike forward with
//! the surrogate itself. That exists purely so end-to-end finite-difference
//! checks can see a differentiable network; training always uses hard mode.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::par;
use crate::spiking::{dspike, dspike_derivative, SurrogateSpec};
use crate::tensor::Tensor;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

/// Train/eval switch for batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub initialized: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl BnStats {
    pub fn new(channels: usize) -> BnStats {
        BnStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: false,
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Threshold against which a spike fires.
#[derive(Debug, Clone, Copy)]
pub enum SpikeThreshold {
    Const(f64),
    Tensor(Val),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Val,
        weight: Val,
        bias: Option<Val>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Val,
        gamma: Val,
        beta: Val,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Upsample2x {
        input: Val,
    },
    Concat {
        a: Val,
        b: Val,
    },
    Add {
        a: Val,
        b: Val,
    },
    Mul {
        a: Val,
        b: Val,
    },
    Affine {
        input: Val,
        k: f64,
    },
    ScaleByScalar {
        input: Val,
        scalar: Val,
    },
    LifMembrane {
        u_prev: Val,
        y_prev: Val,
        current: Val,
        tau: f64,
    },
    AlifTrace {
        a_prev: Val,
        y_prev: Val,
        tau_a: Val,
    },
    Spike {
        input: Val,
        threshold: SpikeThreshold,
        surrogate: SurrogateSpec,
    },
}

struct Node {
    out: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by tape value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Val) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Val) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recording tape.
pub struct Tape {
    nodes: Vec<Node>,
    /// Replace hard spikes by the surrogate in forward (validation only).
    pub soft_spikes: bool,
    /// Scan every op output for non-finite values.
    pub check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            soft_spikes: false,
            check_finite: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &Tensor {
        &self.nodes[v.0].out
    }

    fn needs(&self, v: Val) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, out: Tensor, op: Op, needs_grad: bool) -> Result<Val> {
        if self.check_finite && !out.is_finite() {
            return Err(Error::NonFinite(alloc::format!(
                "op {} produced a non-finite value",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { out, op, needs_grad });
        Ok(Val(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Val {
        self.nodes.push(Node {
            out: tensor,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Val(self.nodes.len() - 1)
    }

    /// Cross-correlation with square kernels of size 1 or 3.
    pub fn conv2d(
        &mut self,
        input: Val,
        weight: Val,
        bias: Option<Val>,
        stride: usize,
        padding: usize,
    ) -> Result<Val> {
        let (n, ci, h, w) = self.value(input).dims4()?;
        let (co, wci, kh, kw) = self.value(weight).dims4()?;
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::Config(alloc::format!(
                "kernel {kh}x{kw} unsupported; only 1x1 and 3x3"
            )));
        }
        if wci != ci {
            return Err(Error::Shape(alloc::format!(
                "conv channel mismatch: input has {ci}, weight expects {wci}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config(String::from("stride must be >= 1")));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != co {
                return Err(Error::Shape(String::from("bias length must equal output channels")));
            }
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(String::from("input smaller than kernel")));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;

        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let b = bias.map(|b| self.value(b).data());
            let sample_out = co * ho * wo;
            let sample_in = ci * h * w;
            par::for_each_chunk_mut(out.data_mut(), sample_out, |bn, chunk| {
                let xs = &x[bn * sample_in..(bn + 1) * sample_in];
                conv_sample_forward(chunk, xs, wt, b, co, ci, h, w, kh, stride, padding, ho, wo);
            });
        }
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            needs,
        )
    }

    /// Batch normalization over (N, H, W) per channel.
    pub fn batch_norm(
        &mut self,
        input: Val,
        gamma: Val,
        beta: Val,
        stats: &mut BnStats,
        mode: Mode,
    ) -> Result<Val> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(String::from("batch norm scale/shift must match channels")));
        }
        if stats.running_mean.len() != c {
            return Err(Error::Shape(String::from("batch norm running stats must match channels")));
        }
        let cnt = n * h * w;
        let (mean, var) = match mode {
            Mode::Train => {
                if cnt == 0 {
                    return Err(Error::Shape(String::from("batch norm over empty batch")));
                }
                let x = self.value(input).data();
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                let plane = h * w;
                for ch in 0..c {
                    let mut s = 0.0;
                    for bn in 0..n {
                        let base = (bn * c + ch) * plane;
                        for v in &x[base..base + plane] {
                            s += *v;
                        }
                    }
                    let m = s / cnt as f64;
                    let mut sq = 0.0;
                    for bn in 0..n {
                        let base = (bn * c + ch) * plane;
                        for v in &x[base..base + plane] {
                            let d = *v - m;
                            sq += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / cnt as f64;
                }
                // Running stats use the unbiased variance, as is conventional.
                let unbias = if cnt > 1 { cnt as f64 / (cnt - 1) as f64 } else { 1.0 };
                let m = stats.momentum;
                for ch in 0..c {
                    stats.running_mean[ch] = (1.0 - m) * stats.running_mean[ch] + m * mean[ch];
                    stats.running_var[ch] = (1.0 - m) * stats.running_var[ch] + m * var[ch] * unbias;
                }
                stats.initialized = true;
                (mean, var)
            }
            Mode::Eval => {
                if !stats.initialized {
                    return Err(Error::Config(String::from(
                        "batch norm eval requested before any training step initialized running stats",
                    )));
                }
                (stats.running_mean.clone(), stats.running_var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + stats.eps)).collect();

        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let x = self.value(input).data();
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            let plane = h * w;
            par::for_each_chunk_mut(out.data_mut(), plane, |idx, chunk| {
                let ch = idx % c;
                let base = idx * plane;
                for (i, o) in chunk.iter_mut().enumerate() {
                    *o = (x[base + i] - mean[ch]) * inv_std[ch] * g[ch] + b[ch];
                }
            });
        }
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train: mode == Mode::Train,
            },
            needs,
        )
    }

    /// Nearest-neighbor x2 upsampling.
    pub fn upsample_nearest_x2(&mut self, input: Val) -> Result<Val> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        {
            let x = self.value(input).data();
            let plane = 4 * h * w;
            par::for_each_chunk_mut(out.data_mut(), plane, |idx, chunk| {
                let base = idx * h * w;
                for oy in 0..2 * h {
                    let iy = oy / 2;
                    for ox in 0..2 * w {
                        chunk[oy * 2 * w + ox] = x[base + iy * w + ox / 2];
                    }
                }
            });
        }
        let needs = self.needs(input);
        self.push(out, Op::Upsample2x { input }, needs)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: Val, b: Val) -> Result<Val> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::Shape(alloc::format!(
                "concat spatial mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = Tensor::zeros(&[na, ca + cb, ha, wa]);
        {
            let xa = self.value(a).data();
            let xb = self.value(b).data();
            let plane = ha * wa;
            let od = out.data_mut();
            for n in 0..na {
                let dst = n * (ca + cb) * plane;
                od[dst..dst + ca * plane]
                    .copy_from_slice(&xa[n * ca * plane..(n + 1) * ca * plane]);
                od[dst + ca * plane..dst + (ca + cb) * plane]
                    .copy_from_slice(&xb[n * cb * plane..(n + 1) * cb * plane]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat { a, b }, needs)
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn binary_elementwise(
        &mut self,
        a: Val,
        b: Val,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Val> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(alloc::format!(
                "elementwise shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, op, needs)
    }

    /// k * x + c with compile-time constants.
    pub fn affine(&mut self, input: Val, k: f64, c: f64) -> Result<Val> {
        let data: Vec<f64> = self.value(input).data().iter().map(|x| k * x + c).collect();
        let out = Tensor::from_vec(self.value(input).shape(), data)?;
        let needs = self.needs(input);
        self.push(out, Op::Affine { input, k }, needs)
    }

    /// x * p where p is a trainable scalar held in a [1] tensor.
    pub fn scale_by_scalar(&mut self, input: Val, scalar: Val) -> Result<Val> {
        if self.value(scalar).numel() != 1 {
            return Err(Error::Shape(String::from("scalar operand must have exactly one element")));
        }
        let p = self.value(scalar).data()[0];
        let data: Vec<f64> = self.value(input).data().iter().map(|x| p * x).collect();
        let out = Tensor::from_vec(self.value(input).shape(), data)?;
        let needs = self.needs(input) || self.needs(scalar);
        self.push(out, Op::ScaleByScalar { input, scalar }, needs)
    }

    /// Fused membrane update u = tau * u_prev * (1 - y_prev) + current.
    pub fn lif_membrane(&mut self, u_prev: Val, y_prev: Val, current: Val, tau: f64) -> Result<Val> {
        let shape = self.value(current).shape().to_vec();
        if self.value(u_prev).shape() != shape || self.value(y_prev).shape() != shape {
            return Err(Error::Shape(String::from("membrane state shapes must match the input current")));
        }
        let up = self.value(u_prev).data();
        let yp = self.value(y_prev).data();
        let cur = self.value(current).data();
        let data: Vec<f64> = (0..cur.len())
            .map(|i| tau * up[i] * (1.0 - yp[i]) + cur[i])
            .collect();
        let out = Tensor::from_vec(&shape, data)?;
        let needs = self.needs(u_prev) || self.needs(y_prev) || self.needs(current);
        self.push(
            out,
            Op::LifMembrane {
                u_prev,
                y_prev,
                current,
                tau,
            },
            needs,
        )
    }

    /// Threshold trace a = tau_a * a_prev + y_prev with trainable tau_a.
    pub fn alif_trace(&mut self, a_prev: Val, y_prev: Val, tau_a: Val) -> Result<Val> {
        if self.value(a_prev).shape() != self.value(y_prev).shape() {
            return Err(Error::Shape(String::from("trace state shapes must match")));
        }
        if self.value(tau_a).numel() != 1 {
            return Err(Error::Shape(String::from("tau_a must be a scalar")));
        }
        let t = self.value(tau_a).data()[0];
        let ap = self.value(a_prev).data();
        let yp = self.value(y_prev).data();
        let data: Vec<f64> = (0..ap.len()).map(|i| t * ap[i] + yp[i]).collect();
        let out = Tensor::from_vec(self.value(a_prev).shape(), data)?;
        let needs = self.needs(a_prev) || self.needs(y_prev) || self.needs(tau_a);
        self.push(
            out,
            Op::AlifTrace {
                a_prev,
                y_prev,
                tau_a,
            },
            needs,
        )
    }

    /// Spike generation y = H(u - threshold), H(0) = 1. Backward multiplies
    /// by Dspike'(clamp(u - threshold + 1/2, 0, 1)). In soft mode the
    /// forward emits the surrogate value itself.
    pub fn spike(
        &mut self,
        input: Val,
        threshold: SpikeThreshold,
        surrogate: SurrogateSpec,
    ) -> Result<Val> {
        let shape = self.value(input).shape().to_vec();
        if let SpikeThreshold::Tensor(t) = threshold {
            if self.value(t).shape() != shape {
                return Err(Error::Shape(String::from("threshold tensor shape must match input")));
            }
        }
        let soft = self.soft_spikes;
        let data: Vec<f64> = {
            let u = self.value(input).data();
            let th_const = match threshold {
                SpikeThreshold::Const(c) => Some(c),
                SpikeThreshold::Tensor(_) => None,
            };
            let th_data = match threshold {
                SpikeThreshold::Tensor(t) => Some(self.value(t).data()),
                SpikeThreshold::Const(_) => None,
            };
            (0..u.len())
                .map(|i| {
                    let th = th_const.unwrap_or_else(|| th_data.unwrap()[i]);
                    let v = u[i] - th;
                    if soft {
                        dspike(v + 0.5, &surrogate)
                    } else if v >= 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let out = Tensor::from_vec(&shape, data)?;
        let needs = self.needs(input)
            || matches!(threshold, SpikeThreshold::Tensor(t) if self.needs(t));
        self.push(
            out,
            Op::Spike {
                input,
                threshold,
                surrogate,
            },
            needs,
        )
    }

    /// Reverse pass from the given seed gradients.
    pub fn backward(&self, seeds: &[(Val, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(Error::Shape(String::from("seed gradient shape mismatch")));
            }
            accumulate(&mut grads, *v, g.data(), g.shape());
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (n, ci, h, w) = self.value(*input).dims4()?;
                let (co, _, k, _) = self.value(*weight).dims4()?;
                let (_, _, ho, wo) = g.dims4()?;
                if self.needs(*input) {
                    let mut din = Tensor::zeros(&[n, ci, h, w]);
                    conv_backward_input(
                        din.data_mut(),
                        g.data(),
                        self.value(*weight).data(),
                        n,
                        ci,
                        h,
                        w,
                        co,
                        k,
                        *stride,
                        *padding,
                        ho,
                        wo,
                    );
                    accumulate(grads, *input, din.data(), self.value(*input).shape());
                }
                if self.needs(*weight) {
                    let mut dw = Tensor::zeros(&[co, ci, k, k]);
                    conv_backward_weight(
                        dw.data_mut(),
                        g.data(),
                        self.value(*input).data(),
                        n,
                        ci,
                        h,
                        w,
                        co,
                        k,
                        *stride,
                        *padding,
                        ho,
                        wo,
                    );
                    accumulate(grads, *weight, dw.data(), self.value(*weight).shape());
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let mut db = vec![0.0; co];
                        let plane = ho * wo;
                        for bn in 0..n {
                            for oc in 0..co {
                                let base = (bn * co + oc) * plane;
                                db[oc] += g.data()[base..base + plane].iter().sum::<f64>();
                            }
                        }
                        accumulate(grads, *b, &db, self.value(*b).shape());
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let cnt = (n * h * w) as f64;
                let x = self.value(*input).data();
                let gam = self.value(*gamma).data();
                let plane = h * w;
                // Per-channel reductions of g and g * x_hat.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bn in 0..n {
                    for ch in 0..c {
                        let base = (bn * c + ch) * plane;
                        for idx in 0..plane {
                            let gi = g.data()[base + idx];
                            let xh = (x[base + idx] - mean[ch]) * inv_std[ch];
                            sum_g[ch] += gi;
                            sum_gx[ch] += gi * xh;
                        }
                    }
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, &sum_gx, self.value(*gamma).shape());
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, &sum_g, self.value(*beta).shape());
                }
                if self.needs(*input) {
                    let mut din = Tensor::zeros(&[n, c, h, w]);
                    let dd = din.data_mut();
                    // Train-mode stats depend on the input, requiring the
                    // full adjoint; eval-mode stats are constants, so the
                    // adjoint is a plain per-channel rescale.
                    let eval_like = !*train;
                    par::for_each_chunk_mut(dd, plane, |idx, chunk| {
                        let ch = idx % c;
                        let base = idx * plane;
                        let scale = gam[ch] * inv_std[ch];
                        for (o, out_g) in chunk.iter_mut().enumerate() {
                            let gi = g.data()[base + o];
                            if eval_like {
                                *out_g = gi * scale;
                            } else {
                                let xh = (x[base + o] - mean[ch]) * inv_std[ch];
                                *out_g =
                                    scale * (gi - sum_g[ch] / cnt - xh * sum_gx[ch] / cnt);
                            }
                        }
                    });
                    accumulate(grads, *input, din.data(), self.value(*input).shape());
                }
            }
            Op::Upsample2x { input } => {
                if self.needs(*input) {
                    let (n, c, h, w) = self.value(*input).dims4()?;
                    let mut din = Tensor::zeros(&[n, c, h, w]);
                    let dd = din.data_mut();
                    let gw = 2 * w;
                    for p in 0..n * c {
                        let ib = p * h * w;
                        let ob = p * 4 * h * w;
                        for oy in 0..2 * h {
                            for ox in 0..gw {
                                dd[ib + (oy / 2) * w + ox / 2] += g.data()[ob + oy * gw + ox];
                            }
                        }
                    }
                    accumulate(grads, *input, din.data(), self.value(*input).shape());
                }
            }
            Op::Concat { a, b } => {
                let (na, ca, ha, wa) = self.value(*a).dims4()?;
                let (_, cb, _, _) = self.value(*b).dims4()?;
                let plane = ha * wa;
                if self.needs(*a) {
                    let mut da = vec![0.0; na * ca * plane];
                    for n in 0..na {
                        let src = n * (ca + cb) * plane;
                        da[n * ca * plane..(n + 1) * ca * plane]
                            .copy_from_slice(&g.data()[src..src + ca * plane]);
                    }
                    accumulate(grads, *a, &da, self.value(*a).shape());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; na * cb * plane];
                    for n in 0..na {
                        let src = n * (ca + cb) * plane + ca * plane;
                        db[n * cb * plane..(n + 1) * cb * plane]
                            .copy_from_slice(&g.data()[src..src + cb * plane]);
                    }
                    accumulate(grads, *b, &db, self.value(*b).shape());
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.data(), self.value(*a).shape());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.data(), self.value(*b).shape());
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    accumulate(grads, *a, &da, self.value(*a).shape());
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    accumulate(grads, *b, &db, self.value(*b).shape());
                }
            }
            Op::Affine { input, k } => {
                if self.needs(*input) {
                    let d: Vec<f64> = g.data().iter().map(|gi| gi * k).collect();
                    accumulate(grads, *input, &d, self.value(*input).shape());
                }
            }
            Op::ScaleByScalar { input, scalar } => {
                let p = self.value(*scalar).data()[0];
                if self.needs(*input) {
                    let d: Vec<f64> = g.data().iter().map(|gi| gi * p).collect();
                    accumulate(grads, *input, &d, self.value(*input).shape());
                }
                if self.needs(*scalar) {
                    let dp: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*input).data())
                        .map(|(gi, xi)| gi * xi)
                        .sum();
                    accumulate(grads, *scalar, &[dp], self.value(*scalar).shape());
                }
            }
            Op::LifMembrane {
                u_prev,
                y_prev,
                current,
                tau,
            } => {
                let yp = self.value(*y_prev).data();
                if self.needs(*u_prev) {
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(yp)
                        .map(|(gi, y)| gi * tau * (1.0 - y))
                        .collect();
                    accumulate(grads, *u_prev, &d, self.value(*u_prev).shape());
                }
                // In hard mode the reset factor (1 - y_prev) is treated as
                // a constant (detached reset): the previous spike keeps its
                // synaptic credit but not the membrane it erased. Soft mode
                // stays an exact autodiff so finite-difference validation
                // sees the full derivative.
                if self.soft_spikes && self.needs(*y_prev) {
                    let up = self.value(*u_prev).data();
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(up)
                        .map(|(gi, u)| -gi * tau * u)
                        .collect();
                    accumulate(grads, *y_prev, &d, self.value(*y_prev).shape());
                }
                if self.needs(*current) {
                    accumulate(grads, *current, g.data(), self.value(*current).shape());
                }
            }
            Op::AlifTrace {
                a_prev,
                y_prev,
                tau_a,
            } => {
                let t = self.value(*tau_a).data()[0];
                if self.needs(*a_prev) {
                    let d: Vec<f64> = g.data().iter().map(|gi| gi * t).collect();
                    accumulate(grads, *a_prev, &d, self.value(*a_prev).shape());
                }
                if self.needs(*y_prev) {
                    accumulate(grads, *y_prev, g.data(), self.value(*y_prev).shape());
                }
                if self.needs(*tau_a) {
                    let dt: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*a_prev).data())
                        .map(|(gi, ai)| gi * ai)
                        .sum();
                    accumulate(grads, *tau_a, &[dt], self.value(*tau_a).shape());
                }
            }
            Op::Spike {
                input,
                threshold,
                surrogate,
            } => {
                let u = self.value(*input).data();
                let th_data = match threshold {
                    SpikeThreshold::Tensor(t) => Some(self.value(*t).data()),
                    SpikeThreshold::Const(_) => None,
                };
                let th_const = match threshold {
                    SpikeThreshold::Const(c) => *c,
                    SpikeThreshold::Tensor(_) => 0.0,
                };
                let factor = |idx: usize| -> f64 {
                    let th = th_data.map_or(th_const, |d| d[idx]);
                    let z = u[idx] - th + 0.5;
                    // The surrogate lives on the unit interval; outside it
                    // the derivative is zero, which keeps credit assignment
                    // local (membranes far from threshold pass nothing).
                    if (0.0..=1.0).contains(&z) {
                        dspike_derivative(z, surrogate)
                    } else {
                        0.0
                    }
                };
                if self.needs(*input) {
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(idx, gi)| gi * factor(idx))
                        .collect();
                    accumulate(grads, *input, &d, self.value(*input).shape());
                }
                if let SpikeThreshold::Tensor(t) = threshold {
                    if self.needs(*t) {
                        let d: Vec<f64> = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(idx, gi)| -gi * factor(idx))
                            .collect();
                        accumulate(grads, *t, &d, self.value(*t).shape());
                    }
                }
            }
        }
        Ok(())
    }

}

/// Fold eval-mode batch norm into the preceding convolution.
///
/// Returns (weight', bias') with w' = w * gamma / sqrt(var + eps) per output
/// channel and b' = beta + (b - mean) * gamma / sqrt(var + eps), so that
/// conv -> BN equals the folded conv on any input.
pub fn fold_bn_into_conv(
    weight: &Tensor,
    bias: Option<&Tensor>,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &BnStats,
) -> Result<(Tensor, Tensor)> {
    let (co, ci, kh, kw) = weight.dims4()?;
    if gamma.numel() != co || beta.numel() != co || stats.running_mean.len() != co {
        return Err(Error::Shape(String::from(
            "batch norm parameters must match conv output channels",
        )));
    }
    if !stats.initialized {
        return Err(Error::Config(String::from("running statistics are uninitialized")));
    }
    let mut w2 = weight.clone();
    let mut b2 = Tensor::zeros(&[co]);
    let per_out = ci * kh * kw;
    for o in 0..co {
        let inv = 1.0 / libm::sqrt(stats.running_var[o] + stats.eps);
        let scale = gamma.data()[o] * inv;
        for v in &mut w2.data_mut()[o * per_out..(o + 1) * per_out] {
            *v *= scale;
        }
        let b_in = bias.map_or(0.0, |b| b.data()[o]);
        b2.data_mut()[o] = beta.data()[o] + (b_in - stats.running_mean[o]) * scale;
    }
    Ok((w2, b2))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Val, delta: &[f64], shape: &[usize]) {
    debug_assert_eq!(delta.len(), shape.iter().product::<usize>());
    match &mut grads[v.0] {
        Some(t) => {
            for (dst, src) in t.data_mut().iter_mut().zip(delta) {
                *dst += *src;
            }
        }
        slot @ None => {
            *slot = Some(
                Tensor::from_vec(shape, delta.to_vec()).expect("gradient shape mismatch"),
            );
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Upsample2x { .. } => "upsample_nearest_x2",
        Op::Concat { .. } => "concat_channels",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Affine { .. } => "affine",
        Op::ScaleByScalar { .. } => "scale_by_scalar",
        Op::LifMembrane { .. } => "lif_membrane",
        Op::AlifTrace { .. } => "alif_trace",
        Op::Spike { .. } => "spike",
    }
}

/// Forward convolution for one sample, all output channels.
#[allow(clippy::too_many_arguments)]
fn conv_sample_forward(
    out: &mut [f64],
    x: &[f64],
    wt: &[f64],
    bias: Option<&[f64]>,
    co: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    let plane = ho * wo;
    if let Some(b) = bias {
        for oc in 0..co {
            out[oc * plane..(oc + 1) * plane].fill(b[oc]);
        }
    }
    for oc in 0..co {
        let out_plane = &mut out[oc * plane..(oc + 1) * plane];
        for ic in 0..ci {
            let xin = &x[ic * h * w..(ic + 1) * h * w];
            let wk = &wt[(oc * ci + ic) * k * k..(oc * ci + ic + 1) * k * k];
            if k == 1 && stride == 1 {
                saxpy(out_plane, wk[0], xin);
            } else if k == 1 && stride == 2 && padding == 0 {
                let wv = wk[0];
                for oy in 0..ho {
                    let src = &xin[oy * 2 * w..];
                    let dst = &mut out_plane[oy * wo..(oy + 1) * wo];
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += wv * src[i * 2];
                    }
                }
            } else if k == 3 && padding == 1 && (stride == 1 || stride == 2) {
                conv3x3_rows(out_plane, xin, wk, h, w, stride, ho, wo);
            } else {
                conv_generic_tap(out_plane, xin, wk, h, w, k, stride, padding, ho, wo);
            }
        }
    }
}

/// Row-fused 3x3 kernel (padding 1): one pass per (output row, kernel row)
/// with all three column taps applied together.
fn conv3x3_rows(
    out_plane: &mut [f64],
    xin: &[f64],
    wk: &[f64],
    h: usize,
    w: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    for oy in 0..ho {
        let dst = &mut out_plane[oy * wo..(oy + 1) * wo];
        for ky in 0..3 {
            let iy = (oy * stride + ky) as isize - 1;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let row = &xin[iy as usize * w..iy as usize * w + w];
            let (w0, w1, w2) = (wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
            if stride == 1 {
                // wo == w here. Interior columns see all three taps.
                if wo == 1 {
                    dst[0] += w1 * row[0];
                    continue;
                }
                dst[0] += w1 * row[0] + w2 * row[1];
                let last = wo - 1;
                let interior = last.saturating_sub(1);
                let d = &mut dst[1..1 + interior];
                let ra = &row[0..interior];
                let rb = &row[1..1 + interior];
                let rc = &row[2..2 + interior];
                for (((dd, a), b), c) in d.iter_mut().zip(ra).zip(rb).zip(rc) {
                    *dd += w0 * a + w1 * b + w2 * c;
                }
                dst[last] += w0 * row[last - 1] + w1 * row[last];
            } else {
                // stride 2: ix = 2*ox + kx - 1; only ox = 0 clips (kx = 0).
                dst[0] += w1 * row[0];
                if 1 < w {
                    dst[0] += w2 * row[1];
                }
                for ox in 1..wo {
                    let ix = 2 * ox;
                    dst[ox] += w0 * row[ix - 1];
                    if ix < w {
                        dst[ox] += w1 * row[ix];
                    }
                    if ix + 1 < w {
                        dst[ox] += w2 * row[ix + 1];
                    }
                }
            }
        }
    }
}

/// Fallback per-tap convolution for unusual geometry.
#[allow(clippy::too_many_arguments)]
fn conv_generic_tap(
    out_plane: &mut [f64],
    xin: &[f64],
    wk: &[f64],
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    for ky in 0..k {
        for kx in 0..k {
            let wv = wk[ky * k + kx];
            if wv == 0.0 {
                continue;
            }
            for oy in 0..ho {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let in_row = iy as usize * w;
                let (lo, hi) = valid_range(kx, padding, stride, w, wo);
                if hi <= lo {
                    continue;
                }
                let src_start = in_row + lo * stride + kx - padding;
                let dst = &mut out_plane[oy * wo + lo..oy * wo + hi];
                if stride == 1 {
                    saxpy(dst, wv, &xin[src_start..src_start + dst.len()]);
                } else {
                    let src = &xin[src_start..];
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += wv * src[i * stride];
                    }
                }
            }
        }
    }
}

/// Output x range with in-bounds input column, given kernel x offset.
#[inline]
fn valid_range(kx: usize, padding: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    // Need 0 <= ox*stride + kx - padding < w.
    let lo = if kx >= padding {
        0
    } else {
        (padding - kx).div_ceil(stride)
    };
    let hi_num = w + padding;
    let hi = if hi_num > kx {
        ((hi_num - kx - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(wo), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_input(
    din: &mut [f64],
    g: &[f64],
    wt: &[f64],
    _n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    let sample_in = ci * h * w;
    let sample_out = co * ho * wo;
    par::for_each_chunk_mut(din, sample_in, |bn, din_s| {
        let gs = &g[bn * sample_out..(bn + 1) * sample_out];
        for ic in 0..ci {
            let din_plane = &mut din_s[ic * h * w..(ic + 1) * h * w];
            for oc in 0..co {
                let g_plane = &gs[oc * ho * wo..(oc + 1) * ho * wo];
                let wk = &wt[(oc * ci + ic) * k * k..(oc * ci + ic + 1) * k * k];
                if k == 1 && stride == 1 {
                    saxpy(din_plane, wk[0], g_plane);
                } else if k == 1 && stride == 2 && padding == 0 {
                    let wv = wk[0];
                    for oy in 0..ho {
                        let dst = &mut din_plane[oy * 2 * w..];
                        let src = &g_plane[oy * wo..(oy + 1) * wo];
                        for (i, gv) in src.iter().enumerate() {
                            dst[i * 2] += wv * gv;
                        }
                    }
                } else if k == 3 && padding == 1 && stride == 1 {
                    // din[i] += w2*g[i-1] + w1*g[i] + w0*g[i+1] per kernel row.
                    for oy in 0..ho {
                        let g_row = &g_plane[oy * wo..(oy + 1) * wo];
                        for ky in 0..3 {
                            let iy = (oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut din_plane[iy as usize * w..iy as usize * w + w];
                            let (w0, w1, w2) = (wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
                            if w == 1 {
                                dst[0] += w1 * g_row[0];
                                continue;
                            }
                            dst[0] += w1 * g_row[0] + w0 * g_row[1];
                            let last = w - 1;
                            let interior = last.saturating_sub(1);
                            let d = &mut dst[1..1 + interior];
                            let ga = &g_row[0..interior];
                            let gb = &g_row[1..1 + interior];
                            let gc = &g_row[2..2 + interior];
                            for (((dd, a), b), c) in d.iter_mut().zip(ga).zip(gb).zip(gc) {
                                *dd += w2 * a + w1 * b + w0 * c;
                            }
                            dst[last] += w2 * g_row[last - 1] + w1 * g_row[last];
                        }
                    }
                } else {
                    // Generic scatter per tap.
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wk[ky * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = iy as usize * w;
                                let (lo, hi) = valid_range(kx, padding, stride, w, wo);
                                if hi <= lo {
                                    continue;
                                }
                                let grow = &g_plane[oy * wo + lo..oy * wo + hi];
                                let dst_start = row + lo * stride + kx - padding;
                                if stride == 1 {
                                    saxpy(
                                        &mut din_plane[dst_start..dst_start + grow.len()],
                                        wv,
                                        grow,
                                    );
                                } else {
                                    let dst = &mut din_plane[dst_start..];
                                    for (i, gv) in grow.iter().enumerate() {
                                        dst[i * stride] += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_weight(
    dw: &mut [f64],
    g: &[f64],
    x: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    let w_chunk = ci * k * k;
    par::for_each_chunk_mut(dw, w_chunk, |oc, chunk| {
        for bn in 0..n {
            let g_plane = &g[(bn * co + oc) * ho * wo..(bn * co + oc + 1) * ho * wo];
            for ic in 0..ci {
                let xin = &x[(bn * ci + ic) * h * w..(bn * ci + ic + 1) * h * w];
                if k == 3 && padding == 1 && stride == 1 {
                    // One pass per (ky, output row) accumulating the three
                    // column taps together.
                    for ky in 0..3 {
                        let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                        for oy in 0..ho {
                            let iy = (oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &xin[iy as usize * w..iy as usize * w + w];
                            let g_row = &g_plane[oy * wo..(oy + 1) * wo];
                            if wo == 1 {
                                a1 += row[0] * g_row[0];
                                continue;
                            }
                            let last = wo - 1;
                            a1 += row[0] * g_row[0];
                            a2 += row[1] * g_row[0];
                            let interior = last.saturating_sub(1);
                            let gi = &g_row[1..1 + interior];
                            let ra = &row[0..interior];
                            let rb = &row[1..1 + interior];
                            let rc = &row[2..2 + interior];
                            for (((gv, a), b), c) in gi.iter().zip(ra).zip(rb).zip(rc) {
                                a0 += a * gv;
                                a1 += b * gv;
                                a2 += c * gv;
                            }
                            let gv = g_row[last];
                            a0 += row[last - 1] * gv;
                            a1 += row[last] * gv;
                        }
                        chunk[ic * 9 + ky * 3] += a0;
                        chunk[ic * 9 + ky * 3 + 1] += a1;
                        chunk[ic * 9 + ky * 3 + 2] += a2;
                    }
                } else if k == 1 && stride == 1 {
                    chunk[ic] += dot(xin, g_plane);
                } else {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0;
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let in_row = iy as usize * w;
                                let (lo, hi) = valid_range(kx, padding, stride, w, wo);
                                if hi <= lo {
                                    continue;
                                }
                                let grow = &g_plane[oy * wo + lo..oy * wo + hi];
                                let src_start = in_row + lo * stride + kx - padding;
                                if stride == 1 {
                                    acc += dot(&xin[src_start..src_start + grow.len()], grow);
                                } else {
                                    let xs = &xin[src_start..];
                                    for (i, gv) in grow.iter().enumerate() {
                                        acc += xs[i * stride] * gv;
                                    }
                                }
                            }
                            chunk[ic * k * k + ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
    });
}

/// dst += a * src over equal-length slices.
#[inline]
fn saxpy(dst: &mut [f64], a: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Four-lane unrolled dot product; the fixed lane structure keeps results
/// deterministic while letting the compiler vectorize.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = 4 * i;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}
