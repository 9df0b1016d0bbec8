//! Neuron dynamics and the Dspike surrogate.
//!
//! Membrane update with hard reset:
//!     u(t) = tau * u(t-1) * (1 - y(t-1)) + I(t),    y(t) = H(u(t) - u_th)
//! with H(0) = 1. The adaptive variant raises the threshold by a decaying
//! trace of past spikes:
//!     a(t) = tau_a * a(t-1) + y(t-1),    A_th(t) = u_th + beta * a(t)
//! so A_th stays inside [u_th, u_th + beta / (1 - tau_a)].
//!
//! The surrogate used for backpropagation is the symmetric Dspike variant
//!     Dspike(u) = tanh(b * (u - 1/2)) / (2 * tanh(b/2)) + 1/2
//! on the unit interval, which satisfies Dspike(0) = 0 and Dspike(1) = 1
//! for every temperature b > 0. The backward pass evaluates its derivative
//! at clamp(u - threshold + 1/2, 0, 1), centering the steepest slope on
//! the firing threshold.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Leaky integrate-and-fire parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LifParams {
    /// Membrane decay in [0, 1]; 0 degenerates to the binary neuron.
    pub tau: f64,
    /// Base firing threshold, > 0.
    pub u_th: f64,
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(alloc::format!("tau {} not in [0, 1]", self.tau)));
        }
        if self.u_th <= 0.0 {
            return Err(Error::Config(String::from("u_th must be positive")));
        }
        Ok(())
    }
}

/// Adaptive-threshold parameters on top of LIF.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlifParams {
    pub base: LifParams,
    /// Threshold increment scale, >= 0.
    pub beta: f64,
    /// Decay of the threshold increment, in (0, 1).
    pub tau_a: f64,
}

impl AlifParams {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.beta < 0.0 {
            return Err(Error::Config(String::from("beta must be >= 0")));
        }
        if !(self.tau_a > 0.0 && self.tau_a < 1.0) {
            return Err(Error::Config(alloc::format!("tau_a {} not in (0, 1)", self.tau_a)));
        }
        Ok(())
    }
}

/// Per-neuron state for a layer of N neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    /// Membrane potentials.
    pub u: Vec<f64>,
    /// Previous spikes, each exactly 0 or 1.
    pub y_prev: Vec<f64>,
    /// Threshold increments (adaptive neurons only).
    pub a: Vec<f64>,
}

impl NeuronState {
    pub fn zeros(n: usize) -> NeuronState {
        NeuronState { u: vec![0.0; n], y_prev: vec![0.0; n], a: vec![0.0; n] }
    }
}

/// Heaviside with H(0) = 1.
#[inline]
pub fn heaviside(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// One LIF step over a layer; returns the spike vector.
pub fn lif_step(state: &mut NeuronState, input_current: &[f64], params: &LifParams) -> Result<Vec<f64>> {
    if input_current.len() != state.u.len() {
        return Err(Error::Shape(alloc::format!(
            "input length {} does not match state length {}",
            input_current.len(),
            state.u.len()
        )));
    }
    let mut spikes = vec![0.0; state.u.len()];
    for i in 0..state.u.len() {
        let u = params.tau * state.u[i] * (1.0 - state.y_prev[i]) + input_current[i];
        let y = heaviside(u - params.u_th);
        state.u[i] = u;
        state.y_prev[i] = y;
        spikes[i] = y;
    }
    Ok(spikes)
}

/// One adaptive-threshold step; identical membrane update, moving threshold.
pub fn alif_step(state: &mut NeuronState, input_current: &[f64], params: &AlifParams) -> Result<Vec<f64>> {
    if input_current.len() != state.u.len() {
        return Err(Error::Shape(String::from("input length does not match state length")));
    }
    let mut spikes = vec![0.0; state.u.len()];
    for i in 0..state.u.len() {
        let a = params.tau_a * state.a[i] + state.y_prev[i];
        let a_th = params.base.u_th + params.beta * a;
        let u = params.base.tau * state.u[i] * (1.0 - state.y_prev[i]) + input_current[i];
        let y = heaviside(u - a_th);
        state.a[i] = a;
        state.u[i] = u;
        state.y_prev[i] = y;
        spikes[i] = y;
    }
    Ok(spikes)
}

/// Closed-form range of the adaptive threshold: (u_th, u_th + beta/(1 - tau_a)).
pub fn alif_threshold_bounds(params: &AlifParams) -> Result<(f64, f64)> {
    if params.tau_a >= 1.0 {
        return Err(Error::Config(alloc::format!(
            "tau_a = {} >= 1 makes the threshold increment diverge",
            params.tau_a
        )));
    }
    let lo = params.base.u_th;
    let hi = params.base.u_th + params.beta / (1.0 - params.tau_a);
    Ok((lo, hi))
}

/// Dspike surrogate with derived coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SurrogateSpec {
    /// Temperature; larger is sharper.
    pub b: f64,
    /// tanh amplitude: 1 / (2 tanh(b/2)).
    pub a_coef: f64,
    /// Center of symmetry on the unit interval.
    pub c_center: f64,
    /// Vertical offset.
    pub d_offset: f64,
}

impl SurrogateSpec {
    /// The symmetric parameterization satisfying Dspike(0) = 0, Dspike(1) = 1.
    pub fn new(b: f64) -> Result<SurrogateSpec> {
        if b <= 0.0 {
            return Err(Error::Config(alloc::format!("temperature b = {b} must be positive")));
        }
        Ok(SurrogateSpec {
            b,
            a_coef: 1.0 / (2.0 * libm::tanh(b / 2.0)),
            c_center: 0.5,
            d_offset: 0.5,
        })
    }
}

/// Dspike value; evaluation is clamped to the unit interval.
pub fn dspike(u: f64, spec: &SurrogateSpec) -> f64 {
    let u = u.clamp(0.0, 1.0);
    spec.a_coef * libm::tanh(spec.b * (u - spec.c_center)) + spec.d_offset
}

/// Derivative of the Dspike surrogate, evaluated on the clamped argument.
pub fn dspike_derivative(u: f64, spec: &SurrogateSpec) -> f64 {
    let u = u.clamp(0.0, 1.0);
    let t = libm::tanh(spec.b * (u - spec.c_center));
    spec.a_coef * spec.b * (1.0 - t * t)
}

/// Backward factor for a spike generated at margin v = u - threshold:
/// Dspike'(v + 1/2) inside the unit interval, zero outside it.
#[inline]
pub fn surrogate_grad_at_margin(v: f64, spec: &SurrogateSpec) -> f64 {
    let z = v + 0.5;
    if (0.0..=1.0).contains(&z) {
        dspike_derivative(z, spec)
    } else {
        0.0
    }
}
