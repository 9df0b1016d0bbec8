//! Finite-difference oracles and per-op examples for the tensor engine.
//!
//! Every differentiable primitive is checked against central finite
//! differences (h = 1e-4) on small random tensors, using a fixed random
//! weighted-sum loss so all output elements receive distinct gradients.

use spikefpn_core::autograd::{BnStats, Mode, SpikeThreshold, Tape, Val};
use spikefpn_core::rng::Rng;
use spikefpn_core::spiking::SurrogateSpec;
use spikefpn_core::tensor::Tensor;

const H: f64 = 1e-4;

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.range_f64(lo, hi)).collect()).unwrap()
}

/// Compare tape gradients of a weighted-sum loss against central FD.
fn check_grads<F>(inputs: &[Tensor], soft: bool, tol: f64, build: F)
where
    F: Fn(&mut Tape, &[Val]) -> Val,
{
    let mut tape = Tape::new();
    tape.soft_spikes = soft;
    let vals: Vec<Val> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vals);
    let mut wrng = Rng::new(0x1055);
    let weights: Vec<f64> = (0..tape.value(out).numel())
        .map(|_| wrng.range_f64(-1.0, 1.0))
        .collect();
    let seed = Tensor::from_vec(tape.value(out).shape(), weights.clone()).unwrap();
    let grads = tape.backward(&[(out, seed)]).unwrap();

    let loss = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        tape.soft_spikes = soft;
        let vals: Vec<Val> = tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vals);
        tape.value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum()
    };

    for (i, t) in inputs.iter().enumerate() {
        let g = grads
            .get(vals[i])
            .unwrap_or_else(|| panic!("missing gradient for input {i}"));
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * H);
            let a = g.data()[j];
            let scale = a.abs().max(fd.abs()).max(1.0);
            assert!(
                (a - fd).abs() <= tol * scale,
                "input {i} element {j}: analytic {a} vs fd {fd}"
            );
        }
    }
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut rng = Rng::new(21);
    // 3x3 stride 1 pad 1 with bias.
    let x = rand_tensor(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let b = rand_tensor(&[3], -0.2, 0.2, &mut rng);
    check_grads(&[x, w, b], false, 1e-4, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap()
    });
    // 3x3 stride 2.
    let x = rand_tensor(&[2, 2, 6, 6], -1.0, 1.0, &mut rng);
    let w = rand_tensor(&[2, 2, 3, 3], -0.5, 0.5, &mut rng);
    check_grads(&[x, w], false, 1e-4, |t, v| {
        t.conv2d(v[0], v[1], None, 2, 1).unwrap()
    });
    // 1x1 stride 1 pad 0.
    let x = rand_tensor(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let w = rand_tensor(&[4, 3, 1, 1], -0.5, 0.5, &mut rng);
    check_grads(&[x, w], false, 1e-4, |t, v| {
        t.conv2d(v[0], v[1], None, 1, 0).unwrap()
    });
}

#[test]
fn conv2d_identity_kernel_is_identity() {
    let mut rng = Rng::new(3);
    let x = rand_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
    // 1x1 kernel with identity mixing.
    let w = Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let wv = tape.leaf(w, false);
    let out = tape.conv2d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(tape.value(out).data(), x.data());
}

#[test]
fn conv2d_table_stem_shape() {
    // 48x128x128 through a stride-2 3x3 conv with 96 filters -> 96x64x64.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 48, 128, 128]), false);
    let w = tape.leaf(Tensor::zeros(&[96, 48, 3, 3]), false);
    let out = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 96, 64, 64]);
}

#[test]
fn conv2d_rejects_channel_mismatch_and_bad_kernels() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
    let w = tape.leaf(Tensor::zeros(&[3, 5, 3, 3]), false);
    assert!(tape.conv2d(x, w, None, 1, 1).is_err());
    let w5 = tape.leaf(Tensor::zeros(&[3, 2, 5, 5]), false);
    assert!(tape.conv2d(x, w5, None, 1, 1).is_err());
}

#[test]
fn batch_norm_matches_finite_differences() {
    let mut rng = Rng::new(33);
    let x = rand_tensor(&[2, 3, 4, 4], -2.0, 2.0, &mut rng);
    let gamma = rand_tensor(&[3], 0.5, 1.5, &mut rng);
    let beta = rand_tensor(&[3], -0.5, 0.5, &mut rng);
    check_grads(&[x.clone(), gamma.clone(), beta.clone()], false, 1e-4, |t, v| {
        let mut stats = BnStats::new(3);
        t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train).unwrap()
    });
    // Eval mode with fixed running stats.
    check_grads(&[x, gamma, beta], false, 1e-4, |t, v| {
        let mut stats = BnStats::new(3);
        stats.running_mean = vec![0.1, -0.2, 0.3];
        stats.running_var = vec![0.9, 1.4, 0.6];
        stats.initialized = true;
        t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Eval).unwrap()
    });
}

#[test]
fn batch_norm_normalizes_and_guards_constant_channels() {
    // Already zero-mean unit-variance input with identity scale/shift passes
    // through within 1e-6; a constant channel collapses to zero.
    let n = 64usize;
    let mut data = Vec::with_capacity(2 * n);
    for i in 0..n {
        // Symmetric +-1 pattern: exactly zero mean, unit variance.
        data.push(if i % 2 == 0 { 1.0 } else { -1.0 });
    }
    data.extend(core::iter::repeat_n(5.0, n)); // constant channel
    let x = Tensor::from_vec(&[1, 2, 8, 8], data).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let g = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap(), false);
    let b = tape.leaf(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap(), false);
    let mut stats = BnStats::new(2);
    let out = tape.batch_norm(xv, g, b, &mut stats, Mode::Train).unwrap();
    let od = tape.value(out).data();
    for i in 0..n {
        let expect = if i % 2 == 0 { 1.0 } else { -1.0 };
        assert!((od[i] - expect).abs() < 1e-5, "normalized {} vs {}", od[i], expect);
    }
    for i in n..2 * n {
        assert!(od[i].abs() < 1e-9, "constant channel should normalize to 0");
    }
}

#[test]
fn batch_norm_matches_direct_formula_oracle() {
    let mut rng = Rng::new(44);
    let x = rand_tensor(&[2, 2, 3, 3], -3.0, 3.0, &mut rng);
    let gamma = vec![1.3, 0.7];
    let beta = vec![0.2, -0.4];
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let gv = tape.leaf(Tensor::from_vec(&[2], gamma.clone()).unwrap(), false);
    let bv = tape.leaf(Tensor::from_vec(&[2], beta.clone()).unwrap(), false);
    let mut stats = BnStats::new(2);
    let out = tape.batch_norm(xv, gv, bv, &mut stats, Mode::Train).unwrap();

    // Direct (x - mu) / sqrt(var + eps) * gamma + beta per channel.
    let (nb, c, h, w) = (2, 2, 3, 3);
    let plane = h * w;
    for ch in 0..c {
        let mut vals = Vec::new();
        for n in 0..nb {
            let base = (n * c + ch) * plane;
            vals.extend_from_slice(&x.data()[base..base + plane]);
        }
        let mu: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64;
        for n in 0..nb {
            let base = (n * c + ch) * plane;
            for i in 0..plane {
                let expect = (x.data()[base + i] - mu) / (var + stats.eps).sqrt() * gamma[ch]
                    + beta[ch];
                let got = tape.value(out).data()[base + i];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batch_norm_eval_before_train_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 2, 2, 2]), false);
    let g = tape.leaf(Tensor::full(&[2], 1.0), false);
    let b = tape.leaf(Tensor::zeros(&[2]), false);
    let mut stats = BnStats::new(2);
    assert!(tape.batch_norm(x, g, b, &mut stats, Mode::Eval).is_err());
}

#[test]
fn upsample_replicates_and_backward_sums() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![7.0]).unwrap(), false);
    let out = tape.upsample_nearest_x2(x).unwrap();
    assert_eq!(tape.value(out).data(), &[7.0, 7.0, 7.0, 7.0]);

    let mut tape = Tape::new();
    let checker = tape.leaf(
        Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        false,
    );
    let out = tape.upsample_nearest_x2(checker).unwrap();
    assert_eq!(
        tape.value(out).data(),
        &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]
    );

    let mut rng = Rng::new(17);
    let x = rand_tensor(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
    check_grads(&[x], false, 1e-4, |t, v| t.upsample_nearest_x2(v[0]).unwrap());
}

#[test]
fn concat_roundtrip_and_grads() {
    let mut rng = Rng::new(29);
    let a = rand_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
    let b = rand_tensor(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone(), false);
    let bv = tape.leaf(b.clone(), false);
    let out = tape.concat_channels(av, bv).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 5, 4, 4]);
    // Slicing the output recovers the inputs exactly.
    assert_eq!(&tape.value(out).data()[..32], a.data());
    assert_eq!(&tape.value(out).data()[32..], b.data());

    // Concat with an empty tensor is the identity.
    let empty = tape.leaf(Tensor::zeros(&[1, 0, 4, 4]), false);
    let same = tape.concat_channels(av, empty).unwrap();
    assert_eq!(tape.value(same).data(), a.data());

    let a = rand_tensor(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
    let b = rand_tensor(&[2, 1, 3, 3], -1.0, 1.0, &mut rng);
    check_grads(&[a, b], false, 1e-4, |t, v| {
        t.concat_channels(v[0], v[1]).unwrap()
    });

    // Spatial mismatch is a shape error.
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[1, 1, 4, 4]), false);
    let b = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
    assert!(tape.concat_channels(a, b).is_err());
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = Rng::new(61);
    let a = rand_tensor(&[2, 2, 2, 2], -1.0, 1.0, &mut rng);
    let b = rand_tensor(&[2, 2, 2, 2], -1.0, 1.0, &mut rng);
    check_grads(&[a.clone(), b.clone()], false, 1e-4, |t, v| t.add(v[0], v[1]).unwrap());
    check_grads(&[a.clone(), b], false, 1e-4, |t, v| t.mul(v[0], v[1]).unwrap());
    check_grads(&[a.clone()], false, 1e-4, |t, v| t.affine(v[0], 1.7, -0.3).unwrap());
    let s = Tensor::scalar(0.35);
    check_grads(&[a, s], false, 1e-4, |t, v| {
        t.scale_by_scalar(v[0], v[1]).unwrap()
    });
}

#[test]
fn membrane_and_trace_ops_match_finite_differences() {
    let mut rng = Rng::new(71);
    let u_prev = rand_tensor(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
    // The reset path is detached, so y_prev enters the membrane op as a
    // constant: hold it fixed and check the differentiable inputs.
    let y_prev = rand_tensor(&[1, 2, 3, 3], 0.0, 1.0, &mut rng);
    let current = rand_tensor(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
    {
        let y_fixed = y_prev.clone();
        check_grads(&[u_prev, current], false, 1e-4, move |t, v| {
            let y = t.leaf(y_fixed.clone(), false);
            t.lif_membrane(v[0], y, v[1], 0.2).unwrap()
        });
    }
    let a_prev = rand_tensor(&[1, 2, 3, 3], 0.0, 2.0, &mut rng);
    let tau_a = Tensor::scalar(0.3);
    check_grads(&[a_prev, y_prev, tau_a], false, 1e-4, |t, v| {
        t.alif_trace(v[0], v[1], v[2]).unwrap()
    });
}

#[test]
fn spike_forward_hard_cases() {
    // Threshold folded in: H(-0.2) = 0, H(0) = 1, H(0.4) = 1.
    let spec = SurrogateSpec::new(3.0).unwrap();
    let mut tape = Tape::new();
    let u = tape.leaf(Tensor::from_vec(&[3], vec![-0.2, 0.0, 0.4]).unwrap(), false);
    let y = tape.spike(u, SpikeThreshold::Const(0.0), spec).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 1.0, 1.0]);
}

#[test]
fn spike_gradient_vanishes_far_from_threshold() {
    // Outside the surrogate's unit interval the backward factor is zero.
    let spec = SurrogateSpec::new(3.0).unwrap();
    let mut tape = Tape::new();
    let u = tape.leaf(Tensor::from_vec(&[2], vec![-5.0, 5.0]).unwrap(), true);
    let y = tape.spike(u, SpikeThreshold::Const(0.3), spec).unwrap();
    let grads = tape.backward(&[(y, Tensor::full(&[2], 1.0))]).unwrap();
    for g in grads.get(u).unwrap().data() {
        assert_eq!(*g, 0.0);
    }
}

#[test]
fn spike_soft_mode_matches_finite_differences() {
    // Margins kept away from the clamp kinks at z = 0 and z = 1.
    let mut rng = Rng::new(81);
    let th = 0.3;
    let n = 24;
    let vals: Vec<f64> = (0..n)
        .map(|_| th - 0.5 + rng.range_f64(0.05, 0.95))
        .collect();
    let u = Tensor::from_vec(&[1, 2, 3, 4], vals).unwrap();
    let spec = SurrogateSpec::new(3.0).unwrap();
    check_grads(&[u.clone()], true, 1e-4, |t, v| {
        t.spike(v[0], SpikeThreshold::Const(th), spec).unwrap()
    });
    // Tensor threshold variant propagates into the threshold too.
    let th_t = Tensor::from_vec(&[1, 2, 3, 4], vec![th; n]).unwrap();
    check_grads(&[u, th_t], true, 1e-4, |t, v| {
        t.spike(v[0], SpikeThreshold::Tensor(v[1]), spec).unwrap()
    });
}

#[test]
fn gradient_accumulation_is_additive() {
    // y = x*x + 2x -> dy/dx = 2x + 2 exactly.
    let x = Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let sq = tape.mul(xv, xv).unwrap();
    let lin = tape.affine(xv, 2.0, 0.0).unwrap();
    let y = tape.add(sq, lin).unwrap();
    let grads = tape.backward(&[(y, Tensor::full(&[4], 1.0))]).unwrap();
    let g = grads.get(xv).unwrap();
    for (gi, xi) in g.data().iter().zip(x.data()) {
        assert_eq!(*gi, 2.0 * xi + 2.0);
    }
}

#[test]
fn replay_is_bit_deterministic() {
    let run = || {
        let mut rng = Rng::new(123);
        let x = rand_tensor(&[2, 3, 6, 6], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], -0.5, 0.5, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, true);
        let wv = tape.leaf(w, true);
        let c = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        let g = tape.leaf(Tensor::full(&[4], 1.0), true);
        let b = tape.leaf(Tensor::zeros(&[4]), true);
        let mut stats = BnStats::new(4);
        let bn = tape.batch_norm(c, g, b, &mut stats, Mode::Train).unwrap();
        let spec = SurrogateSpec::new(3.0).unwrap();
        let y = tape.spike(bn, SpikeThreshold::Const(0.3), spec).unwrap();
        let seed = Tensor::full(tape.value(y).shape(), 1.0);
        let grads = tape.backward(&[(y, seed)]).unwrap();
        (
            tape.value(y).data().to_vec(),
            grads.get(wv).unwrap().data().to_vec(),
        )
    };
    let (y1, g1) = run();
    let (y2, g2) = run();
    assert_eq!(y1, y2);
    assert_eq!(g1, g2);
}

#[test]
fn soft_mode_three_layer_stack_end_to_end() {
    // Conv+BN+spike stacked three deep, unrolled two steps with membrane
    // state, against FD at 1e-3. Exercises BPTT through resets and spikes.
    let mut rng = Rng::new(0x57ac);
    let x0 = rand_tensor(&[1, 2, 5, 5], -0.6, 0.6, &mut rng);
    let x1 = rand_tensor(&[1, 2, 5, 5], -0.6, 0.6, &mut rng);
    let mut params = Vec::new();
    let chans = [2usize, 3, 3, 2];
    for l in 0..3 {
        params.push(rand_tensor(&[chans[l + 1], chans[l], 3, 3], -0.4, 0.4, &mut rng));
        params.push(rand_tensor(&[chans[l + 1]], 0.8, 1.2, &mut rng)); // gamma
        params.push(rand_tensor(&[chans[l + 1]], -0.1, 0.1, &mut rng)); // beta
    }
    let inputs: Vec<Tensor> = [x0, x1].into_iter().chain(params).collect();
    let spec = SurrogateSpec::new(3.0).unwrap();
    check_grads(&inputs, true, 1e-3, move |t, v| {
        let tau = 0.2;
        let u_th = 0.3;
        let mut states: Vec<Option<(Val, Val)>> = vec![None; 3];
        let mut final_out = None;
        for step in 0..2 {
            let mut cur = v[step];
            for l in 0..3 {
                let w = v[2 + 3 * l];
                let g = v[2 + 3 * l + 1];
                let b = v[2 + 3 * l + 2];
                let conv = t.conv2d(cur, w, None, 1, 1).unwrap();
                let mut stats = BnStats::new(t.value(g).numel());
                let bn = t.batch_norm(conv, g, b, &mut stats, Mode::Train).unwrap();
                let (u_prev, y_prev) = match states[l] {
                    Some(s) => s,
                    None => {
                        let shape = t.value(bn).shape().to_vec();
                        let z1 = t.leaf(Tensor::zeros(&shape), false);
                        let z2 = t.leaf(Tensor::zeros(&shape), false);
                        (z1, z2)
                    }
                };
                let u = t.lif_membrane(u_prev, y_prev, bn, tau).unwrap();
                let y = t.spike(u, SpikeThreshold::Const(u_th), spec).unwrap();
                states[l] = Some((u, y));
                cur = y;
            }
            final_out = Some(cur);
        }
        final_out.unwrap()
    });
}
