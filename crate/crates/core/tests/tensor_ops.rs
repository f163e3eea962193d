//! Forward semantics and gradient correctness of every tape operation.
//! Gradients are verified against central finite differences in f64; the
//! loss contracts outputs through a fixed random projection so elementwise
//! placement errors cannot cancel.

use flashlips_core::rng::sub_rng;
use flashlips_core::tensor::{grad_check, Array, Tape, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-7;

/// Random array with entries kept away from non-differentiable points.
fn randn_safe(label: &str, shape: &[usize]) -> Array<f64> {
    let mut rng = sub_rng(9000, label);
    let mut a: Array<f64> = Array::randn(&mut rng, shape, 1.0);
    for v in a.data_mut() {
        if (*v).abs() < 0.05 {
            *v += 0.2;
        }
    }
    a
}

/// Project through fixed random weights and sum, so every output element
/// contributes a distinct gradient signal.
fn project(tape: &mut Tape<f64>, y: Var, label: &str) -> Var {
    let mut rng = sub_rng(9001, label);
    let w = tape.constant(Array::randn(&mut rng, tape.value(y).shape(), 1.0));
    let p = tape.mul(y, w).unwrap();
    tape.sum_all(p).unwrap()
}

fn check1(label: &str, shape: &[usize], f: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let x = randn_safe(label, shape);
    let report = grad_check(&[x], EPS, |tape, vars| {
        let y = f(tape, vars[0]);
        Ok(project(tape, y, label))
    })
    .unwrap();
    report.max_rel_err
}

fn check2(
    label: &str,
    sa: &[usize],
    sb: &[usize],
    f: impl Fn(&mut Tape<f64>, Var, Var) -> Var,
) -> f64 {
    let a = randn_safe(&format!("{label}.a"), sa);
    let b = randn_safe(&format!("{label}.b"), sb);
    let report = grad_check(&[a, b], EPS, |tape, vars| {
        let y = f(tape, vars[0], vars[1]);
        Ok(project(tape, y, label))
    })
    .unwrap();
    report.max_rel_err
}

// ----- forward oracles ------------------------------------------------------

#[test]
fn silu_matches_hand_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Array::from_vec(&[3], vec![0.0, 1.0, -2.0]).unwrap());
    let y = tape.silu(x).unwrap();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    assert_eq!(tape.value(y).data()[0], 0.0);
    assert!((tape.value(y).data()[1] - sig(1.0)).abs() < 1e-12);
    assert!((tape.value(y).data()[2] - (-2.0) * sig(-2.0)).abs() < 1e-12);
}

#[test]
fn matmul_matches_hand_computation() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Array::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Array::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn bmm_nt_equals_bmm_with_explicit_transpose() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(randn_safe("nt.a", &[2, 3, 4]));
    let b = tape.constant(randn_safe("nt.b", &[2, 5, 4]));
    let y1 = tape.bmm_nt(a, b).unwrap();
    let bt = tape.permute(b, &[0, 2, 1]).unwrap();
    let y2 = tape.bmm(a, bt).unwrap();
    for (u, v) in tape.value(y1).data().iter().zip(tape.value(y2).data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn conv2d_identity_kernel_is_identity() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(randn_safe("conv.id", &[1, 1, 4, 4]));
    let mut w = Array::zeros(&[1, 1, 3, 3]);
    w.data_mut()[4] = 1.0; // centre tap
    let w = tape.constant(w);
    let y = tape.conv2d(x, w, 1, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 4, 4]);
    for (u, v) in tape.value(x).data().iter().zip(tape.value(y).data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn conv2d_stride_and_pad_shapes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(randn_safe("conv.sp", &[2, 3, 8, 8]));
    let w = tape.constant(randn_safe("conv.spw", &[5, 3, 3, 3]));
    let y = tape.conv2d(x, w, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 5, 4, 4]);
    let w1 = tape.constant(randn_safe("conv.spw1", &[5, 3, 1, 1]));
    let y1 = tape.conv2d(x, w1, 1, 0).unwrap();
    assert_eq!(tape.value(y1).shape(), &[2, 5, 8, 8]);
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Array::zeros(&[1, 3, 4, 4]));
    let w = tape.constant(Array::zeros(&[2, 4, 3, 3]));
    let err = tape.conv2d(x, w, 1, 1).unwrap_err();
    assert!(err.to_string().contains("conv2d"));
}

#[test]
fn avg_pool_matches_hand_value() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Array::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.avg_pool2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5]);
}

#[test]
fn upsample_then_pool_is_identity() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(randn_safe("up", &[2, 3, 4, 4]));
    let u = tape.upsample_nearest2(x).unwrap();
    assert_eq!(tape.value(u).shape(), &[2, 3, 8, 8]);
    let y = tape.avg_pool2(u).unwrap();
    for (a, b) in tape.value(x).data().iter().zip(tape.value(y).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn group_norm_constant_input_gives_beta() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Array::full(&[2, 4, 3, 3], 7.0));
    let gamma = tape.constant(Array::full(&[4], 2.0));
    let beta = tape.constant(Array::from_vec(&[4], vec![0.5, -0.5, 1.0, 0.0]).unwrap());
    let y = tape.group_norm(x, gamma, beta, 2, 1e-5).unwrap();
    // Zero variance: normalized value is 0, so output is exactly beta.
    for (i, &v) in tape.value(y).data().iter().enumerate() {
        let c = (i / 9) % 4;
        let expect = [0.5, -0.5, 1.0, 0.0][c];
        assert!((v - expect).abs() < 1e-9, "channel {c}: {v}");
    }
}

#[test]
fn layer_norm_output_is_standardized() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(randn_safe("ln", &[3, 16]));
    let y = tape.layer_norm(x, None, None, 1e-5).unwrap();
    for row in tape.value(y).data().chunks(16) {
        let m: f64 = row.iter().sum::<f64>() / 16.0;
        let v: f64 = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-9);
        assert!((v - 1.0).abs() < 1e-4);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(randn_safe("sm", &[4, 7]));
    let y = tape.softmax_last(x).unwrap();
    for row in tape.value(y).data().chunks(7) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_c() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Array::zeros(&[3, 5]));
    let loss = tape.cross_entropy_mean(x, &[0, 2, 4]).unwrap();
    assert!((tape.value(loss).item() - (5.0f64).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Array::zeros(&[2, 3]));
    assert!(tape.cross_entropy_mean(x, &[0, 3]).is_err());
}

#[test]
fn slice_concat_round_trip() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(randn_safe("sc", &[2, 6, 3]));
    let a = tape.slice(x, 1, 0, 2).unwrap();
    let b = tape.slice(x, 1, 2, 4).unwrap();
    let y = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(x).data(), tape.value(y).data());
}

#[test]
fn permute_round_trip() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(randn_safe("perm", &[2, 3, 4, 5]));
    let y = tape.permute(x, &[0, 2, 1, 3]).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 4, 3, 5]);
    let z = tape.permute(y, &[0, 2, 1, 3]).unwrap();
    assert_eq!(tape.value(x).data(), tape.value(z).data());
}

#[test]
fn tile_spatial_broadcasts_and_reduces() {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Array::from_vec(&[1, 2], vec![3.0, -1.0]).unwrap());
    let y = tape.tile_spatial(v, 2, 2).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 2, 2]);
    assert_eq!(tape.value(y).data(), &[3.0, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0]);
    let m = tape.mean_spatial(y).unwrap();
    assert_eq!(tape.value(m).data(), &[3.0, -1.0]);
}

#[test]
fn shape_mismatch_messages_name_op_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Array::zeros(&[2, 3]));
    let b = tape.constant(Array::zeros(&[3, 3]));
    let err = tape.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 3]"), "{msg}");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = sub_rng(55, "det");
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Array::randn(&mut rng, &[2, 8, 4, 4], 1.0));
        let w = tape.leaf(Array::randn(&mut rng, &[8, 8, 3, 3], 0.2));
        let g = tape.leaf(Array::full(&[8], 1.0));
        let b = tape.leaf(Array::zeros(&[8]));
        let h = tape.group_norm(x, g, b, 4, 1e-5).unwrap();
        let h = tape.silu(h).unwrap();
        let y = tape.conv2d(h, w, 1, 1).unwrap();
        let loss = tape.mean_all(y).unwrap();
        tape.backward(loss).unwrap();
        (tape.value(y).data().to_vec(), tape.grad(w).unwrap().data().to_vec())
    };
    let (y1, g1) = run();
    let (y2, g2) = run();
    assert_eq!(y1, y2);
    assert_eq!(g1, g2);
}

// ----- gradients ------------------------------------------------------------

#[test]
fn grads_elementwise_ops() {
    assert!(check2("add", &[3, 4], &[3, 4], |t, a, b| t.add(a, b).unwrap()) < TOL);
    assert!(check2("sub", &[3, 4], &[3, 4], |t, a, b| t.sub(a, b).unwrap()) < TOL);
    assert!(check2("mul", &[3, 4], &[3, 4], |t, a, b| t.mul(a, b).unwrap()) < TOL);
    assert!(check1("scale", &[3, 4], |t, x| t.scale(x, -1.7).unwrap()) < TOL);
    assert!(check1("addsc", &[3, 4], |t, x| t.add_scalar(x, 0.3).unwrap()) < TOL);
}

#[test]
fn grads_activations() {
    assert!(check1("silu", &[4, 5], |t, x| t.silu(x).unwrap()) < TOL);
    assert!(check1("gelu", &[4, 5], |t, x| t.gelu(x).unwrap()) < TOL);
    assert!(check1("relu", &[4, 5], |t, x| t.relu(x).unwrap()) < TOL);
    assert!(check1("tanh", &[4, 5], |t, x| t.tanh(x).unwrap()) < TOL);
    assert!(check1("abs", &[4, 5], |t, x| t.abs(x).unwrap()) < TOL);
}

#[test]
fn grads_bias_broadcasts() {
    assert!(check2("brow", &[6, 5], &[5], |t, x, b| t.bias_rows(x, b).unwrap()) < TOL);
    assert!(
        check2("bchan", &[2, 3, 4, 4], &[3], |t, x, b| t.bias_channels(x, b).unwrap()) < TOL
    );
    assert!(
        check2("mrow", &[2, 5, 6], &[2, 6], |t, x, s| t.mul_bcast_rows(x, s).unwrap()) < TOL
    );
    assert!(
        check2("arow", &[2, 5, 6], &[2, 6], |t, x, s| t.add_bcast_rows(x, s).unwrap()) < TOL
    );
}

#[test]
fn grads_matrix_products() {
    assert!(check2("mm", &[4, 3], &[3, 5], |t, a, b| t.matmul(a, b).unwrap()) < TOL);
    assert!(check2("bmm", &[2, 3, 4], &[2, 4, 5], |t, a, b| t.bmm(a, b).unwrap()) < TOL);
    assert!(check2("bmmnt", &[2, 3, 4], &[2, 5, 4], |t, a, b| t.bmm_nt(a, b).unwrap()) < TOL);
}

#[test]
fn grads_conv_and_resampling() {
    assert!(
        check2("conv", &[2, 3, 5, 5], &[4, 3, 3, 3], |t, x, w| t.conv2d(x, w, 1, 1).unwrap())
            < TOL
    );
    assert!(
        check2("conv_s2", &[1, 2, 6, 6], &[3, 2, 3, 3], |t, x, w| t.conv2d(x, w, 2, 1).unwrap())
            < TOL
    );
    assert!(
        check2("conv_1x1", &[2, 3, 4, 4], &[5, 3, 1, 1], |t, x, w| t.conv2d(x, w, 1, 0).unwrap())
            < TOL
    );
    assert!(check1("pool", &[2, 3, 4, 4], |t, x| t.avg_pool2(x).unwrap()) < TOL);
    assert!(check1("upsample", &[2, 3, 3, 3], |t, x| t.upsample_nearest2(x).unwrap()) < TOL);
}

#[test]
fn grads_normalization() {
    let x = randn_safe("gn.x", &[2, 4, 3, 3]);
    let gamma = randn_safe("gn.g", &[4]);
    let beta = randn_safe("gn.b", &[4]);
    let report = grad_check(&[x, gamma, beta], EPS, |t, v| {
        let y = t.group_norm(v[0], v[1], v[2], 2, 1e-5)?;
        Ok(project(t, y, "gn"))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "group_norm rel err {}", report.max_rel_err);

    let x = randn_safe("ln.x", &[3, 8]);
    let gamma = randn_safe("ln.g", &[8]);
    let beta = randn_safe("ln.b", &[8]);
    let report = grad_check(&[x, gamma, beta], EPS, |t, v| {
        let y = t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?;
        Ok(project(t, y, "ln"))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "layer_norm rel err {}", report.max_rel_err);

    assert!(check1("ln_plain", &[3, 8], |t, x| t.layer_norm(x, None, None, 1e-5).unwrap()) < 1e-6);
}

#[test]
fn grads_softmax_and_losses() {
    assert!(check1("softmax", &[3, 6], |t, x| t.softmax_last(x).unwrap()) < TOL);
    let x = randn_safe("ce", &[4, 5]);
    let report = grad_check(&[x], EPS, |t, v| t.cross_entropy_mean(v[0], &[1, 0, 4, 2]))
        .unwrap();
    assert!(report.max_rel_err < TOL, "cross_entropy rel err {}", report.max_rel_err);
}

#[test]
fn grads_reductions_and_shape_ops() {
    assert!(check1("sum", &[3, 4], |t, x| t.sum_all(x).unwrap()) < TOL);
    assert!(check1("meanall", &[3, 4], |t, x| t.mean_all(x).unwrap()) < TOL);
    assert!(check1("meansp", &[2, 3, 4, 4], |t, x| t.mean_spatial(x).unwrap()) < TOL);
    assert!(check1("slice", &[2, 6, 3], |t, x| t.slice(x, 1, 1, 3).unwrap()) < TOL);
    assert!(check1("permute", &[2, 3, 4], |t, x| t.permute(x, &[2, 0, 1]).unwrap()) < TOL);
    assert!(check1("reshape", &[2, 6], |t, x| t.reshape(x, &[3, 4]).unwrap()) < TOL);
    assert!(check1("tile", &[2, 3], |t, x| t.tile_spatial(x, 2, 3).unwrap()) < TOL);
    let a = randn_safe("cat.a", &[2, 2, 3]);
    let b = randn_safe("cat.b", &[2, 4, 3]);
    let report = grad_check(&[a, b], EPS, |t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        Ok(project(t, y, "cat"))
    })
    .unwrap();
    assert!(report.max_rel_err < TOL);
}

#[test]
fn grad_accumulates_when_var_used_twice() {
    // y = x * x must produce dy/dx = 2x through accumulation.
    let x = randn_safe("dup", &[3]);
    let report = grad_check(&[x.clone()], EPS, |t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.sum_all(y)?)
    })
    .unwrap();
    assert!(report.max_rel_err < TOL);
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.clone());
    let y = tape.mul(xv, xv).unwrap();
    let loss = tape.sum_all(y).unwrap();
    tape.backward(loss).unwrap();
    for (g, xi) in tape.grad(xv).unwrap().data().iter().zip(x.data()) {
        assert!((g - 2.0 * xi).abs() < 1e-12);
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Array::full(&[2], 1.0));
    let c = tape.constant(Array::full(&[2], 3.0));
    let y = tape.mul(x, c).unwrap();
    let loss = tape.sum_all(y).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Array::zeros(&[2, 2]));
    assert!(tape.backward(x).is_err());
}
