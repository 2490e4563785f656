mod common;

use common::{conv_oracle, conv_transpose_oracle, random_tensor, rng};
use proptest::prelude::*;
use sepnet_core::kernels::{
    channelwise_layer_norm, conv1d, conv1d_backward, conv_transpose1d, depthwise_conv1d, global_layer_norm,
    nearest_upsample, prelu, softmax_stacked, ConvSpec,
};
use sepnet_core::Tensor;

/// Channel counts used while another extent is swept, cycling through 1..=16.
fn cycle(i: usize) -> usize {
    i % 16 + 1
}

#[test]
fn conv1d_matches_oracle_for_every_kernel_stride_and_length() {
    let mut r = rng(1);
    let mut case = 0;
    for k in 1..=16 {
        for s in 1..=16 {
            for len in s..=16 {
                let (c_in, c_out) = (cycle(case), cycle(case * 7 + 3));
                case += 1;
                let spec = ConvSpec::new(c_in, c_out, k, s);
                let x = random_tensor(&[c_in, len], &mut r);
                let w = random_tensor(&spec.weight_shape(), &mut r);
                let b = random_tensor(&[c_out], &mut r);
                let got = conv1d(&x, &spec, &w, Some(&b)).unwrap();
                let want = conv_oracle(&x, &w, Some(&b), s, 1);
                assert!(got.max_abs_diff(&want) <= 1e-12, "K={k} S={s} L={len} C_in={c_in} C={c_out}");
            }
        }
    }
}

#[test]
fn conv1d_matches_oracle_for_every_channel_count_and_group() {
    let mut r = rng(2);
    for c_in in 1..=16 {
        for c_out in 1..=16 {
            for groups in (1..=c_in).filter(|g| c_in % g == 0 && c_out % g == 0) {
                let (k, s, len) = (cycle(c_in + c_out) % 7 + 1, cycle(c_out) % 3 + 1, 16);
                let spec = ConvSpec::new(c_in, c_out, k, s).with_groups(groups);
                let x = random_tensor(&[c_in, len], &mut r);
                let w = random_tensor(&spec.weight_shape(), &mut r);
                let b = random_tensor(&[c_out], &mut r);
                let got = conv1d(&x, &spec, &w, Some(&b)).unwrap();
                let want = conv_oracle(&x, &w, Some(&b), s, groups);
                assert!(got.max_abs_diff(&want) <= 1e-12, "C_in={c_in} C={c_out} G={groups}");
            }
        }
    }
}

#[test]
fn small_conv_matches_oracle() {
    let mut r = rng(3);
    let spec = ConvSpec::new(2, 3, 3, 2);
    let x = random_tensor(&[2, 8], &mut r);
    let w = random_tensor(&spec.weight_shape(), &mut r);
    let b = random_tensor(&[3], &mut r);
    let got = conv1d(&x, &spec, &w, Some(&b)).unwrap();
    assert_eq!(got.shape(), &[3, 4]);
    assert!(got.max_abs_diff(&conv_oracle(&x, &w, Some(&b), 2, 1)) <= 1e-12);
}

#[test]
fn depthwise_matches_oracle_for_every_extent() {
    let mut r = rng(4);
    for c in 1..=16 {
        for k in 1..=16 {
            for s in [1, 2, 3, 16] {
                let len = 16;
                let spec = ConvSpec::depthwise(c, k, s);
                let x = random_tensor(&[c, len], &mut r);
                let w = random_tensor(&spec.weight_shape(), &mut r);
                let b = random_tensor(&[c], &mut r);
                let got = depthwise_conv1d(&x, &spec, &w, Some(&b)).unwrap();
                let want = conv_oracle(&x, &w, Some(&b), s, c);
                assert!(got.max_abs_diff(&want) <= 1e-12, "C={c} K={k} S={s}");
            }
        }
    }
}

#[test]
fn depthwise_equals_independent_single_channel_convolutions() {
    let mut r = rng(5);
    let spec = ConvSpec::depthwise(4, 5, 2);
    let x = random_tensor(&[4, 16], &mut r);
    let w = random_tensor(&spec.weight_shape(), &mut r);
    let got = depthwise_conv1d(&x, &spec.without_bias(), &w, None).unwrap();
    let mut rows = Vec::new();
    for c in 0..4 {
        let xc = Tensor::from_vec(&[1, 16], x.row(c).to_vec()).unwrap();
        let wc = Tensor::from_vec(&[1, 1, 5], w.data()[c * 5..(c + 1) * 5].to_vec()).unwrap();
        rows.extend(conv_oracle(&xc, &wc, None, 2, 1).into_data());
    }
    let want = Tensor::from_vec(&[4, 8], rows).unwrap();
    assert!(got.max_abs_diff(&want) <= 1e-12);
}

#[test]
fn conv_transpose_matches_oracle_for_every_extent() {
    let mut r = rng(6);
    let mut case = 0;
    for k in 1..=16 {
        for s in 1..=16 {
            for len in [1, 2, 5, 16] {
                let (c_in, c_out) = (cycle(case * 5), cycle(case * 3 + 1));
                case += 1;
                let spec = ConvSpec::new(c_in, c_out, k, s);
                let v = random_tensor(&[c_in, len], &mut r);
                let w = random_tensor(&spec.transpose_weight_shape(), &mut r);
                let b = random_tensor(&[c_out], &mut r);
                let got = conv_transpose1d(&v, &spec, &w, Some(&b)).unwrap();
                let want = conv_transpose_oracle(&v, &w, Some(&b), s, 1);
                assert!(got.max_abs_diff(&want) <= 1e-12, "K={k} S={s} L={len}");
            }
        }
    }
    for c_in in 1..=16 {
        for groups in (1..=c_in).filter(|g| c_in % g == 0) {
            for c_out in (groups..=16).step_by(groups) {
                let spec = ConvSpec::new(c_in, c_out, 4, 3).with_groups(groups).without_bias();
                let v = random_tensor(&[c_in, 6], &mut r);
                let w = random_tensor(&spec.transpose_weight_shape(), &mut r);
                let got = conv_transpose1d(&v, &spec, &w, None).unwrap();
                let want = conv_transpose_oracle(&v, &w, None, 3, groups);
                assert!(got.max_abs_diff(&want) <= 1e-12, "C_in={c_in} C={c_out} G={groups}");
            }
        }
    }
}

#[test]
fn transposed_is_the_adjoint_of_conv() {
    let mut r = rng(7);
    let mut worst: f64 = 0.0;
    for k in 1..=16 {
        for s in 1..=16 {
            for frames in [1, 3, 16 / s.min(16)] {
                let (c_in, c_out) = (cycle(k + s), cycle(k * s));
                let groups = if c_in % 2 == 0 && c_out % 2 == 0 { 2 } else { 1 };
                let spec = ConvSpec::new(c_in, c_out, k, s).with_groups(groups).without_bias();
                let tspec = ConvSpec::new(c_out, c_in, k, s).with_groups(groups).without_bias();
                assert_eq!(spec.weight_shape(), tspec.transpose_weight_shape());
                let len = frames * s;
                let x = random_tensor(&[c_in, len], &mut r);
                let v = random_tensor(&[c_out, frames], &mut r);
                let w = random_tensor(&spec.weight_shape(), &mut r);
                let lhs = conv1d(&x, &spec, &w, None).unwrap().dot(&v);
                let rhs = x.dot(&conv_transpose1d(&v, &tspec, &w, None).unwrap());
                worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
            }
        }
    }
    assert!(worst <= 1e-10, "worst adjoint mismatch {worst:e}");
}

#[test]
fn conv_backward_input_equals_transposed_conv() {
    let mut r = rng(8);
    let spec = ConvSpec::new(3, 4, 5, 2).without_bias();
    let x = random_tensor(&[3, 12], &mut r);
    let w = random_tensor(&spec.weight_shape(), &mut r);
    let g = random_tensor(&[4, 6], &mut r);
    let grads = conv1d_backward(&x, &spec, &w, &g).unwrap();
    let want = conv_transpose_oracle(&g, &w, None, 2, 1);
    assert!(grads.input.max_abs_diff(&want) <= 1e-12);
}

#[test]
fn decoder_geometry_restores_eight_thousand_samples() {
    let spec = ConvSpec::new(512, 1, 21, 10);
    let v = Tensor::zeros(&[512, 800]);
    let w = Tensor::zeros(&spec.transpose_weight_shape());
    let y = conv_transpose1d(&v, &spec, &w, Some(&Tensor::zeros(&[1]))).unwrap();
    assert_eq!(y.shape(), &[1, 8000]);
}

#[test]
fn prelu_example_values() {
    let y = Tensor::full(&[1, 3], -2.0);
    let out = prelu(&y, &Tensor::full(&[1], 0.25)).unwrap();
    assert_eq!(out.data(), &[-0.5, -0.5, -0.5]);
}

fn moments(row: &[f64]) -> (f64, f64) {
    let m = row.iter().sum::<f64>() / row.len() as f64;
    (m, row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / row.len() as f64)
}

#[test]
fn channelwise_norm_moments() {
    let mut r = rng(9);
    let y = random_tensor(&[6, 40], &mut r).map(|v| 3.0 * v + 1.5);
    let out = channelwise_layer_norm(&y, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6])).unwrap();
    for c in 0..6 {
        let (m, v) = moments(out.row(c));
        assert!(m.abs() <= 1e-10 && (v - 1.0).abs() <= 1e-8, "channel {c}: mean {m} var {v}");
    }
}

#[test]
fn global_norm_moments() {
    let mut r = rng(10);
    let y = random_tensor(&[6, 40], &mut r).map(|v| 5.0 * v - 4.0);
    let out = global_layer_norm(&y, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6])).unwrap();
    let (m, v) = moments(out.data());
    assert!(m.abs() <= 1e-10 && (v - 1.0).abs() <= 1e-8, "mean {m} var {v}");
}

#[test]
fn upsample_matches_index_oracle() {
    let mut r = rng(11);
    for m in 1..=5 {
        let u = random_tensor(&[3, 7], &mut r);
        let out = nearest_upsample(&u, m).unwrap();
        assert_eq!(out.shape(), &[3, 7 * m]);
        for i in 0..3 {
            for j in 0..7 * m {
                assert_eq!(out.row(i)[j], u.row(i)[j / m]);
            }
        }
    }
    let u = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
    assert_eq!(nearest_upsample(&u, 2).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
}

#[test]
fn softmax_masks_sum_to_one_for_three_sources() {
    let mut r = rng(12);
    let z = random_tensor(&[3 * 4, 9], &mut r).map(|v| 20.0 * v);
    let m = softmax_stacked(&z, 3).unwrap();
    for c in 0..4 {
        for t in 0..9 {
            let s: f64 = (0..3).map(|n| m.row(n * 4 + c)[t]).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn conv_is_linear_in_its_input(seed in 0u64..1000, a in -3.0f64..3.0) {
        let mut r = rng(seed);
        let spec = ConvSpec::new(2, 3, 4, 2).without_bias();
        let x1 = random_tensor(&[2, 10], &mut r);
        let x2 = random_tensor(&[2, 10], &mut r);
        let w = random_tensor(&spec.weight_shape(), &mut r);
        let mut mix = x1.map(|v| a * v);
        mix.add_assign(&x2).unwrap();
        let mut want = conv1d(&x1, &spec, &w, None).unwrap().map(|v| a * v);
        want.add_assign(&conv1d(&x2, &spec, &w, None).unwrap()).unwrap();
        prop_assert!(conv1d(&mix, &spec, &w, None).unwrap().max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn conv_output_length_is_floor(len in 1usize..64, s in 1usize..8, k in 1usize..9) {
        prop_assume!(len >= s);
        let spec = ConvSpec::new(1, 1, k, s);
        let y = conv1d(&Tensor::zeros(&[1, len]), &spec, &Tensor::zeros(&spec.weight_shape()), Some(&Tensor::zeros(&[1]))).unwrap();
        prop_assert_eq!(y.shape(), &[1, len / s]);
    }
}
