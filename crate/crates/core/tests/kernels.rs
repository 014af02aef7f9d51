mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use voxresnet::kernels::*;
use voxresnet::tensor::reflect_index;
use voxresnet::{ConvSpec, Tensor};

fn random_spec(rng: &mut rand_chacha::ChaCha8Rng, cout: usize, bias: bool) -> ConvSpec {
    ConvSpec {
        out_channels: cout,
        kernel: [0; 3].map(|_| rng.random_range(1..=3)),
        stride: [0; 3].map(|_| rng.random_range(1..=2)),
        padding: [0; 3].map(|_| rng.random_range(0..=1)),
        has_bias: bias,
    }
}

#[test]
fn conv3d_matches_brute_force() {
    let mut rng = rng(11);
    for _ in 0..120 {
        let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let ext = [0; 3].map(|_| rng.random_range(3..=6));
        let bias = rng.random_bool(0.5);
        let spec = random_spec(&mut rng, cout, bias);
        let x = random_tensor::<f32>(&[rng.random_range(1..=2), cin, ext[0], ext[1], ext[2]], &mut rng);
        let mut wshape = vec![cout, cin];
        wshape.extend(spec.kernel);
        let w = random_tensor::<f32>(&wshape, &mut rng);
        let b = random_tensor::<f32>(&[cout], &mut rng);
        let b = bias.then_some(&b);
        let fast = conv3d(&x, &w, b, &spec).unwrap();
        let slow = brute_conv3d(&x, &w, b, &spec);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-5, "{spec:?}");
    }
}

#[test]
fn deconv3d_matches_brute_force() {
    let mut rng = rng(12);
    for _ in 0..120 {
        let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let ext = [0; 3].map(|_| rng.random_range(2..=6));
        let mut spec = random_spec(&mut rng, cout, false);
        spec.kernel = spec.kernel.map(|k| k + 1);
        let x = random_tensor::<f32>(&[1, cin, ext[0], ext[1], ext[2]], &mut rng);
        let mut wshape = vec![cin, cout];
        wshape.extend(spec.kernel);
        let w = random_tensor::<f32>(&wshape, &mut rng);
        let fast = deconv3d(&x, &w, &spec).unwrap();
        let slow = brute_deconv3d(&x, &w, &spec);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-5, "{spec:?}");
    }
}

#[test]
fn deconv_is_the_adjoint_of_conv() {
    // <conv(x), y> == <x, deconv(y)> for the same weights and geometry.
    let mut rng = rng(13);
    for _ in 0..30 {
        let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let spec = ConvSpec::cubic(cout, 4, 2, 1);
        let ext = [0; 3].map(|_| 2 * rng.random_range(2..=4));
        let x = random_tensor::<f64>(&[1, cin, ext[0], ext[1], ext[2]], &mut rng);
        let w = random_tensor::<f64>(&[cout, cin, 4, 4, 4], &mut rng);
        let cx = conv3d(&x, &w, None, &spec).unwrap();
        let y = random_tensor::<f64>(cx.shape(), &mut rng);
        let back = conv3d_backward_input(&y, &w, &spec, ext).unwrap();
        let lhs = cx.dot(&y).unwrap();
        let rhs = x.dot(&back).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));

        // deconv with a [Cin', Cout'] = [cout, cin] weight is that same map.
        let dspec = ConvSpec::cubic(cin, 4, 2, 1);
        let d = deconv3d(&y, &w, &dspec).unwrap();
        assert!(d.max_abs_diff(&back).unwrap() < 1e-12);
    }
}

#[test]
fn deconv_doubles_extents_with_the_head_geometry() {
    for f in [2usize, 4] {
        let spec = ConvSpec::cubic(3, 2 * f, f, f / 2);
        let x = Tensor::<f32>::zeros(&[1, 2, 5, 6, 7]);
        let w = Tensor::<f32>::zeros(&[2, 3, 2 * f, 2 * f, 2 * f]);
        let y = deconv3d(&x, &w, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 3, 5 * f, 6 * f, 7 * f]);
    }
}

#[test]
fn batchnorm_train_normalizes_each_channel() {
    let mut rng = rng(14);
    let x = random_tensor::<f64>(&[2, 3, 4, 4, 4], &mut rng).map(|v| 3.0 * v + 1.5);
    let gamma = Tensor::full(&[3], 1.0);
    let beta = Tensor::zeros(&[3]);
    let (y, saved) = batchnorm_train(&x, &gamma, &beta, BN_EPSILON).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..2)
            .flat_map(|n| y.data()[(n * 3 + c) * 64..(n * 3 + c + 1) * 64].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / 128.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 128.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - saved.batch_var[c] / (saved.batch_var[c] + BN_EPSILON)).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_matches_standalone_oracle() {
    let mut rng = rng(15);
    let logits = random_tensor::<f64>(&[2, 4, 3, 3, 3], &mut rng).scale(5.0);
    let labels: Vec<u8> = (0..54).map(|_| rng.random_range(0..4)).collect();
    let (loss, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
    assert!((loss - brute_cross_entropy(&logits, &labels)).abs() < 1e-12);
    assert_eq!(probs.shape(), logits.shape());
    assert!(softmax_cross_entropy(&logits, &[9; 54]).is_err());
}

#[test]
fn cross_entropy_is_stable_for_huge_logits() {
    let logits = Tensor::<f32>::new(vec![1, 2, 1, 1, 1], vec![1000.0, -1000.0]).unwrap();
    let (loss, probs) = softmax_cross_entropy(&logits, &[0]).unwrap();
    assert!(loss.is_finite() && loss.abs() < 1e-6);
    assert!(probs.all_finite());
    let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
    assert!((loss - 2000.0).abs() < 1e-2);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 3 * 8)) {
        let t = Tensor::new(vec![1, 3, 2, 2, 2], vals).unwrap();
        let p = softmax_channels(&t).unwrap();
        for v in 0..8 {
            let s: f64 = (0..3).map(|c| p.data()[c * 8 + v]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert!(p.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn reflect_index_stays_in_range_and_mirrors(i in -200isize..200, n in 1usize..12) {
        let r = reflect_index(i, n);
        prop_assert!(r < n);
        prop_assert_eq!(r, reflect_index(i + 2 * n as isize, n));
        prop_assert_eq!(r, reflect_index(-1 - i, n));
    }

    #[test]
    fn relu_is_idempotent_and_non_negative(vals in prop::collection::vec(-5.0f32..5.0, 8)) {
        let t = Tensor::new(vec![1, 1, 2, 2, 2], vals).unwrap();
        let r = relu(&t);
        prop_assert!(r.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(relu(&r), r);
    }

    #[test]
    fn conv_output_extents_follow_the_formula(e in 3usize..20, k in 1usize..4, s in 1usize..3, p in 0usize..2) {
        let spec = ConvSpec::cubic(1, k, s, p);
        let out = spec.conv_output([e; 3]).unwrap();
        prop_assert_eq!(out[0], (e + 2 * p - k) / s + 1);
    }
}
