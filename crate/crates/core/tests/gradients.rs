mod common;

use std::sync::Arc;

use common::grad_cases;
use common::{random_tensor, rng};
use voxresnet::autodiff::{grad_check, relative_error, GradCheckOptions, Graph};
use voxresnet::kernels::{Mode, RunningStats, BN_EPSILON};
use voxresnet::loss::weighted_loss;
use voxresnet::netspec::ForwardPass;
use voxresnet::Tensor;

fn assert_passes(name: &str, report: voxresnet::autodiff::GradCheckReport) {
    assert!(report.passed(), "{name}: max relative error {:.3e}", report.max_rel_error());
}

#[test]
fn conv3d_gradients() {
    assert_passes("conv3d", grad_cases::conv3d());
}

#[test]
fn deconv3d_gradients() {
    assert_passes("deconv3d", grad_cases::deconv3d());
}

#[test]
fn batchnorm_train_gradients() {
    assert_passes("batchnorm", grad_cases::batchnorm_train());
}

#[test]
fn relu_chain_gradients() {
    assert_passes("relu chain", grad_cases::relu_chain());
}

#[test]
fn cross_entropy_gradients() {
    assert_passes("cross entropy", grad_cases::softmax_cross_entropy());
}

#[test]
fn voxres_module_gradients() {
    assert_passes("voxres", grad_cases::voxres_module());
}

#[test]
fn infer_mode_batchnorm_and_crop_gradients() {
    let mut r = rng(31);
    let params = vec![
        random_tensor::<f64>(&[1, 2, 5, 5, 5], &mut r),
        random_tensor::<f64>(&[2], &mut r),
        random_tensor::<f64>(&[2], &mut r),
    ];
    let stats = RunningStats {
        mean: vec![0.2, -0.1],
        var: vec![1.3, 0.7],
    };
    let proj = random_tensor::<f64>(&[1, 2, 3, 2, 4], &mut r);
    let report = grad_check(
        &params,
        |g, p| {
            let (y, _) = g.batchnorm(p[0], p[1], p[2], Mode::Infer, &stats, BN_EPSILON)?;
            let s = g.scale(y, 1.7);
            let a = g.add(s, p[0])?;
            let c = g.crop(a, [1, 2, 0], [3, 2, 4])?;
            g.dot_const(c, proj.clone())
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert_passes("infer batchnorm + crop", report);
}

#[test]
fn sum_and_sum_squares_gradients() {
    let p = vec![random_tensor::<f64>(&[3, 4], &mut rng(32))];
    let report = grad_check(
        &p,
        |g, n| {
            let a = g.sum_squares(n[0]);
            let b = g.sum(n[0]);
            let b = g.scale(b, 0.3);
            g.add(a, b)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert_passes("sum", report);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.param(0, Tensor::zeros(&[2])).unwrap();
    assert!(g.backward(x).is_err());
    assert!(g.param(0, Tensor::zeros(&[2])).is_err());
}

#[test]
fn relative_error_uses_the_larger_magnitude() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    assert!(relative_error(0.0, 1e-12) <= 1e-4);
}

/// d(loss)/d(logits of one aux head) is proportional to its weight w_α.
#[test]
fn aux_head_gradient_scales_linearly_with_its_weight() {
    let mut r = rng(33);
    let logits: Vec<Tensor<f64>> = (0..5).map(|_| random_tensor(&[1, 3, 2, 2, 2], &mut r)).collect();
    let labels: Arc<[u8]> = (0..8).map(|i| (i % 3) as u8).collect::<Vec<_>>().into();
    let layout = voxresnet::netspec::ParamLayout::new();
    let grad_for = |w: f64| {
        let mut g = Graph::new();
        let nodes: Vec<_> = logits.iter().enumerate().map(|(i, t)| g.param(i, t.clone()).unwrap()).collect();
        let pass = ForwardPass {
            aux_logits: [nodes[0], nodes[1], nodes[2], nodes[3]],
            final_logits: nodes[4],
            batch_stats: Vec::new(),
        };
        let terms = weighted_loss(&mut g, &pass, labels.clone(), &[], &layout, 0.0, w).unwrap();
        g.backward(terms.total).unwrap().get(0).unwrap().clone()
    };
    let g1 = grad_for(0.3);
    let g2 = grad_for(0.6);
    assert!(g1.sum_squares() > 0.0);
    assert!(g2.max_abs_diff(&g1.scale(2.0)).unwrap() < 1e-15);
    assert_eq!(grad_for(0.0).sum_squares(), 0.0);
}

#[test]
fn full_width_scaled_network_gradients() {
    assert!(grad_cases::max_channels_of_full_network_case() <= 8);
    let report = grad_cases::full_network();
    assert_passes("full network", report);
}

/// A pre-activation 1e-5 away from zero sits inside a ±1e-4 probe. Plain
/// central differences would read a slope of 0.55 there instead of 1.
#[test]
fn probes_that_straddle_a_relu_kink_keep_the_unperturbed_gates() {
    let x = Tensor::<f64>::new(vec![3], vec![1e-5, 0.7, -0.4]).unwrap();
    let report = grad_check(
        &[x],
        |g, p| {
            let r = g.relu(p[0]);
            Ok(g.sum(r))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert_passes("kink", report.clone());
    assert_eq!(report.coords_gated(), 1);
    assert_eq!(report.coords_checked(), 3);
}

#[test]
fn frozen_gates_reproduce_the_original_forward_pass() {
    let x = random_tensor::<f64>(&[2, 5], &mut rng(34));
    let mut g = Graph::new();
    let n = g.input(x.clone());
    let r = g.relu(n);
    let gates: Arc<[bool]> = g.relu_pattern().into();
    let mut frozen = Graph::with_frozen_gates(gates);
    let n2 = frozen.input(x);
    let r2 = frozen.relu(n2);
    assert_eq!(g.value(r), frozen.value(r2));
}
