//! Finite-difference gradient checks over the differentiable building blocks.

use std::sync::Arc;

use rand::Rng;
use voxresnet::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Graph, NodeId};
use voxresnet::kernels::{Mode, RunningStats, BN_EPSILON};
use voxresnet::loss::weighted_loss;
use voxresnet::netspec::{build_voxresnet, ForwardCtx, ParamLayout, Params, VoxResModuleSpec};
use voxresnet::{ConvSpec, Tensor};

use super::{random_tensor, rng};

fn opts() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-4,
        tolerance: 1e-4,
        max_coords_per_param: None,
        seed: 5,
    }
}

/// Loss = <f(params), R> for a fixed random R of the output's shape.
fn projected<F>(seed: u64, params: Vec<Tensor<f64>>, out_shape: &[usize], f: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> voxresnet::Result<NodeId>,
{
    let r = random_tensor::<f64>(out_shape, &mut rng(seed));
    grad_check(
        &params,
        |g, p| {
            let y = f(g, p)?;
            g.dot_const(y, r.clone())
        },
        &opts(),
    )
    .unwrap()
}

pub fn conv3d() -> GradCheckReport {
    let mut r = rng(101);
    let spec = ConvSpec::cubic(3, 3, 2, 1).with_bias(true);
    let params = vec![
        random_tensor(&[2, 2, 5, 5, 5], &mut r),
        random_tensor(&[3, 2, 3, 3, 3], &mut r),
        random_tensor(&[3], &mut r),
    ];
    projected(1, params, &[2, 3, 3, 3, 3], move |g, p| g.conv3d(p[0], p[1], Some(p[2]), &spec))
}

pub fn deconv3d() -> GradCheckReport {
    let mut r = rng(102);
    let spec = ConvSpec::cubic(3, 4, 2, 1);
    let params = vec![random_tensor(&[1, 2, 3, 3, 3], &mut r), random_tensor(&[2, 3, 4, 4, 4], &mut r)];
    projected(2, params, &[1, 3, 6, 6, 6], move |g, p| g.deconv3d(p[0], p[1], &spec))
}

pub fn batchnorm_train() -> GradCheckReport {
    let mut r = rng(103);
    let params = vec![
        random_tensor::<f64>(&[2, 3, 3, 3, 3], &mut r).map(|v| 2.0 * v + 0.3),
        random_tensor::<f64>(&[3], &mut r).map(|v| v + 1.5),
        random_tensor(&[3], &mut r),
    ];
    let stats = RunningStats::fresh(3);
    projected(3, params, &[2, 3, 3, 3, 3], move |g, p| {
        Ok(g.batchnorm(p[0], p[1], p[2], Mode::Train, &stats, BN_EPSILON)?.0)
    })
}

pub fn relu_chain() -> GradCheckReport {
    let mut r = rng(104);
    let spec = ConvSpec::cubic(2, 3, 1, 1).with_bias(true);
    let params = vec![
        random_tensor(&[1, 2, 4, 4, 4], &mut r),
        random_tensor(&[2, 2, 3, 3, 3], &mut r),
        random_tensor(&[2], &mut r),
        random_tensor(&[2, 2, 3, 3, 3], &mut r),
        random_tensor(&[2], &mut r),
    ];
    projected(4, params, &[1, 2, 4, 4, 4], move |g, p| {
        let a = g.conv3d(p[0], p[1], Some(p[2]), &spec)?;
        let a = g.relu(a);
        let b = g.conv3d(a, p[3], Some(p[4]), &spec)?;
        Ok(g.relu(b))
    })
}

pub fn softmax_cross_entropy() -> GradCheckReport {
    let mut r = rng(105);
    let logits = random_tensor::<f64>(&[2, 4, 3, 3, 3], &mut r).scale(3.0);
    let labels: Arc<[u8]> = (0..54).map(|_| r.random_range(0..4u8)).collect::<Vec<_>>().into();
    grad_check(&[logits], move |g, p| g.softmax_cross_entropy(p[0], labels.clone()), &opts()).unwrap()
}

pub fn voxres_module() -> GradCheckReport {
    let mut layout = ParamLayout::new();
    let module = VoxResModuleSpec::new("vr", 4, &mut layout);
    let mut params = Params::<f64>::init(&layout, 106).tensors;
    // Non-trivial affine parameters so every path carries gradient.
    let mut r = rng(106);
    for (t, info) in params.iter_mut().zip(&layout.params) {
        if !info.kind.is_weight() {
            *t = t.zip_map(&random_tensor(t.shape(), &mut r), |a, b| a + 0.3 * b).unwrap();
        }
    }
    let n_layout = params.len();
    params.push(random_tensor(&[1, 4, 4, 4, 4], &mut r));
    let stats: Vec<RunningStats<f64>> = layout.bn.iter().map(|b| RunningStats::fresh(b.channels)).collect();
    projected(6, params, &[1, 4, 4, 4, 4], move |g, p| {
        let mut ctx = ForwardCtx {
            graph: g,
            params: &p[..n_layout],
            stats: &stats,
            mode: Mode::Train,
            batch_stats: vec![None; stats.len()],
        };
        Ok(module.forward_graph(&mut ctx, p[n_layout])?.0)
    })
}

/// Width-scaled network (4/8-channel stages), input 1×2×16³, full deep-supervision loss.
pub fn full_network() -> GradCheckReport {
    let net = build_voxresnet(2, 4, 0.125).unwrap();
    let params = Params::<f64>::init(&net.layout, 107);
    let mut r = rng(107);
    let x = random_tensor::<f64>(&[1, 2, 16, 16, 16], &mut r);
    let labels: Arc<[u8]> = (0..4096).map(|_| r.random_range(0..4u8)).collect::<Vec<_>>().into();
    let stats = params.bn_stats.clone();
    let layout = net.layout.clone();
    grad_check(
        &params.tensors,
        move |g, p| {
            let input = g.input(x.clone());
            let pass = net.forward_graph(g, p, &stats, input, Mode::Train)?;
            Ok(weighted_loss(g, &pass, labels.clone(), p, &layout, 5e-4, 0.5)?.total)
        },
        &GradCheckOptions {
            max_coords_per_param: Some(12),
            ..opts()
        },
    )
    .unwrap()
}

pub fn max_channels_of_full_network_case() -> usize {
    let net = build_voxresnet(2, 4, 0.125).unwrap();
    net.conv_layers()
        .iter()
        .map(|c| c.spec.out_channels)
        .filter(|&c| c != net.num_classes)
        .max()
        .unwrap()
}

pub type Case = (&'static str, fn() -> GradCheckReport);

pub const CASES: &[Case] = &[
    ("conv3d", conv3d),
    ("deconv3d", deconv3d),
    ("batchnorm_train", batchnorm_train),
    ("relu_chain", relu_chain),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("voxres_module", voxres_module),
    ("full_network", full_network),
];
