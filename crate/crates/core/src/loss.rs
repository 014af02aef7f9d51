//! Deeply supervised training objective.
//!
//! `L = λ·Σ‖W‖² + Σ_α w_α·CE(aux_α) + CE(final)` where every cross-entropy
//! is the voxel mean computed from logits, and `w_α` decays from its initial
//! value toward a small floor as training proceeds.

use std::sync::Arc;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::netspec::{ForwardPass, ParamLayout, NUM_HEADS};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// L2 trade-off λ.
    pub lambda: f64,
    pub aux_weight_init: f64,
    pub aux_floor: f64,
    /// Multiplicative factor applied once per `decay_interval` iterations.
    pub aux_decay: f64,
    pub decay_interval: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 5e-4,
            aux_weight_init: 1.0,
            aux_floor: 1e-3,
            aux_decay: 0.5,
            decay_interval: 1000,
        }
    }
}

impl LossConfig {
    /// Defaults with the decay interval set to one eighth of the run.
    pub fn for_iterations(max_iterations: usize) -> Self {
        Self {
            decay_interval: (max_iterations / 8).max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be a finite value >= 0"));
        }
        if !(self.aux_floor > 0.0 && self.aux_floor <= self.aux_weight_init) {
            return Err(Error::invalid("aux weights need 0 < aux_floor <= aux_weight_init"));
        }
        if !(self.aux_decay > 0.0 && self.aux_decay <= 1.0) {
            return Err(Error::invalid("aux_decay must lie in (0, 1]"));
        }
        if self.decay_interval == 0 {
            return Err(Error::invalid("decay_interval must be >= 1"));
        }
        Ok(())
    }
}

/// `max(floor, init · decay^⌊iteration / interval⌋)`.
pub fn aux_weight(config: &LossConfig, iteration: usize) -> f64 {
    let steps = (iteration / config.decay_interval.max(1)).min(i32::MAX as usize) as i32;
    (config.aux_weight_init * config.aux_decay.powi(steps)).max(config.aux_floor)
}

/// Nodes of the assembled objective.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: NodeId,
    pub final_ce: NodeId,
    pub aux_ce: [NodeId; NUM_HEADS],
    pub regularizer: Option<NodeId>,
    pub aux_weight: f64,
}

/// Σ‖W‖² over conv and deconv weights (biases and BN affine excluded).
pub fn l2_regularizer<T: Real>(graph: &mut Graph<T>, params: &[NodeId], layout: &ParamLayout) -> Result<Option<NodeId>> {
    let mut acc: Option<NodeId> = None;
    for (info, &node) in layout.params.iter().zip(params) {
        if !info.kind.is_weight() {
            continue;
        }
        let sq = graph.sum_squares(node);
        acc = Some(match acc {
            Some(a) => graph.add(a, sq)?,
            None => sq,
        });
    }
    Ok(acc)
}

/// Records the full objective on `graph` with the scheduled auxiliary weight.
///
/// `labels` holds one class id per voxel of the logits' `(N, D, H, W)` grid.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    graph: &mut Graph<T>,
    pass: &ForwardPass<T>,
    labels: Arc<[u8]>,
    params: &[NodeId],
    layout: &ParamLayout,
    config: &LossConfig,
    iteration: usize,
) -> Result<LossTerms> {
    config.validate()?;
    let w = aux_weight(config, iteration);
    weighted_loss(graph, pass, labels, params, layout, config.lambda, w)
}

/// Objective with an explicit auxiliary weight `w` (any `w >= 0`).
pub fn weighted_loss<T: Real>(
    graph: &mut Graph<T>,
    pass: &ForwardPass<T>,
    labels: Arc<[u8]>,
    params: &[NodeId],
    layout: &ParamLayout,
    lambda: f64,
    w: f64,
) -> Result<LossTerms> {
    if !(lambda >= 0.0 && lambda.is_finite() && w >= 0.0 && w.is_finite()) {
        return Err(Error::invalid(format!("lambda {lambda} and aux weight {w} must be finite and >= 0")));
    }
    let final_ce = graph.softmax_cross_entropy(pass.final_logits, labels.clone())?;
    let mut total = final_ce;
    let mut aux_ce = [final_ce; NUM_HEADS];
    for (slot, &logits) in aux_ce.iter_mut().zip(&pass.aux_logits) {
        let ce = graph.softmax_cross_entropy(logits, labels.clone())?;
        *slot = ce;
        let weighted = graph.scale(ce, T::from_f64_lossy(w));
        total = graph.add(total, weighted)?;
    }
    let regularizer = if lambda > 0.0 {
        let reg = l2_regularizer(graph, params, layout)?.map(|r| graph.scale(r, T::from_f64_lossy(lambda)));
        if let Some(r) = reg {
            total = graph.add(total, r)?;
        }
        reg
    } else {
        None
    };
    Ok(LossTerms {
        total,
        final_ce,
        aux_ce,
        regularizer,
        aux_weight: w,
    })
}
