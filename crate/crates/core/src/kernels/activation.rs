//! Pointwise activations, channel softmax and the softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Upstream gradient masked by `x > 0`; the derivative at exactly zero is zero.
pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(x, |g, v| if v > T::zero() { g } else { T::zero() })
}

/// Per-voxel softmax over the channel axis of `[N, C, ...]`.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() < 2 {
        return Err(Error::shape("rank", 2, x.ndim()));
    }
    let n = x.shape()[0];
    let c = x.shape()[1];
    if c < 2 {
        return Err(Error::invalid("softmax over channels needs at least 2 channels"));
    }
    let inner: usize = x.shape()[2..].iter().product();
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        let base = b * c * inner;
        for v in 0..inner {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(src[base + ch * inner + v]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                let e = (src[base + ch * inner + v] - max).exp();
                out[base + ch * inner + v] = e;
                total += e;
            }
            for ch in 0..c {
                let o = &mut out[base + ch * inner + v];
                *o = *o / total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Mean voxel cross-entropy of `logits [N, C, ...]` against class ids.
///
/// Evaluated through log-sum-exp, never through the log of a probability.
/// Returns the loss and the softmax probabilities, which are also the
/// backward's saved values.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<(T, Tensor<T>)> {
    if logits.ndim() < 2 {
        return Err(Error::shape("rank", 2, logits.ndim()));
    }
    let n = logits.shape()[0];
    let c = logits.shape()[1];
    let inner: usize = logits.shape()[2..].iter().product();
    if labels.len() != n * inner {
        return Err(Error::shape("label voxels", n * inner, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let src = logits.data();
    let mut total = T::zero();
    for b in 0..n {
        let base = b * c * inner;
        for v in 0..inner {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(src[base + ch * inner + v]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                s += (src[base + ch * inner + v] - max).exp();
            }
            let target = src[base + labels[b * inner + v] as usize * inner + v];
            total += max + s.ln() - target;
        }
    }
    let count = T::from_usize(n * inner).unwrap_or_else(T::one);
    Ok((total / count, softmax_channels(logits)?))
}

/// Gradient of the mean cross-entropy: `scale·(p − onehot)/voxels`.
pub fn softmax_cross_entropy_backward<T: Real>(probs: &Tensor<T>, labels: &[u8], scale: T) -> Tensor<T> {
    let n = probs.shape()[0];
    let c = probs.shape()[1];
    let inner: usize = probs.shape()[2..].iter().product();
    let factor = scale / T::from_usize(n * inner).unwrap_or_else(T::one);
    let mut grad = probs.data().to_vec();
    for b in 0..n {
        for v in 0..inner {
            let i = b * c * inner + labels[b * inner + v] as usize * inner + v;
            grad[i] = grad[i] - T::one();
        }
    }
    grad.iter_mut().for_each(|g| *g = *g * factor);
    Tensor::new(probs.shape().to_vec(), grad).expect("shape preserved")
}
