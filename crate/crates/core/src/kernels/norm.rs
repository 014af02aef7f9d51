//! Per-channel batch normalization over `(N, spatial)`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

/// Exponential moving averages of per-channel mean and (biased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    /// Statistics of a freshly initialized layer: mean 0, variance 1.
    pub fn fresh(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn empty() -> Self {
        Self {
            mean: Vec::new(),
            var: Vec::new(),
        }
    }

    pub fn is_populated(&self, channels: usize) -> bool {
        self.mean.len() == channels && self.var.len() == channels
    }

    /// `stat ← momentum·stat + (1 − momentum)·batch`.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T], momentum: T) {
        let keep = momentum;
        let take = T::one() - momentum;
        for (m, &b) in self.mean.iter_mut().zip(batch_mean) {
            *m = keep * *m + take * b;
        }
        for (v, &b) in self.var.iter_mut().zip(batch_var) {
            *v = keep * *v + take * b;
        }
    }

    pub fn cast<U: Real>(&self) -> RunningStats<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        RunningStats {
            mean: conv(&self.mean),
            var: conv(&self.var),
        }
    }
}

/// Values a train-mode forward saves for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

fn layout<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::shape("rank", 2, x.ndim()));
    }
    let n = x.shape()[0];
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    if gamma.shape() != [c] {
        return Err(Error::shape("gamma", c, gamma.len()));
    }
    if beta.shape() != [c] {
        return Err(Error::shape("beta", c, beta.len()));
    }
    Ok((n, c, inner))
}

fn channel_slices<T>(data: &[T], n: usize, c: usize, inner: usize, ch: usize) -> impl Iterator<Item = &[T]> {
    (0..n).map(move |b| &data[(b * c + ch) * inner..(b * c + ch + 1) * inner])
}

/// Train-mode normalization with batch statistics.
pub fn batchnorm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    if eps <= T::zero() {
        return Err(Error::invalid("batchnorm epsilon must be positive"));
    }
    let (n, c, inner) = layout(x, gamma, beta)?;
    let count = T::from_usize(n * inner).unwrap_or_else(T::one);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let sum: T = channel_slices(x.data(), n, c, inner, ch).map(|s| s.iter().copied().sum::<T>()).sum();
        let m = sum / count;
        let sq: T = channel_slices(x.data(), n, c, inner, ch)
            .map(|s| s.iter().map(|&v| (v - m) * (v - m)).sum::<T>())
            .sum();
        mean[ch] = m;
        var[ch] = sq / count;
        inv_std[ch] = T::one() / (var[ch] + eps).sqrt();
    }
    let mut normalized = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * inner..(b * c + ch + 1) * inner;
            let (g, bt, m, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in range {
                let xh = (x.data()[i] - m) * is;
                normalized[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BatchNormSaved {
            normalized: Tensor::new(shape, normalized)?,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Infer-mode normalization: `(x − μ_run)/sqrt(σ²_run + ε)·γ + β`.
pub fn batchnorm_infer<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (n, c, inner) = layout(x, gamma, beta)?;
    if !stats.is_populated(c) {
        return Err(Error::invalid(format!(
            "infer-mode batchnorm needs running statistics for {c} channels, found {}",
            stats.mean.len()
        )));
    }
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let (g, bt, m, v) = (gamma.data()[ch], beta.data()[ch], stats.mean[ch], stats.var[ch]);
            for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                y[i] = (x.data()[i] - m) / (v + eps).sqrt() * g + bt;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

/// Full train-mode backward through the batch statistics.
///
/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_train_backward<T: Real>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BatchNormSaved<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    grad_out.expect_same_shape(&saved.normalized)?;
    let n = grad_out.shape()[0];
    let c = grad_out.shape()[1];
    let inner: usize = grad_out.shape()[2..].iter().product();
    let count = T::from_usize(n * inner).unwrap_or_else(T::one);
    let dy = grad_out.data();
    let xh = saved.normalized.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for b in 0..n {
            for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] * saved.inv_std[ch] / count;
            for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                dx[i] = scale * (count * dy[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Backward of [`batchnorm_infer`], where the statistics are constants.
pub fn batchnorm_infer_backward<T: Real>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &RunningStats<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    grad_out.expect_same_shape(x)?;
    let n = x.shape()[0];
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let denom = (stats.var[ch] + eps).sqrt();
            for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                let dy = grad_out.data()[i];
                dx[i] = dy / denom * gamma.data()[ch];
                dgamma[ch] += dy * (x.data()[i] - stats.mean[ch]) / denom;
                dbeta[ch] += dy;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}
