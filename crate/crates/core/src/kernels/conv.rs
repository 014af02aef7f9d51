//! 3-d convolution and transposed convolution.
//!
//! The fast path lowers each sample to column blocks (`im2col`) and runs a
//! gemm per block. Blocks have a fixed size derived from the layer shape, so
//! the reduction order never depends on thread count. [`conv3d_direct`] is
//! the plain loop nest the fast path is checked against.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, ConvSpec, Real, Tensor, View};

/// Upper bound on elements in one column block.
const BLOCK_ELEMS: usize = 1 << 20;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    in_ch: usize,
    out_ch: usize,
    in_ext: [usize; 3],
    out_ext: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Geometry {
    fn new(in_ch: usize, out_ch: usize, in_ext: [usize; 3], spec: &ConvSpec) -> Result<Self> {
        Ok(Self {
            in_ch,
            out_ch,
            in_ext,
            out_ext: spec.conv_output(in_ext)?,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    fn rows(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    fn in_len(&self) -> usize {
        self.in_ext.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_ext.iter().product()
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    fn block_cols(&self) -> usize {
        let total = self.out_len().max(1);
        (BLOCK_ELEMS / self.rows().max(1)).clamp(64, total.max(64)).min(total)
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize)> {
        let total = self.out_len();
        let step = self.block_cols();
        (0..total).step_by(step.max(1)).map(move |j0| (j0, (j0 + step).min(total)))
    }
}

/// Walks the output positions `[j0, j1)` as runs along the fastest axis.
///
/// Calls `f(offset_in_block, oz, oy, ox0, run)` for each run.
fn for_each_run(g: &Geometry, j0: usize, j1: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let [_, oh, ow] = g.out_ext;
    let plane = oh * ow;
    let mut j = j0;
    while j < j1 {
        let oz = j / plane;
        let rem = j % plane;
        let oy = rem / ow;
        let ox0 = rem % ow;
        let run = (ow - ox0).min(j1 - j);
        f(j - j0, oz, oy, ox0, run);
        j += run;
    }
}

fn offset(o: usize, stride: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < extent).then_some(i as usize)
}

/// Fills `col` (`rows × (j1 - j0)`, row-major) from one sample `x`.
fn im2col_block<T: Real>(x: &[T], g: &Geometry, j0: usize, j1: usize, col: &mut [T]) {
    let len = j1 - j0;
    let [id, ih, iw] = g.in_ext;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let mut row = 0;
    for c in 0..g.in_ch {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * len..(row + 1) * len];
                    for_each_run(g, j0, j1, |o, oz, oy, ox0, run| {
                        let out = &mut dst[o..o + run];
                        match (offset(oz, sd, a, pd, id), offset(oy, sh, b, ph, ih)) {
                            (Some(iz), Some(iy)) => {
                                let base = (iz * ih + iy) * iw;
                                for (t, v) in out.iter_mut().enumerate() {
                                    *v = match offset(ox0 + t, sw, e, pw, iw) {
                                        Some(ix) => xc[base + ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                            _ => out.fill(T::zero()),
                        }
                    });
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `col` back into one sample `dx`; the adjoint of [`im2col_block`].
fn col2im_block<T: Real>(col: &[T], g: &Geometry, j0: usize, j1: usize, dx: &mut [T]) {
    let len = j1 - j0;
    let [id, ih, iw] = g.in_ext;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let mut row = 0;
    for c in 0..g.in_ch {
        let xc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * len..(row + 1) * len];
                    for_each_run(g, j0, j1, |o, oz, oy, ox0, run| {
                        if let (Some(iz), Some(iy)) = (offset(oz, sd, a, pd, id), offset(oy, sh, b, ph, ih)) {
                            let base = (iz * ih + iy) * iw;
                            for (t, &v) in src[o..o + run].iter().enumerate() {
                                if let Some(ix) = offset(ox0 + t, sw, e, pw, iw) {
                                    xc[base + ix] += v;
                                }
                            }
                        }
                    });
                    row += 1;
                }
            }
        }
    }
}

/// `y = W · im2col(x)` for one sample; `y` is `out_ch × out_len`.
fn forward_sample<T: Real>(x: &[T], w: &[T], g: &Geometry, y: &mut [T]) {
    let rows = g.rows();
    let total = g.out_len();
    if g.pointwise() {
        gemm(g.out_ch, rows, total, View::rows(w, rows), View::rows(x, total), T::zero(), y, total, 1);
        return;
    }
    let mut col = vec![T::zero(); rows * g.block_cols()];
    for (j0, j1) in g.blocks() {
        let len = j1 - j0;
        let col = &mut col[..rows * len];
        im2col_block(x, g, j0, j1, col);
        gemm(
            g.out_ch,
            rows,
            len,
            View::rows(w, rows),
            View::rows(col, len),
            T::zero(),
            &mut y[j0..],
            total,
            1,
        );
    }
}

/// `dx += col2im(Wᵀ · dy)` for one sample.
fn input_grad_sample<T: Real>(dy: &[T], w: &[T], g: &Geometry, dx: &mut [T]) {
    let rows = g.rows();
    let total = g.out_len();
    if g.pointwise() {
        gemm(rows, g.out_ch, total, View::rows_t(w, rows), View::rows(dy, total), T::one(), dx, total, 1);
        return;
    }
    let mut col = vec![T::zero(); rows * g.block_cols()];
    for (j0, j1) in g.blocks() {
        let len = j1 - j0;
        let col = &mut col[..rows * len];
        gemm(
            rows,
            g.out_ch,
            len,
            View::rows_t(w, rows),
            View::strided(&dy[j0..], total, 1),
            T::zero(),
            col,
            len,
            1,
        );
        col2im_block(col, g, j0, j1, dx);
    }
}

/// `dw += dy · im2col(x)ᵀ` for one sample; `dw` is `out_ch × rows`.
fn weight_grad_sample<T: Real>(x: &[T], dy: &[T], g: &Geometry, dw: &mut [T]) {
    let rows = g.rows();
    let total = g.out_len();
    if g.pointwise() {
        gemm(g.out_ch, total, rows, View::rows(dy, total), View::rows_t(x, total), T::one(), dw, rows, 1);
        return;
    }
    let mut col = vec![T::zero(); rows * g.block_cols()];
    for (j0, j1) in g.blocks() {
        let len = j1 - j0;
        let col = &mut col[..rows * len];
        im2col_block(x, g, j0, j1, col);
        gemm(
            g.out_ch,
            len,
            rows,
            View::strided(&dy[j0..], total, 1),
            View::rows_t(col, len),
            T::one(),
            dw,
            rows,
            1,
        );
    }
}

fn check_weight(weight: &Tensor<impl Real>, lead: [usize; 2], spec: &ConvSpec) -> Result<()> {
    let shape = weight.shape();
    if shape.len() != 5 {
        return Err(Error::shape("weight rank", 5, shape.len()));
    }
    if shape[0] != lead[0] {
        return Err(Error::shape("weight axis 0", lead[0], shape[0]));
    }
    if shape[1] != lead[1] {
        return Err(Error::shape("weight axis 1 (channels)", lead[1], shape[1]));
    }
    for axis in 0..3 {
        if shape[2 + axis] != spec.kernel[axis] {
            return Err(Error::shape(format!("kernel axis {axis}"), spec.kernel[axis], shape[2 + axis]));
        }
    }
    Ok(())
}

fn check_bias<T: Real>(bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<()> {
    match (spec.has_bias, bias) {
        (true, Some(b)) if b.shape() == [spec.out_channels] => Ok(()),
        (true, Some(b)) => Err(Error::shape("bias", spec.out_channels, b.len())),
        (true, None) => Err(Error::invalid("conv spec requires a bias tensor")),
        (false, Some(_)) => Err(Error::invalid("bias given for a conv spec without bias")),
        (false, None) => Ok(()),
    }
}

fn spatial(dims: [usize; 5]) -> [usize; 3] {
    [dims[2], dims[3], dims[4]]
}

/// Convolution of `input [N,C,D,H,W]` with `weight [K,C,kd,kh,kw]`, zero padding.
pub fn conv3d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let dims = input.dims5()?;
    check_weight(weight, [spec.out_channels, dims[1]], spec)?;
    check_bias(bias, spec)?;
    let g = Geometry::new(dims[1], spec.out_channels, spatial(dims), spec)?;
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let mut out = vec![T::zero(); dims[0] * g.out_ch * out_len];
    out.par_chunks_mut(g.out_ch * out_len)
        .zip(input.data().par_chunks(g.in_ch * in_len))
        .for_each(|(y, x)| {
            forward_sample(x, weight.data(), &g, y);
            if let Some(b) = bias {
                for (k, &bk) in b.data().iter().enumerate() {
                    y[k * out_len..(k + 1) * out_len].iter_mut().for_each(|v| *v += bk);
                }
            }
        });
    let [od, oh, ow] = g.out_ext;
    Tensor::new(vec![dims[0], g.out_ch, od, oh, ow], out)
}

/// Gradient of [`conv3d`] with respect to its input of spatial extents `in_ext`.
pub fn conv3d_backward_input<T: Real>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    in_ext: [usize; 3],
) -> Result<Tensor<T>> {
    spec.validate()?;
    let dims = grad_out.dims5()?;
    let wshape = weight.shape();
    if wshape.len() != 5 {
        return Err(Error::shape("weight rank", 5, wshape.len()));
    }
    let in_ch = wshape[1];
    check_weight(weight, [dims[1], in_ch], spec)?;
    let g = Geometry::new(in_ch, dims[1], in_ext, spec)?;
    if g.out_ext != spatial(dims) {
        return Err(Error::invalid(format!(
            "gradient extents {:?} do not match conv output {:?}",
            spatial(dims),
            g.out_ext
        )));
    }
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let mut dx = vec![T::zero(); dims[0] * in_ch * in_len];
    dx.par_chunks_mut(in_ch * in_len)
        .zip(grad_out.data().par_chunks(g.out_ch * out_len))
        .for_each(|(dx, dy)| input_grad_sample(dy, weight.data(), &g, dx));
    Tensor::new(vec![dims[0], in_ch, in_ext[0], in_ext[1], in_ext[2]], dx)
}

/// Gradient of [`conv3d`] with respect to its weight.
pub fn conv3d_backward_weight<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let dims = input.dims5()?;
    let gdims = grad_out.dims5()?;
    if gdims[0] != dims[0] {
        return Err(Error::shape("N", dims[0], gdims[0]));
    }
    let g = Geometry::new(dims[1], gdims[1], spatial(dims), spec)?;
    if g.out_ext != spatial(gdims) {
        return Err(Error::invalid("gradient extents do not match conv output"));
    }
    let rows = g.rows();
    let mut dw = vec![T::zero(); g.out_ch * rows];
    let (in_len, out_len) = (g.in_len(), g.out_len());
    for (x, dy) in input
        .data()
        .chunks(g.in_ch * in_len)
        .zip(grad_out.data().chunks(g.out_ch * out_len))
    {
        weight_grad_sample(x, dy, &g, &mut dw);
    }
    let [kd, kh, kw] = spec.kernel;
    Tensor::new(vec![g.out_ch, g.in_ch, kd, kh, kw], dw)
}

/// Per-channel sum of `grad_out [N,K,...]`: the bias gradient.
pub fn conv3d_backward_bias<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k, d, h, w] = grad_out.dims5()?;
    let len = d * h * w;
    let mut db = vec![T::zero(); k];
    for b in 0..n {
        for (c, acc) in db.iter_mut().enumerate() {
            let start = (b * k + c) * len;
            *acc += grad_out.data()[start..start + len].iter().copied().sum::<T>();
        }
    }
    Tensor::new(vec![k], db)
}

/// Transposed convolution of `input [N,Cin,D,H,W]` with `weight [Cin,Cout,kd,kh,kw]`.
///
/// `spec.stride` is the upsampling factor and `spec.out_channels` is `Cout`.
/// This is the exact adjoint of [`conv3d`] with the same spec and weight.
pub fn deconv3d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    if spec.has_bias {
        return Err(Error::invalid("deconv3d carries no bias"));
    }
    let dims = input.dims5()?;
    check_weight(weight, [dims[1], spec.out_channels], spec)?;
    let out_ext = spec.deconv_output(spatial(dims))?;
    conv3d_backward_input(input, weight, spec, out_ext)
}

/// Gradient of [`deconv3d`] with respect to its input.
pub fn deconv3d_backward_input<T: Real>(grad_out: &Tensor<T>, weight: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let wshape = weight.shape();
    if wshape.len() != 5 {
        return Err(Error::shape("weight rank", 5, wshape.len()));
    }
    let conv_spec = ConvSpec {
        out_channels: wshape[0],
        has_bias: false,
        ..*spec
    };
    conv3d(grad_out, weight, None, &conv_spec)
}

/// Gradient of [`deconv3d`] with respect to its weight.
pub fn deconv3d_backward_weight<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    conv3d_backward_weight(grad_out, input, spec)
}

/// Reference loop-nest convolution. Slow; used to validate [`conv3d`].
pub fn conv3d_direct<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let [n, c, d, h, w] = input.dims5()?;
    check_weight(weight, [spec.out_channels, c], spec)?;
    check_bias(bias, spec)?;
    let [od, oh, ow] = spec.conv_output([d, h, w])?;
    let [kd, kh, kw] = spec.kernel;
    let k = spec.out_channels;
    let x = input.data();
    let wt = weight.data();
    let mut out = Vec::with_capacity(n * k * od * oh * ow);
    for b in 0..n {
        for o in 0..k {
            let b0 = bias.map_or(T::zero(), |t| t.data()[o]);
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = T::zero();
                        for ci in 0..c {
                            for a in 0..kd {
                                let Some(iz) = offset(z, spec.stride[0], a, spec.padding[0], d) else { continue };
                                for bb in 0..kh {
                                    let Some(iy) = offset(y, spec.stride[1], bb, spec.padding[1], h) else { continue };
                                    for e in 0..kw {
                                        let Some(ix) = offset(xo, spec.stride[2], e, spec.padding[2], w) else {
                                            continue;
                                        };
                                        acc += wt[(((o * c + ci) * kd + a) * kh + bb) * kw + e]
                                            * x[(((b * c + ci) * d + iz) * h + iy) * w + ix];
                                    }
                                }
                            }
                        }
                        out.push(acc + b0);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, k, od, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3, 3], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 1, 1, 1], 1.0);
        let y = conv3d(&x, &w, None, &ConvSpec::cubic(1, 1, 1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn three_stride_two_convs_reduce_by_eight() {
        let mut x = Tensor::<f32>::zeros(&[1, 1, 80, 80, 80]);
        let spec = ConvSpec::cubic(1, 3, 2, 1);
        let w = Tensor::<f32>::full(&[1, 1, 3, 3, 3], 0.1);
        for _ in 0..3 {
            x = conv3d(&x, &w, None, &spec).unwrap();
        }
        assert_eq!(x.shape(), &[1, 1, 10, 10, 10]);
    }

    #[test]
    fn deconv_shape_and_impulse_response() {
        let x = Tensor::<f32>::zeros(&[1, 1, 10, 10, 10]);
        let w = Tensor::<f32>::zeros(&[1, 1, 2, 2, 2]);
        let y = deconv3d(&x, &w, &ConvSpec::cubic(1, 2, 2, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 20, 20, 20]);

        let x = Tensor::<f32>::full(&[1, 1, 1, 1, 1], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 3, 3, 3], 1.0);
        let y = deconv3d(&x, &w, &ConvSpec::cubic(1, 3, 1, 0)).unwrap();
        assert_eq!(y, Tensor::full(&[1, 1, 3, 3, 3], 1.0));
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4, 4]);
        let w = Tensor::<f32>::zeros(&[3, 5, 3, 3, 3]);
        let err = conv3d(&x, &w, None, &ConvSpec::cubic(3, 3, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");

        let w = Tensor::<f32>::zeros(&[1, 2, 5, 5, 5]);
        let x = Tensor::<f32>::zeros(&[1, 2, 5, 5, 5]);
        assert!(conv3d(&x, &w, None, &ConvSpec::cubic(1, 5, 1, 0)).is_ok());
        let small = Tensor::<f32>::zeros(&[1, 2, 4, 5, 5]);
        assert!(conv3d(&small, &w, None, &ConvSpec::cubic(1, 5, 1, 0)).is_err());
    }

    #[test]
    fn blocked_path_matches_direct_on_large_input() {
        // Large enough that the column buffer is split into several blocks.
        let x = Tensor::<f64>::from_fn(&[1, 3, 40, 40, 40], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let w = Tensor::<f64>::from_fn(&[2, 3, 3, 3, 3], |i| ((i * 31) % 17) as f64 / 8.0 - 1.0);
        let b = Tensor::<f64>::new(vec![2], vec![0.5, -0.25]).unwrap();
        let spec = ConvSpec::cubic(2, 3, 1, 1).with_bias(true);
        let g = Geometry::new(3, 2, [40, 40, 40], &spec).unwrap();
        assert!(g.blocks().count() > 1);
        let fast = conv3d(&x, &w, Some(&b), &spec).unwrap();
        let slow = conv3d_direct(&x, &w, Some(&b), &spec).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-10);
    }
}
