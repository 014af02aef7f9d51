//! Dense row-major tensors and the scalar abstraction shared by every kernel.
//!
//! Activations use the `[N, C, D, H, W]` layout. Training and inference run
//! in `f32`; gradient checks switch the whole engine to `f64` by
//! instantiating the same code with the other [`Real`] type.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of the engine.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + AddAssign + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` over raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided read-only matrix operand for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> View<'a, T> {
    /// Contiguous row-major matrix with `cols` columns.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transpose of a contiguous row-major matrix with `cols` columns.
    pub fn rows_t(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    pub fn strided(data: &'a [T], row_stride: usize, col_stride: usize) -> Self {
        Self {
            data,
            row_stride,
            col_stride,
        }
    }
}

fn max_offset(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product written through strides `(rsc, csc)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(max_offset(m, n, rsc, csc) < c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * rsc + j * csc];
                *v = *v * beta;
            }
        }
        return;
    }
    assert!(max_offset(m, k, a.row_stride, a.col_stride) < a.data.len(), "gemm lhs out of bounds");
    assert!(max_offset(k, n, b.row_stride, b.col_stride) < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: every accessed offset was bounds-checked above and `c` is an
    // exclusive borrow distinct from the shared operands.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Dense N-dimensional array with contiguous row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected = shape_len(&shape);
        if expected != data.len() {
            return Err(Error::shape("element count", expected, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape_len(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape_len(shape);
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    /// Extents of a 5-d activation tensor.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        if self.shape.len() != 5 {
            return Err(Error::shape("rank", 5, self.shape.len()));
        }
        Ok([
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.shape[3],
            self.shape[4],
        ])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape.len() != other.shape.len() {
            return Err(Error::shape("rank", self.shape.len(), other.shape.len()));
        }
        for (axis, (&a, &b)) in self.shape.iter().zip(&other.shape).enumerate() {
            if a != b {
                return Err(Error::shape(format!("axis {axis}"), a, b));
            }
        }
        Ok(())
    }

    /// Copy of the spatial box `[start, start + extent)` of a 5-d tensor.
    pub fn crop_spatial(&self, start: [usize; 3], extent: [usize; 3]) -> Result<Self> {
        let [n, c, d, h, w] = self.dims5()?;
        for axis in 0..3 {
            let full = [d, h, w][axis];
            if start[axis] + extent[axis] > full {
                return Err(Error::invalid(format!(
                    "crop [{}, {}) exceeds extent {} on spatial axis {}",
                    start[axis],
                    start[axis] + extent[axis],
                    full,
                    axis
                )));
            }
        }
        let [ed, eh, ew] = extent;
        let mut out = Vec::with_capacity(n * c * ed * eh * ew);
        for plane in 0..n * c {
            let base = plane * d * h * w;
            for z in 0..ed {
                for y in 0..eh {
                    let row = base + ((start[0] + z) * h + start[1] + y) * w + start[2];
                    out.extend_from_slice(&self.data[row..row + ew]);
                }
            }
        }
        Self::new(vec![n, c, ed, eh, ew], out)
    }

    /// Reflect-pads the high side of every spatial axis of a 5-d tensor up to `target`.
    pub fn pad_spatial_reflect(&self, target: [usize; 3]) -> Result<Self> {
        let [n, c, d, h, w] = self.dims5()?;
        if target[0] < d || target[1] < h || target[2] < w {
            return Err(Error::invalid("padding target smaller than tensor"));
        }
        if target == [d, h, w] {
            return Ok(self.clone());
        }
        let [td, th, tw] = target;
        let mut out = Vec::with_capacity(n * c * td * th * tw);
        for plane in 0..n * c {
            let base = plane * d * h * w;
            for z in 0..td {
                let sz = reflect_index(z as isize, d);
                for y in 0..th {
                    let sy = reflect_index(y as isize, h);
                    let row = base + (sz * h + sy) * w;
                    for x in 0..tw {
                        out.push(self.data[row + reflect_index(x as isize, w)]);
                    }
                }
            }
        }
        Self::new(vec![n, c, td, th, tw], out)
    }

    /// Concatenates 5-d tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let [n, _, d, h, w] = first.dims5()?;
        let spatial = d * h * w;
        let mut channels = 0;
        for p in parts {
            let [pn, pc, pd, ph, pw] = p.dims5()?;
            for (axis, (a, b)) in [("N", (n, pn)), ("D", (d, pd)), ("H", (h, ph)), ("W", (w, pw))] {
                if a != b {
                    return Err(Error::shape(axis, a, b));
                }
            }
            channels += pc;
        }
        let mut out = Vec::with_capacity(n * channels * spatial);
        for b in 0..n {
            for p in parts {
                let pc = p.shape[1];
                out.extend_from_slice(&p.data[b * pc * spatial..(b + 1) * pc * spatial]);
            }
        }
        Self::new(vec![n, channels, d, h, w], out)
    }
}

pub fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Mirror index with the edge sample repeated (`d c b a | a b c d | d c b a`).
///
/// Valid for any integer position, including ones several periods away.
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let period = 2 * n as isize;
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - 1 - r) as usize
    }
}

/// Geometry of a 3-d convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn cubic(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            out_channels,
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [padding; 3],
            has_bias: false,
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(Error::invalid("conv out_channels must be >= 1"));
        }
        if self.kernel.contains(&0) {
            return Err(Error::invalid("conv kernel extents must be >= 1"));
        }
        if self.stride.contains(&0) {
            return Err(Error::invalid("conv stride must be >= 1"));
        }
        Ok(())
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extents of a convolution over `input` spatial extents.
    pub fn conv_output(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = input[axis] + 2 * self.padding[axis];
            if padded < self.kernel[axis] {
                return Err(Error::invalid(format!(
                    "non-positive output extent on spatial axis {axis}: input {} + 2*pad {} < kernel {}",
                    input[axis], self.padding[axis], self.kernel[axis]
                )));
            }
            out[axis] = (padded - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }

    /// Output extents of the transposed convolution over `input` spatial extents.
    pub fn deconv_output(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            if input[axis] == 0 {
                return Err(Error::invalid(format!("empty input on spatial axis {axis}")));
            }
            let grown = (input[axis] - 1) * self.stride[axis] + self.kernel[axis];
            if grown <= 2 * self.padding[axis] {
                return Err(Error::invalid(format!(
                    "non-positive deconv output extent on spatial axis {axis}"
                )));
            }
            out[axis] = grown - 2 * self.padding[axis];
        }
        Ok(out)
    }
}
