//! Intensity preprocessing: background removal, slice-wise CLAHE, per-slice
//! z-scoring, and assembly of the network input stack.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::reflect_index;
use crate::volume::{check_extents, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceAxis {
    D,
    H,
    W,
}

impl SliceAxis {
    fn index(self) -> usize {
        match self {
            SliceAxis::D => 0,
            SliceAxis::H => 1,
            SliceAxis::W => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    /// Gaussian σ in voxels for background subtraction.
    pub sigma_vox: f64,
    /// CLAHE tile grid `(rows, cols)` per axial slice.
    pub tiles: (usize, usize),
    pub clip_fraction: f64,
    pub bins: usize,
    pub zscore_axis: SliceAxis,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            sigma_vox: 4.0,
            tiles: (8, 8),
            clip_fraction: 0.01,
            bins: 256,
            zscore_axis: SliceAxis::D,
        }
    }
}

/// Normalized discrete Gaussian with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// One separable pass along `axis` of a `[d, h, w]` grid, reflect boundary.
fn blur_axis(src: &[f64], extents: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let [_, h, w] = extents;
    let strides = [h * w, w, 1];
    let n = extents[axis];
    let radius = (kernel.len() / 2) as isize;
    let stride = strides[axis];
    let taps: Vec<Vec<usize>> = (0..n as isize)
        .map(|i| (-radius..=radius).map(|o| reflect_index(i + o, n)).collect())
        .collect();
    let mut out = vec![0.0; src.len()];
    out.par_iter_mut().enumerate().for_each(|(idx, o)| {
        let pos = (idx / stride) % n;
        let base = idx - pos * stride;
        *o = taps[pos]
            .iter()
            .zip(kernel)
            .map(|(&j, &kv)| kv * src[base + j * stride])
            .sum();
    });
    out
}

/// `vol − G_σ * vol` with a separable 3D Gaussian, per channel.
pub fn gaussian_subtract(vol: &Volume, sigma_vox: f64) -> Result<Volume> {
    if !(sigma_vox > 0.0 && sigma_vox.is_finite()) {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma_vox}")));
    }
    let kernel = gaussian_kernel(sigma_vox);
    let extents = vol.extents();
    let mut data = Vec::with_capacity(vol.data().len());
    for c in 0..vol.channels() {
        let orig: Vec<f64> = vol.channel(c).iter().map(|&v| v as f64).collect();
        let mut blurred = orig.clone();
        for axis in 0..3 {
            blurred = blur_axis(&blurred, extents, axis, &kernel);
        }
        data.extend(orig.iter().zip(&blurred).map(|(a, b)| (a - b) as f32));
    }
    Ok(vol.with_data(data))
}

fn tile_bounds(n: usize, tiles: usize) -> Vec<(usize, usize)> {
    (0..tiles).map(|i| (i * n / tiles, (i + 1) * n / tiles)).collect()
}

/// Neighbouring tile indices and the weight of the second, for a pixel coordinate.
fn interp_tiles(pos: usize, centers: &[f64]) -> (usize, usize, f64) {
    let p = pos as f64;
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.iter().rposition(|&c| c <= p).expect("p exceeds the first center");
    let t = (p - centers[i]) / (centers[i + 1] - centers[i]);
    (i, i + 1, t)
}

/// Contrast-limited adaptive histogram equalization of one `rows × cols` slice.
///
/// Each tile's histogram is clipped at `max(clip_fraction · tile_pixels, 1)`
/// counts, the excess is spread evenly over all bins, and the resulting CDF
/// maps intensities to `[0, 1]`. Pixels blend the mappings of the (up to) four
/// nearest tile centers bilinearly. A constant slice maps to zeros.
pub fn clahe_slice(
    slice: &[f32],
    rows: usize,
    cols: usize,
    tiles: (usize, usize),
    clip_fraction: f64,
    bins: usize,
) -> Result<Vec<f32>> {
    if slice.len() != rows * cols {
        return Err(Error::shape("slice pixels", rows * cols, slice.len()));
    }
    let (tr, tc) = tiles;
    if tr == 0 || tc == 0 {
        return Err(Error::invalid("CLAHE needs at least one tile per axis"));
    }
    if !(clip_fraction > 0.0 && clip_fraction <= 1.0) {
        return Err(Error::invalid(format!("clip_fraction must lie in (0, 1], got {clip_fraction}")));
    }
    if bins < 2 {
        return Err(Error::invalid("CLAHE needs at least 2 bins"));
    }
    if rows < tr || cols < tc {
        return Err(Error::invalid(format!(
            "slice {rows}x{cols} is smaller than the {tr}x{tc} tile grid"
        )));
    }
    let (lo, hi) = slice
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi <= lo {
        return Ok(vec![0.0; slice.len()]);
    }
    let range = (hi - lo) as f64;
    let bin_of: Vec<usize> = slice
        .iter()
        .map(|&v| ((((v - lo) as f64) / range * bins as f64) as usize).min(bins - 1))
        .collect();

    let row_tiles = tile_bounds(rows, tr);
    let col_tiles = tile_bounds(cols, tc);
    let mut maps = vec![vec![0.0f64; bins]; tr * tc];
    for (ti, &(r0, r1)) in row_tiles.iter().enumerate() {
        for (tj, &(c0, c1)) in col_tiles.iter().enumerate() {
            let mut hist = vec![0.0f64; bins];
            for r in r0..r1 {
                for &b in &bin_of[r * cols + c0..r * cols + c1] {
                    hist[b] += 1.0;
                }
            }
            let pixels = ((r1 - r0) * (c1 - c0)) as f64;
            let clip = (clip_fraction * pixels).max(1.0);
            let mut excess = 0.0;
            for h in hist.iter_mut() {
                if *h > clip {
                    excess += *h - clip;
                    *h = clip;
                }
            }
            let share = excess / bins as f64;
            let map = &mut maps[ti * tc + tj];
            let mut acc = 0.0;
            for (m, h) in map.iter_mut().zip(&hist) {
                acc += h + share;
                *m = (acc / pixels).min(1.0);
            }
        }
    }

    let center = |b: &(usize, usize)| (b.0 + b.1 - 1) as f64 / 2.0;
    let row_centers: Vec<f64> = row_tiles.iter().map(center).collect();
    let col_centers: Vec<f64> = col_tiles.iter().map(center).collect();
    let col_interp: Vec<(usize, usize, f64)> = (0..cols).map(|c| interp_tiles(c, &col_centers)).collect();
    let mut out = vec![0.0f32; slice.len()];
    for r in 0..rows {
        let (i0, i1, ty) = interp_tiles(r, &row_centers);
        for (c, &(j0, j1, tx)) in col_interp.iter().enumerate() {
            let b = bin_of[r * cols + c];
            let top = (1.0 - tx) * maps[i0 * tc + j0][b] + tx * maps[i0 * tc + j1][b];
            let bottom = (1.0 - tx) * maps[i1 * tc + j0][b] + tx * maps[i1 * tc + j1][b];
            out[r * cols + c] = ((1.0 - ty) * top + ty * bottom) as f32;
        }
    }
    Ok(out)
}

/// CLAHE applied independently to every axial (D) slice of every channel.
pub fn clahe_volume(vol: &Volume, tiles: (usize, usize), clip_fraction: f64, bins: usize) -> Result<Volume> {
    let [d, h, w] = vol.extents();
    let plane = h * w;
    let slices: Vec<Vec<f32>> = (0..vol.channels() * d)
        .into_par_iter()
        .map(|s| {
            let c = s / d;
            let z = s % d;
            clahe_slice(&vol.channel(c)[z * plane..(z + 1) * plane], h, w, tiles, clip_fraction, bins)
        })
        .collect::<Result<_>>()?;
    Ok(vol.with_data(slices.concat()))
}

/// Standardizes each slice along `axis` (per channel) to mean 0, population std 1.
/// Slices with (numerically) zero variance become all zeros.
pub fn zscore_per_slice(vol: &Volume, axis: SliceAxis) -> Volume {
    let extents = vol.extents();
    let a = axis.index();
    let strides = [extents[1] * extents[2], extents[2], 1];
    let n = vol.voxels();
    let per_slice = n / extents[a].max(1);
    let mut data = vol.data().to_vec();
    for c in 0..vol.channels() {
        let ch = &mut data[c * n..(c + 1) * n];
        let slice_of = |idx: usize| (idx / strides[a]) % extents[a];
        let mut sums = vec![0.0f64; extents[a]];
        for (i, &v) in ch.iter().enumerate() {
            sums[slice_of(i)] += v as f64;
        }
        let means: Vec<f64> = sums.iter().map(|s| s / per_slice as f64).collect();
        let mut sq = vec![0.0f64; extents[a]];
        for (i, &v) in ch.iter().enumerate() {
            let dlt = v as f64 - means[slice_of(i)];
            sq[slice_of(i)] += dlt * dlt;
        }
        let stds: Vec<f64> = sq.iter().map(|s| (s / per_slice as f64).sqrt()).collect();
        for (i, v) in ch.iter_mut().enumerate() {
            let s = slice_of(i);
            let degenerate = stds[s] <= 1e-7 * means[s].abs().max(1.0);
            *v = if degenerate { 0.0 } else { ((*v as f64 - means[s]) / stds[s]) as f32 };
        }
    }
    vol.with_data(data)
}

/// Two channels per modality: the z-scored original and the z-scored
/// `CLAHE(gaussian_subtract(original))`, named `<name>` and `<name>_enh`.
pub fn build_input_stack(raw: &[Volume], config: &PreprocessConfig) -> Result<Volume> {
    let first = raw.first().ok_or_else(|| Error::invalid("no modalities given"))?;
    let mut parts = Vec::with_capacity(raw.len() * 2);
    for vol in raw {
        check_extents(first.extents(), vol.extents())?;
        if vol.spacing() != first.spacing() {
            return Err(Error::invalid(format!(
                "modality spacing {:?} differs from {:?}",
                vol.spacing(),
                first.spacing()
            )));
        }
        for c in 0..vol.channels() {
            let ch = vol.channel_volume(c);
            let name = ch.channel_names()[0].clone();
            let enhanced = clahe_volume(
                &gaussian_subtract(&ch, config.sigma_vox)?,
                config.tiles,
                config.clip_fraction,
                config.bins,
            )?;
            parts.push(zscore_per_slice(&ch, config.zscore_axis));
            parts.push(zscore_per_slice(&enhanced, config.zscore_axis).renamed(vec![format!("{name}_enh")]));
        }
    }
    Volume::concat(&parts.iter().collect::<Vec<_>>())
}
