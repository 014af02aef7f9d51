//! Overlap-tiled inference with uniform averaging of tile probabilities.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::Mode;
use crate::netspec::{forward, NetworkSpec, Params};
use crate::tensor::Tensor;
use crate::train::Checkpoint;
use crate::volume::{LabelVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub corner: [usize; 3],
    pub extent: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub tile: usize,
    pub stride: usize,
    /// Extents of the volume being tiled.
    pub extents: [usize; 3],
    /// Extents after high-side reflect padding (`max(extent, tile)` per axis).
    pub padded: [usize; 3],
    pub windows: Vec<Window>,
}

fn axis_corners(padded: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut corners = Vec::new();
    let mut c = 0;
    while c + tile < padded {
        corners.push(c);
        c += stride;
    }
    corners.push(padded - tile);
    corners
}

/// Windows at multiples of `stride`, with the last one per axis clamped to
/// end on the (padded) boundary.
pub fn plan_tiles(extents: [usize; 3], tile: usize, stride: usize) -> Result<TilePlan> {
    if tile < 8 {
        return Err(Error::invalid(format!("tile {tile} is below 8")));
    }
    if stride == 0 || stride > tile {
        return Err(Error::invalid(format!("stride {stride} must lie in 1..={tile}")));
    }
    if extents.contains(&0) {
        return Err(Error::invalid("cannot tile an empty volume"));
    }
    let padded = extents.map(|e| e.max(tile));
    let per_axis = padded.map(|p| axis_corners(p, tile, stride));
    let mut windows = Vec::new();
    for &z in &per_axis[0] {
        for &y in &per_axis[1] {
            for &x in &per_axis[2] {
                windows.push(Window {
                    corner: [z, y, x],
                    extent: [tile; 3],
                });
            }
        }
    }
    Ok(TilePlan {
        tile,
        stride,
        extents,
        padded,
        windows,
    })
}

/// Anything mapping a `[1, m, d, h, w]` input to `[1, C, d, h, w]` class probabilities.
pub trait Model: Sync {
    fn input_channels(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn probabilities(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Trained network evaluated in inference mode.
#[derive(Clone, Debug)]
pub struct VoxResNetModel {
    pub net: NetworkSpec,
    pub params: Params<f32>,
}

impl VoxResNetModel {
    /// Fails when any batch-norm layer lacks running statistics.
    pub fn new(net: NetworkSpec, params: Params<f32>) -> Result<Self> {
        params.check_layout(&net.layout)?;
        for (info, stats) in net.layout.bn.iter().zip(&params.bn_stats) {
            if !stats.is_populated(info.channels) {
                return Err(Error::invalid(format!(
                    "batch-norm layer {} has no running statistics",
                    info.name
                )));
            }
        }
        Ok(Self { net, params })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::new(ckpt.network()?, ckpt.params.clone())
    }
}

impl Model for VoxResNetModel {
    fn input_channels(&self) -> usize {
        self.net.num_modalities
    }

    fn num_classes(&self) -> usize {
        self.net.num_classes
    }

    fn probabilities(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, _, out) = forward(&self.net, &self.params, x, Mode::Infer)?;
        Ok(out.final_probs)
    }
}

pub fn class_channel_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("p{c}")).collect()
}

/// Stitched `[C, D, H, W]` probability volume for `input`.
pub fn predict<M: Model + ?Sized>(model: &M, input: &Volume, plan: &TilePlan) -> Result<Volume> {
    if input.channels() != model.input_channels() {
        return Err(Error::shape("input channels", model.input_channels(), input.channels()));
    }
    if plan.extents != input.extents() {
        return Err(Error::invalid(format!(
            "tile plan is for {:?} but the input is {:?}",
            plan.extents,
            input.extents()
        )));
    }
    let classes = model.num_classes();
    let padded = if plan.padded == plan.extents {
        input.clone()
    } else {
        input.crop_reflect([0; 3], plan.padded)
    };
    let [pd, ph, pw] = plan.padded;
    let plane = ph * pw;
    let total = pd * plane;
    let mut acc = vec![0.0f64; classes * total];
    let mut counts = vec![0u32; total];

    let chunk = rayon::current_num_threads().max(1) * 2;
    for group in plan.windows.chunks(chunk) {
        let outputs: Vec<Tensor<f32>> = group
            .par_iter()
            .map(|w| {
                let x = padded.crop_reflect(w.corner, w.extent).to_tensor();
                let p = model.probabilities(&x)?;
                let [_, c, d, h, wd] = p.dims5()?;
                if c != classes || [d, h, wd] != w.extent {
                    return Err(Error::invalid(format!(
                        "model returned {:?} for a {:?} window",
                        p.shape(),
                        w.extent
                    )));
                }
                Ok(p)
            })
            .collect::<Result<_>>()?;
        for (w, p) in group.iter().zip(&outputs) {
            let [ed, eh, ew] = w.extent;
            let tile_vox = ed * eh * ew;
            for c in 0..classes {
                let src = &p.data()[c * tile_vox..(c + 1) * tile_vox];
                let dst = &mut acc[c * total..(c + 1) * total];
                for z in 0..ed {
                    for y in 0..eh {
                        let s = (z * eh + y) * ew;
                        let d = (w.corner[0] + z) * plane + (w.corner[1] + y) * pw + w.corner[2];
                        for (o, &v) in dst[d..d + ew].iter_mut().zip(&src[s..s + ew]) {
                            *o += v as f64;
                        }
                    }
                }
            }
            for z in 0..ed {
                for y in 0..eh {
                    let d = (w.corner[0] + z) * plane + (w.corner[1] + y) * pw + w.corner[2];
                    counts[d..d + ew].iter_mut().for_each(|n| *n += 1);
                }
            }
        }
    }
    if let Some(i) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("tile plan leaves voxel {i} uncovered")));
    }
    let mut averaged = Vec::with_capacity(acc.len());
    for c in 0..classes {
        averaged.extend(
            acc[c * total..(c + 1) * total]
                .iter()
                .zip(&counts)
                .map(|(&s, &n)| (s / n as f64) as f32),
        );
    }
    let stitched = Volume::new(plan.padded, input.spacing(), class_channel_names(classes), averaged)?;
    Ok(if plan.padded == plan.extents {
        stitched
    } else {
        stitched.crop_reflect([0; 3], plan.extents)
    })
}

/// Per-voxel argmax; ties go to the lowest class index.
pub fn argmax_labels(probs: &Volume) -> Result<LabelVolume> {
    let classes = probs.channels();
    if classes > 256 {
        return Err(Error::invalid(format!("{classes} classes do not fit in 8-bit labels")));
    }
    let n = probs.voxels();
    let mut best = vec![0u8; n];
    let mut best_p = probs.channel(0).to_vec();
    for c in 1..classes {
        for ((b, bp), &p) in best.iter_mut().zip(best_p.iter_mut()).zip(probs.channel(c)) {
            if p > *bp {
                *bp = p;
                *b = c as u8;
            }
        }
    }
    LabelVolume::new(probs.extents(), probs.spacing(), classes, best)
}
