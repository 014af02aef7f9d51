//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

pub mod grad_cases;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxresnet::phantom::{generate_phantom, PhantomSpec};
use voxresnet::infer::Model;
use voxresnet::{ConvSpec, LabelVolume, Real, Result, Tensor, Volume};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-1.0..1.0)))
}

fn at(shape: &[usize], idx: [usize; 5]) -> usize {
    (((idx[0] * shape[1] + idx[1]) * shape[2] + idx[2]) * shape[3] + idx[3]) * shape[4] + idx[4]
}

/// Cross-correlation by the textbook seven-deep loop, accumulated in f64.
pub fn brute_conv3d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (n, cin) = (xs[0], xs[1]);
    let cout = ws[0];
    let out_ext: Vec<usize> = (0..3)
        .map(|a| (xs[2 + a] + 2 * spec.padding[a] - spec.kernel[a]) / spec.stride[a] + 1)
        .collect();
    let oshape = [n, cout, out_ext[0], out_ext[1], out_ext[2]];
    let mut out = vec![0.0f64; oshape.iter().product()];
    for bn in 0..n {
        for o in 0..cout {
            for oz in 0..out_ext[0] {
                for oy in 0..out_ext[1] {
                    for ox in 0..out_ext[2] {
                        let mut acc = b.map_or(0.0, |b| b.data()[o].to_f64_lossy());
                        for i in 0..cin {
                            for kz in 0..spec.kernel[0] {
                                for ky in 0..spec.kernel[1] {
                                    for kx in 0..spec.kernel[2] {
                                        let z = (oz * spec.stride[0] + kz) as isize - spec.padding[0] as isize;
                                        let y = (oy * spec.stride[1] + ky) as isize - spec.padding[1] as isize;
                                        let xx = (ox * spec.stride[2] + kx) as isize - spec.padding[2] as isize;
                                        if z < 0 || y < 0 || xx < 0 {
                                            continue;
                                        }
                                        let (z, y, xx) = (z as usize, y as usize, xx as usize);
                                        if z >= xs[2] || y >= xs[3] || xx >= xs[4] {
                                            continue;
                                        }
                                        acc += x.data()[at(xs, [bn, i, z, y, xx])].to_f64_lossy()
                                            * w.data()[at(ws, [o, i, kz, ky, kx])].to_f64_lossy();
                                    }
                                }
                            }
                        }
                        out[at(&oshape, [bn, o, oz, oy, ox])] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(oshape.to_vec(), out.into_iter().map(T::from_f64_lossy).collect()).unwrap()
}

/// Transposed convolution as a scatter: every input voxel stamps its
/// weighted kernel into the output. Weight layout `[Cin, Cout, k...]`.
pub fn brute_deconv3d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (n, cin, cout) = (xs[0], xs[1], ws[1]);
    let out_ext: Vec<usize> = (0..3)
        .map(|a| (xs[2 + a] - 1) * spec.stride[a] + spec.kernel[a] - 2 * spec.padding[a])
        .collect();
    let oshape = [n, cout, out_ext[0], out_ext[1], out_ext[2]];
    let mut out = vec![0.0f64; oshape.iter().product()];
    for bn in 0..n {
        for i in 0..cin {
            for z in 0..xs[2] {
                for y in 0..xs[3] {
                    for xx in 0..xs[4] {
                        let v = x.data()[at(xs, [bn, i, z, y, xx])].to_f64_lossy();
                        for o in 0..cout {
                            for kz in 0..spec.kernel[0] {
                                for ky in 0..spec.kernel[1] {
                                    for kx in 0..spec.kernel[2] {
                                        let oz = (z * spec.stride[0] + kz) as isize - spec.padding[0] as isize;
                                        let oy = (y * spec.stride[1] + ky) as isize - spec.padding[1] as isize;
                                        let ox = (xx * spec.stride[2] + kx) as isize - spec.padding[2] as isize;
                                        if oz < 0 || oy < 0 || ox < 0 {
                                            continue;
                                        }
                                        let (oz, oy, ox) = (oz as usize, oy as usize, ox as usize);
                                        if oz >= out_ext[0] || oy >= out_ext[1] || ox >= out_ext[2] {
                                            continue;
                                        }
                                        out[at(&oshape, [bn, o, oz, oy, ox])] +=
                                            v * w.data()[at(ws, [i, o, kz, ky, kx])].to_f64_lossy();
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(oshape.to_vec(), out.into_iter().map(T::from_f64_lossy).collect()).unwrap()
}

/// Mean voxel cross-entropy computed from softmax probabilities in f64.
pub fn brute_cross_entropy(logits: &Tensor<f64>, labels: &[u8]) -> f64 {
    let s = logits.shape();
    let (n, c) = (s[0], s[1]);
    let vox: usize = s[2..].iter().product();
    let mut total = 0.0;
    for b in 0..n {
        for v in 0..vox {
            let z: Vec<f64> = (0..c).map(|k| logits.data()[(b * c + k) * vox + v]).collect();
            let denom: f64 = z.iter().map(|x| x.exp()).sum();
            let p = z[labels[b * vox + v] as usize].exp() / denom;
            total -= p.ln();
        }
    }
    total / (n * vox) as f64
}

pub fn brute_dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let na = a.iter().filter(|x| **x).count();
    let nb = b.iter().filter(|x| **x).count();
    if na + nb == 0 {
        100.0
    } else {
        200.0 * inter as f64 / (na + nb) as f64
    }
}

pub fn brute_avd(a: &[bool], b: &[bool]) -> f64 {
    let na = a.iter().filter(|x| **x).count() as f64;
    let nb = b.iter().filter(|x| **x).count() as f64;
    100.0 * (na - nb).abs() / nb
}

fn coords(i: usize, e: [usize; 3]) -> [isize; 3] {
    [(i / (e[1] * e[2])) as isize, ((i / e[2]) % e[1]) as isize, (i % e[2]) as isize]
}

/// Boundary voxel centers: inside voxels with an outside (or off-grid) face neighbour.
pub fn brute_boundary(m: &[bool], e: [usize; 3]) -> Vec<[isize; 3]> {
    let inside = |p: [isize; 3]| {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < e[a])
            && m[(p[0] as usize * e[1] + p[1] as usize) * e[2] + p[2] as usize]
    };
    let steps = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
    (0..m.len())
        .filter(|&i| m[i])
        .map(|i| coords(i, e))
        .filter(|p| steps.iter().any(|s| !inside([p[0] + s[0], p[1] + s[1], p[2] + s[2]])))
        .collect()
}

pub fn lerp_percentile(mut v: Vec<f64>, p: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// All-pairs symmetric HD95 between boundary voxel centers.
pub fn brute_hd95(a: &[bool], b: &[bool], e: [usize; 3], s: [f64; 3]) -> f64 {
    let ba = brute_boundary(a, e);
    let bb = brute_boundary(b, e);
    let directed = |from: &[[isize; 3]], to: &[[isize; 3]]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let d: Vec<f64> = (0..3).map(|k| (p[k] - q[k]) as f64 * s[k]).collect();
                        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    };
    lerp_percentile(directed(&ba, &bb), 95.0).max(lerp_percentile(directed(&bb, &ba), 95.0))
}

/// Random blobby mask: union of a few random boxes.
pub fn random_mask(e: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut m = vec![false; e.iter().product()];
    let boxes = rng.random_range(1..4);
    for _ in 0..boxes {
        let lo: Vec<usize> = (0..3).map(|a| rng.random_range(0..e[a] - 1)).collect();
        let hi: Vec<usize> = (0..3).map(|a| rng.random_range(lo[a] + 1..=e[a])).collect();
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    m[(z * e[1] + y) * e[2] + x] = true;
                }
            }
        }
    }
    // Sprinkle isolated voxels so boundaries are irregular.
    for _ in 0..rng.random_range(0..20) {
        let i = rng.random_range(0..m.len());
        m[i] = !m[i];
    }
    if !m.iter().any(|&v| v) {
        m[0] = true;
    }
    m
}

/// Small phantom cases with the raw modalities stacked as channels.
pub fn phantom_cases(count: usize, seed: u64, extents: [usize; 3]) -> Vec<(Volume, LabelVolume)> {
    (0..count as u64)
        .map(|i| {
            let (mods, labels) = generate_phantom(&PhantomSpec::random(seed + i, extents)).unwrap();
            (Volume::concat(&mods.iter().collect::<Vec<_>>()).unwrap(), labels)
        })
        .collect()
}

/// Phantom cases run through the full preprocessing stack (2m channels).
pub fn stacked_phantom_cases(count: usize, seed: u64, extents: [usize; 3]) -> Vec<(Volume, LabelVolume)> {
    let cfg = voxresnet::preprocess::PreprocessConfig {
        tiles: (4, 4),
        ..Default::default()
    };
    (0..count as u64)
        .map(|i| {
            let (mods, labels) = generate_phantom(&PhantomSpec::random(seed + i, extents)).unwrap();
            (voxresnet::preprocess::build_input_stack(&mods, &cfg).unwrap(), labels)
        })
        .collect()
}

/// Softmax of a linear map of each channel's 3×3×3 box mean (zero padded):
/// a model whose receptive radius is exactly 1.
pub struct BoxModel {
    pub weights: Vec<Vec<f32>>,
}

impl BoxModel {
    pub fn new(inputs: usize, classes: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        Self {
            weights: (0..classes).map(|_| (0..inputs).map(|_| r.random_range(-3.0..3.0)).collect()).collect(),
        }
    }
}

impl Model for BoxModel {
    fn input_channels(&self) -> usize {
        self.weights[0].len()
    }

    fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn probabilities(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [_, m, d, h, w] = x.dims5()?;
        let vox = d * h * w;
        let at = |c: usize, z: isize, y: isize, xx: isize| -> f32 {
            if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= w as isize {
                0.0
            } else {
                x.data()[c * vox + (z as usize * h + y as usize) * w + xx as usize]
            }
        };
        let classes = self.weights.len();
        let mut out = vec![0.0f32; classes * vox];
        for v in 0..vox {
            let (z, y, xx) = ((v / (h * w)) as isize, ((v / w) % h) as isize, (v % w) as isize);
            let means: Vec<f32> = (0..m)
                .map(|c| {
                    let mut s = 0.0;
                    for dz in -1..=1 {
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                s += at(c, z + dz, y + dy, xx + dx);
                            }
                        }
                    }
                    s / 27.0
                })
                .collect();
            let logits: Vec<f32> = self.weights.iter().map(|w| w.iter().zip(&means).map(|(a, b)| a * b).sum()).collect();
            let top = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = logits.iter().map(|l| (l - top).exp()).collect();
            let total: f32 = e.iter().sum();
            for c in 0..classes {
                out[c * vox + v] = e[c] / total;
            }
        }
        Tensor::new(vec![1, classes, d, h, w], out)
    }
}

pub fn random_input(channels: usize, ext: [usize; 3], seed: u64) -> Volume {
    let mut r = rng(seed);
    let n = channels * ext.iter().product::<usize>();
    let names = (0..channels).map(|c| format!("ch{c}")).collect();
    Volume::new(ext, [1.0, 1.0, 2.0], names, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}
