//! Overlap and surface-distance metrics per tissue class.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::{check_extents, LabelVolume};

/// Label coding used throughout: 0 background, 1 CSF, 2 GM, 3 WM.
pub const CLASS_NAMES: [&str; 4] = ["background", "CSF", "GM", "WM"];

pub fn class_name(class: u8) -> String {
    CLASS_NAMES
        .get(class as usize)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{class}"))
}

fn check_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("mask voxels", b.len(), a.len()));
    }
    Ok(())
}

/// `100·2|A∩B| / (|A|+|B|)`; two empty masks score 100.
pub fn dice(seg: &[bool], reference: &[bool]) -> Result<f64> {
    check_len(seg, reference)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&a, &b) in seg.iter().zip(reference) {
        inter += (a && b) as usize;
        na += a as usize;
        nb += b as usize;
    }
    if na + nb == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (na + nb) as f64)
}

/// `100·||A| − |B|| / |B|`.
pub fn avd(seg: &[bool], reference: &[bool]) -> Result<f64> {
    check_len(seg, reference)?;
    let na = seg.iter().filter(|&&v| v).count();
    let nb = reference.iter().filter(|&&v| v).count();
    if nb == 0 {
        return Err(Error::invalid("absolute volume difference is undefined for an empty reference"));
    }
    Ok(100.0 * na.abs_diff(nb) as f64 / nb as f64)
}

/// Mask voxels with at least one 6-neighbour outside the mask or outside the grid.
pub fn boundary(mask: &[bool], extents: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = extents;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = idx(z, y, x);
                if !mask[i] {
                    continue;
                }
                out[i] = z == 0
                    || z + 1 == d
                    || y == 0
                    || y + 1 == h
                    || x == 0
                    || x + 1 == w
                    || !mask[idx(z - 1, y, x)]
                    || !mask[idx(z + 1, y, x)]
                    || !mask[idx(z, y - 1, x)]
                    || !mask[idx(z, y + 1, x)]
                    || !mask[idx(z, y, x - 1)]
                    || !mask[idx(z, y, x + 1)];
            }
        }
    }
    out
}

/// Lower envelope of parabolas `f(q) + w·(p − q)²` along one line.
fn edt_line(f: &[f64], weight: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let inter = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + weight * qf * qf) - (f[p] + weight * pf * pf)) / (2.0 * weight * (qf - pf))
    };
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        while let Some(&last) = v.last() {
            let s = inter(q, last);
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let dq = p as f64 - v[k] as f64;
        *o = f[v[k]] + weight * dq * dq;
    }
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the nearest `true` voxel.
pub fn squared_distance_transform(targets: &[bool], extents: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut g: Vec<f64> = targets.iter().map(|&t| if t { 0.0 } else { f64::INFINITY }).collect();
    let [d, h, w] = extents;
    let strides = [h * w, w, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in [2usize, 1, 0] {
        let n = extents[axis];
        let stride = strides[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        let weight = spacing[axis] * spacing[axis];
        for base in 0..d * h * w {
            if (base / stride) % n != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = g[base + i * stride];
            }
            edt_line(&line, weight, &mut out, &mut v, &mut z);
            for (i, &o) in out.iter().enumerate() {
                g[base + i * stride] = o;
            }
        }
    }
    g
}

/// Linear-interpolation percentile of unsorted values.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = p / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

fn directed_distances(from: &[bool], to_dist_sq: &[f64]) -> Vec<f64> {
    from.iter()
        .zip(to_dist_sq)
        .filter(|(&b, _)| b)
        .map(|(_, &d)| d.sqrt())
        .collect()
}

/// Symmetric 95th-percentile Hausdorff distance between mask boundaries, in mm.
pub fn hd95(seg: &[bool], reference: &[bool], extents: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    check_len(seg, reference)?;
    let n: usize = extents.iter().product();
    if seg.len() != n {
        return Err(Error::shape("mask voxels", n, seg.len()));
    }
    if !seg.iter().any(|&v| v) || !reference.iter().any(|&v| v) {
        return Err(Error::invalid("HD95 is undefined for an empty mask"));
    }
    let ba = boundary(seg, extents);
    let bb = boundary(reference, extents);
    let da = squared_distance_transform(&ba, extents, spacing);
    let db = squared_distance_transform(&bb, extents, spacing);
    let mut ab = directed_distances(&ba, &db);
    let mut ba_d = directed_distances(&bb, &da);
    Ok(percentile(&mut ab, 95.0).max(percentile(&mut ba_d, 95.0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: u8,
    pub name: String,
    pub dc_percent: f64,
    /// `None` when either mask is empty.
    pub hd95_mm: Option<f64>,
    /// `None` when the reference mask is empty.
    pub avd_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    pub fn mean_dc(&self) -> Option<f64> {
        mean(self.classes.iter().map(|c| c.dc_percent))
    }

    pub fn mean_hd95(&self) -> Option<f64> {
        mean(self.classes.iter().filter_map(|c| c.hd95_mm))
    }

    pub fn mean_avd(&self) -> Option<f64> {
        mean(self.classes.iter().filter_map(|c| c.avd_percent))
    }

    pub fn get(&self, class: u8) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.class == class)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:>10} {:>10} {:>10}\n", "class", "DC%", "HD95mm", "AVD%");
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<10} {:>10.4} {:>10} {:>10}",
                c.name,
                c.dc_percent,
                opt(c.hd95_mm),
                opt(c.avd_percent)
            );
        }
        let _ = writeln!(
            s,
            "{:<10} {:>10} {:>10} {:>10}",
            "mean",
            opt(self.mean_dc()),
            opt(self.mean_hd95()),
            opt(self.mean_avd())
        );
        s
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for c in &self.classes {
            let _ = writeln!(s, "{}.dc_percent = {}", c.name, c.dc_percent);
            let _ = writeln!(s, "{}.hd95_mm = {}", c.name, c.hd95_mm.map_or("undefined".into(), |v| v.to_string()));
            let _ = writeln!(
                s,
                "{}.avd_percent = {}",
                c.name,
                c.avd_percent.map_or("undefined".into(), |v| v.to_string())
            );
        }
        let fmt = |v: Option<f64>| v.map_or("undefined".into(), |x: f64| x.to_string());
        let _ = writeln!(s, "mean.dc_percent = {}", fmt(self.mean_dc()));
        let _ = writeln!(s, "mean.hd95_mm = {}", fmt(self.mean_hd95()));
        let _ = writeln!(s, "mean.avd_percent = {}", fmt(self.mean_avd()));
        s
    }
}

/// Metrics for every foreground class `1..C` of the truth coding.
pub fn evaluate_case(pred: &LabelVolume, truth: &LabelVolume, spacing: [f64; 3]) -> Result<MetricsReport> {
    check_extents(truth.extents(), pred.extents())?;
    let classes = truth.num_classes().max(pred.num_classes());
    let mut out = Vec::new();
    for class in 1..classes {
        let class = class as u8;
        let a = pred.mask(class);
        let b = truth.mask(class);
        let has_a = a.iter().any(|&v| v);
        let has_b = b.iter().any(|&v| v);
        out.push(ClassMetrics {
            class,
            name: class_name(class),
            dc_percent: dice(&a, &b)?,
            hd95_mm: if has_a && has_b {
                Some(hd95(&a, &b, truth.extents(), spacing)?)
            } else {
                None
            },
            avd_percent: if has_b { Some(avd(&a, &b)?) } else { None },
        });
    }
    Ok(MetricsReport { classes: out })
}
