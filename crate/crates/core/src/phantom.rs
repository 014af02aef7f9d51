//! Synthetic brain-like phantoms: nested ellipsoids (WM core, GM shell, CSF
//! rim) imaged through several contrasts with a smooth gain field and noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volio::{write_labels, write_volume, CaseEntry, DatasetManifest};
use crate::volume::{LabelVolume, Volume};

pub const BACKGROUND: u8 = 0;
pub const CSF: u8 = 1;
pub const GM: u8 = 2;
pub const WM: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySpec {
    pub name: String,
    /// Mean intensity of background, CSF, GM, WM.
    pub class_means: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub extents: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Ellipsoid center in voxel coordinates.
    pub center: [f64; 3],
    /// Semi-axes in voxels of the CSF, GM and WM ellipsoids (outer to inner).
    pub csf_radii: [f64; 3],
    pub gm_radii: [f64; 3],
    pub wm_radii: [f64; 3],
    pub modalities: Vec<ModalitySpec>,
    pub noise_std: f64,
    /// Peak relative amplitude of the multiplicative gain field.
    pub field_strength: f64,
    /// Spatial period of the gain field as a multiple of the volume extent.
    pub field_period: f64,
}

/// T1-, T1-IR- and FLAIR-like contrasts with different class orderings.
pub fn default_modalities() -> Vec<ModalitySpec> {
    let m = |name: &str, class_means| ModalitySpec {
        name: name.to_string(),
        class_means,
    };
    vec![
        m("T1", [0.0, 0.25, 0.55, 0.85]),
        m("T1IR", [0.05, 0.9, 0.35, 0.6]),
        m("FLAIR", [0.02, 0.15, 0.75, 0.5]),
    ]
}

impl PhantomSpec {
    /// Geometry jittered by `seed`, with the default three contrasts.
    pub fn random(seed: u64, extents: [usize; 3]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = extents.map(|e| e as f64 / 2.0);
        let mut jitter = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let center = [0, 1, 2].map(|a| half[a] - 0.5 + jitter(-0.06, 0.06) * half[a]);
        let csf = [0, 1, 2].map(|a| half[a] * jitter(0.72, 0.86));
        let gm = [0, 1, 2].map(|a| csf[a] * jitter(0.72, 0.84));
        let wm = [0, 1, 2].map(|a| gm[a] * jitter(0.55, 0.7));
        Self {
            seed,
            extents,
            spacing_mm: [1.0; 3],
            center,
            csf_radii: csf,
            gm_radii: gm,
            wm_radii: wm,
            modalities: default_modalities(),
            noise_std: 0.04,
            field_strength: 0.1,
            field_period: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&e| e < 32) {
            return Err(Error::invalid(format!("phantom extents {:?} must be >= 32", self.extents)));
        }
        let positive = |r: &[f64; 3]| r.iter().all(|v| v.is_finite() && *v > 0.0);
        if !(positive(&self.csf_radii) && positive(&self.gm_radii) && positive(&self.wm_radii)) {
            return Err(Error::invalid("ellipsoid radii must be positive"));
        }
        for a in 0..3 {
            if !(self.wm_radii[a] < self.gm_radii[a] && self.gm_radii[a] < self.csf_radii[a]) {
                return Err(Error::invalid(format!(
                    "radii are not strictly nested on axis {a}: WM {} GM {} CSF {}",
                    self.wm_radii[a], self.gm_radii[a], self.csf_radii[a]
                )));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise std must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.field_strength) || self.field_period <= 0.0 {
            return Err(Error::invalid("field strength must lie in [0, 1) and the period be > 0"));
        }
        if self.modalities.is_empty() {
            return Err(Error::invalid("a phantom needs at least one modality"));
        }
        Ok(())
    }

    fn inside(&self, radii: &[f64; 3], p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| {
                let t = (p[a] as f64 - self.center[a]) / radii[a];
                t * t
            })
            .sum::<f64>()
            <= 1.0
    }

    /// Class of voxel `p` from analytic ellipsoid membership.
    pub fn label_at(&self, p: [usize; 3]) -> u8 {
        if self.inside(&self.wm_radii, p) {
            WM
        } else if self.inside(&self.gm_radii, p) {
            GM
        } else if self.inside(&self.csf_radii, p) {
            CSF
        } else {
            BACKGROUND
        }
    }
}

/// Modality images and labels for `spec`; deterministic per seed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Vec<Volume>, LabelVolume)> {
    spec.validate()?;
    let [d, h, w] = spec.extents;
    let mut labels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                labels.push(spec.label_at([z, y, x]));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("std is positive"));
    let mut vols = Vec::with_capacity(spec.modalities.len());
    for m in &spec.modalities {
        let phase: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
        let mut data = Vec::with_capacity(labels.len());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [z, y, x];
                    let field = if spec.field_strength > 0.0 {
                        let wave: f64 = (0..3)
                            .map(|a| {
                                let k = std::f64::consts::TAU / (spec.extents[a] as f64 * spec.field_period);
                                (k * p[a] as f64 + phase[a]).sin()
                            })
                            .sum::<f64>()
                            / 3.0;
                        1.0 + spec.field_strength * wave
                    } else {
                        1.0
                    };
                    let label = labels[(z * h + y) * w + x] as usize;
                    let mut v = m.class_means[label] * field;
                    if let Some(n) = &noise {
                        v += n.sample(&mut rng);
                    }
                    data.push(v as f32);
                }
            }
        }
        vols.push(Volume::single(&m.name, spec.extents, spec.spacing_mm, data)?);
    }
    Ok((vols, LabelVolume::new(spec.extents, spec.spacing_mm, 4, labels)?))
}

/// Writes `cases` phantoms plus `manifest.txt` into `dir`; returns the manifest.
pub fn write_phantom_dataset(dir: &Path, cases: usize, seed: u64, extents: [usize; 3]) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(cases);
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..cases {
        let spec = PhantomSpec::random(seeds.random(), extents);
        let (vols, labels) = generate_phantom(&spec)?;
        let id = format!("case{i:02}");
        let label_path = format!("{id}_label.vvol");
        write_labels(&labels, &dir.join(&label_path))?;
        let mut modalities = Vec::new();
        for v in &vols {
            let name = v.channel_names()[0].clone();
            let p = format!("{id}_{name}.vvol");
            write_volume(v, &dir.join(&p))?;
            modalities.push((name, p.into()));
        }
        entries.push(CaseEntry {
            id,
            spacing_mm: spec.spacing_mm,
            label: Some(label_path.into()),
            modalities,
        });
    }
    let manifest = DatasetManifest {
        dir: dir.to_path_buf(),
        cases: entries,
    };
    manifest.write(&dir.join("manifest.txt"))?;
    Ok(manifest)
}
