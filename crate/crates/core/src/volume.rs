//! Multi-channel image volumes and per-voxel label maps.

use crate::error::{Error, Result};
use crate::tensor::{reflect_index, Tensor};

/// Multi-channel voxel grid with physical spacing, channels stored planar.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    channels: usize,
    extents: [usize; 3],
    spacing_mm: [f64; 3],
    data: Vec<f32>,
    channel_names: Vec<String>,
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::invalid(format!("spacing must be strictly positive, got {spacing:?}")));
    }
    Ok(())
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing_mm: [f64; 3], channel_names: Vec<String>, data: Vec<f32>) -> Result<Self> {
        check_spacing(spacing_mm)?;
        let channels = channel_names.len();
        if channels == 0 {
            return Err(Error::invalid("a volume needs at least one channel"));
        }
        let expected = channels * extents.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::shape("volume voxels", expected, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume voxel {i}")));
        }
        Ok(Self {
            channels,
            extents,
            spacing_mm,
            data,
            channel_names,
        })
    }

    pub fn single(name: &str, extents: [usize; 3], spacing_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(extents, spacing_mm, vec![name.to_string()], data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Single-channel copy of channel `c`.
    pub fn channel_volume(&self, c: usize) -> Volume {
        Volume {
            channels: 1,
            extents: self.extents,
            spacing_mm: self.spacing_mm,
            data: self.channel(c).to_vec(),
            channel_names: vec![self.channel_names[c].clone()],
        }
    }

    /// `[1, C, D, H, W]` tensor view of the data.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.extents;
        Tensor::new(vec![1, self.channels, d, h, w], self.data.clone()).expect("volume shape is consistent")
    }

    /// Builds a volume from one sample of a `[1, C, D, H, W]` tensor.
    pub fn from_tensor(t: &Tensor<f32>, spacing_mm: [f64; 3], channel_names: Vec<String>) -> Result<Self> {
        let [n, c, d, h, w] = t.dims5()?;
        if n != 1 {
            return Err(Error::shape("batch", 1, n));
        }
        if channel_names.len() != c {
            return Err(Error::shape("channel names", c, channel_names.len()));
        }
        Self::new([d, h, w], spacing_mm, channel_names, t.data().to_vec())
    }

    pub fn same_grid(&self, extents: [usize; 3], spacing: [f64; 3]) -> bool {
        self.extents == extents && self.spacing_mm == spacing
    }

    /// Stacks channel-wise; all parts must share extents.
    pub fn concat(parts: &[&Volume]) -> Result<Volume> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero volumes"))?;
        let mut data = Vec::new();
        let mut names = Vec::new();
        for p in parts {
            check_extents(first.extents, p.extents)?;
            data.extend_from_slice(&p.data);
            names.extend(p.channel_names.iter().cloned());
        }
        Volume::new(first.extents, first.spacing_mm, names, data)
    }

    /// Copy of the box `[corner, corner + size)`, reflect-padding where it leaves the grid.
    pub fn crop_reflect(&self, corner: [usize; 3], size: [usize; 3]) -> Volume {
        let [d, h, w] = self.extents;
        let mut data = Vec::with_capacity(self.channels * size.iter().product::<usize>());
        for c in 0..self.channels {
            let ch = self.channel(c);
            for z in 0..size[0] {
                let sz = reflect_index((corner[0] + z) as isize, d);
                for y in 0..size[1] {
                    let sy = reflect_index((corner[1] + y) as isize, h);
                    let row = (sz * h + sy) * w;
                    for x in 0..size[2] {
                        data.push(ch[row + reflect_index((corner[2] + x) as isize, w)]);
                    }
                }
            }
        }
        Volume {
            channels: self.channels,
            extents: size,
            spacing_mm: self.spacing_mm,
            data,
            channel_names: self.channel_names.clone(),
        }
    }

    pub(crate) fn with_data(&self, data: Vec<f32>) -> Volume {
        debug_assert_eq!(data.len(), self.data.len());
        Volume {
            data,
            ..self.clone()
        }
    }

    pub(crate) fn renamed(mut self, names: Vec<String>) -> Volume {
        debug_assert_eq!(names.len(), self.channels);
        self.channel_names = names;
        self
    }
}

pub(crate) fn check_extents(expected: [usize; 3], actual: [usize; 3]) -> Result<()> {
    for (axis, name) in ["D", "H", "W"].iter().enumerate() {
        if expected[axis] != actual[axis] {
            return Err(Error::shape(*name, expected[axis], actual[axis]));
        }
    }
    Ok(())
}

/// Per-voxel class ids; `0` is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    extents: [usize; 3],
    spacing_mm: [f64; 3],
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(extents: [usize; 3], spacing_mm: [f64; 3], num_classes: usize, data: Vec<u8>) -> Result<Self> {
        check_spacing(spacing_mm)?;
        if !(1..=256).contains(&num_classes) {
            return Err(Error::invalid(format!("num_classes {num_classes} outside 1..=256")));
        }
        let expected: usize = extents.iter().product();
        if data.len() != expected {
            return Err(Error::shape("label voxels", expected, data.len()));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            extents,
            spacing_mm,
            num_classes,
            data,
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn voxels(&self) -> usize {
        self.data.len()
    }

    /// Binary mask of one class.
    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn crop_reflect(&self, corner: [usize; 3], size: [usize; 3]) -> LabelVolume {
        let [d, h, w] = self.extents;
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            let sz = reflect_index((corner[0] + z) as isize, d);
            for y in 0..size[1] {
                let sy = reflect_index((corner[1] + y) as isize, h);
                let row = (sz * h + sy) * w;
                for x in 0..size[2] {
                    data.push(self.data[row + reflect_index((corner[2] + x) as isize, w)]);
                }
            }
        }
        LabelVolume {
            extents: size,
            spacing_mm: self.spacing_mm,
            num_classes: self.num_classes,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_contents() {
        assert!(Volume::single("a", [2, 2, 2], [1.0, 1.0, 0.0], vec![0.0; 8]).is_err());
        assert!(Volume::single("a", [2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::single("a", [1, 1, 2], [1.0; 3], vec![0.0, f32::NAN]).is_err());
        assert!(LabelVolume::new([1, 1, 2], [1.0; 3], 2, vec![0, 2]).is_err());
    }

    #[test]
    fn identity_crop_is_a_copy() {
        let v = Volume::single("a", [2, 3, 4], [1.0; 3], (0..24).map(|i| i as f32).collect()).unwrap();
        assert_eq!(v.crop_reflect([0, 0, 0], [2, 3, 4]), v);
        let l = LabelVolume::new([2, 3, 4], [1.0; 3], 4, (0..24).map(|i| (i % 4) as u8).collect()).unwrap();
        assert_eq!(l.crop_reflect([0, 0, 0], [2, 3, 4]), l);
    }
}
