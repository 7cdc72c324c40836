//! Diffusion-weighted volumes, axial slices and their on-disk format.
//!
//! A volume is stored as `<name>.bin`, little-endian `f32` values with x
//! varying fastest, then y, then z, next to a `<name>.json` sidecar holding
//! `{dims, voxel_size, bvalue, direction, dtype}`. A directory of volumes
//! also carries `bvals` and `bvecs` text files listing the scheme in order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::qspace::{check_unit, norm, GradientScheme, Vec3};

pub const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub bvalue: f64,
    pub direction: Vec3,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

/// One 3D image acquired (or generated) along a single gradient direction.
#[derive(Clone, Debug, PartialEq)]
pub struct DwiVolume {
    dims: [usize; 3],
    data: Vec<f64>,
    pub direction: Vec3,
    pub bvalue: f64,
    pub voxel_size: [f64; 3],
    /// Provenance tag such as `acquired`, `interp` or `diffusion`.
    pub source: Option<String>,
}

impl DwiVolume {
    pub fn new(dims: [usize; 3], data: Vec<f64>, direction: Vec3, bvalue: f64, voxel_size: [f64; 3]) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if dims.contains(&0) || data.len() != n {
            return Err(Error::Shape(format!("{} values for dims {dims:?}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation(format!("volume intensity {v} must be finite and non-negative")));
        }
        if !(bvalue == 0.0 && norm(&direction) == 0.0) {
            check_unit(&direction)?;
        }
        Ok(Self { dims, data, direction, bvalue, voxel_size, source: None })
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn num_slices(&self) -> usize {
        self.dims[2]
    }

    /// Axial slice `z` as a `ny × nx` image, with identity normalisation.
    pub fn slice(&self, z: usize) -> DwiSlice {
        let [nx, ny, _] = self.dims;
        let start = nx * ny * z;
        DwiSlice {
            height: ny,
            width: nx,
            pixels: self.data[start..start + nx * ny].to_vec(),
            slice_index: z,
            norm_min: 0.0,
            norm_max: 1.0,
        }
    }

    /// Stacks axial slices back into a volume; slice `k` lands at `z = k`.
    pub fn from_slices(slices: &[DwiSlice], direction: Vec3, bvalue: f64, voxel_size: [f64; 3]) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::Shape("no slices to stack".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(h * w * slices.len());
        for s in slices {
            if (s.height, s.width) != (h, w) {
                return Err(Error::Shape(format!("slice {}x{} differs from {h}x{w}", s.height, s.width)));
            }
            data.extend_from_slice(&s.pixels);
        }
        Self::new([w, h, slices.len()], data, direction, bvalue, voxel_size)
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            dims: self.dims,
            voxel_size: self.voxel_size,
            bvalue: self.bvalue,
            direction: self.direction,
            dtype: DTYPE.to_string(),
            source: self.source.clone(),
        }
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(&bin, bytes).map_err(io_err(&bin))?;
        let text = serde_json::to_string_pretty(&self.header())?;
        std::fs::write(&json, text).map_err(io_err(&json))?;
        Ok(())
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let text = std::fs::read_to_string(&json).map_err(io_err(&json))?;
        let header: VolumeHeader = serde_json::from_str(&text)?;
        if header.dtype != DTYPE {
            return Err(Error::Parse(format!("{}: unsupported dtype '{}'", json.display(), header.dtype)));
        }
        let bytes = std::fs::read(&bin).map_err(io_err(&bin))?;
        let n = header.dims.iter().product::<usize>();
        if bytes.len() != 4 * n {
            return Err(Error::Shape(format!(
                "{}: {} bytes for dims {:?}",
                bin.display(),
                bytes.len(),
                header.dims
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut vol = Self::new(header.dims, data, header.direction, header.bvalue, header.voxel_size)?;
        vol.source = header.source;
        Ok(vol)
    }

    /// Rounds every value through `f32`, matching what a write/read cycle yields.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = *v as f32 as f64;
        }
        out
    }
}

/// A 2D axial slice with the min/max used to normalise it.
#[derive(Clone, Debug, PartialEq)]
pub struct DwiSlice {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height × width`.
    pub pixels: Vec<f64>,
    pub slice_index: usize,
    pub norm_min: f64,
    pub norm_max: f64,
}

impl DwiSlice {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!("{} pixels for {height}x{width}", pixels.len())));
        }
        Ok(Self { height, width, pixels, slice_index: 0, norm_min: 0.0, norm_max: 1.0 })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width], slice_index: 0, norm_min: 0.0, norm_max: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn same_shape(&self, other: &DwiSlice) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_same_shape(&self, other: &DwiSlice) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "slice {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }
}

/// An ordered collection of volumes together with their gradient scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct DwiSet {
    pub volumes: Vec<DwiVolume>,
}

impl DwiSet {
    pub fn new(volumes: Vec<DwiVolume>) -> Result<Self> {
        if let Some(first) = volumes.first() {
            if let Some(v) = volumes.iter().find(|v| v.dims != first.dims) {
                return Err(Error::Shape(format!("volume dims {:?} differ from {:?}", v.dims, first.dims)));
            }
        }
        Ok(Self { volumes })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn dims(&self) -> Option<[usize; 3]> {
        self.volumes.first().map(|v| v.dims)
    }

    pub fn scheme(&self) -> Result<GradientScheme> {
        GradientScheme::new(
            self.volumes.iter().map(|v| v.direction).collect(),
            self.volumes.iter().map(|v| v.bvalue).collect(),
        )
    }

    /// Indices of diffusion-weighted volumes.
    pub fn weighted(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.volumes[i].bvalue > 0.0).collect()
    }

    pub fn unweighted(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.volumes[i].bvalue == 0.0).collect()
    }

    pub fn volume_stem(dir: &Path, i: usize) -> PathBuf {
        dir.join(format!("dwi_{i:04}"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (i, v) in self.volumes.iter().enumerate() {
            v.write(&Self::volume_stem(dir, i))?;
        }
        self.scheme()?.write(&dir.join("bvals"), &dir.join("bvecs"))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let scheme = GradientScheme::read(&dir.join("bvals"), &dir.join("bvecs"))?;
        let mut volumes = Vec::with_capacity(scheme.len());
        for i in 0..scheme.len() {
            let v = DwiVolume::read(&Self::volume_stem(dir, i))?;
            let same_dir = (0..3).all(|a| (v.direction[a] - scheme.direction(i)[a]).abs() < 1e-6);
            if !same_dir || (v.bvalue - scheme.bvalue(i)).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "{}: sidecar gradient disagrees with bvals/bvecs entry {i}",
                    dir.display()
                )));
            }
            volumes.push(v);
        }
        Self::new(volumes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> DwiVolume {
        let n = dims.iter().product();
        DwiVolume::new(dims, (0..n).map(|i| i as f64 * 0.5).collect(), [0.0, 0.0, 1.0], 1000.0, [1.25; 3]).unwrap()
    }

    #[test]
    fn x_varies_fastest() {
        let v = ramp([4, 3, 2]);
        assert_eq!(v.get(1, 0, 0), 0.5);
        assert_eq!(v.get(0, 1, 0), 2.0);
        assert_eq!(v.get(0, 0, 1), 6.0);
    }

    #[test]
    fn slices_round_trip() {
        let v = ramp([4, 3, 2]);
        let s1 = v.slice(1);
        assert_eq!((s1.height, s1.width, s1.slice_index), (3, 4, 1));
        assert_eq!(s1.pixels[4 + 2], v.get(2, 1, 1));
        let back = DwiVolume::from_slices(&[v.slice(0), s1], v.direction, v.bvalue, v.voxel_size).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn rejects_negative_and_non_unit() {
        assert!(DwiVolume::new([1, 1, 1], vec![-1.0], [1.0, 0.0, 0.0], 1000.0, [1.0; 3]).is_err());
        assert!(DwiVolume::new([1, 1, 1], vec![1.0], [1.0, 1.0, 0.0], 1000.0, [1.0; 3]).is_err());
        assert!(DwiVolume::new([1, 1, 1], vec![1.0], [0.0; 3], 0.0, [1.0; 3]).is_ok());
    }

    #[test]
    fn file_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = ramp([5, 4, 3]).with_source("acquired");
        let stem = dir.path().join("vol");
        v.write(&stem).unwrap();
        let bytes = std::fs::read(stem.with_extension("bin")).unwrap();
        assert_eq!(bytes.len(), 60 * 4);
        assert_eq!(f32::from_le_bytes(bytes[4..8].try_into().unwrap()), 0.5);
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
        assert_eq!(sidecar["dtype"], "f32le");
        assert_eq!(sidecar["dims"], serde_json::json!([5, 4, 3]));
        assert_eq!(DwiVolume::read(&stem).unwrap(), v);
    }

    #[test]
    fn set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b0 = DwiVolume::new([2, 2, 1], vec![1.0; 4], [0.0; 3], 0.0, [1.0; 3]).unwrap();
        let b1 = DwiVolume::new([2, 2, 1], vec![0.5; 4], [0.0, 1.0, 0.0], 1000.0, [1.0; 3]).unwrap();
        let set = DwiSet::new(vec![b0, b1]).unwrap();
        set.write(dir.path()).unwrap();
        assert_eq!(DwiSet::read(dir.path()).unwrap(), set);
        assert_eq!(set.weighted(), vec![1]);
    }
}
