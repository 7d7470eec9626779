//! Voxel containers and the RBV on-disk format.
//!
//! Voxels are stored channel-major, then z, y, x (x fastest). The RBV file
//! layout is:
//!
//! ```text
//! "RBVOL\0\0\0" | u32 LE header length | UTF-8 JSON header | raw payload
//! ```
//!
//! with header `{"dims":[x,y,z],"channels":C,"spacing_mm":[sx,sy,sz],"dtype":"f32le"|"u8"}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along (x, y, z).
pub type Dims = [usize; 3];

/// Physical voxel size in millimetres along (x, y, z).
pub type Spacing = [f64; 3];

pub const RBV_MAGIC: &[u8; 8] = b"RBVOL\0\0\0";

fn check_geometry(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Shape(format!("dims must all be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Shape(format!("spacing must be strictly positive, got {spacing:?}")));
    }
    Ok(())
}

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    (z * dims[1] + y) * dims[0] + x
}

#[inline]
pub fn coords_of(dims: Dims, idx: usize) -> [usize; 3] {
    let x = idx % dims[0];
    let y = (idx / dims[0]) % dims[1];
    let z = idx / (dims[0] * dims[1]);
    [x, y, z]
}

/// Binary annotation field.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    dims: Dims,
    spacing_mm: Spacing,
    voxels: Vec<u8>,
}

impl MaskVolume {
    pub fn zeros(dims: Dims, spacing_mm: Spacing) -> Result<Self> {
        check_geometry(dims, spacing_mm)?;
        Ok(Self { dims, spacing_mm, voxels: vec![0; voxel_count(dims)] })
    }

    pub fn from_voxels(dims: Dims, spacing_mm: Spacing, voxels: Vec<u8>) -> Result<Self> {
        check_geometry(dims, spacing_mm)?;
        if voxels.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "mask has {} voxels, dims {dims:?} need {}",
                voxels.len(),
                voxel_count(dims)
            )));
        }
        if voxels.iter().any(|&v| v > 1) {
            return Err(Error::Shape("mask values must be 0 or 1".into()));
        }
        Ok(Self { dims, spacing_mm, voxels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing_mm(&self) -> Spacing {
        self.spacing_mm
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[linear_index(self.dims, x, y, z)] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = linear_index(self.dims, x, y, z);
        self.voxels[i] = value as u8;
    }

    pub fn set_index(&mut self, idx: usize, value: bool) {
        self.voxels[idx] = value as u8;
    }

    pub fn foreground_count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }

    /// Linear indices of foreground voxels, ascending.
    pub fn foreground_indices(&self) -> Vec<usize> {
        self.voxels.iter().enumerate().filter_map(|(i, &v)| (v != 0).then_some(i)).collect()
    }

    /// Centre of voxel `idx` in millimetres.
    pub fn voxel_center_mm(&self, idx: usize) -> [f64; 3] {
        voxel_center_mm(self.dims, self.spacing_mm, idx)
    }

    pub fn slice_has_foreground(&self, z: usize) -> bool {
        let plane = self.dims[0] * self.dims[1];
        self.voxels[z * plane..(z + 1) * plane].iter().any(|&v| v != 0)
    }
}

pub fn voxel_center_mm(dims: Dims, spacing: Spacing, idx: usize) -> [f64; 3] {
    let c = coords_of(dims, idx);
    [(c[0] as f64 + 0.5) * spacing[0], (c[1] as f64 + 0.5) * spacing[1], (c[2] as f64 + 0.5) * spacing[2]]
}

/// Multi-channel scalar field. Also carries single-channel probability maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    channels: usize,
    spacing_mm: Spacing,
    data: Vec<f32>,
}

impl Volume {
    pub fn zeros(dims: Dims, channels: usize, spacing_mm: Spacing) -> Result<Self> {
        check_geometry(dims, spacing_mm)?;
        if channels == 0 {
            return Err(Error::Shape("volume needs at least one channel".into()));
        }
        Ok(Self { dims, channels, spacing_mm, data: vec![0.0; channels * voxel_count(dims)] })
    }

    pub fn from_data(dims: Dims, channels: usize, spacing_mm: Spacing, data: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing_mm)?;
        if channels == 0 || data.len() != channels * voxel_count(dims) {
            return Err(Error::Shape(format!(
                "volume data length {} does not match {channels} x {dims:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("volume contains non-finite values".into()));
        }
        Ok(Self { dims, channels, spacing_mm, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spacing_mm(&self) -> Spacing {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.dims);
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = voxel_count(self.dims);
        &mut self.data[c * n..(c + 1) * n]
    }

    /// One z-plane of one channel, `dims[1]` rows of `dims[0]` values.
    pub fn plane(&self, c: usize, z: usize) -> &[f32] {
        let plane = self.dims[0] * self.dims[1];
        let start = c * voxel_count(self.dims) + z * plane;
        &self.data[start..start + plane]
    }

    pub fn plane_mut(&mut self, c: usize, z: usize) -> &mut [f32] {
        let plane = self.dims[0] * self.dims[1];
        let start = c * voxel_count(self.dims) + z * plane;
        &mut self.data[start..start + plane]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct RbvHeader {
    dims: Dims,
    channels: usize,
    spacing_mm: Spacing,
    dtype: String,
}

/// Contents of an RBV file.
#[derive(Debug, Clone, PartialEq)]
pub enum RbvData {
    Volume(Volume),
    Mask(MaskVolume),
}

fn encode(header: &RbvHeader, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(RBV_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let header = RbvHeader { dims: v.dims, channels: v.channels, spacing_mm: v.spacing_mm, dtype: "f32le".into() };
    let payload: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    encode(&header, &payload)
}

pub fn encode_mask(m: &MaskVolume) -> Vec<u8> {
    let header = RbvHeader { dims: m.dims, channels: 1, spacing_mm: m.spacing_mm, dtype: "u8".into() };
    encode(&header, &m.voxels)
}

pub fn decode_rbv(bytes: &[u8], path: &Path) -> Result<RbvData> {
    let bad = |reason: &str| Error::format(path, reason);
    if bytes.len() < 12 || &bytes[..8] != RBV_MAGIC {
        return Err(bad("missing RBV magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: RbvHeader = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("bad header: {e}")))?;
    let payload = &body[hlen..];
    let n = voxel_count(header.dims) * header.channels;
    let wrap = |e: Error| Error::format(path, e.to_string());
    match header.dtype.as_str() {
        "f32le" => {
            if payload.len() != n * 4 {
                return Err(bad("payload length does not match header"));
            }
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Volume::from_data(header.dims, header.channels, header.spacing_mm, data).map(RbvData::Volume).map_err(wrap)
        }
        "u8" => {
            if header.channels != 1 || payload.len() != n {
                return Err(bad("u8 payload must be a single-channel mask"));
            }
            MaskVolume::from_voxels(header.dims, header.spacing_mm, payload.to_vec()).map(RbvData::Mask).map_err(wrap)
        }
        other => Err(bad(&format!("unknown dtype {other:?}"))),
    }
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn write_mask(path: &Path, m: &MaskVolume) -> Result<()> {
    fs::write(path, encode_mask(m)).map_err(|e| Error::io(path, e))
}

pub fn read_rbv(path: &Path) -> Result<RbvData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rbv(&bytes, path)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match read_rbv(path)? {
        RbvData::Volume(v) => Ok(v),
        RbvData::Mask(_) => Err(Error::format(path, "expected f32le volume, found u8 mask")),
    }
}

pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    match read_rbv(path)? {
        RbvData::Mask(m) => Ok(m),
        RbvData::Volume(_) => Err(Error::format(path, "expected u8 mask, found f32le volume")),
    }
}
