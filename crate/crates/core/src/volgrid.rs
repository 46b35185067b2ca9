//! Volume representation, plane extraction and the GPV on-disk format.
//!
//! A GPV volume is a pair of files sharing a stem: `<name>.json` holds the
//! metadata and `<name>.raw` holds `nx * ny * nz` little-endian `i16` values
//! in z-major, then row-major order (x varies fastest). All plane indices in
//! files and APIs are 0-based.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hounsfield unit, stored as a signed 16-bit value.
pub type Hu = i16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidDims(format!("{nx}x{ny}x{nz}")));
        }
        Ok(Dims { nx, ny, nz })
    }

    pub fn voxel_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn plane_len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn extent(&self, axis: Axis) -> usize {
        match axis {
            Axis::Axial => self.nz,
            Axis::Sagittal => self.nx,
            Axis::Coronal => self.ny,
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

pub const DEFAULT_SPACING_UM: [f64; 3] = [10.0, 10.0, 10.0];

/// Voxel element types a [`Volume`] can hold.
pub trait Voxel: Copy + Into<f64> + Send + Sync + 'static {
    /// Converts back from a real value, rounding and saturating when the
    /// target is integral.
    fn from_f64(x: f64) -> Self;
}

impl Voxel for i16 {
    fn from_f64(x: f64) -> Self {
        x.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
    }
}

impl Voxel for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

/// A 3D scan. The z axis is the bone long axis; plane `k` is the axial
/// plane at z = k.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T = Hu> {
    id: String,
    dims: Dims,
    spacing_um: [f64; 3],
    voxels: Vec<T>,
}

/// Real-valued volume produced by normalization and resampling.
pub type RealVolume = Volume<f32>;

impl<T: Copy> Volume<T> {
    pub fn new(id: impl Into<String>, dims: Dims, voxels: Vec<T>) -> Result<Self> {
        Self::with_spacing(id, dims, DEFAULT_SPACING_UM, voxels)
    }

    pub fn with_spacing(
        id: impl Into<String>,
        dims: Dims,
        spacing_um: [f64; 3],
        voxels: Vec<T>,
    ) -> Result<Self> {
        Dims::new(dims.nx, dims.ny, dims.nz)?;
        if voxels.len() != dims.voxel_count() {
            return Err(Error::InvalidDims(format!(
                "{} voxels supplied for dims {dims}",
                voxels.len()
            )));
        }
        Ok(Volume {
            id: id.into(),
            dims,
            spacing_um,
            voxels,
        })
    }

    pub fn filled(id: impl Into<String>, dims: Dims, value: T) -> Result<Self> {
        Self::new(id, dims, vec![value; dims.voxel_count()])
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing_um(&self) -> [f64; 3] {
        self.spacing_um
    }

    pub fn voxels(&self) -> &[T] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<T> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims.ny + y) * self.dims.nx + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.voxels[self.index(x, y, z)]
    }

    /// Axial plane `z` as a row-major slice.
    pub fn axial(&self, z: usize) -> &[T] {
        let n = self.dims.plane_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    /// Same id and spacing, new contents.
    pub fn derive<U: Copy>(&self, dims: Dims, voxels: Vec<U>) -> Result<Volume<U>> {
        Volume::with_spacing(self.id.clone(), dims, self.spacing_um, voxels)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            id: self.id.clone(),
            dims: self.dims,
            spacing_um: self.spacing_um,
            voxels: self.voxels.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Fixed z; plane is ny rows by nx columns.
    Axial,
    /// Fixed x; plane is nz rows by ny columns.
    Sagittal,
    /// Fixed y; plane is nz rows by nx columns.
    Coronal,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Axial => "axial",
            Axis::Sagittal => "sagittal",
            Axis::Coronal => "coronal",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Axis::Axial),
            "sagittal" => Ok(Axis::Sagittal),
            "coronal" => Ok(Axis::Coronal),
            other => Err(Error::arg(format!("unknown axis '{other}'"))),
        }
    }
}

/// A 2D grid cut out of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane2D {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub axis: Axis,
    pub index: usize,
}

impl Plane2D {
    pub fn new(width: usize, height: usize, values: Vec<f64>, axis: Axis, index: usize) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} plane",
                values.len()
            )));
        }
        Ok(Plane2D {
            width,
            height,
            values,
            axis,
            index,
        })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Copies one plane out of `v`. Rows of sagittal and coronal planes run
/// along z.
pub fn extract_plane<T: Copy + Into<f64>>(v: &Volume<T>, axis: Axis, index: usize) -> Result<Plane2D> {
    let d = v.dims();
    let extent = d.extent(axis);
    if index >= extent {
        return Err(Error::IndexOutOfRange {
            axis: axis.name(),
            index: index as i64,
            extent,
        });
    }
    let (width, height, values): (usize, usize, Vec<f64>) = match axis {
        Axis::Axial => (d.nx, d.ny, v.axial(index).iter().map(|&h| h.into()).collect()),
        Axis::Sagittal => {
            let mut out = Vec::with_capacity(d.nz * d.ny);
            for z in 0..d.nz {
                for y in 0..d.ny {
                    out.push(v.get(index, y, z).into());
                }
            }
            (d.ny, d.nz, out)
        }
        Axis::Coronal => {
            let mut out = Vec::with_capacity(d.nz * d.nx);
            for z in 0..d.nz {
                let start = v.index(0, index, z);
                out.extend(v.voxels()[start..start + d.nx].iter().map(|&h| h.into()));
            }
            (d.nx, d.nz, out)
        }
    };
    Plane2D::new(width, height, values, axis, index)
}

/// Ground-truth growth-plate plane index for one volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GppAnnotation {
    pub volume_id: String,
    pub gppi: usize,
    pub source: String,
}

impl GppAnnotation {
    pub fn new(volume_id: impl Into<String>, gppi: usize, source: impl Into<String>) -> Self {
        GppAnnotation {
            volume_id: volume_id.into(),
            gppi,
            source: source.into(),
        }
    }

    pub fn validate_for(&self, dims: Dims) -> Result<()> {
        if self.gppi >= dims.nz {
            return Err(Error::IndexOutOfRange {
                axis: "axial",
                index: self.gppi as i64,
                extent: dims.nz,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    id: String,
    nx: i64,
    ny: i64,
    nz: i64,
    spacing_um: [f64; 3],
    dtype: String,
    order: String,
    #[serde(default = "zero_base")]
    index_base: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gppi: Option<i64>,
}

fn zero_base() -> u8 {
    0
}

/// `<stem>.json` and `<stem>.raw` for a path given with or without either
/// extension.
pub fn gpv_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (PathBuf::from(json), PathBuf::from(raw))
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    write_gpv(v, None, path)
}

/// Saves a volume with its GPPI recorded in the sidecar.
pub fn save_annotated(v: &Volume, ann: &GppAnnotation, path: &Path) -> Result<()> {
    ann.validate_for(v.dims())?;
    write_gpv(v, Some(ann.gppi), path)
}

fn write_gpv(v: &Volume, gppi: Option<usize>, path: &Path) -> Result<()> {
    let (json_path, raw_path) = gpv_paths(path);
    let d = v.dims();
    let sidecar = Sidecar {
        id: v.id().to_string(),
        nx: d.nx as i64,
        ny: d.ny as i64,
        nz: d.nz as i64,
        spacing_um: v.spacing_um(),
        dtype: "i16le".into(),
        order: "zyx".into(),
        index_base: 0,
        gppi: gppi.map(|g| g as i64),
    };
    let mut text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Metadata {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let mut payload = Vec::with_capacity(v.voxels().len() * 2);
    for &h in v.voxels() {
        payload.extend_from_slice(&h.to_le_bytes());
    }
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    load_annotated(path).map(|(v, _)| v)
}

/// Loads a volume and, when the sidecar records one, its annotation.
pub fn load_annotated(path: &Path) -> Result<(Volume, Option<GppAnnotation>)> {
    let (json_path, raw_path) = gpv_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta = |reason: String| Error::Metadata {
        path: json_path.clone(),
        reason,
    };
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| meta(e.to_string()))?;
    if sidecar.dtype != "i16le" {
        return Err(meta(format!("unsupported dtype '{}'", sidecar.dtype)));
    }
    if sidecar.order != "zyx" {
        return Err(meta(format!("unsupported order '{}'", sidecar.order)));
    }
    if sidecar.index_base != 0 {
        return Err(meta(format!("unsupported index base {}", sidecar.index_base)));
    }
    if sidecar.nx <= 0 || sidecar.ny <= 0 || sidecar.nz <= 0 {
        return Err(Error::InvalidDims(format!(
            "{}x{}x{}",
            sidecar.nx, sidecar.ny, sidecar.nz
        )));
    }
    let dims = Dims::new(sidecar.nx as usize, sidecar.ny as usize, sidecar.nz as usize)?;
    let payload = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = dims.voxel_count() * 2;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    let voxels = payload
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    let volume = Volume::with_spacing(sidecar.id, dims, sidecar.spacing_um, voxels)?;
    let ann = match sidecar.gppi {
        Some(g) if g < 0 || g as usize >= dims.nz => {
            return Err(meta(format!("gppi {g} outside [0, {})", dims.nz)));
        }
        Some(g) => Some(GppAnnotation::new(volume.id(), g as usize, "sidecar")),
        None => None,
    };
    Ok((volume, ann))
}
