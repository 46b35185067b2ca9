//! Synthetic femur phantoms with a known growth-plate plane.
//!
//! Along z a phantom has four regions:
//!
//! * `z < gppi - span`: a single shaft disk.
//! * `gppi - span <= z < gppi`: four disjoint protrusion disks at
//!   `(±d, ±d)` around the plane center, `d = 2 * radius`.
//! * `gppi <= z <= gppi + span`: the same four disks joined by a diagonal
//!   cross into one component.
//! * above that: air.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalrank::{write_truth_csv, TruthRecord};
use crate::seed::{derive_seed, rng_from};
use crate::volgrid::{save_annotated, Dims, GppAnnotation, Hu, Volume, Voxel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub gppi: usize,
    pub protrusion_radius_vox: f64,
    /// Number of four-disk planes before the GPPI; also the length of the
    /// merged region after it.
    pub protrusion_span: usize,
    pub shaft_radius_vox: f64,
    pub bone_hu: f64,
    pub air_hu: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: (96, 96, 192),
            gppi: 110,
            protrusion_radius_vox: 9.0,
            protrusion_span: 30,
            shaft_radius_vox: 26.0,
            bone_hu: 1200.0,
            air_hu: -1000.0,
            noise_sigma: 80.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Offset of each protrusion center from the plane center along x and y.
    pub fn protrusion_offset(&self) -> f64 {
        2.0 * self.protrusion_radius_vox
    }

    fn bridge_half_width(&self) -> f64 {
        (0.35 * self.protrusion_radius_vox).max(1.0)
    }

    /// HU threshold halfway between air and bone.
    pub fn midpoint_hu(&self) -> f64 {
        0.5 * (self.bone_hu + self.air_hu)
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.dims;
        let dims = Dims::new(nx, ny, nz)?;
        let bad = |msg: String| Err(Error::arg(format!("phantom spec: {msg}")));
        if !(self.protrusion_span < self.gppi && self.gppi < dims.nz) {
            return bad(format!(
                "need span {} < gppi {} < nz {}",
                self.protrusion_span, self.gppi, dims.nz
            ));
        }
        if self.protrusion_span == 0 {
            return bad("protrusion span must be at least one plane".into());
        }
        if !(self.bone_hu > self.air_hu) {
            return bad(format!("bone {} HU not above air {} HU", self.bone_hu, self.air_hu));
        }
        let r = self.protrusion_radius_vox;
        if !(r >= 2.0) {
            return bad(format!("protrusion radius {r} below 2 voxels"));
        }
        let half = (nx.min(ny) as f64 - 1.0) / 2.0;
        if self.protrusion_offset() + r + 1.0 > half {
            return bad(format!("protrusions of radius {r} do not fit a {nx}x{ny} plane"));
        }
        if !(self.shaft_radius_vox >= 1.0 && self.shaft_radius_vox + 1.0 <= half) {
            return bad(format!("shaft radius {} does not fit", self.shaft_radius_vox));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        for hu in [self.bone_hu, self.air_hu] {
            if !(i16::MIN as f64..=i16::MAX as f64).contains(&hu) {
                return bad(format!("{hu} HU does not fit i16"));
            }
        }
        Ok(())
    }

    /// Which region a plane belongs to.
    pub fn region(&self, z: usize) -> Region {
        let start = self.gppi - self.protrusion_span;
        if z < start {
            Region::Shaft
        } else if z < self.gppi {
            Region::Protrusions
        } else if z <= self.gppi + self.protrusion_span {
            Region::Merged
        } else {
            Region::Air
        }
    }

    fn is_bone(&self, region: Region, px: f64, py: f64) -> bool {
        let r = self.protrusion_radius_vox;
        let d = self.protrusion_offset();
        let in_disks = || {
            [(-d, -d), (-d, d), (d, -d), (d, d)]
                .iter()
                .any(|&(ox, oy)| (px - ox).powi(2) + (py - oy).powi(2) <= r * r)
        };
        match region {
            Region::Shaft => px * px + py * py <= self.shaft_radius_vox.powi(2),
            Region::Protrusions => in_disks(),
            Region::Merged => {
                let w = self.bridge_half_width() * std::f64::consts::SQRT_2;
                let on_cross = px.abs().max(py.abs()) <= d && ((px - py).abs() <= w || (px + py).abs() <= w);
                in_disks() || on_cross
            }
            Region::Air => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Shaft,
    Protrusions,
    Merged,
    Air,
}

pub fn generate_phantom(spec: &PhantomSpec, id: &str) -> Result<(Volume, GppAnnotation)> {
    spec.validate()?;
    let (nx, ny, nz) = spec.dims;
    let dims = Dims::new(nx, ny, nz)?;
    let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
    let mut rng = rng_from(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::arg(e.to_string()))?;
    let mut voxels = Vec::with_capacity(dims.voxel_count());
    for z in 0..nz {
        let region = spec.region(z);
        for y in 0..ny {
            let py = y as f64 - cy;
            for x in 0..nx {
                let base = if spec.is_bone(region, x as f64 - cx, py) {
                    spec.bone_hu
                } else {
                    spec.air_hu
                };
                let value = if spec.noise_sigma > 0.0 {
                    base + noise.sample(&mut rng)
                } else {
                    base
                };
                voxels.push(Hu::from_f64(value));
            }
        }
    }
    let volume = Volume::new(id, dims, voxels)?;
    let ann = GppAnnotation::new(id, spec.gppi, "phantom");
    Ok((volume, ann))
}

/// The three preclinical study cohorts used for stratified splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Study {
    A,
    B,
    C,
}

impl Study {
    pub fn round_robin(i: usize) -> Study {
        [Study::A, Study::B, Study::C][i % 3]
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Study::A => "A",
            Study::B => "B",
            Study::C => "C",
        };
        f.write_str(s)
    }
}

/// Symmetric jitter applied around the base spec.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhantomJitter {
    pub gppi: usize,
    pub protrusion_radius_vox: f64,
    pub shaft_radius_vox: f64,
}

#[derive(Debug, Clone)]
pub struct PhantomItem {
    pub volume: Volume,
    pub annotation: GppAnnotation,
    pub study: Study,
}

impl PhantomItem {
    pub fn truth(&self) -> TruthRecord {
        TruthRecord {
            volume_id: self.annotation.volume_id.clone(),
            gppi: self.annotation.gppi as i64,
            study: self.study.to_string(),
        }
    }
}

pub fn item_spec(base: &PhantomSpec, jitter: &PhantomJitter, master_seed: u64, i: usize) -> Result<PhantomSpec> {
    let mut rng = rng_from(derive_seed(master_seed, &["phantom-jitter", &i.to_string()]));
    let mut spec = base.clone();
    if jitter.gppi > 0 {
        let lo = base.gppi.saturating_sub(jitter.gppi);
        spec.gppi = rng.random_range(lo..=base.gppi + jitter.gppi);
    }
    if jitter.protrusion_radius_vox > 0.0 {
        let j = jitter.protrusion_radius_vox;
        spec.protrusion_radius_vox += rng.random_range(-j..=j);
    }
    if jitter.shaft_radius_vox > 0.0 {
        let j = jitter.shaft_radius_vox;
        spec.shaft_radius_vox += rng.random_range(-j..=j);
    }
    spec.seed = derive_seed(master_seed, &["phantom-noise", &i.to_string()]);
    spec.validate()?;
    Ok(spec)
}

pub fn phantom_id(master_seed: u64, i: usize) -> String {
    format!("ph{master_seed}-{i:04}")
}

pub fn generate_dataset(n: usize, base: &PhantomSpec, jitter: &PhantomJitter, master_seed: u64) -> Result<Vec<PhantomItem>> {
    if n == 0 {
        return Err(Error::arg("dataset size must be at least 1"));
    }
    (0..n)
        .map(|i| {
            let spec = item_spec(base, jitter, master_seed, i)?;
            let (volume, annotation) = generate_phantom(&spec, &phantom_id(master_seed, i))?;
            Ok(PhantomItem {
                volume,
                annotation,
                study: Study::round_robin(i),
            })
        })
        .collect()
}

/// Writes every item as an annotated GPV pair plus `truth.csv`. Returns the
/// written paths in order.
pub fn write_dataset(items: &[PhantomItem], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for item in items {
        let stem = dir.join(&item.annotation.volume_id);
        save_annotated(&item.volume, &item.annotation, &stem)?;
        let (json, raw) = crate::volgrid::gpv_paths(&stem);
        written.push(json);
        written.push(raw);
    }
    let truth: Vec<TruthRecord> = items.iter().map(PhantomItem::truth).collect();
    let truth_path = dir.join("truth.csv");
    write_truth_csv(&truth, &truth_path)?;
    written.push(truth_path);
    Ok(written)
}
