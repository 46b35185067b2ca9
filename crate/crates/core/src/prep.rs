//! Intensity windowing, spatial resampling, augmentation and 2.5D input
//! construction.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{extract_plane, Axis, Dims, GppAnnotation, Hu, Plane2D, RealVolume, Volume, Voxel};

/// Inclusive HU window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub lo: f64,
    pub hi: f64,
}

impl ClipRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let r = ClipRange { lo, hi };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::InvalidRange {
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(())
    }

    #[inline]
    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    /// Affine map of the clamped value onto [0, 1].
    #[inline]
    pub fn unit(&self, x: f64) -> f64 {
        (self.clamp(x) - self.lo) / (self.hi - self.lo)
    }
}

pub fn clip_hu(v: &Volume, r: ClipRange) -> Result<Volume> {
    r.validate()?;
    Ok(v.map(|h| Hu::from_f64(r.clamp(h as f64))))
}

pub fn normalize_unit<T: Voxel>(v: &Volume<T>, r: ClipRange) -> Result<RealVolume> {
    r.validate()?;
    Ok(v.map(|h| r.unit(h.into()) as f32))
}

/// Center crop or symmetric pad of every axial plane to `tx` by `ty`.
/// Odd pad differences put the extra voxel on the high side.
pub fn crop_or_pad_xy<T: Copy>(v: &Volume<T>, target: (usize, usize), fill: T) -> Result<Volume<T>> {
    let (tx, ty) = target;
    let d = v.dims();
    let out_dims = Dims::new(tx, ty, d.nz)?;
    let off_x = center_offset(d.nx, tx);
    let off_y = center_offset(d.ny, ty);
    let mut out = Vec::with_capacity(out_dims.voxel_count());
    for z in 0..d.nz {
        for y in 0..ty {
            let sy = y as i64 + off_y;
            for x in 0..tx {
                let sx = x as i64 + off_x;
                if sy >= 0 && sx >= 0 && (sy as usize) < d.ny && (sx as usize) < d.nx {
                    out.push(v.get(sx as usize, sy as usize, z));
                } else {
                    out.push(fill);
                }
            }
        }
    }
    v.derive(out_dims, out)
}

/// Signed position of the target origin inside the source.
fn center_offset(src: usize, target: usize) -> i64 {
    if src >= target {
        ((src - target) / 2) as i64
    } else {
        -(((target - src) / 2) as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    /// Bilinear with corner-aligned sampling: output corners coincide with
    /// input corners.
    Linear,
    /// Mean over each integer-sized source block.
    Area,
}

impl std::str::FromStr for ResizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ResizeMode::Linear),
            "area" => Ok(ResizeMode::Area),
            other => Err(Error::arg(format!("unknown resize mode '{other}'"))),
        }
    }
}

/// Resizes a row-major `width` by `height` grid.
pub fn resize_grid(
    width: usize,
    height: usize,
    values: &[f64],
    target: (usize, usize),
    mode: ResizeMode,
) -> Result<Vec<f64>> {
    let (tw, th) = target;
    if tw == 0 || th == 0 {
        return Err(Error::arg(format!("resize target {tw}x{th}")));
    }
    if values.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {width}x{height} grid",
            values.len()
        )));
    }
    match mode {
        ResizeMode::Area => {
            if !width.is_multiple_of(tw) || !height.is_multiple_of(th) {
                return Err(Error::arg(format!(
                    "area resize needs integer factors, got {width}x{height} -> {tw}x{th}"
                )));
            }
            let (sx, sy) = (width / tw, height / th);
            let inv = 1.0 / (sx * sy) as f64;
            let mut out = vec![0.0; tw * th];
            for (y, row) in out.chunks_exact_mut(tw).enumerate() {
                for (x, o) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for yy in y * sy..(y + 1) * sy {
                        let base = yy * width + x * sx;
                        acc += values[base..base + sx].iter().sum::<f64>();
                    }
                    *o = acc * inv;
                }
            }
            Ok(out)
        }
        ResizeMode::Linear => {
            let xs = linear_taps(width, tw);
            let ys = linear_taps(height, th);
            let mut out = Vec::with_capacity(tw * th);
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = values[y0 * width + x0] * (1.0 - fx) + values[y0 * width + x1] * fx;
                    let bot = values[y1 * width + x0] * (1.0 - fx) + values[y1 * width + x1] * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
            Ok(out)
        }
    }
}

fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 {
                (src - 1) as f64 / 2.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub fn resize_plane(p: &Plane2D, target: (usize, usize), mode: ResizeMode) -> Result<Plane2D> {
    let values = resize_grid(p.width, p.height, &p.values, target, mode)?;
    Plane2D::new(target.0, target.1, values, p.axis, p.index)
}

/// Resizes every axial plane; z is untouched. In-plane spacing scales so
/// the physical extent is kept.
pub fn resize_volume_xy<T: Voxel>(v: &Volume<T>, target: (usize, usize), mode: ResizeMode) -> Result<Volume<T>> {
    let d = v.dims();
    let out_dims = Dims::new(target.0, target.1, d.nz)?;
    let mut out = Vec::with_capacity(out_dims.voxel_count());
    let mut scratch = Vec::with_capacity(d.plane_len());
    for z in 0..d.nz {
        scratch.clear();
        scratch.extend(v.axial(z).iter().map(|&h| h.into()));
        let plane = resize_grid(d.nx, d.ny, &scratch, target, mode)?;
        out.extend(plane.into_iter().map(T::from_f64));
    }
    let [sx, sy, sz] = v.spacing_um();
    let spacing = [
        sx * d.nx as f64 / target.0 as f64,
        sy * d.ny as f64 / target.1 as f64,
        sz,
    ];
    Volume::with_spacing(v.id(), out_dims, spacing, out)
}

/// First and last axial planes whose fraction of voxels inside `bone_range`
/// reaches `frac_threshold`.
pub fn bone_extent_zrange<T: Voxel>(v: &Volume<T>, bone_range: ClipRange, frac_threshold: f64) -> Result<(usize, usize)> {
    bone_range.validate()?;
    if !(frac_threshold > 0.0 && frac_threshold < 1.0) {
        return Err(Error::arg(format!("fraction threshold {frac_threshold} outside (0, 1)")));
    }
    let d = v.dims();
    let area = d.plane_len() as f64;
    let qualifying: Vec<usize> = (0..d.nz)
        .filter(|&z| {
            let inside = v.axial(z).iter().filter(|&&h| bone_range.contains(h.into())).count();
            inside as f64 / area >= frac_threshold
        })
        .collect();
    match (qualifying.first(), qualifying.last()) {
        (Some(&a), Some(&b)) => Ok((a, b)),
        _ => Err(Error::NotFound(format!(
            "no plane of '{}' has bone on {:.1}% of its area",
            v.id(),
            frac_threshold * 100.0
        ))),
    }
}

/// Gaussian background used to fill planes vacated by displacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mean: f64,
    pub sigma: f64,
}

/// Shifts all axial planes by `shift` along z, fills vacated planes with
/// background noise and moves the label with the content.
pub fn axial_displace_augment<T: Voxel, R: Rng + ?Sized>(
    v: &Volume<T>,
    ann: &GppAnnotation,
    shift: i64,
    background: NoiseSpec,
    rng: &mut R,
) -> Result<(Volume<T>, GppAnnotation)> {
    let d = v.dims();
    if shift.unsigned_abs() as usize >= d.nz {
        return Err(Error::arg(format!("shift {shift} not below nz {}", d.nz)));
    }
    let gppi = ann.gppi as i64 + shift;
    if gppi < 0 || gppi >= d.nz as i64 {
        return Err(Error::IndexOutOfRange {
            axis: "axial",
            index: gppi,
            extent: d.nz,
        });
    }
    let noise = Normal::new(background.mean, background.sigma.max(0.0))
        .map_err(|e| Error::arg(format!("background noise: {e}")))?;
    let n = d.plane_len();
    let mut out = Vec::with_capacity(d.voxel_count());
    for z in 0..d.nz as i64 {
        let src = z - shift;
        if src >= 0 && src < d.nz as i64 {
            out.extend_from_slice(v.axial(src as usize));
        } else {
            out.extend((0..n).map(|_| T::from_f64(noise.sample(rng))));
        }
    }
    let ann = GppAnnotation::new(ann.volume_id.clone(), gppi as usize, ann.source.clone());
    Ok((v.derive(d, out)?, ann))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeomOp {
    /// Mirror columns.
    FlipH,
    /// Mirror rows.
    FlipV,
    /// Quarter turn counter-clockwise.
    Rot90,
    GaussNoise(f64),
}

/// Applies `op` to `channels` planes of `width` by `height` stored
/// back-to-back. Returns the new (width, height, data).
pub fn augment_channels<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    data: &[f64],
    op: GeomOp,
    rng: &mut R,
) -> Result<(usize, usize, Vec<f64>)> {
    let plane = width * height;
    if plane == 0 || !data.len().is_multiple_of(plane) {
        return Err(Error::ShapeMismatch(format!(
            "{} values are not whole {width}x{height} planes",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(data.len());
    match op {
        GeomOp::FlipH => {
            for row in data.chunks_exact(width) {
                out.extend(row.iter().rev());
            }
        }
        GeomOp::FlipV => {
            for ch in data.chunks_exact(plane) {
                for row in ch.chunks_exact(width).rev() {
                    out.extend_from_slice(row);
                }
            }
        }
        GeomOp::Rot90 => {
            if width != height {
                return Err(Error::ShapeMismatch(format!("rot90 needs a square plane, got {width}x{height}")));
            }
            let n = width;
            for ch in data.chunks_exact(plane) {
                for y in 0..n {
                    for x in 0..n {
                        out.push(ch[x * n + (n - 1 - y)]);
                    }
                }
            }
        }
        GeomOp::GaussNoise(sigma) => {
            if sigma == 0.0 {
                out.extend_from_slice(data);
            } else {
                let normal = Normal::new(0.0, sigma).map_err(|e| Error::arg(format!("noise sigma: {e}")))?;
                out.extend(data.iter().map(|&x| x + normal.sample(rng)));
            }
        }
    }
    Ok((width, height, out))
}

/// In-plane augmentation; the GPPI label is unaffected by all of these.
pub trait GeometricAugment: Sized {
    fn geometric_augment<R: Rng + ?Sized>(&self, op: GeomOp, rng: &mut R) -> Result<Self>;
}

impl GeometricAugment for Plane2D {
    fn geometric_augment<R: Rng + ?Sized>(&self, op: GeomOp, rng: &mut R) -> Result<Self> {
        let (w, h, values) = augment_channels(self.width, self.height, &self.values, op, rng)?;
        Plane2D::new(w, h, values, self.axis, self.index)
    }
}

/// Where a stack channel came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ChannelSource {
    Plane { axis: Axis, index: usize },
    /// Elementwise mean of a sagittal and a coronal plane.
    Blend { sagittal: usize, coronal: usize },
}

/// Equal-sized planes stacked along the channel dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    pub width: usize,
    pub height: usize,
    /// `channels * height * width` values, channel-major.
    pub data: Vec<f64>,
    pub sources: Vec<ChannelSource>,
}

impl ChannelStack {
    pub fn channel_count(&self) -> usize {
        self.sources.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    fn from_planes(planes: &[Plane2D], sources: Vec<ChannelSource>) -> Result<Self> {
        let first = planes.first().ok_or_else(|| Error::arg("empty channel stack"))?;
        let (width, height) = (first.width, first.height);
        let mut data = Vec::with_capacity(planes.len() * width * height);
        for p in planes {
            if (p.width, p.height) != (width, height) {
                return Err(Error::ShapeMismatch(format!(
                    "channel {}x{} differs from {width}x{height}",
                    p.width, p.height
                )));
            }
            data.extend_from_slice(&p.values);
        }
        Ok(ChannelStack {
            width,
            height,
            data,
            sources,
        })
    }
}

impl GeometricAugment for ChannelStack {
    fn geometric_augment<R: Rng + ?Sized>(&self, op: GeomOp, rng: &mut R) -> Result<Self> {
        let (width, height, data) = augment_channels(self.width, self.height, &self.data, op, rng)?;
        Ok(ChannelStack {
            width,
            height,
            data,
            sources: self.sources.clone(),
        })
    }
}

/// How 2.5D stacks are assembled from a volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackScheme {
    /// `channels` sorted sagittal planes drawn without replacement from the
    /// central `inner_frac` of the x extent.
    MhSortedRandom { channels: usize, inner_frac: f64 },
    /// One `[sagittal, coronal, blend]` stack per pair of offsets from the
    /// volume center.
    EkViews { offsets: Vec<i64> },
}

impl StackScheme {
    pub fn mh_default() -> Self {
        StackScheme::MhSortedRandom {
            channels: 9,
            inner_frac: 0.5,
        }
    }

    pub fn ek_default() -> Self {
        StackScheme::EkViews {
            offsets: vec![-15, -10, -5, 0, 5, 10, 15],
        }
    }
}

/// A stack with its fractional label `gppi / nz`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledStack {
    pub stack: ChannelStack,
    pub label: Option<f64>,
}

/// Central window `[start, end)` covering `inner_frac` of an extent.
pub fn inner_window(extent: usize, inner_frac: f64) -> (usize, usize) {
    let len = ((extent as f64 * inner_frac).round() as usize).clamp(1, extent);
    let start = (extent - len) / 2;
    (start, start + len)
}

/// Sorted distinct sagittal indices for the MH construction.
pub fn sample_sorted_indices<R: Rng + ?Sized>(
    extent: usize,
    channels: usize,
    inner_frac: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if channels == 0 || !(inner_frac > 0.0 && inner_frac <= 1.0) {
        return Err(Error::arg(format!(
            "channels {channels} / inner fraction {inner_frac} out of range"
        )));
    }
    let (start, end) = inner_window(extent, inner_frac);
    if channels > end - start {
        return Err(Error::arg(format!(
            "{channels} channels requested but only {} planes available",
            end - start
        )));
    }
    let mut picked: Vec<usize> = index::sample(rng, end - start, channels)
        .into_iter()
        .map(|i| start + i)
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

pub fn build_channel_stack<T: Voxel, R: Rng + ?Sized>(
    v: &Volume<T>,
    gppi: Option<usize>,
    scheme: &StackScheme,
    rng: &mut R,
) -> Result<Vec<LabeledStack>> {
    let d = v.dims();
    let label = gppi.map(|g| g as f64 / d.nz as f64);
    match scheme {
        StackScheme::MhSortedRandom { channels, inner_frac } => {
            let idx = sample_sorted_indices(d.nx, *channels, *inner_frac, rng)?;
            let planes = idx
                .iter()
                .map(|&x| extract_plane(v, Axis::Sagittal, x))
                .collect::<Result<Vec<_>>>()?;
            let sources = idx
                .iter()
                .map(|&index| ChannelSource::Plane {
                    axis: Axis::Sagittal,
                    index,
                })
                .collect();
            Ok(vec![LabeledStack {
                stack: ChannelStack::from_planes(&planes, sources)?,
                label,
            }])
        }
        StackScheme::EkViews { offsets } => {
            if d.nx != d.ny {
                return Err(Error::ShapeMismatch(format!(
                    "sagittal and coronal views need nx == ny, got {d}"
                )));
            }
            let resolve = |center: usize, off: i64, extent: usize, axis: &'static str| -> Result<usize> {
                let i = center as i64 + off;
                if i < 0 || i >= extent as i64 {
                    return Err(Error::IndexOutOfRange { axis, index: i, extent });
                }
                Ok(i as usize)
            };
            let mut out = Vec::with_capacity(offsets.len() * offsets.len());
            for &os in offsets {
                let xs = resolve(d.nx / 2, os, d.nx, "sagittal")?;
                let sag = extract_plane(v, Axis::Sagittal, xs)?;
                for &oc in offsets {
                    let yc = resolve(d.ny / 2, oc, d.ny, "coronal")?;
                    let cor = extract_plane(v, Axis::Coronal, yc)?;
                    let blend_values = sag.values.iter().zip(&cor.values).map(|(a, b)| 0.5 * (a + b)).collect();
                    let blend = Plane2D::new(sag.width, sag.height, blend_values, Axis::Sagittal, xs)?;
                    let sources = vec![
                        ChannelSource::Plane {
                            axis: Axis::Sagittal,
                            index: xs,
                        },
                        ChannelSource::Plane {
                            axis: Axis::Coronal,
                            index: yc,
                        },
                        ChannelSource::Blend {
                            sagittal: xs,
                            coronal: yc,
                        },
                    ];
                    out.push(LabeledStack {
                        stack: ChannelStack::from_planes(&[sag.clone(), cor, blend], sources)?,
                        label,
                    });
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn vol(dims: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> i16) -> Volume {
        let d = Dims::new(dims.0, dims.1, dims.2).unwrap();
        let mut v = Vec::new();
        for z in 0..d.nz {
            for y in 0..d.ny {
                for x in 0..d.nx {
                    v.push(f(x, y, z));
                }
            }
        }
        Volume::new("t", d, v).unwrap()
    }

    fn random_volume(seed: u64, dims: (usize, usize, usize)) -> Volume {
        let mut rng = rng_from(seed);
        vol(dims, |_, _, _| rng_sample(&mut rng))
    }

    fn rng_sample(rng: &mut impl Rng) -> i16 {
        rng.random_range(-3000..5000)
    }

    #[test]
    fn clip_examples() {
        let r = ClipRange::new(-1000.0, 4000.0).unwrap();
        let v = Volume::new("c", Dims::new(4, 1, 1).unwrap(), vec![-2000, 0, 5000, 2000]).unwrap();
        assert_eq!(clip_hu(&v, r).unwrap().voxels(), &[-1000, 0, 4000, 2000]);
        assert!(ClipRange::new(5.0, 5.0).is_err());
        let bad = ClipRange { lo: 3.0, hi: 1.0 };
        assert!(clip_hu(&v, bad).is_err());
        assert!(normalize_unit(&v, bad).is_err());
    }

    #[test]
    fn clip_bounds_and_idempotence() {
        let v = random_volume(1, (8, 8, 8));
        let r = ClipRange::new(500.0, 2000.0).unwrap();
        let c = clip_hu(&v, r).unwrap();
        assert!(c.voxels().iter().all(|&h| (500..=2000).contains(&h)));
        assert_eq!(clip_hu(&c, r).unwrap(), c);
    }

    #[test]
    fn normalize_endpoints_and_two_step_oracle() {
        let r = ClipRange::new(-1000.0, 3000.0).unwrap();
        let v = Volume::new("n", Dims::new(3, 1, 1).unwrap(), vec![-1000, 3000, 1000]).unwrap();
        let n = normalize_unit(&v, r).unwrap();
        assert_eq!(n.voxels(), &[0.0, 1.0, 0.5]);

        let v = random_volume(2, (6, 5, 4));
        let n = normalize_unit(&v, r).unwrap();
        let clipped = clip_hu(&v, r).unwrap();
        for (a, &c) in n.voxels().iter().zip(clipped.voxels()) {
            let expected = (c as f64 + 1000.0) / 4000.0;
            assert!((*a as f64 - expected).abs() < 1e-6);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn crop_keeps_center_rows() {
        let v = vol((6, 6, 2), |x, y, z| (z * 100 + y * 10 + x) as i16);
        let c = crop_or_pad_xy(&v, (4, 4), -1000).unwrap();
        for z in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(c.get(x, y, z), v.get(x + 1, y + 1, z));
                }
            }
        }
        assert_eq!(crop_or_pad_xy(&v, (6, 6), 0).unwrap(), v);
    }

    #[test]
    fn pad_fills_border_ring() {
        let v = vol((2, 2, 1), |_, _, _| 7);
        let p = crop_or_pad_xy(&v, (4, 4), -1000).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let inner = (1..3).contains(&x) && (1..3).contains(&y);
                assert_eq!(p.get(x, y, 0), if inner { 7 } else { -1000 });
            }
        }
        // odd difference: extra voxel on the high side
        let p = crop_or_pad_xy(&v, (3, 3), -1).unwrap();
        assert_eq!(p.get(0, 0, 0), 7);
        assert_eq!(p.get(2, 2, 0), -1);
    }

    #[test]
    fn crop_then_pad_restores_center() {
        let v = random_volume(4, (9, 7, 3));
        let c = crop_or_pad_xy(&v, (4, 3), 0).unwrap();
        let back = crop_or_pad_xy(&c, (9, 7), 0).unwrap();
        let (ox, oy) = ((9 - 4) / 2, (7 - 3) / 2);
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(back.get(x + ox, y + oy, z), v.get(x + ox, y + oy, z));
                }
            }
        }
    }

    #[test]
    fn resize_constant_and_bilinear_center() {
        let c = vec![3.5; 30];
        for mode in [ResizeMode::Linear, ResizeMode::Area] {
            let out = resize_grid(6, 5, &c, (3, 5), mode).unwrap();
            assert!(out.iter().all(|&x| (x - 3.5).abs() < 1e-12));
        }
        let lin = resize_grid(6, 5, &c, (11, 7), ResizeMode::Linear).unwrap();
        assert!(lin.iter().all(|&x| (x - 3.5).abs() < 1e-12));
        let out = resize_grid(2, 2, &[0.0, 2.0, 2.0, 4.0], (3, 3), ResizeMode::Linear).unwrap();
        assert_eq!(out[4], 2.0);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[8], 4.0);
    }

    #[test]
    fn area_resize_is_block_mean() {
        let mut rng = rng_from(9);
        let src: Vec<f64> = (0..480 * 480).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = resize_grid(480, 480, &src, (240, 240), ResizeMode::Area).unwrap();
        for _ in 0..200 {
            let (x, y) = (rng.random_range(0..240), rng.random_range(0..240));
            let block = src[(2 * y) * 480 + 2 * x]
                + src[(2 * y) * 480 + 2 * x + 1]
                + src[(2 * y + 1) * 480 + 2 * x]
                + src[(2 * y + 1) * 480 + 2 * x + 1];
            assert!((out[y * 240 + x] - block / 4.0).abs() < 1e-12);
        }
        let mean_in = src.iter().sum::<f64>() / src.len() as f64;
        let mean_out = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean_in - mean_out).abs() < 1e-12);
        assert!(resize_grid(480, 480, &src, (250, 240), ResizeMode::Area).is_err());
    }

    #[test]
    fn bone_extent_counts_fraction() {
        // 10% of each plane in 10..=50 is bone
        let v = vol((10, 10, 64), |x, y, z| {
            if (10..=50).contains(&z) && y == 0 {
                let _ = x;
                1200
            } else {
                -1000
            }
        });
        let r = ClipRange::new(300.0, 3000.0).unwrap();
        assert_eq!(bone_extent_zrange(&v, r, 0.03).unwrap(), (10, 50));
        // 0.1 passes a 0.1 threshold, not 0.11
        assert_eq!(bone_extent_zrange(&v, r, 0.1).unwrap(), (10, 50));
        assert!(matches!(bone_extent_zrange(&v, r, 0.11), Err(Error::NotFound(_))));
        let air = vol((4, 4, 4), |_, _, _| -1000);
        assert!(matches!(bone_extent_zrange(&air, r, 0.03), Err(Error::NotFound(_))));
        assert!(bone_extent_zrange(&air, r, 1.0).is_err());
    }

    #[test]
    fn displacement_moves_label_and_content() {
        let v = random_volume(5, (5, 4, 40));
        let ann = GppAnnotation::new("t", 17, "x");
        let bg = NoiseSpec {
            mean: -1000.0,
            sigma: 20.0,
        };
        let (same, a0) = axial_displace_augment(&v, &ann, 0, bg, &mut rng_from(1)).unwrap();
        assert_eq!(same, v);
        assert_eq!(a0.gppi, 17);
        let (moved, a) = axial_displace_augment(&v, &ann, 20, bg, &mut rng_from(1)).unwrap();
        assert_eq!(a.gppi, 37);
        // histogram of the retained region equals that of its source
        let mut kept: Vec<i16> = (20..40).flat_map(|z| moved.axial(z).to_vec()).collect();
        let mut src: Vec<i16> = (0..20).flat_map(|z| v.axial(z).to_vec()).collect();
        kept.sort_unstable();
        src.sort_unstable();
        assert_eq!(kept, src);
        assert!(axial_displace_augment(&v, &ann, 23, bg, &mut rng_from(1)).is_err());
        assert!(axial_displace_augment(&v, &ann, -18, bg, &mut rng_from(1)).is_err());
        assert!(axial_displace_augment(&v, &ann, 40, bg, &mut rng_from(1)).is_err());
    }

    #[test]
    fn displacement_commutes_with_clip() {
        let v = random_volume(6, (4, 4, 30));
        let ann = GppAnnotation::new("t", 10, "x");
        let bg = NoiseSpec {
            mean: 0.0,
            sigma: 100.0,
        };
        let r = ClipRange::new(0.0, 1900.0).unwrap();
        let (a, _) = axial_displace_augment(&clip_hu(&v, r).unwrap(), &ann, -7, bg, &mut rng_from(2)).unwrap();
        let (b, _) = axial_displace_augment(&v, &ann, -7, bg, &mut rng_from(2)).unwrap();
        let b = clip_hu(&b, r).unwrap();
        for z in 0..23 {
            assert_eq!(a.axial(z), b.axial(z));
        }
    }

    #[test]
    fn geometric_group_laws() {
        let mut rng = rng_from(11);
        let values: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let p = Plane2D::new(5, 5, values, Axis::Axial, 3).unwrap();
        let twice = p
            .geometric_augment(GeomOp::FlipH, &mut rng)
            .unwrap()
            .geometric_augment(GeomOp::FlipH, &mut rng)
            .unwrap();
        assert_eq!(twice, p);
        let mut r = p.clone();
        for _ in 0..4 {
            r = r.geometric_augment(GeomOp::Rot90, &mut rng).unwrap();
        }
        assert_eq!(r, p);
        let once = p.geometric_augment(GeomOp::Rot90, &mut rng).unwrap();
        assert_ne!(once, p);
        assert_eq!(p.geometric_augment(GeomOp::GaussNoise(0.0), &mut rng).unwrap(), p);
        let flipped = p.geometric_augment(GeomOp::FlipV, &mut rng).unwrap();
        assert_eq!(flipped.at(0, 0), p.at(4, 0));
        let rect = Plane2D::new(2, 3, vec![0.0; 6], Axis::Axial, 0).unwrap();
        assert!(rect.geometric_augment(GeomOp::Rot90, &mut rng).is_err());
    }

    #[test]
    fn ek_views_give_49_blended_stacks() {
        let v = random_volume(12, (40, 40, 20));
        let stacks = build_channel_stack(&v, Some(10), &StackScheme::ek_default(), &mut rng_from(0)).unwrap();
        assert_eq!(stacks.len(), 49);
        for s in &stacks {
            assert_eq!(s.stack.channel_count(), 3);
            assert_eq!(s.label, Some(0.5));
            for i in 0..s.stack.width * s.stack.height {
                let blend = 0.5 * (s.stack.channel(0)[i] + s.stack.channel(1)[i]);
                assert_eq!(s.stack.channel(2)[i], blend);
            }
        }
        let small = random_volume(12, (20, 20, 8));
        assert!(build_channel_stack(&small, None, &StackScheme::ek_default(), &mut rng_from(0)).is_err());
    }

    #[test]
    fn mh_stack_is_sorted_inside_window() {
        let v = random_volume(13, (40, 30, 16));
        let mut rng = rng_from(5);
        for _ in 0..20 {
            let stacks = build_channel_stack(&v, Some(4), &StackScheme::mh_default(), &mut rng).unwrap();
            assert_eq!(stacks.len(), 1);
            let idx: Vec<usize> = stacks[0]
                .stack
                .sources
                .iter()
                .map(|s| match s {
                    ChannelSource::Plane { index, .. } => *index,
                    _ => unreachable!(),
                })
                .collect();
            assert_eq!(idx.len(), 9);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(idx.iter().all(|&i| (10..30).contains(&i)));
            assert_eq!(stacks[0].label, Some(0.25));
        }
        let too_many = StackScheme::MhSortedRandom {
            channels: 21,
            inner_frac: 0.5,
        };
        assert!(build_channel_stack(&v, None, &too_many, &mut rng).is_err());
    }
}
