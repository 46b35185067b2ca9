//! Long-axis regression on sorted random sagittal planes, decoded coarse
//! to fine. One network serves both passes; an extra constant channel
//! tells it which pass it is looking at.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{prepare, tensor, LabeledRef};
use crate::detect::{coarse_to_fine_regress, Pass};
use crate::error::{Error, Result};
use crate::micronet::{
    train as fit, Example, ExampleSource, Head, InputSpec, LayerSpec, LossKind, LrSegment, MicroNet, MicroNetConfig,
    Schedule, Tensor,
};
use crate::prep::{axial_displace_augment, resize_grid, sample_sorted_indices, ClipRange, NoiseSpec, ResizeMode};
use crate::seed::{derive_seed, stream};
use crate::volgrid::{extract_plane, Axis, GppAnnotation, Plane2D, RealVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LongAxisSettings {
    pub clip: ClipRange,
    /// In-plane size the volume is reduced to before taking sagittal planes.
    pub size: usize,
    pub resize: ResizeMode,
    pub channels: usize,
    pub inner_frac: f64,
    /// Planes in both the interpolated full-length input and the crop.
    pub crop_len: usize,
    pub crop_jitter: usize,
    pub examples_per_volume: usize,
    /// Share of training examples taken from the interpolated volume.
    pub coarse_frac: f64,
    pub displace_prob: f64,
    pub displace_max: usize,
    /// Random sagittal draws averaged at inference.
    pub draws: usize,
    pub draw_seed: u64,
    pub layers: Vec<LayerSpec>,
    pub schedule: Schedule,
}

impl Default for LongAxisSettings {
    fn default() -> Self {
        LongAxisSettings {
            clip: ClipRange { lo: -1000.0, hi: 3000.0 },
            size: 24,
            resize: ResizeMode::Area,
            channels: 3,
            inner_frac: 0.5,
            crop_len: 64,
            crop_jitter: 24,
            examples_per_volume: 12,
            coarse_frac: 0.4,
            displace_prob: 0.3,
            displace_max: 20,
            draws: 4,
            draw_seed: 0,
            layers: vec![
                LayerSpec::Conv {
                    kernel: 3,
                    out_channels: 8,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv {
                    kernel: 3,
                    out_channels: 16,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv {
                    kernel: 3,
                    out_channels: 16,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 32 },
                LayerSpec::Relu,
            ],
            schedule: Schedule {
                epochs: 16,
                lr_segments: vec![
                    LrSegment { from_epoch: 0, lr: 2e-3 },
                    LrSegment { from_epoch: 11, lr: 7e-4 },
                ],
                batch_size: 8,
                seed: 0,
                weight_decay: 0.0,
            },
        }
    }
}

impl LongAxisSettings {
    fn config(&self) -> MicroNetConfig {
        MicroNetConfig {
            input: InputSpec {
                height: self.crop_len,
                width: self.size,
                channels: self.channels + 1,
            },
            layers: self.layers.clone(),
            head: Head::ScalarRegressor { squash: true },
            param_budget: None,
        }
    }

    fn check(&self, nz: usize) -> Result<()> {
        if self.crop_len == 0 || self.crop_len >= nz {
            return Err(Error::arg(format!("crop length {} must be below {nz} planes", self.crop_len)));
        }
        if self.draws == 0 {
            return Err(Error::arg("at least one sagittal draw is needed"));
        }
        Ok(())
    }
}

fn sagittal_planes(v: &RealVolume, xs: &[usize]) -> Result<Vec<Plane2D>> {
    xs.iter().map(|&x| extract_plane(v, Axis::Sagittal, x)).collect()
}

/// Full-length planes resampled to `crop_len` rows, indicator 0.
fn coarse_input(s: &LongAxisSettings, planes: &[Plane2D]) -> Result<Tensor> {
    let mut data = Vec::with_capacity((planes.len() + 1) * s.crop_len * s.size);
    for p in planes {
        data.extend(resize_grid(p.width, p.height, &p.values, (p.width, s.crop_len), ResizeMode::Linear)?);
    }
    data.extend(std::iter::repeat_n(0.0, s.crop_len * s.size));
    tensor(planes.len() + 1, s.crop_len, s.size, data)
}

/// Native rows `[start, start + crop_len)`, indicator 1.
fn fine_input(s: &LongAxisSettings, planes: &[Plane2D], start: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity((planes.len() + 1) * s.crop_len * s.size);
    for p in planes {
        data.extend_from_slice(&p.values[start * p.width..(start + s.crop_len) * p.width]);
    }
    data.extend(std::iter::repeat_n(1.0, s.crop_len * s.size));
    tensor(planes.len() + 1, s.crop_len, s.size, data)
}

struct LongSource<'a> {
    s: &'a LongAxisSettings,
    vols: Vec<(RealVolume, usize)>,
}

impl ExampleSource for LongSource<'_> {
    fn len(&self) -> usize {
        self.vols.len() * self.s.examples_per_volume
    }

    fn example(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Example> {
        let s = self.s;
        let (v, gppi) = &self.vols[index / s.examples_per_volume];
        let d = v.dims();
        let xs = sample_sorted_indices(d.nx, s.channels, s.inner_frac, rng)?;
        if rng.random_bool(s.coarse_frac) {
            let mut gppi = *gppi;
            let shifted;
            let mut vol = v;
            if s.displace_max > 0 && rng.random_bool(s.displace_prob) {
                let m = s.displace_max as i64;
                let lo = (-m).max(-(gppi as i64));
                let hi = m.min(d.nz as i64 - 1 - gppi as i64);
                let shift = rng.random_range(lo..=hi);
                let ann = GppAnnotation::new(v.id(), gppi, "train");
                let background = NoiseSpec { mean: 0.0, sigma: 0.02 };
                let (moved, ann) = axial_displace_augment(v, &ann, shift, background, rng)?;
                shifted = moved;
                vol = &shifted;
                gppi = ann.gppi;
            }
            let planes = sagittal_planes(vol, &xs)?;
            Ok(Example::new(coarse_input(s, &planes)?, vec![gppi as f64 / d.nz as f64]))
        } else {
            let j = s.crop_jitter as i64;
            let wanted = *gppi as i64 - (s.crop_len / 2) as i64 + rng.random_range(-j..=j);
            let start = wanted.clamp(0, (d.nz - s.crop_len) as i64) as usize;
            let frac = (*gppi as f64 - start as f64) / s.crop_len as f64;
            let planes = sagittal_planes(v, &xs)?;
            Ok(Example::new(fine_input(s, &planes, start)?, vec![frac.clamp(0.0, 1.0)]))
        }
    }
}

pub(super) fn train(s: &LongAxisSettings, data: &[LabeledRef<'_>], seed: u64) -> Result<(Vec<MicroNet>, Vec<Vec<f64>>)> {
    let mut vols = Vec::with_capacity(data.len());
    for item in data {
        s.check(item.volume.dims().nz)?;
        vols.push((prepare(item.volume, s.clip, s.size, s.resize)?, item.gppi));
    }
    let mut net = MicroNet::new(s.config(), derive_seed(seed, &["long-axis", "init"]))?;
    let schedule = Schedule {
        seed: derive_seed(seed, &["long-axis", "schedule"]),
        ..s.schedule.clone()
    };
    let report = fit(&mut net, &LongSource { s, vols }, LossKind::Mse, &schedule)?;
    Ok((vec![net], vec![report.history]))
}

pub(super) fn detect(s: &LongAxisSettings, net: &MicroNet, v: &Volume) -> Result<(i64, Vec<(usize, f64)>, bool)> {
    let prepared = prepare(v, s.clip, s.size, s.resize)?;
    let d = prepared.dims();
    s.check(d.nz)?;
    let draws = (0..s.draws)
        .map(|i| {
            let mut rng = stream(s.draw_seed, &[v.id(), "draw", &i.to_string()]);
            let xs = sample_sorted_indices(d.nx, s.channels, s.inner_frac, &mut rng)?;
            sagittal_planes(&prepared, &xs)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut trace = Vec::new();
    let out = coarse_to_fine_regress(d.nz, s.crop_len, |pass| {
        let mut total = 0.0;
        for planes in &draws {
            let x = match pass {
                Pass::Coarse => coarse_input(s, planes)?,
                Pass::Fine { crop_start, .. } => fine_input(s, planes, crop_start)?,
            };
            total += net.predict(&x)?[0];
        }
        let f = total / draws.len() as f64;
        trace.push((trace.len(), f));
        Ok(f)
    })?;
    Ok((out.gppi, trace, out.clamped))
}
