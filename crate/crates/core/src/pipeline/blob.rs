//! Four-blob rough estimate followed by stack regression.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{axial_stack, near, prepare, random_geometry, tensor, LabeledRef};
use crate::detect::{blob_rough_then_refine, count_blobs};
use crate::error::{Error, Result};
use crate::micronet::{
    train as fit, Example, ExampleSource, Head, InputSpec, LayerSpec, LossKind, LrSegment, MicroNet, MicroNetConfig,
    Schedule,
};
use crate::prep::{ClipRange, ResizeMode};
use crate::seed::derive_seed;
use crate::volgrid::{extract_plane, Axis, RealVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobSettings {
    pub clip: ClipRange,
    pub size: usize,
    pub resize: ResizeMode,
    pub half_span: usize,
    /// HU level separating bone from background when counting blobs for
    /// the classifier labels.
    pub blob_threshold_hu: f64,
    pub planes_per_volume: usize,
    pub stacks_per_volume: usize,
    /// Training offset of the stack center from the merge plane, standing
    /// in for rough-estimate error.
    pub rough_jitter: usize,
    pub augment: bool,
    pub classifier_layers: Vec<LayerSpec>,
    pub regressor_layers: Vec<LayerSpec>,
    pub classifier_schedule: Schedule,
    pub regressor_schedule: Schedule,
}

fn conv(out_channels: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        kernel: 3,
        out_channels,
        stride,
    }
}

impl Default for BlobSettings {
    fn default() -> Self {
        let pool = LayerSpec::MaxPool { size: 2 };
        BlobSettings {
            clip: ClipRange { lo: -1000.0, hi: 3000.0 },
            size: 32,
            resize: ResizeMode::Linear,
            half_span: 25,
            blob_threshold_hu: 100.0,
            planes_per_volume: 32,
            stacks_per_volume: 8,
            rough_jitter: 8,
            augment: true,
            classifier_layers: vec![
                conv(4, 1),
                LayerSpec::Relu,
                pool,
                conv(8, 1),
                LayerSpec::Relu,
                pool,
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 16 },
                LayerSpec::Relu,
            ],
            regressor_layers: vec![
                conv(8, 2),
                LayerSpec::Relu,
                pool,
                conv(16, 1),
                LayerSpec::Relu,
                pool,
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 32 },
                LayerSpec::Relu,
            ],
            classifier_schedule: Schedule {
                epochs: 6,
                lr_segments: vec![
                    LrSegment { from_epoch: 0, lr: 2e-3 },
                    LrSegment { from_epoch: 4, lr: 1e-3 },
                ],
                batch_size: 16,
                seed: 0,
                weight_decay: 1e-4,
            },
            regressor_schedule: Schedule {
                epochs: 10,
                lr_segments: vec![
                    LrSegment { from_epoch: 0, lr: 2e-3 },
                    LrSegment { from_epoch: 7, lr: 1e-3 },
                ],
                batch_size: 8,
                seed: 0,
                weight_decay: 1e-4,
            },
        }
    }
}

impl BlobSettings {
    fn span(&self) -> usize {
        2 * self.half_span + 1
    }

    fn classifier_config(&self) -> MicroNetConfig {
        MicroNetConfig {
            input: InputSpec {
                height: self.size,
                width: self.size,
                channels: 1,
            },
            layers: self.classifier_layers.clone(),
            head: Head::Categorical { classes: 2 },
            param_budget: Some(crate::micronet::SV_PARAM_BUDGET),
        }
    }

    fn regressor_config(&self) -> MicroNetConfig {
        MicroNetConfig {
            input: InputSpec {
                height: self.size,
                width: self.size,
                channels: self.span(),
            },
            layers: self.regressor_layers.clone(),
            head: Head::ScalarRegressor { squash: true },
            param_budget: Some(crate::micronet::SV_PARAM_BUDGET),
        }
    }
}

/// Four-blob flag of every axial plane of the raw volume.
fn four_blob_labels(v: &Volume, threshold: f64) -> Result<Vec<bool>> {
    (0..v.dims().nz)
        .map(|z| Ok(count_blobs(&extract_plane(v, Axis::Axial, z)?, threshold) == 4))
        .collect()
}

struct Prepared {
    vol: RealVolume,
    gppi: usize,
    four: Vec<bool>,
    last_four: usize,
}

struct ClassifierSource<'a> {
    s: &'a BlobSettings,
    vols: &'a [Prepared],
}

impl ExampleSource for ClassifierSource<'_> {
    fn len(&self) -> usize {
        self.vols.len() * self.s.planes_per_volume
    }

    fn example(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Example> {
        let p = &self.vols[index / self.s.planes_per_volume];
        let nz = p.vol.dims().nz;
        let z = if rng.random_bool(0.5) {
            near(p.last_four, 6, nz, rng)
        } else {
            rng.random_range(0..nz)
        };
        let mut data = axial_stack(&p.vol, z, 1);
        if self.s.augment {
            data = random_geometry(self.s.size, data, rng)?;
        }
        let target = if p.four[z] { vec![0.0, 1.0] } else { vec![1.0, 0.0] };
        Ok(Example::new(tensor(1, self.s.size, self.s.size, data)?, target))
    }
}

struct RegressorSource<'a> {
    s: &'a BlobSettings,
    vols: &'a [Prepared],
}

impl ExampleSource for RegressorSource<'_> {
    fn len(&self) -> usize {
        self.vols.len() * self.s.stacks_per_volume
    }

    fn example(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Example> {
        let s = self.s;
        let p = &self.vols[index / s.stacks_per_volume];
        let nz = p.vol.dims().nz;
        let j = s.rough_jitter as i64;
        let rough = p.gppi as i64 - 1 + rng.random_range(-j..=j);
        let start = (rough - s.half_span as i64).clamp(0, (nz - s.span()) as i64) as usize;
        let frac = (p.gppi as f64 - start as f64) / (2 * s.half_span) as f64;
        let mut data = axial_stack(&p.vol, start, s.span());
        if s.augment {
            data = random_geometry(s.size, data, rng)?;
        }
        Ok(Example::new(tensor(s.span(), s.size, s.size, data)?, vec![frac.clamp(0.0, 1.0)]))
    }
}

pub(super) fn train(s: &BlobSettings, data: &[LabeledRef<'_>], seed: u64) -> Result<(Vec<MicroNet>, Vec<Vec<f64>>)> {
    let mut vols = Vec::with_capacity(data.len());
    for item in data {
        let nz = item.volume.dims().nz;
        if s.span() > nz {
            return Err(Error::arg(format!("stack of {} planes does not fit {nz}", s.span())));
        }
        let four = four_blob_labels(item.volume, s.blob_threshold_hu)?;
        let last_four = four.iter().rposition(|&b| b).ok_or_else(|| {
            Error::NotFound(format!("training volume '{}' has no four-blob plane", item.volume.id()))
        })?;
        vols.push(Prepared {
            vol: prepare(item.volume, s.clip, s.size, s.resize)?,
            gppi: item.gppi,
            four,
            last_four,
        });
    }
    let mut classifier = MicroNet::new(s.classifier_config(), derive_seed(seed, &["blob-refine", "classifier"]))?;
    let mut regressor = MicroNet::new(s.regressor_config(), derive_seed(seed, &["blob-refine", "regressor"]))?;
    let c_schedule = Schedule {
        seed: derive_seed(seed, &["blob-refine", "classifier-schedule"]),
        ..s.classifier_schedule.clone()
    };
    let r_schedule = Schedule {
        seed: derive_seed(seed, &["blob-refine", "regressor-schedule"]),
        ..s.regressor_schedule.clone()
    };
    let c_report = fit(&mut classifier, &ClassifierSource { s, vols: &vols }, LossKind::Ce, &c_schedule)?;
    let r_report = fit(&mut regressor, &RegressorSource { s, vols: &vols }, LossKind::Mse, &r_schedule)?;
    Ok((vec![classifier, regressor], vec![c_report.history, r_report.history]))
}

pub(super) fn detect(
    s: &BlobSettings,
    classifier: &MicroNet,
    regressor: &MicroNet,
    v: &Volume,
) -> Result<(i64, Vec<(usize, f64)>, bool)> {
    let prepared = prepare(v, s.clip, s.size, s.resize)?;
    let nz = prepared.dims().nz;
    let out = blob_rough_then_refine(
        nz,
        s.half_span,
        |z| Ok(classifier.predict(&tensor(1, s.size, s.size, axial_stack(&prepared, z, 1))?)?[1]),
        |start| Ok(regressor.predict(&tensor(s.span(), s.size, s.size, axial_stack(&prepared, start, s.span()))?)?[0]),
    )?;
    Ok((out.gppi, out.trace, out.clamped))
}
