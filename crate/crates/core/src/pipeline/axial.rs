//! Per-plane "before / after" classification, closing and last-before
//! decode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{axial_stack, near, prepare, random_geometry, tensor, LabeledRef};
use crate::detect::axial_close_decode;
use crate::error::Result;
use crate::micronet::{
    train as fit, Example, ExampleSource, Head, InputSpec, LayerSpec, LossKind, LrSegment, MicroNet, MicroNetConfig,
    Schedule,
};
use crate::prep::{ClipRange, ResizeMode};
use crate::seed::derive_seed;
use crate::volgrid::RealVolume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AxialSettings {
    pub clip: ClipRange,
    pub size: usize,
    pub resize: ResizeMode,
    pub kernel: usize,
    pub planes_per_volume: usize,
    /// Share of sampled planes drawn near the growth plate.
    pub boundary_frac: f64,
    pub boundary_radius: usize,
    pub augment: bool,
    pub layers: Vec<LayerSpec>,
    pub schedule: Schedule,
}

impl Default for AxialSettings {
    fn default() -> Self {
        AxialSettings {
            clip: ClipRange { lo: 0.0, hi: 1900.0 },
            size: 32,
            resize: ResizeMode::Area,
            kernel: 5,
            planes_per_volume: 32,
            boundary_frac: 0.5,
            boundary_radius: 6,
            augment: true,
            layers: vec![
                LayerSpec::Conv {
                    kernel: 3,
                    out_channels: 4,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv {
                    kernel: 3,
                    out_channels: 8,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 16 },
                LayerSpec::Relu,
            ],
            schedule: Schedule {
                epochs: 6,
                lr_segments: vec![
                    LrSegment { from_epoch: 0, lr: 2e-3 },
                    LrSegment { from_epoch: 4, lr: 1e-3 },
                ],
                batch_size: 16,
                seed: 0,
                weight_decay: 0.0,
            },
        }
    }
}

impl AxialSettings {
    fn config(&self) -> MicroNetConfig {
        MicroNetConfig {
            input: InputSpec {
                height: self.size,
                width: self.size,
                channels: 1,
            },
            layers: self.layers.clone(),
            head: Head::BinaryClassifier,
            param_budget: None,
        }
    }
}

struct PlaneSource<'a> {
    settings: &'a AxialSettings,
    vols: Vec<(RealVolume, usize)>,
}

impl ExampleSource for PlaneSource<'_> {
    fn len(&self) -> usize {
        self.vols.len() * self.settings.planes_per_volume
    }

    fn example(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Example> {
        let s = self.settings;
        let (v, gppi) = &self.vols[index / s.planes_per_volume];
        let nz = v.dims().nz;
        let z = if rng.random_bool(s.boundary_frac) {
            near(*gppi, s.boundary_radius, nz, rng)
        } else {
            rng.random_range(0..nz)
        };
        let mut data = axial_stack(v, z, 1);
        if s.augment {
            data = random_geometry(s.size, data, rng)?;
        }
        let label = if z < *gppi { 1.0 } else { 0.0 };
        Ok(Example::new(tensor(1, s.size, s.size, data)?, vec![label]))
    }
}

pub(super) fn train(s: &AxialSettings, data: &[LabeledRef<'_>], seed: u64) -> Result<(Vec<MicroNet>, Vec<Vec<f64>>)> {
    let vols = data
        .iter()
        .map(|item| Ok((prepare(item.volume, s.clip, s.size, s.resize)?, item.gppi)))
        .collect::<Result<Vec<_>>>()?;
    let source = PlaneSource { settings: s, vols };
    let mut net = MicroNet::new(s.config(), derive_seed(seed, &["axial-close", "init"]))?;
    let schedule = Schedule {
        seed: derive_seed(seed, &["axial-close", "schedule"]),
        ..s.schedule.clone()
    };
    let report = fit(&mut net, &source, LossKind::Bce, &schedule)?;
    Ok((vec![net], vec![report.history]))
}

pub(super) fn detect(s: &AxialSettings, net: &MicroNet, v: &crate::volgrid::Volume) -> Result<(i64, Vec<(usize, f64)>, bool)> {
    let prepared = prepare(v, s.clip, s.size, s.resize)?;
    let nz = prepared.dims().nz;
    let mut trace = Vec::with_capacity(nz);
    let mut before = Vec::with_capacity(nz);
    for z in 0..nz {
        let p = net.predict(&tensor(1, s.size, s.size, axial_stack(&prepared, z, 1))?)?[0];
        trace.push((z, p));
        before.push(p >= 0.5);
    }
    let gppi = axial_close_decode(&before, s.kernel)?;
    Ok((gppi, trace, false))
}
