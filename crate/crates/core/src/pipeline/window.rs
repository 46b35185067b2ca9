//! Sliding windows of axial planes stacked as channels, with either the
//! objectness/offset target or the linear-P target.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{axial_stack, prepare, random_geometry, tensor, LabeledRef, Method};
use crate::detect::{encode_window_targets, sliding_window_detect, WindowScheme};
use crate::error::{Error, Result};
use crate::micronet::{
    sigmoid, train as fit, Example, ExampleSource, Head, InputSpec, LayerSpec, LossKind, LrSegment, MicroNet,
    MicroNetConfig, Schedule,
};
use crate::prep::{ClipRange, ResizeMode};
use crate::seed::derive_seed;
use crate::volgrid::{RealVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSettings {
    pub clip: ClipRange,
    pub size: usize,
    pub resize: ResizeMode,
    pub window_len: usize,
    pub stride: usize,
    pub windows_per_volume: usize,
    /// Share of training windows that contain the growth plate.
    pub contain_frac: f64,
    pub augment: bool,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub sn_lambda: f64,
    pub layers: Vec<LayerSpec>,
    pub schedule: Schedule,
}

impl Default for WindowSettings {
    fn default() -> Self {
        WindowSettings::bm()
    }
}

impl WindowSettings {
    pub fn bm() -> Self {
        WindowSettings {
            clip: ClipRange { lo: -100.0, hi: 3171.0 },
            size: 24,
            resize: ResizeMode::Area,
            window_len: 32,
            stride: 1,
            windows_per_volume: 16,
            contain_frac: 0.5,
            augment: true,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            sn_lambda: 6.0,
            layers: vec![
                LayerSpec::Conv {
                    kernel: 3,
                    out_channels: 16,
                    stride: 2,
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
                epochs: 10,
                lr_segments: vec![
                    LrSegment { from_epoch: 0, lr: 2e-3 },
                    LrSegment { from_epoch: 7, lr: 1e-3 },
                ],
                batch_size: 8,
                seed: 0,
                weight_decay: 0.0,
            },
        }
    }

    pub fn sn() -> Self {
        WindowSettings {
            clip: ClipRange { lo: -1000.0, hi: 4000.0 },
            stride: 16,
            ..WindowSettings::bm()
        }
    }

    fn config(&self, method: Method) -> MicroNetConfig {
        MicroNetConfig {
            input: InputSpec {
                height: self.size,
                width: self.size,
                channels: self.window_len,
            },
            layers: self.layers.clone(),
            head: if method == Method::WindowSn {
                Head::Decoupled
            } else {
                Head::BinaryClassifier
            },
            param_budget: None,
        }
    }

    fn loss(&self, method: Method) -> LossKind {
        if method == Method::WindowSn {
            LossKind::SnCombined {
                lambda: self.sn_lambda,
                alpha: self.focal_alpha,
                gamma: self.focal_gamma,
            }
        } else {
            LossKind::Bce
        }
    }
}

struct WindowSource<'a> {
    s: &'a WindowSettings,
    method: Method,
    vols: Vec<(RealVolume, usize)>,
}

impl ExampleSource for WindowSource<'_> {
    fn len(&self) -> usize {
        self.vols.len() * self.s.windows_per_volume
    }

    fn example(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Example> {
        let s = self.s;
        let (v, gppi) = &self.vols[index / s.windows_per_volume];
        let last = v.dims().nz - s.window_len;
        let start = if rng.random_bool(s.contain_frac) {
            let lo = (*gppi + 1).saturating_sub(s.window_len);
            rng.random_range(lo..=*gppi).min(last)
        } else {
            rng.random_range(0..=last)
        };
        let t = encode_window_targets(*gppi as i64, start, s.window_len)?;
        let mut data = axial_stack(v, start, s.window_len);
        if s.augment {
            data = random_geometry(s.size, data, rng)?;
        }
        let input = tensor(s.window_len, s.size, s.size, data)?;
        Ok(if self.method == Method::WindowSn {
            Example {
                input,
                target: vec![f64::from(u8::from(t.contains)), t.offset_frac.unwrap_or(0.0)],
                mask: f64::from(u8::from(t.contains)),
            }
        } else {
            Example::new(input, vec![t.p_linear])
        })
    }
}

pub(super) fn train(
    s: &WindowSettings,
    method: Method,
    data: &[LabeledRef<'_>],
    seed: u64,
) -> Result<(Vec<MicroNet>, Vec<Vec<f64>>)> {
    let mut vols = Vec::with_capacity(data.len());
    for item in data {
        if s.window_len > item.volume.dims().nz {
            return Err(Error::arg(format!("window of {} planes does not fit", s.window_len)));
        }
        vols.push((prepare(item.volume, s.clip, s.size, s.resize)?, item.gppi));
    }
    let name = method.name();
    let mut net = MicroNet::new(s.config(method), derive_seed(seed, &[name, "init"]))?;
    let schedule = Schedule {
        seed: derive_seed(seed, &[name, "schedule"]),
        ..s.schedule.clone()
    };
    let source = WindowSource { s, method, vols };
    let report = fit(&mut net, &source, s.loss(method), &schedule)?;
    Ok((vec![net], vec![report.history]))
}

pub(super) fn detect(s: &WindowSettings, method: Method, net: &MicroNet, v: &Volume) -> Result<(i64, Vec<(usize, f64)>, bool)> {
    let prepared = prepare(v, s.clip, s.size, s.resize)?;
    let nz = prepared.dims().nz;
    let scheme = if method == Method::WindowSn {
        WindowScheme::Sn
    } else {
        WindowScheme::Bm
    };
    let (gppi, trace) = sliding_window_detect(nz, s.window_len, s.stride, scheme, |start| {
        let out = net.predict(&tensor(s.window_len, s.size, s.size, axial_stack(&prepared, start, s.window_len))?)?;
        Ok(match scheme {
            WindowScheme::Sn => (sigmoid(out[0]), out[1]),
            WindowScheme::Bm => (out[0], 0.0),
        })
    })?;
    Ok((gppi, trace, false))
}
