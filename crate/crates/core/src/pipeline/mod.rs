//! Per-method training and inference: preprocessing, example sampling,
//! network training and decoding, plus the model bundle format.

mod axial;
mod blob;
mod longaxis;
mod window;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detect::{ensemble_predictions, Detection};
use crate::error::{Error, Result};
use crate::micronet::{decode_models, encode_model, MicroNet, Tensor};
use crate::prep::{augment_channels, normalize_unit, resize_volume_xy, ClipRange, GeomOp, ResizeMode};
use crate::volgrid::{RealVolume, Volume};

pub use axial::AxialSettings;
pub use blob::BlobSettings;
pub use longaxis::LongAxisSettings;
pub use window::WindowSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    AxialClose,
    BlobRefine,
    WindowSn,
    WindowBm,
    LongAxis,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::AxialClose,
        Method::BlobRefine,
        Method::WindowSn,
        Method::WindowBm,
        Method::LongAxis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::AxialClose => "axial-close",
            Method::BlobRefine => "blob-refine",
            Method::WindowSn => "window-sn",
            Method::WindowBm => "window-bm",
            Method::LongAxis => "long-axis",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown method '{s}'")))
    }
}

/// Everything needed to train and run one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum MethodSettings {
    AxialClose(AxialSettings),
    BlobRefine(BlobSettings),
    WindowSn(WindowSettings),
    WindowBm(WindowSettings),
    LongAxis(LongAxisSettings),
}

impl MethodSettings {
    pub fn default_for(method: Method) -> Self {
        match method {
            Method::AxialClose => MethodSettings::AxialClose(AxialSettings::default()),
            Method::BlobRefine => MethodSettings::BlobRefine(BlobSettings::default()),
            Method::WindowSn => MethodSettings::WindowSn(WindowSettings::sn()),
            Method::WindowBm => MethodSettings::WindowBm(WindowSettings::bm()),
            Method::LongAxis => MethodSettings::LongAxis(LongAxisSettings::default()),
        }
    }

    pub fn method(&self) -> Method {
        match self {
            MethodSettings::AxialClose(_) => Method::AxialClose,
            MethodSettings::BlobRefine(_) => Method::BlobRefine,
            MethodSettings::WindowSn(_) => Method::WindowSn,
            MethodSettings::WindowBm(_) => Method::WindowBm,
            MethodSettings::LongAxis(_) => Method::LongAxis,
        }
    }

    /// Scales every training schedule's epoch count, for quick runs.
    pub fn set_epochs(&mut self, epochs: usize) {
        match self {
            MethodSettings::AxialClose(s) => s.schedule.epochs = epochs,
            MethodSettings::BlobRefine(s) => {
                s.classifier_schedule.epochs = epochs;
                s.regressor_schedule.epochs = epochs;
            }
            MethodSettings::WindowSn(s) | MethodSettings::WindowBm(s) => s.schedule.epochs = epochs,
            MethodSettings::LongAxis(s) => s.schedule.epochs = epochs,
        }
    }
}

/// A training volume with its ground-truth plane.
#[derive(Debug, Clone, Copy)]
pub struct LabeledRef<'a> {
    pub volume: &'a Volume,
    pub gppi: usize,
}

/// Trained networks of one method. Blob refinement carries a classifier
/// and a regressor; every other method carries one network.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub settings: MethodSettings,
    pub nets: Vec<MicroNet>,
    /// Per-network loss history; not stored in the model file.
    pub history: Vec<Vec<f64>>,
}

impl TrainedModel {
    pub fn method(&self) -> Method {
        self.settings.method()
    }

    /// Concatenated GPM records; the first header carries the settings.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for (i, net) in self.nets.iter().enumerate() {
            let meta = if i == 0 {
                serde_json::json!({ "settings": self.settings, "networks": self.nets.len() })
            } else {
                serde_json::json!({ "network": i })
            };
            bytes.extend(encode_model(net, &meta)?);
        }
        Ok(bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let records = decode_models(bytes)?;
        let meta = &records[0].1;
        let settings: MethodSettings = serde_json::from_value(meta["settings"].clone())
            .map_err(|e| Error::Model(format!("method settings: {e}")))?;
        let expected = meta["networks"].as_u64().unwrap_or(1) as usize;
        if records.len() != expected {
            return Err(Error::Model(format!(
                "expected {expected} networks, found {}",
                records.len()
            )));
        }
        let model = TrainedModel {
            settings,
            nets: records.into_iter().map(|(n, _)| n).collect(),
            history: Vec::new(),
        };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        let want = match self.method() {
            Method::BlobRefine => 2,
            _ => 1,
        };
        if self.nets.len() != want {
            return Err(Error::Model(format!(
                "{} needs {want} networks, found {}",
                self.method(),
                self.nets.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        TrainedModel::decode(&bytes)
    }

    /// First 12 hex digits of the SHA-256 of the encoded model.
    pub fn model_id(&self) -> Result<String> {
        let digest = Sha256::digest(self.encode()?);
        Ok(digest[..6].iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Trains `settings` on `data`. Networks are rounded to `f32` afterwards
/// so the in-memory model behaves exactly like a reloaded file.
pub fn train_method(settings: &MethodSettings, data: &[LabeledRef<'_>], seed: u64) -> Result<TrainedModel> {
    if data.is_empty() {
        return Err(Error::arg("no training volumes"));
    }
    for item in data {
        if item.gppi >= item.volume.dims().nz {
            return Err(Error::IndexOutOfRange {
                axis: "axial",
                index: item.gppi as i64,
                extent: item.volume.dims().nz,
            });
        }
    }
    let (mut nets, history) = match settings {
        MethodSettings::AxialClose(s) => axial::train(s, data, seed)?,
        MethodSettings::BlobRefine(s) => blob::train(s, data, seed)?,
        MethodSettings::WindowSn(s) | MethodSettings::WindowBm(s) => window::train(s, settings.method(), data, seed)?,
        MethodSettings::LongAxis(s) => longaxis::train(s, data, seed)?,
    };
    for net in &mut nets {
        net.quantize_f32();
    }
    Ok(TrainedModel {
        settings: settings.clone(),
        nets,
        history,
    })
}

/// Runs one model on one volume.
pub fn detect_volume(model: &TrainedModel, v: &Volume) -> Result<Detection> {
    model.check()?;
    let nets = &model.nets;
    let (gppi, trace, flagged) = match &model.settings {
        MethodSettings::AxialClose(s) => axial::detect(s, &nets[0], v)?,
        MethodSettings::BlobRefine(s) => blob::detect(s, &nets[0], &nets[1], v)?,
        MethodSettings::WindowSn(s) | MethodSettings::WindowBm(s) => window::detect(s, model.method(), &nets[0], v)?,
        MethodSettings::LongAxis(s) => longaxis::detect(s, &nets[0], v)?,
    };
    let mut d = Detection::new(v.id(), gppi, model.method().name());
    d.model_id = model.model_id()?;
    d.trace = trace;
    d.flagged = flagged;
    Ok(d)
}

/// Rounded mean over several models of the same method.
pub fn detect_ensemble(models: &[TrainedModel], v: &Volume) -> Result<Detection> {
    let first = models.first().ok_or_else(|| Error::arg("ensemble of no models"))?;
    if models.iter().any(|m| m.method() != first.method()) {
        return Err(Error::arg("ensemble members must share one method"));
    }
    let mut preds = Vec::with_capacity(models.len());
    let mut ids = Vec::with_capacity(models.len());
    let mut flagged = false;
    for m in models {
        let d = detect_volume(m, v)?;
        preds.push(d.gppi_pred);
        ids.push(d.model_id);
        flagged |= d.flagged;
    }
    let mut d = Detection::new(v.id(), ensemble_predictions(&preds)?, &ensemble_name(first.method()));
    d.model_id = ids.join("+");
    d.trace = preds.iter().enumerate().map(|(i, &p)| (i, p as f64)).collect();
    d.flagged = flagged;
    Ok(d)
}

pub fn ensemble_name(method: Method) -> String {
    format!("ensemble-{method}")
}

// ---- shared helpers ----

/// Clip to `[0, 1]` and resize every axial plane to `size` x `size`.
fn prepare(v: &Volume, clip: ClipRange, size: usize, mode: ResizeMode) -> Result<RealVolume> {
    let unit = normalize_unit(v, clip)?;
    let d = unit.dims();
    if (d.nx, d.ny) == (size, size) {
        return Ok(unit);
    }
    resize_volume_xy(&unit, (size, size), mode)
}

/// Planes `z0 .. z0 + count` as channel-major values.
fn axial_stack(v: &RealVolume, z0: usize, count: usize) -> Vec<f64> {
    let n = v.dims().plane_len();
    v.voxels()[z0 * n..(z0 + count) * n].iter().map(|&x| x as f64).collect()
}

/// Random flip / quarter turn of square channel planes.
fn random_geometry(size: usize, data: Vec<f64>, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut data = data;
    for op in [GeomOp::FlipH, GeomOp::FlipV, GeomOp::Rot90] {
        if rng.random_bool(0.5) {
            data = augment_channels(size, size, &data, op, rng)?.2;
        }
    }
    Ok(data)
}

fn tensor(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Tensor> {
    Tensor::new(vec![channels, height, width], data)
}

/// Plane index near `center`, uniformly within `radius`, clamped to
/// `[0, nz)`.
fn near(center: usize, radius: usize, nz: usize, rng: &mut ChaCha8Rng) -> usize {
    let r = radius as i64;
    let z = center as i64 + rng.random_range(-r..=r);
    z.clamp(0, nz as i64 - 1) as usize
}
