//! Decoders that turn per-plane or per-window model outputs into one
//! growth-plate plane index, and the window target encodings they are
//! trained against.
//!
//! Model evaluation is injected as closures so every decoder can be
//! tested against oracle scorers.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evalrank::Prediction;
use crate::micronet::sigmoid;
use crate::seed::round_half_away;
use crate::volgrid::Plane2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowScheme {
    /// Objectness plus offset fraction, decoded from the best window.
    Sn,
    /// Linear-P target, decoded as the best window's center.
    Bm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowTarget {
    pub contains: bool,
    /// Present exactly when `contains`.
    pub offset_frac: Option<f64>,
    pub p_linear: f64,
}

/// Supervision for the window `[start, start + len)`.
pub fn encode_window_targets(gppi: i64, start: usize, len: usize) -> Result<WindowTarget> {
    if len == 0 {
        return Err(Error::arg("window length must be positive"));
    }
    let (s, l) = (start as i64, len as i64);
    let contains = s <= gppi && gppi < s + l;
    let center = start as f64 + len as f64 / 2.0;
    let p_linear = (1.0 - (gppi as f64 - center).abs() / (len as f64 / 2.0)).max(0.0);
    Ok(WindowTarget {
        contains,
        offset_frac: contains.then(|| (gppi - s) as f64 / len as f64),
        p_linear,
    })
}

/// Window starts `0, stride, 2*stride, ...` plus an end-aligned final
/// window when the stride does not land on it.
pub fn window_starts(nz: usize, window_len: usize, stride: usize) -> Result<Vec<usize>> {
    if window_len == 0 || window_len > nz {
        return Err(Error::arg(format!("window length {window_len} does not fit {nz} planes")));
    }
    if stride == 0 {
        return Err(Error::arg("stride must be at least 1"));
    }
    let last = nz - window_len;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    Ok(starts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub volume_id: String,
    pub gppi_pred: i64,
    pub method: String,
    pub model_id: String,
    /// `(plane or window start, score)` pairs in scan order.
    pub trace: Vec<(usize, f64)>,
    /// Set when the decoder had to clamp a window to the volume.
    pub flagged: bool,
}

impl Detection {
    pub fn new(volume_id: &str, gppi_pred: i64, method: &str) -> Self {
        Detection {
            volume_id: volume_id.to_string(),
            gppi_pred,
            method: method.to_string(),
            model_id: String::new(),
            trace: Vec::new(),
            flagged: false,
        }
    }

    pub fn to_prediction(&self) -> Prediction {
        Prediction {
            volume_id: self.volume_id.clone(),
            gppi_pred: self.gppi_pred,
            method: self.method.clone(),
            model_id: self.model_id.clone(),
        }
    }
}

fn clamp_plane(g: i64, nz: usize) -> i64 {
    g.clamp(0, nz as i64 - 1)
}

/// Scores every window with `scorer(start) -> (score, offset_logit)` and
/// decodes the best one; ties go to the lowest start. Returns the plane
/// index and the per-window score trace.
pub fn sliding_window_detect(
    nz: usize,
    window_len: usize,
    stride: usize,
    scheme: WindowScheme,
    mut scorer: impl FnMut(usize) -> Result<(f64, f64)>,
) -> Result<(i64, Vec<(usize, f64)>)> {
    let starts = window_starts(nz, window_len, stride)?;
    let mut trace = Vec::with_capacity(starts.len());
    let mut best: Option<(usize, f64, f64)> = None;
    for start in starts {
        let (score, offset) = scorer(start)?;
        if !score.is_finite() {
            return Err(Error::arg(format!("non-finite window score at {start}")));
        }
        trace.push((start, score));
        if best.is_none_or(|(_, s, _)| score > s) {
            best = Some((start, score, offset));
        }
    }
    let (start, _, offset) = best.expect("at least one window");
    let g = match scheme {
        WindowScheme::Sn => start as i64 + round_half_away(sigmoid(offset) * window_len as f64),
        WindowScheme::Bm => round_half_away(start as f64 + window_len as f64 / 2.0),
    };
    Ok((clamp_plane(g, nz), trace))
}

fn morph(seq: &[bool], half: usize, dilate: bool) -> Vec<bool> {
    let n = seq.len() as i64;
    (0..n)
        .map(|i| {
            let window = (i - half as i64..=i + half as i64).map(|j| seq[j.clamp(0, n - 1) as usize]);
            if dilate {
                window.into_iter().any(|b| b)
            } else {
                window.into_iter().all(|b| b)
            }
        })
        .collect()
}

/// 1-D closing with a centered flat element; borders are replicated.
pub fn close_binary_sequence(seq: &[bool], kernel: usize) -> Result<Vec<bool>> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::arg(format!("closing kernel must be odd and positive, got {kernel}")));
    }
    if seq.is_empty() {
        return Ok(Vec::new());
    }
    let half = kernel / 2;
    Ok(morph(&morph(seq, half, true), half, false))
}

/// Index of the last `true`.
pub fn decode_last_before(seq: &[bool]) -> Result<usize> {
    seq.iter()
        .rposition(|&b| b)
        .ok_or_else(|| Error::NotFound("no plane classified as before the growth plate".into()))
}

/// Closes the per-plane "before" indicator and returns the first plane
/// after the last "before" plane.
pub fn axial_close_decode(before: &[bool], kernel: usize) -> Result<i64> {
    let closed = close_binary_sequence(before, kernel)?;
    let last = decode_last_before(&closed)?;
    Ok(clamp_plane(last as i64 + 1, before.len()))
}

/// Number of 4-connected components of `value >= threshold`.
pub fn count_blobs(p: &Plane2D, threshold: f64) -> usize {
    let (w, h) = (p.width, p.height);
    let fg: Vec<bool> = p.values.iter().map(|&v| v >= threshold).collect();
    let mut parent: Vec<usize> = (0..w * h).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    fn union(parent: &mut [usize], a: usize, b: usize) {
        let (ra, rb) = (find(parent, a), find(parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !fg[i] {
                continue;
            }
            if c + 1 < w && fg[i + 1] {
                union(&mut parent, i, i + 1);
            }
            if r + 1 < h && fg[i + w] {
                union(&mut parent, i, i + w);
            }
        }
    }
    (0..w * h).filter(|&i| fg[i] && find(&mut parent, i) == i).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub rough: usize,
    pub stack_start: usize,
    pub fraction: f64,
    pub gppi: i64,
    /// The stack had to be shifted to stay inside the volume.
    pub clamped: bool,
    pub trace: Vec<(usize, f64)>,
}

/// Rough estimate = last plane the classifier calls four-blob, then a
/// stack of `2 * half_span + 1` planes around it is regressed to a
/// fraction `f` and decoded as `stack_start + round(f * 2 * half_span)`.
/// `classify(z)` returns the four-blob probability; `regress(start)`
/// sees the first plane of the stack.
pub fn blob_rough_then_refine(
    nz: usize,
    half_span: usize,
    mut classify: impl FnMut(usize) -> Result<f64>,
    mut regress: impl FnMut(usize) -> Result<f64>,
) -> Result<RefineOutcome> {
    let span = 2 * half_span + 1;
    if span > nz {
        return Err(Error::arg(format!("stack of {span} planes does not fit {nz}")));
    }
    let mut trace = Vec::with_capacity(nz);
    let mut rough = None;
    for z in 0..nz {
        let p = classify(z)?;
        trace.push((z, p));
        if p >= 0.5 {
            rough = Some(z);
        }
    }
    let rough = rough.ok_or_else(|| Error::NotFound("no plane classified as four-blob".into()))?;
    let wanted = rough as i64 - half_span as i64;
    let stack_start = wanted.clamp(0, (nz - span) as i64) as usize;
    let fraction = regress(stack_start)?;
    if !fraction.is_finite() {
        return Err(Error::arg("non-finite refinement output"));
    }
    let g = stack_start as i64 + round_half_away(fraction * (2 * half_span) as f64);
    Ok(RefineOutcome {
        rough,
        stack_start,
        fraction,
        gppi: clamp_plane(g, nz),
        clamped: stack_start as i64 != wanted,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Whole interpolated volume.
    Coarse,
    /// Native-resolution crop `[crop_start, crop_start + crop_len)`.
    Fine { crop_start: usize, crop_len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseFine {
    pub coarse: i64,
    pub crop_start: usize,
    pub gppi: i64,
    pub clamped: bool,
}

/// Two-pass fractional decode along the long axis.
pub fn coarse_to_fine_regress(nz: usize, crop_len: usize, mut regress: impl FnMut(Pass) -> Result<f64>) -> Result<CoarseFine> {
    if crop_len == 0 || crop_len >= nz {
        return Err(Error::arg(format!("crop length {crop_len} must be in 1..{nz}")));
    }
    let f1 = regress(Pass::Coarse)?;
    if !f1.is_finite() {
        return Err(Error::arg("non-finite coarse output"));
    }
    let coarse = clamp_plane(round_half_away(f1 * nz as f64), nz);
    let wanted = coarse - (crop_len / 2) as i64;
    let crop_start = wanted.clamp(0, (nz - crop_len) as i64) as usize;
    let f2 = regress(Pass::Fine { crop_start, crop_len })?;
    if !f2.is_finite() {
        return Err(Error::arg("non-finite fine output"));
    }
    let g = crop_start as i64 + round_half_away(f2 * crop_len as f64);
    Ok(CoarseFine {
        coarse,
        crop_start,
        gppi: clamp_plane(g, nz),
        clamped: crop_start as i64 != wanted,
    })
}

/// Rounded mean, halves away from zero.
pub fn ensemble_predictions(preds: &[i64]) -> Result<i64> {
    if preds.is_empty() {
        return Err(Error::arg("ensemble of no predictions"));
    }
    let mean = preds.iter().map(|&p| p as f64).sum::<f64>() / preds.len() as f64;
    Ok(round_half_away(mean))
}

/// `index,score` lines for plotting a detection trace.
pub fn diagnostics_csv(d: &Detection) -> String {
    let mut s = String::from("index,score\n");
    for (i, v) in &d.trace {
        let _ = writeln!(s, "{i},{v:.6}");
    }
    s
}

pub fn write_diagnostics_csv(d: &Detection, path: &Path) -> Result<()> {
    std::fs::write(path, diagnostics_csv(d)).map_err(|e| Error::io(path, e))
}
