//! A minimal CNN engine: convolution, max-pooling, ReLU and dense layers
//! with exact backpropagation, the losses used by the detectors, Adam, a
//! deterministic training loop, finite-difference gradient checking and
//! the GPM model file.
//!
//! Activations are `channels x height x width`, row-major. Convolutions use
//! zero "same" padding of `kernel / 2`. Parameters live in one flat vector
//! in layer order, weights before biases.

mod adam;
mod gradcheck;
mod loss;
mod model_io;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, grad_check_with};
pub use loss::{compute_loss, sigmoid, LossKind};
pub use model_io::{decode_model, decode_models, encode_model, load_model, save_model, ModelHeader, GPM_MAGIC};
pub use train::{train, Example, ExampleSource, LrSegment, Schedule, TrainReport};

/// Dense n-dimensional array of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        out_channels: usize,
        stride: usize,
    },
    MaxPool {
        size: usize,
    },
    Relu,
    Flatten,
    Dense {
        out: usize,
    },
}

/// Output layer. Each head appends its own dense layer to the body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// One logit squashed to a probability.
    BinaryClassifier,
    /// One real value, optionally squashed to (0, 1).
    ScalarRegressor { squash: bool },
    /// Softmax over `classes`.
    Categorical { classes: usize },
    /// Raw `[objectness logit, offset logit]` pair.
    Decoupled,
}

impl Head {
    pub fn width(&self) -> usize {
        match self {
            Head::BinaryClassifier | Head::ScalarRegressor { .. } => 1,
            Head::Categorical { classes } => *classes,
            Head::Decoupled => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroNetConfig {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub head: Head,
    #[serde(default)]
    pub param_budget: Option<usize>,
}

/// Upper bound on parameters for the lightweight blob classifier and
/// refinement regressor.
pub const SV_PARAM_BUDGET: usize = 40_000;

fn four_stage_body() -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for out_channels in [8, 16, 24, 32] {
        layers.push(LayerSpec::Conv {
            kernel: 3,
            out_channels,
            stride: 1,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool { size: 2 });
    }
    layers.push(LayerSpec::Flatten);
    layers
}

impl MicroNetConfig {
    /// Four-blob plane classifier on 96x96 single-channel planes.
    pub fn sv_classifier() -> Self {
        MicroNetConfig {
            input: InputSpec {
                height: 96,
                width: 96,
                channels: 1,
            },
            layers: four_stage_body(),
            head: Head::Categorical { classes: 2 },
            param_budget: Some(SV_PARAM_BUDGET),
        }
    }

    /// Refinement regressor on a 96x96 stack of 51 planes.
    pub fn sv_regressor() -> Self {
        MicroNetConfig {
            input: InputSpec {
                height: 96,
                width: 96,
                channels: 51,
            },
            layers: four_stage_body(),
            head: Head::ScalarRegressor { squash: true },
            param_budget: Some(SV_PARAM_BUDGET),
        }
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(plan(self)?.1)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Conv {
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        oh: usize,
        ow: usize,
        k: usize,
        stride: usize,
        pad: usize,
        w_off: usize,
        b_off: usize,
    },
    Pool {
        c: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
        size: usize,
    },
    Relu {
        len: usize,
    },
    Dense {
        nin: usize,
        nout: usize,
        w_off: usize,
        b_off: usize,
    },
}

impl Op {
    fn out_len(&self) -> usize {
        match *self {
            Op::Conv { cout, oh, ow, .. } => cout * oh * ow,
            Op::Pool { c, oh, ow, .. } => c * oh * ow,
            Op::Relu { len } => len,
            Op::Dense { nout, .. } => nout,
        }
    }

    /// (offset, len, fan_in) of the weight block, if any.
    fn weights(&self) -> Option<(usize, usize, usize)> {
        match *self {
            Op::Conv { cin, cout, k, w_off, .. } => Some((w_off, cout * cin * k * k, cin * k * k)),
            Op::Dense { nin, nout, w_off, .. } => Some((w_off, nin * nout, nin)),
            _ => None,
        }
    }

    fn bias(&self) -> Option<(usize, usize)> {
        match *self {
            Op::Conv { cout, b_off, .. } => Some((b_off, cout)),
            Op::Dense { nout, b_off, .. } => Some((b_off, nout)),
            _ => None,
        }
    }
}

fn plan(config: &MicroNetConfig) -> Result<(Vec<Op>, usize)> {
    let InputSpec {
        height,
        width,
        channels,
    } = config.input;
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::ShapeMismatch(format!("empty input {:?}", config.input)));
    }
    // (c, h, w) while spatial, (n, 1, 1) with flat=true after flatten
    let (mut c, mut h, mut w) = (channels, height, width);
    let mut flat = false;
    let mut ops = Vec::new();
    let mut n_params = 0usize;
    let bad = |i: usize, msg: String| Error::ShapeMismatch(format!("layer {i}: {msg}"));
    for (i, layer) in config.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Conv {
                kernel,
                out_channels,
                stride,
            } => {
                if flat {
                    return Err(bad(i, "conv after flatten".into()));
                }
                if kernel == 0 || kernel % 2 == 0 || out_channels == 0 || stride == 0 {
                    return Err(bad(i, format!("conv k={kernel} out={out_channels} stride={stride}")));
                }
                let pad = kernel / 2;
                let oh = (h + 2 * pad - kernel) / stride + 1;
                let ow = (w + 2 * pad - kernel) / stride + 1;
                let w_off = n_params;
                n_params += out_channels * c * kernel * kernel;
                let b_off = n_params;
                n_params += out_channels;
                ops.push(Op::Conv {
                    cin: c,
                    h,
                    w,
                    cout: out_channels,
                    oh,
                    ow,
                    k: kernel,
                    stride,
                    pad,
                    w_off,
                    b_off,
                });
                (c, h, w) = (out_channels, oh, ow);
            }
            LayerSpec::MaxPool { size } => {
                if flat {
                    return Err(bad(i, "pool after flatten".into()));
                }
                if size == 0 || h < size || w < size {
                    return Err(bad(i, format!("pool {size} on {h}x{w}")));
                }
                let (oh, ow) = (h / size, w / size);
                ops.push(Op::Pool { c, h, w, oh, ow, size });
                (h, w) = (oh, ow);
            }
            LayerSpec::Relu => ops.push(Op::Relu { len: c * h * w }),
            LayerSpec::Flatten => {
                (c, h, w) = (c * h * w, 1, 1);
                flat = true;
            }
            LayerSpec::Dense { out } => {
                if !flat {
                    return Err(bad(i, "dense before flatten".into()));
                }
                if out == 0 {
                    return Err(bad(i, "dense with zero outputs".into()));
                }
                let w_off = n_params;
                n_params += out * c;
                let b_off = n_params;
                n_params += out;
                ops.push(Op::Dense {
                    nin: c,
                    nout: out,
                    w_off,
                    b_off,
                });
                c = out;
            }
        }
    }
    if !flat {
        return Err(Error::ShapeMismatch("body must end with flatten or dense".into()));
    }
    let nout = config.head.width();
    if nout == 0 {
        return Err(Error::ShapeMismatch("head with zero outputs".into()));
    }
    let w_off = n_params;
    n_params += nout * c;
    let b_off = n_params;
    n_params += nout;
    ops.push(Op::Dense {
        nin: c,
        nout,
        w_off,
        b_off,
    });
    if let Some(budget) = config.param_budget {
        if n_params > budget {
            return Err(Error::InvalidArgument(format!(
                "network has {n_params} parameters, budget is {budget}"
            )));
        }
    }
    Ok((ops, n_params))
}

static NEXT_INSTANCE: AtomicU64 = AtomicU64::new(1);

fn next_instance() -> u64 {
    NEXT_INSTANCE.fetch_add(1, Ordering::Relaxed)
}

/// Network configuration plus parameters.
#[derive(Debug)]
pub struct MicroNet {
    config: MicroNetConfig,
    ops: Vec<Op>,
    params: Vec<f64>,
    instance: u64,
    generation: u64,
}

impl Clone for MicroNet {
    fn clone(&self) -> Self {
        MicroNet {
            config: self.config.clone(),
            ops: self.ops.clone(),
            params: self.params.clone(),
            instance: next_instance(),
            generation: 0,
        }
    }
}

/// Intermediate values from [`MicroNet::forward`] needed by `backward`.
#[derive(Debug, Clone)]
pub struct Cache {
    instance: u64,
    generation: u64,
    /// Input of every op, then the head logits.
    acts: Vec<Vec<f64>>,
    pool_argmax: Vec<Vec<u32>>,
    output: Vec<f64>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl MicroNet {
    /// Builds the network with fan-in scaled uniform weights and zero biases.
    pub fn new(config: MicroNetConfig, seed: u64) -> Result<Self> {
        let (ops, n) = plan(&config)?;
        let mut params = vec![0.0; n];
        let mut rng = rng_from(seed);
        for op in &ops {
            if let Some((off, len, fan_in)) = op.weights() {
                let bound = (6.0 / fan_in as f64).sqrt();
                for p in &mut params[off..off + len] {
                    *p = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(MicroNet {
            config,
            ops,
            params,
            instance: next_instance(),
            generation: 0,
        })
    }

    pub fn from_params(config: MicroNetConfig, params: Vec<f64>) -> Result<Self> {
        let (ops, n) = plan(&config)?;
        if params.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "config needs {n} parameters, got {}",
                params.len()
            )));
        }
        Ok(MicroNet {
            config,
            ops,
            params,
            instance: next_instance(),
            generation: 0,
        })
    }

    pub fn config(&self) -> &MicroNetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    /// Rounds every parameter to the nearest `f32`, matching what a GPM
    /// file stores.
    pub fn quantize_f32(&mut self) {
        for p in self.params_mut() {
            *p = *p as f32 as f64;
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let i = self.config.input;
        [i.channels, i.height, i.width]
    }

    /// Ranges `(offset, len)` of every weight and bias block in order.
    pub fn param_blocks(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for op in &self.ops {
            if let Some((off, len, _)) = op.weights() {
                out.push((off, len));
            }
            if let Some(b) = op.bias() {
                out.push(b);
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        let expected = self.input_shape();
        let ok = match x.shape() {
            [c, h, w] => [*c, *h, *w] == expected,
            [h, w] => expected[0] == 1 && [*h, *w] == [expected[1], expected[2]],
            _ => false,
        };
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match network input {:?}",
                x.shape(),
                expected
            )));
        }
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.ops.len() + 1);
        let mut pool_argmax = Vec::new();
        let mut cur = x.data().to_vec();
        for op in &self.ops {
            let mut out = vec![0.0; op.out_len()];
            match *op {
                Op::Conv {
                    cin,
                    h,
                    w,
                    cout,
                    oh,
                    ow,
                    k,
                    stride,
                    pad,
                    w_off,
                    b_off,
                } => {
                    let geo = ConvGeom {
                        cin,
                        h,
                        w,
                        cout,
                        oh,
                        ow,
                        k,
                        stride,
                        pad,
                    };
                    conv_forward(
                        &geo,
                        &cur,
                        &self.params[w_off..w_off + cout * cin * k * k],
                        &self.params[b_off..b_off + cout],
                        &mut out,
                    );
                }
                Op::Pool { c, h, w, oh, ow, size } => {
                    let mut idx = vec![0u32; out.len()];
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut at = 0usize;
                                for dy in 0..size {
                                    let row = (ch * h + oy * size + dy) * w + ox * size;
                                    for (dx, &v) in cur[row..row + size].iter().enumerate() {
                                        if v > best {
                                            best = v;
                                            at = row + dx;
                                        }
                                    }
                                }
                                let o = (ch * oh + oy) * ow + ox;
                                out[o] = best;
                                idx[o] = at as u32;
                            }
                        }
                    }
                    pool_argmax.push(idx);
                }
                Op::Relu { .. } => {
                    for (o, &v) in out.iter_mut().zip(&cur) {
                        *o = v.max(0.0);
                    }
                }
                Op::Dense { nin, nout, w_off, b_off } => {
                    let wts = &self.params[w_off..w_off + nin * nout];
                    for (j, o) in out.iter_mut().enumerate() {
                        let row = &wts[j * nin..(j + 1) * nin];
                        *o = self.params[b_off + j] + dot(row, &cur);
                    }
                }
            }
            acts.push(std::mem::replace(&mut cur, out));
        }
        let output = self.activate(&cur);
        acts.push(cur);
        let cache = Cache {
            instance: self.instance,
            generation: self.generation,
            acts,
            pool_argmax,
            output: output.clone(),
        };
        let out = Tensor::new(vec![output.len()], output)?;
        Ok((out, cache))
    }

    /// Forward pass returning only the head output.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0.into_data())
    }

    fn activate(&self, logits: &[f64]) -> Vec<f64> {
        match self.config.head {
            Head::BinaryClassifier | Head::ScalarRegressor { squash: true } => logits.iter().map(|&z| sigmoid(z)).collect(),
            Head::ScalarRegressor { squash: false } | Head::Decoupled => logits.to_vec(),
            Head::Categorical { .. } => {
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }
        }
    }

    pub fn backward(&self, cache: &Cache, upstream: &[f64]) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; self.params.len()];
        self.backward_accumulate(cache, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Adds the parameter gradient for one example into `grads`.
    pub fn backward_accumulate(&self, cache: &Cache, upstream: &[f64], grads: &mut [f64]) -> Result<()> {
        if cache.instance != self.instance || cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        if upstream.len() != cache.output.len() {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient has {} values for {} outputs",
                upstream.len(),
                cache.output.len()
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::ShapeMismatch("gradient buffer size".into()));
        }
        let y = &cache.output;
        let mut delta: Vec<f64> = match self.config.head {
            Head::BinaryClassifier | Head::ScalarRegressor { squash: true } => {
                upstream.iter().zip(y).map(|(g, p)| g * p * (1.0 - p)).collect()
            }
            Head::ScalarRegressor { squash: false } | Head::Decoupled => upstream.to_vec(),
            Head::Categorical { .. } => {
                let s: f64 = upstream.iter().zip(y).map(|(g, p)| g * p).sum();
                upstream.iter().zip(y).map(|(g, p)| p * (g - s)).collect()
            }
        };
        let mut pool_i = cache.pool_argmax.len();
        for (i, op) in self.ops.iter().enumerate().rev() {
            let input = &cache.acts[i];
            let need_input_grad = i > 0;
            match *op {
                Op::Conv {
                    cin,
                    h,
                    w,
                    cout,
                    oh,
                    ow,
                    k,
                    stride,
                    pad,
                    w_off,
                    b_off,
                } => {
                    let geo = ConvGeom {
                        cin,
                        h,
                        w,
                        cout,
                        oh,
                        ow,
                        k,
                        stride,
                        pad,
                    };
                    let nw = cout * cin * k * k;
                    let (gw, rest) = grads[w_off..].split_at_mut(nw);
                    let gb = &mut rest[b_off - w_off - nw..b_off - w_off - nw + cout];
                    let mut dx = if need_input_grad {
                        vec![0.0; cin * h * w]
                    } else {
                        Vec::new()
                    };
                    conv_backward(
                        &geo,
                        input,
                        &self.params[w_off..w_off + nw],
                        &delta,
                        gw,
                        gb,
                        need_input_grad.then_some(&mut dx[..]),
                    );
                    delta = dx;
                }
                Op::Pool { c, h, w, .. } => {
                    pool_i -= 1;
                    let mut dx = vec![0.0; c * h * w];
                    for (&at, &d) in cache.pool_argmax[pool_i].iter().zip(&delta) {
                        dx[at as usize] += d;
                    }
                    delta = dx;
                }
                Op::Relu { .. } => {
                    for (d, &v) in delta.iter_mut().zip(input) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                Op::Dense { nin, nout, w_off, b_off } => {
                    for j in 0..nout {
                        let d = delta[j];
                        grads[b_off + j] += d;
                        if d != 0.0 {
                            axpy(d, input, &mut grads[w_off + j * nin..w_off + (j + 1) * nin]);
                        }
                    }
                    if need_input_grad {
                        let mut dx = vec![0.0; nin];
                        let wts = &self.params[w_off..w_off + nin * nout];
                        for (j, &d) in delta.iter().enumerate() {
                            if d != 0.0 {
                                axpy(d, &wts[j * nin..(j + 1) * nin], &mut dx);
                            }
                        }
                        delta = dx;
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize the reduction
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Output index range whose input coordinate `o * stride + tap - pad`
    /// lands inside `[0, extent)`.
    #[inline]
    fn valid(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > tap { (self.pad - tap).div_ceil(s) } else { 0 };
        let hi_num = extent as i64 - 1 + self.pad as i64 - tap as i64;
        let hi = if hi_num < 0 { 0 } else { (hi_num as usize / s + 1).min(out_extent) };
        (lo.min(hi), hi)
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], wts: &[f64], bias: &[f64], out: &mut [f64]) {
    let (plane_in, plane_out) = (g.h * g.w, g.oh * g.ow);
    for o in 0..g.cout {
        let out_o = &mut out[o * plane_out..(o + 1) * plane_out];
        out_o.fill(bias[o]);
        for c in 0..g.cin {
            let xin = &x[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.k {
                    let wv = wts[((o * g.cin + c) * g.k + ky) * g.k + kx];
                    let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_in = &xin[iy * g.w..(iy + 1) * g.w];
                        let row_out = &mut out_o[oy * g.ow + ox0..oy * g.ow + ox1];
                        let ix0 = ox0 * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            axpy(wv, &row_in[ix0..ix0 + (ox1 - ox0)], row_out);
                        } else {
                            for (j, r) in row_out.iter_mut().enumerate() {
                                *r += wv * row_in[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    wts: &[f64],
    dout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let (plane_in, plane_out) = (g.h * g.w, g.oh * g.ow);
    for o in 0..g.cout {
        let d_o = &dout[o * plane_out..(o + 1) * plane_out];
        gb[o] += d_o.iter().sum::<f64>();
        for c in 0..g.cin {
            let xin = &x[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.k {
                    let wi = ((o * g.cin + c) * g.k + ky) * g.k + kx;
                    let wv = wts[wi];
                    let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let ix0 = ox0 * g.stride + kx - g.pad;
                    let n = ox1 - ox0;
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let d_row = &d_o[oy * g.ow + ox0..oy * g.ow + ox1];
                        let in_base = c * plane_in + iy * g.w + ix0;
                        if g.stride == 1 {
                            acc += dot(d_row, &xin[iy * g.w + ix0..iy * g.w + ix0 + n]);
                            if let Some(dx) = dx.as_deref_mut() {
                                axpy(wv, d_row, &mut dx[in_base..in_base + n]);
                            }
                        } else {
                            for (j, &d) in d_row.iter().enumerate() {
                                acc += d * xin[iy * g.w + ix0 + j * g.stride];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                for (j, &d) in d_row.iter().enumerate() {
                                    dx[in_base + j * g.stride] += wv * d;
                                }
                            }
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
}
