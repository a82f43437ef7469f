//! Monoplane shape regression network.
//!
//! A small convolutional network maps one binary mask to `n` body
//! positions. Conv blocks (conv, ReLU, max-pool) feed fully connected
//! layers (ReLU, dropout) and a final linear layer with `3n` outputs.
//! Positions are regressed in millimetres.
//!
//! Parameters live in one flat `Vec<f64>`: for every layer in declaration
//! order, the weight block (row-major, `[out][in]` or `[out][in][ky][kx]`)
//! followed by the bias block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};
use nalgebra::Vector3;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::{Curve3D, CurveError};
use crate::skeleton::BinaryMask;
use crate::spline::{self, SplineError};
use crate::MM_PER_M;

pub const MODEL_MAGIC: &[u8; 4] = b"FGRN";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FgrnError {
    #[error("shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite parameter at index {0}")]
    NonFiniteParameter(usize),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Curve(#[from] CurveError),
}

/// One conv block: convolution, optional ReLU, then max-pool (`pool` 1 skips it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
    pub relu: bool,
}

impl ConvSpec {
    pub fn standard(out_channels: usize) -> Self {
        Self { out_channels, kernel: 3, stride: 1, pool: 2, relu: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub conv: Vec<ConvSpec>,
    /// Widths of hidden fully connected layers (ReLU + dropout each).
    pub hidden: Vec<usize>,
    /// Output width, `3n`.
    pub outputs: usize,
    pub dropout: f64,
}

impl Architecture {
    /// Default network for 80×80 masks and `bodies` output points.
    pub fn fgrn(bodies: usize) -> Self {
        Self {
            input_height: 80,
            input_width: 80,
            input_channels: 1,
            conv: vec![ConvSpec::standard(8), ConvSpec::standard(16), ConvSpec::standard(32)],
            hidden: vec![256],
            outputs: 3 * bodies,
            dropout: 0.5,
        }
    }

    pub fn bodies(&self) -> usize {
        self.outputs / 3
    }

    pub fn input_len(&self) -> usize {
        self.input_height * self.input_width * self.input_channels
    }

    /// Per-layer parameter shapes.
    pub fn layers(&self) -> Result<Vec<LayerShape>, FgrnError> {
        Ok(Plan::new(self)?.shapes())
    }

    pub fn num_params(&self) -> Result<usize, FgrnError> {
        Ok(Plan::new(self)?.num_params)
    }
}

/// Shape record of one parameterized layer, as written in the model file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub kind: String,
    pub weight_shape: Vec<usize>,
    pub bias_len: usize,
    /// `[channels, height, width]` for conv blocks, `[width]` for linear layers.
    pub output_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct ConvPlan {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    relu: bool,
    pool: usize,
    ph: usize,
    pw: usize,
    w_off: usize,
    b_off: usize,
}

impl ConvPlan {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.cout * self.ph * self.pw
    }
}

#[derive(Debug, Clone)]
struct LinearPlan {
    inp: usize,
    out: usize,
    hidden: bool,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone)]
struct Plan {
    convs: Vec<ConvPlan>,
    linears: Vec<LinearPlan>,
    num_params: usize,
}

impl Plan {
    fn new(arch: &Architecture) -> Result<Self, FgrnError> {
        let bad = |m: String| Err(FgrnError::InvalidArchitecture(m));
        if arch.input_height == 0 || arch.input_width == 0 || arch.input_channels == 0 {
            return bad("input dimensions must be positive".into());
        }
        if arch.outputs < 6 || !arch.outputs.is_multiple_of(3) {
            return bad(format!("outputs must be 3n with n >= 2, got {}", arch.outputs));
        }
        if !(0.0..1.0).contains(&arch.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", arch.dropout));
        }
        let (mut c, mut h, mut w) = (arch.input_channels, arch.input_height, arch.input_width);
        let mut off = 0;
        let mut convs = Vec::new();
        for (i, s) in arch.conv.iter().enumerate() {
            if s.out_channels == 0 || s.kernel == 0 || s.kernel % 2 == 0 || s.stride == 0 || s.pool == 0 {
                return bad(format!("conv block {i}: channels, stride and pool must be positive, kernel odd"));
            }
            let pad = s.kernel / 2;
            let ho = (h + 2 * pad - s.kernel) / s.stride + 1;
            let wo = (w + 2 * pad - s.kernel) / s.stride + 1;
            let (ph, pw) = (ho / s.pool, wo / s.pool);
            if ph == 0 || pw == 0 {
                return bad(format!("conv block {i}: pooling window {} exceeds {ho}x{wo}", s.pool));
            }
            let w_off = off;
            let b_off = w_off + s.out_channels * c * s.kernel * s.kernel;
            off = b_off + s.out_channels;
            convs.push(ConvPlan {
                cin: c,
                cout: s.out_channels,
                k: s.kernel,
                stride: s.stride,
                pad,
                h,
                w,
                ho,
                wo,
                relu: s.relu,
                pool: s.pool,
                ph,
                pw,
                w_off,
                b_off,
            });
            (c, h, w) = (s.out_channels, ph, pw);
        }
        let mut inp = c * h * w;
        let mut linears = Vec::new();
        let widths = arch.hidden.iter().map(|&x| (x, true)).chain([(arch.outputs, false)]);
        for (out, hidden) in widths {
            if out == 0 {
                return bad("linear widths must be positive".into());
            }
            let w_off = off;
            let b_off = w_off + out * inp;
            off = b_off + out;
            linears.push(LinearPlan { inp, out, hidden, w_off, b_off });
            inp = out;
        }
        Ok(Self { convs, linears, num_params: off })
    }

    fn shapes(&self) -> Vec<LayerShape> {
        let conv = self.convs.iter().map(|p| LayerShape {
            kind: "conv".into(),
            weight_shape: vec![p.cout, p.cin, p.k, p.k],
            bias_len: p.cout,
            output_shape: vec![p.cout, p.ph, p.pw],
        });
        let lin = self.linears.iter().map(|p| LayerShape {
            kind: "linear".into(),
            weight_shape: vec![p.out, p.inp],
            bias_len: p.out,
            output_shape: vec![p.out],
        });
        conv.chain(lin).collect()
    }

    /// `(fan_in, weight range, bias range)` per layer.
    fn blocks(&self) -> Vec<(usize, std::ops::Range<usize>, std::ops::Range<usize>)> {
        let conv = self.convs.iter().map(|p| (p.patch(), p.w_off..p.b_off, p.b_off..p.b_off + p.cout));
        let lin = self.linears.iter().map(|p| (p.inp, p.w_off..p.b_off, p.b_off..p.b_off + p.out));
        conv.chain(lin).collect()
    }
}

fn im2col(x: &[f64], p: &ConvPlan) -> Array2<f64> {
    let mut cols = Array2::zeros((p.patch(), p.ho * p.wo));
    for ci in 0..p.cin {
        let plane = &x[ci * p.h * p.w..(ci + 1) * p.h * p.w];
        for ky in 0..p.k {
            for kx in 0..p.k {
                let mut row = cols.row_mut((ci * p.k + ky) * p.k + kx);
                let row = row.as_slice_mut().expect("standard layout");
                for oy in 0..p.ho {
                    let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                    if iy < 0 || iy >= p.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * p.w..(iy as usize + 1) * p.w];
                    for ox in 0..p.wo {
                        let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                        if ix >= 0 && ix < p.w as isize {
                            row[oy * p.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, p: &ConvPlan) -> Vec<f64> {
    let mut x = vec![0.0; p.cin * p.h * p.w];
    for ci in 0..p.cin {
        let plane = &mut x[ci * p.h * p.w..(ci + 1) * p.h * p.w];
        for ky in 0..p.k {
            for kx in 0..p.k {
                let row = cols.row((ci * p.k + ky) * p.k + kx);
                for oy in 0..p.ho {
                    let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                    if iy < 0 || iy >= p.h as isize {
                        continue;
                    }
                    for ox in 0..p.wo {
                        let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                        if ix >= 0 && ix < p.w as isize {
                            plane[iy as usize * p.w + ix as usize] += row[oy * p.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

struct ConvCache {
    cols: Array2<f64>,
    pre: Array2<f64>,
    /// For each pooled output, the flat index of its maximum in `pre`.
    argmax: Vec<usize>,
}

struct Trace {
    conv: Vec<Vec<ConvCache>>,
    /// Input of each linear layer, `(batch, in)`.
    lin_in: Vec<Array2<f64>>,
    lin_pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    output: Array2<f64>,
}

/// Forward mode; training draws dropout masks from the given RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// Loss weights and nominal spacing (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub spacing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.1, spacing: 2.0 }
    }
}

/// Mean Huber penalty with unit threshold.
pub fn huber_loss(y: &[f64], yhat: &[f64]) -> f64 {
    assert_eq!(y.len(), yhat.len(), "huber_loss length mismatch");
    let sum: f64 = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| {
            let r = (a - b).abs();
            if r < 1.0 {
                0.5 * r * r
            } else {
                r - 0.5
            }
        })
        .sum();
    sum / y.len() as f64
}

/// Mean absolute deviation of consecutive gaps from `spacing`.
/// `yhat` is a flat `[x0, y0, z0, x1, ...]` list.
pub fn spacing_regularizer(yhat: &[f64], spacing: f64) -> f64 {
    assert!(yhat.len().is_multiple_of(3) && yhat.len() >= 6, "need at least two 3D points");
    let n = yhat.len() / 3;
    let pts: Vec<Vector3<f64>> = yhat.chunks_exact(3).map(Vector3::from_column_slice).collect();
    let sum: f64 = pts.windows(2).map(|w| ((w[1] - w[0]).norm() - spacing).abs()).sum();
    sum / (n - 1) as f64
}

pub fn total_loss(y: &[f64], yhat: &[f64], w: &LossWeights) -> f64 {
    let mut l = 0.0;
    if w.alpha != 0.0 {
        l += w.alpha * huber_loss(y, yhat);
    }
    if w.beta != 0.0 {
        l += w.beta * spacing_regularizer(yhat, w.spacing);
    }
    l
}

/// Gradient of [`total_loss`] with respect to `yhat`.
pub fn total_loss_gradient(y: &[f64], yhat: &[f64], w: &LossWeights) -> Vec<f64> {
    let m = y.len() as f64;
    let mut g: Vec<f64> = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| {
            let r = b - a;
            let d = if r.abs() < 1.0 { r } else { r.signum() };
            w.alpha * d / m
        })
        .collect();
    if w.beta != 0.0 {
        let n = yhat.len() / 3;
        let scale = w.beta / (n - 1) as f64;
        for i in 0..n - 1 {
            let a = Vector3::from_column_slice(&yhat[3 * i..3 * i + 3]);
            let b = Vector3::from_column_slice(&yhat[3 * i + 3..3 * i + 6]);
            let d = b - a;
            let len = d.norm();
            let dev = len - w.spacing;
            if len == 0.0 || dev == 0.0 {
                continue;
            }
            let step = d * (scale * dev.signum() / len);
            for k in 0..3 {
                g[3 * i + 3 + k] += step[k];
                g[3 * i + k] -= step[k];
            }
        }
    }
    g
}

/// Rasterizes a mask to a `[0, 1]` image, row-major.
pub fn mask_to_image(mask: &BinaryMask) -> Vec<f64> {
    mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FgrnModel {
    arch: Architecture,
    plan_params: usize,
    params: Vec<f64>,
}

impl FgrnModel {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, FgrnError> {
        let plan = Plan::new(&arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; plan.num_params];
        for (fan_in, w, _) in plan.blocks() {
            let bound = (1.0 / fan_in as f64).sqrt();
            for p in &mut params[w] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(Self { arch, plan_params: plan.num_params, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self, FgrnError> {
        let n = Plan::new(&arch)?.num_params;
        Ok(Self { arch, plan_params: n, params: vec![0.0; n] })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self, FgrnError> {
        let n = Plan::new(&arch)?.num_params;
        if params.len() != n {
            return Err(FgrnError::ShapeMismatch { expected: n, found: params.len() });
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(FgrnError::NonFiniteParameter(i));
        }
        Ok(Self { arch, plan_params: n, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.plan_params
    }

    /// `(weights, biases)` of parameterized layer `index`.
    pub fn layer(&self, index: usize) -> (&[f64], &[f64]) {
        let (_, w, b) = self.plan().blocks()[index].clone();
        (&self.params[w], &self.params[b])
    }

    pub fn layer_mut(&mut self, index: usize) -> (&mut [f64], &mut [f64]) {
        let (_, w, b) = self.plan().blocks()[index].clone();
        let (head, tail) = self.params.split_at_mut(b.start);
        (&mut head[w], &mut tail[..b.len()])
    }

    fn plan(&self) -> Plan {
        Plan::new(&self.arch).expect("validated at construction")
    }

    pub fn forward(&self, image: &[f64], mode: Mode<'_>) -> Result<Vec<f64>, FgrnError> {
        Ok(self.forward_batch(&[image], mode)?.row(0).to_vec())
    }

    /// Outputs as a `(batch, outputs)` matrix.
    pub fn forward_batch(&self, images: &[&[f64]], mode: Mode<'_>) -> Result<Array2<f64>, FgrnError> {
        Ok(self.trace(&self.plan(), images, mode)?.output)
    }

    fn trace(&self, plan: &Plan, images: &[&[f64]], mut mode: Mode<'_>) -> Result<Trace, FgrnError> {
        let expected = self.arch.input_len();
        for img in images {
            if img.len() != expected {
                return Err(FgrnError::ShapeMismatch { expected, found: img.len() });
            }
        }
        let p = &self.params;
        let mut conv = Vec::with_capacity(images.len());
        let feat = plan.linears[0].inp;
        let mut x = Array2::zeros((images.len(), feat));
        for (b, img) in images.iter().enumerate() {
            let mut act: Vec<f64> = img.to_vec();
            let mut caches = Vec::with_capacity(plan.convs.len());
            for c in &plan.convs {
                let cols = im2col(&act, c);
                let w = ArrayView2::from_shape((c.cout, c.patch()), &p[c.w_off..c.b_off]).expect("conv weights");
                let mut pre = w.dot(&cols);
                for (mut row, &bias) in pre.axis_iter_mut(Axis(0)).zip(&p[c.b_off..c.b_off + c.cout]) {
                    row += bias;
                }
                let plane = c.ho * c.wo;
                let pre_s = pre.as_slice().expect("standard layout");
                let relu = |v: f64| if c.relu && v <= 0.0 { 0.0 } else { v };
                let mut out = Vec::with_capacity(c.out_len());
                let mut argmax = Vec::with_capacity(c.out_len());
                for ch in 0..c.cout {
                    for py in 0..c.ph {
                        for px in 0..c.pw {
                            let mut best = f64::NEG_INFINITY;
                            let mut at = 0;
                            for dy in 0..c.pool {
                                for dx in 0..c.pool {
                                    let idx = ch * plane + (py * c.pool + dy) * c.wo + px * c.pool + dx;
                                    let v = relu(pre_s[idx]);
                                    if v > best {
                                        best = v;
                                        at = idx;
                                    }
                                }
                            }
                            out.push(best);
                            argmax.push(at);
                        }
                    }
                }
                caches.push(ConvCache { cols, pre, argmax });
                act = out;
            }
            x.row_mut(b).assign(&Array1::from(act));
            conv.push(caches);
        }
        let mut lin_in = Vec::new();
        let mut lin_pre = Vec::new();
        let mut masks = Vec::new();
        for l in &plan.linears {
            let w = ArrayView2::from_shape((l.out, l.inp), &p[l.w_off..l.b_off]).expect("linear weights");
            let bias = ndarray::ArrayView1::from(&p[l.b_off..l.b_off + l.out]);
            let z = x.dot(&w.t()) + bias;
            let mut a = if l.hidden { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            let mut mask = None;
            if let (true, Mode::Train(rng)) = (l.hidden && self.arch.dropout > 0.0, &mut mode) {
                let keep = 1.0 - self.arch.dropout;
                let m = Array2::from_shape_simple_fn(a.raw_dim(), || if rng.gen::<f64>() < self.arch.dropout { 0.0 } else { 1.0 / keep });
                a *= &m;
                mask = Some(m);
            }
            lin_in.push(std::mem::replace(&mut x, a));
            lin_pre.push(z);
            masks.push(mask);
        }
        Ok(Trace { conv, lin_in, lin_pre, masks, output: x })
    }

    /// Accumulates parameter gradients for a `(batch, outputs)` output gradient.
    fn backprop(&self, plan: &Plan, trace: &Trace, dout: Array2<f64>) -> Vec<f64> {
        let p = &self.params;
        let mut grad = vec![0.0; plan.num_params];
        let mut g = dout;
        for (i, l) in plan.linears.iter().enumerate().rev() {
            if let Some(m) = &trace.masks[i] {
                g *= m;
            }
            if l.hidden {
                g.zip_mut_with(&trace.lin_pre[i], |gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0
                    }
                });
            }
            {
                let (gw, gb) = grad[l.w_off..l.b_off + l.out].split_at_mut(l.b_off - l.w_off);
                let mut gw = ArrayViewMut2::from_shape((l.out, l.inp), gw).expect("linear grad");
                general_mat_mul(1.0, &g.t(), &trace.lin_in[i], 1.0, &mut gw);
                for (gbv, s) in gb.iter_mut().zip(g.sum_axis(Axis(0))) {
                    *gbv += s;
                }
            }
            let w = ArrayView2::from_shape((l.out, l.inp), &p[l.w_off..l.b_off]).expect("linear weights");
            g = g.dot(&w);
        }
        if plan.convs.is_empty() {
            return grad;
        }
        for (b, caches) in trace.conv.iter().enumerate() {
            let mut gout: Vec<f64> = g.row(b).to_vec();
            for (j, c) in plan.convs.iter().enumerate().rev() {
                let cache = &caches[j];
                let mut dz = Array2::<f64>::zeros((c.cout, c.ho * c.wo));
                {
                    let dzs = dz.as_slice_mut().expect("standard layout");
                    let pre = cache.pre.as_slice().expect("standard layout");
                    for (&at, &gv) in cache.argmax.iter().zip(&gout) {
                        if !c.relu || pre[at] > 0.0 {
                            dzs[at] += gv;
                        }
                    }
                }
                let (gw, gb) = grad[c.w_off..c.b_off + c.cout].split_at_mut(c.b_off - c.w_off);
                let mut gw = ArrayViewMut2::from_shape((c.cout, c.patch()), gw).expect("conv grad");
                general_mat_mul(1.0, &dz, &cache.cols.t(), 1.0, &mut gw);
                for (gbv, s) in gb.iter_mut().zip(dz.sum_axis(Axis(1))) {
                    *gbv += s;
                }
                if j > 0 {
                    let w = ArrayView2::from_shape((c.cout, c.patch()), &p[c.w_off..c.b_off]).expect("conv weights");
                    gout = col2im(&w.t().dot(&dz), c);
                }
            }
        }
        grad
    }

    /// Mean batch loss and its gradient. Passing `rng` enables dropout.
    pub fn loss_and_gradient(
        &self,
        images: &[&[f64]],
        targets: &[&[f64]],
        weights: &LossWeights,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(f64, Vec<f64>), FgrnError> {
        if images.len() != targets.len() {
            return Err(FgrnError::ShapeMismatch { expected: images.len(), found: targets.len() });
        }
        if let Some(t) = targets.iter().find(|t| t.len() != self.arch.outputs) {
            return Err(FgrnError::ShapeMismatch { expected: self.arch.outputs, found: t.len() });
        }
        let plan = self.plan();
        let mode = match rng {
            Some(r) => Mode::Train(r),
            None => Mode::Eval,
        };
        let trace = self.trace(&plan, images, mode)?;
        let scale = 1.0 / images.len() as f64;
        let mut loss = 0.0;
        let mut dout = Array2::zeros(trace.output.raw_dim());
        for (b, y) in targets.iter().enumerate() {
            let yhat = trace.output.row(b).to_vec();
            loss += total_loss(y, &yhat, weights) * scale;
            let g = total_loss_gradient(y, &yhat, weights);
            dout.row_mut(b).assign(&(Array1::from(g) * scale));
        }
        Ok((loss, self.backprop(&plan, &trace, dout)))
    }

    /// Gradient of the single-sample loss, no dropout.
    pub fn backward(&self, image: &[f64], y: &[f64], weights: &LossWeights) -> Result<Vec<f64>, FgrnError> {
        Ok(self.loss_and_gradient(&[image], &[y], weights, None)?.1)
    }

    /// Predicts body positions for a mask, refits and resamples them.
    pub fn predict_curve(&self, mask: &BinaryMask) -> Result<Curve3D, FgrnError> {
        let out = self.forward(&mask_to_image(mask), Mode::Eval)?;
        let raw = Curve3D::from_flat(&out, MM_PER_M)?;
        Ok(spline::smooth_resample(&raw, 0.0, self.arch.bodies())?)
    }

    pub fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor {
            format_version: MODEL_FORMAT_VERSION,
            architecture: self.arch.clone(),
            layers: self.plan().shapes(),
            num_params: self.plan_params,
        }
    }

    /// Writes the binary model and a JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<(), FgrnError> {
        let desc = serde_json::to_vec(&self.descriptor())?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(desc.len() as u32).to_le_bytes())?;
        out.write_all(&desc)?;
        out.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for v in &self.params {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        let mut side = serde_json::to_string_pretty(&self.descriptor())?;
        side.push('\n');
        std::fs::write(sidecar_path(path), side)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FgrnError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(FgrnError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != MODEL_FORMAT_VERSION {
            return Err(FgrnError::Format(format!("unsupported version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        let mut desc = vec![0u8; len];
        r.read_exact(&mut desc)?;
        let desc: ModelDescriptor = serde_json::from_slice(&desc)?;
        let mut count = [0u8; 8];
        r.read_exact(&mut count)?;
        let count = u64::from_le_bytes(count) as usize;
        let layers = desc.architecture.layers()?;
        if layers != desc.layers || count != desc.num_params {
            return Err(FgrnError::Format("descriptor does not match architecture".into()));
        }
        let mut params = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            params.push(f64::from_le_bytes(buf));
        }
        if r.read(&mut buf)? != 0 {
            return Err(FgrnError::Format("trailing bytes".into()));
        }
        Self::from_params(desc.architecture, params)
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// `model.bin` -> `model.bin.json`.
pub fn sidecar_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub format_version: u32,
    pub architecture: Architecture,
    pub layers: Vec<LayerShape>,
    pub num_params: usize,
}

/// NAdam hyperparameters (Nesterov momentum with a decaying schedule).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nadam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub momentum_decay: f64,
}

impl Default for Nadam {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, momentum_decay: 0.004 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub mu_product: f64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0, mu_product: 1.0 }
    }
}

impl Nadam {
    fn mu(&self, t: u64) -> f64 {
        self.beta1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * self.momentum_decay))
    }

    pub fn step(&self, params: &mut [f64], grads: &[f64], state: &mut OptimizerState) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
        assert_eq!(params.len(), state.m.len(), "optimizer state length differs");
        state.step += 1;
        let t = state.step;
        let mu = self.mu(t);
        let mu_next = self.mu(t + 1);
        state.mu_product *= mu;
        let c_grad = self.learning_rate * (1.0 - mu) / (1.0 - state.mu_product);
        let c_mom = self.learning_rate * mu_next / (1.0 - state.mu_product * mu_next);
        let bias2 = 1.0 - self.beta2.powf(t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
            let denom = (state.v[i] / bias2).sqrt() + self.epsilon;
            params[i] -= c_grad * g / denom + c_mom * state.m[i] / denom;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Nominal body spacing, mm.
    pub spacing: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout: f64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            spacing: 2.0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            dropout: 0.5,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FgrnError> {
        let bad = |m: &str| Err(FgrnError::InvalidConfig(m.into()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || (self.alpha == 0.0 && self.beta == 0.0) {
            return bad("alpha and beta must be nonnegative and not both zero");
        }
        if !(self.spacing > 0.0) {
            return bad("spacing must be positive");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("learning rate must be positive and decay rates in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta, spacing: self.spacing }
    }

    pub fn optimizer(&self) -> Nadam {
        Nadam {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            ..Nadam::default()
        }
    }
}

/// One image with its flat target in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub image: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn write_history_csv<W: Write>(history: &[EpochLoss], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,val_loss")?;
    for h in history {
        match h.val_loss {
            Some(v) => writeln!(out, "{},{},{}", h.epoch, h.train_loss, v)?,
            None => writeln!(out, "{},{},", h.epoch, h.train_loss)?,
        }
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: FgrnModel,
    pub history: Vec<EpochLoss>,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

/// Seeded split: returns `(train, validation)` example indices, each sorted.
pub fn split_indices(count: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let n_val = ((count as f64 * fraction).round() as usize).min(count.saturating_sub(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Mean eval-mode loss over `indices`.
pub fn evaluate_loss(model: &FgrnModel, examples: &[TrainingExample], indices: &[usize], weights: &LossWeights) -> Result<f64, FgrnError> {
    let mut total = 0.0;
    for chunk in indices.chunks(64) {
        let imgs: Vec<&[f64]> = chunk.iter().map(|&i| examples[i].image.as_slice()).collect();
        let out = model.forward_batch(&imgs, Mode::Eval)?;
        for (row, &i) in out.rows().into_iter().zip(chunk) {
            total += total_loss(&examples[i].target, &row.to_vec(), weights);
        }
    }
    Ok(total / indices.len() as f64)
}

/// Trains a fresh model of architecture `arch` (dropout from `config`).
pub fn train(examples: &[TrainingExample], arch: &Architecture, config: &TrainConfig) -> Result<TrainOutcome, FgrnError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(FgrnError::EmptyDataset);
    }
    let arch = Architecture { dropout: config.dropout, ..arch.clone() };
    let mut model = FgrnModel::new(arch, config.seed)?;
    for e in examples {
        if e.image.len() != model.arch.input_len() {
            return Err(FgrnError::ShapeMismatch { expected: model.arch.input_len(), found: e.image.len() });
        }
        if e.target.len() != model.arch.outputs {
            return Err(FgrnError::ShapeMismatch { expected: model.arch.outputs, found: e.target.len() });
        }
    }
    let (train_idx, val_idx) = split_indices(examples.len(), config.validation_fraction, config.seed);
    let weights = config.loss();
    let opt = config.optimizer();
    let mut state = OptimizerState::new(model.num_params());
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(3);
    info!(
        "training on {} examples ({} held out), {} parameters",
        train_idx.len(),
        val_idx.len(),
        model.num_params()
    );
    let mut history = Vec::with_capacity(config.epochs);
    let mut order = train_idx.clone();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let imgs: Vec<&[f64]> = chunk.iter().map(|&i| examples[i].image.as_slice()).collect();
            let tgts: Vec<&[f64]> = chunk.iter().map(|&i| examples[i].target.as_slice()).collect();
            let (loss, grad) = model.loss_and_gradient(&imgs, &tgts, &weights, Some(&mut dropout_rng))?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(FgrnError::NonFiniteLoss { epoch, batch });
            }
            opt.step(&mut model.params, &grad, &mut state);
            sum += loss * chunk.len() as f64;
            debug!("epoch {epoch} batch {batch} loss {loss:.6}");
        }
        let train_loss = sum / order.len() as f64;
        let val_loss = if val_idx.is_empty() { None } else { Some(evaluate_loss(&model, examples, &val_idx, &weights)?) };
        if val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(FgrnError::NonFiniteLoss { epoch, batch: 0 });
        }
        info!("epoch {epoch}: train {train_loss:.4}, validation {}", val_loss.map_or("-".into(), |v| format!("{v:.4}")));
        history.push(EpochLoss { epoch, train_loss, val_loss });
    }
    Ok(TrainOutcome { model, history, train_indices: train_idx, validation_indices: val_idx })
}
