//! Tiny fully-convolutional per-pixel classifier.
//!
//! `conv3x3 → ReLU → conv3x3 → ReLU → conv1x1 head`, same padding, stride 1.
//! The post-ReLU output of the second convolution is the feature map used
//! for prototypes; it is exactly the head's input.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{decode_tensor, encode_tensor};
use crate::numeric::{ema_blend, Tensor};
use crate::scalar::Scalar;
use crate::seed;

pub const KERNEL_SIZE: usize = 3;
const CHECKPOINT_MAGIC: &[u8; 4] = b"SEGC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_kernel() -> usize {
    KERNEL_SIZE
}

impl SegNetConfig {
    pub fn new(in_channels: usize, hidden_channels: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            in_channels,
            hidden_channels,
            num_classes,
            kernel_size: KERNEL_SIZE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden_channels == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "segnet needs in_channels ≥ 1, hidden ≥ 1, classes ≥ 2; got {self:?}"
            )));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("at most 255 classes".into()));
        }
        if self.kernel_size != KERNEL_SIZE {
            return Err(Error::Config(format!(
                "only {KERNEL_SIZE}x{KERNEL_SIZE} kernels are supported"
            )));
        }
        Ok(())
    }

    /// Same architecture, ignoring the init seed.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.in_channels == other.in_channels
            && self.hidden_channels == other.hidden_channels
            && self.num_classes == other.num_classes
            && self.kernel_size == other.kernel_size
    }
}

/// Network weights. Gradients use the same container.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNetParams<T> {
    pub config: SegNetConfig,
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

pub const PARAM_NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "head.weight",
    "head.bias",
];

impl<T: Scalar> SegNetParams<T> {
    pub fn zeros(config: &SegNetConfig) -> Self {
        let (c, d, k) = (config.in_channels, config.hidden_channels, config.num_classes);
        Self {
            config: config.clone(),
            conv1_w: Tensor::zeros(&[d, c, KERNEL_SIZE, KERNEL_SIZE]),
            conv1_b: Tensor::zeros(&[d]),
            conv2_w: Tensor::zeros(&[d, d, KERNEL_SIZE, KERNEL_SIZE]),
            conv2_b: Tensor::zeros(&[d]),
            head_w: Tensor::zeros(&[k, d, 1, 1]),
            head_b: Tensor::zeros(&[k]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// (tensor index, offset) of a flat parameter index.
    pub fn locate(&self, mut index: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors().iter().enumerate() {
            if index < t.len() {
                return Some((i, index));
            }
            index -= t.len();
        }
        None
    }

    pub fn get_flat(&self, index: usize) -> T {
        let (t, o) = self.locate(index).expect("flat index in range");
        self.tensors()[t].data()[o]
    }

    pub fn set_flat(&mut self, index: usize, v: T) {
        let (t, o) = self.locate(index).expect("flat index in range");
        self.tensors_mut()[t].data_mut()[o] = v;
    }

    pub fn flat_name(&self, index: usize) -> String {
        match self.locate(index) {
            Some((t, o)) => format!("{}[{o}]", PARAM_NAMES[t]),
            None => format!("<out of range {index}>"),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> SegNetParams<U> {
        SegNetParams {
            config: self.config.clone(),
            conv1_w: self.conv1_w.cast(),
            conv1_b: self.conv1_b.cast(),
            conv2_w: self.conv2_w.cast(),
            conv2_b: self.conv2_b.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }
}

/// Seeded uniform weights in `±1/√fan_in`, zero biases.
pub fn init_params<T: Scalar>(config: &SegNetConfig) -> Result<SegNetParams<T>> {
    config.validate()?;
    let mut params = SegNetParams::zeros(config);
    let mut rng = seed::rng_for(config.seed, "segnet-init");
    let fan_ins = [
        config.in_channels * KERNEL_SIZE * KERNEL_SIZE,
        config.hidden_channels * KERNEL_SIZE * KERNEL_SIZE,
        config.hidden_channels,
    ];
    let weights = [
        &mut params.conv1_w,
        &mut params.conv2_w,
        &mut params.head_w,
    ];
    for (w, fan_in) in weights.into_iter().zip(fan_ins) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in w.data_mut() {
            *v = T::lit(rng.gen_range(-1.0..1.0) * bound);
        }
    }
    Ok(params)
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub input: Tensor<T>,
    pub pre1: Tensor<T>,
    pub act1: Tensor<T>,
    pub pre2: Tensor<T>,
    /// Post-ReLU conv2 output (`D×H×W`), the head input.
    pub features: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn height(&self) -> usize {
        self.input.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.input.shape()[2]
    }
}

fn conv3x3_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let n = h * w;
    let mut out = vec![T::zero(); c_out * n];
    for o in 0..c_out {
        let plane = &mut out[o * n..(o + 1) * n];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..c_in {
            let src = &input[c * n..(c + 1) * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[((o * c_in + c) * 3 + ky) * 3 + kx];
                    let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and, if requested, the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    dout: &[T],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    dweight: &mut [T],
    dbias: &mut [T],
    mut dinput: Option<&mut [T]>,
) {
    let n = h * w;
    for o in 0..c_out {
        let g = &dout[o * n..(o + 1) * n];
        dbias[o] += g.iter().copied().sum::<T>();
        for c in 0..c_in {
            let src = &input[c * n..(c + 1) * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wi = ((o * c_in + c) * 3 + ky) * 3 + kx;
                    let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let gr = &g[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (&a, &b) in gr.iter().zip(s) {
                            acc += a * b;
                        }
                    }
                    dweight[wi] += acc;
                    if let Some(din) = dinput.as_deref_mut() {
                        let wv = weight[wi];
                        let dplane = &mut din[c * n..(c + 1) * n];
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let gr = &g[y * w + x0..y * w + x1];
                            let d = &mut dplane[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (dv, &a) in d.iter_mut().zip(gr) {
                                *dv += wv * a;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn forward<T: Scalar>(params: &SegNetParams<T>, input: &Tensor<T>) -> Result<ForwardTrace<T>> {
    let cfg = &params.config;
    let &[c, h, w] = input.shape() else {
        return Err(Error::InvalidArgument(format!(
            "input must be C×H×W, got {:?}",
            input.shape()
        )));
    };
    if c != cfg.in_channels {
        return Err(Error::shape(&[cfg.in_channels, h, w], input.shape()));
    }
    let (d, k, n) = (cfg.hidden_channels, cfg.num_classes, h * w);
    let relu = |v: &Vec<T>| v.iter().map(|&x| x.max(T::zero())).collect::<Vec<T>>();

    let pre1 = conv3x3_forward(input.data(), params.conv1_w.data(), params.conv1_b.data(), c, d, h, w);
    let act1 = relu(&pre1);
    let pre2 = conv3x3_forward(&act1, params.conv2_w.data(), params.conv2_b.data(), d, d, h, w);
    let features = relu(&pre2);

    let hw = params.head_w.data();
    let mut logits = vec![T::zero(); k * n];
    for cls in 0..k {
        let out = &mut logits[cls * n..(cls + 1) * n];
        out.iter_mut().for_each(|v| *v = params.head_b.data()[cls]);
        for j in 0..d {
            let wv = hw[cls * d + j];
            for (o, &f) in out.iter_mut().zip(&features[j * n..(j + 1) * n]) {
                *o += wv * f;
            }
        }
    }

    Ok(ForwardTrace {
        input: input.clone(),
        pre1: Tensor::from_vec(&[d, h, w], pre1)?,
        act1: Tensor::from_vec(&[d, h, w], act1)?,
        pre2: Tensor::from_vec(&[d, h, w], pre2)?,
        features: Tensor::from_vec(&[d, h, w], features)?,
        logits: Tensor::from_vec(&[k, h, w], logits)?,
    })
}

/// Exact parameter gradients of a loss whose derivatives with respect to the
/// logits (and optionally directly to the feature map) are given.
pub fn backward<T: Scalar>(
    trace: &ForwardTrace<T>,
    params: &SegNetParams<T>,
    dlogits: &Tensor<T>,
    dfeatures: Option<&Tensor<T>>,
) -> Result<SegNetParams<T>> {
    let mut grads = SegNetParams::zeros(&params.config);
    accumulate_backward(trace, params, dlogits, dfeatures, &mut grads)?;
    Ok(grads)
}

/// [`backward`] that adds into an existing gradient container.
pub fn accumulate_backward<T: Scalar>(
    trace: &ForwardTrace<T>,
    params: &SegNetParams<T>,
    dlogits: &Tensor<T>,
    dfeatures: Option<&Tensor<T>>,
    grads: &mut SegNetParams<T>,
) -> Result<()> {
    let cfg = &params.config;
    let (c, d, k) = (cfg.in_channels, cfg.hidden_channels, cfg.num_classes);
    let (h, w) = (trace.height(), trace.width());
    let n = h * w;
    dlogits.expect_shape(&[k, h, w])?;
    if let Some(df) = dfeatures {
        df.expect_shape(&[d, h, w])?;
    }

    // Head.
    let g = dlogits.data();
    let feats = trace.features.data();
    let mut dfeat = match dfeatures {
        Some(df) => df.data().to_vec(),
        None => vec![T::zero(); d * n],
    };
    let hw = params.head_w.data();
    for cls in 0..k {
        let gc = &g[cls * n..(cls + 1) * n];
        grads.head_b.data_mut()[cls] += gc.iter().copied().sum::<T>();
        for j in 0..d {
            let fj = &feats[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for (&a, &b) in gc.iter().zip(fj) {
                acc += a * b;
            }
            grads.head_w.data_mut()[cls * d + j] += acc;
            let wv = hw[cls * d + j];
            for (df, &a) in dfeat[j * n..(j + 1) * n].iter_mut().zip(gc) {
                *df += wv * a;
            }
        }
    }

    // ReLU 2.
    for (v, &z) in dfeat.iter_mut().zip(trace.pre2.data()) {
        if z <= T::zero() {
            *v = T::zero();
        }
    }
    let mut dact1 = vec![T::zero(); d * n];
    conv3x3_backward(
        trace.act1.data(),
        params.conv2_w.data(),
        &dfeat,
        d,
        d,
        h,
        w,
        grads.conv2_w.data_mut(),
        grads.conv2_b.data_mut(),
        Some(&mut dact1),
    );

    // ReLU 1.
    for (v, &z) in dact1.iter_mut().zip(trace.pre1.data()) {
        if z <= T::zero() {
            *v = T::zero();
        }
    }
    conv3x3_backward(
        trace.input.data(),
        params.conv1_w.data(),
        &dact1,
        c,
        d,
        h,
        w,
        grads.conv1_w.data_mut(),
        grads.conv1_b.data_mut(),
        None,
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 6e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: SegNetParams<T>,
    pub v: SegNetParams<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: &SegNetConfig) -> Self {
        Self {
            m: SegNetParams::zeros(config),
            v: SegNetParams::zeros(config),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction. `lr`
/// overrides `cfg.lr` so callers can apply a schedule.
pub fn optimizer_step<T: Scalar>(
    params: &mut SegNetParams<T>,
    grads: &SegNetParams<T>,
    state: &mut AdamState<T>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be > 0")));
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr_t = T::lit(lr);
    let shrink = T::one() - lr_t * T::lit(cfg.weight_decay);
    let eps = T::lit(cfg.eps);
    let ps = params.tensors_mut();
    let gs = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        p.expect_shape(g.shape())?;
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv = *pv * shrink - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `teacher ← decay·teacher + (1−decay)·student`, tensor by tensor.
pub fn ema_update<T: Scalar>(
    teacher: &mut SegNetParams<T>,
    student: &SegNetParams<T>,
    decay: T,
) -> Result<()> {
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        *t = ema_blend(t, s, decay)?;
    }
    Ok(())
}

pub fn save_checkpoint(params: &SegNetParams<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&params.config)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in params.tensors() {
        encode_tensor(t, &mut buf);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SegNetParams<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads and verifies the architecture recorded in the header.
pub fn load_checkpoint_expect(
    path: impl AsRef<Path>,
    expected: &SegNetConfig,
) -> Result<SegNetParams<f64>> {
    let params = load_checkpoint(path)?;
    if !params.config.same_shape(expected) {
        return Err(Error::ConfigMismatch {
            expected: format!("{expected:?}"),
            found: format!("{:?}", params.config),
        });
    }
    Ok(params)
}

fn decode_checkpoint(bytes: &[u8]) -> Result<SegNetParams<f64>> {
    let ck = |m: String| Error::Checkpoint(m);
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ck("bad magic or truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ck(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header = bytes
        .get(12..12 + len)
        .ok_or_else(|| ck("truncated config header".into()))?;
    let config: SegNetConfig =
        serde_json::from_slice(header).map_err(|e| ck(format!("config header: {e}")))?;
    config.validate().map_err(|e| ck(e.to_string()))?;
    let mut params = SegNetParams::zeros(&config);
    let mut pos = 12 + len;
    for (i, t) in params.tensors_mut().into_iter().enumerate() {
        let decoded =
            decode_tensor(bytes, &mut pos).map_err(|e| ck(format!("{}: {e}", PARAM_NAMES[i])))?;
        if decoded.shape() != t.shape() {
            return Err(ck(format!(
                "{} has shape {:?}, expected {:?}",
                PARAM_NAMES[i],
                decoded.shape(),
                t.shape()
            )));
        }
        *t = decoded;
    }
    if pos != bytes.len() {
        return Err(ck("trailing bytes".into()));
    }
    Ok(params)
}
