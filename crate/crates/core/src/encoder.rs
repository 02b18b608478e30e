//! Frame-wise 1-D convolutional embedding network with temporal statistics
//! pooling. Both the domain-aggregation network and every domain-specific
//! network use this topology.
//!
//! Layout conventions:
//! * input and layer activations are `T x C` matrices (time-major rows);
//! * conv weights are stored `[out, kernel, in]`;
//! * the projection weight is `[embed_dim, 2 * C_last]` applied to the
//!   pooled vector `[mean_0..mean_C, std_0..std_C]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, Tensor};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

const CHECKPOINT_MAGIC: &[u8; 4] = b"FDGW";

/// Added to the pooled variance so the std block stays differentiable on
/// constant sequences.
pub const POOL_STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel_width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub conv: Vec<ConvSpec>,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_channels: 8,
            conv: vec![
                ConvSpec {
                    out_channels: 16,
                    kernel_width: 3,
                },
                ConvSpec {
                    out_channels: 16,
                    kernel_width: 3,
                },
            ],
            embed_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::config("encoder needs at least one input channel"));
        }
        if self.conv.is_empty() {
            return Err(Error::config("encoder needs at least one conv layer"));
        }
        for (l, c) in self.conv.iter().enumerate() {
            if c.out_channels == 0 {
                return Err(Error::config(format!("conv{l} has zero output channels")));
            }
            if c.kernel_width % 2 == 0 {
                return Err(Error::config(format!(
                    "conv{l} kernel width {} must be odd",
                    c.kernel_width
                )));
            }
        }
        if self.embed_dim < 2 {
            return Err(Error::config("embed_dim must be at least 2"));
        }
        Ok(())
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.input_channels
        } else {
            self.conv[l - 1].out_channels
        }
    }

    pub fn last_channels(&self) -> usize {
        self.conv.last().map_or(0, |c| c.out_channels)
    }

    /// Length of the per-utterance style vector when every layer contributes.
    pub fn style_dim(&self) -> usize {
        2 * self.conv.iter().map(|c| c.out_channels).sum::<usize>()
    }

    fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::with_capacity(2 * self.conv.len() + 2);
        for (l, c) in self.conv.iter().enumerate() {
            shapes.push((
                format!("conv{l}.weight"),
                vec![c.out_channels, c.kernel_width, self.layer_input(l)],
            ));
            shapes.push((format!("conv{l}.bias"), vec![c.out_channels]));
        }
        shapes.push((
            "proj.weight".into(),
            vec![self.embed_dim, 2 * self.last_channels()],
        ));
        shapes.push(("proj.bias".into(), vec![self.embed_dim]));
        shapes
    }

    fn descriptor_header(&self) -> String {
        let mut s = format!("encoder v1\ninput_channels {}\n", self.input_channels);
        for c in &self.conv {
            s.push_str(&format!("conv {} {}\n", c.out_channels, c.kernel_width));
        }
        s.push_str(&format!("embed_dim {}\n", self.embed_dim));
        s
    }

    fn parse_header(lines: &[String]) -> Result<Self> {
        let mut it = lines.iter().map(String::as_str).filter(|l| !l.is_empty());
        if it.next() != Some("encoder v1") {
            return Err(Error::format("checkpoint descriptor is not `encoder v1`"));
        }
        let mut input_channels = None;
        let mut conv = Vec::new();
        let mut embed_dim = None;
        let num = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("malformed descriptor number"))
        };
        for line in it {
            let mut p = line.split_whitespace();
            match p.next() {
                Some("input_channels") => input_channels = Some(num(p.next())?),
                Some("conv") => conv.push(ConvSpec {
                    out_channels: num(p.next())?,
                    kernel_width: num(p.next())?,
                }),
                Some("embed_dim") => embed_dim = Some(num(p.next())?),
                _ => return Err(Error::format(format!("unknown descriptor line {line:?}"))),
            }
        }
        let cfg = EncoderConfig {
            input_channels: input_channels
                .ok_or_else(|| Error::format("descriptor lacks input_channels"))?,
            conv,
            embed_dim: embed_dim.ok_or_else(|| Error::format("descriptor lacks embed_dim"))?,
        };
        cfg.validate()
            .map_err(|e| Error::format(format!("descriptor config invalid: {e}")))?;
        Ok(cfg)
    }
}

/// Parameters of one encoder instance. Also used as the gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    tensors: Vec<Tensor>,
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let tensors = config
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                Tensor::new(name, shape, vec![0.0; n])
            })
            .collect();
        Self {
            config: config.clone(),
            tensors,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for t in &self.tensors {
            v.extend_from_slice(&t.data);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::usage(format!(
                "flat parameter vector has {} values, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &EncoderParams) {
        debug_assert_eq!(self.config, other.config);
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.values_mut() {
            *a *= alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|&v| v == 0.0)
    }

    fn conv_weight(&self, l: usize) -> &[f64] {
        &self.tensors[2 * l].data
    }

    fn conv_bias(&self, l: usize) -> &[f64] {
        &self.tensors[2 * l + 1].data
    }

    fn proj_weight(&self) -> &[f64] {
        &self.tensors[2 * self.config.conv.len()].data
    }

    fn proj_bias(&self) -> &[f64] {
        &self.tensors[2 * self.config.conv.len() + 1].data
    }

    fn tensor_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.tensors[idx].data
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(config: &EncoderConfig, rng: &mut Rng) -> Result<EncoderParams> {
    config.validate()?;
    let mut params = EncoderParams::zeros(config);
    let n_conv = config.conv.len();
    for l in 0..n_conv {
        let c = &config.conv[l];
        let fan_in = config.layer_input(l) * c.kernel_width;
        let fan_out = c.out_channels * c.kernel_width;
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in params.tensor_mut(2 * l) {
            *w = rng.uniform_range(-s, s);
        }
    }
    let s = (6.0 / (2 * config.last_channels() + config.embed_dim) as f64).sqrt();
    for w in params.tensor_mut(2 * n_conv) {
        *w = rng.uniform_range(-s, s);
    }
    Ok(params)
}

/// Intermediate values retained for backward and for style statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Post-rectifier activations, one `T x C_l` matrix per conv layer.
    pub layers: Vec<Matrix>,
    /// `[mean_0..mean_C, std_0..std_C]` of the last layer.
    pub pooled: Vec<f64>,
    pub embedding: Vec<f64>,
}

fn conv_relu(input: &Matrix, weight: &[f64], bias: &[f64], kernel: usize) -> Matrix {
    let t_len = input.rows();
    let c_in = input.cols();
    let c_out = bias.len();
    let pad = kernel / 2;
    let mut out = Matrix::zeros(t_len, c_out);
    for t in 0..t_len {
        let row = out.row_mut(t);
        row.copy_from_slice(bias);
        for k in 0..kernel {
            let Some(src) = (t + k).checked_sub(pad).filter(|&s| s < t_len) else {
                continue;
            };
            let x = input.row(src);
            for (o, acc) in row.iter_mut().enumerate() {
                let w = &weight[(o * kernel + k) * c_in..(o * kernel + k + 1) * c_in];
                *acc += crate::numerics::dot(w, x);
            }
        }
        for v in row.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    out
}

/// Per-channel temporal mean and population std (with [`POOL_STD_EPS`]).
pub fn temporal_stats(act: &Matrix) -> (Vec<f64>, Vec<f64>) {
    temporal_stats_eps(act, POOL_STD_EPS)
}

/// Per-channel temporal mean and `sqrt(var + eps)`, population variance.
pub fn temporal_stats_eps(act: &Matrix, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let t_len = act.rows() as f64;
    let c = act.cols();
    let mut mean = vec![0.0; c];
    for row in act.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= t_len;
    }
    let mut var = vec![0.0; c];
    for row in act.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| (s / t_len + eps).sqrt())
        .collect();
    (mean, std)
}

pub fn forward(
    params: &EncoderParams,
    x: &Matrix,
    keep_trace: bool,
) -> Result<(Vec<f64>, Option<ForwardTrace>)> {
    let cfg = &params.config;
    if x.rows() == 0 {
        return Err(Error::usage("input sequence has no frames"));
    }
    if x.cols() != cfg.input_channels {
        return Err(Error::usage(format!(
            "input has {} channels, encoder expects {}",
            x.cols(),
            cfg.input_channels
        )));
    }
    let mut layers: Vec<Matrix> = Vec::with_capacity(cfg.conv.len());
    for (l, spec) in cfg.conv.iter().enumerate() {
        let input = layers.last().unwrap_or(x);
        let act = conv_relu(
            input,
            params.conv_weight(l),
            params.conv_bias(l),
            spec.kernel_width,
        );
        layers.push(act);
    }
    let (mean, std) = temporal_stats(layers.last().expect("at least one layer"));
    let mut pooled = mean;
    pooled.extend(std);

    let w = params.proj_weight();
    let p = pooled.len();
    let embedding: Vec<f64> = params
        .proj_bias()
        .iter()
        .enumerate()
        .map(|(r, b)| b + crate::numerics::dot(&w[r * p..(r + 1) * p], &pooled))
        .collect();

    let trace = keep_trace.then(|| ForwardTrace {
        input: x.clone(),
        layers,
        pooled,
        embedding: embedding.clone(),
    });
    Ok((embedding, trace))
}

/// Accumulates the parameter gradient for one input into `grads`.
pub fn backward_into(
    params: &EncoderParams,
    trace: &ForwardTrace,
    upstream: &[f64],
    grads: &mut EncoderParams,
) -> Result<()> {
    let cfg = &params.config;
    if upstream.len() != cfg.embed_dim {
        return Err(Error::usage("upstream gradient length != embed_dim"));
    }
    if trace.layers.len() != cfg.conv.len() {
        return Err(Error::usage("trace layer count does not match encoder"));
    }
    if upstream.iter().all(|&g| g == 0.0) {
        return Ok(());
    }
    let n_conv = cfg.conv.len();
    let p = trace.pooled.len();
    let c_last = p / 2;

    // projection
    let w = params.proj_weight();
    {
        let gw = grads.tensor_mut(2 * n_conv);
        for (r, &g) in upstream.iter().enumerate() {
            for (dst, &pv) in gw[r * p..(r + 1) * p].iter_mut().zip(&trace.pooled) {
                *dst += g * pv;
            }
        }
    }
    for (dst, &g) in grads.tensor_mut(2 * n_conv + 1).iter_mut().zip(upstream) {
        *dst += g;
    }
    let mut d_pooled = vec![0.0; p];
    for (r, &g) in upstream.iter().enumerate() {
        for (dst, &wv) in d_pooled.iter_mut().zip(&w[r * p..(r + 1) * p]) {
            *dst += g * wv;
        }
    }

    // pooling
    let last = &trace.layers[n_conv - 1];
    let t_len = last.rows();
    let inv_t = 1.0 / t_len as f64;
    let (mean, std) = trace.pooled.split_at(c_last);
    let mut d_act = Matrix::zeros(t_len, c_last);
    for t in 0..t_len {
        let a = last.row(t);
        let da = d_act.row_mut(t);
        for c in 0..c_last {
            da[c] = inv_t * (d_pooled[c] + d_pooled[c_last + c] * (a[c] - mean[c]) / std[c]);
        }
    }

    // conv layers, last to first
    for l in (0..n_conv).rev() {
        let act = &trace.layers[l];
        let input = if l == 0 {
            &trace.input
        } else {
            &trace.layers[l - 1]
        };
        let kernel = cfg.conv[l].kernel_width;
        let pad = kernel / 2;
        let c_in = input.cols();
        // rectifier mask
        for (g, &a) in d_act.data_mut().iter_mut().zip(act.data()) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        let weight = params.conv_weight(l);
        let mut d_input = (l > 0).then(|| Matrix::zeros(t_len, c_in));
        {
            let gw = grads.tensor_mut(2 * l);
            for t in 0..t_len {
                let dz = d_act.row(t);
                for k in 0..kernel {
                    let Some(src) = (t + k).checked_sub(pad).filter(|&s| s < t_len) else {
                        continue;
                    };
                    let x = input.row(src);
                    for (o, &g) in dz.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let base = (o * kernel + k) * c_in;
                        for (dst, &xv) in gw[base..base + c_in].iter_mut().zip(x) {
                            *dst += g * xv;
                        }
                    }
                    if let Some(di) = d_input.as_mut() {
                        let drow = di.row_mut(src);
                        for (o, &g) in dz.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let base = (o * kernel + k) * c_in;
                            for (dst, &wv) in drow.iter_mut().zip(&weight[base..base + c_in]) {
                                *dst += g * wv;
                            }
                        }
                    }
                }
            }
        }
        {
            let gb = grads.tensor_mut(2 * l + 1);
            for t in 0..t_len {
                for (dst, &g) in gb.iter_mut().zip(d_act.row(t)) {
                    *dst += g;
                }
            }
        }
        if let Some(di) = d_input {
            d_act = di;
        }
    }
    Ok(())
}

/// Parameter gradient of a batch, accumulated in input order.
pub fn backward(
    params: &EncoderParams,
    traces: &[&ForwardTrace],
    upstream: &[Vec<f64>],
) -> Result<EncoderParams> {
    if traces.len() != upstream.len() {
        return Err(Error::usage(format!(
            "{} traces for {} upstream gradients",
            traces.len(),
            upstream.len()
        )));
    }
    let mut grads = params.zeros_like();
    for (trace, g) in traces.iter().zip(upstream) {
        backward_into(params, trace, g, &mut grads)?;
    }
    Ok(grads)
}

fn checkpoint_descriptor(params: &EncoderParams, extras: &[Tensor]) -> String {
    let mut desc = params.config.descriptor_header();
    for t in params.tensors.iter().chain(extras) {
        desc.push_str(&container::tensor_line(t));
        desc.push('\n');
    }
    desc
}

/// Serializes params plus optional extra tensors (e.g. a scoring head).
pub fn encode_checkpoint(params: &EncoderParams, extras: &[Tensor]) -> Vec<u8> {
    let desc = checkpoint_descriptor(params, extras);
    let payload: Vec<f64> = params
        .tensors
        .iter()
        .chain(extras)
        .flat_map(|t| t.data.iter().copied())
        .collect();
    container::encode(CHECKPOINT_MAGIC, &desc, &payload)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(EncoderParams, Vec<Tensor>)> {
    let (desc, payload) = container::decode(CHECKPOINT_MAGIC, bytes)?;
    let (header, mut tensors) = container::split_tensors(&desc, &payload)?;
    let config = EncoderConfig::parse_header(&header)?;
    let expected = config.tensor_shapes();
    if tensors.len() < expected.len() {
        return Err(Error::format("checkpoint is missing encoder tensors"));
    }
    let extras = tensors.split_off(expected.len());
    for ((name, shape), t) in expected.iter().zip(&tensors) {
        if &t.name != name || &t.shape != shape {
            return Err(Error::format(format!(
                "tensor {} {:?} does not match config ({} {:?})",
                t.name, t.shape, name, shape
            )));
        }
    }
    Ok((EncoderParams { config, tensors }, extras))
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    save_checkpoint_with(params, &[], path)
}

pub fn save_checkpoint_with(params: &EncoderParams, extras: &[Tensor], path: &Path) -> Result<()> {
    container::write_file(path, &encode_checkpoint(params, extras))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    Ok(load_checkpoint_with(path)?.0)
}

pub fn load_checkpoint_with(path: &Path) -> Result<(EncoderParams, Vec<Tensor>)> {
    decode_checkpoint(&container::read_file(path)?)
}

/// Loads a checkpoint and rejects it unless it was written for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &EncoderConfig) -> Result<EncoderParams> {
    let params = load_checkpoint(path)?;
    if params.config() != expected {
        return Err(Error::format(format!(
            "checkpoint config {:?} does not match expected {:?}",
            params.config(),
            expected
        )));
    }
    Ok(params)
}
