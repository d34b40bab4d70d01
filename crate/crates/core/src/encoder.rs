//! Conformer encoder layer and the convolutional subsampling frontend.
//!
//! Layer structure (pre-norm residual blocks, final post-norm):
//!
//! ```text
//! x = x + ½·FFN(LN(x))
//! x = x + MHSA(LN(x))
//! x = x + Conv(LN(x))
//! x = x + ½·FFN(LN(x))
//! y = LN(x)
//! ```
//!
//! Attention uses absolute sinusoidal positions added once after the
//! frontend, and the convolution module normalizes with layer norm.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            d_ff: 1024,
            n_heads: 4,
            conv_kernel: 15,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv_kernel {} must be odd",
                self.conv_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// How a freshly built parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on ±sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) fn linear_layout(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![d_in, d_out],
        init: Init::Xavier {
            fan_in: d_in,
            fan_out: d_out,
        },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![d_out],
        init: Init::Zeros,
    });
}

pub(crate) fn norm_layout(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.gain"),
        shape: vec![d],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![d],
        init: Init::Zeros,
    });
}

/// Output length of one 3×3 stride-2 unpadded convolution.
fn conv_out(n: usize) -> usize {
    (n - 1) / 2
}

/// Frames left after the frontend: `floor((floor((T−1)/2) − 1)/2)`.
pub fn subsampled_len(frames: usize) -> Option<usize> {
    (frames >= 7).then(|| conv_out(conv_out(frames)))
}

fn frontend_width(feat_dim: usize) -> Result<usize> {
    if feat_dim < 7 {
        return Err(Error::Config(format!(
            "feat_dim {feat_dim} too small for two stride-2 convolutions (need ≥ 7)"
        )));
    }
    Ok(conv_out(conv_out(feat_dim)))
}

pub fn frontend_layout(cfg: &EncoderConfig, feat_dim: usize) -> Result<Vec<ParamSpec>> {
    let d = cfg.d_model;
    let width = frontend_width(feat_dim)?;
    let mut out = Vec::new();
    out.push(ParamSpec {
        name: "frontend.conv1.weight".into(),
        shape: vec![9, d],
        init: Init::Xavier {
            fan_in: 9,
            fan_out: 9 * d,
        },
    });
    out.push(ParamSpec {
        name: "frontend.conv1.bias".into(),
        shape: vec![d],
        init: Init::Zeros,
    });
    out.push(ParamSpec {
        name: "frontend.conv2.weight".into(),
        shape: vec![9 * d, d],
        init: Init::Xavier {
            fan_in: 9 * d,
            fan_out: 9 * d,
        },
    });
    out.push(ParamSpec {
        name: "frontend.conv2.bias".into(),
        shape: vec![d],
        init: Init::Zeros,
    });
    linear_layout(&mut out, "frontend.proj", width * d, d);
    Ok(out)
}

fn ffn_layout(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &EncoderConfig) {
    norm_layout(out, &format!("{prefix}.norm"), cfg.d_model);
    linear_layout(out, &format!("{prefix}.linear1"), cfg.d_model, cfg.d_ff);
    linear_layout(out, &format!("{prefix}.linear2"), cfg.d_ff, cfg.d_model);
}

/// Parameters of one Conformer layer under `prefix`.
pub fn layer_layout(prefix: &str, cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    ffn_layout(&mut out, &format!("{prefix}.ffn1"), cfg);
    norm_layout(&mut out, &format!("{prefix}.attn.norm"), d);
    for proj in ["query", "key", "value", "out"] {
        linear_layout(&mut out, &format!("{prefix}.attn.{proj}"), d, d);
    }
    norm_layout(&mut out, &format!("{prefix}.conv.norm"), d);
    linear_layout(&mut out, &format!("{prefix}.conv.pointwise1"), d, 2 * d);
    out.push(ParamSpec {
        name: format!("{prefix}.conv.depthwise.weight"),
        shape: vec![cfg.conv_kernel, d],
        init: Init::Xavier {
            fan_in: cfg.conv_kernel,
            fan_out: cfg.conv_kernel,
        },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.conv.depthwise.bias"),
        shape: vec![d],
        init: Init::Zeros,
    });
    norm_layout(&mut out, &format!("{prefix}.conv.inner_norm"), d);
    linear_layout(&mut out, &format!("{prefix}.conv.pointwise2"), d, d);
    ffn_layout(&mut out, &format!("{prefix}.ffn2"), cfg);
    norm_layout(&mut out, &format!("{prefix}.final_norm"), d);
    out
}

pub fn linear(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn norm(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// Sinusoidal absolute position table: `sin` on even columns, `cos` on odd.
pub fn positional_encoding(t_len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; t_len * d_model];
    for pos in 0..t_len {
        for i in (0..d_model).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d_model as f64);
            data[pos * d_model + i] = angle.sin();
            if i + 1 < d_model {
                data[pos * d_model + i + 1] = angle.cos();
            }
        }
    }
    Tensor::matrix(t_len, d_model, data).expect("sized")
}

/// Two 3×3 stride-2 relu convolutions over the time × feature plane, a
/// per-frame projection to `d_model`, positions and dropout.
pub fn subsample_frontend(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    features: &Tensor,
) -> Result<Var> {
    let (t, d_in) = (features.rows(), features.cols());
    let t_out = subsampled_len(t).ok_or_else(|| {
        Error::Data(format!("{t} frames is too short for the frontend (need ≥ 7)"))
    })?;
    let w_out = frontend_width(d_in)?;
    let (t1, f1) = (conv_out(t), conv_out(d_in));
    let d = cfg.d_model;

    let plane = g.leaf(features.clone().reshaped(vec![t * d_in, 1])?);
    let cols = g.im2col(plane, t, d_in, 3, 2)?;
    let h = linear(g, store, "frontend.conv1", cols)?;
    let h = g.relu(h);
    let cols = g.im2col(h, t1, f1, 3, 2)?;
    let h = linear(g, store, "frontend.conv2", cols)?;
    let h = g.relu(h);
    let h = g.reshape(h, t_out, w_out * d)?;
    let h = linear(g, store, "frontend.proj", h)?;
    let pe = g.leaf(positional_encoding(t_out, d));
    let h = g.add(h, pe)?;
    g.dropout(h, cfg.dropout)
}

/// Scaled dot-product multi-head self-attention with output projection.
/// Also returns the per-head attention weight nodes.
pub fn mhsa_with_weights(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
) -> Result<(Var, Vec<Var>)> {
    let dk = cfg.d_model / cfg.n_heads;
    let q = linear(g, store, &format!("{prefix}.query"), x)?;
    let k = linear(g, store, &format!("{prefix}.key"), x)?;
    let v = linear(g, store, &format!("{prefix}.value"), x)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut weights = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let kh = g.transpose(kh);
        let vh = g.slice_cols(v, h * dk, dk)?;
        let scores = g.matmul(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        weights.push(attn);
        heads.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat_cols(&heads)?;
    let out = linear(g, store, &format!("{prefix}.out"), merged)?;
    Ok((out, weights))
}

pub fn mhsa(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
) -> Result<Var> {
    mhsa_with_weights(g, store, prefix, cfg, x).map(|(out, _)| out)
}

/// Pointwise → GLU → depthwise (same padding) → LN → swish → pointwise.
pub fn conv_module(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
) -> Result<Var> {
    let d = cfg.d_model;
    let h = linear(g, store, &format!("{prefix}.pointwise1"), x)?;
    let a = g.slice_cols(h, 0, d)?;
    let gate = g.slice_cols(h, d, d)?;
    let gate = g.sigmoid(gate);
    let h = g.mul(a, gate)?;
    let w = g.param(store, &format!("{prefix}.depthwise.weight"))?;
    let b = g.param(store, &format!("{prefix}.depthwise.bias"))?;
    let h = g.depthwise_conv1d(h, w, b)?;
    let h = norm(g, store, &format!("{prefix}.inner_norm"), h)?;
    let h = g.swish(h);
    linear(g, store, &format!("{prefix}.pointwise2"), h)
}

fn feed_forward(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
) -> Result<Var> {
    let h = norm(g, store, &format!("{prefix}.norm"), x)?;
    let h = linear(g, store, &format!("{prefix}.linear1"), h)?;
    let h = g.swish(h);
    let h = g.dropout(h, cfg.dropout)?;
    let h = linear(g, store, &format!("{prefix}.linear2"), h)?;
    g.dropout(h, cfg.dropout)
}

/// One Conformer layer, `T′ × d_model` in and out.
pub fn conformer_layer(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
) -> Result<Var> {
    let f = feed_forward(g, store, &format!("{prefix}.ffn1"), cfg, x)?;
    let f = g.scale(f, 0.5);
    let x = g.add(x, f)?;

    let h = norm(g, store, &format!("{prefix}.attn.norm"), x)?;
    let h = mhsa(g, store, &format!("{prefix}.attn"), cfg, h)?;
    let h = g.dropout(h, cfg.dropout)?;
    let x = g.add(x, h)?;

    let h = norm(g, store, &format!("{prefix}.conv.norm"), x)?;
    let h = conv_module(g, store, &format!("{prefix}.conv"), cfg, h)?;
    let h = g.dropout(h, cfg.dropout)?;
    let x = g.add(x, h)?;

    let f = feed_forward(g, store, &format!("{prefix}.ffn2"), cfg, x)?;
    let f = g.scale(f, 0.5);
    let x = g.add(x, f)?;

    norm(g, store, &format!("{prefix}.final_norm"), x)
}
