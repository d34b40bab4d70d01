//! The four model variants: plain CTC, intermediate CTC, self-conditioned
//! CTC, and the base + folded encoder.
//!
//! Every variant shares one read-out (`readout.norm` then the `readout`
//! linear map to |V′| classes). Variants with feedback share one `feedback`
//! linear map from |V′| back to `d_model`. The folded variant allocates its
//! `N_f` folded layers once and applies the same storage on every repeat.

use std::fmt;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{join_list, KeyValues};
use crate::ctc::{self, Posteriorgram, TokenSequence};
use crate::encoder::{self, linear_layout, norm_layout, EncoderConfig, Init, ParamSpec};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Ctc,
    InterCtc,
    SelfCond,
    Folded,
}

impl Variant {
    pub fn has_feedback(self) -> bool {
        matches!(self, Variant::SelfCond | Variant::Folded)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc" => Ok(Variant::Ctc),
            "inter_ctc" => Ok(Variant::InterCtc),
            "self_cond" => Ok(Variant::SelfCond),
            "folded" => Ok(Variant::Folded),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected ctc, inter_ctc, self_cond or folded)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ctc => "ctc",
            Variant::InterCtc => "inter_ctc",
            Variant::SelfCond => "self_cond",
            Variant::Folded => "folded",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Depth of the non-folded variants.
    pub n_layers: usize,
    pub n_base: usize,
    pub n_folded: usize,
    pub n_repeat_train: usize,
    /// 1-based layer indices whose outputs get an intermediate prediction.
    pub inter_layers: Vec<usize>,
    pub inter_weight: f64,
    pub encoder: EncoderConfig,
    /// |V′|, blank included.
    pub vocab_size: usize,
    pub feat_dim: usize,
}

const MODEL_KEYS: &[&str] = &[
    "variant",
    "n_layers",
    "n_base",
    "n_folded",
    "n_repeat_train",
    "inter_layers",
    "inter_weight",
    "d_model",
    "d_ff",
    "n_heads",
    "conv_kernel",
    "dropout",
    "vocab_size",
    "feat_dim",
];

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Folded,
            n_layers: 18,
            n_base: 3,
            n_folded: 3,
            n_repeat_train: 6,
            inter_layers: vec![3, 6, 9, 12, 15],
            inter_weight: 0.5,
            encoder: EncoderConfig::default(),
            vocab_size: 501,
            feat_dim: 83,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must count the blank plus ≥ 1 token".into()));
        }
        if self.feat_dim < 7 {
            return Err(Error::Config(format!("feat_dim {} < 7", self.feat_dim)));
        }
        match self.variant {
            Variant::Folded => {
                if self.n_folded == 0 || self.n_repeat_train == 0 {
                    return Err(Error::Config("n_folded and n_repeat_train must be ≥ 1".into()));
                }
            }
            variant => {
                if self.n_layers == 0 {
                    return Err(Error::Config("n_layers must be ≥ 1".into()));
                }
                if variant != Variant::Ctc {
                    if self.inter_layers.is_empty() {
                        return Err(Error::Config(format!("{variant} needs inter_layers")));
                    }
                    if let Some(bad) = self
                        .inter_layers
                        .iter()
                        .find(|&&n| n == 0 || n >= self.n_layers)
                    {
                        return Err(Error::Config(format!(
                            "inter layer {bad} outside [1, {}]",
                            self.n_layers - 1
                        )));
                    }
                    if !(0.0..=1.0).contains(&self.inter_weight) {
                        return Err(Error::Config(format!(
                            "inter_weight {} outside [0, 1]",
                            self.inter_weight
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("variant", self.variant);
        kv.set("n_layers", self.n_layers);
        kv.set("n_base", self.n_base);
        kv.set("n_folded", self.n_folded);
        kv.set("n_repeat_train", self.n_repeat_train);
        kv.set("inter_layers", join_list(&self.inter_layers));
        kv.set("inter_weight", self.inter_weight);
        kv.set("d_model", self.encoder.d_model);
        kv.set("d_ff", self.encoder.d_ff);
        kv.set("n_heads", self.encoder.n_heads);
        kv.set("conv_kernel", self.encoder.conv_kernel);
        kv.set("dropout", self.encoder.dropout);
        kv.set("vocab_size", self.vocab_size);
        kv.set("feat_dim", self.feat_dim);
        kv
    }

    /// Missing keys take the defaults (paper-scale dimensions).
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_known(MODEL_KEYS)?;
        let d = Self::default();
        let cfg = Self {
            variant: kv.get_or::<String>("variant", d.variant.to_string())?.parse()?,
            n_layers: kv.get_or("n_layers", d.n_layers)?,
            n_base: kv.get_or("n_base", d.n_base)?,
            n_folded: kv.get_or("n_folded", d.n_folded)?,
            n_repeat_train: kv.get_or("n_repeat_train", d.n_repeat_train)?,
            inter_layers: kv.get_list_or("inter_layers", d.inter_layers)?,
            inter_weight: kv.get_or("inter_weight", d.inter_weight)?,
            encoder: EncoderConfig {
                d_model: kv.get_or("d_model", d.encoder.d_model)?,
                d_ff: kv.get_or("d_ff", d.encoder.d_ff)?,
                n_heads: kv.get_or("n_heads", d.encoder.n_heads)?,
                conv_kernel: kv.get_or("conv_kernel", d.encoder.conv_kernel)?,
                dropout: kv.get_or("dropout", d.encoder.dropout)?,
            },
            vocab_size: kv.get_or("vocab_size", d.vocab_size)?,
            feat_dim: kv.get_or("feat_dim", d.feat_dim)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    /// Number of CTC terms in the training loss.
    pub fn loss_terms(&self) -> usize {
        match self.variant {
            Variant::Ctc => 1,
            Variant::InterCtc | Variant::SelfCond => self.inter_layers.len() + 1,
            Variant::Folded => self.n_repeat_train,
        }
    }
}

fn layer_name(block: &str, i: usize) -> String {
    format!("{block}.{i:02}")
}

/// Every parameter the configuration allocates, in initialization order.
pub fn layout(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let enc = &cfg.encoder;
    let mut out = encoder::frontend_layout(enc, cfg.feat_dim)?;
    match cfg.variant {
        Variant::Folded => {
            for i in 0..cfg.n_base {
                out.extend(encoder::layer_layout(&layer_name("base", i), enc));
            }
            for i in 0..cfg.n_folded {
                out.extend(encoder::layer_layout(&layer_name("folded", i), enc));
            }
        }
        _ => {
            for i in 0..cfg.n_layers {
                out.extend(encoder::layer_layout(&layer_name("layers", i), enc));
            }
        }
    }
    norm_layout(&mut out, "readout.norm", enc.d_model);
    linear_layout(&mut out, "readout", enc.d_model, cfg.vocab_size);
    if cfg.variant.has_feedback() {
        linear_layout(&mut out, "feedback", cfg.vocab_size, enc.d_model);
    }
    Ok(out)
}

/// Allocate and initialize `layout` from one seeded stream.
pub fn init_store(layout: &[ParamSpec], seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for spec in layout {
        let value = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::full(&spec.shape, 1.0),
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..spec.numel())
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Tensor::new(spec.shape.clone(), data).expect("layout shape")
            }
        };
        store
            .insert(spec.name.clone(), value)
            .expect("layout names are unique");
    }
    store
}

pub fn build(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    Ok(init_store(&layout(cfg)?, seed))
}

/// Trainable scalars, each sharing group once.
pub fn count_params(store: &ParameterStore) -> usize {
    store.count_params()
}

/// Parameter totals grouped by top-level component, without allocating.
pub fn param_breakdown(cfg: &ModelConfig) -> Result<Vec<(String, usize)>> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for spec in layout(cfg)? {
        let group = spec.name.split('.').next().unwrap_or("").to_string();
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some((_, n)) => *n += spec.numel(),
            None => groups.push((group, spec.numel())),
        }
    }
    Ok(groups)
}

pub fn layout_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(layout(cfg)?.iter().map(ParamSpec::numel).sum())
}

/// One read-out: log-probabilities for CTC and probabilities for feedback.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub log_probs: Var,
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub predictions: Vec<Prediction>,
}

impl ForwardOutput {
    /// The prediction used for decoding.
    pub fn final_prediction(&self) -> Prediction {
        *self.predictions.last().expect("non-empty predictions")
    }
}

/// `Softmax(Linear(LN(x)))` through the model's single read-out.
pub fn project_vocab(g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Prediction> {
    let h = encoder::norm(g, store, "readout.norm", x)?;
    let logits = encoder::linear(g, store, "readout", h)?;
    Ok(Prediction {
        log_probs: g.log_softmax_rows(logits),
        probs: g.softmax_rows(logits),
    })
}

/// `x + Linear(z)` with `z` the posterior probabilities.
pub fn self_condition(g: &mut Graph, store: &ParameterStore, x: Var, z: Var) -> Result<Var> {
    let (tx, tz) = (g.value(x).rows(), g.value(z).rows());
    if tx != tz {
        return Err(Error::shape(
            "self_condition",
            format!("{tx} hidden frames vs {tz} posterior frames"),
        ));
    }
    let fb = encoder::linear(g, store, "feedback", z)?;
    g.add(x, fb)
}

/// Apply the named layers in order.
pub fn encoder_block(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    prefixes: &[String],
    mut x: Var,
) -> Result<Var> {
    for p in prefixes {
        x = encoder::conformer_layer(g, store, p, cfg, x)?;
    }
    Ok(x)
}

/// Frontend, `N_b` base layers, then `n_repeat` applications of the shared
/// folded block, each followed by a read-out and (except the last) feedback.
pub fn forward_folded(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &ModelConfig,
    features: &Tensor,
    n_repeat: usize,
) -> Result<ForwardOutput> {
    if cfg.variant != Variant::Folded {
        return Err(Error::Config(format!("forward_folded on {} model", cfg.variant)));
    }
    if n_repeat == 0 {
        return Err(Error::Config("n_repeat must be ≥ 1".into()));
    }
    let enc = &cfg.encoder;
    let base: Vec<String> = (0..cfg.n_base).map(|i| layer_name("base", i)).collect();
    let folded: Vec<String> = (0..cfg.n_folded).map(|i| layer_name("folded", i)).collect();
    let x = encoder::subsample_frontend(g, store, enc, features)?;
    let mut h = encoder_block(g, store, enc, &base, x)?;
    let mut predictions = Vec::with_capacity(n_repeat);
    for r in 1..=n_repeat {
        h = encoder_block(g, store, enc, &folded, h)?;
        let z = project_vocab(g, store, h)?;
        predictions.push(z);
        if r < n_repeat {
            h = self_condition(g, store, h, z.probs)?;
        }
    }
    Ok(ForwardOutput { predictions })
}

/// `N` distinct layers with intermediate read-outs at `inter_layers`
/// (and feedback for `self_cond`), then the final read-out.
pub fn forward_baseline(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &ModelConfig,
    features: &Tensor,
) -> Result<ForwardOutput> {
    if cfg.variant == Variant::Folded {
        return Err(Error::Config("forward_baseline on folded model".into()));
    }
    let enc = &cfg.encoder;
    let mut h = encoder::subsample_frontend(g, store, enc, features)?;
    let mut predictions = Vec::new();
    for n in 1..=cfg.n_layers {
        h = encoder::conformer_layer(g, store, &layer_name("layers", n - 1), enc, h)?;
        if cfg.variant != Variant::Ctc && n < cfg.n_layers && cfg.inter_layers.contains(&n) {
            let z = project_vocab(g, store, h)?;
            predictions.push(z);
            if cfg.variant == Variant::SelfCond {
                h = self_condition(g, store, h, z.probs)?;
            }
        }
    }
    predictions.push(project_vocab(g, store, h)?);
    Ok(ForwardOutput { predictions })
}

/// Variant-appropriate forward; `n_repeat` defaults to `n_repeat_train`
/// and is ignored by the baselines.
pub fn forward(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &ModelConfig,
    features: &Tensor,
    n_repeat: Option<usize>,
) -> Result<ForwardOutput> {
    match cfg.variant {
        Variant::Folded => forward_folded(
            g,
            store,
            cfg,
            features,
            n_repeat.unwrap_or(cfg.n_repeat_train),
        ),
        _ => forward_baseline(g, store, cfg, features),
    }
}

fn mean_ctc(g: &mut Graph, preds: &[Prediction], y: &TokenSequence) -> Result<Var> {
    let mut total: Option<Var> = None;
    for p in preds {
        let l = ctc::ctc_neg_log_likelihood(g, p.log_probs, y)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no predictions".into()))?;
    Ok(g.scale(total, 1.0 / preds.len() as f64))
}

/// Mean CTC loss over all repeated outputs.
pub fn loss_repeat(g: &mut Graph, out: &ForwardOutput, y: &TokenSequence) -> Result<Var> {
    mean_ctc(g, &out.predictions, y)
}

/// `(1 − w)·CTC(final) + w·mean(CTC(intermediate))`; plain CTC when the
/// output has no intermediate predictions.
pub fn loss_baseline(
    g: &mut Graph,
    out: &ForwardOutput,
    y: &TokenSequence,
    w: f64,
) -> Result<Var> {
    let (last, inter) = out
        .predictions
        .split_last()
        .ok_or_else(|| Error::Config("no predictions".into()))?;
    let final_loss = ctc::ctc_neg_log_likelihood(g, last.log_probs, y)?;
    if inter.is_empty() {
        return Ok(final_loss);
    }
    let inter_loss = mean_ctc(g, inter, y)?;
    let a = g.scale(final_loss, 1.0 - w);
    let b = g.scale(inter_loss, w);
    g.add(a, b)
}

pub fn loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    out: &ForwardOutput,
    y: &TokenSequence,
) -> Result<Var> {
    match cfg.variant {
        Variant::Folded => loss_repeat(g, out, y),
        _ => loss_baseline(g, out, y, cfg.inter_weight),
    }
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let store = build(&config, seed)?;
        Ok(Self { config, store })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        features: &Tensor,
        n_repeat: Option<usize>,
    ) -> Result<ForwardOutput> {
        forward(g, &self.store, &self.config, features, n_repeat)
    }

    /// Final posteriorgram in evaluation mode.
    pub fn posteriorgram(&self, features: &Tensor, n_repeat: Option<usize>) -> Result<Posteriorgram> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, features, n_repeat)?;
        Posteriorgram::from_log_probs(g.value(out.final_prediction().log_probs).clone())
    }

    /// Best-path transcript of the final prediction.
    pub fn decode(&self, features: &Tensor, n_repeat: Option<usize>) -> Result<TokenSequence> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, features, n_repeat)?;
        Ok(ctc::best_path_from_scores(
            g.value(out.final_prediction().log_probs),
        ))
    }

    /// Evaluation-mode training loss for one utterance.
    pub fn loss_value(&self, features: &Tensor, y: &TokenSequence) -> Result<f64> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, features, None)?;
        let l = loss(&mut g, &self.config, &out, y)?;
        Ok(g.value(l).data()[0])
    }

    pub fn count_params(&self) -> usize {
        self.store.count_params()
    }
}
