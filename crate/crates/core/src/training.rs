//! Adam with the Noam schedule, the epoch loop, validation, checkpoint
//! averaging and the finite-difference gradient check.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::checkpoint::{Archive, Checkpoint, OPTIMIZER_MAGIC};
use crate::config::KeyValues;
use crate::ctc::{self, TokenSequence};
use crate::data::{self, SpecAugment, Utterance};
use crate::encoder::subsampled_len;
use crate::error::{Error, Result};
use crate::metrics::{self, EditCounts};
use crate::model::{self, Model, ModelConfig};
use crate::params::ParameterStore;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub warmup_steps: usize,
    pub lr_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ckpt_average_k: usize,
    /// Global-norm threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub spec_augment: SpecAugment,
}

const TRAIN_KEYS: &[&str] = &[
    "beta1",
    "beta2",
    "adam_epsilon",
    "warmup_steps",
    "lr_factor",
    "epochs",
    "batch_size",
    "seed",
    "ckpt_average_k",
    "grad_clip",
    "time_masks",
    "time_width",
    "freq_masks",
    "freq_width",
];

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            adam_epsilon: 1e-9,
            warmup_steps: 25_000,
            lr_factor: 1.0,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            ckpt_average_k: 10,
            grad_clip: Some(5.0),
            spec_augment: SpecAugment::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be ≥ 1".into());
        }
        if self.ckpt_average_k == 0 {
            return bad("ckpt_average_k must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.adam_epsilon > 0.0) || !(self.lr_factor > 0.0) {
            return bad("adam_epsilon and lr_factor must be > 0".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be > 0 or `none`"));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_epsilon", self.adam_epsilon);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("lr_factor", self.lr_factor);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        kv.set("ckpt_average_k", self.ckpt_average_k);
        match self.grad_clip {
            Some(c) => kv.set("grad_clip", c),
            None => kv.set("grad_clip", "none"),
        }
        kv.set("time_masks", self.spec_augment.n_time_masks);
        kv.set("time_width", self.spec_augment.time_width);
        kv.set("freq_masks", self.spec_augment.n_freq_masks);
        kv.set("freq_width", self.spec_augment.freq_width);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_known(TRAIN_KEYS)?;
        let d = Self::default();
        let grad_clip = match kv.raw("grad_clip") {
            None => d.grad_clip,
            Some("none") => None,
            Some(_) => Some(kv.get::<f64>("grad_clip")?),
        };
        let cfg = Self {
            beta1: kv.get_or("beta1", d.beta1)?,
            beta2: kv.get_or("beta2", d.beta2)?,
            adam_epsilon: kv.get_or("adam_epsilon", d.adam_epsilon)?,
            warmup_steps: kv.get_or("warmup_steps", d.warmup_steps)?,
            lr_factor: kv.get_or("lr_factor", d.lr_factor)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            seed: kv.get_or("seed", d.seed)?,
            ckpt_average_k: kv.get_or("ckpt_average_k", d.ckpt_average_k)?,
            grad_clip,
            spec_augment: SpecAugment {
                n_time_masks: kv.get_or("time_masks", 0)?,
                time_width: kv.get_or("time_width", 0)?,
                n_freq_masks: kv.get_or("freq_masks", 0)?,
                freq_width: kv.get_or("freq_width", 0)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }
}

/// `factor · d^−½ · min(step^−½, step · warmup^−3⁄2)`.
pub fn noam_lr(step: usize, d_model: usize, warmup: usize, factor: f64) -> Result<f64> {
    if step == 0 || warmup == 0 {
        return Err(Error::Config("noam_lr needs step ≥ 1 and warmup ≥ 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: usize,
    /// Completed epochs, for resuming.
    pub epoch: usize,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: BTreeMap<String, Tensor> = store
            .iter()
            .map(|(n, p)| (n.to_string(), Tensor::zeros(p.value.shape())))
            .collect();
        Self {
            step: 0,
            epoch: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut kv = KeyValues::new();
        kv.set("step", self.step);
        kv.set("epoch", self.epoch);
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (prefix, map) in [("m.", &self.first), ("v.", &self.second)] {
            tensors.extend(map.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
        }
        Archive {
            header: kv.render(),
            tensors,
        }
        .encode(OPTIMIZER_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let archive = Archive::decode(bytes, OPTIMIZER_MAGIC)?;
        let kv = KeyValues::parse(&archive.header)?;
        kv.check_known(&["step", "epoch"])?;
        let mut state = Self {
            step: kv.get("step")?,
            epoch: kv.get("epoch")?,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        };
        for (name, t) in archive.tensors {
            if let Some(n) = name.strip_prefix("m.") {
                state.first.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("v.") {
                state.second.insert(n.to_string(), t);
            } else {
                return Err(Error::Data(format!("unexpected optimizer tensor `{name}`")));
            }
        }
        Ok(state)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::binio::read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::binio::write_file(path, &self.to_bytes()?)
    }

    /// Moment shapes must equal the parameter shapes.
    pub fn check_matches(&self, store: &ParameterStore) -> Result<()> {
        for map in [&self.first, &self.second] {
            if map.len() != store.len() {
                return Err(Error::Config("optimizer state does not match the model".into()));
            }
            for (name, p) in store.iter() {
                match map.get(name) {
                    Some(t) if t.shape() == p.value.shape() => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "optimizer state lacks a matching moment for `{name}`"
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// One Adam update with bias correction, after optional global-norm
/// clipping. Gradients are zeroed afterwards. Returns the pre-clip norm.
pub fn adam_step(
    store: &mut ParameterStore,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let norm = store.grad_norm();
    if !norm.is_finite() {
        return Err(Error::Numerical(format!("gradient norm is {norm}")));
    }
    let scale = match cfg.grad_clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in store.iter_mut() {
        let m = state
            .first
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no optimizer moment for `{name}`")))?;
        let v = state
            .second
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no optimizer moment for `{name}`")))?;
        let (m, v) = (m.data_mut(), v.data_mut());
        let grads = p.grad.data();
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = grads[i] * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            values[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_epsilon);
        }
    }
    store.zero_grad();
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// CTC terms in the loss.
    pub terms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_loss: f64,
    pub val_ter: f64,
}

/// Per-utterance decoding result.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub loss: f64,
    pub hypothesis: TokenSequence,
}

/// Evaluation-mode loss and best-path hypothesis with `n_repeat` repeats.
pub fn decode_utterance(model: &Model, utt: &Utterance, n_repeat: Option<usize>) -> Result<Decoded> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &utt.features, n_repeat)?;
    let loss = model::loss(&mut g, &model.config, &out, &utt.transcript)
        .map_err(|e| with_id(e, &utt.id))?;
    let loss = g.value(loss).data()[0];
    let hypothesis = ctc::best_path_from_scores(g.value(out.final_prediction().log_probs));
    Ok(Decoded { loss, hypothesis })
}

/// Mean loss and corpus token-error counts over `utts`, in input order.
pub fn evaluate(
    model: &Model,
    utts: &[Utterance],
    n_repeat: Option<usize>,
) -> Result<(f64, EditCounts, Vec<Decoded>)> {
    let decoded: Vec<Decoded> = utts
        .par_iter()
        .map(|u| decode_utterance(model, u, n_repeat))
        .collect::<Result<_>>()?;
    let mut counts = EditCounts::default();
    for (u, d) in utts.iter().zip(&decoded) {
        counts.merge(&metrics::edit_counts(u.transcript.ids(), d.hypothesis.ids()));
    }
    let mean = decoded.iter().map(|d| d.loss).sum::<f64>() / decoded.len().max(1) as f64;
    Ok((mean, counts, decoded))
}

fn with_id(e: Error, id: &str) -> Error {
    match e {
        Error::InfeasibleTarget { required, available } => Error::Data(format!(
            "utterance {id}: infeasible target, needs {required} frames after subsampling, has {available}"
        )),
        Error::Numerical(m) => Error::Numerical(format!("utterance {id}: {m}")),
        other => other,
    }
}

/// Every utterance must survive subsampling with a feasible target.
pub fn check_feasible(utts: &[Utterance]) -> Result<()> {
    for u in utts {
        let available = subsampled_len(u.features.rows()).unwrap_or(0);
        let required = ctc::min_alignment_length(&u.transcript);
        if required > available || available == 0 {
            return Err(Error::Data(format!(
                "utterance {}: infeasible target, needs {required} frames after subsampling, has {available}",
                u.id
            )));
        }
    }
    Ok(())
}

/// Owns the model, optimizer state and pending log lines.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub opt: OptimizerState,
    log: Vec<String>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = OptimizerState::new(&model.store);
        Ok(Self {
            model,
            cfg,
            opt,
            log: Vec::new(),
        })
    }

    pub fn resume(model: Model, cfg: TrainConfig, opt: OptimizerState) -> Result<Self> {
        cfg.validate()?;
        opt.check_matches(&model.store)?;
        Ok(Self {
            model,
            cfg,
            opt,
            log: Vec::new(),
        })
    }

    /// JSON lines produced since the last call.
    pub fn drain_log(&mut self) -> Vec<String> {
        std::mem::take(&mut self.log)
    }

    fn push_log<T: Serialize>(&mut self, record: &T) {
        self.log
            .push(serde_json::to_string(record).expect("records serialize"));
    }

    /// Batches of utterance indices for a 1-based epoch.
    pub fn batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.cfg.seed, &[2, epoch as u64]));
        order.shuffle(&mut rng);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Forward, backward and one Adam update on `batch`; returns the mean loss.
    pub fn step(&mut self, utts: &[Utterance], batch: &[usize], epoch: usize) -> Result<f64> {
        let step = self.opt.step + 1;
        let model = &self.model;
        let aug = self.cfg.spec_augment;
        let base = self.cfg.seed;
        let results: Vec<(f64, Vec<(String, Tensor)>)> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let u = &utts[i];
                let stream = seed::derive(base, &[3, step as u64, slot as u64]);
                let features = if aug.is_identity() {
                    u.features.clone()
                } else {
                    data::spec_augment(&u.features, &aug, seed::derive(stream, &[0]))?
                };
                let mut g = Graph::training(seed::derive(stream, &[1]));
                let out = model.forward(&mut g, &features, None)?;
                let loss = model::loss(&mut g, &model.config, &out, &u.transcript)
                    .map_err(|e| with_id(e, &u.id))?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::Numerical(format!("utterance {}: loss is {value}", u.id)));
                }
                let grads = g.gradients(loss)?;
                let named = g
                    .params()
                    .iter()
                    .filter_map(|(n, v)| grads.get(*v).map(|t| (n.clone(), t.clone())))
                    .collect();
                Ok((value, named))
            })
            .collect::<Result<_>>()?;

        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (loss, named) in results {
            total += loss;
            for (name, mut t) in named {
                t.scale_assign(scale);
                self.model.store.get_mut(&name)?.grad.add_assign(&t);
            }
        }
        let lr = noam_lr(
            step,
            self.model.config.encoder.d_model,
            self.cfg.warmup_steps,
            self.cfg.lr_factor,
        )?;
        adam_step(&mut self.model.store, &mut self.opt, lr, &self.cfg)?;
        let loss = total * scale;
        let record = StepRecord {
            step,
            epoch,
            lr,
            loss,
            terms: self.model.config.loss_terms(),
        };
        self.push_log(&record);
        Ok(loss)
    }

    /// One pass over `train` followed by validation on `valid`.
    pub fn run_epoch(&mut self, train: &[Utterance], valid: &[Utterance]) -> Result<EpochRecord> {
        let epoch = self.opt.epoch + 1;
        for batch in self.batches(train.len(), epoch) {
            self.step(train, &batch, epoch)?;
        }
        self.opt.epoch = epoch;
        let (val_loss, counts, _) = if valid.is_empty() {
            (f64::NAN, EditCounts::default(), Vec::new())
        } else {
            evaluate(&self.model, valid, None)?
        };
        let record = EpochRecord {
            epoch,
            val_loss,
            val_ter: counts.error_rate(),
        };
        self.push_log(&record);
        Ok(record)
    }

    /// Train until `cfg.epochs` epochs are complete, calling `on_epoch`
    /// after each.
    pub fn run(
        &mut self,
        train: &[Utterance],
        valid: &[Utterance],
        mut on_epoch: impl FnMut(&mut Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        check_feasible(train)?;
        check_feasible(valid)?;
        while self.opt.epoch < self.cfg.epochs {
            let record = self.run_epoch(train, valid)?;
            on_epoch(self, &record)?;
        }
        Ok(())
    }

    /// Checkpoint of the current parameters with training metadata.
    pub fn checkpoint(&self, record: Option<&EpochRecord>) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone())
            .with_meta("epoch", self.opt.epoch)
            .with_meta("step", self.opt.step);
        if let Some(r) = record {
            ck = ck
                .with_meta("val_loss", r.val_loss)
                .with_meta("val_ter", r.val_ter);
        }
        ck
    }
}

/// Result of a full in-memory training run.
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<String>,
}

/// Train from a fresh initialization seeded by `train_cfg.seed`, keeping
/// every epoch checkpoint in memory.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[Utterance],
    valid_set: &[Utterance],
) -> Result<TrainOutcome> {
    let model = Model::build(model_cfg.clone(), train_cfg.seed)?;
    let mut trainer = Trainer::new(model, train_cfg.clone())?;
    let mut checkpoints = Vec::new();
    let mut log = Vec::new();
    trainer.run(train_set, valid_set, |t, r| {
        checkpoints.push(t.checkpoint(Some(r)));
        log.extend(t.drain_log());
        Ok(())
    })?;
    Ok(TrainOutcome {
        model: trainer.model,
        checkpoints,
        log,
    })
}

/// Element-wise mean of the `k` checkpoints with the lowest validation loss.
pub fn average_checkpoints(checkpoints: &[Checkpoint], k: usize) -> Result<Checkpoint> {
    if k == 0 {
        return Err(Error::Config("k must be ≥ 1".into()));
    }
    if checkpoints.len() < k {
        return Err(Error::Config(format!(
            "need {k} checkpoints to average, have {}",
            checkpoints.len()
        )));
    }
    let first = &checkpoints[0];
    let mut ranked: Vec<(f64, &Checkpoint)> = Vec::with_capacity(checkpoints.len());
    for (i, c) in checkpoints.iter().enumerate() {
        if c.model.config != first.model.config || !c.model.store.same_layout(&first.model.store) {
            return Err(Error::Config(format!(
                "checkpoint {i} has a different model configuration"
            )));
        }
        let v = c
            .meta_f64("val_loss")
            .filter(|v| !v.is_nan())
            .ok_or_else(|| Error::Config(format!("checkpoint {i} has no validation loss")))?;
        ranked.push((v, c));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let chosen: Vec<&Checkpoint> = ranked.iter().take(k).map(|(_, c)| *c).collect();
    let mut store = chosen[0].model.store.clone();
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in &names {
        let mut acc = Tensor::zeros(store.value(name)?.shape());
        for c in &chosen {
            acc.add_assign(c.model.store.value(name)?);
        }
        acc.scale_assign(1.0 / k as f64);
        // A single checkpoint is returned bit-for-bit.
        if k > 1 {
            store.get_mut(name)?.value = acc;
        }
    }
    store.zero_grad();
    let epochs: Vec<String> = chosen
        .iter()
        .map(|c| c.meta.get("epoch").cloned().unwrap_or_default())
        .collect();
    let mut out = Checkpoint::new(Model {
        config: first.model.config.clone(),
        store,
    })
    .with_meta("averaged", k)
    .with_meta("averaged_epochs", epochs.join(","));
    if k == 1 {
        out.meta = chosen[0].meta.clone();
    }
    Ok(out)
}

pub fn average_checkpoint_files(paths: &[&Path], k: usize) -> Result<Checkpoint> {
    let cks: Vec<Checkpoint> = paths
        .iter()
        .map(|p| Checkpoint::read(p))
        .collect::<Result<_>>()?;
    average_checkpoints(&cks, k)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub variant: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub tolerance: f64,
    pub passed: bool,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Denominator floor for the relative error of near-zero gradients.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central differences on `samples` randomly chosen scalars (all of them if
/// fewer) of a freshly initialized model, against backprop.
pub fn grad_check(cfg: &ModelConfig, tolerance: f64, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let model = Model::build(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[4]));
    let target: Vec<usize> = if cfg.vocab_size > 2 { vec![1, 2] } else { vec![1] };
    let y = TokenSequence::new(target)?;
    let needed = ctc::min_alignment_length(&y);
    let frames = (12..)
        .find(|&t| subsampled_len(t).is_some_and(|n| n >= needed))
        .expect("some length suffices");
    let data = (0..frames * cfg.feat_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let x = Tensor::matrix(frames, cfg.feat_dim, data)?;

    let loss_at = |store: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = model::forward(&mut g, store, cfg, &x, None)?;
        let l = model::loss(&mut g, cfg, &out, &y)?;
        Ok(g.value(l).data()[0])
    };

    let mut store = model.store.clone();
    {
        let mut g = Graph::new();
        let out = model::forward(&mut g, &store, cfg, &x, None)?;
        let l = model::loss(&mut g, cfg, &out, &y)?;
        g.backward(l, &mut store)?;
    }

    let positions: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(n, p)| (0..p.value.len()).map(move |i| (n.to_string(), i)))
        .collect();
    let chosen: Vec<usize> = if positions.len() <= samples {
        (0..positions.len()).collect()
    } else {
        let mut idx = rand::seq::index::sample(&mut rng, positions.len(), samples).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut worst = (0.0f64, String::new());
    let mut probe = model.store.clone();
    for &c in &chosen {
        let (name, i) = &positions[c];
        let original = probe.value(name)?.data()[*i];
        let mut eval = |delta: f64| -> Result<f64> {
            probe.get_mut(name)?.value.data_mut()[*i] = original + delta;
            loss_at(&probe)
        };
        let plus = eval(GRAD_CHECK_STEP)?;
        let minus = eval(-GRAD_CHECK_STEP)?;
        probe.get_mut(name)?.value.data_mut()[*i] = original;
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        let analytic = store.grad(name)?.data()[*i];
        let rel = (analytic - numeric).abs()
            / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if !rel.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for {name}[{i}]")));
        }
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, format!("{name}[{i}]"));
        }
    }
    Ok(GradCheckReport {
        variant: cfg.variant.to_string(),
        checked: chosen.len(),
        max_rel_error: worst.0,
        worst_parameter: worst.1,
        tolerance,
        passed: worst.0 < tolerance,
    })
}
