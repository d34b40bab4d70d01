//! `foldctc` subcommands.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numerical failure (including a failed gradient check).

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::KeyValues;
use crate::data::{self, SyntheticTaskSpec, SPLITS};
use crate::error::{Error, Result};
use crate::metrics::{self, EditOp};
use crate::model::{self, ModelConfig, Variant};
use crate::training::{self, OptimizerState, TrainConfig, Trainer};

/// Nominal frame shift used to convert frames to audio seconds.
pub const FRAME_SHIFT_SECONDS: f64 = 0.01;

#[derive(Parser, Debug)]
#[command(name = "foldctc", version, about = "CTC speech recognition with folded self-conditioned encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset from a task spec file.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes per-epoch checkpoints, metrics.jsonl and avg.ckpt.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "train")]
        train_cfg: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from out/last.ckpt and out/last.opt.
        #[arg(long)]
        resume: bool,
    },
    /// Decode a split and print a JSON error-rate report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Decode-time repeats of the folded block (folded models only).
        #[arg(long)]
        repeat: Option<usize>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print per-component and total parameter counts.
    Params {
        #[arg(long)]
        model: PathBuf,
    },
    /// Token error rate for each decode-time repeat count, as TSV.
    SweepRepeats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated repeat counts.
        #[arg(long, default_value = "1,2,3,4,5,6")]
        repeats: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare backprop gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen { spec, out, force } => cmd_gen(&spec, &out, force).map(|_| 0),
        Command::Train {
            model,
            train_cfg,
            data,
            out,
            resume,
        } => cmd_train(&model, &train_cfg, &data, &out, resume).map(|_| 0),
        Command::Eval {
            checkpoint,
            data,
            repeat,
            split,
            output,
        } => {
            let report = cmd_eval(&checkpoint, &data, repeat, &split)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Data(format!("serializing report: {e}")))?;
            emit(output.as_deref(), &format!("{json}\n"))?;
            Ok(0)
        }
        Command::Params { model } => {
            let cfg = ModelConfig::from_kv(&KeyValues::read(&model)?)?;
            print!("{}", render_params(&params_breakdown(&cfg)?));
            Ok(0)
        }
        Command::SweepRepeats {
            checkpoint,
            data,
            repeats,
            split,
            output,
        } => {
            let repeats = parse_repeats(&repeats)?;
            let rows = cmd_sweep_repeats(&checkpoint, &data, &repeats, &split)?;
            emit(output.as_deref(), &render_sweep(&rows))?;
            Ok(0)
        }
        Command::Gradcheck {
            model,
            tolerance,
            samples,
            seed,
        } => {
            let cfg = ModelConfig::from_kv(&KeyValues::read(&model)?)?;
            let report = training::grad_check(&cfg, tolerance, samples, seed)?;
            println!(
                "{} variant={} checked={} max_rel_error={:.3e} worst={} tolerance={:e}",
                if report.passed { "PASS" } else { "FAIL" },
                report.variant,
                report.checked,
                report.max_rel_error,
                report.worst_parameter,
                report.tolerance
            );
            Ok(if report.passed { 0 } else { 3 })
        }
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_gen(spec_path: &Path, out: &Path, force: bool) -> Result<()> {
    let spec = SyntheticTaskSpec::from_kv(&KeyValues::read(spec_path)?)?;
    if out.exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} exists; pass --force to overwrite",
                out.display()
            )));
        }
        let feats = out.join("feats");
        if feats.exists() {
            fs::remove_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
        }
    }
    let data = data::generate_dataset(&spec)?;
    data::write_dataset(out, &data)?;
    fs::write(out.join("spec.txt"), spec.to_kv().render()).map_err(|e| Error::io(out, e))?;
    for name in SPLITS {
        println!("{name}\t{}", data.split(name)?.len());
    }
    Ok(())
}

fn epoch_path(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch{epoch:03}.ckpt"))
}

pub fn cmd_train(model_path: &Path, train_path: &Path, data_dir: &Path, out: &Path, resume: bool) -> Result<()> {
    let model_cfg = ModelConfig::from_kv(&KeyValues::read(model_path)?)?;
    let train_cfg = TrainConfig::from_kv(&KeyValues::read(train_path)?)?;
    let dataset = data::load_dataset(data_dir)?;
    if dataset.vocab.size_with_blank() != model_cfg.vocab_size {
        return Err(Error::Config(format!(
            "model vocab_size {} but dataset has {} classes with blank",
            model_cfg.vocab_size,
            dataset.vocab.size_with_blank()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join("metrics.jsonl");

    let mut trainer = if resume {
        let ck = Checkpoint::read(&out.join("last.ckpt"))?;
        if ck.model.config != model_cfg {
            return Err(Error::Config(
                "model config differs from the checkpoint being resumed".into(),
            ));
        }
        let opt = OptimizerState::read(&out.join("last.opt"))?;
        Trainer::resume(ck.model, train_cfg.clone(), opt)?
    } else {
        fs::write(&metrics_path, "").map_err(|e| Error::io(&metrics_path, e))?;
        let model = model::Model::build(model_cfg.clone(), train_cfg.seed)?;
        Trainer::new(model, train_cfg.clone())?
    };
    fs::write(out.join("model.cfg"), model_cfg.to_kv().render()).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("train.cfg"), train_cfg.to_kv().render()).map_err(|e| Error::io(out, e))?;

    trainer.run(&dataset.train, &dataset.valid, |t, record| {
        let ck = t.checkpoint(Some(record));
        ck.write(&epoch_path(out, record.epoch))?;
        ck.write(&out.join("last.ckpt"))?;
        t.opt.write(&out.join("last.opt"))?;
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        for line in t.drain_log() {
            writeln!(f, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        }
        eprintln!(
            "epoch {} step {} val_loss {:.4} val_ter {:.4}",
            record.epoch, t.opt.step, record.val_loss, record.val_ter
        );
        Ok(())
    })?;

    let paths: Vec<PathBuf> = (1..=trainer.opt.epoch)
        .map(|e| epoch_path(out, e))
        .filter(|p| p.exists())
        .collect();
    if paths.is_empty() {
        return Err(Error::Data("no epoch checkpoints to average".into()));
    }
    let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    let k = train_cfg.ckpt_average_k.min(refs.len());
    training::average_checkpoint_files(&refs, k)?.write(&out.join("avg.ckpt"))?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct UtteranceReport {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub ops: Vec<EditOp>,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_tokens: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub variant: String,
    /// Decode-time repeats; `None` for non-folded models.
    pub repeat: Option<usize>,
    pub utterances: Vec<UtteranceReport>,
    pub ter: f64,
    /// Equal to `ter`: tokens are the only unit.
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_tokens: usize,
    pub mean_loss: f64,
    pub decode_seconds: f64,
    pub audio_seconds: f64,
    pub frame_shift_seconds: f64,
    pub rtf: f64,
}

fn check_compatible(ck: &Checkpoint, dataset: &data::Dataset) -> Result<()> {
    let cfg = &ck.model.config;
    if cfg.vocab_size != dataset.vocab.size_with_blank() {
        return Err(Error::Config(format!(
            "checkpoint vocab_size {} does not match dataset ({} with blank)",
            cfg.vocab_size,
            dataset.vocab.size_with_blank()
        )));
    }
    let all = dataset.train.iter().chain(&dataset.valid).chain(&dataset.test);
    if let Some(u) = all.into_iter().find(|u| u.features.cols() != cfg.feat_dim) {
        return Err(Error::Config(format!(
            "utterance {} has feature dim {}, checkpoint expects {}",
            u.id,
            u.features.cols(),
            cfg.feat_dim
        )));
    }
    Ok(())
}

/// Evaluate an already loaded checkpoint on one split.
pub fn evaluate_report(
    ck: &Checkpoint,
    dataset: &data::Dataset,
    repeat: Option<usize>,
    split: &str,
) -> Result<EvalReport> {
    check_compatible(ck, dataset)?;
    let cfg = &ck.model.config;
    let repeat = match cfg.variant {
        Variant::Folded => {
            let r = repeat.unwrap_or(cfg.n_repeat_train);
            if r == 0 {
                return Err(Error::Config("--repeat must be ≥ 1".into()));
            }
            Some(r)
        }
        _ => None,
    };
    let utts = dataset.split(split)?;
    training::check_feasible(utts)?;
    let start = Instant::now();
    let (mean_loss, counts, decoded) = training::evaluate(&ck.model, utts, repeat)?;
    let decode_seconds = start.elapsed().as_secs_f64();
    let frames: usize = utts.iter().map(|u| u.features.rows()).sum();
    let audio_seconds = frames as f64 * FRAME_SHIFT_SECONDS;
    let utterances = utts
        .iter()
        .zip(&decoded)
        .map(|(u, d)| {
            let ops = metrics::align(u.transcript.ids(), d.hypothesis.ids());
            let c = metrics::count_ops(&ops, u.transcript.len());
            UtteranceReport {
                id: u.id.clone(),
                reference: dataset.vocab.render(&u.transcript),
                hypothesis: dataset.vocab.render(&d.hypothesis),
                ops,
                substitutions: c.substitutions,
                deletions: c.deletions,
                insertions: c.insertions,
                reference_tokens: c.reference,
            }
        })
        .collect();
    Ok(EvalReport {
        split: split.to_string(),
        variant: cfg.variant.to_string(),
        repeat,
        utterances,
        ter: counts.error_rate(),
        wer: counts.error_rate(),
        substitutions: counts.substitutions,
        deletions: counts.deletions,
        insertions: counts.insertions,
        reference_tokens: counts.reference,
        mean_loss,
        decode_seconds,
        audio_seconds,
        frame_shift_seconds: FRAME_SHIFT_SECONDS,
        rtf: if audio_seconds > 0.0 {
            decode_seconds / audio_seconds
        } else {
            0.0
        },
    })
}

pub fn cmd_eval(ck_path: &Path, data_dir: &Path, repeat: Option<usize>, split: &str) -> Result<EvalReport> {
    let ck = Checkpoint::read(ck_path)?;
    let dataset = data::load_dataset(data_dir)?;
    evaluate_report(&ck, &dataset, repeat, split)
}

pub fn params_breakdown(cfg: &ModelConfig) -> Result<Vec<(String, usize)>> {
    let mut rows = model::param_breakdown(cfg)?;
    let total = rows.iter().map(|(_, n)| n).sum();
    rows.push(("total".into(), total));
    Ok(rows)
}

pub fn render_params(rows: &[(String, usize)]) -> String {
    let mut s = String::from("component\tparams\n");
    for (name, n) in rows {
        s.push_str(&format!("{name}\t{n}\n"));
    }
    s
}

/// Sorted, de-duplicated repeat counts, all ≥ 1.
pub fn parse_repeats(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let r: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad repeat count `{part}`")))?;
        if r == 0 {
            return Err(Error::Config("repeat counts must be ≥ 1".into()));
        }
        out.push(r);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub repeat: usize,
    pub ter: f64,
    pub wer: f64,
    pub is_train_repeat: bool,
}

/// One row per requested repeat, plus the training repeat if absent.
pub fn sweep_repeats(
    ck: &Checkpoint,
    dataset: &data::Dataset,
    repeats: &[usize],
    split: &str,
) -> Result<Vec<SweepRow>> {
    let cfg = &ck.model.config;
    if cfg.variant != Variant::Folded {
        return Err(Error::Config(format!(
            "sweep-repeats needs a folded checkpoint, got {}",
            cfg.variant
        )));
    }
    let mut repeats = repeats.to_vec();
    if !repeats.contains(&cfg.n_repeat_train) {
        repeats.push(cfg.n_repeat_train);
    }
    repeats.sort_unstable();
    repeats.dedup();
    repeats
        .into_iter()
        .map(|r| {
            let report = evaluate_report(ck, dataset, Some(r), split)?;
            Ok(SweepRow {
                repeat: r,
                ter: report.ter,
                wer: report.wer,
                is_train_repeat: r == cfg.n_repeat_train,
            })
        })
        .collect()
}

pub fn cmd_sweep_repeats(ck_path: &Path, data_dir: &Path, repeats: &[usize], split: &str) -> Result<Vec<SweepRow>> {
    let ck = Checkpoint::read(ck_path)?;
    let dataset = data::load_dataset(data_dir)?;
    sweep_repeats(&ck, &dataset, repeats, split)
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::from("repeat\tter\twer\tis_train_repeat\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.repeat, r.ter, r.wer, r.is_train_repeat
        ));
    }
    s
}
