//! Acceptance suite: one PASS/FAIL line per criterion on stdout.
//!
//! Runs without the libtest harness so the lines appear in plain
//! `cargo test` output. Exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{random_matrix, toy};
use foldctc::autodiff::{Graph, Var};
use foldctc::checkpoint::Checkpoint;
use foldctc::ctc::{self, Posteriorgram, TokenSequence};
use foldctc::data::{self, SyntheticTaskSpec};
use foldctc::encoder;
use foldctc::model::{self, Model, ModelConfig, Variant};
use foldctc::params::ParameterStore;
use foldctc::tensor::Tensor;
use foldctc::training::{self, TrainConfig, Trainer};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_foldctc");

// Pinned tolerances and budgets.
const PARAM_REL_TOL: f64 = 0.05;
const PARAM_RATIO: (f64, f64) = (0.36, 0.40);
const PARAM_BUDGET: Duration = Duration::from_secs(1);
const ORACLE_INSTANCES: usize = 500;
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_BUDGET: Duration = Duration::from_secs(30);
const COMPLETENESS_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SAMPLES: usize = 200;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const DESK_TER: f64 = 0.10;
const DESK_MAX_EPOCHS: usize = 30;
const DESK_BUDGET: Duration = Duration::from_secs(15 * 60);
const OVERFIT_MAX_EPOCHS: usize = 60;
const SWEEP_SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`foldctc {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

fn write(path: &Path, text: &str) -> String {
    fs::write(path, text).expect("write config");
    path.to_str().expect("utf-8 path").to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

// 1 ──────────────────────────────────────────────────────────────────────────

fn paper_cfg_text(variant: &str, n_base: usize, n_folded: usize) -> String {
    format!(
        "variant={variant}\nn_layers=18\nn_base={n_base}\nn_folded={n_folded}\nn_repeat_train=6\n\
         d_model=256\nd_ff=1024\nn_heads=4\nconv_kernel=15\nvocab_size=501\nfeat_dim=83\n"
    )
}

fn parameter_counts(dir: &Path) -> Outcome {
    let start = Instant::now();
    let cases = [
        ("ctc", "ctc", 0, 0, 30.5e6),
        ("inter_ctc", "inter_ctc", 0, 0, 30.5e6),
        ("self_cond", "self_cond", 0, 0, 30.6e6),
        ("folded(0,3)", "folded", 0, 3, 6.8e6),
        ("folded(3,3)", "folded", 3, 3, 11.6e6),
        ("folded(6,3)", "folded", 6, 3, 16.3e6),
    ];
    let mut totals = Vec::new();
    let mut parts = Vec::new();
    for (label, variant, nb, nf, target) in cases {
        let cfg = write(&dir.join(format!("{label}.cfg")), &paper_cfg_text(variant, nb, nf));
        let table = cli(&["params", "--model", &cfg])?;
        let total: f64 = table
            .lines()
            .find_map(|l| l.strip_prefix("total\t"))
            .ok_or("no total row")?
            .parse()
            .map_err(|_| "bad total")?;
        let rel = (total - target) / target;
        check(
            rel.abs() <= PARAM_REL_TOL,
            format!("{label}: {total} vs {target} ({:+.1}%)", 100.0 * rel),
        )?;
        parts.push(format!("{label} {:.2}M ({:+.1}%)", total / 1e6, 100.0 * rel));
        totals.push((label, total));
    }
    let get = |l: &str| totals.iter().find(|(k, _)| *k == l).map(|(_, v)| *v).unwrap();
    let ratio = get("folded(3,3)") / get("self_cond");
    check(
        (PARAM_RATIO.0..=PARAM_RATIO.1).contains(&ratio),
        format!("ratio {ratio:.3} outside {PARAM_RATIO:?}"),
    )?;
    let elapsed = start.elapsed();
    check(elapsed < PARAM_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!("{}; folded(3,3)/self_cond = {ratio:.3}; {elapsed:.2?}", parts.join(", ")))
}

// 2 ──────────────────────────────────────────────────────────────────────────

fn random_posteriorgram(rng: &mut ChaCha8Rng, t: usize, classes: usize) -> Posteriorgram {
    let mut probs = Vec::with_capacity(t * classes);
    for _ in 0..t {
        let row: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
        let sum: f64 = row.iter().sum();
        probs.extend(row.iter().map(|p| p / sum));
    }
    Posteriorgram::from_probs(&Tensor::matrix(t, classes, probs).unwrap()).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < ORACLE_INSTANCES {
        let t = rng.random_range(1..=6);
        let v = rng.random_range(1..=3);
        let l = rng.random_range(0..=3);
        let y = TokenSequence::new((0..l).map(|_| rng.random_range(1..=v)).collect()).unwrap();
        if ctc::min_alignment_length(&y) > t {
            continue;
        }
        let z = random_posteriorgram(&mut rng, t, v + 1);
        let dp = ctc::ctc_loss(&z, &y).map_err(|e| e.to_string())?;
        let brute = ctc::brute_force_ctc(&z, &y).map_err(|e| e.to_string())?;
        worst = worst.max((dp - brute).abs());
        done += 1;
    }
    check(worst < ORACLE_TOL, format!("max |DP − brute| = {worst:e}"))?;
    let elapsed = start.elapsed();
    check(elapsed < ORACLE_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!("{done} instances, max |DP − brute| = {worst:.1e}, {elapsed:.2?}"))
}

// 3 ──────────────────────────────────────────────────────────────────────────

fn all_sequences(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for tok in 1..=v {
                let mut e: Vec<usize> = s.clone();
                e.push(tok);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn probability_completeness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for t in 1..=4 {
        for v in 1..=2 {
            for _ in 0..5 {
                let z = random_posteriorgram(&mut rng, t, v + 1);
                let mut total = 0.0;
                for y in all_sequences(v, t) {
                    let y = TokenSequence::new(y).unwrap();
                    total += match ctc::ctc_loss(&z, &y) {
                        Ok(nll) => (-nll).exp(),
                        Err(foldctc::Error::InfeasibleTarget { .. }) => 0.0,
                        Err(e) => return Err(e.to_string()),
                    };
                }
                worst = worst.max((total - 1.0).abs());
                cases += 1;
            }
        }
    }
    check(worst < COMPLETENESS_TOL, format!("max |Σ P − 1| = {worst:e}"))?;
    Ok(format!("{cases} posteriorgrams, max |Σ_y P(y|Z) − 1| = {worst:.1e}"))
}

// 4 ──────────────────────────────────────────────────────────────────────────

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    for variant in [Variant::Ctc, Variant::InterCtc, Variant::SelfCond, Variant::Folded] {
        let r = training::grad_check(&toy(variant), GRAD_TOL, GRAD_SAMPLES, 1).map_err(|e| e.to_string())?;
        check(
            r.passed && r.checked >= GRAD_SAMPLES.min(Model::build(toy(variant), 1).unwrap().count_params()),
            format!("{variant}: max rel err {:e} at {}", r.max_rel_error, r.worst_parameter),
        )?;
        parts.push(format!("{variant} {:.1e}", r.max_rel_error));
    }
    let elapsed = start.elapsed();
    check(elapsed < GRAD_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!("max rel err: {}; {elapsed:.2?}", parts.join(", ")))
}

// 5 ──────────────────────────────────────────────────────────────────────────

fn lp(g: &Graph, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|&v| g.value(v).clone()).collect()
}

fn sharing_invariants() -> Outcome {
    // Count independent of repeats.
    let mut counts = Vec::new();
    for r in [1, 3, 6, 12] {
        let mut cfg = common::paper(Variant::Folded, 3, 3);
        cfg.n_repeat_train = r;
        counts.push(model::layout_count(&cfg).map_err(|e| e.to_string())?);
    }
    check(counts.windows(2).all(|w| w[0] == w[1]), format!("counts vary: {counts:?}"))?;

    // Shared block vs. unshared copies with feedback.
    let mut cfg = toy(Variant::Folded);
    cfg.n_folded = 2;
    let store = model::build(&cfg, 11).unwrap();
    let x = random_matrix(28, 8, 12);
    let repeats = 3;
    let mut g = Graph::new();
    let out = model::forward_folded(&mut g, &store, &cfg, &x, repeats).unwrap();
    let shared = lp(&g, &out.predictions.iter().map(|p| p.log_probs).collect::<Vec<_>>());
    let mut copies = store.clone();
    let folded: Vec<String> = store.names().filter(|n| n.starts_with("folded.")).map(String::from).collect();
    for r in 0..repeats {
        for n in &folded {
            copies.insert(format!("copy{r}.{n}"), store.value(n).unwrap().clone()).unwrap();
        }
    }
    let mut g2 = Graph::new();
    let h0 = encoder::subsample_frontend(&mut g2, &copies, &cfg.encoder, &x).unwrap();
    let mut h = encoder::conformer_layer(&mut g2, &copies, "base.00", &cfg.encoder, h0).unwrap();
    let mut unshared = Vec::new();
    for r in 0..repeats {
        for j in 0..cfg.n_folded {
            h = encoder::conformer_layer(&mut g2, &copies, &format!("copy{r}.folded.{j:02}"), &cfg.encoder, h).unwrap();
        }
        let z = model::project_vocab(&mut g2, &copies, h).unwrap();
        unshared.push(z.log_probs);
        if r + 1 < repeats {
            h = model::self_condition(&mut g2, &copies, h, z.probs).unwrap();
        }
    }
    check(shared == lp(&g2, &unshared), "shared and unshared forwards differ")?;

    // Zero-feedback reductions.
    let zero = |s: &mut ParameterStore| {
        s.get_mut("feedback.weight").unwrap().value.fill(0.0);
        s.get_mut("feedback.bias").unwrap().value.fill(0.0);
    };
    let sc = toy(Variant::SelfCond);
    let inter = ModelConfig { variant: Variant::InterCtc, ..sc.clone() };
    let mut s_sc = model::build(&sc, 13).unwrap();
    zero(&mut s_sc);
    let mut ga = Graph::new();
    let a = model::forward_baseline(&mut ga, &s_sc, &sc, &x).unwrap();
    let mut gb = Graph::new();
    let b = model::forward_baseline(&mut gb, &s_sc, &inter, &x).unwrap();
    check(
        lp(&ga, &a.predictions.iter().map(|p| p.log_probs).collect::<Vec<_>>())
            == lp(&gb, &b.predictions.iter().map(|p| p.log_probs).collect::<Vec<_>>()),
        "self_cond with zero feedback differs from inter_ctc",
    )?;

    let fcfg = toy(Variant::Folded);
    let mut s_f = model::build(&fcfg, 14).unwrap();
    zero(&mut s_f);
    let mut gf = Graph::new();
    let f = model::forward_folded(&mut gf, &s_f, &fcfg, &x, 4).unwrap();
    let mut gu = Graph::new();
    let h0 = encoder::subsample_frontend(&mut gu, &s_f, &fcfg.encoder, &x).unwrap();
    let mut h = encoder::conformer_layer(&mut gu, &s_f, "base.00", &fcfg.encoder, h0).unwrap();
    let mut plain = Vec::new();
    for _ in 0..4 {
        h = encoder::conformer_layer(&mut gu, &s_f, "folded.00", &fcfg.encoder, h).unwrap();
        plain.push(model::project_vocab(&mut gu, &s_f, h).unwrap().log_probs);
    }
    check(
        lp(&gf, &f.predictions.iter().map(|p| p.log_probs).collect::<Vec<_>>()) == lp(&gu, &plain),
        "folded with zero feedback differs from the unconditioned repeat",
    )?;
    Ok(format!(
        "count {} for repeats 1/3/6/12; shared ≡ unshared over {repeats} repeats; both zero-feedback reductions exact",
        counts[0]
    ))
}

// 6 & 7 ──────────────────────────────────────────────────────────────────────

const DESK_SPEC: &str = "vocab_size=8\nfeat_dim=20\ntokens_per_utt=3,8\nframes_per_token=6,10\n\
noise_std=0.3\nprototype_seed=7\nn_train=300\nn_valid=50\nn_test=50\n";

const DESK_MODEL: &str = "variant=folded\nn_base=1\nn_folded=1\nn_repeat_train=3\nd_model=32\n\
d_ff=64\nn_heads=2\nconv_kernel=7\ndropout=0.1\nvocab_size=9\nfeat_dim=20\n";

fn desk_train_cfg(seed: u64) -> String {
    format!(
        "warmup_steps=300\nlr_factor=1.0\nepochs={DESK_MAX_EPOCHS}\nbatch_size=8\nseed={seed}\n\
         ckpt_average_k=5\ngrad_clip=5.0\n"
    )
}

struct Desk {
    dir: PathBuf,
    data: PathBuf,
    model_cfg: String,
}

impl Desk {
    fn new(dir: &Path) -> Result<Self, String> {
        let spec = write(&dir.join("desk_spec.txt"), DESK_SPEC);
        let data = dir.join("desk_data");
        cli(&["gen", "--spec", &spec, "--out", s(&data)])?;
        Ok(Self {
            dir: dir.to_path_buf(),
            data,
            model_cfg: write(&dir.join("desk_model.cfg"), DESK_MODEL),
        })
    }

    /// Train with `seed`; returns the averaged checkpoint path.
    fn train(&self, seed: u64) -> Result<PathBuf, String> {
        let out = self.dir.join(format!("desk_run{seed}"));
        if !out.join("avg.ckpt").exists() {
            let tc = write(&self.dir.join(format!("desk_train{seed}.cfg")), &desk_train_cfg(seed));
            cli(&["train", "--model", &self.model_cfg, "--train", &tc, "--data", s(&self.data), "--out", s(&out)])?;
        }
        Ok(out.join("avg.ckpt"))
    }

    fn sweep(&self, ck: &Path) -> Result<Vec<(usize, f64)>, String> {
        let tsv = cli(&["sweep-repeats", "--checkpoint", s(ck), "--data", s(&self.data), "--repeats", "1,2,3,4,5,6"])?;
        tsv.lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                Ok((f[0].parse().map_err(|_| "bad repeat")?, f[1].parse().map_err(|_| "bad ter")?))
            })
            .collect()
    }
}

fn desk_learning(desk: &Desk) -> Outcome {
    let start = Instant::now();
    let ck = desk.train(SWEEP_SEEDS[0])?;
    let report: serde_json::Value =
        serde_json::from_str(&cli(&["eval", "--checkpoint", s(&ck), "--data", s(&desk.data), "--split", "test"])?)
            .map_err(|e| e.to_string())?;
    let ter = report["ter"].as_f64().ok_or("no ter")?;
    let elapsed = start.elapsed();
    check(ter < DESK_TER, format!("test TER {:.2}% ≥ {:.0}%", 100.0 * ter, 100.0 * DESK_TER))?;
    check(elapsed < DESK_BUDGET, format!("took {elapsed:?}"))?;

    // Noise-free overfit of 10 utterances.
    let spec = SyntheticTaskSpec {
        noise_std: 0.0,
        n_train: 10,
        n_valid: 0,
        n_test: 0,
        prototype_seed: 21,
        ..SyntheticTaskSpec::parse(DESK_SPEC).map_err(|e| e.to_string())?
    };
    let tiny = data::generate_dataset(&spec).map_err(|e| e.to_string())?;
    let cfg = ModelConfig::parse(DESK_MODEL).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        warmup_steps: 50,
        batch_size: 2,
        epochs: OVERFIT_MAX_EPOCHS,
        ..TrainConfig::parse(&desk_train_cfg(0)).map_err(|e| e.to_string())?
    };
    let mut tr = Trainer::new(Model::build(cfg, 0).map_err(|e| e.to_string())?, tc).map_err(|e| e.to_string())?;
    let mut overfit = None;
    for epoch in 1..=OVERFIT_MAX_EPOCHS {
        tr.run_epoch(&tiny.train, &[]).map_err(|e| e.to_string())?;
        let (_, counts, _) = training::evaluate(&tr.model, &tiny.train, None).map_err(|e| e.to_string())?;
        if counts.errors() == 0 {
            overfit = Some(epoch);
            break;
        }
    }
    let epoch = overfit.ok_or(format!("10-utterance overfit not at 0% TER after {OVERFIT_MAX_EPOCHS} epochs"))?;
    Ok(format!(
        "test TER {:.2}% (< {:.0}%) after {DESK_MAX_EPOCHS} epochs in {:.1?}; noise-free 10-utt overfit 0% TER at epoch {epoch}",
        100.0 * ter,
        100.0 * DESK_TER,
        elapsed
    ))
}

fn repeat_sweep(desk: &Desk) -> Outcome {
    let train_repeat = 3;
    let mut votes = Vec::new();
    let mut detail = Vec::new();
    for &seed in &SWEEP_SEEDS {
        let ck = desk.train(seed)?;
        let rows = desk.sweep(&ck)?;
        let at = |r: usize| rows.iter().find(|(k, _)| *k == r).map(|(_, t)| *t).ok_or(format!("no row R={r}"));
        let (base, later) = (at(train_repeat)?, at(train_repeat + 3)?);
        let table: Vec<String> = rows.iter().map(|(r, t)| format!("R{r}={:.2}%", 100.0 * t)).collect();
        detail.push(format!("seed {seed}: {}", table.join(" ")));
        votes.push(base <= later);
        let pass = votes.iter().filter(|&&v| v).count();
        let fail = votes.len() - pass;
        if pass * 2 > SWEEP_SEEDS.len() || fail * 2 > SWEEP_SEEDS.len() || (votes.len() == 1 && votes[0]) {
            break;
        }
    }
    let pass = votes.iter().filter(|&&v| v).count();
    let verdict = if votes.len() == 1 { pass == 1 } else { pass * 2 > votes.len() };
    let summary = format!(
        "TER(R=3) ≤ TER(R=6) in {pass}/{} seed(s) [{}]",
        votes.len(),
        detail.join("; ")
    );
    check(verdict, summary.clone())?;
    Ok(summary)
}

// 8 ──────────────────────────────────────────────────────────────────────────

fn format_round_trips(dir: &Path) -> Outcome {
    let ck = Checkpoint::new(Model::build(toy(Variant::Folded), 31).unwrap())
        .with_meta("epoch", 4)
        .with_meta("val_loss", 0.125);
    let (p1, p2) = (dir.join("a.ckpt"), dir.join("b.ckpt"));
    ck.write(&p1).map_err(|e| e.to_string())?;
    Checkpoint::read(&p1).map_err(|e| e.to_string())?.write(&p2).map_err(|e| e.to_string())?;
    check(fs::read(&p1).unwrap() == fs::read(&p2).unwrap(), "checkpoint bytes differ")?;

    let x = random_matrix(50, 83, 5);
    let (f1, f2) = (dir.join("a.feat"), dir.join("b.feat"));
    data::write_features(&f1, &x).map_err(|e| e.to_string())?;
    let back = data::read_features(&f1).map_err(|e| e.to_string())?;
    data::write_features(&f2, &back).map_err(|e| e.to_string())?;
    check(fs::read(&f1).unwrap() == fs::read(&f2).unwrap(), "FEAT bytes differ")?;
    check(back == x, "FEAT values differ")?;

    let copies = vec![ck.clone(); 4];
    let avg = training::average_checkpoints(&copies, 4).map_err(|e| e.to_string())?;
    let identical = avg
        .model
        .store
        .iter()
        .all(|(n, p)| p.value == *ck.model.store.value(n).unwrap());
    check(identical, "average of identical checkpoints differs")?;
    Ok("checkpoint and FEAT write→read→write bit-exact; mean of 4 identical checkpoints is the identity".into())
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let desk = Desk::new(dir);
    let get_desk = || desk.as_ref().map_err(Clone::clone);
    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match result {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n} FAIL {name}: {detail}");
            }
        }
    };
    report(1, "parameter counts", &mut || parameter_counts(dir));
    report(2, "CTC oracle equivalence", &mut oracle_equivalence);
    report(3, "probability completeness", &mut probability_completeness);
    report(4, "gradient suite", &mut gradient_suite);
    report(5, "weight-sharing invariants", &mut sharing_invariants);
    report(6, "desk-scale learning", &mut || desk_learning(get_desk()?));
    report(7, "repeat-sweep shape", &mut || repeat_sweep(get_desk()?));
    report(8, "format round-trips", &mut || format_round_trips(dir));
    println!("acceptance: {} of 8 criteria passed", 8 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
