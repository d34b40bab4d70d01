//! Synthetic utterances, the FEAT feature format, manifests and masking.
//!
//! A dataset directory holds `vocab.txt`, `train.tsv`, `valid.tsv`,
//! `test.tsv` and `feats/<id>.feat`. Manifest feature paths are relative to
//! the manifest's directory unless absolute.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{self, ByteReader};
use crate::config::{join_list, KeyValues};
use crate::ctc::{self, TokenSequence, Vocab};
use crate::encoder::subsampled_len;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const FEAT_MAGIC: &[u8; 4] = b"FEAT";

/// Silence frames inserted between consecutive tokens (inclusive range).
pub const SILENCE_FRAMES: (usize, usize) = (2, 5);

const MAX_RETRIES: usize = 100;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    /// |V|, blank excluded.
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub tokens_per_utt: (usize, usize),
    pub frames_per_token: (usize, usize),
    pub noise_std: f64,
    pub prototype_seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

const SPEC_KEYS: &[&str] = &[
    "vocab_size",
    "feat_dim",
    "tokens_per_utt",
    "frames_per_token",
    "noise_std",
    "prototype_seed",
    "n_train",
    "n_valid",
    "n_test",
];

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            feat_dim: 20,
            tokens_per_utt: (3, 8),
            frames_per_token: (6, 10),
            noise_std: 0.3,
            prototype_seed: 7,
            n_train: 300,
            n_valid: 50,
            n_test: 50,
        }
    }
}

fn pair(kv: &KeyValues, key: &str, default: (usize, usize)) -> Result<(usize, usize)> {
    match kv.get_list_or::<usize>(key, vec![default.0, default.1])?.as_slice() {
        &[lo, hi] => Ok((lo, hi)),
        _ => Err(Error::Config(format!("`{key}` must be `min,max`"))),
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 {
            return bad("vocab_size must be ≥ 1".into());
        }
        if self.feat_dim < 7 {
            return bad(format!("feat_dim {} < 7", self.feat_dim));
        }
        for (name, (lo, hi)) in [
            ("tokens_per_utt", self.tokens_per_utt),
            ("frames_per_token", self.frames_per_token),
        ] {
            if lo > hi {
                return bad(format!("{name} range {lo},{hi} is empty"));
            }
        }
        if self.tokens_per_utt.0 == 0 {
            return bad("tokens_per_utt min must be ≥ 1".into());
        }
        if self.frames_per_token.0 < 4 {
            return bad(format!("frames_per_token min {} < 4", self.frames_per_token.0));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and ≥ 0", self.noise_std));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("vocab_size", self.vocab_size);
        kv.set("feat_dim", self.feat_dim);
        kv.set("tokens_per_utt", join_list(&[self.tokens_per_utt.0, self.tokens_per_utt.1]));
        kv.set(
            "frames_per_token",
            join_list(&[self.frames_per_token.0, self.frames_per_token.1]),
        );
        kv.set("noise_std", self.noise_std);
        kv.set("prototype_seed", self.prototype_seed);
        kv.set("n_train", self.n_train);
        kv.set("n_valid", self.n_valid);
        kv.set("n_test", self.n_test);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_known(SPEC_KEYS)?;
        let d = Self::default();
        let spec = Self {
            vocab_size: kv.get_or("vocab_size", d.vocab_size)?,
            feat_dim: kv.get_or("feat_dim", d.feat_dim)?,
            tokens_per_utt: pair(kv, "tokens_per_utt", d.tokens_per_utt)?,
            frames_per_token: pair(kv, "frames_per_token", d.frames_per_token)?,
            noise_std: kv.get_or("noise_std", d.noise_std)?,
            prototype_seed: kv.get_or("prototype_seed", d.prototype_seed)?,
            n_train: kv.get_or("n_train", d.n_train)?,
            n_valid: kv.get_or("n_valid", d.n_valid)?,
            n_test: kv.get_or("n_test", d.n_test)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    /// One prototype per token id `1..=vocab_size` (index 0 unused).
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut out = vec![vec![0.0; self.feat_dim]];
        for _ in 0..self.vocab_size {
            out.push((0..self.feat_dim).map(|_| normal.sample(&mut rng)).collect());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor,
    pub transcript: TokenSequence,
}

impl Utterance {
    /// Frames left after subsampling, if the input is long enough.
    pub fn subsampled_frames(&self) -> Option<usize> {
        subsampled_len(self.features.rows())
    }

    pub fn is_feasible(&self) -> bool {
        self.subsampled_frames()
            .is_some_and(|t| ctc::min_alignment_length(&self.transcript) <= t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, valid or test)"
            ))),
        }
    }
}

/// Render one utterance; the sample is pure in `(spec, rng state)`.
fn sample_utterance(
    spec: &SyntheticTaskSpec,
    prototypes: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, usize, Vec<usize>)> {
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    let n_tokens = rng.random_range(spec.tokens_per_utt.0..=spec.tokens_per_utt.1);
    let tokens: Vec<usize> = (0..n_tokens)
        .map(|_| rng.random_range(1..=spec.vocab_size))
        .collect();
    let d = spec.feat_dim;
    let mut frames = Vec::new();
    let mut t = 0;
    for (i, &tok) in tokens.iter().enumerate() {
        if i > 0 {
            let n_sil = rng.random_range(SILENCE_FRAMES.0..=SILENCE_FRAMES.1);
            for _ in 0..n_sil * d {
                frames.push(noise.sample(rng));
            }
            t += n_sil;
        }
        let dur = rng.random_range(spec.frames_per_token.0..=spec.frames_per_token.1);
        for _ in 0..dur {
            for &p in &prototypes[tok] {
                frames.push(p + noise.sample(rng));
            }
        }
        t += dur;
    }
    Ok((frames, t, tokens))
}

fn generate_split(
    spec: &SyntheticTaskSpec,
    prototypes: &[Vec<f64>],
    split: usize,
    count: usize,
) -> Result<Vec<Utterance>> {
    let name = SPLITS[split];
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.prototype_seed, &[1, split as u64]));
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{name}-{i:05}");
        let mut accepted = None;
        for _ in 0..MAX_RETRIES {
            let (frames, t, tokens) = sample_utterance(spec, prototypes, &mut rng)?;
            let utt = Utterance {
                id: id.clone(),
                features: Tensor::matrix(t, spec.feat_dim, frames)?,
                transcript: TokenSequence::new(tokens)?,
            };
            if utt.is_feasible() {
                accepted = Some(utt);
                break;
            }
        }
        out.push(accepted.ok_or_else(|| {
            Error::Data(format!(
                "{id}: no feasible sample after {MAX_RETRIES} attempts"
            ))
        })?);
    }
    Ok(out)
}

/// Deterministic in `spec`; each split draws from its own stream.
pub fn generate_dataset(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let prototypes = spec.prototypes();
    Ok(Dataset {
        vocab: Vocab::synthetic(spec.vocab_size),
        train: generate_split(spec, &prototypes, 0, spec.n_train)?,
        valid: generate_split(spec, &prototypes, 1, spec.n_valid)?,
        test: generate_split(spec, &prototypes, 2, spec.n_test)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpecAugment {
    pub n_time_masks: usize,
    pub time_width: usize,
    pub n_freq_masks: usize,
    pub freq_width: usize,
}

impl SpecAugment {
    pub fn is_identity(&self) -> bool {
        self.n_time_masks == 0 && self.n_freq_masks == 0
    }
}

/// Zero random time stripes (width ≤ `time_width`) and feature stripes
/// (width ≤ `freq_width`).
pub fn spec_augment(x: &Tensor, aug: &SpecAugment, seed: u64) -> Result<Tensor> {
    let (t, d) = (x.rows(), x.cols());
    if aug.time_width > t || aug.freq_width > d {
        return Err(Error::Config(format!(
            "mask widths {}×{} exceed features {t}×{d}",
            aug.time_width, aug.freq_width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    let w = out.cols();
    let data = out.data_mut();
    for _ in 0..aug.n_time_masks {
        let width = rng.random_range(0..=aug.time_width);
        let start = rng.random_range(0..=t - width);
        data[start * w..(start + width) * w].fill(0.0);
    }
    for _ in 0..aug.n_freq_masks {
        let width = rng.random_range(0..=aug.freq_width);
        let start = rng.random_range(0..=d - width);
        for r in 0..t {
            data[r * w + start..r * w + start + width].fill(0.0);
        }
    }
    Ok(out)
}

pub fn features_to_bytes(x: &Tensor) -> Result<Vec<u8>> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::Data(format!(
            "refusing to write empty {}×{} features",
            x.rows(),
            x.cols()
        )));
    }
    let mut out = Vec::with_capacity(12 + 8 * x.len());
    out.extend_from_slice(FEAT_MAGIC);
    binio::put_u32(&mut out, binio::to_u32(x.rows(), "frames")?);
    binio::put_u32(&mut out, binio::to_u32(x.cols(), "feature dim")?);
    binio::put_f64s(&mut out, x.data());
    Ok(out)
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    r.magic(FEAT_MAGIC)?;
    let t = r.u32("frame count")? as usize;
    let d = r.u32("feature dim")? as usize;
    if t == 0 || d == 0 {
        return Err(r.error(format!("empty {t}×{d} features")));
    }
    let data = r.f64s(t * d, "features")?;
    if !r.is_at_end() {
        return Err(r.error("trailing bytes"));
    }
    Tensor::matrix(t, d, data)
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    features_from_bytes(&binio::read_file(path)?)
}

pub fn write_features(path: &Path, x: &Tensor) -> Result<()> {
    binio::write_file(path, &features_to_bytes(x)?)
}

fn parse_manifest_line(line_no: usize, line: &str, vocab: &Vocab) -> Result<(String, String, TokenSequence)> {
    let err = |m: String| Error::Data(format!("manifest line {line_no}: {m}"));
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 3 {
        return Err(err(format!("expected 3 tab-separated columns, got {}", cols.len())));
    }
    let (id, path) = (cols[0].trim(), cols[1].trim());
    if id.is_empty() || path.is_empty() {
        return Err(err("empty id or feature path".into()));
    }
    let mut ids = Vec::new();
    for tok in cols[2].split_whitespace() {
        let v: usize = tok
            .parse()
            .map_err(|_| err(format!("token `{tok}` is not an integer")))?;
        if v == ctc::BLANK || v > vocab.len() {
            return Err(err(format!(
                "token id {v} outside [1, {}]",
                vocab.len()
            )));
        }
        ids.push(v);
    }
    Ok((id.to_string(), path.to_string(), TokenSequence::new(ids)?))
}

/// Utterances in file order, validated against `vocab`.
pub fn load_manifest(path: &Path, vocab: &Vocab) -> Result<Vec<Utterance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, feat, transcript) = parse_manifest_line(i + 1, line, vocab)?;
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!(
                "manifest line {}: duplicate utterance id `{id}`",
                i + 1
            )));
        }
        let feat_path: PathBuf = base.join(feat);
        out.push(Utterance {
            id,
            features: read_features(&feat_path)?,
            transcript,
        });
    }
    Ok(out)
}

pub fn render_manifest(entries: &[(&str, &str, &TokenSequence)]) -> String {
    let mut s = String::new();
    for (id, path, y) in entries {
        let ids: Vec<String> = y.ids().iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "{id}\t{path}\t{}", ids.join(" "));
    }
    s
}

/// Write vocab, manifests and features under `dir` (created if needed).
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let feats = dir.join("feats");
    std::fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    data.vocab.write(&dir.join("vocab.txt"))?;
    for name in SPLITS {
        let utts = data.split(name)?;
        let mut rel = Vec::with_capacity(utts.len());
        for u in utts {
            let r = format!("feats/{}.feat", u.id);
            write_features(&dir.join(&r), &u.features)?;
            rel.push(r);
        }
        let entries: Vec<(&str, &str, &TokenSequence)> = utts
            .iter()
            .zip(&rel)
            .map(|(u, r)| (u.id.as_str(), r.as_str(), &u.transcript))
            .collect();
        binio::write_file(
            &dir.join(format!("{name}.tsv")),
            render_manifest(&entries).as_bytes(),
        )?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let vocab = Vocab::read(&dir.join("vocab.txt"))?;
    let load = |name: &str| load_manifest(&dir.join(format!("{name}.tsv")), &vocab);
    Ok(Dataset {
        train: load("train")?,
        valid: load("valid")?,
        test: load("test")?,
        vocab,
    })
}
