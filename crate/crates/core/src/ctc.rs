//! Connectionist temporal classification: the collapse map, the log-space
//! forward recursion as a differentiable graph, an exhaustive-enumeration
//! reference, and best-path decoding.
//!
//! Index 0 of the extended vocabulary is always the blank.

use std::collections::HashSet;
use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::binio::{self, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Largest number of alignments [`brute_force_probability`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

const PGRM_MAGIC: &[u8; 4] = b"PGRM";

/// Token strings for ids `1..=len`; the blank is implicit at id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!(
                    "vocab line {}: token must be non-empty without whitespace",
                    i + 1
                )));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::Data(format!(
                    "vocab line {}: duplicate token `{t}`",
                    i + 1
                )));
            }
        }
        Ok(Self { tokens })
    }

    /// Vocabulary `a, b, c, ...` of the given size, for synthetic tasks.
    pub fn synthetic(size: usize) -> Self {
        let tokens = (0..size)
            .map(|i| {
                let mut s = String::new();
                let mut n = i;
                loop {
                    s.insert(0, (b'a' + (n % 26) as u8) as char);
                    if n < 26 {
                        break;
                    }
                    n = n / 26 - 1;
                }
                s
            })
            .collect();
        Self { tokens }
    }

    pub fn blank_id(&self) -> usize {
        BLANK
    }

    /// |V|, blank excluded.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// |V′| = |V| + 1.
    pub fn size_with_blank(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            BLANK => Some("<blank>"),
            _ => self.tokens.get(id - 1).map(String::as_str),
        }
    }

    pub fn render(&self, seq: &TokenSequence) -> String {
        seq.ids()
            .iter()
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        binio::write_file(path, text.as_bytes())
    }
}

/// Label sequence over V; never contains the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.contains(&BLANK) {
            return Err(Error::Data("token sequence contains the blank".into()));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Frame-level labelling over V′.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment(pub Vec<usize>);

/// Per-frame log-probabilities over V′ (`T′ × |V′|`).
#[derive(Clone, Debug, PartialEq)]
pub struct Posteriorgram {
    log_probs: Tensor,
}

impl Posteriorgram {
    pub fn from_log_probs(log_probs: Tensor) -> Result<Self> {
        for r in 0..log_probs.rows() {
            let total: f64 = log_probs.row(r).iter().map(|v| v.exp()).sum();
            if (total - 1.0).abs() > 1e-9 || log_probs.row(r).iter().any(|v| v.is_nan()) {
                return Err(Error::Data(format!(
                    "posteriorgram row {r} sums to {total}, not 1"
                )));
            }
        }
        Ok(Self { log_probs })
    }

    pub fn from_probs(probs: &Tensor) -> Result<Self> {
        Self::from_log_probs(probs.map(f64::ln))
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.log_probs.cols()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(12 + self.log_probs.len() * 8);
        out.extend_from_slice(PGRM_MAGIC);
        binio::put_u32(&mut out, binio::to_u32(self.frames(), "frames")?);
        binio::put_u32(&mut out, binio::to_u32(self.classes(), "classes")?);
        binio::put_f64s(&mut out, self.log_probs.data());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(PGRM_MAGIC)?;
        let t = r.u32("frame count")? as usize;
        let v = r.u32("class count")? as usize;
        if t == 0 || v == 0 {
            return Err(r.error("empty posteriorgram"));
        }
        let data = r.f64s(t * v, "log-probabilities")?;
        if !r.is_at_end() {
            return Err(r.error("trailing bytes"));
        }
        Self::from_log_probs(Tensor::matrix(t, v, data)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes()?)
    }
}

/// Merge runs of identical symbols, then drop blanks.
pub fn collapse(alignment: &[usize]) -> TokenSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &a in alignment {
        if prev != Some(a) && a != BLANK {
            out.push(a);
        }
        prev = Some(a);
    }
    TokenSequence(out)
}

/// Fewest frames any alignment of `y` needs: one per label plus a separating
/// blank between equal neighbours.
pub fn min_alignment_length(y: &TokenSequence) -> usize {
    y.len() + y.ids().windows(2).filter(|w| w[0] == w[1]).count()
}

/// `−log P_CTC(y | z)` as a graph node, where `log_probs` is a `T′ × |V′|`
/// node of per-frame log-probabilities.
///
/// The forward variables over the blank-interleaved label lattice are built
/// one frame at a time from generic graph ops, so the gradient is the reverse
/// sweep through the recursion itself.
pub fn ctc_neg_log_likelihood(g: &mut Graph, log_probs: Var, y: &TokenSequence) -> Result<Var> {
    let (frames, classes) = {
        let v = g.value(log_probs);
        (v.rows(), v.cols())
    };
    if let Some(&bad) = y.ids().iter().find(|&&id| id >= classes) {
        return Err(Error::Data(format!(
            "label {bad} outside {classes}-class posteriorgram"
        )));
    }
    let required = min_alignment_length(y);
    if frames < required.max(1) {
        return Err(Error::InfeasibleTarget {
            required,
            available: frames,
        });
    }

    let mut ext = Vec::with_capacity(2 * y.len() + 1);
    ext.push(BLANK);
    for &id in y.ids() {
        ext.push(id);
        ext.push(BLANK);
    }
    let states = ext.len();
    let ninf = f64::NEG_INFINITY;

    let first = (0..states)
        .map(|s| (s < 2).then(|| ext[s]))
        .collect();
    let mut alpha = g.gather(log_probs, first, ninf)?;

    let shift1: Vec<Option<usize>> = (0..states).map(|s| s.checked_sub(1)).collect();
    let skip: Vec<Option<usize>> = (0..states)
        .map(|s| (s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]).then(|| s - 2))
        .collect();
    let has_skip = skip.iter().any(Option::is_some);

    for t in 1..frames {
        let emit = g.gather(
            log_probs,
            ext.iter().map(|&c| Some(t * classes + c)).collect(),
            ninf,
        )?;
        let mut acc = alpha;
        if states > 1 {
            let from_prev = g.gather(alpha, shift1.clone(), ninf)?;
            acc = g.log_add_exp(acc, from_prev)?;
        }
        if has_skip {
            let from_skip = g.gather(alpha, skip.clone(), ninf)?;
            acc = g.log_add_exp(acc, from_skip)?;
        }
        alpha = g.add(acc, emit)?;
    }

    let last = g.gather(alpha, vec![Some(states - 1)], ninf)?;
    let penultimate = g.gather(alpha, vec![states.checked_sub(2)], ninf)?;
    let log_lik = g.log_add_exp(last, penultimate)?;
    if g.value(log_lik).data()[0] == ninf {
        return Err(Error::Numerical(
            "target has zero probability under the posteriorgram".into(),
        ));
    }
    Ok(g.scale(log_lik, -1.0))
}

/// Plain-value convenience wrapper around [`ctc_neg_log_likelihood`].
pub fn ctc_loss(z: &Posteriorgram, y: &TokenSequence) -> Result<f64> {
    let mut g = Graph::new();
    let lp = g.leaf(z.log_probs().clone());
    let loss = ctc_neg_log_likelihood(&mut g, lp, y)?;
    Ok(g.value(loss).data()[0])
}

/// `P_CTC(y | z)` by summing the path probability of every alignment in
/// `V′^T` whose collapse is `y`.
pub fn brute_force_probability(z: &Posteriorgram, y: &TokenSequence) -> Result<f64> {
    let (frames, classes) = (z.frames(), z.classes());
    let total = (classes as u128)
        .checked_pow(frames as u32)
        .unwrap_or(u128::MAX);
    if total > BRUTE_FORCE_LIMIT {
        return Err(Error::GuardExceeded {
            alignments: total,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let probs = z.log_probs().map(f64::exp);
    let mut alignment = vec![0usize; frames];
    let mut sum = 0.0;
    for _ in 0..total {
        if collapse(&alignment) == *y {
            sum += alignment
                .iter()
                .enumerate()
                .map(|(t, &a)| probs.at(t, a))
                .product::<f64>();
        }
        for slot in alignment.iter_mut().rev() {
            *slot += 1;
            if *slot < classes {
                break;
            }
            *slot = 0;
        }
    }
    Ok(sum)
}

/// `−log P_CTC(y | z)` by enumeration; `+∞` when no alignment exists.
pub fn brute_force_ctc(z: &Posteriorgram, y: &TokenSequence) -> Result<f64> {
    Ok(-brute_force_probability(z, y)?.ln())
}

/// Per-frame argmax (lowest index on ties) followed by [`collapse`].
pub fn best_path_decode(z: &Posteriorgram) -> TokenSequence {
    best_path_from_scores(z.log_probs())
}

/// Best path over any monotone per-frame scores (probabilities or logits).
pub fn best_path_from_scores(scores: &Tensor) -> TokenSequence {
    let path: Vec<usize> = (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}
