//! Levenshtein alignment of token sequences and error-rate totals.

use serde::Serialize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Reference length.
    pub reference: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Errors per reference token; 0 for an empty reference with no errors.
    pub fn error_rate(&self) -> f64 {
        match (self.errors(), self.reference) {
            (0, _) => 0.0,
            (e, 0) => e as f64,
            (e, n) => e as f64 / n as f64,
        }
    }

    pub fn merge(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference += other.reference;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Match,
    Substitution,
    Deletion,
    Insertion,
}

/// Minimum-cost edit script turning `reference` into `hypothesis`.
///
/// Unit costs. On ties the backtrace prefers match/substitution, then
/// deletion, then insertion, so the script is deterministic.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, cell) in d[..=m].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if here == d[(i - 1) * w + j - 1] + usize::from(!same) {
                ops.push(if same { EditOp::Match } else { EditOp::Substitution });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            ops.push(EditOp::Deletion);
            i -= 1;
        } else {
            ops.push(EditOp::Insertion);
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn count_ops(ops: &[EditOp], reference: usize) -> EditCounts {
    let mut c = EditCounts {
        reference,
        ..EditCounts::default()
    };
    for op in ops {
        match op {
            EditOp::Match => {}
            EditOp::Substitution => c.substitutions += 1,
            EditOp::Deletion => c.deletions += 1,
            EditOp::Insertion => c.insertions += 1,
        }
    }
    c
}

pub fn edit_counts<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    count_ops(&align(reference, hypothesis), reference.len())
}
