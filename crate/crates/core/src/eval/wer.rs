//! Word error rate by minimum edit distance.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WerResult {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
    /// `(S + I + D) / |ref|`; `inf` for an empty reference with a
    /// non-empty hypothesis, 0 when both are empty.
    pub rate: f64,
}

impl WerResult {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

fn rate(errors: usize, ref_len: usize) -> f64 {
    match (errors, ref_len) {
        (0, _) => 0.0,
        (_, 0) => f64::INFINITY,
        _ => errors as f64 / ref_len as f64,
    }
}

/// Unit-cost Levenshtein alignment. Among equal-cost alignments the
/// backtrace prefers matches and substitutions, then deletions.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> WerResult {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut s, mut ins, mut del) = (0, 0, 0);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                s += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            del += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    WerResult {
        substitutions: s,
        insertions: ins,
        deletions: del,
        ref_len: n,
        rate: rate(s + ins + del, n),
    }
}

/// Pooled error counts over many utterances.
pub fn corpus_wer(results: &[WerResult]) -> WerResult {
    let mut total = WerResult {
        substitutions: 0,
        insertions: 0,
        deletions: 0,
        ref_len: 0,
        rate: 0.0,
    };
    for r in results {
        total.substitutions += r.substitutions;
        total.insertions += r.insertions;
        total.deletions += r.deletions;
        total.ref_len += r.ref_len;
    }
    total.rate = rate(total.errors(), total.ref_len);
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_cases() {
        assert_eq!(wer(&["a", "b"], &["a", "b"]).rate, 0.0);
        let r = wer(&["a", "b", "c"], &["a", "x", "c"]);
        assert_eq!((r.substitutions, r.insertions, r.deletions), (1, 0, 0));
        assert!((r.rate - 1.0 / 3.0).abs() < 1e-15);
        let r = wer::<&str>(&[], &["a", "b"]);
        assert_eq!(r.insertions, 2);
        assert_eq!(r.rate, f64::INFINITY);
        let r = wer(&["a", "b", "c"], &["a", "c"]);
        assert_eq!((r.deletions, r.errors()), (1, 1));
    }
}
