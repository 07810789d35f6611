//! Back-off n-gram models in ARPA format.
//!
//! Probabilities and back-off weights are stored as log10 values, exactly
//! as they appear in the file. Scoring follows the usual recursion: use the
//! longest stored n-gram, paying the back-off weight of every context that
//! had to be shortened on the way down.

mod witten_bell;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::corpus::UNK;

pub use witten_bell::train_witten_bell;

/// log10 probability written for symbols that are never predicted (`<s>`).
pub const NEVER_PREDICTED: f64 = -99.0;

#[derive(Debug, Error, PartialEq)]
pub enum ArpaError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: \\data\\ declares {declared} {order}-grams but {found} were listed")]
    CountMismatch {
        line: usize,
        order: usize,
        declared: usize,
        found: usize,
    },
    #[error("missing \\data\\ header")]
    MissingData,
    #[error("missing \\end\\ marker")]
    MissingEnd,
    #[error("n-gram order must be at least 1, got {0}")]
    BadOrder(usize),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NgramEntry {
    pub logprob: f64,
    pub backoff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArpaModel {
    /// `orders[n - 1]` holds the n-grams.
    orders: Vec<BTreeMap<Vec<String>, NgramEntry>>,
}

impl ArpaModel {
    pub fn with_order(order: usize) -> Self {
        Self {
            orders: vec![BTreeMap::new(); order],
        }
    }

    pub fn order(&self) -> usize {
        self.orders.len()
    }

    pub fn count(&self, n: usize) -> usize {
        self.orders[n - 1].len()
    }

    pub fn insert(&mut self, gram: Vec<String>, entry: NgramEntry) {
        let n = gram.len();
        assert!(n >= 1 && n <= self.order(), "n-gram length {n} outside model order");
        self.orders[n - 1].insert(gram, entry);
    }

    pub fn get<S: AsRef<str>>(&self, gram: &[S]) -> Option<&NgramEntry> {
        let n = gram.len();
        if n == 0 || n > self.order() {
            return None;
        }
        let key: Vec<String> = gram.iter().map(|s| s.as_ref().to_owned()).collect();
        self.orders[n - 1].get(&key)
    }

    pub fn entries(&self, n: usize) -> impl Iterator<Item = (&Vec<String>, &NgramEntry)> {
        self.orders[n - 1].iter()
    }

    /// Unigram vocabulary of the model.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.orders[0].keys().map(|k| k[0].as_str())
    }

    fn backoff<S: AsRef<str>>(&self, context: &[S]) -> f64 {
        self.get(context).and_then(|e| e.backoff).unwrap_or(0.0)
    }

    /// log10 P(word | context). Only the last `order - 1` context words
    /// matter. Words missing from the unigram table are scored as `<unk>`;
    /// if the model has no `<unk>` either the result is `-inf`.
    pub fn logprob<S: AsRef<str>>(&self, context: &[S], word: &str) -> f64 {
        let word = if self.get(&[word]).is_some() { word } else { UNK };
        let keep = context.len().min(self.order().saturating_sub(1));
        let ctx: Vec<&str> = context[context.len() - keep..].iter().map(AsRef::as_ref).collect();
        let mut penalty = 0.0;
        for start in 0..=ctx.len() {
            let hist = &ctx[start..];
            let mut gram: Vec<&str> = hist.to_vec();
            gram.push(word);
            if let Some(e) = self.get(&gram) {
                return penalty + e.logprob;
            }
            if !hist.is_empty() {
                penalty += self.backoff(hist);
            }
        }
        f64::NEG_INFINITY
    }

    pub fn parse(text: &str) -> Result<Self, ArpaError> {
        Parser::default().run(text)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ArpaError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ArpaError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Serialises with tab-separated fields. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\n\\data\\\n");
        for (i, grams) in self.orders.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", i + 1, grams.len());
        }
        for (i, grams) in self.orders.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", i + 1);
            for (gram, e) in grams {
                let _ = write!(out, "{}\t{}", e.logprob, gram.join(" "));
                if let Some(b) = e.backoff {
                    let _ = write!(out, "\t{b}");
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }
}

#[derive(Default)]
struct Parser {
    declared: Vec<usize>,
}

enum Section {
    Preamble,
    Data,
    Grams { n: usize },
}

impl Parser {
    fn run(mut self, text: &str) -> Result<ArpaModel, ArpaError> {
        let mut section = Section::Preamble;
        let mut model = ArpaModel::default();
        let mut saw_data = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line == "\\end\\" {
                self.close(&section, &model, line_no)?;
                return self.finish(model, line_no);
            }
            if line == "\\data\\" {
                saw_data = true;
                section = Section::Data;
                continue;
            }
            if let Some(n) = parse_section_header(line) {
                if !saw_data {
                    return Err(ArpaError::MissingData);
                }
                self.close(&section, &model, line_no)?;
                if n == 0 || n > self.declared.len() {
                    return Err(malformed(line_no, format!("section for undeclared order {n}")));
                }
                if model.orders.is_empty() {
                    model = ArpaModel::with_order(self.declared.len());
                }
                section = Section::Grams { n };
                continue;
            }
            if line.is_empty() {
                continue;
            }
            match section {
                Section::Preamble => {}
                Section::Data => {
                    let rest = line
                        .strip_prefix("ngram ")
                        .ok_or_else(|| malformed(line_no, "expected `ngram N=count`"))?;
                    let (n, c) = rest
                        .split_once('=')
                        .ok_or_else(|| malformed(line_no, "expected `ngram N=count`"))?;
                    let n: usize = n.trim().parse().map_err(|_| malformed(line_no, "bad order"))?;
                    let c: usize = c.trim().parse().map_err(|_| malformed(line_no, "bad count"))?;
                    if n != self.declared.len() + 1 {
                        return Err(malformed(line_no, "orders must be declared as 1, 2, 3, ..."));
                    }
                    self.declared.push(c);
                }
                Section::Grams { n, .. } => {
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    if fields.len() != n + 1 && fields.len() != n + 2 {
                        return Err(malformed(
                            line_no,
                            format!("{n}-gram entry needs {} or {} fields, got {}", n + 1, n + 2, fields.len()),
                        ));
                    }
                    let logprob = parse_float(fields[0], line_no)?;
                    let backoff = if fields.len() == n + 2 {
                        Some(parse_float(fields[n + 1], line_no)?)
                    } else {
                        None
                    };
                    let gram = fields[1..=n].iter().map(|s| (*s).to_owned()).collect();
                    model.orders[n - 1].insert(gram, NgramEntry { logprob, backoff });
                }
            }
        }
        if !saw_data {
            return Err(ArpaError::MissingData);
        }
        Err(ArpaError::MissingEnd)
    }

    fn close(&self, section: &Section, model: &ArpaModel, line_no: usize) -> Result<(), ArpaError> {
        if let Section::Grams { n, .. } = *section {
            let found = model.orders[n - 1].len();
            if found != self.declared[n - 1] {
                return Err(ArpaError::CountMismatch {
                    line: line_no,
                    order: n,
                    declared: self.declared[n - 1],
                    found,
                });
            }
        }
        Ok(())
    }

    fn finish(&self, model: ArpaModel, line_no: usize) -> Result<ArpaModel, ArpaError> {
        if self.declared.is_empty() {
            return Err(ArpaError::MissingData);
        }
        if model.orders.len() != self.declared.len() {
            return Err(malformed(line_no, "no n-gram sections before \\end\\"));
        }
        for (i, &d) in self.declared.iter().enumerate() {
            if model.orders[i].len() != d {
                return Err(ArpaError::CountMismatch {
                    line: line_no,
                    order: i + 1,
                    declared: d,
                    found: model.orders[i].len(),
                });
            }
        }
        Ok(model)
    }
}

fn parse_section_header(line: &str) -> Option<usize> {
    line.strip_prefix('\\')?.strip_suffix("-grams:")?.parse().ok()
}

fn parse_float(s: &str, line: usize) -> Result<f64, ArpaError> {
    s.parse::<f64>()
        .map_err(|_| malformed(line, format!("`{s}` is not a number")))
}

fn malformed(line: usize, msg: impl Into<String>) -> ArpaError {
    ArpaError::Malformed { line, msg: msg.into() }
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIGRAM: &str = "\\data\\\nngram 1=2\n\n\\1-grams:\n-0.30103\ta\n-0.30103\tb\n\n\\end\\\n";

    const BIGRAM: &str = "\
\\data\\
ngram 1=4
ngram 2=2

\\1-grams:
-99\t<s>\t-0.1
-0.5\ta\t-0.2
-0.7\tb
-1.0\t</s>

\\2-grams:
-0.25\t<s> a
-0.4\ta </s>

\\end\\
";

    #[test]
    fn unigram_only() {
        let m = ArpaModel::parse(UNIGRAM).unwrap();
        assert_eq!(m.order(), 1);
        assert_eq!(m.logprob::<&str>(&[], "a"), -0.30103);
        assert_eq!(m.logprob(&["b"], "a"), -0.30103);
    }

    #[test]
    fn bigram_hit_and_backoff() {
        let m = ArpaModel::parse(BIGRAM).unwrap();
        assert_eq!(m.logprob(&["<s>"], "a"), -0.25);
        assert!((m.logprob(&["a"], "b") - (-0.9)).abs() < 1e-12);
        // context without a stored back-off weight costs nothing
        assert_eq!(m.logprob(&["b"], "a"), -0.5);
        // out-of-vocabulary word with no <unk> in the model
        assert_eq!(m.logprob(&["a"], "zzz"), f64::NEG_INFINITY);
    }

    #[test]
    fn round_trip_is_exact() {
        let m = ArpaModel::parse(BIGRAM).unwrap();
        assert_eq!(ArpaModel::parse(&m.to_arpa()).unwrap(), m);
    }

    #[test]
    fn count_mismatch_reports_line() {
        let bad = BIGRAM.replace("ngram 2=2", "ngram 2=3");
        match ArpaModel::parse(&bad) {
            Err(ArpaError::CountMismatch { order: 2, declared: 3, found: 2, line }) => assert_eq!(line, 15),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_and_missing_end() {
        let bad = BIGRAM.replace("-0.7\tb", "-0.7\tb\tc\td");
        assert!(matches!(ArpaModel::parse(&bad), Err(ArpaError::Malformed { line: 8, .. })));
        let bad = BIGRAM.replace("-0.7\tb", "x\tb");
        assert!(matches!(ArpaModel::parse(&bad), Err(ArpaError::Malformed { line: 8, .. })));
        let truncated = BIGRAM.replace("\\end\\\n", "");
        assert_eq!(ArpaModel::parse(&truncated), Err(ArpaError::MissingEnd));
        assert_eq!(ArpaModel::parse("\\1-grams:\n-1 a\n"), Err(ArpaError::MissingData));
    }
}
