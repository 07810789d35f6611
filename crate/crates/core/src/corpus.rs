//! Sentence corpora, the closed vocabulary, and padded mini-batches.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    Empty,
    #[error("vocabulary file {path}: {msg}")]
    BadVocab { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Whitespace-tokenised sentences, one per input line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Vec<String>>,
}

impl Corpus {
    pub fn parse(text: &str) -> Self {
        let sentences = text
            .lines()
            .map(|l| l.split_whitespace().map(str::to_owned).collect::<Vec<_>>())
            .filter(|s| !s.is_empty())
            .collect();
        Self { sentences }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::parse(&text))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&s.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Number of predicted tokens (words plus one end symbol per sentence).
    pub fn num_targets(&self) -> usize {
        self.sentences.iter().map(|s| s.len() + 1).sum()
    }

    /// The first `fraction` of the sentences (at least one).
    pub fn prefix_fraction(&self, fraction: f64) -> Self {
        let n = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len().max(1));
        Self {
            sentences: self.sentences[..n.min(self.len())].to_vec(),
        }
    }
}

/// Bijection between tokens and ids `0..N`. Ids 0, 1, 2 are always
/// `<s>`, `</s>`, `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts tokens and keeps those seen at least `min_count` times.
    /// Ids follow descending frequency, ties broken lexicographically.
    pub fn build(corpus: &Corpus, min_count: usize) -> Result<Self, CorpusError> {
        if corpus.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in &corpus.sentences {
            for w in s {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(w, c)| c >= min_count.max(1) && ![BOS, EOS, UNK].contains(&w))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_tokens(
            kept.into_iter().map(|(w, _)| w.to_owned()).collect(),
        ))
    }

    /// Reserved symbols followed by `words` in the given order; duplicates
    /// and reserved symbols inside `words` are dropped.
    pub fn from_tokens(words: Vec<String>) -> Self {
        let mut tokens = vec![BOS.to_owned(), EOS.to_owned(), UNK.to_owned()];
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn unk(&self) -> usize {
        2
    }

    /// Id of `token`, or the `<unk>` id.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(2)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `<s> w1 .. wn </s>` as ids.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(self.bos());
        ids.extend(words.iter().map(|w| self.id(w.as_ref())));
        ids.push(self.eos());
        ids
    }

    /// Inverse of [`Vocabulary::encode`], dropping the boundary symbols.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != self.bos() && i != self.eos())
            .map(|&i| self.tokens[i].clone())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, CorpusError> {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if lines.len() < 3 || lines[..3] != [BOS, EOS, UNK] {
            return Err(CorpusError::BadVocab {
                path: origin.to_owned(),
                msg: "must start with <s>, </s>, <unk>".into(),
            });
        }
        let v = Self::from_tokens(lines[3..].iter().map(|s| (*s).to_owned()).collect());
        if v.len() != lines.len() {
            return Err(CorpusError::BadVocab {
                path: origin.to_owned(),
                msg: "duplicate tokens".into(),
            });
        }
        Ok(v)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Padded id matrix `[sentences x max_len]`. Every row is
/// `<s> w1 .. wn </s>` followed by padding; step `t` feeds token `t` and
/// predicts token `t + 1`, so `<s>` is never a target.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    tokens: Vec<usize>,
    lengths: Vec<usize>,
    max_len: usize,
}

impl Batch {
    /// Each sequence must already include both boundary symbols.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Self {
        assert!(!seqs.is_empty(), "empty batch");
        assert!(seqs.iter().all(|s| s.len() >= 2), "sequences need <s> and </s>");
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(seqs.len() * max_len);
        for s in seqs {
            tokens.extend_from_slice(s);
            // padding repeats the end symbol; padded positions carry no target
            tokens.extend(std::iter::repeat(s[s.len() - 1]).take(max_len - s.len()));
        }
        Self {
            tokens,
            lengths: seqs.iter().map(Vec::len).collect(),
            max_len,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Number of prediction steps (`max_len - 1`).
    pub fn num_steps(&self) -> usize {
        self.max_len - 1
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn sequence(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.max_len..b * self.max_len + self.lengths[b]]
    }

    pub fn token(&self, b: usize, t: usize) -> usize {
        self.tokens[b * self.max_len + t]
    }

    pub fn inputs_at(&self, t: usize) -> Vec<usize> {
        (0..self.batch_size()).map(|b| self.token(b, t)).collect()
    }

    pub fn targets_at(&self, t: usize) -> Vec<Option<usize>> {
        (0..self.batch_size())
            .map(|b| (t + 1 < self.lengths[b]).then(|| self.token(b, t + 1)))
            .collect()
    }

    pub fn num_targets(&self) -> usize {
        self.lengths.iter().map(|l| l - 1).sum()
    }
}

/// Groups sentences into batches of `batch_size` in corpus order.
pub fn encode_batches(corpus: &Corpus, vocab: &Vocabulary, batch_size: usize) -> Vec<Batch> {
    assert!(batch_size > 0, "batch size must be positive");
    let seqs: Vec<Vec<usize>> = corpus.sentences.iter().map(|s| vocab.encode(s)).collect();
    seqs.chunks(batch_size).map(Batch::from_sequences).collect()
}
