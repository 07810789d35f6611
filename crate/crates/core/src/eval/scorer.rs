//! A common interface over neural, n-gram and uniform language models.

use rayon::prelude::*;

use crate::corpus::{encode_batches, Batch, Corpus, Vocabulary};
use crate::model::{LanguageModel, ModelError};
use crate::ngram::ArpaModel;

/// A language model over a closed vocabulary of ids `0..vocab_size()`.
///
/// Sequences are `<s> w1 .. wn </s>` as ids; every position after the
/// first is a target.
pub trait LmScorer: Sync {
    fn vocab_size(&self) -> usize;

    /// Natural-log probability of each target (length `ids.len() - 1`).
    fn score_sentence(&self, ids: &[usize]) -> Vec<f64>;

    fn score_sentences(&self, sents: &[Vec<usize>]) -> Vec<Vec<f64>> {
        sents.par_iter().map(|s| self.score_sentence(s)).collect()
    }

    /// Natural-log distribution over every id after `context` (which starts
    /// with `<s>`).
    fn distribution(&self, context: &[usize]) -> Vec<f64> {
        (0..self.vocab_size())
            .map(|w| {
                let mut ids = context.to_vec();
                ids.push(w);
                *self.score_sentence(&ids).last().expect("at least one target")
            })
            .collect()
    }

    fn logprob(&self, context: &[usize], word: usize) -> f64 {
        let mut ids = context.to_vec();
        ids.push(word);
        *self.score_sentence(&ids).last().expect("at least one target")
    }
}

/// Same probability for every id.
pub struct UniformScorer {
    pub size: usize,
}

impl LmScorer for UniformScorer {
    fn vocab_size(&self) -> usize {
        self.size
    }

    fn score_sentence(&self, ids: &[usize]) -> Vec<f64> {
        vec![-(self.size as f64).ln(); ids.len().saturating_sub(1)]
    }
}

/// Neural model scored with posterior means (no sampling, no dropout).
pub struct NnScorer<'a> {
    pub model: &'a LanguageModel,
    pub batch_size: usize,
}

impl<'a> NnScorer<'a> {
    pub fn new(model: &'a LanguageModel) -> Self {
        Self { model, batch_size: 32 }
    }

    fn try_score(&self, sents: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, ModelError> {
        let chunks: Vec<&[Vec<usize>]> = sents.chunks(self.batch_size.max(1)).collect();
        let parts: Result<Vec<Vec<Vec<f64>>>, ModelError> = chunks
            .par_iter()
            .map(|c| self.model.token_logprobs(&Batch::from_sequences(c)))
            .collect();
        Ok(parts?.into_iter().flatten().collect())
    }
}

impl LmScorer for NnScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size
    }

    fn score_sentence(&self, ids: &[usize]) -> Vec<f64> {
        self.score_sentences(&[ids.to_vec()]).remove(0)
    }

    fn score_sentences(&self, sents: &[Vec<usize>]) -> Vec<Vec<f64>> {
        self.try_score(sents).expect("model shapes were validated at construction")
    }

    fn distribution(&self, context: &[usize]) -> Vec<f64> {
        // a dummy target extends the sequence so the last row is produced
        let mut ids = context.to_vec();
        ids.push(0);
        let rows = self
            .model
            .logprob_rows(&Batch::from_sequences(&[ids]))
            .expect("model shapes were validated at construction");
        rows[0].row_slice(context.len() - 1).to_vec()
    }

    fn logprob(&self, context: &[usize], word: usize) -> f64 {
        self.distribution(context)[word]
    }
}

/// ARPA model bound to a vocabulary, converted to natural logs.
pub struct ArpaScorer<'a> {
    pub model: &'a ArpaModel,
    pub vocab: &'a Vocabulary,
}

impl LmScorer for ArpaScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn score_sentence(&self, ids: &[usize]) -> Vec<f64> {
        let toks: Vec<&str> = ids.iter().map(|&i| self.vocab.token(i)).collect();
        (1..toks.len())
            .map(|t| self.model.logprob(&toks[..t], toks[t]) * std::f64::consts::LN_10)
            .collect()
    }
}

/// Per-sentence target log-probabilities of `corpus` under `scorer`.
pub fn score_corpus(scorer: &dyn LmScorer, corpus: &Corpus, vocab: &Vocabulary) -> Vec<Vec<f64>> {
    let sents: Vec<Vec<usize>> = corpus.sentences.iter().map(|s| vocab.encode(s)).collect();
    scorer.score_sentences(&sents)
}

/// Per-sentence target log-probabilities of `corpus` under a neural model,
/// batched the same way as training.
pub fn score_corpus_batched(
    model: &LanguageModel,
    corpus: &Corpus,
    vocab: &Vocabulary,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let batches = encode_batches(corpus, vocab, batch_size);
    let parts: Result<Vec<_>, ModelError> = batches.par_iter().map(|b| model.token_logprobs(b)).collect();
    Ok(parts?.into_iter().flatten().collect())
}
