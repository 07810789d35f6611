//! Shared inputs for the benchmarks.

use baylm::corpus::encode_batches;
use baylm::synth::desk_splits;
use baylm::{Arch, Batch, Corpus, LanguageModel, LstmConfig, RngStream, Site, SiteKind, Tensor, TransformerConfig, Vocabulary};

pub struct Desk {
    pub train: Corpus,
    pub dev: Corpus,
    pub vocab: Vocabulary,
    /// First training batch of 32 sentences.
    pub batch: Batch,
}

pub fn desk() -> Desk {
    let s = desk_splits(1);
    let vocab = Vocabulary::build(&s.train, 1).expect("desk corpus is nonempty");
    let batch = encode_batches(&s.train, &vocab, 32).swap_remove(0);
    Desk {
        train: s.train,
        dev: s.dev,
        vocab,
        batch,
    }
}

pub fn lstm(vocab: usize) -> LanguageModel {
    LanguageModel::new(Arch::Lstm(LstmConfig::default()), vocab, &RngStream::new(1)).expect("default config is valid")
}

pub fn transformer(vocab: usize) -> LanguageModel {
    LanguageModel::new(Arch::Transformer(TransformerConfig::default()), vocab, &RngStream::new(1))
        .expect("default config is valid")
}

/// The default LSTM with Bayesian cell-input weights in both layers.
pub fn bayes_lstm(vocab: usize) -> LanguageModel {
    let mut m = lstm(vocab);
    for l in 1..=2 {
        m.add_bayes(Site::new(l, SiteKind::CellInput), m.default_prior_sigma(), false)
            .expect("cell input is a site of the default LSTM");
    }
    m
}

pub fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::from_vec(rows, cols, RngStream::new(seed).normals(rows * cols))
}
