use std::path::Path;

use baylm::checkpoint::{self, Checkpoint};
use baylm::eval::{ArpaScorer, LmScorer, NnScorer, UniformScorer};
use baylm::synth::splits;
use baylm::{ArpaModel, Corpus, LanguageModel, RngStream, Vocabulary};
use log::info;

use crate::config::{LmSource, RunConfig, Split};
use crate::error::{CliError, Result};

pub struct Data {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl Data {
    pub fn split(&self, s: Split) -> &Corpus {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    Corpus::read(path).map_err(|e| CliError::from(e).with_file(path))
}

/// Configured corpus files, or the generated grammar corpus when no
/// training file is given.
pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let d = &cfg.data;
    let mut data = match &d.train {
        Some(train) => {
            let opt = |p: &Option<std::path::PathBuf>| p.as_deref().map_or(Ok(Corpus::default()), read_corpus);
            Data {
                train: read_corpus(train)?,
                dev: opt(&d.dev)?,
                test: opt(&d.test)?,
            }
        }
        None => {
            if d.dev.is_some() || d.test.is_some() {
                return Err(CliError::config("data.train: required when data.dev or data.test is set"));
            }
            let s = splits(cfg.synth.train, cfg.synth.dev, cfg.synth.test, &RngStream::new(d.corpus_seed));
            Data {
                train: s.train,
                dev: s.dev,
                test: s.test,
            }
        }
    };
    if d.train_fraction < 1.0 {
        data.train = data.train.prefix_fraction(d.train_fraction);
    }
    if data.train.is_empty() {
        return Err(CliError::data("training corpus is empty"));
    }
    info!(
        "corpus: {} train / {} dev / {} test sentences",
        data.train.len(),
        data.dev.len(),
        data.test.len()
    );
    Ok(data)
}

/// `data.vocab` if set, else `fallback` (a checkpoint's), else built from
/// the training sentences.
pub fn load_vocab(cfg: &RunConfig, data: Option<&Data>, fallback: Option<&Vocabulary>) -> Result<Vocabulary> {
    if let Some(p) = &cfg.data.vocab {
        let v = Vocabulary::read(p).map_err(|e| CliError::from(e).with_file(p))?;
        if let Some(f) = fallback {
            if f != &v {
                return Err(CliError::config(format!(
                    "data.vocab: {} differs from the checkpoint vocabulary",
                    p.display()
                )));
            }
        }
        return Ok(v);
    }
    if let Some(f) = fallback {
        return Ok(f.clone());
    }
    match data {
        Some(d) => Ok(Vocabulary::build(&d.train, cfg.data.min_count)?),
        None => Vocabulary::build(&load_data(cfg)?.train, cfg.data.min_count).map_err(Into::into),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint::load(path).map_err(|e| CliError::from(e).with_file(path))
}

/// A loaded model, owning what the scorer borrows.
pub enum Loaded {
    Nn(LanguageModel),
    Arpa(ArpaModel),
    Uniform,
}

pub struct LoadedLms {
    pub labels: Vec<String>,
    pub models: Vec<Loaded>,
    pub vocab: Vocabulary,
}

impl LoadedLms {
    pub fn scorers(&self) -> Vec<Box<dyn LmScorer + '_>> {
        self.models
            .iter()
            .map(|m| -> Box<dyn LmScorer + '_> {
                match m {
                    Loaded::Nn(model) => Box::new(NnScorer::new(model)),
                    Loaded::Arpa(model) => Box::new(ArpaScorer {
                        model,
                        vocab: &self.vocab,
                    }),
                    Loaded::Uniform => Box::new(UniformScorer { size: self.vocab.len() }),
                }
            })
            .collect()
    }
}

/// Loads every source against one shared vocabulary: `data.vocab`, else
/// the first checkpoint's, else one built from the training data.
pub fn load_lms(cfg: &RunConfig, key: &str, sources: &[LmSource]) -> Result<LoadedLms> {
    if sources.is_empty() {
        return Err(CliError::config(format!("{key}: no language model configured")));
    }
    let mut models = Vec::new();
    let mut ckpt_vocab: Option<(Vocabulary, String)> = None;
    for (i, s) in sources.iter().enumerate() {
        let k = format!("{key}[{i}]");
        let set = usize::from(s.checkpoint.is_some()) + usize::from(s.arpa.is_some()) + usize::from(s.uniform);
        if set != 1 {
            return Err(CliError::config(format!("{k}: set exactly one of checkpoint, arpa, uniform")));
        }
        if let Some(p) = &s.checkpoint {
            let c = load_checkpoint(p)?;
            if let Some(v) = c.vocab {
                match &ckpt_vocab {
                    None => ckpt_vocab = Some((v, p.display().to_string())),
                    Some((first, origin)) if first != &v => {
                        return Err(CliError::config(format!(
                            "{k}: vocabulary of {} differs from {origin}",
                            p.display()
                        )));
                    }
                    Some(_) => {}
                }
            }
            models.push(Loaded::Nn(c.model));
        } else if let Some(p) = &s.arpa {
            models.push(Loaded::Arpa(ArpaModel::read(p).map_err(|e| CliError::from(e).with_file(p))?));
        } else {
            models.push(Loaded::Uniform);
        }
    }
    let vocab = load_vocab(cfg, None, ckpt_vocab.as_ref().map(|(v, _)| v))?;
    for (i, m) in models.iter().enumerate() {
        if let Loaded::Nn(model) = m {
            if model.vocab_size != vocab.len() {
                return Err(CliError::config(format!(
                    "{key}[{i}]: model has {} outputs but the vocabulary has {} words",
                    model.vocab_size,
                    vocab.len()
                )));
            }
        }
    }
    Ok(LoadedLms {
        labels: sources.iter().map(LmSource::label).collect(),
        models,
        vocab,
    })
}

pub fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| crate::error::io(&path, e))
}
