//! Run configuration. A TOML document; every key has a default, unknown
//! keys are errors. `--set section.key=value` edits the document before
//! it is deserialised, so overrides are checked the same way.

use std::path::{Path, PathBuf};

use baylm::nas::Variant;
use baylm::train::{RegularizerKind, DEFAULT_BAYES_LR, DEFAULT_LR};
use baylm::{Arch, LstmConfig, Site};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "BAYLM_SEED";
pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Resolved before anything runs: flag, then this key, then the
    /// environment, then 1.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: Arch,
    pub bayes: BayesConfig,
    pub gp: GpConfig,
    pub latent: LatentConfig,
    pub train: TrainSection,
    pub nas: NasConfig,
    pub ngram: NgramConfig,
    pub eval: EvalConfig,
    pub interp: InterpConfig,
    pub rescore: RescoreSection,
    pub snr: SnrConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            model: Arch::Lstm(LstmConfig::default()),
            bayes: BayesConfig::default(),
            gp: GpConfig::default(),
            latent: LatentConfig::default(),
            train: TrainSection::default(),
            nas: NasConfig::default(),
            ngram: NgramConfig::default(),
            eval: EvalConfig::default(),
            interp: InterpConfig::default(),
            rescore: RescoreSection::default(),
            snr: SnrConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Corpus files, one sentence per line. When `train` is unset the
/// generated grammar corpus is used (sizes from `[synth]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub min_count: usize,
    /// Seed of the generated corpus; independent of the run seed.
    pub corpus_seed: u64,
    /// Train on this leading fraction of the training sentences.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            dev: None,
            test: None,
            vocab: None,
            min_count: 1,
            corpus_seed: 1,
            train_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BayesConfig {
    pub positions: Vec<Site>,
    pub prior_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    pub positions: Vec<Site>,
    pub prior_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfig {
    pub positions: Vec<Site>,
    pub sigma: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            positions: Vec::new(),
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub strength: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            kind: RegularizerKind::None,
            strength: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Unset: 0.03 for point models, 0.015 once anything is sampled.
    pub lr: Option<f64>,
    pub lr_floor: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub halving_patience: usize,
    pub num_samples: usize,
    pub kl_scale: Option<f64>,
    pub shuffle: bool,
    pub restore_best: bool,
    /// Trainable names (or `prefix/`) kept fixed.
    pub frozen: Vec<String>,
    /// Point-estimate checkpoint to start from. Posteriors and priors at
    /// the Bayesian positions are centred on its weights.
    pub init_from: Option<PathBuf>,
    pub regularizer: RegularizerConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: None,
            lr_floor: 1e-4,
            max_epochs: 30,
            batch_size: 32,
            clip_norm: None,
            halving_patience: 1,
            num_samples: 1,
            kl_scale: None,
            shuffle: true,
            restore_best: true,
            frozen: Vec::new(),
            init_from: None,
            regularizer: RegularizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneFrom {
    /// Keep the super-network weights of the chosen branches.
    #[default]
    Supernet,
    /// Start again from the base model.
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NasConfig {
    pub variant: Variant,
    /// Empty means the default search space of the architecture.
    pub locations: Vec<Site>,
    pub prior_sigma: Option<f64>,
    pub epochs: usize,
    pub top_n: usize,
    pub finetune: FinetuneFrom,
    /// Zero skips fine-tuning.
    pub finetune_epochs: usize,
}

impl Default for NasConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Bayes,
            locations: Vec::new(),
            prior_sigma: None,
            epochs: 10,
            top_n: 5,
            finetune: FinetuneFrom::Supernet,
            finetune_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NgramConfig {
    pub order: usize,
}

impl Default for NgramConfig {
    fn default() -> Self {
        Self { order: 3 }
    }
}

/// One language model: a checkpoint, an ARPA file, or the uniform model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSource {
    pub checkpoint: Option<PathBuf>,
    pub arpa: Option<PathBuf>,
    pub uniform: bool,
}

impl LmSource {
    pub fn label(&self) -> String {
        match (&self.checkpoint, &self.arpa) {
            (Some(p), _) | (None, Some(p)) => p.display().to_string(),
            _ => "uniform".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub model: LmSource,
    pub split: Split,
    /// Score this file instead of a configured split.
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpConfig {
    pub components: Vec<LmSource>,
    /// Fixed weights; unset means fit by EM on the dev split.
    pub weights: Option<Vec<f64>>,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            components: Vec::new(),
            weights: None,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RescoreSection {
    pub nbest: Option<PathBuf>,
    pub refs: Option<PathBuf>,
    pub lm_scale: f64,
    pub insertion_penalty: f64,
    /// Empty means the `[interp]` components and weights.
    pub components: Vec<LmSource>,
    pub weights: Option<Vec<f64>>,
}

impl Default for RescoreSection {
    fn default() -> Self {
        Self {
            nbest: None,
            refs: None,
            lm_scale: 12.0,
            insertion_penalty: 0.0,
            components: Vec::new(),
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnrConfig {
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub list_size: usize,
    pub error_cost: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 500,
            dev: 100,
            test: 100,
            list_size: 20,
            error_cost: 1.0,
            noise: 2.0,
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts empty), applies `key=value` overrides and
    /// deserialises.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        if let Some(toml::Value::Table(m)) = doc.get_mut("model") {
            m.entry("kind").or_insert_with(|| toml::Value::String("lstm".into()));
        }
        let origin = path.map_or_else(|| "command line".to_string(), |p| p.display().to_string());
        // through text so the error carries the offending key
        let text = toml::to_string(&doc).map_err(|e| CliError::config(format!("{origin}: {e}")))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(CliError::config(format!("{key}: {msg}")));
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return bad("data.train_fraction", "must lie in (0, 1]");
        }
        if self.data.min_count == 0 {
            return bad("data.min_count", "must be at least 1");
        }
        if let Some(lr) = self.train.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("train.lr", "must be positive");
            }
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size", "must be positive");
        }
        if self.train.max_epochs == 0 {
            return bad("train.max_epochs", "must be positive");
        }
        if self.train.num_samples == 0 {
            return bad("train.num_samples", "must be positive");
        }
        if self.train.regularizer.strength < 0.0 {
            return bad("train.regularizer.strength", "must be nonnegative");
        }
        if self.ngram.order == 0 {
            return bad("ngram.order", "must be at least 1");
        }
        if self.nas.top_n == 0 {
            return bad("nas.top_n", "must be positive");
        }
        if self.latent.sigma <= 0.0 {
            return bad("latent.sigma", "must be positive");
        }
        for (key, s) in [("bayes.prior_sigma", self.bayes.prior_sigma), ("gp.prior_sigma", self.gp.prior_sigma), ("nas.prior_sigma", self.nas.prior_sigma)] {
            if s.is_some_and(|s| !(s > 0.0)) {
                return bad(key, "must be positive");
            }
        }
        if self.synth.train == 0 {
            return bad("synth.train", "must be positive");
        }
        Ok(())
    }

    /// True when training samples weights or activations.
    pub fn is_bayesian(&self) -> bool {
        !(self.bayes.positions.is_empty() && self.gp.positions.is_empty() && self.latent.positions.is_empty())
    }

    /// The configured rate, or the default for point (`sampled` false)
    /// or sampled training.
    pub fn learning_rate(&self) -> f64 {
        self.default_lr(self.is_bayesian())
    }

    fn default_lr(&self, sampled: bool) -> f64 {
        self.train.lr.unwrap_or(if sampled { DEFAULT_BAYES_LR } else { DEFAULT_LR })
    }

    /// Fills in everything resolved at run time, so the echo reruns
    /// identically. `sampled` marks commands that always train sampled
    /// weights.
    pub fn resolve(&mut self, seed_flag: Option<u64>, output_dir: Option<PathBuf>, sampled: bool) -> Result<()> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::config(format!("{SEED_ENV}: not an unsigned integer: {v:?}")))?,
            ),
            Err(_) => None,
        };
        self.seed = Some(seed_flag.or(self.seed).or(env).unwrap_or(DEFAULT_SEED));
        if let Some(d) = output_dir {
            self.output_dir = d;
        }
        self.train.lr = Some(self.default_lr(sampled || self.is_bayesian()));
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set {spec}: expected key=value")))?;
    let key = key.trim();
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("--set {spec}: bad key")));
    }
    // TOML literal if it parses as one, else a bare string
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().expect("nonempty");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("--set {key}: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::load(None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::load(None, &["train.learning_rate=0.1".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("learning_rate"), "{e}");
    }

    #[test]
    fn overrides_parse_toml_values() {
        let c = RunConfig::load(
            None,
            &[
                "train.lr=0.5".into(),
                "bayes.positions=[\"l1.ci\", \"l2.ig\"]".into(),
                "data.train=corpus/train.txt".into(),
                "model.kind=transformer".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.lr, Some(0.5));
        assert_eq!(c.bayes.positions.len(), 2);
        assert_eq!(c.data.train, Some(PathBuf::from("corpus/train.txt")));
        assert!(matches!(c.model, Arch::Transformer(_)));
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::load(None, &["bayes.positions=[\"l1.ci\"]".into(), "eval.model.uniform=true".into()]).unwrap();
        c.resolve(Some(7), None, false).unwrap();
        assert_eq!(c.train.lr, Some(DEFAULT_BAYES_LR));
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn out_of_range_values_name_the_key() {
        let e = RunConfig::load(None, &["data.train_fraction=0".into()]).unwrap_err();
        assert!(e.to_string().starts_with("config error: data.train_fraction"), "{e}");
    }
}
