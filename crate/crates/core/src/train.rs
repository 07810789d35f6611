//! Training objective and the SGD loop shared by every model variant.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Corpus, Vocabulary};
use crate::eval::perplexity_from_logprobs;
use crate::eval::scorer::score_corpus_batched;
use crate::graph::NodeId;
use crate::model::{is_trainable, Fwd, LanguageModel, Mode, ModelError};
use crate::optim::{sgd_step, ParamGrad, SgdState, StepOutcome};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    #[default]
    None,
    L1,
    L2,
    Map,
}

/// Penalty on point weight matrices (layer-norm gains and biases are
/// left alone). MAP pulls towards `reference` with strength `lambda`:
/// `lambda * ||W - W_ref||^2`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub strength: f64,
    pub reference: Option<BTreeMap<String, Tensor>>,
}

impl RegularizerSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn l1(strength: f64) -> Self {
        Self {
            kind: RegularizerKind::L1,
            strength,
            reference: None,
        }
    }

    pub fn l2(strength: f64) -> Self {
        Self {
            kind: RegularizerKind::L2,
            strength,
            reference: None,
        }
    }

    /// MAP towards the point weights of `reference`.
    pub fn map(strength: f64, reference: &LanguageModel) -> Self {
        Self {
            kind: RegularizerKind::Map,
            strength,
            reference: Some(reference.weights.clone()),
        }
    }

    pub fn validate(&self, model: &LanguageModel) -> Result<(), TrainError> {
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(TrainError::Config(format!("regulariser strength must be >= 0, got {}", self.strength)));
        }
        if self.kind == RegularizerKind::Map {
            let r = self
                .reference
                .as_ref()
                .ok_or_else(|| TrainError::Config("MAP regulariser needs a reference model".into()))?;
            for name in penalised(model) {
                match r.get(name) {
                    Some(t) if t.shape() == model.weights[name].shape() => {}
                    _ => return Err(TrainError::Config(format!("MAP reference lacks a matching `{name}`"))),
                }
            }
        }
        Ok(())
    }

    /// Penalty value for the current weights.
    pub fn penalty(&self, model: &LanguageModel) -> f64 {
        let s = self.strength;
        penalised(model)
            .map(|name| {
                let w = model.weights[name].data();
                match self.kind {
                    RegularizerKind::None => 0.0,
                    RegularizerKind::L1 => s * w.iter().map(|v| v.abs()).sum::<f64>(),
                    RegularizerKind::L2 => s * w.iter().map(|v| v * v).sum::<f64>(),
                    RegularizerKind::Map => {
                        let r = self.reference.as_ref().expect("validated")[name].data();
                        s * w.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    }
                }
            })
            .sum()
    }
}

fn penalised(model: &LanguageModel) -> impl Iterator<Item = &String> {
    model
        .weights
        .keys()
        .filter(|n| !(n.ends_with("_g") || n.ends_with("_b")))
}

/// What one minibatch loss is made of.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    /// Monte-Carlo samples of every posterior (and latent) per batch.
    pub num_samples: usize,
    /// Weight of the parameter and latent KL terms.
    pub kl_scale: f64,
    /// Dropout during sampled passes.
    pub dropout: bool,
    pub regularizer: RegularizerSpec,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            num_samples: 1,
            kl_scale: 1.0,
            dropout: true,
            regularizer: RegularizerSpec::none(),
        }
    }
}

pub struct Objective {
    pub loss: NodeId,
    /// Sample-averaged negative log-likelihood (summed over tokens).
    pub nll: f64,
    /// Scaled KL contribution (parameter and latent).
    pub kl: f64,
    pub penalty: f64,
    pub tokens: usize,
}

/// Builds the minibatch loss
/// `mean_k(nll_k + kl_scale * latentKL_k) + kl_scale * paramKL + penalty`.
///
/// With `rng` the k-th pass samples from `rng.fork(k)`; without it every
/// pass uses means and no dropout, so K is irrelevant and one pass is run.
pub fn objective(
    f: &mut Fwd<'_>,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    rng: Option<&RngStream>,
) -> Result<Objective, ModelError> {
    let k_total = if rng.is_some() { cfg.num_samples.max(1) } else { 1 };
    let mut acc: Option<NodeId> = None;
    let mut nll_sum = 0.0;
    let mut latent_kl = 0.0;
    for k in 0..k_total {
        let mode = match rng {
            None => Mode::Eval,
            Some(r) => Mode::Train {
                rng: r.fork(k as u64),
                dropout: cfg.dropout,
            },
        };
        let pass = f.run(batch, mode)?;
        let nll = f.g.nll(pass.logp, &pass.targets)?;
        nll_sum += f.g.value(nll).item();
        let term = match pass.latent_kl {
            Some(kl) if rng.is_some() => {
                latent_kl += f.g.value(kl).item();
                let scaled = f.g.scale(kl, cfg.kl_scale);
                f.g.add(nll, scaled)?
            }
            _ => nll,
        };
        acc = Some(match acc {
            None => term,
            Some(a) => f.g.add(a, term)?,
        });
    }
    let inv = 1.0 / k_total as f64;
    let mut loss = f.g.scale(acc.expect("at least one pass"), inv);
    let mut kl = cfg.kl_scale * latent_kl * inv;
    if let Some(pk) = f.param_kl() {
        kl += cfg.kl_scale * f.g.value(pk).item();
        let scaled = f.g.scale(pk, cfg.kl_scale);
        loss = f.g.add(loss, scaled)?;
    }
    let mut penalty = 0.0;
    let reg = &cfg.regularizer;
    if reg.kind != RegularizerKind::None && reg.strength > 0.0 {
        let names: Vec<String> = penalised(f.model).cloned().collect();
        for name in names {
            let w = f.param(&name);
            let t = match reg.kind {
                RegularizerKind::L1 => f.g.abs(w),
                RegularizerKind::L2 => f.g.square(w),
                RegularizerKind::Map => {
                    let r = f.g.leaf(reg.reference.as_ref().expect("validated")[&name].clone());
                    let d = f.g.sub(w, r)?;
                    f.g.square(d)
                }
                RegularizerKind::None => unreachable!(),
            };
            let s = f.g.sum(t);
            let s = f.g.scale(s, reg.strength);
            penalty += f.g.value(s).item();
            loss = f.g.add(loss, s)?;
        }
    }
    Ok(Objective {
        loss,
        nll: nll_sum * inv,
        kl,
        penalty,
        tokens: batch.num_targets(),
    })
}

/// Gradient of `loss` for every trainable array touched by `f`, except
/// names matched by `frozen`.
pub fn collect_grads(f: &mut Fwd<'_>, loss: NodeId, frozen: &Frozen) -> Result<BTreeMap<String, Tensor>, TrainError> {
    f.g.backward(loss).map_err(|e| TrainError::Config(e.to_string()))?;
    Ok(f
        .leaves()
        .iter()
        .filter(|(n, _)| is_trainable(n) && !frozen.contains(n))
        .map(|(n, &id)| (n.clone(), f.g.grad(id)))
        .collect())
}

/// Applies one SGD update with `grads` (keyed by array name).
pub fn apply_grads(model: &mut LanguageModel, mut grads: BTreeMap<String, Tensor>, state: &SgdState) -> StepOutcome {
    let mut pairs: Vec<(&mut Tensor, Tensor)> = model
        .arrays_mut()
        .into_iter()
        .filter_map(|(n, t)| grads.remove(&n).map(|g| (t, g)))
        .collect();
    let mut params: Vec<ParamGrad<'_>> = pairs
        .iter_mut()
        .map(|(value, grad)| ParamGrad {
            value: &mut **value,
            grad,
        })
        .collect();
    sgd_step(&mut params, state)
}

/// Array names excluded from updates: exact names, or prefixes ending
/// in `/` (e.g. `arch/`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frozen(pub BTreeSet<String>);

impl Frozen {
    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name) || self.0.iter().any(|p| p.ends_with('/') && name.starts_with(p.as_str()))
    }
}

impl<S: Into<String>> FromIterator<S> for Frozen {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(Into::into).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_floor: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub halving_patience: usize,
    pub num_samples: usize,
    /// `None` means one over the number of training batches.
    pub kl_scale: Option<f64>,
    pub regularizer: RegularizerSpec,
    pub frozen: Frozen,
    /// Reshuffle sentence order every epoch.
    pub shuffle: bool,
    /// Put back the parameters of the best dev epoch at the end.
    pub restore_best: bool,
}

/// Step size that trains the default LSTM on the desk corpus without
/// diverging; larger steps blow up within a few epochs.
pub const DEFAULT_LR: f64 = 0.03;
/// Sampled objectives are noisier and want half the step.
pub const DEFAULT_BAYES_LR: f64 = 0.015;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            lr_floor: 1e-4,
            max_epochs: 30,
            batch_size: 32,
            clip_norm: None,
            halving_patience: 1,
            num_samples: 1,
            kl_scale: None,
            regularizer: RegularizerSpec::none(),
            frozen: Frozen::default(),
            shuffle: true,
            restore_best: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Objective per training token, averaged over the epoch.
    pub train_loss: f64,
    /// Perplexity of the sampled (training-mode) passes.
    pub train_ppl: f64,
    pub dev_ppl: f64,
    pub halved: bool,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochCap,
    LrFloor,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_ppl: f64,
    pub stop: StopReason,
    pub kl_scale: f64,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tlr\ttrain_loss\ttrain_ppl\tdev_ppl\thalved\tskipped\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.epoch, e.lr, e.train_loss, e.train_ppl, e.dev_ppl, e.halved, e.skipped_steps
            );
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (nll {nll}, kl {kl}, penalty {penalty})")]
    NonFinite {
        epoch: usize,
        step: usize,
        loss: f64,
        nll: f64,
        kl: f64,
        penalty: f64,
    },
    #[error("{0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
}

impl From<crate::graph::ShapeError> for TrainError {
    fn from(e: crate::graph::ShapeError) -> Self {
        TrainError::Model(e.into())
    }
}

/// Dev perplexity with posterior means and no dropout.
pub fn dev_perplexity(model: &LanguageModel, dev: &Corpus, vocab: &Vocabulary, batch_size: usize) -> Result<f64, ModelError> {
    Ok(perplexity_from_logprobs(&score_corpus_batched(model, dev, vocab, batch_size)?))
}

/// Minibatch SGD over `train`, halving the learning rate whenever dev
/// perplexity fails to improve. Stops at the epoch cap or once the rate
/// drops below the floor.
pub fn train(
    model: &mut LanguageModel,
    train: &Corpus,
    dev: &Corpus,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<TrainLog, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if cfg.batch_size == 0 || cfg.num_samples == 0 || cfg.max_epochs == 0 {
        return Err(TrainError::Config("batch size, sample count and epoch cap must be positive".into()));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(TrainError::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    cfg.regularizer.validate(model)?;
    let seqs: Vec<Vec<usize>> = train.sentences.iter().map(|s| vocab.encode(s)).collect();
    let num_batches = seqs.len().div_ceil(cfg.batch_size);
    let kl_scale = cfg.kl_scale.unwrap_or(1.0 / num_batches as f64);
    let obj_cfg = ObjectiveConfig {
        num_samples: cfg.num_samples,
        kl_scale,
        dropout: true,
        regularizer: cfg.regularizer.clone(),
    };
    let mut state = SgdState::new(cfg.lr)
        .with_clip_norm(cfg.clip_norm)
        .with_patience(cfg.halving_patience);
    let step_base = rng.derive("train");
    let shuffle_base = rng.derive("shuffle");

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Option<LanguageModel>)> = None;
    let mut stop = StopReason::EpochCap;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        if cfg.shuffle {
            shuffle_base.fork(epoch as u64).shuffle(&mut order);
        }
        let lr = state.lr();
        let (mut loss_sum, mut nll_sum, mut tokens, mut skipped) = (0.0, 0.0, 0usize, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::from_sequences(&idx.iter().map(|&i| seqs[i].clone()).collect::<Vec<_>>());
            let step_rng = step_base.fork(epoch as u64).fork(step as u64);
            let grads = {
                let mut f = Fwd::new(model);
                let obj = objective(&mut f, &batch, &obj_cfg, Some(&step_rng))?;
                let loss = f.g.value(obj.loss).item();
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step,
                        loss,
                        nll: obj.nll,
                        kl: obj.kl,
                        penalty: obj.penalty,
                    });
                }
                loss_sum += loss;
                nll_sum += obj.nll;
                tokens += obj.tokens;
                collect_grads(&mut f, obj.loss, &cfg.frozen)?
            };
            if let StepOutcome::SkippedNonFinite = apply_grads(model, grads, &state) {
                skipped += 1;
            }
        }
        let dev_ppl = dev_perplexity(model, dev, vocab, cfg.batch_size)?;
        let improved = best.as_ref().is_none_or(|(_, b, _)| dev_ppl < *b);
        if improved {
            best = Some((epoch, dev_ppl, cfg.restore_best.then(|| model.clone())));
        }
        let halved = state.observe_dev_ppl(dev_ppl);
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / tokens.max(1) as f64,
            train_ppl: (nll_sum / tokens.max(1) as f64).exp(),
            dev_ppl,
            halved,
            skipped_steps: skipped,
        };
        info!(
            "epoch {epoch}: lr {lr:.4} train loss {:.4} train ppl {:.3} dev ppl {dev_ppl:.3}{}",
            rec.train_loss,
            rec.train_ppl,
            if halved { " (halving)" } else { "" }
        );
        epochs.push(rec);
        if state.lr() < cfg.lr_floor {
            stop = StopReason::LrFloor;
            break;
        }
    }
    let (best_epoch, best_dev_ppl, snapshot) = best.expect("at least one epoch");
    if let Some(snapshot) = snapshot.filter(|_| best_epoch != epochs.len()) {
        debug!("restoring parameters from epoch {best_epoch}");
        *model = snapshot;
    }
    Ok(TrainLog {
        epochs,
        best_epoch,
        best_dev_ppl,
        stop,
        kl_scale,
    })
}
