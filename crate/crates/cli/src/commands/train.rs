use baylm::checkpoint::{init_prior_from_checkpoint, save, CheckpointError};
use baylm::train::{dev_perplexity, train, Frozen, RegularizerKind, RegularizerSpec, TrainConfig, TrainLog};
use baylm::{LanguageModel, RngStream, Vocabulary};
use log::info;
use serde_json::json;

use super::Ctx;
use crate::config::RunConfig;
use crate::data::{load_checkpoint, load_data, load_vocab, Data};
use crate::error::{CliError, Result};

/// The `train.init_from` model and its vocabulary, if configured.
pub fn init_model(cfg: &RunConfig) -> Result<Option<(LanguageModel, Option<Vocabulary>)>> {
    let Some(p) = &cfg.train.init_from else {
        return Ok(None);
    };
    let c = load_checkpoint(p)?;
    Ok(Some((c.model, c.vocab)))
}

/// Point model to build on: the `init_from` checkpoint or fresh weights.
pub fn base_model(cfg: &RunConfig, init: Option<&LanguageModel>, vocab: &Vocabulary, rng: &RngStream) -> Result<LanguageModel> {
    match init {
        Some(m) => {
            if m.vocab_size != vocab.len() {
                return Err(CliError::config(format!(
                    "train.init_from: model has {} outputs but the vocabulary has {} words",
                    m.vocab_size,
                    vocab.len()
                )));
            }
            Ok(m.clone())
        }
        None => Ok(LanguageModel::new(cfg.model.clone(), vocab.len(), &rng.derive("init"))?),
    }
}

/// Adds the configured Bayesian, GP and latent layers to `base`.
pub fn build_model(cfg: &RunConfig, base: &LanguageModel) -> Result<LanguageModel> {
    let mut m =
        init_prior_from_checkpoint(base, &cfg.model, &cfg.bayes.positions, cfg.bayes.prior_sigma).map_err(|e| match e {
            CheckpointError::Model(e) => CliError::from(e).with_key("bayes.positions"),
            e => CliError::from(e).with_key("train.init_from"),
        })?;
    let gp_sigma = cfg.gp.prior_sigma.unwrap_or_else(|| m.default_prior_sigma());
    for &s in &cfg.gp.positions {
        m.add_gp(s, gp_sigma, false).map_err(|e| CliError::from(e).with_key("gp.positions"))?;
    }
    for &s in &cfg.latent.positions {
        m.add_latent(s, cfg.latent.sigma)
            .map_err(|e| CliError::from(e).with_key("latent.positions"))?;
    }
    Ok(m)
}

pub fn train_config(cfg: &RunConfig, reference: Option<&LanguageModel>, max_epochs: usize) -> Result<TrainConfig> {
    let t = &cfg.train;
    let r = &t.regularizer;
    let regularizer = match r.kind {
        RegularizerKind::None => RegularizerSpec::none(),
        RegularizerKind::L1 => RegularizerSpec::l1(r.strength),
        RegularizerKind::L2 => RegularizerSpec::l2(r.strength),
        RegularizerKind::Map => match reference {
            Some(m) => RegularizerSpec::map(r.strength, m),
            None => return Err(CliError::config("train.regularizer.kind: map needs train.init_from")),
        },
    };
    Ok(TrainConfig {
        lr: cfg.learning_rate(),
        lr_floor: t.lr_floor,
        max_epochs,
        batch_size: t.batch_size,
        clip_norm: t.clip_norm,
        halving_patience: t.halving_patience,
        num_samples: t.num_samples,
        kl_scale: t.kl_scale,
        regularizer,
        frozen: t.frozen.iter().cloned().collect::<Frozen>(),
        shuffle: t.shuffle,
        restore_best: t.restore_best,
    })
}

pub fn log_json(log: &TrainLog) -> serde_json::Value {
    json!({
        "best_epoch": log.best_epoch,
        "best_dev_ppl": log.best_dev_ppl,
        "epochs": log.epochs.len(),
        "stop": log.stop,
        "kl_scale": log.kl_scale,
    })
}

/// Dev and test perplexity with posterior means.
pub fn eval_json(model: &LanguageModel, data: &Data, vocab: &Vocabulary, batch: usize) -> Result<serde_json::Value> {
    let ppl = |c: &baylm::Corpus| -> Result<Option<f64>> {
        if c.is_empty() {
            Ok(None)
        } else {
            Ok(Some(dev_perplexity(model, c, vocab, batch)?))
        }
    };
    Ok(json!({ "dev_ppl": ppl(&data.dev)?, "test_ppl": ppl(&data.test)? }))
}

pub fn run(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let init = init_model(cfg)?;
    let data = load_data(cfg)?;
    let vocab = load_vocab(cfg, Some(&data), init.as_ref().and_then(|(_, v)| v.as_ref()))?;
    let base = base_model(cfg, init.as_ref().map(|(m, _)| m), &vocab, &ctx.rng)?;
    let mut model = build_model(cfg, &base)?;
    let tc = train_config(cfg, init.as_ref().map(|(m, _)| m), cfg.train.max_epochs)?;
    info!(
        "training {} free parameters, lr {}",
        model.num_free_params(),
        tc.lr
    );
    let log = train(&mut model, &data.train, &data.dev, &vocab, &tc, &ctx.rng.derive("train"))?;
    save(ctx.out.join("model.ckpt"), &model, Some(&vocab))?;
    ctx.write("train_log.tsv", log.to_tsv())?;
    let summary = json!({
        "model": model.arch.kind(),
        "vocab_size": vocab.len(),
        "free_params": model.num_free_params(),
        "lr": tc.lr,
        "train": log_json(&log),
        "eval": eval_json(&model, &data, &vocab, tc.batch_size)?,
    });
    ctx.write_json("summary.json", &summary)?;
    println!("best_dev_ppl\t{}", log.best_dev_ppl);
    Ok(())
}
