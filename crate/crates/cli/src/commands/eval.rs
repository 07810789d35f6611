use std::fmt::Write as _;

use baylm::eval::interp::em_fit_from_logprobs;
use baylm::eval::nbest::{acoustic_best, choice_wer, read_nbest, read_refs, write_rescored};
use baylm::eval::scorer::score_corpus;
use baylm::eval::wer::wer;
use baylm::eval::{perplexity_from_logprobs, rescore_nbest, snr_report, InterpolationMixture, LmScorer, RescoreConfig};
use baylm::{Corpus, Vocabulary};
use serde_json::json;

use super::Ctx;
use crate::config::LmSource;
use crate::data::{load_checkpoint, load_data, load_lms, LoadedLms};
use crate::error::{CliError, Result};

fn corpus_stats(logprobs: &[Vec<f64>]) -> serde_json::Value {
    let tokens: usize = logprobs.iter().map(Vec::len).sum();
    let total: f64 = logprobs.iter().flatten().sum();
    json!({
        "sentences": logprobs.len(),
        "tokens": tokens,
        "log_prob": total,
        "perplexity": perplexity_from_logprobs(logprobs),
    })
}

pub fn ppl(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let lms = load_lms(cfg, "eval.model", std::slice::from_ref(&cfg.eval.model))?;
    let (corpus, name) = match &cfg.eval.corpus {
        Some(p) => (Corpus::read(p).map_err(|e| CliError::from(e).with_file(p))?, p.display().to_string()),
        None => (
            load_data(cfg)?.split(cfg.eval.split).clone(),
            format!("{:?}", cfg.eval.split).to_lowercase(),
        ),
    };
    if corpus.is_empty() {
        return Err(CliError::data(format!("eval: corpus `{name}` is empty")));
    }
    let scorers = lms.scorers();
    let lp = score_corpus(scorers[0].as_ref(), &corpus, &lms.vocab);
    let mut report = corpus_stats(&lp);
    report["corpus"] = json!(name);
    report["model"] = json!(lms.labels[0]);
    ctx.write_json("ppl.json", &report)?;
    println!("perplexity\t{}", report["perplexity"]);
    Ok(())
}

/// Dev-set token log-probabilities of every scorer.
fn token_logprobs(scorers: &[&dyn LmScorer], dev: &Corpus, vocab: &Vocabulary) -> Vec<Vec<f64>> {
    scorers
        .iter()
        .map(|s| score_corpus(*s, dev, vocab).into_iter().flatten().collect())
        .collect()
}

/// Fixed weights, or EM on `dev`. Returns the weights and the EM trace.
fn mixture_weights(
    key: &str,
    scorers: &[&dyn LmScorer],
    fixed: Option<&Vec<f64>>,
    dev: &Corpus,
    vocab: &Vocabulary,
    max_iters: usize,
    tol: f64,
) -> Result<(Vec<f64>, Option<baylm::eval::EmFit>)> {
    if let Some(w) = fixed {
        if w.len() != scorers.len() {
            return Err(CliError::config(format!(
                "{key}.weights: {} weights for {} components",
                w.len(),
                scorers.len()
            )));
        }
        return Ok((w.clone(), None));
    }
    if scorers.len() == 1 {
        return Ok((vec![1.0], None));
    }
    if dev.is_empty() {
        return Err(CliError::data(format!("{key}: fitting weights needs a dev corpus (data.dev)")));
    }
    let fit = em_fit_from_logprobs(&token_logprobs(scorers, dev, vocab), max_iters, tol)?;
    let mut w = fit.weights.clone();
    // exact simplex for the mixture constructor
    let rest: f64 = w[1..].iter().sum();
    w[0] = (1.0 - rest).max(0.0);
    Ok((w, Some(fit)))
}

fn mixture<'a>(key: &str, scorers: &'a [Box<dyn LmScorer + 'a>], weights: Vec<f64>) -> Result<InterpolationMixture<'a>> {
    let refs: Vec<&dyn LmScorer> = scorers.iter().map(|s| s.as_ref() as &dyn LmScorer).collect();
    InterpolationMixture::new(refs, weights).map_err(|e| CliError::config(format!("{key}: {e}")))
}

fn em_trace_tsv(fit: &baylm::eval::EmFit) -> String {
    let mut out = String::from("iter\tdev_log_likelihood\n");
    for (i, ll) in fit.log_likelihood.iter().enumerate() {
        let _ = writeln!(out, "{i}\t{ll}");
    }
    out
}

pub fn interp(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let ic = &cfg.interp;
    if ic.components.len() < 2 {
        return Err(CliError::config("interp.components: needs at least two models"));
    }
    let lms = load_lms(cfg, "interp.components", &ic.components)?;
    let data = load_data(cfg)?;
    let scorers = lms.scorers();
    let refs: Vec<&dyn LmScorer> = scorers.iter().map(|s| s.as_ref() as &dyn LmScorer).collect();
    let (weights, fit) = mixture_weights("interp", &refs, ic.weights.as_ref(), &data.dev, &lms.vocab, ic.max_iters, ic.tol)?;
    let mix = mixture("interp.weights", &scorers, weights.clone())?;

    let mut splits = serde_json::Map::new();
    for (name, c) in [("dev", &data.dev), ("test", &data.test)] {
        if c.is_empty() {
            continue;
        }
        let per: Vec<f64> = refs
            .iter()
            .map(|s| perplexity_from_logprobs(&score_corpus(*s, c, &lms.vocab)))
            .collect();
        let mixed = perplexity_from_logprobs(&score_corpus(&mix, c, &lms.vocab));
        splits.insert(name.into(), json!({ "components": per, "mixture": mixed }));
        println!("{name}_ppl\t{mixed}");
    }
    let report = json!({
        "components": lms.labels,
        "weights": weights,
        "em_iterations": fit.as_ref().map(|f| f.log_likelihood.len() - 1),
        "converged": fit.as_ref().map(|f| f.converged),
        "perplexity": splits,
    });
    ctx.write_json("interp.json", &report)?;
    if let Some(f) = &fit {
        ctx.write("em_trace.tsv", em_trace_tsv(f))?;
    }
    Ok(())
}

fn lowest_wer(list: &baylm::eval::NBestList, reference: &[String]) -> Option<usize> {
    let errs: Vec<usize> = list.hyps.iter().map(|h| wer(reference, &h.words).errors()).collect();
    (0..errs.len()).min_by_key(|&i| errs[i])
}

pub fn rescore(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let rc = &cfg.rescore;
    let nbest = rc.nbest.as_ref().ok_or_else(|| CliError::config("rescore.nbest: not set"))?;
    let refs_path = rc.refs.as_ref().ok_or_else(|| CliError::config("rescore.refs: not set"))?;
    let (key, sources, fixed): (&str, &[LmSource], Option<&Vec<f64>>) = if rc.components.is_empty() {
        ("interp", &cfg.interp.components, cfg.interp.weights.as_ref())
    } else {
        ("rescore", &rc.components, rc.weights.as_ref())
    };
    let lms: LoadedLms = load_lms(cfg, &format!("{key}.components"), sources)?;
    let lists = read_nbest(nbest).map_err(|e| CliError::from(e).with_file(nbest))?;
    let refs = read_refs(refs_path).map_err(|e| CliError::from(e).with_file(refs_path))?;
    if let Some(l) = lists.iter().find(|l| !refs.contains_key(&l.utt)) {
        return Err(CliError::data(format!("{}: no reference for utterance {}", refs_path.display(), l.utt)));
    }

    let scorers = lms.scorers();
    let srefs: Vec<&dyn LmScorer> = scorers.iter().map(|s| s.as_ref() as &dyn LmScorer).collect();
    let dev = if fixed.is_none() && srefs.len() > 1 {
        load_data(cfg)?.dev
    } else {
        Corpus::default()
    };
    let (weights, _) = mixture_weights(key, &srefs, fixed, &dev, &lms.vocab, cfg.interp.max_iters, cfg.interp.tol)?;
    let mix = mixture(&format!("{key}.weights"), &scorers, weights.clone())?;
    let rcfg = RescoreConfig {
        lm_scale: rc.lm_scale,
        insertion_penalty: rc.insertion_penalty,
    };
    let rescored = rescore_nbest(&lists, &mix, &lms.vocab, &rcfg);
    ctx.write("rescored.tsv", write_rescored(&lists, &rescored))?;

    let pick = |choices: Vec<Option<usize>>| choice_wer(&lists, &choices, &refs);
    let acoustic = pick(lists.iter().map(acoustic_best).collect())?;
    let lm = pick(rescored.iter().map(|r| r.best).collect())?;
    let oracle = pick(lists.iter().map(|l| lowest_wer(l, &refs[&l.utt])).collect())?;
    let report = json!({
        "components": lms.labels,
        "weights": weights,
        "lm_scale": rc.lm_scale,
        "insertion_penalty": rc.insertion_penalty,
        "utterances": lists.len(),
        "skipped": lists.iter().filter(|l| l.hyps.is_empty()).count(),
        "acoustic": acoustic,
        "rescored": lm,
        "oracle": oracle,
    });
    ctx.write_json("wer.json", &report)?;
    println!("acoustic_wer\t{}", acoustic.rate);
    println!("rescored_wer\t{}", lm.rate);
    Ok(())
}

pub fn snr(ctx: &Ctx) -> Result<()> {
    let p = ctx
        .cfg
        .snr
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config("snr.checkpoint: not set"))?;
    let model = load_checkpoint(p)?.model;
    let report = snr_report(&model);
    if report.rows.is_empty() {
        return Err(CliError::config(format!(
            "snr.checkpoint: {} has no variational posteriors",
            p.display()
        )));
    }
    ctx.write("snr.tsv", report.to_tsv())?;
    let rows: serde_json::Map<String, serde_json::Value> =
        report.rows.iter().map(|r| (r.name.clone(), json!(r.median))).collect();
    ctx.write_json("snr.json", &json!({ "overall_median": report.overall_median, "medians": rows }))?;
    println!("median_snr\t{}", report.overall_median);
    Ok(())
}
