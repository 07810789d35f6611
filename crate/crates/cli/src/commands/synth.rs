use std::collections::BTreeMap;

use baylm::eval::nbest::{write_nbest, write_refs};
use baylm::synth::{grammar_words, splits, synth_nbest, NBestSynthConfig};
use baylm::{Corpus, RngStream};

use super::Ctx;
use crate::error::Result;

fn refs(prefix: &str, c: &Corpus) -> BTreeMap<String, Vec<String>> {
    c.sentences
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("{prefix}-{i:04}"), s.clone()))
        .collect()
}

/// Generated corpus splits plus n-best lists and references for the dev
/// and test sentences.
pub fn run(ctx: &Ctx) -> Result<()> {
    let sc = &ctx.cfg.synth;
    let s = splits(sc.train, sc.dev, sc.test, &RngStream::new(ctx.cfg.data.corpus_seed));
    ctx.write("train.txt", s.train.to_text())?;
    ctx.write("dev.txt", s.dev.to_text())?;
    ctx.write("test.txt", s.test.to_text())?;
    let ncfg = NBestSynthConfig {
        list_size: sc.list_size,
        error_cost: sc.error_cost,
        noise: sc.noise,
    };
    let words = grammar_words();
    for (name, c) in [("dev", &s.dev), ("test", &s.test)] {
        let r = refs(name, c);
        let lists = synth_nbest(&r, &words, &ncfg, &ctx.rng.derive(name));
        ctx.write(&format!("{name}.refs"), write_refs(&r))?;
        ctx.write(&format!("{name}.nbest"), write_nbest(&lists))?;
    }
    println!("sentences\t{}\t{}\t{}", s.train.len(), s.dev.len(), s.test.len());
    Ok(())
}
