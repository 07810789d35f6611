use baylm::eval::{perplexity, ArpaScorer};
use baylm::ngram::train_witten_bell;
use baylm::{Corpus, Vocabulary};
use serde_json::json;

use super::Ctx;
use crate::data::{load_data, load_vocab};
use crate::error::Result;

fn oov_rate(c: &Corpus, v: &Vocabulary) -> f64 {
    let (mut oov, mut n) = (0usize, 0usize);
    for w in c.sentences.iter().flatten() {
        n += 1;
        oov += usize::from(!v.contains(w));
    }
    if n == 0 {
        0.0
    } else {
        oov as f64 / n as f64
    }
}

/// Writes the corpus splits, the vocabulary and a Witten-Bell n-gram
/// model, plus a few statistics.
pub fn run(ctx: &Ctx) -> Result<()> {
    let data = load_data(&ctx.cfg)?;
    let vocab = load_vocab(&ctx.cfg, Some(&data), None)?;
    ctx.write("train.txt", data.train.to_text())?;
    ctx.write("dev.txt", data.dev.to_text())?;
    ctx.write("test.txt", data.test.to_text())?;
    ctx.write("vocab.txt", vocab.to_text())?;

    let order = ctx.cfg.ngram.order;
    let arpa = train_witten_bell(&data.train, &vocab, order)?;
    ctx.write("ngram.arpa", arpa.to_arpa())?;
    let scorer = ArpaScorer { model: &arpa, vocab: &vocab };
    let split = |c: &Corpus| {
        json!({
            "sentences": c.len(),
            "tokens": c.num_targets(),
            "oov_rate": oov_rate(c, &vocab),
            "ngram_ppl": if c.is_empty() { None } else { Some(perplexity(&scorer, c, &vocab)) },
        })
    };
    let stats = json!({
        "vocab_size": vocab.len(),
        "ngram_order": order,
        "train": split(&data.train),
        "dev": split(&data.dev),
        "test": split(&data.test),
    });
    ctx.write_json("stats.json", &stats)?;
    println!("vocabulary\t{}", vocab.len());
    Ok(())
}
