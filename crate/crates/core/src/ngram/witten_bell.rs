//! Interpolated Witten-Bell estimation written out in back-off form.
//!
//! The unigram level interpolates with a uniform distribution over every
//! predictable symbol, so no word has zero probability. Higher orders mix
//! the maximum-likelihood estimate with the next lower order, weighted by
//! the number of distinct continuations of the context. The back-off weight
//! of a context is whatever mass is left for its unseen words, renormalised
//! by the lower-order mass of those same words.

use std::collections::BTreeMap;

use super::{ArpaError, ArpaModel, NgramEntry, NEVER_PREDICTED};
use crate::corpus::{Corpus, Vocabulary, BOS};

/// Trains an `order`-gram model over `vocab`. Out-of-vocabulary words are
/// counted as `<unk>`. Each sentence is padded with a single `<s>`.
pub fn train_witten_bell(corpus: &Corpus, vocab: &Vocabulary, order: usize) -> Result<ArpaModel, ArpaError> {
    if order == 0 {
        return Err(ArpaError::BadOrder(order));
    }
    // counts[k] maps a (k+1)-gram of ids to its count
    let mut counts: Vec<BTreeMap<Vec<usize>, u64>> = vec![BTreeMap::new(); order];
    for s in &corpus.sentences {
        let ids = vocab.encode(s);
        for t in 1..ids.len() {
            for n in 1..=order.min(t + 1) {
                *counts[n - 1].entry(ids[t + 1 - n..=t].to_vec()).or_default() += 1;
            }
        }
    }

    let targets: Vec<usize> = (0..vocab.len()).filter(|&i| i != vocab.bos()).collect();
    let tok = |ids: &[usize]| ids.iter().map(|&i| vocab.token(i).to_owned()).collect::<Vec<_>>();
    let mut model = ArpaModel::with_order(order);

    // unigrams
    let total: u64 = counts[0].values().sum();
    let types = counts[0].len() as f64;
    let uniform = 1.0 / targets.len() as f64;
    let denom = total as f64 + types;
    for &w in &targets {
        let c = counts[0].get(&vec![w]).copied().unwrap_or(0) as f64;
        let p = (c + types * uniform) / denom;
        model.insert(tok(&[w]), NgramEntry { logprob: p.log10(), backoff: None });
    }
    model.insert(
        vec![BOS.to_owned()],
        NgramEntry { logprob: NEVER_PREDICTED, backoff: None },
    );

    for n in 2..=order {
        // group the n-grams by context
        let mut by_ctx: BTreeMap<&[usize], Vec<(usize, u64)>> = BTreeMap::new();
        for (gram, &c) in &counts[n - 1] {
            by_ctx.entry(&gram[..n - 1]).or_default().push((gram[n - 1], c));
        }
        let mut new_entries = Vec::new();
        let mut backoffs = Vec::new();
        for (ctx, conts) in by_ctx {
            let ctx_tokens = tok(ctx);
            let lower_ctx = &ctx_tokens[1..];
            let c_h: u64 = conts.iter().map(|&(_, c)| c).sum();
            let t_h = conts.len() as f64;
            let d = c_h as f64 + t_h;
            let mut seen_mass = 0.0;
            let mut seen_lower = 0.0;
            for &(w, c) in &conts {
                let word = vocab.token(w);
                let lower = 10f64.powf(model.logprob(lower_ctx, word));
                let p = (c as f64 + t_h * lower) / d;
                seen_mass += p;
                seen_lower += lower;
                let mut gram = ctx_tokens.clone();
                gram.push(word.to_owned());
                new_entries.push((gram, p.log10()));
            }
            let left = 1.0 - seen_mass;
            let left_lower = 1.0 - seen_lower;
            // every predictable word already seen: nothing to back off to
            let bow = if left_lower <= 1e-15 || left <= 0.0 { 1.0 } else { left / left_lower };
            backoffs.push((ctx_tokens, bow.log10()));
        }
        for (gram, lp) in new_entries {
            model.insert(gram, NgramEntry { logprob: lp, backoff: None });
        }
        for (ctx, b) in backoffs {
            let entry = model
                .get(&ctx)
                .copied()
                .expect("every context is itself a stored lower-order n-gram");
            model.insert(ctx, NgramEntry { backoff: Some(b), ..entry });
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(order: usize) -> (Vocabulary, ArpaModel) {
        let c = Corpus::parse("a b a c\nb a b\na a\nc b a\n");
        let v = Vocabulary::build(&c, 1).unwrap();
        let m = train_witten_bell(&c, &v, order).unwrap();
        (v, m)
    }

    fn mass(m: &ArpaModel, v: &Vocabulary, ctx: &[&str]) -> f64 {
        v.tokens()
            .iter()
            .filter(|t| t.as_str() != BOS)
            .map(|w| 10f64.powf(m.logprob(ctx, w)))
            .sum()
    }

    #[test]
    fn distributions_normalise() {
        for order in 1..=3 {
            let (v, m) = setup(order);
            for ctx in [&[][..], &["<s>"], &["a"], &["c"], &["<s>", "a"], &["b", "a"], &["c", "c"]] {
                let s = mass(&m, &v, ctx);
                assert!((s - 1.0).abs() < 1e-10, "order {order} ctx {ctx:?}: {s}");
            }
        }
    }

    #[test]
    fn unigram_matches_hand_computation() {
        // 16 predicted tokens, 4 types (a b c </s>), 5 predictable symbols
        let (_, m) = setup(1);
        let p_a: f64 = (6.0 + 4.0 / 5.0) / (16.0 + 4.0);
        assert!((m.logprob::<&str>(&[], "a") - p_a.log10()).abs() < 1e-12);
        let p_unk: f64 = (4.0 / 5.0) / 20.0;
        assert!((m.logprob::<&str>(&[], "<unk>") - p_unk.log10()).abs() < 1e-12);
        assert!((m.logprob::<&str>(&[], "never") - p_unk.log10()).abs() < 1e-12);
    }

    #[test]
    fn bigram_matches_interpolation() {
        let (_, m1) = setup(1);
        let (_, m2) = setup(2);
        // after "c": "c b" once, "c </s>" once; T = 2, c(h) = 2
        let p1 = |w: &str| 10f64.powf(m1.logprob::<&str>(&[], w));
        let want_b = (1.0 + 2.0 * p1("b")) / 4.0;
        let want_a = (0.0 + 2.0 * p1("a")) / 4.0;
        assert!((10f64.powf(m2.logprob(&["c"], "b")) - want_b).abs() < 1e-12);
        assert!((10f64.powf(m2.logprob(&["c"], "a")) - want_a).abs() < 1e-12);
    }

    #[test]
    fn zero_order_rejected_and_round_trip() {
        let c = Corpus::parse("a\n");
        let v = Vocabulary::build(&c, 1).unwrap();
        assert_eq!(train_witten_bell(&c, &v, 0), Err(ArpaError::BadOrder(0)));
        let (_, m) = setup(3);
        assert_eq!(ArpaModel::parse(&m.to_arpa()).unwrap(), m);
    }
}
