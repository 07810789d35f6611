//! Perplexity over predicted tokens.

use super::scorer::{score_corpus, LmScorer};
use crate::corpus::{Corpus, Vocabulary};

/// `exp(-(1/T) sum ln p)` over every target. Start symbols are never
/// targets; end symbols are. A zero-probability target gives `inf`.
pub fn perplexity_from_logprobs<'a>(logprobs: impl IntoIterator<Item = &'a Vec<f64>>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in logprobs {
        for &lp in s {
            total += lp;
            count += 1;
        }
    }
    if count == 0 {
        return f64::NAN;
    }
    if total == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    (-total / count as f64).exp()
}

pub fn perplexity(scorer: &dyn LmScorer, corpus: &Corpus, vocab: &Vocabulary) -> f64 {
    perplexity_from_logprobs(&score_corpus(scorer, corpus, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::scorer::UniformScorer;

    #[test]
    fn uniform_over_five() {
        let c = Corpus::parse("a b\nb\n");
        let v = Vocabulary::build(&c, 1).unwrap();
        assert_eq!(v.len(), 5);
        let p = perplexity(&UniformScorer { size: 5 }, &c, &v);
        assert!((p - 5.0).abs() < 1e-12);
    }

    #[test]
    fn hand_pair() {
        let lp = vec![vec![0.5f64.ln(), 0.125f64.ln()]];
        assert!((perplexity_from_logprobs(&lp) - 4.0).abs() < 1e-12);
        let zero = vec![vec![0.5f64.ln(), f64::NEG_INFINITY]];
        assert_eq!(perplexity_from_logprobs(&zero), f64::INFINITY);
    }
}
