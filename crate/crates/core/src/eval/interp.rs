//! Linear interpolation of language models with EM-fitted weights.

use log::warn;

use super::scorer::{score_corpus, LmScorer};
use crate::corpus::{Corpus, Vocabulary};
use crate::graph::log_sum_exp;

/// `P(w | h) = sum_c lambda_c P_c(w | h)`.
pub struct InterpolationMixture<'a> {
    pub components: Vec<&'a dyn LmScorer>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MixtureError {
    #[error("{components} components but {weights} weights")]
    Count { components: usize, weights: usize },
    #[error("weights must be nonnegative and sum to 1, got {0:?}")]
    NotSimplex(Vec<f64>),
    #[error("components disagree on the vocabulary size")]
    Vocab,
    #[error("interpolation needs at least two components")]
    TooFew,
    #[error("development corpus has no tokens")]
    EmptyDev,
}

impl<'a> InterpolationMixture<'a> {
    pub fn new(components: Vec<&'a dyn LmScorer>, weights: Vec<f64>) -> Result<Self, MixtureError> {
        if components.len() != weights.len() {
            return Err(MixtureError::Count {
                components: components.len(),
                weights: weights.len(),
            });
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(MixtureError::NotSimplex(weights));
        }
        if components.windows(2).any(|p| p[0].vocab_size() != p[1].vocab_size()) {
            return Err(MixtureError::Vocab);
        }
        Ok(Self { components, weights })
    }

    fn combine(&self, per_component: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(per_component)
            .filter(|(&w, _)| w > 0.0)
            .map(|(&w, &lp)| w.ln() + lp)
            .collect();
        log_sum_exp(&terms)
    }
}

impl LmScorer for InterpolationMixture<'_> {
    fn vocab_size(&self) -> usize {
        self.components[0].vocab_size()
    }

    fn score_sentence(&self, ids: &[usize]) -> Vec<f64> {
        self.score_sentences(&[ids.to_vec()]).remove(0)
    }

    fn score_sentences(&self, sents: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let per: Vec<Vec<Vec<f64>>> = self.components.iter().map(|c| c.score_sentences(sents)).collect();
        (0..sents.len())
            .map(|s| {
                (0..per[0][s].len())
                    .map(|t| self.combine(&per.iter().map(|c| c[s][t]).collect::<Vec<_>>()))
                    .collect()
            })
            .collect()
    }

    fn distribution(&self, context: &[usize]) -> Vec<f64> {
        let per: Vec<Vec<f64>> = self.components.iter().map(|c| c.distribution(context)).collect();
        (0..self.vocab_size())
            .map(|w| self.combine(&per.iter().map(|d| d[w]).collect::<Vec<_>>()))
            .collect()
    }

    fn logprob(&self, context: &[usize], word: usize) -> f64 {
        let per: Vec<f64> = self.components.iter().map(|c| c.logprob(context, word)).collect();
        self.combine(&per)
    }
}

/// Natural-log interpolated probability of `word` after `context`.
pub fn interp_logprob(mixture: &InterpolationMixture<'_>, context: &[usize], word: usize) -> f64 {
    mixture.logprob(context, word)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub weights: Vec<f64>,
    /// Dev log-likelihood before the first update and after each one.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

fn mixture_ll(weights: &[f64], logprobs: &[Vec<f64>]) -> f64 {
    let tokens = logprobs[0].len();
    (0..tokens)
        .map(|t| {
            let terms: Vec<f64> = weights
                .iter()
                .zip(logprobs)
                .filter(|(&w, _)| w > 0.0)
                .map(|(&w, lp)| w.ln() + lp[t])
                .collect();
            log_sum_exp(&terms)
        })
        .sum()
}

/// Mixture EM on per-token component log-probabilities
/// (`logprobs[c][t]`), starting from uniform weights. Stops when an
/// iteration improves the log-likelihood by less than `tol`.
pub fn em_fit_from_logprobs(logprobs: &[Vec<f64>], max_iters: usize, tol: f64) -> Result<EmFit, MixtureError> {
    let c = logprobs.len();
    if c < 2 {
        return Err(MixtureError::TooFew);
    }
    let tokens = logprobs[0].len();
    if tokens == 0 {
        return Err(MixtureError::EmptyDev);
    }
    let mut weights = vec![1.0 / c as f64; c];
    let mut history = vec![mixture_ll(&weights, logprobs)];
    let mut converged = false;
    for _ in 0..max_iters {
        let mut acc = vec![0.0; c];
        for t in 0..tokens {
            let terms: Vec<f64> = (0..c)
                .map(|k| if weights[k] > 0.0 { weights[k].ln() + logprobs[k][t] } else { f64::NEG_INFINITY })
                .collect();
            let norm = log_sum_exp(&terms);
            if norm == f64::NEG_INFINITY {
                continue;
            }
            for k in 0..c {
                acc[k] += (terms[k] - norm).exp();
            }
        }
        let total: f64 = acc.iter().sum();
        weights = acc.iter().map(|a| a / total).collect();
        let ll = mixture_ll(&weights, logprobs);
        let gain = ll - history.last().copied().unwrap_or(f64::NEG_INFINITY);
        history.push(ll);
        if gain < tol {
            converged = true;
            break;
        }
    }
    for (k, lp) in logprobs.iter().enumerate() {
        if lp.iter().all(|&v| v == f64::NEG_INFINITY) {
            warn!("interpolation component {k} gives zero probability to every dev token; its weight is {}", weights[k]);
        }
    }
    Ok(EmFit {
        weights,
        log_likelihood: history,
        converged,
    })
}

/// Scores `dev` with every component and fits interpolation weights.
pub fn em_fit_weights<'a>(
    components: Vec<&'a dyn LmScorer>,
    dev: &Corpus,
    vocab: &Vocabulary,
    max_iters: usize,
    tol: f64,
) -> Result<(InterpolationMixture<'a>, EmFit), MixtureError> {
    if components.len() < 2 {
        return Err(MixtureError::TooFew);
    }
    let logprobs: Vec<Vec<f64>> = components
        .iter()
        .map(|c| score_corpus(*c, dev, vocab).into_iter().flatten().collect())
        .collect();
    let fit = em_fit_from_logprobs(&logprobs, max_iters, tol)?;
    let mut weights = fit.weights.clone();
    // exact simplex for the mixture constructor
    let rest: f64 = weights[1..].iter().sum();
    weights[0] = (1.0 - rest).max(0.0);
    let mix = InterpolationMixture::new(components, weights)?;
    Ok((mix, fit))
}
