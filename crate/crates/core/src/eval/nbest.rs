//! N-best lists: reading, writing and rescoring.
//!
//! One hypothesis per line, `utt-id<TAB>hyp-index<TAB>ac<TAB>lm<TAB>words`,
//! with the words separated by spaces. Reference files hold
//! `utt-id<TAB>words`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use super::scorer::LmScorer;
use super::wer::{corpus_wer, wer, WerResult};
use crate::corpus::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub index: usize,
    pub acoustic: f64,
    /// LM score supplied with the list; replaced when rescoring.
    pub lm: f64,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NBestList {
    pub utt: String,
    pub hyps: Vec<Hypothesis>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NBestError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("no reference for utterance {0}")]
    MissingRef(String),
    #[error("{0}")]
    Io(String),
}

fn read_text(path: &Path) -> Result<String, NBestError> {
    std::fs::read_to_string(path).map_err(|e| NBestError::Io(format!("{}: {e}", path.display())))
}

/// Parses an n-best file. Utterances keep their first-seen order and
/// hypotheses are sorted by index.
pub fn parse_nbest(text: &str) -> Result<Vec<NBestList>, NBestError> {
    let mut lists: Vec<NBestList> = Vec::new();
    let mut pos: BTreeMap<String, usize> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| NBestError::Malformed {
            line: line_no,
            msg: msg.to_string(),
        };
        let mut f = line.splitn(5, '\t');
        let utt = f.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("missing utterance id"))?;
        let index: usize = f
            .next()
            .ok_or_else(|| bad("missing hypothesis index"))?
            .trim()
            .parse()
            .map_err(|_| bad("hypothesis index is not an integer"))?;
        let num = |s: Option<&str>, what: &str| -> Result<f64, NBestError> {
            let v: f64 = s
                .ok_or_else(|| bad(&format!("missing {what} score")))?
                .trim()
                .parse()
                .map_err(|_| bad(&format!("{what} score is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(&format!("{what} score is not finite")))
            }
        };
        let acoustic = num(f.next(), "acoustic")?;
        let lm = num(f.next(), "lm")?;
        let words = f.next().unwrap_or("").split_whitespace().map(str::to_string).collect();
        let k = *pos.entry(utt.to_string()).or_insert_with(|| {
            lists.push(NBestList {
                utt: utt.to_string(),
                hyps: Vec::new(),
            });
            lists.len() - 1
        });
        if lists[k].hyps.iter().any(|h| h.index == index) {
            return Err(bad(&format!("duplicate hypothesis {index} for {utt}")));
        }
        lists[k].hyps.push(Hypothesis {
            index,
            acoustic,
            lm,
            words,
        });
    }
    for l in &mut lists {
        l.hyps.sort_by_key(|h| h.index);
    }
    Ok(lists)
}

pub fn read_nbest(path: impl AsRef<Path>) -> Result<Vec<NBestList>, NBestError> {
    parse_nbest(&read_text(path.as_ref())?)
}

pub fn write_nbest(lists: &[NBestList]) -> String {
    let mut out = String::new();
    for l in lists {
        for h in &l.hyps {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", l.utt, h.index, h.acoustic, h.lm, h.words.join(" "));
        }
    }
    out
}

pub fn parse_refs(text: &str) -> Result<BTreeMap<String, Vec<String>>, NBestError> {
    let mut refs = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (utt, words) = line.split_once('\t').unwrap_or((line, ""));
        if utt.is_empty() {
            return Err(NBestError::Malformed {
                line: i + 1,
                msg: "missing utterance id".into(),
            });
        }
        refs.insert(utt.to_string(), words.split_whitespace().map(str::to_string).collect());
    }
    Ok(refs)
}

pub fn read_refs(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<String>>, NBestError> {
    parse_refs(&read_text(path.as_ref())?)
}

pub fn write_refs(refs: &BTreeMap<String, Vec<String>>) -> String {
    refs.iter().map(|(u, w)| format!("{u}\t{}\n", w.join(" "))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescoreConfig {
    pub lm_scale: f64,
    pub insertion_penalty: f64,
}

impl Default for RescoreConfig {
    fn default() -> Self {
        Self {
            lm_scale: 12.0,
            insertion_penalty: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rescored {
    pub utt: String,
    /// Position in `hyps` of the best hypothesis; `None` for an empty list.
    pub best: Option<usize>,
    /// Natural-log LM probability of each hypothesis sentence.
    pub lm_logprobs: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Index of the maximum; ties go to the lowest index.
fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.is_none_or(|b| x > v[b]) {
            best = Some(i);
        }
    }
    best
}

/// Combined score `ac + lm_scale * ln P(words) + ip * |words|`.
pub fn combined_score(acoustic: f64, lm_logprob: f64, n_words: usize, cfg: &RescoreConfig) -> f64 {
    acoustic + cfg.lm_scale * lm_logprob + cfg.insertion_penalty * n_words as f64
}

/// Rescores every list with `scorer` and picks the best hypothesis.
pub fn rescore_nbest(
    lists: &[NBestList],
    scorer: &dyn LmScorer,
    vocab: &Vocabulary,
    cfg: &RescoreConfig,
) -> Vec<Rescored> {
    let sents: Vec<Vec<usize>> = lists
        .iter()
        .flat_map(|l| l.hyps.iter().map(|h| vocab.encode(&h.words)))
        .collect();
    let mut scored = scorer.score_sentences(&sents).into_iter();
    lists
        .iter()
        .map(|l| {
            let lm_logprobs: Vec<f64> = l
                .hyps
                .iter()
                .map(|_| scored.next().expect("one score per hypothesis").iter().sum())
                .collect();
            let scores: Vec<f64> = l
                .hyps
                .iter()
                .zip(&lm_logprobs)
                .map(|(h, &lp)| combined_score(h.acoustic, lp, h.words.len(), cfg))
                .collect();
            if l.hyps.is_empty() {
                warn!("utterance {} has no hypotheses; skipped", l.utt);
            }
            Rescored {
                utt: l.utt.clone(),
                best: argmax(&scores),
                lm_logprobs,
                scores,
            }
        })
        .collect()
}

/// Position of the best hypothesis by acoustic score alone.
pub fn acoustic_best(list: &NBestList) -> Option<usize> {
    argmax(&list.hyps.iter().map(|h| h.acoustic).collect::<Vec<_>>())
}

/// Pooled WER of one chosen hypothesis per list; lists without a choice
/// are left out.
pub fn choice_wer(
    lists: &[NBestList],
    choices: &[Option<usize>],
    refs: &BTreeMap<String, Vec<String>>,
) -> Result<WerResult, NBestError> {
    let mut results = Vec::with_capacity(lists.len());
    for (l, c) in lists.iter().zip(choices) {
        let Some(c) = *c else { continue };
        let r = refs.get(&l.utt).ok_or_else(|| NBestError::MissingRef(l.utt.clone()))?;
        results.push(wer(r, &l.hyps[c].words));
    }
    Ok(corpus_wer(&results))
}

/// Tab-separated rescoring output: utterance, chosen index, score, words.
pub fn write_rescored(lists: &[NBestList], rescored: &[Rescored]) -> String {
    let mut out = String::from("utt\thyp\tscore\twords\n");
    for (l, r) in lists.iter().zip(rescored) {
        let Some(b) = r.best else { continue };
        let h = &l.hyps[b];
        let _ = writeln!(out, "{}\t{}\t{}\t{}", l.utt, h.index, r.scores[b], h.words.join(" "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::scorer::UniformScorer;

    const LIST: &str = "u1\t1\t-3.0\t0\ta b c\nu1\t0\t-2.0\t0\ta b\nu2\t0\t-1.0\t0\t\n";

    #[test]
    fn round_trip() {
        let lists = parse_nbest(LIST).unwrap();
        assert_eq!(lists.len(), 2);
        assert_eq!(lists[0].hyps[0].index, 0);
        assert!(lists[1].hyps[0].words.is_empty());
        assert_eq!(parse_nbest(&write_nbest(&lists)).unwrap(), lists);
    }

    #[test]
    fn malformed_lines() {
        let err = parse_nbest("u1\t0\t-1.0\n").unwrap_err();
        assert!(matches!(err, NBestError::Malformed { line: 1, .. }));
        let err = parse_nbest("u1\t0\t-1\t0\ta\nu1\tx\t-1\t0\ta\n").unwrap_err();
        assert!(matches!(err, NBestError::Malformed { line: 2, .. }));
        assert!(parse_nbest("u1\t0\t-1\t0\ta\nu1\t0\t-2\t0\tb\n").is_err());
    }

    #[test]
    fn uniform_lm_penalises_length() {
        let lists = parse_nbest("u\t0\t-1.0\t0\ta b c\nu\t1\t-1.5\t0\ta\n").unwrap();
        let vocab = Vocabulary::from_tokens(vec!["a".into(), "b".into(), "c".into()]);
        let lm = UniformScorer { size: vocab.len() };
        let r = rescore_nbest(&lists, &lm, &vocab, &RescoreConfig::default());
        assert_eq!(acoustic_best(&lists[0]), Some(0));
        assert_eq!(r[0].best, Some(1));
        let want = -1.5 + 12.0 * 2.0 * -(6f64).ln();
        assert!((r[0].scores[1] - want).abs() < 1e-12);
    }

    #[test]
    fn ties_pick_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }
}
