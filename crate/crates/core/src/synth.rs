//! Seeded synthetic data: a small agreement grammar for corpora, and
//! n-best lists built by corrupting reference sentences.

use std::collections::BTreeMap;

use crate::corpus::Corpus;
use crate::eval::nbest::{Hypothesis, NBestList};
use crate::rng::RngStream;

struct NounClass {
    nouns: &'static [&'static str],
    /// Transitive verbs whose subject belongs to this class.
    verbs: &'static [&'static str],
    /// Index of the class the objects come from.
    object_class: usize,
    intransitive: &'static [&'static str],
}

const CLASSES: [NounClass; 5] = [
    NounClass {
        nouns: &["dog", "cat", "horse", "bird", "fox", "rabbit", "goat", "mouse", "wolf", "duck", "sheep", "bear"],
        verbs: &["eat", "chase", "smell", "find", "hide", "carry"],
        object_class: 3,
        intransitive: &["sleep", "run", "bark", "hunt", "wander"],
    },
    NounClass {
        nouns: &["teacher", "farmer", "doctor", "child", "writer", "baker", "singer", "pilot", "student", "nurse", "judge", "painter"],
        verbs: &["read", "write", "buy", "sell", "paint", "like"],
        object_class: 2,
        intransitive: &["laugh", "work", "travel", "sing", "wait"],
    },
    NounClass {
        nouns: &["book", "letter", "song", "picture", "story", "poem", "map", "card", "note", "paper", "report", "album"],
        verbs: &["please", "bore", "inspire", "confuse", "amuse", "reach"],
        object_class: 1,
        intransitive: &["fade", "sell", "spread", "matter", "survive"],
    },
    NounClass {
        nouns: &["apple", "bread", "carrot", "cheese", "seed", "berry", "grain", "fish", "nut", "leaf", "root", "egg"],
        verbs: &["feed", "tempt", "attract", "nourish", "delight", "sustain"],
        object_class: 0,
        intransitive: &["rot", "grow", "ripen", "fall", "dry"],
    },
    NounClass {
        nouns: &["river", "village", "forest", "garden", "market", "valley", "bridge", "castle", "harbor", "field", "hill", "road"],
        verbs: &["shelter", "surround", "attract", "hide", "welcome", "protect"],
        object_class: 1,
        intransitive: &["flood", "wake", "change", "remain", "shine"],
    },
];

const ADJECTIVES: [&str; 16] = [
    "old", "young", "small", "big", "quiet", "happy", "brown", "green", "strange", "clever", "tired", "bright", "lazy", "proud",
    "little", "grey",
];
const ADVERBS: [&str; 8] = ["slowly", "quickly", "often", "rarely", "again", "today", "quietly", "happily"];
const PREPS: [&str; 6] = ["near", "behind", "beside", "across", "inside", "beyond"];
const SG_DETS: [&str; 4] = ["the", "a", "this", "every"];
const PL_DETS: [&str; 4] = ["the", "some", "these", "many"];

/// Index in `0..n`, skewed towards small values (weights `1/(i+1)`).
fn zipf(rng: &mut RngStream, n: usize) -> usize {
    let total: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
    let mut u = rng.uniform() * total;
    for i in 0..n {
        u -= 1.0 / (i + 1) as f64;
        if u < 0.0 {
            return i;
        }
    }
    n - 1
}

fn plural(noun: &str) -> String {
    match noun {
        "child" => "children".into(),
        "mouse" => "mice".into(),
        "sheep" | "fish" => noun.into(),
        "wolf" => "wolves".into(),
        "leaf" => "leaves".into(),
        n if n.ends_with('y') && !n.ends_with("ey") => format!("{}ies", &n[..n.len() - 1]),
        n if n.ends_with('s') || n.ends_with('x') || n.ends_with("sh") || n.ends_with("ch") => format!("{n}es"),
        n => format!("{n}s"),
    }
}

fn third_person(verb: &str) -> String {
    if verb.ends_with('s') || verb.ends_with("sh") || verb.ends_with("ch") || verb.ends_with('x') {
        format!("{verb}es")
    } else if verb.ends_with('y') && !verb.ends_with("ay") {
        format!("{}ies", &verb[..verb.len() - 1])
    } else {
        format!("{verb}s")
    }
}

fn noun_phrase(rng: &mut RngStream, class: usize, out: &mut Vec<String>) -> bool {
    let pl = rng.uniform() < 0.35;
    let dets: &[&str] = if pl { &PL_DETS } else { &SG_DETS };
    out.push(dets[zipf(rng, dets.len())].into());
    if rng.uniform() < 0.3 {
        out.push(ADJECTIVES[zipf(rng, ADJECTIVES.len())].into());
    }
    let noun = CLASSES[class].nouns[zipf(rng, CLASSES[class].nouns.len())];
    out.push(if pl { plural(noun) } else { noun.into() });
    pl
}

/// One sentence: subject, verb agreeing in number, class-compatible
/// object, optional adverb and prepositional phrase.
pub fn sentence(rng: &mut RngStream) -> Vec<String> {
    let mut out = Vec::new();
    let class = zipf(rng, CLASSES.len());
    let pl = noun_phrase(rng, class, &mut out);
    let c = &CLASSES[class];
    let transitive = rng.uniform() < 0.65;
    let verb = if transitive {
        c.verbs[zipf(rng, c.verbs.len())]
    } else {
        c.intransitive[zipf(rng, c.intransitive.len())]
    };
    out.push(if pl { verb.into() } else { third_person(verb) });
    if transitive {
        noun_phrase(rng, c.object_class, &mut out);
    }
    if rng.uniform() < 0.25 {
        out.push(ADVERBS[zipf(rng, ADVERBS.len())].into());
    }
    if rng.uniform() < 0.3 {
        out.push(PREPS[zipf(rng, PREPS.len())].into());
        noun_phrase(rng, 4, &mut out);
    }
    out
}

/// `n` grammar sentences drawn from `rng`.
pub fn grammar_corpus(n: usize, rng: &RngStream) -> Corpus {
    let mut r = rng.derive("grammar");
    Corpus {
        sentences: (0..n).map(|_| sentence(&mut r)).collect(),
    }
}

/// Every word the grammar can emit, sorted.
pub fn grammar_words() -> Vec<String> {
    let mut w: Vec<String> = Vec::new();
    for c in &CLASSES {
        for n in c.nouns {
            w.push((*n).into());
            w.push(plural(n));
        }
        for v in c.verbs.iter().chain(c.intransitive) {
            w.push((*v).into());
            w.push(third_person(v));
        }
    }
    for s in ADJECTIVES.iter().chain(&ADVERBS).chain(&PREPS).chain(&SG_DETS).chain(&PL_DETS) {
        w.push((*s).into());
    }
    w.sort();
    w.dedup();
    w
}

/// Disjoint train / dev / test splits of one generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

pub fn splits(train: usize, dev: usize, test: usize, rng: &RngStream) -> Splits {
    let all = grammar_corpus(train + dev + test, rng);
    let mut it = all.sentences.into_iter();
    let mut take = |n: usize| Corpus {
        sentences: it.by_ref().take(n).collect(),
    };
    Splits {
        train: take(train),
        dev: take(dev),
        test: take(test),
    }
}

/// The bundled desk corpus: 500 train, 100 dev and 100 test sentences.
pub fn desk_splits(seed: u64) -> Splits {
    splits(500, 100, 100, &RngStream::new(seed))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NBestSynthConfig {
    pub list_size: usize,
    /// Acoustic cost per word error.
    pub error_cost: f64,
    /// Standard deviation of the acoustic noise.
    pub noise: f64,
}

impl Default for NBestSynthConfig {
    fn default() -> Self {
        Self {
            list_size: 20,
            error_cost: 1.0,
            noise: 2.0,
        }
    }
}

fn corrupt(reference: &[String], words: &[String], rng: &mut RngStream) -> Vec<String> {
    let mut h = reference.to_vec();
    let edits = 1 + rng.below(3);
    for _ in 0..edits {
        let op = rng.below(4);
        let word = words[rng.below(words.len())].clone();
        match op {
            0 | 1 if !h.is_empty() => {
                let p = rng.below(h.len());
                h[p] = word;
            }
            2 if h.len() > 1 => {
                let p = rng.below(h.len());
                h.remove(p);
            }
            _ => {
                let p = rng.below(h.len() + 1);
                h.insert(p, word);
            }
        }
    }
    h
}

/// One list per reference: the reference itself plus distinct corrupted
/// decoys, in random order. Acoustic scores are `-error_cost * edits +
/// noise`, so the acoustic 1-best is often a decoy. The LM column is 0.
pub fn synth_nbest(
    refs: &BTreeMap<String, Vec<String>>,
    words: &[String],
    cfg: &NBestSynthConfig,
    rng: &RngStream,
) -> Vec<NBestList> {
    refs.iter()
        .map(|(utt, reference)| {
            let mut r = rng.derive(&format!("nbest/{utt}"));
            let mut hyps: Vec<Vec<String>> = vec![reference.clone()];
            let mut tries = 0;
            while hyps.len() < cfg.list_size && tries < 100 * cfg.list_size {
                tries += 1;
                let h = corrupt(reference, words, &mut r);
                if !hyps.contains(&h) {
                    hyps.push(h);
                }
            }
            r.shuffle(&mut hyps);
            let hyps = hyps
                .into_iter()
                .enumerate()
                .map(|(index, w)| {
                    let errors = crate::eval::wer::wer(reference, &w).errors() as f64;
                    Hypothesis {
                        index,
                        acoustic: -cfg.error_cost * errors + cfg.noise * r.normal(),
                        lm: 0.0,
                        words: w,
                    }
                })
                .collect();
            NBestList { utt: utt.clone(), hyps }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;

    #[test]
    fn desk_corpus_fits_vocab_budget() {
        let s = desk_splits(7);
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (500, 100, 100));
        let v = Vocabulary::build(&s.train, 1).unwrap();
        assert!(v.len() <= 300, "{}", v.len());
        assert!(grammar_words().len() <= 297);
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(desk_splits(3), desk_splits(3));
        assert_ne!(desk_splits(3).train, desk_splits(4).train);
    }

    #[test]
    fn nbest_contains_reference_once() {
        let s = desk_splits(1);
        let refs: BTreeMap<String, Vec<String>> = s
            .test
            .sentences
            .iter()
            .take(5)
            .enumerate()
            .map(|(i, w)| (format!("u{i:03}"), w.clone()))
            .collect();
        let lists = synth_nbest(&refs, &grammar_words(), &NBestSynthConfig::default(), &RngStream::new(2));
        for l in &lists {
            assert_eq!(l.hyps.len(), 20);
            assert_eq!(l.hyps.iter().filter(|h| h.words == refs[&l.utt]).count(), 1);
        }
    }
}
