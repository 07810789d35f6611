use std::cmp::Ordering;

use baylm::bayes::kl_gaussian;
use baylm::eval::interp::{em_fit_from_logprobs, InterpolationMixture};
use baylm::eval::nbest::{combined_score, RescoreConfig};
use baylm::eval::snr::median;
use baylm::eval::{wer, LmScorer, UniformScorer};
use baylm::model::ArchGate;
use baylm::nas::{extract_top_n, selection_order, selection_score, ArchSelection};
use baylm::{Corpus, Graph, Tensor, Vocabulary};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-8.0f64..8.0, rows * cols).prop_map(move |v| Tensor::from_vec(rows, cols, v))
}

/// Minimum cost over every edit script, enumerated without memoisation.
fn brute_edit(r: &[u8], h: &[u8]) -> usize {
    match (r, h) {
        ([], _) => h.len(),
        (_, []) => r.len(),
        ([a, rr @ ..], [b, hh @ ..]) => {
            let sub = brute_edit(rr, hh) + usize::from(a != b);
            let del = brute_edit(rr, h) + 1;
            let ins = brute_edit(r, hh) + 1;
            sub.min(del).min(ins)
        }
    }
}

fn words(v: &[u8]) -> Vec<String> {
    v.iter().map(|c| ((b'a' + c) as char).to_string()).collect()
}

fn all_selections(gates: &[(f64, f64)]) -> Vec<ArchSelection> {
    let l = gates.len();
    let mut all: Vec<ArchSelection> = (0..1u32 << l)
        .map(|mask| {
            let bayes: Vec<bool> = (0..l).map(|i| mask >> i & 1 == 1).collect();
            ArchSelection {
                score: selection_score(gates, &bayes),
                bayes,
            }
        })
        .collect();
    all.sort_by(selection_order);
    all
}

fn gates_from_logits(logits: &[(f64, f64)]) -> Vec<(f64, f64)> {
    logits
        .iter()
        .map(|&(p, b)| {
            let mut g = ArchGate::new();
            g.logits = Tensor::row(&[p, b]);
            g.gates()
        })
        .collect()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in (1usize..5, 1usize..7).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut g = Graph::new();
        let n = g.leaf(x.clone());
        let s = g.softmax(n);
        let y = g.value(s);
        for r in 0..y.rows() {
            let row = y.row_slice(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardises_rows(x in (1usize..5, 2usize..9).prop_flat_map(|(r, c)| matrix(r, c))) {
        // skip degenerate constant rows
        prop_assume!((0..x.rows()).all(|r| {
            let row = x.row_slice(r);
            row.iter().any(|&v| (v - row[0]).abs() > 1e-3)
        }));
        let mut g = Graph::new();
        let n = g.leaf(x.clone());
        let s = g.layer_norm(n);
        let y = g.value(s);
        for r in 0..y.rows() {
            let row = y.row_slice(r);
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            prop_assert!(mean.abs() < 1e-10, "mean {mean}");
            prop_assert!((var - 1.0).abs() < 1e-8, "var {var}");
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_the_prior(
        v in prop::collection::vec((-3.0f64..3.0, 0.05f64..3.0, -3.0f64..3.0, 0.05f64..3.0), 1..12)
    ) {
        let (mu, s, mr, sr): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = v.iter().fold(
            (vec![], vec![], vec![], vec![]),
            |mut acc, &(a, b, c, d)| { acc.0.push(a); acc.1.push(b); acc.2.push(c); acc.3.push(d); acc },
        );
        for i in 0..mu.len() {
            let k = kl_gaussian(&mu[i..=i], &s[i..=i], &mr[i..=i], &sr[i..=i]);
            prop_assert!(k >= -1e-12);
            if (mu[i] - mr[i]).abs() > 1e-3 || (s[i] - sr[i]).abs() > 1e-3 {
                prop_assert!(k > 0.0);
            }
        }
        prop_assert!(kl_gaussian(&mu, &s, &mu, &s).abs() < 1e-12);
    }

    #[test]
    fn wer_matches_exhaustive_edit_scripts(
        r in prop::collection::vec(0u8..4, 0..=6),
        h in prop::collection::vec(0u8..4, 0..=6),
    ) {
        let res = wer(&words(&r), &words(&h));
        prop_assert_eq!(res.errors(), brute_edit(&r, &h));
        prop_assert_eq!(res.ref_len, r.len());
        prop_assert_eq!(res.ref_len + res.insertions - res.deletions, h.len());
        // swapping the sequences exchanges insertions and deletions
        let back = wer(&words(&h), &words(&r));
        prop_assert_eq!(back.errors(), res.errors());
        prop_assert_eq!(wer(&words(&r), &words(&r)).errors(), 0);
    }

    #[test]
    fn median_matches_full_sort(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let mut s = v.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len();
        let want = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        prop_assert_eq!(median(&v), want);
    }

    #[test]
    fn em_never_decreases_dev_likelihood(
        lp in (2usize..4, 1usize..30).prop_flat_map(|(c, t)| prop::collection::vec(prop::collection::vec(-9.0f64..-0.01, t), c))
    ) {
        let fit = em_fit_from_logprobs(&lp, 200, 0.0).unwrap();
        for w in fit.log_likelihood.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12, "{:?}", fit.log_likelihood);
        }
        prop_assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_n_matches_brute_force(
        logits in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..=10),
        n in 1usize..40,
    ) {
        let gates = gates_from_logits(&logits);
        let all = all_selections(&gates);
        let got = extract_top_n(&gates, n);
        let want: Vec<_> = all.into_iter().take(n).collect();
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(&g.bayes, &w.bayes);
            prop_assert!((g.score - w.score).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_normalise_and_ignore_common_shifts(
        logits in prop::collection::vec((-30.0f64..30.0, -30.0f64..30.0), 1..=6),
        shift in -50.0f64..50.0,
    ) {
        let gates = gates_from_logits(&logits);
        for &(p, b) in &gates {
            prop_assert!((p + b - 1.0).abs() < 1e-12);
        }
        let shifted: Vec<_> = logits.iter().map(|&(p, b)| (p + shift, b + shift)).collect();
        let g2 = gates_from_logits(&shifted);
        for (a, b) in gates.iter().zip(&g2) {
            prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
        let n = 1 << logits.len().min(4);
        let s1: Vec<_> = extract_top_n(&gates, n).into_iter().map(|s| s.bayes).collect();
        let s2: Vec<_> = extract_top_n(&g2, n).into_iter().map(|s| s.bayes).collect();
        prop_assert_eq!(s1, s2);
    }

    #[test]
    fn rescoring_argmax_ignores_positive_scaling(
        scores in prop::collection::vec((-50.0f64..0.0, -40.0f64..0.0, 0usize..10), 1..12),
        c in 0.01f64..100.0,
    ) {
        let cfg = RescoreConfig::default();
        let combined: Vec<f64> = scores.iter().map(|&(a, l, n)| combined_score(a, l, n, &cfg)).collect();
        let best = |v: &[f64]| {
            v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
        };
        let scaled: Vec<f64> = combined.iter().map(|x| x * c).collect();
        prop_assert_eq!(best(&combined), best(&scaled));
    }

    #[test]
    fn mixtures_of_normalised_models_normalise(w in 0.0f64..1.0) {
        struct Peaked(usize);
        impl LmScorer for Peaked {
            fn vocab_size(&self) -> usize { self.0 }
            fn score_sentence(&self, ids: &[usize]) -> Vec<f64> {
                let z: f64 = (1..=self.0).map(|k| k as f64).sum();
                ids[1..].iter().map(|&w| ((w + 1) as f64 / z).ln()).collect()
            }
        }
        let a = Peaked(6);
        let b = UniformScorer { size: 6 };
        let mix = InterpolationMixture::new(vec![&a, &b], vec![w, 1.0 - w]).unwrap();
        let total: f64 = mix.distribution(&[0, 3]).iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn encode_decode_round_trip(
        sents in prop::collection::vec(prop::collection::vec(0u8..8, 1..6), 1..10),
        min_count in 1usize..3,
    ) {
        let corpus = Corpus { sentences: sents.iter().map(|s| words(s)).collect() };
        let vocab = Vocabulary::build(&corpus, min_count).unwrap();
        for s in &corpus.sentences {
            let ids = vocab.encode(s);
            let back = vocab.decode(&ids[1..ids.len() - 1]);
            let want: Vec<String> = s.iter()
                .map(|w| if vocab.contains(w) { w.clone() } else { "<unk>".to_string() })
                .collect();
            prop_assert_eq!(back, want);
        }
    }
}

#[test]
fn selection_order_is_total_on_ties() {
    let gates = vec![(0.5, 0.5); 3];
    let all = all_selections(&gates);
    for w in all.windows(2) {
        assert_eq!(selection_order(&w[0], &w[1]), Ordering::Less);
    }
    assert_eq!(extract_top_n(&gates, 8), all);
}
