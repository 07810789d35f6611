use baylm::checkpoint::{self, init_prior_from_checkpoint};
use baylm::eval::{perplexity, NnScorer};
use baylm::gradcheck::{tiny_lstm, tiny_model, tiny_transformer, TINY_VOCAB};
use baylm::model::Fwd;
use baylm::train::{objective, ObjectiveConfig};
use baylm::{Arch, Batch, Corpus, LanguageModel, RngStream, Site, SiteKind, Tensor, Vocabulary};

const TINY_SIGMA: f64 = 1e-14;

fn archs() -> Vec<Arch> {
    vec![tiny_lstm(), tiny_transformer()]
}

fn long_batch(rng: &RngStream) -> Batch {
    let mut s = rng.derive("long");
    let seqs: Vec<Vec<usize>> = [8, 5, 1]
        .iter()
        .map(|&n| {
            let mut v = vec![0];
            v.extend((0..n).map(|_| 2 + s.below(TINY_VOCAB - 2)));
            v.push(1);
            v
        })
        .collect();
    Batch::from_sequences(&seqs)
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// One Bayesian, GP and latent site per architecture.
fn extension_sites(arch: &Arch) -> (Site, Site, Site) {
    match arch {
        Arch::Lstm(_) => (
            Site::new(1, SiteKind::CellInput),
            Site::new(2, SiteKind::HGate),
            Site::new(1, SiteKind::Hidden),
        ),
        Arch::Transformer(_) => (
            Site::new(1, SiteKind::Ffn),
            Site::new(2, SiteKind::Ffn),
            Site::new(2, SiteKind::FfnOutput),
        ),
    }
}

fn with_all_extensions(base: &LanguageModel, sigma: f64) -> LanguageModel {
    let (b, g, l) = extension_sites(&base.arch);
    let mut m = base.clone();
    m.add_bayes(b, 1.0, false).unwrap();
    m.add_gp(g, 1.0, false).unwrap();
    m.add_latent(l, sigma).unwrap();
    for gv in m.bayes.values_mut() {
        gv.set_sigma(sigma);
    }
    for gp in m.gp.values_mut() {
        gp.lambda.set_sigma(sigma);
        if let Some(t) = &mut gp.theta {
            t.set_sigma(sigma);
        }
    }
    m
}

#[test]
fn output_rows_are_distributions() {
    let rng = RngStream::new(5);
    for arch in archs() {
        let m = with_all_extensions(&tiny_model(arch, &rng), 0.1);
        for rows in m.logprob_rows(&long_batch(&rng)).unwrap() {
            for r in 0..rows.rows() {
                let s: f64 = rows.row_slice(r).iter().map(|l| l.exp()).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn future_tokens_never_change_past_distributions() {
    let rng = RngStream::new(6);
    for arch in archs() {
        for m in [tiny_model(arch.clone(), &rng), with_all_extensions(&tiny_model(arch, &rng), 0.1)] {
            let batch = long_batch(&rng);
            let seqs: Vec<Vec<usize>> = (0..batch.batch_size()).map(|b| batch.sequence(b).to_vec()).collect();
            let base = m.logprob_rows(&batch).unwrap();
            let len = seqs[0].len();
            for j in 1..len {
                let mut changed = seqs.clone();
                changed[0][j] = if changed[0][j] == 3 { 4 } else { 3 };
                let rows = m.logprob_rows(&Batch::from_sequences(&changed)).unwrap();
                for t in 0..j {
                    assert_eq!(rows[0].row_slice(t), base[0].row_slice(t), "{:?} pos {t} after change at {j}", m.kind());
                }
                if j < len - 1 {
                    assert_ne!(rows[0].row_slice(j), base[0].row_slice(j));
                }
                // other sentences in the batch are untouched
                assert_eq!(rows[1], base[1]);
            }
        }
    }
}

#[test]
fn zero_output_matrix_gives_vocabulary_size_perplexity() {
    let vocab = Vocabulary::from_tokens(["a", "b", "c", "d"].map(String::from).to_vec());
    let corpus = Corpus::parse("a b c\nd d\nb a c d\n");
    for arch in archs() {
        let mut m = LanguageModel::new(arch, vocab.len(), &RngStream::new(1)).unwrap();
        m.weights.get_mut("out").unwrap().fill(0.0);
        let ppl = perplexity(&NnScorer::new(&m), &corpus, &vocab);
        assert!((ppl - vocab.len() as f64).abs() < 1e-9, "{ppl}");
    }
}

#[test]
fn evaluation_is_repeatable_and_dropout_free() {
    let rng = RngStream::new(7);
    for arch in archs() {
        let m = with_all_extensions(&tiny_model(arch, &rng), 0.3);
        let b = long_batch(&rng);
        let a1 = m.token_logprobs(&b).unwrap();
        let a2 = m.token_logprobs(&b).unwrap();
        assert_eq!(a1, a2);
        let s1 = m.sampled_token_logprobs(&b, &rng).unwrap();
        assert_eq!(s1, m.sampled_token_logprobs(&b, &rng).unwrap());
        assert_ne!(s1, m.sampled_token_logprobs(&b, &rng.derive("other")).unwrap());
    }
}

#[test]
fn padded_batch_equals_sentences_scored_alone() {
    let rng = RngStream::new(8);
    for arch in archs() {
        let m = with_all_extensions(&tiny_model(arch, &rng), 0.2);
        let b = long_batch(&rng);
        let together = m.token_logprobs(&b).unwrap();
        for i in 0..b.batch_size() {
            let alone = m.token_logprobs(&Batch::from_sequences(&[b.sequence(i).to_vec()])).unwrap();
            assert!(max_diff(&alone, &together[i..=i]) < 1e-12);
        }
    }
}

#[test]
fn vanishing_spread_recovers_the_point_model() {
    let rng = RngStream::new(9);
    for arch in archs() {
        let base = tiny_model(arch, &rng);
        let b = long_batch(&rng);
        let want = base.token_logprobs(&b).unwrap();
        let (bs, gs, ls) = extension_sites(&base.arch);
        let mut variants = Vec::new();
        let mut m = base.clone();
        m.add_bayes(bs, 1.0, false).unwrap();
        m.bayes.values_mut().for_each(|g| g.set_sigma(TINY_SIGMA));
        variants.push(("bayes", m));
        let mut m = base.clone();
        m.add_gp(gs, 1.0, false).unwrap();
        for gp in m.gp.values_mut() {
            gp.lambda.set_sigma(TINY_SIGMA);
            gp.theta.iter_mut().for_each(|t| t.set_sigma(TINY_SIGMA));
        }
        variants.push(("gp", m));
        let mut m = base.clone();
        m.add_latent(ls, TINY_SIGMA).unwrap();
        variants.push(("latent", m));
        variants.push(("all", with_all_extensions(&base, TINY_SIGMA)));
        for (name, m) in variants {
            let eval = m.token_logprobs(&b).unwrap();
            assert!(max_diff(&eval, &want) < 1e-10, "{name} eval");
            let sampled = m.sampled_token_logprobs(&b, &rng.derive(name)).unwrap();
            assert!(max_diff(&sampled, &want) < 1e-10, "{name} sampled");
        }
    }
}

#[test]
fn mean_forward_lies_in_the_sampling_envelope() {
    let rng = RngStream::new(10);
    for arch in archs() {
        let base = tiny_model(arch, &rng);
        let b = long_batch(&rng);
        let (bs, _, ls) = extension_sites(&base.arch);
        let mut bayes = base.clone();
        bayes.add_bayes(bs, 1.0, false).unwrap();
        bayes.bayes.values_mut().for_each(|g| g.set_sigma(0.3));
        let mut latent = base.clone();
        latent.add_latent(ls, 0.3).unwrap();
        for m in [bayes, latent] {
            let total = |v: Vec<Vec<f64>>| v.iter().flatten().sum::<f64>();
            let eval = total(m.token_logprobs(&b).unwrap());
            let draws: Vec<f64> = (0..200)
                .map(|k| total(m.sampled_token_logprobs(&b, &rng.fork(k)).unwrap()))
                .collect();
            let lo = draws.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo <= eval && eval <= hi, "{lo} {eval} {hi}");
        }
    }
}

fn loss_parts(m: &LanguageModel, b: &Batch, cfg: &ObjectiveConfig, rng: Option<&RngStream>) -> (f64, f64, f64) {
    let mut f = Fwd::new(m);
    let o = objective(&mut f, b, cfg, rng).unwrap();
    (f.g.value(o.loss).item(), o.nll, o.kl)
}

#[test]
fn sampled_loss_averages_independent_passes() {
    let rng = RngStream::new(11);
    let base = tiny_model(tiny_lstm(), &rng);
    let mut m = base.clone();
    m.add_bayes(Site::new(2, SiteKind::OutputGate), 1.0, false).unwrap();
    m.bayes.values_mut().for_each(|g| g.set_sigma(0.2));
    let b = long_batch(&rng);
    let cfg = |k| ObjectiveConfig {
        num_samples: k,
        kl_scale: 0.25,
        dropout: false,
        ..Default::default()
    };
    let (_, nll3, kl3) = loss_parts(&m, &b, &cfg(3), Some(&rng));
    let (_, _, kl1) = loss_parts(&m, &b, &cfg(1), Some(&rng));
    let singles: Vec<f64> = (0..3)
        .map(|k| -m.sampled_token_logprobs(&b, &rng.fork(k)).unwrap().iter().flatten().sum::<f64>())
        .collect();
    assert!((nll3 - singles.iter().sum::<f64>() / 3.0).abs() < 1e-9);
    assert_eq!(kl3, kl1);

    // no Bayesian positions: the loss is the plain cross-entropy
    let (loss, _, kl) = loss_parts(&base, &b, &cfg(1), Some(&rng));
    let ce = -base.token_logprobs(&b).unwrap().iter().flatten().sum::<f64>();
    assert_eq!(kl, 0.0);
    assert!((loss - ce).abs() < 1e-12);
}

#[test]
fn one_hot_gp_differs_from_bayes_by_the_coefficient_kl() {
    let rng = RngStream::new(12);
    let base = tiny_model(tiny_lstm(), &rng);
    let b = long_batch(&rng);
    let site = Site::new(1, SiteKind::CellInput);
    let mut bayes = base.clone();
    bayes.add_bayes(site, 1.0, false).unwrap();
    let mut gp = base.clone();
    gp.add_gp(site, 1.0, false).unwrap();
    let cfg = ObjectiveConfig {
        dropout: false,
        kl_scale: 1.0,
        ..Default::default()
    };
    let (lb, _, _) = loss_parts(&bayes, &b, &cfg, None);
    let (lg, _, _) = loss_parts(&gp, &b, &cfg, None);
    let kl_lambda = gp.gp[&site].lambda.kl();
    assert!(kl_lambda > 0.0);
    assert!((lg - lb - kl_lambda).abs() < 1e-9, "{lg} {lb} {kl_lambda}");
}

#[test]
fn priors_from_a_saved_baseline() {
    let rng = RngStream::new(13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    for arch in archs() {
        let base = tiny_model(arch.clone(), &rng);
        checkpoint::save(&path, &base, None).unwrap();
        let loaded = checkpoint::load(&path).unwrap().model;
        let (site, _, _) = extension_sites(&arch);
        let m = init_prior_from_checkpoint(&loaded, &arch, &[site], None).unwrap();
        let want_sigma = match arch {
            Arch::Lstm(_) => 1.0,
            Arch::Transformer(_) => 1e-3f64.sqrt(),
        };
        for gv in m.bayes.values() {
            assert!(gv.prior_sigma.data().iter().all(|&s| s == want_sigma));
            assert_eq!(gv.mu, gv.prior_mu);
        }
        let b = long_batch(&rng);
        assert!(max_diff(&m.token_logprobs(&b).unwrap(), &base.token_logprobs(&b).unwrap()) < 1e-10);
    }
}

#[test]
fn latent_sites_add_four_a_c_weights() {
    let rng = RngStream::new(14);
    for arch in archs() {
        let base = tiny_model(arch, &rng);
        let (_, _, site) = extension_sites(&base.arch);
        let mut m = base.clone();
        m.add_latent(site, 0.1).unwrap();
        let layer = &m.latent[&site];
        let (a, c) = (layer.input_dim(), layer.latent_dim());
        assert_eq!(layer.num_weights(), 4 * a * c);
        // plus one bias column per network
        assert_eq!(m.num_free_params() - base.num_free_params(), 4 * a * c + 4 * c);
    }
}

#[test]
fn bayesian_spread_matters_only_when_sampling() {
    let rng = RngStream::new(15);
    let base = tiny_model(tiny_transformer(), &rng);
    let mut m = base.clone();
    m.add_bayes(Site::new(1, SiteKind::Attention), 0.5, false).unwrap();
    let b = long_batch(&rng);
    let before = m.token_logprobs(&b).unwrap();
    m.bayes.values_mut().for_each(|g| g.set_sigma(0.4));
    assert_eq!(before, m.token_logprobs(&b).unwrap());
    assert!(max_diff(&before, &m.sampled_token_logprobs(&b, &rng).unwrap()) > 1e-6);
    let t: Tensor = m.bayes["l1.wq"].sigma();
    assert!(t.data().iter().all(|s| (s - 0.4).abs() < 1e-12));
}
