use std::hint::black_box;

use baylm::eval::interp::em_fit_from_logprobs;
use baylm::eval::scorer::score_corpus;
use baylm::eval::wer::wer;
use baylm::eval::{ArpaScorer, NnScorer};
use baylm::model::Fwd;
use baylm::ngram::train_witten_bell;
use baylm::train::{collect_grads, objective, Frozen, ObjectiveConfig};
use baylm::{Graph, LanguageModel, RngStream};
use baylm_bench::{bayes_lstm, desk, lstm, random, transformer};
use criterion::{criterion_group, criterion_main, Criterion};

fn graph(c: &mut Criterion) {
    let (x, w) = (random(32, 128, 1), random(128, 512, 2));
    c.bench_function("graph/matmul 32x128x512 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (xn, wn) = (g.leaf(x.clone()), g.leaf(w.clone()));
            let y = g.matmul(xn, wn).unwrap();
            let t = g.tanh(y);
            let s = g.sum(t);
            g.backward(s).unwrap();
            black_box(g.grad(wn))
        })
    });
    let z = random(32, 238, 3);
    c.bench_function("graph/log_softmax 32x238 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let zn = g.leaf(z.clone());
            let l = g.log_softmax(zn);
            let s = g.sum(l);
            g.backward(s).unwrap();
            black_box(g.grad(zn))
        })
    });
}

fn train_step(m: &LanguageModel, batch: &baylm::Batch, rng: &RngStream) -> usize {
    let mut f = Fwd::new(m);
    let o = objective(&mut f, batch, &ObjectiveConfig::default(), Some(rng)).unwrap();
    collect_grads(&mut f, o.loss, &Frozen::default()).unwrap().len()
}

fn models(c: &mut Criterion) {
    let d = desk();
    let n = d.vocab.len();
    let rng = RngStream::new(4);
    let (l, t, q) = (lstm(n), transformer(n), bayes_lstm(n));
    c.bench_function("model/lstm eval batch", |b| b.iter(|| black_box(l.token_logprobs(&d.batch).unwrap())));
    c.bench_function("model/transformer eval batch", |b| {
        b.iter(|| black_box(t.token_logprobs(&d.batch).unwrap()))
    });
    c.bench_function("model/lstm train step", |b| b.iter(|| black_box(train_step(&l, &d.batch, &rng))));
    c.bench_function("model/bayes lstm train step", |b| b.iter(|| black_box(train_step(&q, &d.batch, &rng))));
    c.bench_function("model/transformer train step", |b| b.iter(|| black_box(train_step(&t, &d.batch, &rng))));
}

fn eval(c: &mut Criterion) {
    let d = desk();
    let arpa = train_witten_bell(&d.train, &d.vocab, 3).unwrap();
    let m = lstm(d.vocab.len());
    let mut g = c.benchmark_group("eval");
    g.sample_size(20);
    g.bench_function("score dev with lstm", |b| {
        b.iter(|| black_box(score_corpus(&NnScorer::new(&m), &d.dev, &d.vocab)))
    });
    g.bench_function("score dev with trigram", |b| {
        b.iter(|| {
            black_box(score_corpus(
                &ArpaScorer {
                    model: &arpa,
                    vocab: &d.vocab,
                },
                &d.dev,
                &d.vocab,
            ))
        })
    });
    g.bench_function("witten-bell trigram training", |b| {
        b.iter(|| black_box(train_witten_bell(&d.train, &d.vocab, 3).unwrap()))
    });
    g.finish();

    let mut r = RngStream::new(5);
    let lp: Vec<Vec<f64>> = (0..3).map(|_| (0..5000).map(|_| r.uniform_range(-9.0, -0.1)).collect()).collect();
    c.bench_function("eval/em 3 components 5000 tokens", |b| {
        b.iter(|| black_box(em_fit_from_logprobs(&lp, 50, 0.0).unwrap()))
    });
    let words: Vec<String> = (0..40).map(|i| format!("w{}", i % 7)).collect();
    let other: Vec<String> = (0..37).map(|i| format!("w{}", (i * 3) % 8)).collect();
    c.bench_function("eval/wer 40 words", |b| {
        b.iter(|| black_box(wer(&words, &other)))
    });
}

criterion_group!(benches, graph, models, eval);
criterion_main!(benches);
