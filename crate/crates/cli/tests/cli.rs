use std::path::Path;
use std::process::{Command, Output};

use baylm::checkpoint::save;
use baylm::{LanguageModel, LstmConfig, RngStream, Tensor, Vocabulary};

const BIN: &str = env!("CARGO_BIN_EXE_baylm");

fn baylm(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("-q")
        .current_dir(cwd)
        .env_remove("BAYLM_SEED")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: [&str; 8] = [
    "--set",
    "model.embed_dim=4",
    "--set",
    "model.hidden_dim=6",
    "--set",
    "synth.train=40",
    "--set",
    "synth.dev=10",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY).collect()
}

#[test]
fn uniform_output_model_has_vocabulary_size_perplexity() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::from_tokens(["a", "b", "c", "d", "e"].map(String::from).to_vec());
    let arch = baylm::Arch::Lstm(LstmConfig {
        num_layers: 1,
        embed_dim: 3,
        hidden_dim: 4,
        dropout: 0.0,
    });
    let mut m = LanguageModel::new(arch, vocab.len(), &RngStream::new(3)).unwrap();
    let out = m.weights.get_mut("out").unwrap();
    *out = Tensor::zeros(out.rows(), out.cols());
    save(dir.path().join("zero.ckpt"), &m, Some(&vocab)).unwrap();
    std::fs::write(dir.path().join("text.txt"), "a b c\nd e\nb\n").unwrap();
    let o = baylm(
        dir.path(),
        &["ppl", "-o", "out", "--set", "eval.model.checkpoint=zero.ckpt", "--set", "eval.corpus=text.txt"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let ppl: f64 = stdout(&o).trim().split('\t').nth(1).unwrap().parse().unwrap();
    assert!((ppl - vocab.len() as f64).abs() < 1e-9, "{ppl}");
    let o = baylm(dir.path(), &["ppl", "-o", "u", "--set", "eval.model.uniform=true", "--set", "eval.corpus=text.txt", "--set", "data.vocab=missing.txt"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("missing.txt"));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str); 5] = [
        (&["train", "--set", "train.learning_rate=0.1"], "learning_rate"),
        (&["train", "--set", "bayes.positions=[\"l9.ci\"]"], "bayes.positions"),
        (&["train", "--set", "data.train_fraction=2"], "data.train_fraction"),
        (&["snr"], "snr.checkpoint"),
        (&["interp", "--set", "interp.components=[{uniform=true}]"], "interp.components"),
    ];
    for (args, key) in cases {
        let o = baylm(dir.path(), &[args, &["-o", "out"]].concat());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains(key), "{args:?}: {}", stderr(&o));
    }
    std::fs::write(dir.path().join("bad.toml"), "[train]\nepochs = 3\n").unwrap();
    let o = baylm(dir.path(), &["train", "-c", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.toml") && stderr(&o).contains("epochs"), "{}", stderr(&o));
}

#[test]
fn data_errors_exit_3_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("broken.arpa"), "\\data\\\nngram 1=2\n\n\\1-grams:\n-1.0\ta\n\\end\\\n").unwrap();
    std::fs::write(dir.path().join("junk.ckpt"), "not a checkpoint").unwrap();
    let cases: [(&[&str], &str); 4] = [
        (&["ppl", "--set", "eval.model.arpa=broken.arpa"], "broken.arpa"),
        (&["ppl", "--set", "eval.model.checkpoint=junk.ckpt"], "junk.ckpt"),
        (&["ppl", "--set", "eval.model.checkpoint=absent.ckpt"], "absent.ckpt"),
        (&["train", "--set", "data.train=absent.txt"], "absent.txt"),
    ];
    for (args, file) in cases {
        let o = baylm(dir.path(), &[args, &["-o", "out"]].concat());
        assert_eq!(o.status.code(), Some(3), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains(file), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = baylm(
        dir.path(),
        &with_tiny(&["train", "-o", "out", "--set", "train.lr=1e200", "--set", "train.max_epochs=1"]),
    );
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn seed_precedence_is_flag_then_config_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let seed_of = |args: &[&str], env: Option<&str>| -> String {
        let mut c = Command::new(BIN);
        c.args(args).arg("-q").current_dir(dir.path()).env_remove("BAYLM_SEED");
        if let Some(v) = env {
            c.env("BAYLM_SEED", v);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let echo = std::fs::read_to_string(dir.path().join("out/config.toml")).unwrap();
        echo.lines().find(|l| l.starts_with("seed")).unwrap().to_string()
    };
    let synth = ["synth", "-o", "out", "--set", "synth.train=5", "--set", "synth.dev=2", "--set", "synth.test=2"];
    assert_eq!(seed_of(&synth, None), "seed = 1");
    assert_eq!(seed_of(&synth, Some("9")), "seed = 9");
    let with_cfg = [&synth[..], &["--set", "seed=5"]].concat();
    assert_eq!(seed_of(&with_cfg, Some("9")), "seed = 5");
    let with_flag = [&with_cfg[..], &["--seed", "7"]].concat();
    assert_eq!(seed_of(&with_flag, Some("9")), "seed = 7");

    let o = Command::new(BIN)
        .args(synth)
        .current_dir(dir.path())
        .env("BAYLM_SEED", "x")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("BAYLM_SEED"));
}

#[test]
fn different_seeds_give_different_models() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, out: &str| {
        let o = baylm(dir.path(), &with_tiny(&["train", "-o", out, "--seed", seed, "--set", "train.max_epochs=1"]));
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(dir.path().join(out).join("model.ckpt")).unwrap()
    };
    let a = run("1", "a");
    assert_eq!(a, run("1", "b"));
    assert_ne!(a, run("2", "c"));
}

#[test]
fn artifacts_stay_in_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let before: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert!(before.is_empty());
    let o = baylm(dir.path(), &with_tiny(&["prep", "-o", "nested/prep"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let top: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(top, ["nested"]);
    let mut files: Vec<String> = std::fs::read_dir(dir.path().join("nested/prep"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(
        files,
        ["config.toml", "dev.txt", "ngram.arpa", "stats.json", "test.txt", "train.txt", "vocab.txt"]
    );
}

#[test]
fn prepared_files_feed_training_and_rescoring() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for cmd in ["synth", "prep"] {
        let o = baylm(p, &with_tiny(&[cmd, "-o", cmd]));
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let data = [
        "--set",
        "data.train=prep/train.txt",
        "--set",
        "data.dev=prep/dev.txt",
        "--set",
        "data.vocab=prep/vocab.txt",
    ];
    let o = baylm(p, &[&with_tiny(&["train", "-o", "lm", "--set", "train.max_epochs=1"])[..], &data].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = baylm(
        p,
        &[
            &with_tiny(&[
                "rescore",
                "-o",
                "rescore",
                "--set",
                "rescore.nbest=synth/test.nbest",
                "--set",
                "rescore.refs=synth/test.refs",
                "--set",
                "rescore.components=[{checkpoint=\"lm/model.ckpt\"},{arpa=\"prep/ngram.arpa\"},{uniform=true}]",
            ])[..],
            &data,
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let wer: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("rescore/wer.json")).unwrap()).unwrap();
    let w = wer["weights"].as_array().unwrap();
    assert_eq!(w.len(), 3);
    let sum: f64 = w.iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-12);
    assert_eq!(wer["oracle"]["rate"].as_f64(), Some(0.0));
    let rescored = std::fs::read_to_string(p.join("rescore/rescored.tsv")).unwrap();
    assert_eq!(rescored.lines().count(), 1 + 100);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = baylm(dir.path(), &["gradcheck", "-o", "gc"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = std::fs::read_to_string(dir.path().join("gc/gradcheck.tsv")).unwrap();
    assert!(tsv.lines().skip(1).all(|l| l.contains("\tPASS\t")));
}
