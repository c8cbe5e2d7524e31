use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_sgrnn");

fn corpus(dir: &Path) -> PathBuf {
    let p = dir.join("corpus.txt");
    let text = "to be or not to be, that is the question.\nwhether tis nobler in the mind to suffer\n".repeat(20);
    fs::write(&p, text).unwrap();
    p
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.conf");
    let text = format!(
        "# tiny character model\ntask = char-lm\ncorpus_path = {}\ntrain_fraction = 0.8\nvalid_fraction = 0.1\n\
         hidden = 12\nlayers = 1\nbatch_size = 4\nunroll = 16\nepochs = 4\nburn_in = 1\nthinning = 0.5\n\
         patience = 0\nstep_size = 0.003\nseed = 7\n{extra}",
        corpus(dir).display()
    );
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["train", "-q", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["train", "-q", "--config", s(&cfg), "--out", s(&b)]);
    for f in ["metrics.csv", "final/tensors.bin", "final/manifest.json", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["samples_collected"], 6);
    assert_eq!(summary["samples_scheduled"], 6);
    assert!(!a.join("LOCK").exists());

    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,metric,value\n"));
    assert!(metrics.contains("4,test,perplexity,"));

    let c = tmp.path().join("c");
    ok(&["train", "-q", "--config", s(&cfg), "--out", s(&c), "--seed", "8"]);
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(c.join("metrics.csv")).unwrap());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    for mode in ["successive", "random"] {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config(tmp.path(), &format!("batch_mode = {mode}\ndropout = naive\n"));
        let full = tmp.path().join("full");
        let part = tmp.path().join("part");
        ok(&["train", "-q", "--config", s(&cfg), "--out", s(&full)]);
        ok(&["train", "-q", "--config", s(&cfg), "--out", s(&part), "--stop-after", "2"]);
        assert!(!part.join("final").exists());
        assert!(!part.join("summary.json").exists());
        ok(&["train", "-q", "--config", s(&cfg), "--out", s(&part), "--resume"]);
        for f in ["metrics.csv", "final/tensors.bin", "summary.json", "bank/sample_00005/tensors.bin"] {
            assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(part.join(f)).unwrap(), "{mode}: {f}");
        }
    }
}

#[test]
fn eval_generate_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let out = tmp.path().join("run");
    ok(&["train", "-q", "--config", s(&cfg), "--out", s(&out)]);

    let text = ok(&["eval", "--config", s(&cfg), "--out", s(&out), "--sweep", "--token-probs", "5", "--num-samples", "3"]);
    assert!(text.contains("thinned"), "{text}");
    let metrics = fs::read_to_string(out.join("eval/test_metrics.csv")).unwrap();
    assert!(metrics.starts_with("selection,samples,metric,value\n"));
    assert!(metrics.contains("final,1,perplexity,"));
    assert!(metrics.contains("thinned,3,cross_entropy,"));
    let sweep = fs::read_to_string(out.join("eval/test_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 3 * 6 * 2);

    // S=1 from the back of the bank is the last sample on its own.
    let single = ok(&["eval", "--config", s(&cfg), "--out", s(&out), "--strategy", "backward", "--num-samples", "1"]);
    let pick = |t: &str, sel: &str| -> String {
        t.lines()
            .find(|l| l.starts_with(sel) && l.contains("cross_entropy"))
            .unwrap()
            .split_whitespace()
            .last()
            .unwrap()
            .to_string()
    };
    assert_eq!(pick(&single, "backward"), pick(&single, "sample_5"));

    let probs = fs::read_to_string(out.join("eval/test_token_probs.csv")).unwrap();
    let mut rows = 0;
    for line in probs.lines().skip(1) {
        // Tokens in the leading columns are escaped, so no field holds a comma.
        let fields: Vec<&str> = line.split(',').collect();
        let total: f64 = fields[4..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12, "{line}");
        rows += 1;
    }
    // Three samples plus their average for each of five positions.
    assert_eq!(rows, 5 * 4);

    let g1 = ok(&["generate", "--config", s(&cfg), "--out", s(&out), "--prefix", "to be", "--length", "30"]);
    let g2 = ok(&["generate", "--config", s(&cfg), "--out", s(&out), "--prefix", "to be", "--length", "30"]);
    assert_eq!(g1, g2);
    assert!(g1.starts_with("to be"));

    let listing = ok(&["inspect-bank", "--out", s(&out)]);
    assert!(listing.contains("6 samples, checksums verified"), "{listing}");
    let blob = out.join("bank/sample_00002/tensors.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    let bad = run(&["inspect-bank", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("checksum"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let out = tmp.path().join("run");

    assert_eq!(run(&["train", "--config", s(&cfg), "--learning-rate", "1"]).status.code(), Some(1));
    let bad_cfg = tmp.path().join("bad.conf");
    fs::write(&bad_cfg, "task = char-lm\nlearning_rate = 1\n").unwrap();
    let r = run(&["train", "--config", s(&bad_cfg)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("unknown key `learning_rate`"));

    let r = run(&["train", "-q", "--config", s(&cfg), "--out", s(&out), "--algorithm", "sgd", "--step-size", "1e200"]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("non-finite"));

    // A finished or failed run must not be silently overwritten.
    assert_eq!(run(&["train", "-q", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(1));

    let fresh = tmp.path().join("fresh");
    fs::create_dir_all(&fresh).unwrap();
    fs::write(fresh.join("LOCK"), "1\n").unwrap();
    let r = run(&["train", "-q", "--config", s(&cfg), "--out", s(&fresh)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("owns this output directory"));

    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn classification_with_folds() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("sent.tsv");
    let mut text = String::new();
    for i in 0..60 {
        let (label, words) = if i % 2 == 0 { ("pos", "good fine great") } else { ("neg", "bad poor awful") };
        text.push_str(&format!("{label}\tthe film was {} and {}\n", words.split(' ').nth(i % 3).unwrap(), ["long", "short"][i % 2]));
    }
    fs::write(&data, text).unwrap();
    let out = tmp.path().join("run");
    let args = [
        "--task", "classify", "--data-path", s(&data), "--folds", "5", "--fold", "2", "--hidden", "6",
        "--bidirectional", "true", "--cell", "gru", "--batch-size", "4", "--epochs", "6", "--burn-in", "2",
        "--thinning", "1", "--patience", "0", "--step-size", "0.01", "--out", s(&out),
    ];
    let mut train = vec!["train", "-q"];
    train.extend(args);
    ok(&train);
    assert_eq!(fs::read_to_string(out.join("folds.txt")).unwrap().lines().count(), 60);

    let mut eval = vec!["eval", "--uncertainty"];
    eval.extend(args);
    let report = ok(&eval);
    let err: f64 = report
        .lines()
        .find(|l| l.starts_with("thinned") && l.contains("error"))
        .unwrap()
        .split_whitespace()
        .last()
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 0.2, "{report}");
    let unc = fs::read_to_string(out.join("eval/test_uncertainty.csv")).unwrap();
    assert!(unc.starts_with("index,label,predicted,mean_neg,mean_pos,std_neg,std_pos\n"));
    assert_eq!(unc.lines().count(), 1 + 12);
}
