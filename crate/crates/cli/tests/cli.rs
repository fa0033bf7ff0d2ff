use std::fs;

use branchkit_cli::{execute, CliOutput, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

fn run(args: &[&str]) -> CliOutput {
    let mut argv = vec!["branchkit".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    execute(&argv)
}

const SMALL: &str = r#"
[model]
kind = "conformer"
layers = 1
d = 32

[task]
train_size = 24
valid_size = 8

[train]
epochs = 1
warmup_steps = 10
"#;

#[test]
fn usage_errors() {
    assert_eq!(run(&[]).code, EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]).code, EXIT_USAGE);
    let r = run(&["profile", "--preset", "medium-ebranchformer", "--bogus"]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("--bogus"));
    assert_eq!(run(&["profile"]).code, EXIT_USAGE);
    assert_eq!(run(&["profile", "--preset", "tiny"]).code, EXIT_USAGE);
    assert_eq!(run(&["profile", "--preset", "medium-ebranchformer", "--seconds", "0"]).code, EXIT_USAGE);
    assert_eq!(run(&["profile", "--preset", "medium-ebranchformer", "--seconds", "0.05"]).code, EXIT_USAGE);
    assert_eq!(run(&["gradcheck", "--target", "lstm"]).code, EXIT_USAGE);

    let help = run(&["--help"]);
    assert_eq!(help.code, EXIT_OK);
    for sub in ["profile", "train", "stability", "gradcheck", "decode", "verify"] {
        assert!(help.stdout.contains(sub), "{sub}");
    }
}

#[test]
fn profile_text_and_json() {
    let r = run(&["profile", "--preset", "medium-ebranchformer", "--seconds", "10"]);
    assert_eq!(r.code, EXIT_OK);
    assert!(r.stdout.contains("T=1000 -> T'=249"));
    let total = r.stdout.lines().find(|l| l.starts_with("total")).unwrap();
    assert_eq!(total.split_whitespace().collect::<Vec<_>>(), ["total", "25277173", "9875161344"]);

    let r = run(&["profile", "--preset", "medium-conformer-deep", "--format", "json"]);
    assert_eq!(r.code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["totals"]["params"], 25_801_717);
    let modules = v["modules"].as_array().unwrap();
    let names: Vec<&str> = modules.iter().map(|m| m["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["subsampling", "feed_forward", "self_attention", "conv_module", "layer_norm", "ctc_head"]);
    let sum: u64 = modules.iter().map(|m| m["macs"].as_u64().unwrap()).sum();
    assert_eq!(v["totals"]["macs"].as_u64().unwrap(), sum);
    assert_eq!(v["assumptions"]["encoder_frames"], 249);

    let r = run(&["profile", "--preset", "medium-conformer-deep", "--against", "medium-conformer-wide"]);
    assert_eq!(r.code, EXIT_OK);
    assert!(r.stdout.contains("feed_forward") && !r.stdout.contains("subsampling"));
}

#[test]
fn gradcheck_single_target() {
    let r = run(&["gradcheck", "--target", "ctc", "--seeds", "3"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stdout);
    assert!(r.stdout.starts_with("PASS gradcheck/ctc"));
}

#[test]
fn verify_suite_passes() {
    let r = run(&["verify", "--seeds", "2", "--format", "json"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stdout);
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert!(v.as_array().unwrap().len() >= 20);
}

#[test]
fn train_then_decode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("run");
    let r = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert!(r.stdout.contains("epoch 1:"));
    for f in ["run.json", "metrics.csv", "config.toml", "checkpoint/manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    // never overwrite a run
    let again = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(again.code, EXIT_RUNTIME);

    let r = run(&["decode", "--run", out.to_str().unwrap()]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert_eq!(r.stdout.lines().count(), 8);
    for line in r.stdout.lines() {
        assert!(line.split_whitespace().all(|t| (1..=10).contains(&t.parse::<usize>().unwrap())));
    }

    // two utterances from a feature file, one frame per line
    let frame = vec!["0.5"; 16].join(" ");
    let mut text = String::new();
    for n in [20, 31] {
        for _ in 0..n {
            text += &frame;
            text += "\n";
        }
        text += "\n";
    }
    let feats = dir.path().join("feats.txt");
    fs::write(&feats, &text).unwrap();
    let vocab = dir.path().join("vocab.txt");
    fs::write(&vocab, "a\nb\nc\nd\ne\nf\ng\nh\ni\nj\n").unwrap();
    let r = run(&[
        "decode",
        "--run",
        out.to_str().unwrap(),
        "--input",
        feats.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert_eq!(r.stdout.lines().count(), 2);
    for line in r.stdout.lines() {
        assert!(line.split_whitespace().all(|t| t.len() == 1 && ("a"..="j").contains(&t)));
    }

    fs::write(&feats, "0.1 0.2\n").unwrap();
    let r = run(&["decode", "--run", out.to_str().unwrap(), "--input", feats.to_str().unwrap()]);
    assert_eq!(r.code, EXIT_USAGE);
    assert_eq!(run(&["decode", "--run", dir.path().join("missing").to_str().unwrap()]).code, EXIT_RUNTIME);
}

#[test]
fn stability_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("base.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("sweep");
    let r = run(&[
        "stability",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "2",
        "--lrs",
        "1e-3",
        "--archs",
        "e_branchformer",
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().skip(1).all(|l| l.starts_with("e_branchformer,0.001,")));
    assert_eq!(
        run(&["stability", "--out", dir.path().join("x").to_str().unwrap(), "--seeds", "1"]).code,
        EXIT_USAGE
    );
    assert_eq!(
        run(&["stability", "--out", dir.path().join("y").to_str().unwrap(), "--archs", "lstm"]).code,
        EXIT_USAGE
    );
}
