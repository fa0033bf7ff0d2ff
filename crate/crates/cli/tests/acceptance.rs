//! One pass/fail line per acceptance criterion; exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use branchkit::encoder::{EncoderConfig, LayerKind};
use branchkit::harness::verify::{
    accounting_oracles, ctc_equivalence, gradient_suite, structural_identities, CheckOutcome,
    GradTarget,
};
use branchkit::harness::{train, RunConfig};
use branchkit_cli::execute;
use serde_json::Value;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn cli(args: &[&str]) -> (i32, String) {
    let mut argv = vec!["branchkit".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let r = execute(&argv);
    (r.code, r.stdout)
}

fn profile_json(preset: &str) -> (Value, f64) {
    let started = Instant::now();
    let (code, out) = cli(&["profile", "--preset", preset, "--seconds", "10", "--vocab", "500", "--format", "json"]);
    let secs = started.elapsed().as_secs_f64();
    assert_eq!(code, 0, "profile {preset}");
    (serde_json::from_str(&out).expect("profile json"), secs)
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target
}

fn fold(outcomes: &[CheckOutcome], secs: f64, limit: f64) -> Verdict {
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({})", c.name, c.detail))
        .collect();
    let passed = failed.is_empty() && secs < limit;
    let detail = if failed.is_empty() {
        format!("{} checks in {secs:.1} s (limit {limit} s)", outcomes.len())
    } else {
        format!("failed: {}", failed.join("; "))
    };
    verdict(passed, detail)
}

fn mac_reproduction() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (preset, target) in [("medium-conformer-deep", 10.3e9), ("medium-ebranchformer", 9.9e9)] {
        let (v, secs) = profile_json(preset);
        let macs = v["totals"]["macs"].as_u64().unwrap() as f64;
        ok &= within(macs, target, 0.10) && secs < 1.0;
        parts.push(format!("{preset} {:.2}e9 vs {:.1}e9 in {secs:.3} s", macs / 1e9, target / 1e9));
    }
    verdict(ok, parts.join(", "))
}

fn param_reproduction() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (preset, target) in [("medium-conformer-deep", 25.8e6), ("medium-ebranchformer", 25.3e6)] {
        let (v, _) = profile_json(preset);
        let p = v["totals"]["params"].as_u64().unwrap() as f64;
        ok &= within(p, target, 0.03);
        parts.push(format!("{preset} {:.3}M vs {:.1}M", p / 1e6, target / 1e6));
    }
    let encoder = |preset: &str| -> u64 {
        let (v, _) = profile_json(preset);
        v["modules"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|m| m["name"] != "ctc_head")
            .map(|m| m["params"].as_u64().unwrap())
            .sum()
    };
    let (e, d, w) = (
        encoder("medium-ebranchformer"),
        encoder("medium-conformer-deep"),
        encoder("medium-conformer-wide"),
    );
    ok &= e < d && d < w;
    parts.push(format!("encoder-only {e} < {d} < {w}"));
    verdict(ok, parts.join(", "))
}

fn oracle_exactness() -> Verdict {
    let started = Instant::now();
    let outcomes = accounting_oracles();
    let secs = started.elapsed().as_secs_f64();
    let v = fold(&outcomes, secs, 10.0);
    verdict(
        v.passed,
        format!("{} presets, {}", EncoderConfig::PRESETS.len(), v.detail),
    )
}

fn gradient_checks() -> Verdict {
    let started = Instant::now();
    let outcomes = gradient_suite(&GradTarget::ALL, 10);
    let secs = started.elapsed().as_secs_f64();
    let worst = outcomes
        .iter()
        .map(|c| format!("{} {}", c.name.trim_start_matches("gradcheck/"), c.detail.split(" over").next().unwrap_or("")))
        .collect::<Vec<_>>()
        .join("; ");
    let v = fold(&outcomes, secs, 120.0);
    verdict(v.passed, format!("{}; {worst}", v.detail))
}

fn ctc_checks() -> Verdict {
    let started = Instant::now();
    let outcome = ctc_equivalence(200, 2024);
    let secs = started.elapsed().as_secs_f64();
    verdict(outcome.passed && secs < 30.0, format!("{} in {secs:.2} s", outcome.detail))
}

fn identities() -> Verdict {
    let started = Instant::now();
    let outcomes = structural_identities();
    let v = fold(&outcomes, started.elapsed().as_secs_f64(), 60.0);
    let details: Vec<String> = outcomes
        .iter()
        .map(|c| format!("{} {}", c.name.trim_start_matches("identity/"), c.detail))
        .collect();
    verdict(v.passed, format!("{}; {}", v.detail, details.join("; ")))
}

fn toy_training(dir: &Path) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in [LayerKind::EBranchformer, LayerKind::Conformer] {
        for seed in [1, 2] {
            let mut cfg = RunConfig::default();
            cfg.model.kind = kind;
            cfg.train.seed = seed;
            let out = dir.join(format!("{}-{seed}", kind.as_str()));
            let rec = match train(&cfg, Some(&out)) {
                Ok(o) => o.record,
                Err(e) => return verdict(false, format!("{} seed {seed}: {e}", kind.as_str())),
            };
            let first = rec.epochs.first().map_or(f64::NAN, |e| e.train_loss);
            let last = rec.epochs.last().map_or(f64::NAN, |e| e.train_loss);
            let ter = rec.final_ter();
            let good = !rec.diverged
                && ter <= 0.05
                && rec.wall_time_secs < 300.0
                && last < first
                && rec.initial_val_ter >= ter;
            ok &= good;
            parts.push(format!(
                "{} s{seed}: ter {:.3} (untrained {:.3}), train loss {:.2} -> {:.3}, {:.1} s",
                kind.as_str(),
                ter,
                rec.initial_val_ter,
                first,
                last,
                rec.wall_time_secs
            ));
        }
    }
    verdict(ok, parts.join("; "))
}

fn stability(dir: &Path) -> Verdict {
    let out = dir.join("sweep");
    let started = Instant::now();
    let (code, _) = cli(&["stability", "--out", out.to_str().unwrap(), "--seeds", "5", "--lrs", "2e-3,2.0"]);
    let secs = started.elapsed().as_secs_f64();
    if code != 0 {
        return verdict(false, format!("stability exited with {code}"));
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap_or_default();
    let mut counts = std::collections::BTreeMap::<(String, String), (usize, usize)>::new();
    for line in summary.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let e = counts.entry((f[0].to_string(), f[1].to_string())).or_default();
        e.0 += 1;
        e.1 += (f[3] == "true") as usize;
    }
    let complete = counts.len() == 4 && counts.values().all(|&(n, _)| n == 5);
    let mut separated = false;
    for arch in ["conformer", "e_branchformer"] {
        let stable = counts.get(&(arch.into(), "0.002".into())).map_or(0, |c| c.1);
        let absurd = counts.get(&(arch.into(), "2.0".into())).map_or(0, |c| c.1);
        separated |= absurd > stable;
    }
    let cells: Vec<String> = counts
        .iter()
        .map(|((a, lr), (n, d))| format!("{a}@{lr} {d}/{n}"))
        .collect();
    verdict(complete && separated, format!("diverged {} in {secs:.1} s", cells.join(", ")))
}

fn determinism(dir: &Path) -> Verdict {
    let mut cfg = RunConfig::default();
    cfg.model.kind = LayerKind::EBranchformer;
    cfg.train.seed = 1;
    let again = dir.join("repeat");
    if let Err(e) = train(&cfg, Some(&again)) {
        return verdict(false, e.to_string());
    }
    let a = fs::read(dir.join("e_branchformer-1").join("metrics.csv")).unwrap_or_default();
    let b = fs::read(again.join("metrics.csv")).unwrap_or_default();
    verdict(!a.is_empty() && a == b, format!("metrics.csv {} bytes, identical: {}", a.len(), a == b))
}

fn main() {
    let scratch = tempfile::tempdir().expect("temp dir");
    let dir = scratch.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("MAC reproduction", Box::new(mac_reproduction)),
        ("parameter reproduction", Box::new(param_reproduction)),
        ("oracle exactness", Box::new(oracle_exactness)),
        ("gradient suite", Box::new(gradient_checks)),
        ("CTC equivalence", Box::new(ctc_checks)),
        ("structural identities", Box::new(identities)),
        ("toy training", Box::new(|| toy_training(dir))),
        ("stability harness", Box::new(|| stability(dir))),
        ("determinism", Box::new(|| determinism(dir))),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        if !v.passed {
            failures += 1;
        }
        println!("criterion {} {}: {} | {}", i + 1, name, if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
