//! Command-line surface of branchkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 verification failure,
//! 3 run-time failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use branchkit::encoder::{EncoderConfig, LayerKind};
use branchkit::harness::verify::{gradient_suite, verify_all, CheckOutcome, GradTarget};
use branchkit::harness::{
    decode, gen_split, load_run, stability_experiment, stability_toy_config, train, HarnessError,
    RunConfig, Split, Utterance,
};
use branchkit::model::ModelConfig;
use branchkit::profiler::{diff_reports, profile_report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "branchkit", version, about = "Conformer / E-Branchformer encoder laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parameter and MAC accounting for a preset.
    Profile {
        #[arg(long)]
        preset: String,
        /// Second preset; prints the rows that differ.
        #[arg(long)]
        against: Option<String>,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, default_value_t = 100.0)]
        frame_rate: f64,
        #[arg(long, default_value_t = 500)]
        vocab: usize,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Train on the synthetic task.
    Train {
        /// TOML run config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fresh output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `[train] seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Divergence counts over architectures, peak learning rates and seeds.
    Stability {
        /// Base TOML config; the built-in sweep config when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![2e-3, 2.0])]
        lrs: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values = ["conformer", "e_branchformer"])]
        archs: Vec<String>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// One of primitives, mha, conv, cgmlp, merge, conformer,
        /// ebranchformer, ctc; all when omitted.
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Greedy CTC transcripts from a trained run.
    Decode {
        #[arg(long)]
        run: PathBuf,
        /// Feature file: one frame per line, blank line between utterances.
        /// Without it the run's synthetic split is decoded.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Valid)]
        split: SplitArg,
        /// Symbol table: line k names token k.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Run the full invariant suite.
    Verify {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<branchkit::TensorError> for Failure {
    fn from(e: branchkit::TensorError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Output and exit code, kept apart from process I/O so tests can drive it.
pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn execute(argv: &[String]) -> CliOutput {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            return if code == EXIT_OK {
                CliOutput { code, stdout: text, stderr: String::new() }
            } else {
                CliOutput { code, stdout: String::new(), stderr: text }
            };
        }
    };
    let mut out = String::new();
    let result = dispatch(cli.command, &mut out);
    match result {
        Ok(passed) => CliOutput {
            code: if passed { EXIT_OK } else { EXIT_VERIFY },
            stdout: out,
            stderr: String::new(),
        },
        Err(Failure::Usage(m)) => CliOutput {
            code: EXIT_USAGE,
            stdout: out,
            stderr: format!("error: {m}\n"),
        },
        Err(Failure::Runtime(m)) => CliOutput {
            code: EXIT_RUNTIME,
            stdout: out,
            stderr: format!("error: {m}\n"),
        },
    }
}

/// [`execute`] writing to the process streams.
pub fn run_cli(argv: &[String]) -> i32 {
    let r = execute(argv);
    print!("{}", r.stdout);
    eprint!("{}", r.stderr);
    r.code
}

fn preset_model(name: &str, vocab: usize) -> Result<ModelConfig, Failure> {
    let encoder = EncoderConfig::preset(name).ok_or_else(|| {
        Failure::Usage(format!(
            "unknown preset {name:?}; expected one of {}",
            EncoderConfig::PRESETS.join(", ")
        ))
    })?;
    Ok(ModelConfig { encoder, vocab })
}

fn read_config(path: Option<&Path>, fallback: RunConfig) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(fallback),
        Some(p) => Ok(RunConfig::from_toml(&fs::read_to_string(p)?)?),
    }
}

fn fresh_dir(dir: &Path) -> Result<(), Failure> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(Failure::Runtime(format!("output directory {} is not empty", dir.display())));
    }
    Ok(())
}

fn parse_arch(s: &str) -> Result<LayerKind, Failure> {
    match s {
        "conformer" => Ok(LayerKind::Conformer),
        "e_branchformer" | "ebranchformer" => Ok(LayerKind::EBranchformer),
        _ => Err(Failure::Usage(format!("unknown architecture {s:?}"))),
    }
}

fn outcome_lines(out: &mut String, outcomes: &[CheckOutcome]) -> bool {
    for c in outcomes {
        let _ = writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = outcomes.iter().filter(|c| !c.passed).count();
    let _ = writeln!(out, "{} checks, {failed} failed", outcomes.len());
    failed == 0
}

/// Utterances from a feature file: whitespace-separated floats, one frame
/// per line, utterances separated by blank lines.
fn read_features(path: &Path, feat_dim: usize) -> Result<Vec<Utterance>, Failure> {
    let text = fs::read_to_string(path)?;
    let mut utts = Vec::new();
    let mut cur: Vec<f64> = Vec::new();
    let finish = |cur: &mut Vec<f64>, utts: &mut Vec<Utterance>| {
        if !cur.is_empty() {
            utts.push(Utterance {
                frames: cur.len() / feat_dim,
                feats: std::mem::take(cur),
                labels: Vec::new(),
            });
        }
    };
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            finish(&mut cur, &mut utts);
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::Usage(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if row.len() != feat_dim {
            return Err(Failure::Usage(format!(
                "{}:{}: {} values, the model expects {feat_dim}",
                path.display(),
                n + 1,
                row.len()
            )));
        }
        cur.extend(row);
    }
    finish(&mut cur, &mut utts);
    for (i, u) in utts.iter().enumerate() {
        if branchkit::nn::subsampled_len(u.frames).is_none() {
            return Err(Failure::Usage(format!(
                "utterance {} has {} frames, fewer than the subsampling minimum {}",
                i + 1,
                u.frames,
                branchkit::nn::MIN_SUBSAMPLE_INPUT
            )));
        }
    }
    Ok(utts)
}

fn dispatch(cmd: Command, out: &mut String) -> Result<bool, Failure> {
    match cmd {
        Command::Profile {
            preset,
            against,
            seconds,
            frame_rate,
            vocab,
            format,
        } => {
            let report = profile_report(&preset_model(&preset, vocab)?, seconds, frame_rate)?;
            match against {
                None => match format {
                    Format::Text => out.push_str(&report.to_text()),
                    Format::Json => {
                        let _ = writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("serialisable"));
                    }
                },
                Some(other) => {
                    let right = profile_report(&preset_model(&other, vocab)?, seconds, frame_rate)?;
                    let rows = diff_reports(&report, &right);
                    match format {
                        Format::Json => {
                            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&rows).expect("serialisable"));
                        }
                        Format::Text => {
                            let cell = |v: Option<(u64, u64)>| v.map_or("-".to_string(), |(p, m)| format!("{p} / {m}"));
                            let _ = writeln!(out, "{:<16} {:>30} {:>30}", "module", preset, other);
                            for r in rows {
                                let _ = writeln!(out, "{:<16} {:>30} {:>30}", r.name, cell(r.left), cell(r.right));
                            }
                            let _ = writeln!(
                                out,
                                "{:<16} {:>30} {:>30}",
                                "total",
                                cell(Some((report.totals.params, report.totals.macs))),
                                cell(Some((right.totals.params, right.totals.macs)))
                            );
                        }
                    }
                }
            }
            Ok(true)
        }
        Command::Train { config, out: dir, seed } => {
            let mut cfg = read_config(config.as_deref(), RunConfig::default())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            fresh_dir(&dir)?;
            let rec = train(&cfg, Some(&dir))?.record;
            let _ = writeln!(out, "run {} ({} steps, {:.1} s)", rec.run_id, rec.steps.len(), rec.wall_time_secs);
            let _ = writeln!(out, "epoch 0: val_loss {:.4} ter {:.4}", rec.initial_val_loss, rec.initial_val_ter);
            for e in &rec.epochs {
                let _ = writeln!(
                    out,
                    "epoch {}: train_loss {:.4} val_loss {:.4} ter {:.4}",
                    e.epoch, e.train_loss, e.val_loss, e.val_ter
                );
            }
            if let Some(why) = &rec.divergence {
                let _ = writeln!(out, "diverged: {why}");
            }
            let _ = writeln!(out, "wrote {}", dir.display());
            Ok(true)
        }
        Command::Stability {
            config,
            out: dir,
            seeds,
            lrs,
            archs,
        } => {
            let base = read_config(config.as_deref(), stability_toy_config())?;
            let archs = archs.iter().map(|a| parse_arch(a)).collect::<Result<Vec<_>, _>>()?;
            fresh_dir(&dir)?;
            let report = stability_experiment(&base, &archs, &lrs, seeds, Some(&dir))?;
            let _ = writeln!(out, "{:<16} {:>10} {:>6} {:>9}", "arch", "peak_lr", "runs", "diverged");
            for c in &report.cells {
                let _ = writeln!(out, "{:<16} {:>10} {:>6} {:>9}", c.arch.as_str(), c.peak_lr, c.runs, c.diverged);
            }
            let _ = writeln!(out, "wrote {}", dir.display());
            Ok(true)
        }
        Command::Gradcheck { target, seeds } => {
            let targets = match target {
                None => GradTarget::ALL.to_vec(),
                Some(t) => vec![t.parse::<GradTarget>()?],
            };
            Ok(outcome_lines(out, &gradient_suite(&targets, seeds)))
        }
        Command::Decode {
            run,
            input,
            split,
            vocab,
        } => {
            let (cfg, model, store) = load_run(&run)?;
            let utts = match &input {
                Some(p) => read_features(p, cfg.task.feat_dim)?,
                None => gen_split(
                    &cfg.task,
                    match split {
                        SplitArg::Train => Split::Train,
                        SplitArg::Valid => Split::Valid,
                    },
                )?,
            };
            let symbols: Option<Vec<String>> = match &vocab {
                None => None,
                Some(p) => Some(fs::read_to_string(p)?.lines().map(|l| l.trim().to_string()).collect()),
            };
            for hyp in decode(&model, &store, &utts, cfg.train.batch_frames)? {
                let words: Vec<String> = hyp
                    .iter()
                    .map(|&k| match &symbols {
                        Some(table) => table.get(k - 1).cloned().unwrap_or_else(|| k.to_string()),
                        None => k.to_string(),
                    })
                    .collect();
                let _ = writeln!(out, "{}", words.join(" "));
            }
            Ok(true)
        }
        Command::Verify { seeds, format } => {
            let outcomes = verify_all(seeds);
            match format {
                Format::Text => Ok(outcome_lines(out, &outcomes)),
                Format::Json => {
                    let _ = writeln!(out, "{}", serde_json::to_string_pretty(&outcomes).expect("serialisable"));
                    Ok(outcomes.iter().all(|c| c.passed))
                }
            }
        }
    }
}
