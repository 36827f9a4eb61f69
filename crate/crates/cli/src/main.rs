use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use swae::config::TrainConfig;
use swae::data::{load_corpus, load_paired_corpus};
use swae::persistence::load_checkpoint;
use swae::train::Trainer;
use swae_cli::{
    cmd_evaluate, cmd_interpolate, cmd_reconstruct, cmd_resume, cmd_sample, cmd_sigma_hist, cmd_train,
    format_sentences, tokenize, write_text, EvalOptions, Reference,
};

#[derive(Parser)]
#[command(name = "swae", version, about = "Train and evaluate sentence autoencoders")]
struct Cli {
    /// Also write the report to this file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a key = value config file.
    Train {
        config: PathBuf,
        /// Override a config key, e.g. `--set epochs=5`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Weight the MMD cross term by 1 instead of 2.
        #[arg(long = "mmd-paper-literal")]
        mmd_cross_weight_one: bool,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Encode and greedily decode every sentence of a corpus.
    Reconstruct { checkpoint: PathBuf, corpus: PathBuf },
    /// Decode draws from the standard normal prior.
    Sample {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decode points on the line between two sentence codes.
    Interpolate {
        checkpoint: PathBuf,
        a: String,
        b: String,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Report the metric suite against a reference corpus.
    Evaluate {
        checkpoint: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Entropy in nats instead of bits.
        #[arg(long)]
        natural_log: bool,
        /// Print one TSV header and row instead of `key: value` lines.
        #[arg(long)]
        tsv: bool,
    },
    /// Histogram of posterior σ over a corpus.
    SigmaHist {
        checkpoint: PathBuf,
        corpus: PathBuf,
        /// Write the two-column histogram here; otherwise it is printed.
        #[arg(long)]
        hist: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<Trainer> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<String> {
    let report = match cli.cmd {
        Cmd::Train {
            config,
            overrides,
            mmd_cross_weight_one,
            resume,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            for kv in &overrides {
                let Some((k, v)) = kv.split_once('=') else {
                    bail!("--set expects KEY=VALUE, got {kv:?}");
                };
                cfg.set(k.trim(), v.trim())?;
            }
            if mmd_cross_weight_one {
                cfg.cross_factor = 1.0;
            }
            cfg.validate()?;
            let out = match resume {
                Some(p) => {
                    let mut t = load(&p)?;
                    t.config.checkpoint = cfg.checkpoint.clone();
                    t.config.log = cfg.log.clone();
                    cmd_resume(t, cfg.epochs)?
                }
                None => cmd_train(cfg)?,
            };
            let mut s = String::from("epoch\trec_per_token\tkl\tweighted_kl\tmmd\taux_kl\tlambda\tlr\n");
            for e in out.summaries() {
                s.push_str(&format!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:e}\n",
                    e.epoch, e.reconstruction_per_token, e.kl, e.weighted_kl, e.mmd, e.aux_kl, e.lambda, e.lr
                ));
            }
            s
        }
        Cmd::Reconstruct { checkpoint, corpus } => {
            let t = load(&checkpoint)?;
            let sentences = load_corpus(&corpus, t.config.max_len)?;
            let r = cmd_reconstruct(&t, &sentences)?;
            let note = if t.model.stochastic { " (posterior mean)" } else { "" };
            format!(
                "# greedy reconstructions{note}\n{}BLEU: {:.6} ({:.2})\n",
                format_sentences(&r.outputs),
                r.bleu,
                100.0 * r.bleu
            )
        }
        Cmd::Sample {
            checkpoint,
            count,
            seed,
        } => format_sentences(&cmd_sample(&load(&checkpoint)?, count, seed)?),
        Cmd::Interpolate {
            checkpoint,
            a,
            b,
            steps,
        } => {
            let t = load(&checkpoint)?;
            format_sentences(&cmd_interpolate(&t, &tokenize(&a), &tokenize(&b), steps)?)
        }
        Cmd::Evaluate {
            checkpoint,
            reference,
            samples,
            seed,
            natural_log,
            tsv,
        } => {
            let t = load(&checkpoint)?;
            let reference = if t.config.mode.is_dialog() {
                let (s, r) = load_paired_corpus(&reference, t.config.max_len)?;
                Reference::Pairs(s, r)
            } else {
                Reference::Sentences(load_corpus(&reference, t.config.max_len)?)
            };
            let opts = EvalOptions {
                samples,
                seed,
                entropy_base: if natural_log { std::f64::consts::E } else { 2.0 },
            };
            let r = cmd_evaluate(&t, &reference, &opts)?;
            if tsv {
                r.to_tsv()
            } else {
                r.to_text()
            }
        }
        Cmd::SigmaHist {
            checkpoint,
            corpus,
            hist,
        } => {
            let t = load(&checkpoint)?;
            let sentences = load_corpus(&corpus, t.config.max_len)?;
            let r = cmd_sigma_hist(&t, &sentences)?;
            match hist {
                Some(p) => {
                    write_text(&p, &r.histogram.to_text())?;
                    r.summary_text()
                }
                None => format!("{}{}", r.summary_text(), r.histogram.to_text()),
            }
        }
    };
    if let Some(p) = &cli.out {
        write_text(p, &report)?;
    }
    Ok(report)
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    match err.chain().find_map(|e| e.downcast_ref::<swae::Error>()) {
        Some(swae::Error::Autograd(_)) => "autograd",
        Some(swae::Error::Io { .. }) => "io",
        Some(swae::Error::InvalidArgument(_)) => "invalid-argument",
        Some(swae::Error::Parse { .. }) => "parse",
        Some(swae::Error::Config(_)) => "config",
        Some(swae::Error::UnsupportedFormat(_)) => "unsupported-format",
        Some(swae::Error::Integrity(_)) => "integrity",
        None => "usage",
    }
}

/// Error chain on one line, skipping causes already quoted by their parent.
fn one_line(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for e in err.chain() {
        let msg = e.to_string();
        if !parts.last().is_some_and(|p| p.ends_with(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ").split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error\tusage\t{first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error\t{}\t{}", error_kind(&e), one_line(&e));
            ExitCode::FAILURE
        }
    }
}
