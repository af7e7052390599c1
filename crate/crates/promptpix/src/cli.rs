//! Command-line surface: thin, deterministic wrappers over the library.
//!
//! One binary with five subcommands (corpus-build, train, eval, infer,
//! cost). Settings come from a named profile (`--profile toy|paper`) or a
//! TOML file (`--config`); the two are mutually exclusive, and the common
//! flags `--seed` and `--out` override whichever was chosen. Every command
//! writes the resolved config next to its outputs, so an artifact directory
//! is self-describing. Failures map to structured exit codes: 2 for
//! validation and configuration problems, 3 for I/O, 4 for numerical
//! failures.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::corpus::{Corpus, MANIFEST_FILE};
use crate::eval::{
    cross_domain_suite, evaluate_task, mismatch_suite, prompt_sensitivity, psnr_images, Infer,
    Metric, MetricReport, ReportMeta,
};
use crate::img::Image;
use crate::model::cost::cost_table;
use crate::model::Model;
use crate::seed::{derive, rng};
use crate::train::{digest_file, Checkpoint, Trainer};
use crate::{Error, Result};

use rand::Rng;

#[derive(Parser)]
#[command(
    name = "promptpix",
    version,
    about = "Prompt-conditioned image-to-image toolkit: corpus generation, training, evaluation"
)]
pub struct Cli {
    /// TOML run config (stands alone; not merged with --profile).
    #[arg(long, global = true, value_name = "FILE", conflicts_with = "profile")]
    pub config: Option<PathBuf>,

    /// Named settings bundle to run with: `toy` or `paper`.
    #[arg(long, global = true, value_name = "NAME")]
    pub profile: Option<String>,

    /// Override the corpus, train, and eval seeds of the resolved config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (default: out_root/<command> from the config; the
    /// PROMPTPIX_OUT_ROOT environment variable overrides the root).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a deterministic prompt-bundle corpus.
    CorpusBuild,

    /// Train a model on a corpus directory.
    Train {
        /// Corpus directory (from corpus-build).
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// Checkpoint to continue from instead of a fresh start.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },

    /// Score a checkpoint on an evaluation corpus.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Evaluation corpus directory.
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// Training corpus directory; when given, evaluation refuses to run
        /// if the two corpora share any scene.
        #[arg(long, value_name = "DIR")]
        train_corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Protocol::Tasks)]
        protocol: Protocol,
    },

    /// Run one image through a checkpoint with a prompt pair.
    Infer {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PNG")]
        input: PathBuf,
        #[arg(long, value_name = "PNG")]
        prompt_src: PathBuf,
        #[arg(long, value_name = "PNG")]
        prompt_tgt: PathBuf,
        /// Clean reference; when given, input and output PSNR are printed.
        #[arg(long, value_name = "PNG")]
        reference: Option<PathBuf>,
    },

    /// Print the parameter and MACs table for the configured model.
    Cost {
        /// Square input resolution the MACs are counted at.
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    /// Per-task quality table under one seeded prompt pair per task.
    Tasks,
    /// Score spread across prompt draws, per task.
    Sensitivity,
    /// Preservation under restoration prompts on clean inputs.
    Mismatch,
    /// Prompt-steering accuracy against competing task targets.
    CrossDomain,
}

impl Protocol {
    fn name(self) -> &'static str {
        match self {
            Protocol::Tasks => "tasks",
            Protocol::Sensitivity => "sensitivity",
            Protocol::Mismatch => "mismatch",
            Protocol::CrossDomain => "cross_domain",
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, &cli.profile) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::by_name(name)?,
        (None, None) => {
            return Err(Error::config(
                "no configuration given: pass --profile toy|paper or --config FILE",
            ))
        }
    };
    if let Some(seed) = cli.seed {
        cfg.corpus.seed = seed;
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_out(cli: &Cli, cfg: &RunConfig, leaf: &str) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    let root = std::env::var_os("PROMPTPIX_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.io.out_root.clone());
    root.join(leaf)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(format!("creating {}", dir.display())))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::CorpusBuild => {
            let cfg = resolve_config(cli)?;
            let dir = resolve_out(cli, &cfg, "corpus");
            cmd_corpus_build(&cfg, &dir)
        }
        Cmd::Train { corpus, resume } => {
            let cfg = resolve_config(cli)?;
            let dir = resolve_out(cli, &cfg, "train");
            cmd_train(&cfg, corpus, resume.as_deref(), &dir)
        }
        Cmd::Eval {
            checkpoint,
            corpus,
            train_corpus,
            protocol,
        } => {
            let cfg = resolve_config(cli)?;
            let dir = resolve_out(cli, &cfg, "eval");
            cmd_eval(
                &cfg,
                checkpoint,
                corpus,
                train_corpus.as_deref(),
                *protocol,
                &dir,
            )
        }
        Cmd::Infer {
            checkpoint,
            input,
            prompt_src,
            prompt_tgt,
            reference,
        } => {
            // Inference needs no run config: the checkpoint carries the
            // architecture. --config/--profile are accepted but only used
            // for the output root.
            let cfg = match (&cli.config, &cli.profile) {
                (None, None) => RunConfig::default(),
                _ => resolve_config(cli)?,
            };
            let dir = resolve_out(cli, &cfg, "infer");
            cmd_infer(
                checkpoint,
                input,
                prompt_src,
                prompt_tgt,
                reference.as_deref(),
                &dir,
            )
        }
        Cmd::Cost { size } => {
            let cfg = resolve_config(cli)?;
            cmd_cost(&cfg, *size)
        }
    }
}

/// Builds the corpus described by `cfg.corpus` into `dir` and prints the
/// manifest path. Rebuilding into the same directory is byte-identical.
pub fn cmd_corpus_build(cfg: &RunConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    crate::corpus::build_corpus(
        &cfg.corpus.specs(),
        &cfg.corpus.pool(),
        cfg.corpus.n_per_task,
        cfg.corpus.seed,
        dir,
    )?;
    cfg.save(&dir.join("run-config.toml"))?;
    println!("{}", dir.join(MANIFEST_FILE).display());
    Ok(())
}

/// Trains (or resumes) on `corpus_dir`, writing checkpoints and a JSONL
/// train log into `dir`, and prints the final checkpoint path.
pub fn cmd_train(
    cfg: &RunConfig,
    corpus_dir: &Path,
    resume: Option<&Path>,
    dir: &Path,
) -> Result<()> {
    let corpus = Corpus::open(corpus_dir)?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt, &corpus)?,
        None => Trainer::new(&cfg.model, cfg.train.clone(), &corpus)?,
    };
    ensure_dir(dir)?;
    cfg.save(&dir.join("run-config.toml"))?;
    let final_path = trainer.run(dir)?;
    println!("{}", final_path.display());
    Ok(())
}

/// Runs one evaluation protocol and writes `report-<protocol>.json` plus a
/// CSV table next to it, printing the JSON path.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    corpus_dir: &Path,
    train_corpus: Option<&Path>,
    protocol: Protocol,
    dir: &Path,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.restore_model()?;
    let corpus = Corpus::open(corpus_dir)?;
    let train_scenes = match train_corpus {
        Some(p) => Some(Corpus::open(p)?.scene_ids()),
        None => None,
    };
    let meta = ReportMeta::new(
        protocol.name(),
        digest_file(checkpoint)?,
        digest_file(&corpus_dir.join(MANIFEST_FILE))?,
        cfg.eval.seed,
    );
    let report = build_report(&model, &corpus, cfg, protocol, meta, train_scenes.as_ref())?;
    ensure_dir(dir)?;
    cfg.save(&dir.join("run-config.toml"))?;
    let json_path = dir.join(format!("report-{}.json", protocol.name()));
    let csv_path = dir.join(format!("report-{}.csv", protocol.name()));
    report.save_json(&json_path)?;
    report.save_csv(&csv_path)?;
    println!("{}", json_path.display());
    Ok(())
}

/// Protocol dispatch shared by the CLI and tests: everything the report
/// contains is a pure function of (model, corpus, config, protocol).
pub fn build_report(
    model: &dyn Infer,
    corpus: &Corpus,
    cfg: &RunConfig,
    protocol: Protocol,
    meta: ReportMeta,
    train_scenes: Option<&std::collections::BTreeSet<crate::scene::SceneId>>,
) -> Result<MetricReport> {
    let mut report = MetricReport::new(meta);
    let tasks: Vec<_> = corpus.manifest.header.tasks.iter().map(|s| s.kind).collect();
    match protocol {
        Protocol::Tasks => {
            for (ti, &task) in tasks.iter().enumerate() {
                let slice = corpus.by_task(task);
                if slice.is_empty() {
                    continue;
                }
                let mut r = rng(derive(cfg.eval.seed, "prompt-draw", ti as u64));
                let b = corpus.load_bundle(slice[r.gen_range(0..slice.len())])?;
                let metric = Metric::for_task(task);
                let score = evaluate_task(
                    model,
                    corpus,
                    task,
                    (&b.prompt_src, &b.prompt_tgt),
                    metric,
                    train_scenes,
                )?;
                report.push_row(task.id(), 0, metric.name(), score.value, score.n_samples);
            }
        }
        Protocol::Sensitivity => {
            for &task in &tasks {
                let metric = Metric::for_task(task);
                let s = prompt_sensitivity(
                    model,
                    corpus,
                    task,
                    cfg.eval.n_prompts,
                    cfg.eval.seed,
                    metric,
                    train_scenes,
                )?;
                let n = corpus.by_task(task).len();
                for (i, &v) in s.per_prompt.iter().enumerate() {
                    report.push_row(task.id(), i, metric.name(), v, n);
                }
            }
        }
        Protocol::Mismatch => {
            for row in mismatch_suite(model, corpus, cfg.eval.n_mismatch_inputs, cfg.eval.seed)? {
                report.push_row(
                    row.prompt_task.id(),
                    0,
                    "preservation_psnr_db",
                    row.preservation_db,
                    row.n_inputs,
                );
            }
        }
        Protocol::CrossDomain => {
            let s = cross_domain_suite(model, corpus, cfg.eval.seed, train_scenes)?;
            for case in &s.cases {
                report.push_row(
                    case.task.id(),
                    case.sample,
                    "steering_hit",
                    if case.hit { 1.0 } else { 0.0 },
                    1,
                );
            }
            report.set_scalar("steering_accuracy", s.accuracy);
            report.set_scalar("random_label_floor", s.random_label_floor);
        }
    }
    report.summarize();
    Ok(report)
}

/// Loads a checkpoint, runs one image through it, writes `output.png` into
/// `dir`, and prints the output path (plus PSNR against a reference, when
/// given).
pub fn cmd_infer(
    checkpoint: &Path,
    input: &Path,
    prompt_src: &Path,
    prompt_tgt: &Path,
    reference: Option<&Path>,
    dir: &Path,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model: Model<f32> = ck.restore_model()?;
    let img = Image::load_png(input)?;
    let src = Image::load_png(prompt_src)?;
    let tgt = Image::load_png(prompt_tgt)?;
    let out = model.infer(&img, Some((&src, &tgt)))?;
    ensure_dir(dir)?;
    let out_path = dir.join("output.png");
    out.save_png(&out_path)?;
    if let Some(ref_path) = reference {
        let clean = Image::load_png(ref_path)?;
        println!(
            "input {:.2} dB, output {:.2} dB",
            psnr_images(&img, &clean)?,
            psnr_images(&out, &clean)?
        );
    }
    println!("{}", out_path.display());
    Ok(())
}

/// Prints the analytic parameter and MACs table for `cfg.model`.
pub fn cmd_cost(cfg: &RunConfig, size: usize) -> Result<()> {
    if size == 0 {
        return Err(Error::validation("--size must be positive"));
    }
    let table = cost_table(&cfg.model, (size, size))?;
    println!("{table}");
    Ok(())
}
