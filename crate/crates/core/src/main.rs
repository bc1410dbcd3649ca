use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use serde::Serialize;

use langunits::config::PipelineConfig;
use langunits::perturb::{self, Corpus};
use langunits::pipeline::{self, PipelineError, TableLog};

#[derive(Parser)]
#[command(name = "langunits", version, about = "Language-associated unit analytics")]
struct Cli {
    /// Worker threads (0 = all cores); overrides the config.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Identify language-associated units for every condition.
    Select(Common),
    /// Jaccard, alignment, partitions and degree regions between selections.
    Overlap(Common),
    /// Ridge probes against typology features.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Fold-assignment seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate harness perplexity records and run paired tests.
    InterveneStats(Common),
    /// Run all configured stages and write the bundle manifest.
    Report(Common),
    /// Produce perturbed corpora.
    #[command(subcommand)]
    Perturb(PerturbCmd),
}

#[derive(Subcommand)]
enum PerturbCmd {
    /// Shuffle words within each sentence.
    Shuffle {
        #[arg(long)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "und")]
        language: String,
    },
    /// Strip combining marks (NFD, drop marks, NFC).
    Ascii {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "und")]
        language: String,
    },
}

#[derive(Serialize)]
struct PerturbMeta<'a> {
    transform: &'a str,
    rule: &'a str,
    seed: Option<u64>,
    sentences: usize,
    version: &'a str,
}

fn load(common: &Common, threads: Option<usize>) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = std::env::current_dir()
            .map(|d| d.join(out))
            .unwrap_or_else(|_| out.clone());
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn perturb_io(e: perturb::PerturbError) -> PipelineError {
    match e {
        perturb::PerturbError::Utf8(_) | perturb::PerturbError::Empty(_) => PipelineError::Validation(e.to_string()),
        perturb::PerturbError::Io { .. } => PipelineError::Upstream(e.to_string()),
    }
}

fn write_meta(out: &Path, meta: &PerturbMeta) -> Result<(), PipelineError> {
    let mut path = out.as_os_str().to_owned();
    path.push(".meta.json");
    let text = serde_json::to_string_pretty(meta).map_err(|e| PipelineError::Upstream(e.to_string()))? + "\n";
    std::fs::write(&path, text).map_err(|e| PipelineError::Upstream(format!("{}: {e}", Path::new(&path).display())))
}

fn run_perturb(cmd: PerturbCmd) -> Result<(), PipelineError> {
    let version = pipeline::TOOL_VERSION;
    match cmd {
        PerturbCmd::Shuffle {
            seed,
            input,
            out,
            language,
        } => {
            let corpus = Corpus::read(&input, &language).map_err(perturb_io)?;
            let shuffled = perturb::shuffle_words(&corpus, seed);
            shuffled.write(&out).map_err(perturb_io)?;
            write_meta(
                &out,
                &PerturbMeta {
                    transform: "shuffle",
                    rule: "words are maximal non-whitespace runs; shuffled words re-joined with single spaces; sentences with <2 words unchanged",
                    seed: Some(seed),
                    sentences: shuffled.sentences.len(),
                    version,
                },
            )
        }
        PerturbCmd::Ascii { input, out, language } => {
            let corpus = Corpus::read(&input, &language).map_err(perturb_io)?;
            let stripped = perturb::strip_corpus(&corpus);
            stripped.write(&out).map_err(perturb_io)?;
            write_meta(
                &out,
                &PerturbMeta {
                    transform: "ascii",
                    rule: "NFD, drop combining marks, NFC",
                    seed: None,
                    sentences: stripped.sentences.len(),
                    version,
                },
            )
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let threads = cli.threads;
    match cli.command {
        Command::Perturb(cmd) => pipeline::with_threads(threads.unwrap_or(0), || run_perturb(cmd))?,
        Command::Select(c) => {
            let cfg = load(&c, threads)?;
            cfg.validate()?;
            pipeline::with_threads(cfg.threads, || {
                let mut log = TableLog::default();
                pipeline::run_select(&cfg, &mut log)?;
                pipeline::finish(&cfg, &log)
            })?
        }
        Command::Overlap(c) => {
            let cfg = load(&c, threads)?;
            cfg.validate()?;
            pipeline::with_threads(cfg.threads, || {
                let mut log = TableLog::default();
                let sel = pipeline::load_selections(&cfg)?;
                pipeline::run_overlap(&cfg, &sel, &mut log)?;
                pipeline::finish(&cfg, &log)
            })?
        }
        Command::Probe { common, seed } => {
            let mut cfg = load(&common, threads)?;
            if let (Some(s), Some(p)) = (seed, cfg.probe.as_mut()) {
                p.seed = Some(s);
            }
            cfg.validate()?;
            pipeline::with_threads(cfg.threads, || {
                let mut log = TableLog::default();
                let sel = pipeline::load_selections(&cfg).unwrap_or_default();
                pipeline::run_probe(&cfg, &sel, &mut log)?;
                pipeline::finish(&cfg, &log)
            })?
        }
        Command::InterveneStats(c) => {
            let cfg = load(&c, threads)?;
            cfg.validate()?;
            pipeline::with_threads(cfg.threads, || {
                let mut log = TableLog::default();
                pipeline::run_intervene_stats(&cfg, &mut log)?;
                pipeline::finish(&cfg, &log)
            })?
        }
        Command::Report(c) => {
            let cfg = load(&c, threads)?;
            pipeline::with_threads(cfg.threads, || pipeline::run_report(&cfg).map(|_| ()))?
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
