use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use oedit_core::harness::{self, ExperimentConfig};
use oedit_core::{records, Error};

/// Environment variable that replaces `output_dir` of any config.
const OUTPUT_DIR_ENV: &str = "OEDIT_OUTPUT_DIR";

const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "oedit", version, about = "Sequential editing experiments on a linear associative memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML experiment config.
    config: PathBuf,
    /// Overrides such as `corpus.d=128` or `methods.0.solver.lambda1=10`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the model and edit stream of every seed as record files.
    GenCorpus(ConfigArgs),
    /// Run the full method × T × seed grid.
    Run(ConfigArgs),
    /// Tune ablation knobs against the target method's final norm.
    MatchNorms(ConfigArgs),
    /// Aggregate the reports in the config's output directory into CSV.
    Summarize {
        #[command(flatten)]
        args: ConfigArgs,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default config.
    DefaultConfig,
}

enum Failure {
    Config(String),
    Partial(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) | Some(Error::InvalidArgument(_)) => Failure::Config(format!("{e:#}")),
            _ => Failure::Other(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text, &args.overrides)?;
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_corpus(cfg: &ExperimentConfig) -> Result<(), Failure> {
    create_dir(&cfg.output_dir)?;
    let fp = cfg.fingerprint()?;
    for &seed in &cfg.seeds {
        let (model, stream) = harness::world_for_seed(cfg, seed)?;
        let corpus = cfg.output_dir.join(format!("corpus_seed{seed}_{}.jsonl", &fp[..12]));
        let edits = cfg.output_dir.join(format!("stream_seed{seed}_{}.jsonl", &fp[..12]));
        records::write_corpus(&corpus, &model)?;
        records::write_stream(&edits, &stream)?;
        println!("{}\n{}", corpus.display(), edits.display());
    }
    Ok(())
}

fn run(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let result = harness::run_grid(cfg)?;
    for m in result.norm_matches.iter().flat_map(|r| &r.matches) {
        if !m.matched {
            eprintln!(
                "warning: {} not matched (knob {}, norm {:.4} vs target {:.4}{})",
                m.method,
                m.knob,
                m.achieved_norm,
                m.target_norm,
                if m.saturated { ", saturated" } else { "" }
            );
        }
    }
    println!("{}", result.summary_path.display());
    let failed = result.failed_cells();
    if failed > 0 {
        for r in result.reports.iter().filter(|r| r.failure.is_some()) {
            eprintln!(
                "failed: {} T={} seed={}: {}",
                r.method,
                r.t,
                r.seed,
                r.failure.as_deref().unwrap_or("")
            );
        }
        return Err(Failure::Partial(format!(
            "{failed} of {} cells failed",
            result.reports.len()
        )));
    }
    Ok(())
}

fn match_norms(cfg: &ExperimentConfig) -> Result<(), Failure> {
    create_dir(&cfg.output_dir)?;
    let reports = harness::match_norms(cfg)?;
    let fp = cfg.fingerprint()?;
    println!("method,t,seed,knob,achieved_norm,target_norm,matched,saturated");
    for r in &reports {
        let path = cfg
            .output_dir
            .join(format!("norm-match_T{}_seed{}_{}.json", r.t, r.seed, &fp[..12]));
        std::fs::write(&path, harness::to_json_text(r)?)
            .with_context(|| format!("writing {}", path.display()))?;
        for m in &r.matches {
            println!(
                "{},{},{},{},{},{},{},{}",
                m.method, r.t, r.seed, m.knob, m.achieved_norm, m.target_norm, m.matched, m.saturated
            );
        }
    }
    Ok(())
}

fn summarize(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(), Failure> {
    let reports = harness::load_reports(&cfg.output_dir)?;
    let text = harness::emit_summary(&reports)?;
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(&load(&a)?),
        Command::Run(a) => run(&load(&a)?),
        Command::MatchNorms(a) => match_norms(&load(&a)?),
        Command::Summarize { args, out } => summarize(&load(&args)?, out.as_deref()),
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml_string()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Partial(msg)) => {
            eprintln!("partial failure: {msg}");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
