use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::LevelFilter;
use rephrase_core::config::PipelineConfig;
use rephrase_core::corpus_io::write_corpus;
use rephrase_core::pipeline::{Pipeline, PipelineError};
use rephrase_core::prompt_engine::TemplateRegistry;
use rephrase_core::synthetic::{corpus, SyntheticSpec};
use rephrase_core::TokenEstimator;

/// Rephrase raw web-text corpora into synthetic pre-training data.
#[derive(Parser)]
#[command(name = "rephrase", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline config file (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override `work_dir`.
    #[arg(long)]
    work_dir: Option<String>,
    /// Override `input`.
    #[arg(long)]
    input: Option<String>,
    /// Override `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `backend.max_in_flight`.
    #[arg(long)]
    max_in_flight: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Split documents into passages.
    Preprocess(ConfigArgs),
    /// Send passages through the completion backend (resumable).
    Rephrase(ConfigArgs),
    /// Clean, filter and reassemble completions into documents.
    Postprocess(ConfigArgs),
    /// Score the filter corpus with the configured scorer.
    Score(ConfigArgs),
    /// Keep documents scoring strictly above the threshold.
    Filter {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Compose the configured mixture.
    Mix(ConfigArgs),
    /// Write the document/token report for every corpus present.
    Stats(ConfigArgs),
    /// Run every stage in order.
    RunAll(ConfigArgs),
    /// List prompt templates.
    Templates {
        /// Only templates for this language.
        #[arg(long)]
        language: Option<String>,
        /// Include custom templates from this config.
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
    /// Write a seeded synthetic multilingual corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        docs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        shard_size: usize,
    },
}

impl ConfigArgs {
    fn pipeline(&self) -> Result<Pipeline, PipelineError> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(w) = &self.work_dir {
            cfg.work_dir = w.clone();
        }
        if let Some(i) = &self.input {
            cfg.input = i.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.max_in_flight {
            cfg.backend.max_in_flight = n;
        }
        Pipeline::new(cfg)
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Preprocess(args) => {
            let r = args.pipeline()?.preprocess()?;
            println!(
                "{} documents -> {} passages ({:.0} est. tokens); {} oversize_unsplittable, {} undersize_tail",
                r.docs, r.passages, r.est_tokens, r.oversize_unsplittable, r.undersize_tail
            );
            println!(
                "tokens per char {:.6} ({})",
                r.calibration.tokens_per_char,
                if r.calibration.calibrated { "calibrated" } else { "default" }
            );
        }
        Command::Rephrase(args) => {
            let r = args.pipeline()?.rephrase()?;
            println!(
                "{} jobs: {} resumed, {} requests, {} done, {} failed; {:.1} est. tokens/s",
                r.jobs, r.resumed, r.requests_run, r.done, r.failed, r.tokens_per_s
            );
        }
        Command::Postprocess(args) => {
            print!("{}", args.pipeline()?.postprocess()?.render());
        }
        Command::Score(args) => {
            let m = args.pipeline()?.score()?;
            println!("{} documents scored by {}", m.docs, m.scorer);
        }
        Command::Filter { cfg, threshold } => {
            print!("{}", cfg.pipeline()?.filter(threshold)?.render());
        }
        Command::Mix(args) => {
            print!("{}", args.pipeline()?.mix()?.render());
        }
        Command::Stats(args) => {
            print!("{}", args.pipeline()?.stats()?.render_table());
        }
        Command::RunAll(args) => {
            let s = args.pipeline()?.run_all()?;
            print!("{}", s.postprocess.render());
            if let Some(f) = &s.filter {
                print!("{}", f.render());
            }
            if let Some(m) = &s.mix {
                print!("{}", m.render());
            }
            print!("{}", s.stats.render_table());
        }
        Command::Templates { language, config } => {
            let registry = match config {
                Some(path) => PipelineConfig::load(&path)?.registry()?,
                None => TemplateRegistry::builtin(),
            };
            let list = match &language {
                Some(lang) => registry.list_language(lang),
                None => registry.list(),
            };
            for t in list {
                println!(
                    "{:<16} {:<4} {:<8} {}",
                    t.id,
                    t.language,
                    format!("{:?}", t.mode).to_lowercase(),
                    if t.builtin { "builtin" } else { "custom" }
                );
            }
        }
        Command::Synth {
            out,
            docs,
            seed,
            shard_size,
        } => {
            let spec = SyntheticSpec {
                docs,
                seed,
                ..Default::default()
            };
            let m = write_corpus(&out, "input", "", &corpus(&spec), shard_size, &TokenEstimator::default())?;
            println!("{} documents in {} shard(s) at {}", m.total_docs, m.shards.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(hint) = e.hint() {
                eprintln!("hint: {hint}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
