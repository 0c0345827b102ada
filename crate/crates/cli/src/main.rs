//! `logsem` command-line pipeline.

mod config;
mod demo;
mod error;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, PipelineConfig, RepresentationChoice};
use error::CliError;
use pipeline::{Pipeline, Switch};

#[derive(Parser, Debug)]
#[command(name = "logsem", version, about = "Semantic log embeddings and event-level anomaly detection")]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "pipeline.json")]
    config: PathBuf,
    /// Output directory; overrides the LOGSEM_OUT_DIR variable and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps every worker pool at N threads.
    #[arg(long, global = true, value_name = "N")]
    cores: Option<usize>,
    /// teacher, student, qtybert or static:{word2vec|glove|fasttext}.
    #[arg(long, global = true)]
    representation: Option<RepresentationChoice>,
    /// Print the merged configuration before running.
    #[arg(long, global = true)]
    print_effective_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse raw log lines into events.
    Ingest,
    /// Mine log templates from the events.
    MineTemplates,
    /// Embed every event with the selected representation.
    Embed,
    /// Collect activation statistics of the student on a calibration sample.
    Calibrate,
    /// Quantize the selected student layers to INT8.
    Quantize,
    /// Train the low-rank enhancer towards the teacher's embedding space.
    TrainEnhancer,
    /// Train the recurrent detector on the training split.
    TrainDetector,
    /// Classify every test event.
    Detect,
    /// Time embedding generation.
    BenchEmbed,
    /// Time detection.
    BenchDetect,
    /// Compare embeddings against the teacher's.
    CompareEmbeddings,
    /// Run ablation variants and write a delta table.
    Ablate {
        /// Variants to run; all of them when omitted.
        #[arg(long = "switch", value_enum)]
        switches: Vec<Switch>,
    },
    /// Write a synthetic labeled corpus with matching vocabulary, word-vector
    /// tables and configuration.
    GenCorpus {
        #[arg(long, default_value = "data/synthetic")]
        dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        events: usize,
        #[arg(long, default_value_t = 0.1)]
        anomaly_rate: f64,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    if let Some(n) = cli.cores {
        if n == 0 {
            return Err(CliError::Usage("--cores must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size worker pool: {e}")))?;
    }
    if let Command::GenCorpus { dir, events, anomaly_rate } = &cli.command {
        if !(0.0..=1.0).contains(anomaly_rate) {
            return Err(CliError::Usage("--anomaly-rate must lie in [0, 1]".into()));
        }
        return demo::write_demo(dir, *events, cli.seed.unwrap_or(42), *anomaly_rate);
    }
    let overrides = Overrides {
        output_dir: cli.out,
        seed: cli.seed,
        cores: cli.cores,
        representation: cli.representation,
    };
    let cfg = PipelineConfig::load(&cli.config, &overrides)?;
    if cli.print_effective_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
    }
    let p = Pipeline::new(cfg)?;
    match cli.command {
        Command::Ingest => p.ingest(),
        Command::MineTemplates => p.mine_templates(),
        Command::Embed => p.embed(),
        Command::Calibrate => p.calibrate(),
        Command::Quantize => p.quantize(),
        Command::TrainEnhancer => p.train_enhancer(),
        Command::TrainDetector => p.train_detector(),
        Command::Detect => p.detect(),
        Command::BenchEmbed => p.bench_embed(),
        Command::BenchDetect => p.bench_detect(),
        Command::CompareEmbeddings => p.compare_embeddings(),
        Command::Ablate { switches } => p.ablate(&switches),
        Command::GenCorpus { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
