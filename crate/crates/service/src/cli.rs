//! Command-line front end.

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use monoprobe_core::pipeline::{Pipeline, RunConfig, Stage};
use monoprobe_core::synthetic::{SyntheticCorpus, SyntheticSpec};

use crate::api::{serve, AppState};

#[derive(Debug, Parser)]
#[command(name = "monoprobe", version, about = "Probe SAE features of paper summaries against quality quartiles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Declarative run file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the run file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the run file's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    pub fn load(&self) -> Result<RunConfig, Box<dyn std::error::Error>> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and join the corpus.
    Ingest(RunArgs),
    /// Assign quartiles and write balanced task datasets.
    Bin(RunArgs),
    /// Generate summaries for every task paper.
    Summarize(RunArgs),
    /// Encode summaries and pool per-paper feature vectors.
    Featurize(RunArgs),
    /// Select the leaf budget and train one probe per task and setting.
    Train(RunArgs),
    /// Score probes and the baseline on the held-out split.
    Evaluate(RunArgs),
    /// Run everything and write the report bundle.
    Report(RunArgs),
    /// Serve the /v1 API over a finished run.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Write a task's feature table merged with current annotations as CSV.
    Export {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        task: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Write a synthetic corpus with a planted signal plus a mock run file.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        papers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn stage_of(command: &Command) -> Option<(Stage, &RunArgs)> {
    Some(match command {
        Command::Ingest(a) => (Stage::Ingest, a),
        Command::Bin(a) => (Stage::Bin, a),
        Command::Summarize(a) => (Stage::Summarize, a),
        Command::Featurize(a) => (Stage::Featurize, a),
        Command::Train(a) => (Stage::Train, a),
        Command::Evaluate(a) => (Stage::Evaluate, a),
        Command::Report(a) => (Stage::Report, a),
        _ => return None,
    })
}

const SYNTH_RUN: &str = r#"papers = "papers.jsonl"
venues = "venues.jsonl"
output_dir = "out"
seed = {seed}

[generators.mock]
kind = "mock"

[saes.mock-sae]
kind = "mock"
model_id = "mock-lm"
layer_index = 20
feature_count = 1024
sae_id = "mock-lm/layer_20/width_1k"

[[saes.mock-sae.planted]]
feature_index = 74
trigger_words = ["breakthrough", "landmark", "pioneering"]
strength = 1.0

[[settings]]
id = "setting-1"
generator = "mock"
sae = "mock-sae"

[baseline]
backend = "majority"
"#;

/// Writes to stdout; a closed pipe downstream is not an error.
fn emit(text: &str) -> std::io::Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => other,
    }
}

pub fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    if let Some((stage, args)) = stage_of(&cli.command) {
        let outcome = Pipeline::new(args.load()?)?.run_until(stage)?;
        emit(&(serde_json::to_string_pretty(&outcome.stats)? + "\n"))?;
        return Ok(());
    }
    match cli.command {
        Command::Serve { run, addr } => {
            let state = AppState::load(&run.load()?)?;
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(serve(state, addr))?;
        }
        Command::Export { run, task, file } => {
            let state = AppState::load(&run.load()?)?;
            let csv = state.export_csv(&task).ok_or_else(|| format!("unknown task `{task}`"))?;
            match file {
                Some(path) => fs::write(path, csv)?,
                None => emit(&csv)?,
            }
        }
        Command::Synth { dir, papers, seed } => {
            fs::create_dir_all(&dir)?;
            let synth = SyntheticCorpus::generate(&SyntheticSpec { papers, seed, ..Default::default() });
            fs::write(dir.join("papers.jsonl"), synth.papers_jsonl())?;
            fs::write(dir.join("venues.jsonl"), synth.venues_jsonl())?;
            fs::write(dir.join("run.toml"), SYNTH_RUN.replace("{seed}", &seed.to_string()))?;
            emit(&format!("wrote {} papers and run.toml to {}\n", synth.papers.len(), dir.display()))?;
        }
        _ => unreachable!("pipeline stages handled above"),
    }
    Ok(())
}
