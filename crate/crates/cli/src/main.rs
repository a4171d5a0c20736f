//! `sitgen`: every pipeline stage as a subcommand. Stages hand off through
//! files under `--data-dir`; each run leaves a manifest in
//! `<data-dir>/manifests/<command>.json`.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "sitgen", version, about = "Situational music sessions: data, models, evaluation and serving")]
pub struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, env = "SITGEN_DATA_DIR", default_value = ".")]
    pub data_dir: PathBuf,
    #[arg(long, global = true, env = "SITGEN_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true, env = "SITGEN_JOBS")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Label logged streams through their playlist titles.
    Ingest(IngestArgs),
    /// Make a cold-user, cold-track or warm split of a corpus.
    Split(SplitArgs),
    /// Train user embeddings on the interaction matrix.
    Embed(EmbedArgs),
    /// Train the user-aware autotagger.
    TrainUamat(TrainUamatArgs),
    /// Train the situation predictor.
    TrainSp(TrainSpArgs),
    /// Run evaluation protocols and write reports.
    Evaluate(EvaluateArgs),
    /// Render report files as text tables.
    Report(ReportArgs),
    /// Tag (track, user) pairs with a trained autotagger.
    BuildStore(BuildStoreArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 1000)]
    pub tracks: usize,
    #[arg(long, default_value_t = 20_000)]
    pub streams: usize,
    /// Taxonomy size: 4, 8 or 12.
    #[arg(long, default_value_t = 4)]
    pub c: usize,
    #[arg(long, default_value_t = 0.9)]
    pub signal: f64,
    #[arg(long, default_value_t = 32)]
    pub mel_bands: usize,
    #[arg(long, default_value_t = 64)]
    pub mel_frames: usize,
    #[arg(long, default_value_t = 50)]
    pub background_plays: usize,
    /// Output directory, relative to the data dir.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long, default_value = "playlists.jsonl")]
    pub playlists: PathBuf,
    #[arg(long, default_value = "logs.jsonl")]
    pub logs: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub c: usize,
    /// JSON object mapping situation tags to title keywords.
    #[arg(long)]
    pub keywords: Option<PathBuf>,
    /// Session gap in minutes for the sessions file.
    #[arg(long, default_value_t = 20)]
    pub gap_minutes: u32,
    #[arg(long, default_value = "corpus.jsonl")]
    pub out: PathBuf,
    #[arg(long, default_value = "sessions.jsonl")]
    pub sessions: PathBuf,
    #[arg(long, default_value = "ingest_diagnostics.csv")]
    pub diagnostics: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    ColdUser,
    ColdTrack,
    Warm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    ColdUser,
    ColdTrack,
    Warm,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long, default_value = "corpus.jsonl")]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "warm")]
    pub kind: Kind,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Default: `split_<kind>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    #[arg(long, default_value = "interactions.csv")]
    pub interactions: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub factors: usize,
    #[arg(long, default_value_t = 15)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub reg: f64,
    #[arg(long, default_value_t = 40.0)]
    pub alpha: f64,
    #[arg(long, default_value = "embeddings.sgm")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainUamatArgs {
    #[arg(long, default_value = "corpus.jsonl")]
    pub corpus: PathBuf,
    /// Train on the split's train side only.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value = "mels.sgm")]
    pub mels: PathBuf,
    #[arg(long, default_value = "embeddings.sgm")]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub width: f64,
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.1)]
    pub validation: f64,
    #[arg(long, default_value = "uamat.uam")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainSpArgs {
    #[arg(long, default_value = "corpus.jsonl")]
    pub corpus: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value = "demographics.jsonl")]
    pub demographics: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub rounds: usize,
    #[arg(long, default_value_t = 6)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 0.3)]
    pub shrinkage: f64,
    #[arg(long, default_value = "sp.spf")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub protocol: Protocol,
    /// Taxonomy size; streams labeled outside it are left out.
    #[arg(long, default_value_t = 4)]
    pub c: usize,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Embedding size of the per-run ALS.
    #[arg(long, default_value_t = 32)]
    pub factors: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.25)]
    pub width: f64,
    #[arg(long, default_value_t = 100)]
    pub sp_rounds: usize,
    #[arg(long)]
    pub no_uamat: bool,
    #[arg(long)]
    pub no_sp: bool,
    /// Also score the decision-tree and k-NN baselines.
    #[arg(long)]
    pub baselines: bool,
    /// Also compare per-location and global situation predictors.
    #[arg(long)]
    pub local_global: bool,
    #[arg(long, default_value = "corpus.jsonl")]
    pub corpus: PathBuf,
    #[arg(long, default_value = "mels.sgm")]
    pub mels: PathBuf,
    #[arg(long, default_value = "demographics.jsonl")]
    pub demographics: PathBuf,
    #[arg(long, default_value = "interactions.csv")]
    pub interactions: PathBuf,
    #[arg(long, default_value = "reports")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Report JSON files written by `evaluate`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Also write the text here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildStoreArgs {
    #[arg(long, default_value = "uamat.uam")]
    pub model: PathBuf,
    #[arg(long, default_value = "corpus.jsonl")]
    pub corpus: PathBuf,
    #[arg(long, default_value = "mels.sgm")]
    pub mels: PathBuf,
    #[arg(long, default_value = "embeddings.sgm")]
    pub embeddings: PathBuf,
    /// CSV of `track,user` pairs; default is every track × every user who
    /// streamed.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long, default_value = "store.tag")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value = "sp.spf")]
    pub sp: PathBuf,
    #[arg(long, default_value = "store.tag")]
    pub store: PathBuf,
    #[arg(long, default_value = "demographics.jsonl")]
    pub demographics: PathBuf,
    #[arg(long, default_value = "embeddings.sgm")]
    pub embeddings: PathBuf,
    #[arg(long, env = "SITGEN_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "SITGEN_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "SITGEN_K", default_value_t = 3)]
    pub k: usize,
    #[arg(long, env = "SITGEN_N", default_value_t = 30)]
    pub n: usize,
    /// Probability floor for session tracks; default 1/C.
    #[arg(long, env = "SITGEN_FLOOR")]
    pub floor: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                    ExitCode::from(2)
                } else {
                    ExitCode::SUCCESS
                };
            }
            let rendered = e.to_string();
            let line = rendered.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: {line}");
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("SITGEN_LOG").unwrap_or_else(|_| "warn".into()))
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
