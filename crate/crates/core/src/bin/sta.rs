use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sta_core::eval::MetricsReport;
use sta_core::harness::commands::{
    load_run_config, run_dump_attention, run_eval, run_eval_files, run_extract, run_synth, run_train, ExportSplit,
};
use sta_core::par::Exec;
use sta_core::{Result, StaError};

#[derive(Parser)]
#[command(name = "sta", version, about = "Spatial-temporal attention re-identification toolkit")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.stac, history.csv and config.txt into `out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or two embedding files.
    Eval {
        #[arg(long, required_unless_present = "query_emb")]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "query_emb")]
        checkpoint: Option<PathBuf>,
        /// Frames per test clip (defaults to test_frames).
        #[arg(long)]
        test_n: Option<usize>,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, requires = "gallery_emb", conflicts_with_all = ["config", "checkpoint"])]
        query_emb: Option<PathBuf>,
        #[arg(long, requires = "query_emb")]
        gallery_emb: Option<PathBuf>,
        /// Unit-normalize embeddings read from files.
        #[arg(long)]
        normalize: bool,
    },
    /// Export embeddings to a STAE file.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train, query, gallery (with distractors), distractor or all.
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long)]
        test_n: Option<usize>,
    },
    /// Write the score matrix of one tracklet as CSV.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tracklet: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Generate the synthetic benchmark.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_report(report: &MetricsReport, csv: Option<PathBuf>) -> Result<()> {
    print!("{}", report.to_text());
    if let Some(path) = csv {
        let body = format!("{}\n{}\n", MetricsReport::csv_header(), report.to_csv_row());
        fs::write(&path, body).map_err(|e| StaError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = load_run_config(&config)?;
            let state = run_train(&cfg, resume.as_deref(), exec)?;
            if let Some(last) = state.history.last() {
                println!("epochs={} final_total={}", state.epoch, last.total);
            }
        }
        Command::Eval {
            config,
            checkpoint,
            test_n,
            csv,
            query_emb,
            gallery_emb,
            normalize,
        } => {
            let report = match (query_emb, gallery_emb) {
                (Some(q), Some(g)) => run_eval_files(&q, &g, normalize, exec)?,
                _ => {
                    let cfg = load_run_config(&config.expect("required by clap"))?;
                    run_eval(&cfg, &checkpoint.expect("required by clap"), test_n, exec)?
                }
            };
            print_report(&report, csv)?;
        }
        Command::Extract {
            checkpoint,
            data,
            out,
            split,
            test_n,
        } => {
            let n = run_extract(&checkpoint, &data, &out, ExportSplit::parse(&split)?, test_n, exec)?;
            println!("count={n}");
        }
        Command::DumpAttention {
            checkpoint,
            tracklet,
            out,
            frames,
        } => {
            let s = run_dump_attention(&checkpoint, &tracklet, &out, frames)?;
            println!("rows={}", s.frames() * s.regions());
        }
        Command::Synth { config, out } => {
            let data = run_synth(&config, &out)?;
            println!("tracklets={} frames={}", data.tracklet_count(), data.frame_count());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
