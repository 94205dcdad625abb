use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use provmark::bench;
use provmark::config::RunConfig;
use provmark::metrics::BenchmarkReport;
use provmark::{Error, Result};

#[derive(Parser)]
#[command(name = "provmark", version, about = "Watermark robustness benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (key = value text file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed; also reseeds the corpus.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON-lines manifest of externally attacked images.
    #[arg(long, global = true)]
    external_manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: calibrate, embed, attack, score, report.
    Run,
    /// Stage 1: calibrate keys and write covers.
    Gen,
    /// Stage 2: watermark the covers.
    Embed,
    /// Stage 3: apply the attack schedule.
    Attack,
    /// Stage 4: score attacked images.
    Score,
    /// Stage 5: aggregate scores into report files.
    Report,
    /// Calibrate keys and write them with a calibration report.
    Calibrate,
    /// Score externally attacked images listed in --external-manifest.
    ScoreExternal,
}

fn print_summary(report: &BenchmarkReport) {
    println!("{:<8} {:<12} {:>8}", "codec", "attack", "aer %");
    for r in &report.rates {
        println!("{:<8} {:<12} {:>8.2}", r.codec.name(), r.attack, 100.0 * r.rate);
    }
    println!("moe = {:.4}", report.moe);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = cfg.with_overrides(cli.seed, cli.out, cli.threads)?;
    match cli.command {
        Command::Run => print_summary(&bench::run(&cfg)?),
        Command::Gen => bench::stage_gen(&cfg).map_err(|e| e.in_stage("gen"))?,
        Command::Embed => bench::stage_embed(&cfg).map_err(|e| e.in_stage("embed"))?,
        Command::Attack => bench::stage_attack(&cfg).map_err(|e| e.in_stage("attack"))?,
        Command::Score => bench::stage_score(&cfg).map_err(|e| e.in_stage("score"))?,
        Command::Report => print_summary(&bench::stage_report(&cfg).map_err(|e| e.in_stage("report"))?),
        Command::Calibrate => {
            let cal = bench::calibrate(&cfg).map_err(|e| e.in_stage("calibrate"))?;
            println!("{}", serde_json::to_string_pretty(&cal).expect("serializes"));
        }
        Command::ScoreExternal => {
            let manifest = cli
                .external_manifest
                .ok_or_else(|| Error::Config("score-external needs --external-manifest".into()))?;
            print_summary(&bench::score_external(&manifest, &cfg).map_err(|e| e.in_stage("score-external"))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("provmark: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
