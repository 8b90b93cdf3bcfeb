//! Command-line front end: each subcommand drives the pipeline through one
//! more stage, `run-all` goes end to end, and everything is resumable
//! because completed stages leave markers in the run directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rankrewrite_core::error::{Error, Result};
use rankrewrite_core::pipeline::{self, AttackMode, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(
    name = "rankrewrite",
    version,
    about = "Testbed for rank-promotion attacks that rewrite item descriptions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the run directory from the config.
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Override the seed list, e.g. --seeds 1,2,3.
    #[arg(long, value_delimiter = ',', value_name = "SEEDS")]
    seeds: Option<Vec<u64>>,
    /// Override the attack mode (2ft-white | 2ft-black | icl | none).
    #[arg(long, value_name = "MODE")]
    attack_mode: Option<AttackMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest the dataset and persist the split corpus.
    #[command(name = "gen-data")]
    GenData(RunArgs),
    /// Train the platform recommender and the catalog-adapted text encoder.
    #[command(name = "train-rec")]
    TrainRec(RunArgs),
    /// Distill a surrogate recommender through the public query interface
    /// (requires attack mode 2ft-black).
    #[command(name = "build-surrogate")]
    BuildSurrogate(RunArgs),
    /// Run the two-phase fine-tuning attack and rewrite the target items.
    #[command(name = "attack-2ft")]
    Attack2ft(RunArgs),
    /// Run the few-shot prompting attack and rewrite the target items.
    #[command(name = "attack-icl")]
    AttackIcl(RunArgs),
    /// Score the rewrites: ranks, exposure, similarity, model stability.
    #[command(name = "evaluate")]
    Evaluate(RunArgs),
    /// Assemble the cross-seed report (report.json and targets.csv).
    #[command(name = "report")]
    Report(RunArgs),
    /// Execute every stage end to end and print the report summary.
    #[command(name = "run-all")]
    RunAll(RunArgs),
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(mode) = args.attack_mode {
        cfg.attack.mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_mode(ok: bool, subcommand: &str, wanted: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{subcommand} needs attack mode {wanted}; config has a different mode \
             (override with --attack-mode)"
        )))
    }
}

fn print_report(outcome: &pipeline::RunOutcome, k: usize) {
    let m = &outcome.report.mean;
    println!("run directory: {}", outcome.run_dir.display());
    println!("seeds: {}", outcome.report.seeds.len());
    println!(
        "avg predicted rank: {:.2} -> {:.2}",
        m.avg_predicted_rank_before, m.avg_predicted_rank_after
    );
    println!("appear@{k}: {:.4} -> {:.4}", m.appear_at_k_before, m.appear_at_k_after);
    println!("promotion success rate: {:.4}", m.promotion_success_rate);
    println!("semantic similarity: {:.4}", m.semantic_similarity);
    println!("held-out perplexity: {:.4}", m.perplexity);
    println!("test RMSE: {:.5} -> {:.5}", m.rmse_overall_before, m.rmse_overall_after);
    println!(
        "rank improvement t-test: t = {:.4}, p = {:.6}{}",
        m.t_statistic,
        m.p_value,
        if m.degenerate_t { " (degenerate)" } else { "" }
    );
}

fn execute(command: &Command) -> Result<()> {
    match command {
        Command::GenData(a) => pipeline::run_until(&load_config(a)?, Stage::Data),
        Command::TrainRec(a) => pipeline::run_until(&load_config(a)?, Stage::TrainRec),
        Command::BuildSurrogate(a) => {
            let cfg = load_config(a)?;
            require_mode(cfg.attack.mode.uses_surrogate(), "build-surrogate", "2ft-black")?;
            pipeline::run_until(&cfg, Stage::Surrogate)
        }
        Command::Attack2ft(a) => {
            let cfg = load_config(a)?;
            require_mode(
                cfg.attack.mode.is_two_ft(),
                "attack-2ft",
                "2ft-white or 2ft-black",
            )?;
            pipeline::run_until(&cfg, Stage::Rewrite)
        }
        Command::AttackIcl(a) => {
            let cfg = load_config(a)?;
            require_mode(cfg.attack.mode == AttackMode::Icl, "attack-icl", "icl")?;
            pipeline::run_until(&cfg, Stage::Rewrite)
        }
        Command::Evaluate(a) => pipeline::run_until(&load_config(a)?, Stage::Evaluate),
        Command::Report(a) | Command::RunAll(a) => {
            let cfg = load_config(a)?;
            let outcome = pipeline::run(&cfg)?;
            print_report(&outcome, cfg.eval.k);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rankrewrite: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
