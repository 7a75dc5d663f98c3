use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use moscard_cli::{
    cmd_eval, cmd_gen, cmd_pipeline, cmd_probe, cmd_report, cmd_saliency, cmd_train_stage1, cmd_train_stage2,
    PipelineError, RunConfig, Workdir,
};
use moscard_core::datamodel::{Modality, Split};

#[derive(Parser)]
#[command(name = "moscard", version, about = "Two-stage confounder-unlearned multimodal risk pipeline")]
struct Cli {
    /// Run-config JSON; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Workdir override (takes precedence over MOSCARD_WORKDIR and the config).
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Overwrite or mix artifacts produced by a different config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective run config as JSON.
    Config,
    /// Generate the synthetic cohort.
    Gen,
    /// Train stage 1 (single-modality encoders) or stage 2 (fusion).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        modality: Option<Modality>,
    },
    /// Evaluate every trained variant on one split.
    Eval {
        #[arg(long)]
        split: Split,
    },
    /// Linear confounder probes on frozen stage-1 features.
    Probe,
    /// Occlusion saliency maps for the full fusion model.
    Saliency,
    /// Consolidate eval reports into summary tables.
    Report,
    /// Run every step in order.
    Pipeline,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let wd = Workdir::resolve(&cfg, cli.workdir.as_deref());
    let force = cli.force;
    match cli.command {
        Command::Config => println!("{}", cfg.to_json()),
        Command::Gen => {
            let m = cmd_gen(&cfg, &wd, force)?;
            println!("generated {} samples in {}", m.len(), wd.cohort().display());
        }
        Command::Train { stage: 1, modality } => {
            for (v, m, h) in cmd_train_stage1(&cfg, &wd, modality, force)? {
                println!("{v} {m} {h}");
            }
        }
        Command::Train { modality: Some(_), .. } => {
            return Err(PipelineError::Config("--modality applies to stage 1 only".into()).into());
        }
        Command::Train { .. } => {
            for r in cmd_train_stage2(&cfg, &wd, force)? {
                println!("{} encoders frozen: {}", r.variant, r.identical);
            }
        }
        Command::Eval { split } => {
            for r in cmd_eval(&cfg, &wd, split, force)? {
                for m in &r.metrics {
                    let auc = m.auc.map_or("n/a".into(), |a| format!("{:.4} [{:.4}, {:.4}]", a.point, a.lo, a.hi));
                    println!("{} {} {} {} auc {auc}", r.variant, r.split, m.head, m.horizon.label());
                }
            }
        }
        Command::Probe => {
            let p = cmd_probe(&cfg, &wd, force)?;
            print!("{}", p.to_csv());
        }
        Command::Saliency => {
            let s = cmd_saliency(&cfg, &wd, force)?;
            println!("{}/{} max-saliency cells inside the disease disk", s.hits, s.rows.len());
        }
        Command::Report => {
            let rows = cmd_report(&wd, force)?;
            println!("{} rows written to {}", rows.len(), wd.reports().join("summary.csv").display());
        }
        Command::Pipeline => {
            let rows = cmd_pipeline(&cfg, &wd, force)?;
            println!("{} rows written to {}", rows.len(), wd.reports().join("summary.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let json = match e.downcast_ref::<PipelineError>() {
                Some(p) => p.to_json(),
                None => serde_json::json!({ "error": "internal", "message": format!("{e:#}") }).to_string(),
            };
            eprintln!("{json}");
            ExitCode::FAILURE
        }
    }
}
