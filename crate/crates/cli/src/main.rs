//! Command-line driver for the staged transfer-learning pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attn_transfer::leep::{leep_score, read_leep_csv, write_leep_csv, LeepInput};
use attn_transfer::metrics::{transfer_gain, EvalResult};
use attn_transfer::phantom::{read_dataset, Split};
use attn_transfer::pipeline::{
    dummy_distributions, evaluate, exit_code, generate_datasets, load_checkpoint, run_stage, save_checkpoint,
    PipelineConfig, Stage,
};
use attn_transfer::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

#[derive(Parser)]
#[command(name = "attn-transfer", version, about = "Attentive multi-stage transfer learning on lung phantoms")]
struct Cli {
    /// Pipeline configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the model, data and every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for checkpoints, histories and reports.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the natural, medical and target datasets.
    GenerateData {
        /// Defaults to `<out-dir>/data`.
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
    /// Supervised pretraining on a source dataset.
    Pretrain {
        #[arg(long, value_enum)]
        stage: SupervisedStage,
        #[command(flatten)]
        run: StageArgs,
    },
    /// Contrastive and region-aware pretraining on the target images.
    SslPretrain {
        #[command(flatten)]
        run: StageArgs,
    },
    /// Train a fresh binary head on the target task and evaluate its test split.
    Finetune {
        #[command(flatten)]
        run: StageArgs,
    },
    /// Metrics of a binary checkpoint on one dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the target set under `<out-dir>/data`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// LEEP score from a CSV of distributions, or from a checkpoint on a dataset.
    Leep {
        #[arg(long, conflicts_with_all = ["checkpoint", "dataset"])]
        csv: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Also write the distributions and labels as CSV.
        #[arg(long)]
        write_csv: Option<PathBuf>,
    },
    /// Improvement of a pretrained over a scratch evaluation report.
    Report {
        #[arg(long)]
        scratch: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SupervisedStage {
    #[value(name = "stl_n")]
    StlN,
    #[value(name = "stl_m")]
    StlM,
}

#[derive(Args)]
struct StageArgs {
    /// Checkpoint to continue from; a fresh model when omitted.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Root for the stage's relative dataset path; defaults to `<out-dir>/data`.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Overrides the stage's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the stage's initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", p.display()))),
            other => other,
        })?,
        None => PipelineConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_eval(path: &Path) -> Result<EvalResult> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn run_stage_verb(cli: &Cli, mut cfg: PipelineConfig, stage: Stage, args: &StageArgs) -> Result<()> {
    let sc = cfg.stages.get_mut(&stage).expect("all stages configured");
    if let Some(e) = args.epochs {
        sc.epochs = e;
    }
    if let Some(lr) = args.lr {
        sc.lr.initial = lr;
    }
    let prev = args.init.as_deref().map(load_checkpoint).transpose()?;
    let root = args.data_root.clone().unwrap_or_else(|| cli.out_dir.join("data"));
    let out = run_stage(prev, stage, &cfg, &root)?;

    let ckpt = cli.out_dir.join(format!("{stage}.ckpt"));
    save_checkpoint(&out.checkpoint, &ckpt)?;
    write_json(&cli.out_dir.join(format!("{stage}.history.json")), &out.history)?;
    let provenance: Vec<&str> = out.checkpoint.provenance.iter().map(|s| s.name()).collect();
    let mut summary = json!({ "stage": stage.name(), "checkpoint": ckpt, "provenance": provenance });
    if let Some(eval) = out.eval {
        let path = cli.out_dir.join("eval.json");
        write_json(&path, &serde_json::to_value(eval)?)?;
        summary["eval"] = serde_json::from_str(&eval.to_json())?;
    }
    info!("saved {}", ckpt.display());
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let data_root = || cli.out_dir.join("data");
    match &cli.command {
        Command::GenerateData { data_root: root } => {
            let root = root.clone().unwrap_or_else(data_root);
            let written = generate_datasets(&cfg.data, &root)?;
            let counts: serde_json::Map<_, _> = written.into_iter().map(|(n, c)| (n.to_string(), json!(c))).collect();
            println!("{}", json!({ "root": root, "datasets": counts }));
        }
        Command::Pretrain { stage, run } => {
            let stage = match stage {
                SupervisedStage::StlN => Stage::StlN,
                SupervisedStage::StlM => Stage::StlM,
            };
            run_stage_verb(cli, cfg, stage, run)?;
        }
        Command::SslPretrain { run } => run_stage_verb(cli, cfg, Stage::SstlM, run)?,
        Command::Finetune { run } => run_stage_verb(cli, cfg, Stage::Finetune, run)?,
        Command::Evaluate { checkpoint, dataset, split } => {
            let model = load_checkpoint(checkpoint)?.model;
            let dir = dataset.clone().unwrap_or_else(|| data_root().join("target"));
            let (images, labels) = read_dataset(&dir)?.split(*split);
            let eval = evaluate(&model, &images, &labels)?;
            write_json(&cli.out_dir.join("eval.json"), &serde_json::to_value(eval)?)?;
            println!("{}", eval.to_json());
        }
        Command::Leep { csv, checkpoint, dataset, split, write_csv } => {
            let input = match (csv, checkpoint, dataset) {
                (Some(path), _, _) => read_leep_csv(path)?,
                (None, Some(ckpt), Some(dir)) => {
                    let model = load_checkpoint(ckpt)?.model;
                    let data = read_dataset(dir)?;
                    let (images, labels) = data.split(*split);
                    LeepInput::with_classes(dummy_distributions(&model, &images)?, labels, data.num_classes)?
                }
                _ => return Err(Error::Config("leep needs --csv or both --checkpoint and --dataset".into())),
            };
            if let Some(path) = write_csv {
                write_leep_csv(path, &input)?;
            }
            let score = leep_score(&input)?;
            let report = json!({
                "leep": score,
                "n": input.len(),
                "source_classes": input.source_classes(),
                "target_classes": input.num_target_classes,
            });
            write_json(&cli.out_dir.join("leep.json"), &report)?;
            println!("{score:.6}");
        }
        Command::Report { scratch, pretrained } => {
            let report = transfer_gain(&read_eval(scratch)?, &read_eval(pretrained)?);
            let text = report.to_json();
            write_json(&cli.out_dir.join("report.json"), &serde_json::from_str(&text)?)?;
            println!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
