use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use versreid::checkpoint::Checkpoint;
use versreid::config::RunConfig;
use versreid::dataset::{generate_dataset, load_dataset};
use versreid::pipeline::{self, Ensemble, EvalOptions};
use versreid::Result;
use versreid_core::model::BranchKind;

#[derive(Parser)]
#[command(name = "versreid", version, about = "Multi-scene person re-identification at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Branch {
    Bank,
    Vbranch,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnsembleArg {
    Hard,
    Soft,
    Concat,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-scene dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ids: usize,
        #[arg(long)]
        per_scene: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Contrastive pretraining of the backbone.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "on")]
        mpda: Toggle,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the scene-prompted bank.
    TrainBank {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint supplying backbone weights.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill the bank into the label-free V-Branch.
    Distill {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-scene and joint retrieval metrics as JSON lines.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        branch: Branch,
        #[arg(long, value_enum)]
        ensemble: Option<EnsembleArg>,
        #[arg(long, default_value_t = 0.0)]
        classifier_noise: f64,
        /// Seed of the simulated scene classifier.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
}

fn config(path: Option<&Path>) -> Result<RunConfig> {
    RunConfig::load_or_default(path)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            ids,
            per_scene,
            seed,
        } => {
            let m = generate_dataset(&out, ids, per_scene, seed)?;
            println!("{} images in {}", m.records.len(), out.display());
        }
        Command::Pretrain {
            data,
            config: cfg,
            mpda,
            out,
        } => {
            let cfg = config(cfg.as_deref())?;
            let data = load_dataset(&data)?;
            let r = pipeline::run_pretrain(&cfg, &data, matches!(mpda, Toggle::On), &out)?;
            println!("{} {}", r.hash, out.display());
        }
        Command::TrainBank {
            data,
            config: cfg,
            init,
            out,
        } => {
            let cfg = config(cfg.as_deref())?;
            let data = load_dataset(&data)?;
            let init = init.as_deref().map(Checkpoint::load).transpose()?;
            let r = pipeline::run_train_bank(&cfg, &data, init.as_ref(), &out, None)?;
            println!("{} {}", r.hash, out.display());
        }
        Command::Distill {
            data,
            config: cfg,
            bank,
            out,
        } => {
            let cfg = config(cfg.as_deref())?;
            let data = load_dataset(&data)?;
            let bank = Checkpoint::load(&bank)?;
            let r = pipeline::run_distill(&cfg, &data, &bank, &out)?;
            println!("{} {}", r.hash, out.display());
        }
        Command::Eval {
            data,
            model,
            branch,
            ensemble,
            classifier_noise,
            seed,
            report,
        } => {
            let data = load_dataset(&data)?;
            let ckpt = Checkpoint::load(&model)?;
            let opts = EvalOptions {
                branch: match branch {
                    Branch::Bank => BranchKind::Bank,
                    Branch::Vbranch => BranchKind::VBranch,
                },
                ensemble: ensemble.map(|e| match e {
                    EnsembleArg::Hard => Ensemble::Hard,
                    EnsembleArg::Soft => Ensemble::Soft,
                    EnsembleArg::Concat => Ensemble::Concat,
                }),
                classifier_noise,
                seed,
            };
            let rep = pipeline::run_eval(&data, &ckpt, &opts)?;
            rep.write(&report)?;
            if let Some(j) = rep.joint() {
                println!("joint rank1 {:.4} rank5 {:.4} map {:.4}", j.rank1, j.rank5, j.map);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    pipeline::init_threads();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
