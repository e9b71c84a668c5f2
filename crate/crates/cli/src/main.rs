use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tpld::config::{Dtype, RunConfig};
use tpld::pipeline::{self, Invocation, Layout};
use tpld::Scalar;

const BUILD_ID: &str = env!("TPLD_BUILD_ID");

#[derive(Debug, Parser)]
#[command(name = "tpld", version = BUILD_ID, about = "Task-progressive pre-training for task-oriented dialog")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (flat `key = value` file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out`, then $TPLD_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training mode, e.g. tpld, multitask, no_pretrain.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Loss-decay coefficient for earlier tasks.
    #[arg(long, global = true)]
    gamma: Option<String>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its splits.
    Synth,
    /// Run the pre-training schedule and save one checkpoint per stage.
    Pretrain,
    /// Fine-tune from the last pre-training checkpoint.
    Finetune,
    /// Evaluate the fine-tuned model on the test split.
    Eval,
    /// Combined score over the configured gammas and seeds.
    SweepGamma,
    /// Combined score over the configured modes and seeds.
    SweepModes,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::SweepGamma => "sweep-gamma",
            Command::SweepModes => "sweep-modes",
        }
    }
}

fn config(cli: &Cli) -> tpld::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = &cli.mode {
        cfg.set("train.mode", m)?;
    }
    if let Some(g) = &cli.gamma {
        cfg.set("train.gamma", g)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch<S: Scalar>(cli: &Cli, cfg: &RunConfig, layout: &Layout, inv: &Invocation) -> tpld::Result<()> {
    match cli.command {
        Command::Synth => {
            let c = pipeline::cmd_synth(cfg, layout, inv)?;
            println!(
                "wrote {} train, {} valid, {} test sessions to {}",
                c.splits.train.len(),
                c.splits.valid.len(),
                c.splits.test.len(),
                layout.corpus_dir().display()
            );
        }
        Command::Pretrain => {
            let state = pipeline::cmd_pretrain::<S>(cfg, layout, inv)?;
            println!("pre-trained {} stage(s); metrics in {}", state.stage, layout.pretrain_metrics().display());
        }
        Command::Finetune => {
            let out = pipeline::cmd_finetune::<S>(cfg, layout, inv)?;
            println!("kept epoch {}; checkpoint {}", out.best_epoch, layout.finetune_checkpoint().display());
        }
        Command::Eval => {
            let report = pipeline::cmd_eval::<S>(cfg, layout, inv)?;
            print!("{}", report.table());
        }
        Command::SweepGamma => {
            let table = pipeline::cmd_sweep_gamma::<S>(cfg, layout, inv)?;
            print!("{}", table.to_tsv());
        }
        Command::SweepModes => {
            let table = pipeline::cmd_sweep_modes::<S>(cfg, layout, inv)?;
            print!("{}", table.to_tsv());
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> tpld::Result<()> {
    let cfg = config(cli)?;
    let layout = Layout::new(pipeline::resolve_out(cli.out.as_deref(), &cfg));
    let inv = Invocation {
        command: cli.command.name().to_string(),
        config_path: cli.config.clone(),
        build_id: BUILD_ID.to_string(),
        force: cli.force,
    };
    match cfg.dtype {
        Dtype::F32 => dispatch::<f32>(cli, &cfg, &layout, &inv),
        Dtype::F64 => dispatch::<f64>(cli, &cfg, &layout, &inv),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
