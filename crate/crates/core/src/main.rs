use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lgkd::pipeline::{
    cmd_ablate, cmd_distill, cmd_eval, cmd_gen_data, cmd_train_student, cmd_train_teacher, RunConfig,
};
use lgkd::synthworld::Split;

#[derive(Parser)]
#[command(name = "lgkd", version, about = "LiDAR-guided distillation for camera BEV detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData(Common),
    /// Train the teacher with the task loss.
    TrainTeacher(Common),
    /// Train the baseline student with the task loss only.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        /// Start from this student checkpoint instead of a fresh init.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train the student with the task loss plus distillation.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Trained teacher checkpoint.
        #[arg(long)]
        teacher: PathBuf,
        /// Start from this student checkpoint instead of a fresh init.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Run the component ablation table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Reuse a trained teacher instead of training one.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Also run the mask-guidance variants.
        #[arg(long)]
        guidance: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Teacher or student checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
}

fn run(cli: Cli) -> lgkd::Result<()> {
    let load = |c: &Common| -> lgkd::Result<(RunConfig, PathBuf)> {
        let cfg = RunConfig::load(&c.config)?;
        let out = cfg.out_dir(c.out.as_deref());
        std::fs::create_dir_all(&out).map_err(|e| lgkd::Error::Io {
            path: out.clone(),
            source: e,
        })?;
        Ok((cfg, out))
    };
    match cli.command {
        Command::GenData(c) => {
            let (cfg, out) = load(&c)?;
            let manifest = cmd_gen_data(&cfg, &out)?;
            println!("{}", manifest.display());
        }
        Command::TrainTeacher(c) => {
            let (cfg, out) = load(&c)?;
            println!("{}", cmd_train_teacher(&cfg, &out)?.display());
        }
        Command::TrainStudent { common, init } => {
            let (cfg, out) = load(&common)?;
            println!("{}", cmd_train_student(&cfg, &out, init.as_deref())?.display());
        }
        Command::Distill { common, teacher, init } => {
            let (cfg, out) = load(&common)?;
            println!("{}", cmd_distill(&cfg, &out, &teacher, init.as_deref())?.display());
        }
        Command::Ablate {
            common,
            teacher,
            guidance,
        } => {
            let (cfg, out) = load(&common)?;
            println!("{}", cmd_ablate(&cfg, &out, teacher.as_deref(), guidance)?.display());
        }
        Command::Eval { common, ckpt, split } => {
            let (cfg, out) = load(&common)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            cmd_eval(&cfg, &out, &ckpt, split)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
