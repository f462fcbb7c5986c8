use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use s2r2_core::commands::{
    self, cmd_eval, cmd_gradcheck, cmd_perturb, cmd_pretrain, cmd_report, cmd_synth, cmd_train, load_config, parse_log_arg,
    EvalJob, PerturbJob, PretrainJob, TrainJob,
};
use s2r2_core::gradcheck::{GradTerm, GradcheckConfig};
use s2r2_core::trainer::TrainMode;
use s2r2_core::{Error, Result};

#[derive(Parser)]
#[command(name = "s2r2", version, about = "Segment-level robustness toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Perturb a JSONL of {id, text} records.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// CE-train a base model, writing a frozen starting checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train LoRA adapters on a JSONL of {id, src, tgt}.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["s2r2", "ce_only", "seq_kl_baseline"])]
        mode: Option<String>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Plot and tabulate training logs given as `label=path` or bare paths.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        logs: Vec<String>,
        #[arg(long)]
        ratio_threshold: Option<f64>,
    },
    /// Finite-difference audit of the analytic gradients.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Negate one term's analytic gradient (self-test).
        #[arg(long)]
        fault: Option<String>,
    },
    /// Write the synthetic record-summary datasets and lexicon.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        n_train: usize,
        #[arg(long, default_value_t = 32)]
        n_heldout: usize,
    },
}

fn prepare(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Perturb { common, input } => {
            let mut job: PerturbJob = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                job.perturb.seed = s;
            }
            prepare(&common.out)?;
            cmd_perturb(&input, &job, &common.out)?;
        }
        Cmd::Pretrain { common, data } => {
            let mut job: PretrainJob = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                job.model.seed = s;
            }
            prepare(&common.out)?;
            cmd_pretrain(&data, &job, &common.out)?;
        }
        Cmd::Train { common, data, mode, resume } => {
            let mut job: TrainJob = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                job.train.seed = s;
            }
            if let Some(m) = mode {
                job.train.mode = m.parse::<TrainMode>()?;
            }
            prepare(&common.out)?;
            cmd_train(&data, &job, &common.out, resume.as_deref())?;
        }
        Cmd::Eval { common, checkpoint, data } => {
            let mut job: EvalJob = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                job.perturb.seed = s;
            }
            prepare(&common.out)?;
            let man = cmd_eval(&checkpoint, &data, &job, &common.out)?;
            eprintln!("wrote {}", man.outputs.join(", "));
        }
        Cmd::Report { common, logs, ratio_threshold } => {
            let logs: Vec<_> = logs.iter().map(|s| parse_log_arg(s)).collect();
            prepare(&common.out)?;
            let rep = cmd_report(&logs, &common.out, ratio_threshold)?;
            if !rep.flags.is_empty() {
                eprintln!("{} logged steps flagged for adapter norm imbalance", rep.flags.len());
            }
        }
        Cmd::Gradcheck { config, seed, out, fault } => {
            let mut cfg: GradcheckConfig = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(f) = fault {
                cfg.fault = Some(f.parse::<GradTerm>()?);
            }
            if let Some(o) = &out {
                prepare(o)?;
            }
            let rep = cmd_gradcheck(&cfg, out.as_deref())?;
            for t in &rep.terms {
                println!("{:<14} {:.3e} {}", t.term.label(), t.worst_rel_err, if t.pass { "ok" } else { "FAIL" });
            }
            if !rep.pass {
                let names: Vec<_> = rep.failed_terms().iter().map(|t| t.label()).collect();
                eprintln!("gradcheck failed: {}", names.join(", "));
                return Ok(false);
            }
        }
        Cmd::Synth { common, n_train, n_heldout } => {
            prepare(&common.out)?;
            cmd_synth(n_train, n_heldout, common.seed.unwrap_or(0), &common.out)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = commands::threads_from_env() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
