//! Command-line entry point; every command is a thin wrapper over `ptta::harness`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ptta::harness::{self, Overrides, RunConfig};
use ptta::meta::{EpochLog, EvalMode};
use ptta::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "ptta", version, about = "Test-time adaptive point cloud registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset
    Generate(Common),
    /// Joint training of the primary and auxiliary tasks
    TrainJoint(Common),
    /// Meta-auxiliary training from a joint checkpoint
    TrainMeta(Common),
    /// Evaluate a checkpoint on one split
    Eval(Common),
    /// Register one source cloud onto one target cloud
    Register {
        #[command(flatten)]
        common: Common,
        source: PathBuf,
        target: PathBuf,
        /// ground-truth transform file, 12 numbers row-major
        #[arg(long)]
        gt: Option<PathBuf>,
        /// shorthand for --mode tta
        #[arg(long)]
        tta: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// override any config key, e.g. --set train.joint_epochs=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = ["plain", "tta"])]
    mode: Option<String>,
    #[arg(long, value_name = "BOOL")]
    use_rec: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    use_byol: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    use_cc: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    use_meta: Option<bool>,
    #[arg(long)]
    tta_steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, force_tta: bool) -> Result<RunConfig> {
        let mode = match (&self.mode, force_tta) {
            (_, true) => Some(EvalMode::Tta),
            (Some(m), false) => Some(m.parse()?),
            (None, false) => None,
        };
        let ov = Overrides {
            set: self.set.clone(),
            seed: self.seed,
            checkpoint: self.checkpoint.clone(),
            mode,
            use_rec: self.use_rec,
            use_byol: self.use_byol,
            use_cc: self.use_cc,
            use_meta: self.use_meta,
            tta_steps: self.tta_steps,
            alpha: self.alpha,
            beta: self.beta,
            out_dir: self.out_dir.clone(),
        };
        RunConfig::load(self.config.as_deref(), &ov)
    }
}

fn progress(h: &EpochLog) {
    let val = h.val_pri.map(|v| format!(" val_pri {v:.5}")).unwrap_or_default();
    eprintln!("{} epoch {} lr {:.3e} pri {:.5} aux {:.5}{val}", h.phase, h.epoch, h.lr, h.pri, h.aux);
}

fn run(cli: Cli) -> Result<()> {
    harness::configure_threads()?;
    match cli.command {
        Command::Generate(c) => {
            let cfg = c.resolve(false)?;
            let m = harness::cmd_generate(&cfg)?;
            print!("{}", harness::manifest_summary(&m));
            println!("written to {}", cfg.data_dir().display());
        }
        Command::TrainJoint(c) => {
            let cfg = c.resolve(false)?;
            let path = harness::cmd_train_joint(&cfg, &mut progress)?;
            println!("{}", path.display());
        }
        Command::TrainMeta(c) => {
            let cfg = c.resolve(false)?;
            if !cfg.train.use_meta {
                eprintln!("use_meta is false; the checkpoint is copied unchanged");
            }
            let path = harness::cmd_train_meta(&cfg, &mut progress)?;
            println!("{}", path.display());
        }
        Command::Eval(c) => {
            let cfg = c.resolve(false)?;
            let r = harness::cmd_eval(&cfg)?;
            println!("mode {} split {} checkpoint {}", r.mode, r.split, r.checkpoint_hash);
            for s in &r.summaries {
                println!(
                    "{:<16} pairs {:>4} RR {:.4} RE mean {:.3} median {:.3} TE mean {:.4} median {:.4} fallback {:.3}",
                    s.profile, s.pairs, s.rr, s.mean_re, s.median_re, s.mean_te, s.median_te, s.fallback_rate
                );
            }
        }
        Command::Register { common, source, target, gt, tta } => {
            let cfg = common.resolve(tta)?;
            let out = harness::cmd_register(&cfg, &source, &target, gt.as_deref())?;
            let row: Vec<String> = out.transform.iter().map(|v| v.to_string()).collect();
            println!("{}", row.join(" "));
            if let (Some(re), Some(te)) = (out.re, out.te) {
                println!("RE {re} deg TE {te} m");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(ErrorClass::Config.exit_code() as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            report_chain(&e);
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}

fn report_chain(e: &Error) {
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
}
