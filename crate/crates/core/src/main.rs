use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use convrnn::autodiff::OpKind;
use convrnn::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "convrnn", version, about = "Train, stack and evaluate ConvNet classifiers with recurrent heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    verbose: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let mut sets = Vec::new();
        if let Some(d) = &self.dataset {
            sets.push(format!("dataset={d}"));
        }
        if let Some(d) = &self.data_dir {
            sets.push(format!("data_dir={}", d.display()));
        }
        if let Some(d) = &self.out {
            sets.push(format!("out={}", d.display()));
        }
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if self.verbose {
            sets.push("verbose=true".into());
        }
        // Explicit --set pairs win over the convenience flags.
        sets.extend(self.set.iter().cloned());
        Ok(ExperimentConfig::from_sources(text.as_deref(), &sets)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one head variant `repeats` times through the staged plan.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Train every listed head variant under the same seeds and budget.
    CompareRnn {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the stacked meta-head over three level-1 models.
    E2e3m {
        #[command(flatten)]
        common: Common,
        /// Member run directory (with config.txt and best.ckpt); repeatable.
        #[arg(long = "member", value_name = "DIR")]
        members: Vec<PathBuf>,
    },
    /// Evaluate members, AVG and EXT ensembles on the test split.
    EnsembleEval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "member", value_name = "DIR")]
        members: Vec<PathBuf>,
        #[arg(long)]
        tta: bool,
    },
    /// Finite-difference check of every gradient rule.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, hide = true, value_name = "OP")]
        fault: Option<String>,
    },
    /// Write a seeded k-fold assignment.
    KfoldSplit {
        #[command(flatten)]
        common: Common,
        /// Number of samples; defaults to the training data size.
        #[arg(long)]
        n: Option<usize>,
    },
}

fn with_members(mut cfg: ExperimentConfig, members: &[PathBuf]) -> ExperimentConfig {
    if !members.is_empty() {
        cfg.members = members.to_vec();
    }
    cfg
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common, variant } => {
            let mut cfg = common.load()?;
            if let Some(v) = variant {
                cfg.set("variant", &v).map_err(anyhow::Error::msg)?;
            }
            let s = harness::cmd_train(&cfg)?;
            for r in &s.runs {
                println!("seed {}: val {:.4} test {:.4}", r.seed, r.val_accuracy, r.test_accuracy);
            }
            println!(
                "{}: best {:.4}, mean {:.4} ± {:.4} over {} runs",
                s.row.variant, s.row.best, s.row.mean, s.row.std, s.row.runs
            );
        }
        Command::CompareRnn { common } => {
            let s = harness::cmd_compare_rnn(&common.load()?)?;
            print!("{}", s.table());
        }
        Command::E2e3m { common, members } => {
            let s = harness::cmd_e2e3m(&with_members(common.load()?, &members))?;
            for (d, a) in s.member_dirs.iter().zip(&s.member_test) {
                println!("member {}: {a:.4}", d.display());
            }
            println!("E2E-3M: {:.4}\nAVG-3M: {:.4}\nEXT-Softmax: {:.4}", s.e2e_test, s.avg_test, s.ext_test);
        }
        Command::EnsembleEval { common, members, tta } => {
            let mut cfg = with_members(common.load()?, &members);
            cfg.tta |= tta;
            print!("{}", harness::cmd_ensemble_eval(&cfg)?.report);
        }
        Command::Gradcheck { seed, out, fault } => {
            let fault = match fault {
                None => None,
                Some(name) => match OpKind::DIFFERENTIABLE.iter().find(|k| k.name() == name) {
                    Some(&k) => Some(k),
                    None => bail!("unknown op {name:?}"),
                },
            };
            let report = harness::cmd_gradcheck(fault, seed, out.as_deref())?;
            print!("{}", report.render());
            if !report.passed() {
                for f in report.failures() {
                    eprintln!("FAILED {} (max relative error {:.3e})", f.name, f.max_rel_error);
                }
                return Ok(false);
            }
        }
        Command::KfoldSplit { common, n } => {
            let cfg = common.load()?;
            let folds = harness::cmd_kfold_split(&cfg, n)?;
            println!("{} folds, sizes {:?}, written to {}", folds.k, folds.sizes(), cfg.out.join("folds.csv").display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
