//! `prunekit`: train, score, prune and recover small CNNs from the shell.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use prunekit::config::RunConfig;
use prunekit::pipeline::{self, Ckpt, Datasets, PlanArtifact};
use prunekit::recovery::MimicFunction;
use prunekit::report::Report;
use prunekit::runlog::{read_log, RunLog};

#[derive(Parser)]
#[command(name = "prunekit", version, about = "One-step filter pruning and multi-tap recovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). Defaults apply to anything left out.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set plan.crucial=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run-log file to append to. Defaults to `run.jsonl` next to the output.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured network from scratch.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Learn the per-channel importance vector of a trained checkpoint.
    LearnImportance {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Select crucial layers and build a pruning plan.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Apply a plan (or build one from the config) in one step.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Reconstruct the teacher's tapped activations in the pruned student.
    Recover {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Cross-entropy training of every weight of a checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Top-1 accuracy and FLOPs of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        input: PathBuf,
    },
    /// Aggregate run logs and recovery histories into tables and series.
    Report {
        /// Run-log files.
        #[arg(long = "log-file", value_name = "PATH")]
        logs: Vec<PathBuf>,
        /// Checkpoints whose per-tap recovery history should be included.
        #[arg(long = "checkpoint", value_name = "PATH")]
        checkpoints: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// train → learn-importance → plan → prune → recover → finetune.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Output directory for checkpoints, plan, log and report.
        #[arg(long, short)]
        out: PathBuf,
        /// Also recover the pruned model under every mimic function and
        /// with a single tap.
        #[arg(long)]
        ablate: bool,
        /// Also run the layer-by-layer prune-and-reconstruct baseline.
        #[arg(long)]
        iterative: bool,
    },
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        Ok(cfg)
    }

    fn log_for(&self, out: &Path) -> Result<RunLog> {
        let path = match &self.log {
            Some(p) => p.clone(),
            None => out.parent().unwrap_or(Path::new(".")).join("run.jsonl"),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(RunLog::append_to(&path)?)
    }
}

fn load(path: &Path) -> Result<Ckpt> {
    Ckpt::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save(ck: &Ckpt, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ck.save(path).with_context(|| format!("writing {}", path.display()))
}

fn data(cfg: &RunConfig) -> Result<Datasets> {
    pipeline::load_data(&cfg.data).context("loading data")
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { common, out } => {
            let cfg = common.config()?;
            let mut log = common.log_for(&out)?;
            let ck = pipeline::train_stage(&cfg, &data(&cfg)?, &mut log)?;
            save(&ck, &out)?;
            println!("{}", log.lines().last().expect("train logs"));
        }
        Command::LearnImportance { common, input, out } => {
            let cfg = common.config()?;
            let mut log = common.log_for(&out)?;
            let ck = pipeline::importance_stage(&load(&input)?, &cfg, &data(&cfg)?, &mut log)?;
            save(&ck, &out)?;
            println!("{}", log.lines().last().expect("importance logs"));
        }
        Command::Plan { common, input, out } => {
            let cfg = common.config()?;
            let mut log = common.log_for(&out)?;
            let (plan, _) = pipeline::plan_stage(&load(&input)?, &cfg, &mut log)?;
            PlanArtifact::new(&plan, &cfg).save(&out)?;
            println!("{}", log.lines().last().expect("plan logs"));
        }
        Command::Prune {
            common,
            input,
            plan,
            out,
        } => {
            let cfg = common.config()?;
            let mut log = common.log_for(&out)?;
            let ck = load(&input)?;
            let plan = match plan {
                Some(p) => PlanArtifact::load(&p).with_context(|| format!("reading plan {}", p.display()))?,
                None => pipeline::plan_stage(&ck, &cfg, &mut log)?.0,
            };
            let pruned = pipeline::prune_stage(&ck, &plan, &cfg, &data(&cfg)?, &mut log)?;
            save(&pruned, &out)?;
            println!("{}", log.lines().last().expect("prune logs"));
        }
        Command::Recover {
            common,
            teacher,
            student,
            out,
        } => {
            let cfg = common.config()?;
            let mut log = common.log_for(&out)?;
            let ck = pipeline::recover_stage(&load(&teacher)?, &load(&student)?, &cfg, &data(&cfg)?, &mut log)?;
            save(&ck, &out)?;
            println!("{}", log.lines().last().expect("recover logs"));
        }
        Command::Finetune { common, input, out } => {
            let cfg = common.config()?;
            let mut log = common.log_for(&out)?;
            let ck = pipeline::finetune_stage(&load(&input)?, &cfg, &data(&cfg)?, &mut log)?;
            save(&ck, &out)?;
            println!("{}", log.lines().last().expect("finetune logs"));
        }
        Command::Eval { common, input } => {
            let cfg = common.config()?;
            let mut log = common.log_for(&input)?;
            pipeline::eval_stage(&load(&input)?, &cfg, &data(&cfg)?, &mut log)?;
            println!("{}", log.lines().last().expect("eval logs"));
        }
        Command::Report { logs, checkpoints, out } => {
            if logs.is_empty() && checkpoints.is_empty() {
                bail!("report needs at least one --log-file or --checkpoint");
            }
            let mut report = Report::new();
            for p in &logs {
                let records = read_log(p, None).with_context(|| format!("reading {}", p.display()))?;
                report.add_log(&p.display().to_string(), &records)?;
            }
            for p in &checkpoints {
                report.add_checkpoint(&p.display().to_string(), &load(p)?);
            }
            report.write(&out)?;
            print!("{}", report.markdown());
        }
        Command::Pipeline {
            common,
            out,
            ablate,
            iterative,
        } => {
            let cfg = common.config()?;
            std::fs::create_dir_all(&out)?;
            let log_path = common.log.clone().unwrap_or_else(|| out.join("run.jsonl"));
            // a pipeline log describes exactly one run
            if log_path.exists() {
                std::fs::remove_file(&log_path)?;
            }
            let mut log = RunLog::append_to(&log_path)?;
            let data = data(&cfg)?;
            let run = pipeline::run_pipeline(&cfg, &data, Some(&out), &mut log)?;
            if ablate {
                let n = cfg.plan.crucial;
                let mut variants = vec![(MimicFunction::Mse, 1)];
                variants.extend(
                    MimicFunction::ALL
                        .iter()
                        .filter(|f| n >= 2 || !f.is_divergence())
                        .map(|&f| (f, n)),
                );
                pipeline::ablate(&run.baseline, &run.pruned, &cfg, &data, &variants, &mut log)?;
            }
            if iterative {
                let (ck, _) = pipeline::iterative_stage(&run.baseline, &run.plan, &cfg, &data, &mut log)?;
                save(&ck, &out.join("iterative.ckpt"))?;
            }
            let mut report = Report::new();
            report.add_log("pipeline", &log.records(None))?;
            report.add_checkpoint("recovered", &run.recovered);
            report.write(&out.join("report"))?;
            println!("{}", summary_line(&run.report));
        }
    }
    Ok(())
}

fn summary_line(r: &pipeline::PipelineReport) -> String {
    format!(
        "baseline {:.4}  pruned {:.4}  recovered {:.4}  finetuned {:.4}  FLOPs -{:.2}%  crucial [{}]",
        r.baseline_accuracy,
        r.pruned_accuracy,
        r.recovered_accuracy,
        r.finetuned_accuracy,
        r.pruned_pct,
        r.crucial.join(", ")
    )
}
