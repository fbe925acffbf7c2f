//! Command-line driver: make-data, train, generate, eval, ablate.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gcap_core::driver;
use gcap_core::io::{self, Elimination, RunConfig};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "gcap",
    version,
    about = "Grounded image captioning with distributed attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ElimArg {
    On,
    Off,
}

impl From<ElimArg> for Elimination {
    fn from(e: ElimArg) -> Self {
        match e {
            ElimArg::On => Elimination::On,
            ElimArg::Off => Elimination::Off,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ElimSweep {
    On,
    Off,
    Both,
}

/// Config overrides; command-line flags win over the config file.
#[derive(Args)]
struct Overrides {
    /// Config file (JSON); defaults to the built-in desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Attention branch count override.
    #[arg(long)]
    k: Option<usize>,
    /// Region proposal elimination override.
    #[arg(long, value_enum)]
    elimination: Option<ElimArg>,
    /// Total epoch count override.
    #[arg(long)]
    epochs: Option<usize>,
    /// Warm-up (single-branch) epoch count override.
    #[arg(long)]
    warmup: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => io::load_config(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::desk(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(e) = self.elimination {
            cfg.elimination = e.into();
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        if let Some(warmup) = self.warmup {
            cfg.warmup_epochs = warmup;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (train/val/test JSONL plus vocab.json).
    MakeData {
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory for the dataset files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.gcap and train_log.csv.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Dataset directory (from make-data).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint and loss log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a split with a checkpoint; writes a predictions JSONL file.
    Generate {
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Split name: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Output predictions file.
        #[arg(long)]
        out: PathBuf,
        /// Record per-branch attention weights in the output.
        #[arg(long)]
        dump_attention: bool,
    },
    /// Score a predictions file; writes a JSON report and a CSV row.
    Eval {
        /// Predictions file (from generate).
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Split name: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Output report path (.json; a .csv twin is written next to it).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one cell per (K, elimination) pair.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated branch counts, e.g. 1,2,4.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        /// Elimination settings to sweep.
        #[arg(long, value_enum, default_value = "on")]
        elimination: ElimSweep,
        /// Output directory for per-cell runs and the ablation table.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::MakeData { overrides, out } => {
            let cfg = overrides.resolve()?;
            let seed = overrides.seed.unwrap_or(cfg.seed);
            let summary = driver::cmd_make_data(&cfg, seed, &out)?;
            println!(
                "wrote {} train / {} val / {} test samples to {}",
                summary.train,
                summary.val,
                summary.test,
                out.display()
            );
        }
        Command::Train {
            overrides,
            data,
            out,
        } => {
            let cfg = overrides.resolve()?;
            let summary = driver::cmd_train(&cfg, &data, &out)?;
            match (summary.first_epoch_loss, summary.final_epoch_loss) {
                (Some(first), Some(last)) => println!(
                    "trained {} epochs: mean loss {first:.4} -> {last:.4}, \
                     teacher-forced accuracy {:.3}",
                    summary.epochs, summary.next_token_accuracy
                ),
                _ => println!("wrote initialized checkpoint (0 epochs)"),
            }
            println!("checkpoint: {}", summary.checkpoint.display());
            println!("loss log:   {}", summary.loss_log.display());
        }
        Command::Generate {
            checkpoint,
            data,
            split,
            out,
            dump_attention,
        } => {
            let summary = driver::cmd_generate(&checkpoint, &data, &split, &out, dump_attention)?;
            println!(
                "decoded {} samples from split {split} -> {}",
                summary.count,
                summary.output.display()
            );
        }
        Command::Eval {
            pred,
            data,
            split,
            out,
        } => {
            let report = driver::cmd_eval(&pred, &data, &split, &out)?;
            println!(
                "B@1 {:.4}  B@4 {:.4}  F1_all {:.4}  F1_loc {:.4}{}",
                report.captioning.bleu1,
                report.captioning.bleu4,
                report.grounding.f1_all,
                report.grounding.f1_loc,
                if report.grounding.f1_loc_defined {
                    ""
                } else {
                    " (no correctly generated words)"
                }
            );
            let r = &report.taxonomy.ratios;
            println!(
                "taxonomy: mis {:.2}%  hallu {:.2}%  corr {:.2}%  part {:.2}%  other {:.2}%",
                100.0 * r.mis_cls,
                100.0 * r.hallu_cls,
                100.0 * r.corr_grd,
                100.0 * r.part_grd,
                100.0 * r.other_err
            );
            println!("report: {}", out.display());
        }
        Command::Ablate {
            overrides,
            data,
            k,
            elimination,
            out,
        } => {
            if k.is_empty() {
                bail!("--k requires at least one branch count");
            }
            let cfg = overrides.resolve()?;
            let elims: Vec<Elimination> = match elimination {
                ElimSweep::On => vec![Elimination::On],
                ElimSweep::Off => vec![Elimination::Off],
                ElimSweep::Both => vec![Elimination::On, Elimination::Off],
            };
            let rows = driver::cmd_ablate(&cfg, &data, &k, &elims, &out)?;
            println!("k,elim        B@1     B@4     F1_all  F1_loc  PartGrd");
            for r in &rows {
                println!(
                    "{},{:<8} {:.4}  {:.4}  {:.4}  {:.4}  {:.4}",
                    r.k, r.elimination, r.bleu1, r.bleu4, r.f1_all, r.f1_loc, r.part_grd_ratio
                );
            }
            println!("table: {}", out.join("ablation.csv").display());
        }
    }
    Ok(())
}
