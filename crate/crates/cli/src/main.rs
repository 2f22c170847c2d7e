use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pcus::backbones::{BackboneConfig, Variant};
use pcus::experiment::{ExperimentConfig, Runner};

#[derive(Parser)]
#[command(name = "pcus", version, about = "Micro-ultrasound prostate cancer detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth(Common),
    /// Write the patient-level nested k-fold plan.
    Split(Common),
    /// VICReg pre-training of the encoder, per leg.
    Pretrain(LegArgs),
    /// ROI-scale fine-tuning and ROI/core predictions, per leg.
    Finetune(LegArgs),
    /// Multi-scale core model, per leg and gamma.
    Multiscale(LegArgs),
    /// Per-fold metrics from the stored predictions.
    Evaluate(Common),
    /// Markdown and CSV tables from the stored metrics.
    Report(Common),
    /// Every enabled stage, then evaluation and report.
    RunAll(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides the experiment and synthetic-data seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Core-model gamma; repeat for a sweep.
    #[arg(long = "gamma")]
    gammas: Vec<f64>,
    /// Backbone variant (resnet18_slim, vit, cct, pvt) with its desk defaults.
    #[arg(long)]
    backbone: Option<Variant>,
    /// Print the configuration after overrides and exit.
    #[arg(long)]
    print_effective_config: bool,
}

#[derive(Args)]
struct LegArgs {
    #[command(flatten)]
    common: Common,
    /// Only this leg (default: all).
    #[arg(long)]
    leg: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => {
                let Some(out) = &self.out else {
                    bail!("either --config or --out is required");
                };
                ExperimentConfig::new(Variant::Resnet18Slim, out)
            }
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if !self.gammas.is_empty() {
            cfg.multiscale.gammas = self.gammas.clone();
        }
        if let Some(v) = self.backbone {
            if v != cfg.backbone.variant {
                cfg.backbone = BackboneConfig::desk(v);
            }
        }
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }

    /// `None` when only the effective config was requested.
    fn runner(&self) -> Result<Option<Runner>> {
        let cfg = self.config()?;
        if self.print_effective_config {
            print!("{}", cfg.to_toml()?);
            return Ok(None);
        }
        Ok(Some(Runner::new(cfg)?))
    }
}

fn legs(runner: &Runner, leg: Option<usize>) -> Result<Vec<usize>> {
    let k = runner.fold_plan().context("no fold plan; run `pcus split` first")?.k;
    Ok(match leg {
        Some(l) if l >= k => bail!("leg {l} out of range for k = {k}"),
        Some(l) => vec![l],
        None => (0..k).collect(),
    })
}

fn print_reports(reports: &[pcus::metrics::MetricsReport]) {
    print!("{}", pcus::metrics::markdown_table(reports));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            if let Some(mut r) = c.runner()? {
                r.data()?;
            }
        }
        Command::Split(c) => {
            if let Some(mut r) = c.runner()? {
                r.data()?;
                let plan = r.split()?;
                let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
                println!("fold sizes (patients): {sizes:?}");
            }
        }
        Command::Pretrain(a) => {
            if let Some(mut r) = a.common.runner()? {
                for leg in legs(&r, a.leg)? {
                    r.pretrain(leg)?;
                }
            }
        }
        Command::Finetune(a) => {
            if let Some(mut r) = a.common.runner()? {
                for leg in legs(&r, a.leg)? {
                    r.finetune(leg)?;
                }
            }
        }
        Command::Multiscale(a) => {
            if let Some(mut r) = a.common.runner()? {
                let gammas = r.config().multiscale.gamma_values();
                for leg in legs(&r, a.leg)? {
                    for &g in &gammas {
                        r.multiscale(leg, g)?;
                    }
                }
            }
        }
        Command::Evaluate(c) => {
            if let Some(mut r) = c.runner()? {
                r.evaluate()?;
            }
        }
        Command::Report(c) => {
            if let Some(mut r) = c.runner()? {
                print_reports(&r.report()?);
            }
        }
        Command::RunAll(c) => {
            if let Some(mut r) = c.runner()? {
                print_reports(&r.run_all()?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
