use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use envdiff::harness::{self, ConfigError, RunConfig};
use envdiff::heightfield::{load_dataset_dir, save_dataset_dir};

#[derive(Parser, Debug)]
#[command(name = "envdiff", version, about = "Diffusion-guided terrain curriculum for navigation policies")]
struct Cli {
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config, or a run.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a procedural bootstrap dataset.
    Bootstrap {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train an EpsNet on a dataset directory.
    TrainDdpm {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Synthesize maps from a dataset at an explicit forward step k.
    Gen {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// EpsNet checkpoint; defaults to a mixture over the dataset.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a preset curriculum loop.
    Run {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Success rate of a policy checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Median normalized-return curves across run directories.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out.clone();
    match cli.cmd {
        Cmd::Bootstrap { count } => {
            if let Some(n) = count {
                cfg.bootstrap.count = n;
            }
            cfg.validate()?;
            let ds = harness::bootstrap_for(&cfg)?;
            save_dataset_dir(&ds, &out)?;
            println!("wrote {} maps to {}", ds.len(), out.display());
        }
        Cmd::TrainDdpm { dataset } => {
            let r = harness::train_ddpm(&cfg, &dataset, &out)?;
            println!(
                "trained {} steps: held-out eps-MSE {:.4} (untrained {:.4})",
                r.steps, r.heldout_loss, r.initial_heldout_loss
            );
        }
        Cmd::Gen { dataset, k, count, checkpoint } => {
            let src = load_dataset_dir(&dataset).with_context(|| format!("loading {}", dataset.display()))?;
            let ds = harness::generate(&cfg, &src, k, count, checkpoint.as_deref())?;
            save_dataset_dir(&ds, &out)?;
            println!("wrote {} maps to {}", ds.len(), out.display());
        }
        Cmd::Run { preset, epochs } => {
            if let Some(p) = preset {
                cfg.preset = p;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let s = harness::run_preset(&cfg, &out)?;
            println!("{} seed {}: {} epochs, dataset {}", s.preset, s.seed, s.epochs, s.final_dataset_size);
            if let Some(h) = s.heldout {
                println!("held-out success {:.3}, normalized return {:.3}", h.success_rate, h.norm_return);
            }
        }
        Cmd::Eval { policy, maps, episodes } => {
            let ds = load_dataset_dir(&maps).with_context(|| format!("loading {}", maps.display()))?;
            let maps: Vec<_> = ds.maps().cloned().collect();
            let episodes = episodes.unwrap_or(cfg.heldout.episodes);
            if episodes == 0 {
                bail!(ConfigError::Invalid("episodes must be >= 1".into()));
            }
            let s = harness::evaluate_checkpoint(&cfg, &policy, &maps, episodes)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&s)? + "\n")?;
            println!("success rate {:.4} over {} episodes, mean return {:.4}", s.success_rate, s.episodes, s.mean_return);
        }
        Cmd::Compare { runs } => {
            let c = harness::compare_runs(&runs, &out)?;
            for s in &c.series {
                let last = s.norm_return.last().copied().unwrap_or(f64::NAN);
                println!("{}: {} runs, final median normalized return {:.4}", s.preset, s.runs, last);
            }
        }
    }
    Ok(())
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some()
            || matches!(e.downcast_ref::<envdiff::Error>(), Some(envdiff::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
