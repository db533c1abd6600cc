use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mixtte_core::experiment::{
    build_benchmark, create_run_dir, experts_report, obtain_model, run_in_dir, write_benchmark, write_manifest,
    ExperimentConfig, Scenario,
};
use mixtte_core::Error;

#[derive(Parser, Debug)]
#[command(name = "mixtte", version, about = "Synthetic travel time estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root under which the timestamped run directory is created.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct AblationFlags {
    /// Skip external attention (WoEA).
    #[arg(long)]
    no_external_attention: bool,
    /// Route on the local context only (WoHR).
    #[arg(long)]
    no_hierarchical_routing: bool,
    /// Drop the MoE layers (WoMoE).
    #[arg(long)]
    no_moe: bool,
    /// Graph experts only (WoZE).
    #[arg(long)]
    no_zero_experts: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the network, traffic, trips and hot links.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the benchmark and evaluate against the historical baseline.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablation: AblationFlags,
    },
    /// Hourly drift-gated incremental learning loop.
    Il {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablation: AblationFlags,
        /// Update both sides every hour (WoPU).
        #[arg(long)]
        always_full_update: bool,
    },
    /// Replay queries against a periodically refreshed embedding cache.
    ServeSim {
        #[command(flatten)]
        common: Common,
        /// JSON Lines trip file to use as queries.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        refresh_interval: Option<usize>,
        /// Serve these parameters instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the scenario named in the config.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablation: AblationFlags,
        #[arg(long)]
        always_full_update: bool,
    },
    /// Export per-step expert assignments for one day.
    ExpertsReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Day to route; defaults to the first test day.
        #[arg(long)]
        day: Option<usize>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, Vec<PathBuf>), Error> {
    let (mut cfg, inputs) = match &common.config {
        Some(p) => (ExperimentConfig::load(p)?, vec![p.clone()]),
        None => (ExperimentConfig::default(), Vec::new()),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok((cfg, inputs))
}

fn apply(cfg: &mut ExperimentConfig, a: &AblationFlags) {
    let m = &mut cfg.model.ablation;
    m.no_external_attention |= a.no_external_attention;
    m.no_hierarchical_routing |= a.no_hierarchical_routing;
    m.no_moe |= a.no_moe;
    m.no_zero_experts |= a.no_zero_experts;
}

fn scenario(common: &Common, sc: Option<Scenario>, edit: impl FnOnce(&mut ExperimentConfig)) -> Result<PathBuf, Error> {
    let (mut cfg, inputs) = load(common)?;
    if let Some(sc) = sc {
        cfg.scenario = sc;
    }
    edit(&mut cfg);
    cfg.validate()?;
    let dir = create_run_dir(&common.out)?;
    run_in_dir(&cfg, &dir, &inputs)?;
    Ok(dir)
}

fn with_dir(common: &Common, f: impl FnOnce(&ExperimentConfig, &Path) -> Result<(), Error>) -> Result<PathBuf, Error> {
    let (cfg, inputs) = load(common)?;
    cfg.validate()?;
    let dir = create_run_dir(&common.out)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    f(&cfg, &dir)?;
    write_manifest(&dir, &cfg, &inputs)?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<PathBuf, Error> {
    match cli.command {
        Command::Gen { common } => with_dir(&common, |cfg, dir| write_benchmark(&build_benchmark(cfg)?, dir)),
        Command::Train { common, ablation } => scenario(&common, Some(Scenario::FullRetrain), |c| apply(c, &ablation)),
        Command::Il {
            common,
            ablation,
            always_full_update,
        } => scenario(&common, Some(Scenario::IlLoop), |c| {
            apply(c, &ablation);
            c.il.always_full_update |= always_full_update;
        }),
        Command::ServeSim {
            common,
            queries,
            refresh_interval,
            checkpoint,
        } => scenario(&common, Some(Scenario::ServeSim), |c| {
            if queries.is_some() {
                c.serve.queries_file = queries;
            }
            if let Some(r) = refresh_interval {
                c.serve.refresh_interval = r;
            }
            if checkpoint.is_some() {
                c.serve.checkpoint = checkpoint;
            }
        }),
        Command::Eval {
            common,
            ablation,
            always_full_update,
        } => scenario(&common, None, |c| {
            apply(c, &ablation);
            c.il.always_full_update |= always_full_update;
        }),
        Command::ExpertsReport { common, checkpoint, day } => with_dir(&common, |cfg, dir| {
            let bench = build_benchmark(cfg)?;
            let model = obtain_model(cfg, &bench, checkpoint.as_deref())?;
            let day = day.unwrap_or(cfg.data.train_days);
            experts_report(&model, &bench, cfg.data.train_days, day, dir)?;
            Ok(())
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
