//! Command-line front end. Exit codes: 0 success, 1 configuration or usage error,
//! 2 failure while running.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, ExperimentConfig};
use crate::error::{Error, Result};
use crate::experiment;
use crate::trainer::Ablation;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "rdfcil", version, about = "Data-free class-incremental learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML file layered over the preset
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set trainer.lr=0.05`; repeatable, later wins
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Comma-separated seeds, replacing `protocol.seeds`
    #[arg(long)]
    pub seeds: Option<String>,
    /// Output directory, replacing `out`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train all phases for every seed
    Run(Common),
    /// Run ablation variants over the configured seeds
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants such as `full,no_rkd,no_hkd+no_chr`
        #[arg(long)]
        variants: Option<String>,
    },
    /// Aggregate finished runs into tables and curves
    Report {
        /// Directories searched recursively for run reports
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Write a grid of synthesized images
    SynthPreview {
        #[command(flatten)]
        common: Common,
        /// Run directory (one seed); grids go into its phase directories unless `--out` is given
        #[arg(long)]
        run: Option<PathBuf>,
        /// Only this phase (default: every phase with a stored generator)
        #[arg(long)]
        phase: Option<usize>,
    },
}

fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = raw
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config {
            key: "--seeds".into(),
            message: e.to_string(),
        })?;
    if seeds.is_empty() {
        return Err(Error::Config {
            key: "--seeds".into(),
            message: "no seeds given".into(),
        });
    }
    Ok(seeds)
}

/// Resolve the configuration a command would use.
pub fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = &common.seeds {
        let seeds = parse_seeds(s)?;
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        overrides.push(format!("protocol.seeds=[{}]", list.join(",")));
    }
    let mut cfg = load_config(common.config.as_deref(), &overrides)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

pub fn parse_variant(label: &str) -> Result<Ablation> {
    let mut a = Ablation::default();
    if label == "full" {
        return Ok(a);
    }
    for part in label.split('+') {
        let flag = match part {
            "no_rkd" => &mut a.no_rkd,
            "no_hkd" => &mut a.no_hkd,
            "no_chr" => &mut a.no_chr,
            "global_ce" => &mut a.global_ce,
            "baseline_kd" => &mut a.baseline_kd,
            "naive_finetune" => &mut a.naive_finetune,
            other => {
                return Err(Error::Config {
                    key: "--variants".into(),
                    message: format!("unknown variant component {:?}", other),
                })
            }
        };
        *flag = true;
    }
    Ok(a)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let cfg = resolve(&common)?;
            let reports = experiment::run_experiment(&cfg)?;
            let rows = crate::metrics::aggregate_groups(&reports)?;
            print!("{}", crate::metrics::format_table(&rows));
            println!("results in {}", cfg.out.display());
        }
        Command::Ablate { common, variants } => {
            let cfg = resolve(&common)?;
            let variants = match variants {
                Some(v) => v.split(',').map(|s| parse_variant(s.trim())).collect::<Result<Vec<_>>>()?,
                None => experiment::standard_variants(),
            };
            let rows = experiment::ablate(&cfg, &variants)?;
            print!("{}", crate::metrics::format_table(&rows));
            println!("results in {}", cfg.out.display());
        }
        Command::Report { dirs, out } => {
            let r = experiment::report(&dirs, &out)?;
            for w in &r.warnings {
                eprintln!("warning: {}", w);
            }
            print!("{}", r.table);
            println!("written to {}", out.display());
        }
        Command::SynthPreview { common, run, phase } => {
            let cfg = match &run {
                // a run directory carries its own configuration
                Some(dir) if common.config.is_none() && common.overrides.is_empty() => {
                    let lock = dir.join("config.lock");
                    let text = std::fs::read_to_string(&lock).map_err(|e| Error::Config {
                        key: lock.display().to_string(),
                        message: e.to_string(),
                    })?;
                    let mut cfg = ExperimentConfig::from_lock(&text)?;
                    if let Some(s) = &common.seeds {
                        cfg.protocol.seeds = parse_seeds(s)?;
                    }
                    cfg
                }
                _ => resolve(&common)?,
            };
            for path in experiment::synth_preview(&cfg, run.as_deref(), phase, common.out.as_deref())? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parse and execute; returns the process exit code.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code(&e)
        }
    }
}
