//! Command-line surface. Exit status is 0 on success, 1 for invalid input or
//! usage, 2 when a numeric failure aborted a fit or a chain.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::data::{read_labels, Dataset};
use crate::error::{Error, Result};
use crate::sampler::trace::read_trace;
use crate::synth::{benchmark_spec, MixtureSpec};

pub use commands::*;
pub use config::{Config, Method, DEFAULT_METHODS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "bnpclust", version, about = "Bayesian mixture clustering with split-merge MCMC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a labelled dataset from a Gaussian mixture.
    Generate {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// `benchmark` for the built-in four-component benchmark, or a TOML mixture file.
        #[arg(long, default_value = "benchmark")]
        spec: String,
        /// Output directory for data.csv and labels.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the sampler and write a trace file.
    Fit {
        /// Headerless CSV, one observation per line.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["mvn-full", "mvn-full-hier", "mvn-diag"])]
        model: Option<String>,
        #[arg(long, value_parser = ["dpm", "dpm-hyper", "mfm"])]
        prior: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        burnin: Option<usize>,
        #[arg(long)]
        chains: Option<usize>,
        /// Trace file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a trace into point clusterings.
    Summarize {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated methods, e.g. `vilb+complete,medvedovic,map`.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        /// Reference labels (1-based, one per line) for the ARI column.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat generate, fit and summarize over fresh benchmark datasets.
    Replicate {
        #[arg(value_parser = ["moderate", "dpm-large", "misspec"])]
        scenario: String,
        /// Number of replicates.
        #[arg(long, default_value_t = 5)]
        r: usize,
        /// Observations per dataset; defaults to 500 (moderate) or 2000.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        burnin: Option<usize>,
        #[arg(long)]
        chains: Option<usize>,
        /// Output directory for replicates.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::read(p),
        None => Ok(Config::default()),
    }
}

fn apply_mcmc(cfg: &mut Config, seed: Option<u64>, iters: Option<usize>, burnin: Option<usize>, chains: Option<usize>) {
    if let Some(s) = seed {
        cfg.mcmc.seed = s;
    }
    if let Some(i) = iters {
        cfg.mcmc.iters = i;
    }
    if let Some(b) = burnin {
        cfg.mcmc.burnin = b;
    }
    if let Some(c) = chains {
        cfg.mcmc.chains = c;
    }
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Generate { n, seed, spec, out } => {
            let mix = if spec == "benchmark" {
                benchmark_spec()
            } else {
                MixtureSpec::read(&spec)?
            };
            cmd_generate(&mix, n as usize, seed, &out)?;
            writeln!(stdout, "wrote {} and {}", out.join(DATA_FILE).display(), out.join(LABELS_FILE).display())?;
            Ok(EXIT_OK)
        }
        Command::Fit {
            data,
            config,
            model,
            prior,
            seed,
            iters,
            burnin,
            chains,
            out,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(m) = model {
                cfg.model.kind = m;
            }
            if let Some(p) = prior {
                cfg.prior.kind = p;
            }
            apply_mcmc(&mut cfg, seed, iters, burnin, chains);
            cfg.validate()?;
            let dataset = Dataset::read_csv(&data)?;
            let fit = cmd_fit(&dataset, &cfg, &data.display().to_string())?;
            write_fit(&fit, &out)?;
            stdout.write_all(fit_report(&fit).as_bytes())?;
            writeln!(stdout, "wrote {}", out.display())?;
            Ok(if fit.numeric_failure() { EXIT_NUMERIC } else { EXIT_OK })
        }
        Command::Summarize {
            trace,
            config,
            methods,
            truth,
            out,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if !methods.is_empty() {
                cfg.summarize.methods = methods;
            }
            cfg.validate()?;
            let truth = truth.map(read_labels).transpose()?;
            let file = read_trace(&trace)?;
            let (psm, rows) = cmd_summarize(&file.traces, &cfg, truth.as_ref())?;
            let mut header = vec![format!("bnpclust summarize; trace = {}", trace.display())];
            header.push("config:".into());
            header.extend(cfg.to_toml().lines().map(str::to_string));
            write_summaries(&out, &header, &psm, &rows)?;
            stdout.write_all(format_table(&rows).as_bytes())?;
            Ok(EXIT_OK)
        }
        Command::Replicate {
            scenario,
            r,
            n,
            seed,
            config,
            iters,
            burnin,
            chains,
            out,
        } => {
            let scenario = Scenario::parse(&scenario)?;
            let mut cfg = load_config(config.as_ref())?;
            apply_mcmc(&mut cfg, None, iters, burnin, chains);
            cfg.validate()?;
            let n = n.map_or(scenario.default_n(), |v| v as usize);
            std::fs::create_dir_all(&out)?;
            let mut text = String::new();
            for line in cfg.to_toml().lines() {
                text.push_str(&format!("# {line}\n"));
            }
            text.push_str(&format!("# scenario = {}; replicates = {r}; n = {n}; seed = {seed}\n", scenario.name()));
            text.push_str(REPLICATE_COLUMNS);
            text.push('\n');
            let mut failed = false;
            let rows = cmd_replicate(scenario, r, n, seed, &cfg, |row| {
                if row.status != "ok" {
                    eprintln!("replicate {} {}: {}", row.replicate, row.model, row.status);
                }
            })?;
            for row in &rows {
                failed |= row.status != "ok";
                text.push_str(&row.to_csv());
                text.push('\n');
            }
            let path = out.join(REPLICATE_FILE);
            std::fs::write(&path, text)?;
            writeln!(stdout, "wrote {} ({} rows)", path.display(), rows.len())?;
            Ok(if failed { EXIT_NUMERIC } else { EXIT_OK })
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_INVALID
    }
}
