//! `ddspec` command line: simulate coherence data, inspect filters and the
//! spin-bath oracle, and reconstruct environment models from traces.
//!
//! Every subcommand reads one JSON configuration. Outputs go to `--out`
//! (or `DDSPEC_OUT_DIR`, else the working directory) and embed the
//! configuration that produced them, so any output file can be passed back
//! as `--config` to regenerate it.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::Value;

use ddspec_core::io::{read_trace_path, trace_files};
use ddspec_core::model::CoherenceTrace;

use config::{load_value, parse, parse_list, set_field, SchemaError};
use output::{sha256_hex, InputDigest, Outputs, Provenance};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;

/// Environment variable overriding the default output directory.
pub const OUT_DIR_ENV: &str = "DDSPEC_OUT_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "ddspec",
    version,
    about = "Dynamical-decoupling noise spectroscopy"
)]
pub struct Cli {
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed overriding the configuration's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct ConfigArg {
    /// JSON configuration, or an earlier ddspec output.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Args, Debug)]
pub struct TracesArg {
    /// Trace CSV file, or a directory of them.
    #[arg(long)]
    pub traces: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Forward-simulate coherence traces.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Tabulate a sequence's filter function.
    Filter {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Compare the exact spin bath with the Magnus approximation.
    Oracle {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Reconstruct a Gaussian spectrum from decay-rate scans.
    Reconstruct {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        traces: TracesArg,
        #[arg(long)]
        l_max: Option<usize>,
        #[arg(long)]
        n_min: Option<usize>,
    },
    /// Fit hyperfine couplings to modulated traces.
    Nuclei {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        traces: TracesArg,
    },
    /// Fit a spectrum directly to coherence traces.
    FitDirect {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        traces: TracesArg,
    },
    /// Score models against traces.
    Validate {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        traces: TracesArg,
    },
    /// Plan, simulate, reconstruct and validate in one run.
    Pipeline {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated filter harmonics.
        #[arg(long)]
        harmonics: Option<String>,
        #[arg(long)]
        l_max: Option<usize>,
        #[arg(long)]
        n_min: Option<usize>,
    },
    /// List the spacings of a harmonic scan.
    ScanPlan {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated filter harmonics.
        #[arg(long)]
        harmonics: Option<String>,
    },
}

/// Parses arguments, runs, reports, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// 2 for numerical failures of the core routines, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.downcast_ref::<ddspec_core::Error>()
            .is_some_and(|x| x.is_numerical())
    });
    if numerical && !e.chain().any(|c| c.is::<SchemaError>()) {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

fn out_dir(cli_out: Option<PathBuf>) -> PathBuf {
    cli_out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

struct Loaded<T> {
    config: T,
    value: Value,
}

fn load<T: DeserializeOwned>(
    path: &Path,
    overrides: &[(&str, Option<Value>)],
) -> Result<Loaded<T>> {
    let mut value = load_value(path)?;
    for (key, v) in overrides {
        if let Some(v) = v {
            set_field(&mut value, key, v)?;
        }
    }
    let config = parse(&value, path)?;
    Ok(Loaded { config, value })
}

fn load_traces(path: &Path) -> Result<(Vec<CoherenceTrace>, Vec<InputDigest>)> {
    let files = if path.is_dir() {
        trace_files(path).with_context(|| format!("listing {}", path.display()))?
    } else {
        vec![path.to_path_buf()]
    };
    let mut digests = Vec::new();
    for f in &files {
        let bytes = std::fs::read(f).with_context(|| format!("reading {}", f.display()))?;
        digests.push(InputDigest {
            path: f.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
    }
    let traces = read_trace_path(path).map_err(|e| SchemaError(e.to_string()))?;
    if traces.is_empty() {
        return Err(SchemaError(format!("{}: no traces found", path.display())).into());
    }
    Ok((traces, digests))
}

fn json<T: serde::Serialize>(v: T) -> Option<Value> {
    Some(serde_json::to_value(v).expect("plain values serialize"))
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(SchemaError("--threads must be at least 1".into()).into());
        }
        // Fails only if a pool already exists, as in repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let dir = out_dir(cli.out);
    let mut out = Outputs::new(&dir);
    let seed = cli.seed.and_then(json);

    let summary = match cli.command {
        Command::Simulate { config } => {
            let mut l = load::<config::SimulateConfig>(&config.config, &[("seed", seed)])?;
            set_field(&mut l.value, "seed", l.config.seed)?;
            let traces = commands::simulate(&l.config)?;
            let prov = Provenance::new("simulate", l.value, vec![]);
            out.add_traces("traces.csv", &prov, &traces)?;
            let records: usize = traces.iter().map(|t| t.records.len()).sum();
            format!("{} traces, {records} records", traces.len())
        }
        Command::Filter { config } => {
            let l = load::<config::FilterConfig>(&config.config, &[])?;
            let prov = Provenance::new("filter", l.value, vec![]);
            commands::filter(&l.config, &prov, &mut out)?
        }
        Command::Oracle { config } => {
            let l = load::<config::OracleConfig>(&config.config, &[])?;
            let prov = Provenance::new("oracle", l.value, vec![]);
            commands::oracle(&l.config, &prov, &mut out)?
        }
        Command::ScanPlan { config, harmonics } => {
            let h = harmonics
                .map(|h| {
                    parse_list::<u32>(&h).map_err(|e| SchemaError(format!("--harmonics: {e}")))
                })
                .transpose()?;
            let l =
                load::<config::ScanPlanConfig>(&config.config, &[("harmonics", h.and_then(json))])?;
            let prov = Provenance::new("scan-plan", l.value, vec![]);
            commands::scan_plan(&l.config, &prov, &mut out)?
        }
        Command::Reconstruct {
            config,
            traces,
            l_max,
            n_min,
        } => {
            let l = load::<config::ReconstructConfig>(
                &config.config,
                &[
                    ("l_max", l_max.and_then(json)),
                    ("n_min", n_min.and_then(json)),
                ],
            )?;
            let (t, digests) = load_traces(&traces.traces)?;
            let prov = Provenance::new("reconstruct", l.value, digests);
            commands::reconstruct(&l.config, &t, &prov, &mut out)?
        }
        Command::Nuclei { config, traces } => {
            let l = load::<config::NucleiConfig>(&config.config, &[])?;
            let (t, digests) = load_traces(&traces.traces)?;
            let prov = Provenance::new("nuclei", l.value, digests);
            commands::nuclei(&l.config, &t, &prov, &mut out)?
        }
        Command::FitDirect { config, traces } => {
            let l = load::<config::FitDirectConfig>(&config.config, &[])?;
            let (t, digests) = load_traces(&traces.traces)?;
            let prov = Provenance::new("fit-direct", l.value, digests);
            commands::fit_direct(&l.config, &t, &prov, &mut out)?
        }
        Command::Validate { config, traces } => {
            let l = load::<config::ValidateConfig>(&config.config, &[])?;
            let (t, digests) = load_traces(&traces.traces)?;
            let prov = Provenance::new("validate", l.value, digests);
            commands::validate(&l.config, &t, &prov, &mut out)?
        }
        Command::Pipeline {
            config,
            harmonics,
            l_max,
            n_min,
        } => {
            let mut l = load::<config::PipelineConfig>(
                &config.config,
                &[
                    ("seed", seed),
                    ("l_max", l_max.and_then(json)),
                    ("n_min", n_min.and_then(json)),
                ],
            )?;
            set_field(&mut l.value, "seed", l.config.seed)?;
            if let Some(h) = harmonics {
                let h =
                    parse_list::<u32>(&h).map_err(|e| SchemaError(format!("--harmonics: {e}")))?;
                l.value["scan"]["harmonics"] = serde_json::to_value(&h)?;
                l.config.scan.harmonics = h;
            }
            let prov = Provenance::new("pipeline", l.value, vec![]);
            commands::pipeline(&l.config, &prov, &mut out)?
        }
    };
    for path in out.commit()? {
        println!("wrote {}", path.display());
    }
    println!("{summary}");
    Ok(())
}
