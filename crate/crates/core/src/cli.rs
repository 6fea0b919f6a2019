//! Command-line front end. The binary only forwards its arguments here, so
//! every subcommand is testable in-process.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::diagnostics::{geometry_report, DEFAULT_RANK_TOL};
use crate::distsim::RmsMode;
use crate::error::{Error, Result};
use crate::experiment::{
    audit, compare_runs, efficiency_table, format_gain_table, run_distsim, run_experiment, Curve,
    ExperimentConfig, SMOOTHING_WINDOW,
};
use crate::matrix::Matrix;
use crate::orthogonalize::{ns5, NsConfig};

#[derive(Debug, Parser)]
#[command(name = "normuon", version, about = "NorMuon optimizer experiments, diagnostics and audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir` or `runs/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shorthand for `--set optimizer=<NAME>`.
    #[arg(long)]
    optimizer: Option<String>,
    /// Override any config key, e.g. `--set optim.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: Vec<String>) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(name) = &self.optimizer {
            overrides.push(format!("optimizer={}", toml_string(name)));
        }
        overrides.extend(extra);
        ExperimentConfig::load(&self.config, &overrides)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.output_path())
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write a run directory.
    Run(ConfigArgs),
    /// Train with the optimizer step simulated across ranks.
    Distsim {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of simulated ranks.
        #[arg(long)]
        world: Option<usize>,
        /// `global` or `shard_local`.
        #[arg(long)]
        rms_mode: Option<String>,
        /// Run each simulated rank on its own thread.
        #[arg(long)]
        threaded: bool,
    },
    /// Geometry reports for saved matrices (`.nmk`).
    Analyze {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
        rank_tol: f64,
        /// Also report the Newton-Schulz orthogonalized matrix.
        #[arg(long)]
        ns5: bool,
        #[arg(long)]
        json: bool,
    },
    /// Optimizer-state memory and communication per element.
    Audit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        world: Option<usize>,
        #[arg(long)]
        elem_bytes_param: Option<u64>,
        #[arg(long)]
        elem_bytes_grad: Option<u64>,
        #[arg(long)]
        elem_bytes_collective: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check that two runs ended with the same weights.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Largest allowed relative difference per element.
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Efficiency gain of each run over a reference run.
    StepsToLoss {
        #[arg(long)]
        reference: PathBuf,
        candidates: Vec<PathBuf>,
        #[arg(long, default_value_t = SMOOTHING_WINDOW)]
        window: usize,
        #[arg(long)]
        json: bool,
    },
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Run(args) => {
            let cfg = args.resolve(Vec::new())?;
            let dir = args.out_dir(&cfg);
            let summary = run_experiment(&cfg, &dir)?;
            writeln!(out, "{}", summary.checksum).map_err(io_out)
        }
        Command::Distsim {
            config,
            world,
            rms_mode,
            threaded,
        } => {
            let mut extra = Vec::new();
            if let Some(w) = world {
                extra.push(format!("distsim.world_size={w}"));
            }
            if let Some(mode) = rms_mode {
                let mode: RmsMode = mode.parse().map_err(|_| {
                    Error::config("distsim.rms_mode", format!("unknown mode `{mode}`; expected global or shard_local"))
                })?;
                let name = serde_json::to_value(mode).expect("mode serializes");
                extra.push(format!("distsim.rms_mode={}", toml_string(name.as_str().unwrap())));
            }
            if threaded {
                extra.push("distsim.threaded=true".into());
            }
            let cfg = config.resolve(extra)?;
            let dir = config.out_dir(&cfg);
            let summary = run_distsim(&cfg, &dir)?;
            writeln!(out, "{}", summary.checksum).map_err(io_out)
        }
        Command::Analyze {
            files,
            rank_tol,
            ns5: with_ns5,
            json: as_json,
        } => analyze(&files, rank_tol, with_ns5, as_json, out),
        Command::Audit {
            config,
            world,
            elem_bytes_param,
            elem_bytes_grad,
            elem_bytes_collective,
            overrides,
        } => {
            let mut overrides = overrides;
            for (key, v) in [
                ("world_size", world.map(|w| w as u64)),
                ("elem_bytes_param", elem_bytes_param),
                ("elem_bytes_grad", elem_bytes_grad),
                ("elem_bytes_collective", elem_bytes_collective),
            ] {
                if let Some(v) = v {
                    overrides.push(format!("distsim.{key}={v}"));
                }
            }
            let cfg = match config {
                Some(path) => ExperimentConfig::load(&path, &overrides)?,
                None => ExperimentConfig::from_toml_str("", &overrides)?,
            };
            let report = audit(&cfg)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("report serializes")).map_err(io_out)
        }
        Command::Compare { a, b, tol } => {
            let c = compare_runs(&a, &b, tol)?;
            writeln!(
                out,
                "{} (max relative difference {:e}, tolerance {:e})",
                if c.identical { "identical" } else { "equivalent" },
                c.max_rel_diff,
                c.tolerance
            )
            .map_err(io_out)
        }
        Command::StepsToLoss {
            reference,
            candidates,
            window,
            json: as_json,
        } => {
            let reference = Curve::load(&reference)?;
            let curves = candidates.iter().map(|p| Curve::load(p)).collect::<Result<Vec<_>>>()?;
            let rows = efficiency_table(&reference, &curves, window)?;
            if as_json {
                writeln!(out, "{}", serde_json::to_string_pretty(&rows).expect("rows serialize")).map_err(io_out)
            } else {
                write!(out, "{}", format_gain_table(&rows)).map_err(io_out)
            }
        }
    }
}

fn analyze(files: &[PathBuf], rank_tol: f64, with_ns5: bool, as_json: bool, out: &mut dyn Write) -> Result<()> {
    let mut reports = Vec::new();
    for path in files {
        let m = Matrix::load(path)?;
        let label = label_for(path);
        reports.push(geometry_report(&m, &label, rank_tol)?);
        if with_ns5 {
            reports.push(geometry_report(&ns5(&m, &NsConfig::default())?, &format!("{label}:ns5"), rank_tol)?);
        }
    }
    if as_json {
        let doc = json!(reports);
        return writeln!(out, "{}", serde_json::to_string_pretty(&doc).expect("reports serialize")).map_err(io_out);
    }
    writeln!(out, "{:<32} {:>12} {:>12} {:>12} {:>10}", "matrix", "cond", "sigma_max", "sigma_min", "norm_cv")
        .map_err(io_out)?;
    for r in &reports {
        writeln!(
            out,
            "{:<32} {:>12.4e} {:>12.4e} {:>12.4e} {:>10.4}",
            r.source_label,
            r.condition_number,
            r.sigma_max(),
            r.sigma_min(),
            r.norm_cv
        )
        .map_err(io_out)?;
    }
    Ok(())
}

fn label_for(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
