//! Command-line driver. `run` returns the process exit code: 0 on success,
//! 1 on runtime failures, 2 on usage or configuration errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bounds::{asymptotic_limit, posterior_variance, LimitCase};
use crate::config::CliConfig;
use crate::harness::{run_experiment, scenario_for_run, write_outputs, ScenarioSource};
use crate::scenario::{format_float, write_traces, GnssModel, ZoneFile};

#[derive(Debug, Parser)]
#[command(name = "icp", about = "Implicit cooperative positioning simulator", disable_version_flag = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (a file path for gen-scenario).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo runs; writes rmse.csv, errors.csv and summary.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Posterior-variance tables; writes bounds.csv and limits.csv.
    Bounds {
        #[command(flatten)]
        common: Common,
    },
    /// Writes the scenario truth as a trace CSV.
    GenScenario {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    Version,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

fn rt<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load(common: &Common) -> Result<CliConfig, Failure> {
    let cfg = match &common.config {
        Some(p) => CliConfig::load(p).map_err(Failure::Usage)?,
        None => CliConfig::default(),
    };
    Ok(cfg)
}

/// Parses `args` (program name first) and executes the subcommand.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if e.use_stderr() { write!(stderr, "{e}") } else { write!(stdout, "{e}") };
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Runtime(m)) = &f;
            let _ = writeln!(stderr, "error: {m}");
            f.code()
        }
    }
}

fn execute(cmd: Command, stdout: &mut dyn Write) -> Result<(), Failure> {
    match cmd {
        Command::Version => {
            writeln!(stdout, "icp {}", env!("CARGO_PKG_VERSION")).map_err(rt)?;
            Ok(())
        }
        Command::Simulate { common, seed, runs } => {
            let mut cfg = load(&common)?;
            if let Some(s) = seed {
                cfg.estimators.base_seed = s;
            }
            if let Some(r) = runs {
                cfg.estimators.n_runs = r;
            }
            if let Some(o) = &common.out {
                cfg.output.dir = o.clone();
            }
            cfg.validate().map_err(Failure::Usage)?;
            let series = run_experiment(&cfg.run_config()).map_err(rt)?;
            write_outputs(&series, &cfg.radio(), &cfg, &cfg.output.dir).map_err(rt)?;
            for (run, msg) in series.failures() {
                writeln!(stdout, "run {run} failed: {msg}").map_err(rt)?;
            }
            writeln!(stdout, "wrote {}", cfg.output.dir.join("rmse.csv").display()).map_err(rt)?;
            Ok(())
        }
        Command::Bounds { common } => {
            let mut cfg = load(&common)?;
            if let Some(o) = &common.out {
                cfg.output.dir = o.clone();
            }
            cfg.bounds.validate().map_err(Failure::Usage)?;
            std::fs::create_dir_all(&cfg.output.dir).map_err(rt)?;
            write_bounds(&cfg, &cfg.output.dir).map_err(rt)?;
            writeln!(stdout, "wrote {}", cfg.output.dir.join("bounds.csv").display()).map_err(rt)?;
            Ok(())
        }
        Command::GenScenario { common, seed } => {
            let cfg = load(&common)?;
            cfg.scenario.validate().map_err(|e| Failure::Usage(format!("scenario: {e}")))?;
            if matches!(cfg.scenario, ScenarioSource::Trace { .. }) {
                return Err(Failure::Usage("gen-scenario needs a crossroad or urban scenario".into()));
            }
            let seed = seed.unwrap_or(cfg.estimators.base_seed);
            let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.join("scenario.csv"));
            let sc = scenario_for_run(&cfg.scenario, seed).map_err(rt)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(rt)?;
            }
            write_traces(&sc, std::io::BufWriter::new(std::fs::File::create(&out).map_err(rt)?)).map_err(rt)?;
            if let GnssModel::Zoned { zones, .. } = &sc.sensors.gnss {
                let zpath = out.with_extension("zones.json");
                let doc = serde_json::to_string_pretty(&ZoneFile { zones: zones.clone() }).map_err(rt)?;
                std::fs::write(&zpath, doc + "\n").map_err(rt)?;
            }
            writeln!(stdout, "wrote {}", out.display()).map_err(rt)?;
            Ok(())
        }
    }
}

/// `bounds.csv`: one row per (N_v, N_f) with the closed-form variance and
/// every limit; `limits.csv`: the limit sweeps around the first row's config.
pub fn write_bounds(cfg: &CliConfig, dir: &Path) -> Result<(), crate::harness::HarnessError> {
    let b = &cfg.bounds;
    let mut w = csv::Writer::from_path(dir.join("bounds.csv"))?;
    let mut header = vec![
        "n_v".to_string(),
        "n_f".into(),
        "sigma_gnss2".into(),
        "sigma_v2f2".into(),
        "sigma_p_prior_v2".into(),
        "sigma_p_prior_f2".into(),
        "posterior_var_m2".into(),
        "standalone_var_m2".into(),
    ];
    header.extend(LimitCase::ALL.iter().map(|c| format!("limit_{}", c.name())));
    w.write_record(&header)?;
    for &nv in &b.n_v_values {
        for &nf in &b.n_f_values {
            let fc = b.fim_config(nv, nf);
            let mut row = vec![
                nv.to_string(),
                nf.to_string(),
                format_float(fc.sigma_gnss2),
                format_float(fc.sigma_v2f2),
                format_float(fc.sigma_p_prior_v2),
                format_float(fc.sigma_p_prior_f2),
                format_float(posterior_variance(&fc).sigma_p_post2),
                format_float(fc.standalone_variance()),
            ];
            row.extend(LimitCase::ALL.iter().map(|c| format_float(asymptotic_limit(*c, &fc))));
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("limits.csv"))?;
    w.write_record(["case", "value", "posterior_var_m2", "limit_m2"])?;
    if b.points_per_decade > 0 {
        let base = b.fim_config(b.n_v_values[0], b.n_f_values[0]);
        for case in LimitCase::ALL {
            for v in case.sweep_values(b.points_per_decade) {
                let c = case.with_parameter(&base, v);
                w.write_record([
                    case.name().to_string(),
                    format_float(v),
                    format_float(posterior_variance(&c).sigma_p_post2),
                    format_float(asymptotic_limit(case, &c)),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
