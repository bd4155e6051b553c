use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use flexarm::check::{run_suite, Overrides};
use flexarm::export::{self, Format};
use flexarm::scenario::{load_scenario, Scenario};
use flexarm::sim::{run, RunLog};
use flexarm::Error;

/// Run failed its monitors or a check failed.
const EXIT_FAILED: u8 = 1;
/// The simulation aborted.
const EXIT_ABORTED: u8 = 3;
/// Bad configuration or I/O.
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(name = "flexarm", version, about = "Adaptive force/motion control of a planar flexible-joint arm")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the simulated duration (s).
    #[arg(long, global = true)]
    duration: Option<f64>,
    /// Switch quantization, force noise and the 40 Hz measurement rate together.
    #[arg(long, global = true, value_enum)]
    fidelity: Option<OnOff>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Summary,
    Svg,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Summary => Format::Summary,
            FormatArg::Svg => Format::Svg,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write the log, summary and plots.
    Simulate {
        /// Scenario JSON file, or one of the built-ins: mixed, force, position.
        config: String,
    },
    /// Run the invariant suite on the built-in scenarios.
    Check,
    /// Run a seed and stiffness batch in parallel.
    Sweep {
        /// Scenario JSON file or built-in name.
        #[arg(default_value = "mixed")]
        config: String,
        /// Number of consecutive seeds, starting at the scenario seed.
        #[arg(long, default_value_t = 8)]
        seeds: u64,
        /// Normal contact moduli (N/m); the tangential modulus keeps the
        /// scenario's ratio. Defaults to the scenario's own.
        #[arg(long, value_delimiter = ',')]
        stiffness: Vec<f64>,
    },
    /// Render artifacts from a CSV log written by `simulate`.
    Export {
        /// CSV log.
        log: PathBuf,
        /// Scenario the log was produced with (file or built-in name).
        #[arg(long, default_value = "mixed")]
        config: String,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "summary,svg")]
        format: Vec<FormatArg>,
    },
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            duration: self.duration,
            fidelity: self.fidelity.map(|f| matches!(f, OnOff::On)),
        }
    }
}

fn resolve(config: &str) -> Result<Scenario, Error> {
    let path = Path::new(config);
    if !path.exists() {
        if let Some(sc) = Scenario::builtin(config) {
            return Ok(sc);
        }
    }
    load_scenario(path)
}

fn print_json(value: &impl Serialize) {
    match serde_json::to_string_pretty(value) {
        // a closed pipe is the reader's choice, not an error worth a panic
        Ok(s) => {
            let _ = writeln!(std::io::stdout().lock(), "{s}");
        }
        Err(e) => eprintln!("cannot serialize report: {e}"),
    }
}

fn config_failure(error: &Error) -> ExitCode {
    print_json(&json!({ "status": "error", "error": error.to_string() }));
    ExitCode::from(EXIT_CONFIG)
}

fn write_report(out: &Path, report: &serde_json::Value) {
    let written = std::fs::create_dir_all(out)
        .and_then(|_| std::fs::write(out.join("report.json"), format!("{report:#}\n")));
    if let Err(e) = written {
        eprintln!("cannot write report: {e}");
    }
}

fn simulate(config: &str, common: &Common) -> ExitCode {
    let mut sc = match resolve(config) {
        Ok(sc) => sc,
        Err(e) => return config_failure(&e),
    };
    common.overrides().apply(&mut sc);
    let (log, error) = match run(&sc) {
        Ok(log) => (log, None),
        Err(aborted) => (aborted.log, Some(aborted.error)),
    };
    let summary = match export::summarize(&log, &sc, error.as_ref()) {
        Ok(s) => Some(s),
        Err(Error::EmptyLog) => None,
        Err(e) => return config_failure(&e),
    };
    if summary.is_some() {
        if let Err(e) = export::export(&log, &sc, error.as_ref(), &common.out, &Format::ALL) {
            return config_failure(&e);
        }
    }
    let failed: Vec<_> = log.monitors.iter().filter(|m| !m.passed()).map(|m| m.name).collect();
    let status = if error.is_some() {
        "aborted"
    } else if failed.is_empty() {
        "ok"
    } else {
        "failed"
    };
    let report = json!({
        "status": status,
        "error": error.as_ref().map(|e| e.to_string()),
        "failed_monitors": failed,
        "summary": summary,
    });
    write_report(&common.out, &report);
    print_json(&report);
    match status {
        "ok" => ExitCode::SUCCESS,
        "aborted" => ExitCode::from(EXIT_ABORTED),
        _ => ExitCode::from(EXIT_FAILED),
    }
}

fn check(common: &Common) -> ExitCode {
    let outcomes = run_suite(&common.overrides());
    for o in &outcomes {
        eprintln!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let passed = outcomes.iter().all(|o| o.passed);
    let report = json!({
        "status": if passed { "ok" } else { "failed" },
        "checks": outcomes,
    });
    write_report(&common.out, &report);
    if passed {
        ExitCode::SUCCESS
    } else {
        print_json(&report);
        ExitCode::from(EXIT_FAILED)
    }
}

#[derive(Debug, Serialize)]
struct SweepRow {
    seed: u64,
    ke_top: f64,
    ke_perp: f64,
    completed: bool,
    monitors_passed: bool,
    final_position_error_m: Option<f64>,
    final_force_error_n: Option<f64>,
    max_v_increase: Option<f64>,
    p99_step_us: Option<f64>,
    error: Option<String>,
}

fn sweep_one(sc: &Scenario) -> SweepRow {
    let (ke_top, ke_perp) = sc.contact.map_or((0.0, 0.0), |c| (c.ke_top, c.ke_perp));
    let (log, error): (RunLog, Option<Error>) = match run(sc) {
        Ok(log) => (log, None),
        Err(a) => (a.log, Some(a.error)),
    };
    let summary = export::summarize(&log, sc, error.as_ref()).ok();
    SweepRow {
        seed: sc.seed,
        ke_top,
        ke_perp,
        completed: error.is_none(),
        monitors_passed: log.monitors_passed(),
        final_position_error_m: summary.as_ref().map(|s| s.final_position_error_m),
        final_force_error_n: summary.as_ref().map(|s| s.final_force_error_n),
        max_v_increase: summary.as_ref().map(|s| s.max_v_increase),
        p99_step_us: summary.as_ref().and_then(|s| s.timing.as_ref().map(|t| t.p99_us)),
        error: error.map(|e| e.to_string()),
    }
}

fn sweep(config: &str, seeds: u64, stiffness: &[f64], common: &Common) -> ExitCode {
    let mut base = match resolve(config) {
        Ok(sc) => sc,
        Err(e) => return config_failure(&e),
    };
    common.overrides().apply(&mut base);
    let moduli: Vec<Option<f64>> = if stiffness.is_empty() {
        vec![None]
    } else {
        stiffness.iter().copied().map(Some).collect()
    };
    if moduli.iter().flatten().any(|k| !(*k > 0.0 && k.is_finite())) {
        return config_failure(&Error::Config("stiffness values must be positive".into()));
    }
    if base.contact.is_none() && moduli.iter().any(Option::is_some) {
        return config_failure(&Error::Config("scenario has no contact interface to vary".into()));
    }
    let mut jobs = Vec::new();
    for k in &moduli {
        for i in 0..seeds {
            let mut sc = base.clone();
            sc.seed = base.seed.wrapping_add(i);
            if let (Some(k), Some(c)) = (k, sc.contact.as_mut()) {
                c.ke_perp *= k / c.ke_top;
                c.ke_top = *k;
            }
            jobs.push(sc);
        }
    }
    let rows: Vec<SweepRow> = jobs.par_iter().map(sweep_one).collect();

    let written = (|| -> Result<(), Error> {
        std::fs::create_dir_all(&common.out)?;
        let mut w = csv::Writer::from_path(common.out.join("sweep.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    })();
    if let Err(e) = written {
        return config_failure(&e);
    }
    let ok = rows.iter().all(|r| r.completed && r.monitors_passed);
    let report = json!({ "status": if ok { "ok" } else { "failed" }, "runs": rows });
    write_report(&common.out, &report);
    print_json(&report);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILED)
    }
}

fn export_log(log_path: &Path, config: &str, formats: &[FormatArg], common: &Common) -> ExitCode {
    let result = (|| -> Result<Vec<PathBuf>, Error> {
        let mut sc = resolve(config)?;
        common.overrides().apply(&mut sc);
        let (n, m) = (sc.chain.n_actuated(), sc.chain.n_flexible());
        let records = export::read_csv(BufReader::new(File::open(log_path)?), n, m)?;
        let log = RunLog {
            scenario: sc.name.clone(),
            seed: sc.seed,
            n,
            m,
            control_dt: sc.fidelity.control_dt(),
            records,
            step_us: Vec::new(),
            transitions: Vec::new(),
            monitors: Vec::new(),
        };
        let formats: Vec<Format> = formats.iter().map(|f| (*f).into()).collect();
        export::export(&log, &sc, None, &common.out, &formats)
    })();
    match result {
        Ok(paths) => {
            print_json(&json!({ "status": "ok", "written": paths }));
            ExitCode::SUCCESS
        }
        Err(e) => config_failure(&e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate { config } => simulate(config, &cli.common),
        Command::Check => check(&cli.common),
        Command::Sweep { config, seeds, stiffness } => sweep(config, *seeds, stiffness, &cli.common),
        Command::Export { log, config, format } => export_log(log, config, format, &cli.common),
    }
}
