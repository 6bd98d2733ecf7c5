//! `grokwatch`: train, sweep, analyze, fit, intervene and export.
//!
//! Any configuration key can be given as `--<key> <value>`; those override
//! the file passed with `--config`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use grokwatch::detect::{self, fixtures, FitMethod};
use grokwatch::harness::{self, analysis, export, ConfigError, ExperimentConfig, RunRecord};
use grokwatch::interventions::{self, Condition, InterventionSpec};

#[derive(Parser)]
#[command(name = "grokwatch", about = "Commutator-defect instrumentation for grokking runs")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed in the config.
    Train,
    /// One run per (learning rate, seed), then the scaling fits.
    Sweep {
        /// Comma-separated learning rates.
        #[arg(long, value_delimiter = ',', required = true)]
        lrs: Vec<f64>,
        #[arg(long, default_value_t = harness::default_jobs())]
        jobs: usize,
    },
    /// Trajectory PCA, null model and integrability table of a run.
    Analyze {
        run: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_null: usize,
        #[arg(long, default_value_t = 5)]
        n_rand: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Detectors and power-law fits over run records or built-in tables.
    Fit {
        /// Run directories (each holding record.json).
        runs: Vec<PathBuf>,
        #[arg(long, value_enum)]
        fixture: Option<Fixture>,
        #[arg(long, value_enum, default_value_t = Method::LogOls)]
        method: Method,
    },
    /// Dose-response grid against a baseline.
    Intervene {
        /// `condition:strength[,strength...]` cells separated by `;`.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = harness::default_jobs())]
        jobs: usize,
    },
    /// Plot-ready CSV series for finished runs.
    Export {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    Scan,
    Dyck,
    ScanMeans,
    DyckMeans,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    LogOls,
    Nonlinear,
}

enum Failure {
    Config(String),
    Run(String),
    Analysis(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Run(_) => 2,
            Failure::Analysis(_) => 3,
        }
    }
}

/// Splits `--<config key> <value>` pairs out of the raw arguments.
fn take_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), ConfigError> {
    let keys = ExperimentConfig::keys();
    let mut rest = Vec::new();
    let mut pairs = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let key = name.replace('-', "_");
        if !keys.contains(&key.as_str()) {
            rest.push(a);
            continue;
        }
        let value = match inline.or_else(|| it.next()) {
            Some(v) => v,
            None => {
                return Err(ConfigError::BadValue { key, value: String::new(), reason: "missing value".into() });
            }
        };
        pairs.push((key, value));
    }
    Ok((rest, pairs))
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let task = overrides.iter().rev().find(|(k, _)| k == "task").map(|(_, v)| v.as_str());
            ExperimentConfig::from_pairs(task.map(|t| ("task", t)))?
        }
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_grid(text: &str, template: &InterventionSpec) -> Result<Vec<InterventionSpec>, ConfigError> {
    let bad = |reason: String| ConfigError::BadValue { key: "grid".into(), value: text.into(), reason };
    let mut out = Vec::new();
    for cell in text.split(';').map(str::trim).filter(|c| !c.is_empty()) {
        let (cond, strengths) = cell.split_once(':').unwrap_or((cell, ""));
        let condition = Condition::parse(cond.trim()).map_err(|e| bad(e.to_string()))?;
        let base = InterventionSpec { condition, strength: condition.default_strength(), ..template.clone() };
        if strengths.trim().is_empty() {
            out.push(base);
            continue;
        }
        for s in strengths.split(',') {
            let strength: f64 = s.trim().parse().map_err(|e| bad(format!("{s:?}: {e}")))?;
            let spec = InterventionSpec { strength, ..base.clone() };
            spec.validate().map_err(|e| bad(e.to_string()))?;
            out.push(spec);
        }
    }
    if out.is_empty() {
        return Err(bad("grid is empty".into()));
    }
    Ok(out)
}

fn print_fit(label: &str, fit: Option<&detect::ScalingFit>) {
    match fit {
        Some(f) => println!(
            "{label}: alpha={:.4} C={:.4} R2={:.4} SE={:.4} n={}",
            f.alpha, f.c, f.r2, f.se_alpha, f.n
        ),
        None => println!("{label}: not available"),
    }
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), Failure> {
    let cfg_err = |e: ConfigError| Failure::Config(e.to_string());
    let run_err = |e: harness::RunError| Failure::Run(e.to_string());
    let config = || load_config(cli.config.as_deref(), &overrides).map_err(cfg_err);
    match &cli.command {
        Command::Train => {
            let cfg = config()?;
            for &seed in &cfg.seeds {
                let dir = harness::run_dir(&cfg, seed);
                let r = harness::train_run(&cfg, seed, &dir).map_err(run_err)?;
                println!(
                    "{}: grok={:?} onset={:?} lead={:?} flags={:?} ({:.0}s)",
                    r.run_id,
                    r.grok_step,
                    r.onset_step,
                    r.lead.map(|l| l.fraction),
                    r.flags,
                    r.wall_clock_s
                );
            }
        }
        Command::Sweep { lrs, jobs } => {
            let cfg = config()?;
            let res = harness::sweep(&cfg, lrs, &cfg.seeds, &cfg.output_dir, *jobs);
            harness::write_report(&res.report, &cfg.output_dir).map_err(run_err)?;
            for (lr, seed, r) in &res.runs {
                match r {
                    Ok(rec) => println!("lr={lr:e} seed={seed}: grok={:?} onset={:?}", rec.grok_step, rec.onset_step),
                    Err(e) => println!("lr={lr:e} seed={seed}: failed: {e}"),
                }
            }
            print_fit("per-run fit", res.report.fit.as_ref());
            print_fit("lr-mean fit", res.report.mean_fit.as_ref());
            if res.runs.iter().any(|r| r.2.is_err()) {
                return Err(Failure::Run("some runs failed".into()));
            }
        }
        Command::Analyze { run, n_null, n_rand, k } => {
            let opts = analysis::AnalysisOptions { n_null: *n_null, n_rand: *n_rand, k: *k };
            let a = analysis::analyze_run(run, &opts).map_err(|e| match e {
                analysis::AnalysisError::Run(r) => Failure::Run(r.to_string()),
                other => Failure::Analysis(other.to_string()),
            })?;
            analysis::write_analysis(&a, run).map_err(run_err)?;
            println!(
                "attention PC1 {:.1}%  mlp PC1 {:.1}%  max attention null z {:.2}",
                a.split.attention_mean.unwrap_or(f64::NAN),
                a.split.mlp_mean.unwrap_or(f64::NAN),
                a.max_attention_z().unwrap_or(f64::NAN)
            );
            for c in &a.integrability.cells {
                if let Some(r) = c.mean_ratio {
                    println!("{:>13} {:>12} ratio {:.3} (n={})", c.phase.as_str(), c.kind.as_str(), r, c.n);
                }
            }
        }
        Command::Fit { runs, fixture, method } => {
            let rows = match fixture {
                Some(Fixture::Scan) => fixtures::rows(fixtures::SCAN_RUNS),
                Some(Fixture::Dyck) => fixtures::rows(fixtures::DYCK_RUNS),
                Some(Fixture::ScanMeans) => fixtures::mean_rows(fixtures::SCAN_LR_MEANS),
                Some(Fixture::DyckMeans) => fixtures::mean_rows(fixtures::DYCK_LR_MEANS),
                None => {
                    if runs.is_empty() {
                        return Err(Failure::Config("give run directories or --fixture".into()));
                    }
                    let mut rows = Vec::new();
                    for d in runs {
                        rows.push(RunRecord::load(d).map_err(run_err)?.row());
                    }
                    rows
                }
            };
            let method = match method {
                Method::LogOls => FitMethod::LogOls,
                Method::Nonlinear => FitMethod::Nonlinear,
            };
            for r in &rows {
                let lead = r.lead();
                println!(
                    "lr={:e} seed={} grok={:?} onset={:?} lead={:?} fraction={}",
                    r.lr,
                    r.seed,
                    r.grok_step,
                    r.onset_step,
                    lead.map(|l| l.dt),
                    lead.map(|l| format!("{:.1}%", 100.0 * l.fraction)).unwrap_or_default()
                );
            }
            let points: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.fit_point()).collect();
            let fit = detect::fit_power_law_with(&points, method);
            match fit {
                Ok(f) => print_fit("fit", Some(&f)),
                Err(e) => return Err(Failure::Analysis(e.to_string())),
            }
        }
        Command::Intervene { grid, jobs } => {
            let cfg = config()?;
            let specs = parse_grid(grid, &cfg.intervention).map_err(cfg_err)?;
            let rows = interventions::dose_response(&cfg, &specs, &cfg.seeds, &cfg.output_dir, *jobs);
            export::write_dose_rows(&rows, &cfg.output_dir.join("dose_response.csv")).map_err(run_err)?;
            for r in &rows {
                println!("{} {} seed={}: grok={:?} {:?}", r.condition, r.strength, r.seed, r.grok_step, r.flags);
            }
            if rows.iter().any(|r| r.flags.iter().any(|f| f.starts_with("failed"))) {
                return Err(Failure::Run("some cells failed".into()));
            }
        }
        Command::Export { runs, out } => {
            let mut records = Vec::new();
            for d in runs {
                let r = RunRecord::load(d).map_err(run_err)?;
                export::export_run(&r, out).map_err(run_err)?;
                records.push(r);
            }
            let report = harness::fit_rows(records.iter().map(RunRecord::row).collect());
            export::export_scaling(&report, out, "runs").map_err(run_err)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (rest, overrides) = match take_overrides(args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Config(m) | Failure::Run(m) | Failure::Analysis(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
