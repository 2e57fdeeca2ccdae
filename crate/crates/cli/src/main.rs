//! Command-line front end for the orthoml library.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures
//! (including a failed orthogonality check).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use orthoml::dgp::{
    default_discrete_eta, default_eps, generate_dataset, generate_instance, NoiseDistribution,
};
use orthoml::estimator::{estimate, EstimatorConfig};
use orthoml::harness::{
    run_monte_carlo_with_threads, write_results, ExperimentConfig, OutputFormat, ScalePreset,
};
use orthoml::ortho_check::{
    jacobian_degeneracy_scan, run_orthogonality_suite, write_degeneracy_rows, write_suite_report,
    SuiteConfig,
};
use orthoml::SimRng;

#[derive(Parser, Debug)]
#[command(
    name = "orthoml",
    version,
    about = "Orthogonal two-stage estimation in the partially linear model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

impl From<Preset> for ScalePreset {
    fn from(p: Preset) -> Self {
        match p {
            Preset::Desk => ScalePreset::Desk,
            Preset::Paper => ScalePreset::Paper,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config file (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scale preset used when no config file is given.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Overrides the seed of the config or preset.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::preset(self.preset.into()),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a Monte Carlo experiment and write per-instance results.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output file; defaults to the config's output_path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Worker threads for the replication fan-out.
        #[arg(long, env = "ORTHOML_THREADS")]
        threads: Option<usize>,
    },
    /// Check the orthogonality conditions of every moment at the truth.
    CheckOrthogonality {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Monte Carlo draws per check.
        #[arg(long, default_value_t = 100_000)]
        mc_size: usize,
        /// Number of covariate points.
        #[arg(long, default_value_t = 10)]
        points: usize,
        /// Also require the first-order moment to pass its (0,2,0,0) check,
        /// which it cannot; exercises the failure exit code.
        #[arg(long, hide = true)]
        require_first_order_curvature: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Estimate the theta-Jacobian of the second-order moments for several noise laws.
    DegeneracyScan {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Draw one instance and dataset and print each method's report as JSON.
    SingleEstimate {
        #[command(flatten)]
        common: Common,
        /// Sparsity level; defaults to the largest grid value.
        #[arg(long)]
        s: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a preset experiment config.
    EmitConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            use std::io::Write;
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                other => other.context("writing to stdout"),
            }
        }
    }
}

fn simulate(
    common: &Common,
    out: Option<PathBuf>,
    format: Format,
    threads: Option<usize>,
) -> Result<()> {
    let cfg = common.load()?;
    let out = out.or_else(|| cfg.output_path.clone());
    let Some(out) = out else {
        bail!("no output path: pass --out or set output_path in the config");
    };
    let results = run_monte_carlo_with_threads(&cfg, threads)?;
    write_results(&results, &out, format.into())?;
    println!(
        "{:<18} {:>4} {:>9} {:>9} {:>9} {:>9}",
        "method", "s", "|bias|", "sd", "mse", "cover95"
    );
    for m in &results.summaries {
        println!(
            "{:<18} {:>4} {:>9.4} {:>9.4} {:>9.5} {:>8.1}%",
            m.method,
            m.s,
            m.abs_bias.median,
            m.sd.median,
            m.mse.median,
            100.0 * m.coverage_95
        );
    }
    if results.flagged {
        log::warn!(
            "{} of {} method-reps failed",
            results.failed_reps,
            results.total_reps
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn check_orthogonality(
    seed: u64,
    mc_size: usize,
    points: usize,
    require_first_order_curvature: bool,
    out: Option<PathBuf>,
    format: Format,
) -> Result<()> {
    let cfg = SuiteConfig {
        seed,
        require_first_order_curvature,
        mc_size,
        n_points: points,
        ..SuiteConfig::default()
    };
    let report = run_orthogonality_suite(&cfg)?;
    let mut specs: Vec<&str> = report.rows.iter().map(|r| r.spec.as_str()).collect();
    specs.dedup();
    for spec in specs {
        let rows: Vec<_> = report
            .rows
            .iter()
            .filter(|r| r.spec == spec && r.in_set)
            .collect();
        let passed = rows.iter().filter(|r| r.result.passed()).count();
        let max_z = rows
            .iter()
            .filter(|r| r.result.std_error > 0.0)
            .map(|r| r.result.z_score.abs())
            .fold(0.0, f64::max);
        println!(
            "{spec:<28} {passed:>4}/{:<4} max |z| {max_z:.2}",
            rows.len()
        );
    }
    if let Some(path) = &out {
        write_suite_report(&report, path, format.into())?;
    }
    if !report.passed() {
        bail!("{} orthogonality checks failed", report.failures);
    }
    Ok(())
}

fn degeneracy_scan(seed: u64, n: usize, out: Option<PathBuf>, format: Format) -> Result<()> {
    let variants = vec![
        ("discrete".to_string(), default_discrete_eta()),
        ("gaussian".to_string(), NoiseDistribution::gaussian(1.0)?),
        (
            "uniform".to_string(),
            NoiseDistribution::uniform(3f64.sqrt())?,
        ),
    ];
    let root = SimRng::new(seed);
    let mut rows = jacobian_degeneracy_scan(3, &variants, n, &mut root.split(3))?;
    rows.extend(jacobian_degeneracy_scan(
        2,
        &variants,
        n,
        &mut root.split(2),
    )?);
    println!(
        "{:<10} {:>2} {:>10} {:>10} {:>9} {:>11}",
        "eta", "r", "J_hat", "J_pop", "z", "degenerate"
    );
    for r in &rows {
        println!(
            "{:<10} {:>2} {:>10.4} {:>10.4} {:>9.2} {:>11}",
            r.variant, r.r, r.j_hat, r.population_j, r.z_score, r.degenerate
        );
    }
    if let Some(path) = &out {
        write_degeneracy_rows(&rows, path, format.into())?;
    }
    Ok(())
}

fn single_estimate(common: &Common, s: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let cfg = common.load()?;
    cfg.validate()?;
    let s = s.unwrap_or_else(|| *cfg.sparsity_grid.iter().max().expect("validated grid"));
    let root = SimRng::new(cfg.seed);
    let instance = generate_instance(
        cfg.p,
        s,
        cfg.theta0,
        cfg.coefficient_law,
        cfg.eta.clone(),
        default_eps(cfg.sigma_eps)?,
        &mut root.split(0),
    )?;
    let data = generate_dataset(&instance, cfg.n, &mut root.split(1))?;
    let reports = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(m, method): (usize, &EstimatorConfig)| {
            estimate(
                &data,
                Some(&instance),
                method,
                &mut root.split(2 + m as u64),
            )
        })
        .collect::<orthoml::Result<Vec<_>>>()?;
    emit(&serde_json::to_string_pretty(&reports)?, out.as_deref())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            common,
            out,
            format,
            threads,
        } => simulate(&common, out, format, threads),
        Command::CheckOrthogonality {
            seed,
            mc_size,
            points,
            require_first_order_curvature,
            out,
            format,
        } => check_orthogonality(
            seed,
            mc_size,
            points,
            require_first_order_curvature,
            out,
            format,
        ),
        Command::DegeneracyScan {
            seed,
            n,
            out,
            format,
        } => degeneracy_scan(seed, n, out, format),
        Command::SingleEstimate { common, s, out } => single_estimate(&common, s, out),
        Command::EmitConfig { preset, out } => {
            let cfg = ExperimentConfig::preset(preset.into());
            emit(&serde_json::to_string_pretty(&cfg)?, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
