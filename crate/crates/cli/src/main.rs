//! `momglm`: estimate, simulate, selftest.

mod runconfig;
mod sigma;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use momglm::estimators::{
    estimate_ce, estimate_gcm, estimate_glm, estimate_glm_unknown_sigma, estimate_linear_unknown_sigma, estimate_mar,
    EstimateReport,
};
use momglm::moment_systems::SolveOptions;
use momglm::selftest::run_selftest;
use momglm::simlab::{run_experiment, SimResult};
use momglm::{Dataset, DesignModel, Error, LinkSpec, Result};

use runconfig::RunConfig;
use sigma::read_sigma_csv;

const EXIT_SELFTEST: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_SOLVER: u8 = 3;

#[derive(Parser)]
#[command(name = "momglm", version, about = "Method-of-moments estimation for high-dimensional GLMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate from a CSV with columns x1..xp, y and optionally a.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = [
            "glm", "glm0", "ce", "mar", "gcm", "linear-unknown-sigma", "glm-unknown-sigma",
        ])]
        estimand: String,
        /// Outcome link (for ce and mar: the treatment link unless --link-a is set).
        #[arg(long)]
        link: Option<String>,
        /// Treatment or missingness link; defaults to --link.
        #[arg(long)]
        link_a: Option<String>,
        /// Covariance CSV, or `identity` (the default).
        #[arg(long)]
        sigma: Option<String>,
        /// 1-based coordinates of beta to estimate.
        #[arg(long, value_delimiter = ',')]
        coords: Vec<usize>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a simulation campaign described by a TOML file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the built-in numerical checks.
    Selftest {
        /// Skip the Monte-Carlo identity suite.
        #[arg(long)]
        quick: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Estimate {
            data,
            estimand,
            link,
            link_a,
            sigma,
            coords,
            out,
        } => cmd_estimate(&data, &estimand, link.as_deref(), link_a.as_deref(), sigma.as_deref(), &coords, out.as_deref()),
        Command::Simulate { config, threads } => cmd_simulate(&config, threads),
        Command::Selftest { quick } => return cmd_selftest(quick),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::from(if e.is_solver_failure() { EXIT_SOLVER } else { EXIT_VALIDATION })
        }
    }
}

fn resolve_link(name: Option<&str>, what: &str) -> Result<LinkSpec> {
    let name = name.ok_or_else(|| Error::InvalidOption(format!("--{what} is required for this estimand")))?;
    LinkSpec::from_name(name)
}

fn load_design(sigma: Option<&str>, p: usize, mu_known_zero: bool) -> Result<DesignModel> {
    match sigma {
        None | Some("identity") => Ok(DesignModel::identity(p, mu_known_zero)),
        Some(path) => DesignModel::known(read_sigma_csv(Path::new(path), Some(p))?, mu_known_zero),
    }
}

fn cmd_estimate(
    data: &Path,
    estimand: &str,
    link: Option<&str>,
    link_a: Option<&str>,
    sigma: Option<&str>,
    coords: &[usize],
    out: Option<&Path>,
) -> Result<()> {
    let ds = Dataset::from_csv_path(data)?;
    let opts = SolveOptions::default();
    let unknown = matches!(estimand, "linear-unknown-sigma" | "glm-unknown-sigma");
    if unknown && sigma.is_some() {
        return Err(Error::InvalidOption(format!("--sigma does not apply to {estimand}")));
    }
    let design = || load_design(sigma, ds.p(), estimand == "glm0");
    let treatment = || resolve_link(link_a.or(link), "link-a");
    if !coords.is_empty() && !matches!(estimand, "glm" | "glm0" | "linear-unknown-sigma" | "glm-unknown-sigma") {
        return Err(Error::InvalidOption(format!("--coords does not apply to {estimand}")));
    }
    let report = match estimand {
        "glm" | "glm0" => estimate_glm(&ds, &design()?, &resolve_link(link, "link")?, coords, &opts)?,
        "glm-unknown-sigma" => estimate_glm_unknown_sigma(&ds, &resolve_link(link, "link")?, coords, &opts)?,
        "linear-unknown-sigma" => estimate_linear_unknown_sigma(&ds, coords)?,
        "ce" => estimate_ce(&ds, &design()?, &treatment()?, &opts)?,
        "mar" => estimate_mar(&ds, &design()?, &treatment()?, &opts)?,
        "gcm" => estimate_gcm(&ds, &design()?, &treatment()?, &resolve_link(link, "link")?, &opts)?,
        other => return Err(Error::InvalidOption(format!("unknown estimand `{other}`"))),
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    match out {
        Some(path) => {
            let f = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            write_report(&report, f)
        }
        None => write_report(&report, std::io::stdout().lock()),
    }
}

fn write_report<W: Write>(report: &EstimateReport, w: W) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["key", "value"]).map_err(io)?;
    for (k, v) in report.key_values() {
        wtr.write_record([k, v]).map_err(io)?;
    }
    wtr.flush().map_err(|e| Error::Io(e.to_string()))
}

fn cmd_simulate(config: &Path, threads: Option<usize>) -> Result<()> {
    let rc = RunConfig::from_path(config)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(k) = threads {
        if k == 0 {
            return Err(Error::InvalidOption("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(k);
    }
    let pool = pool.build().map_err(|e| Error::Io(e.to_string()))?;
    let result = pool.install(|| run_experiment(&rc.sim))?;
    let files = result.write_all(&rc.output_dir)?;
    print_summary(&result);
    println!("wrote {} files to {}", files.len(), rc.output_dir.display());
    Ok(())
}

fn print_summary(result: &SimResult) {
    println!(
        "{:>7}  {:<28} {:>11} {:>11} {:>11} {:>8} {:>6}",
        "n", "parameter", "sqrtn_bias", "variance", "mse", "qq_corr", "failed"
    );
    for s in &result.summaries {
        let qq = s.qq_correlation.map_or("-".to_string(), |q| format!("{q:.4}"));
        println!(
            "{:>7}  {:<28} {:>11.4e} {:>11.4e} {:>11.4e} {:>8} {:>6}",
            s.n, s.parameter, s.sqrtn_bias, s.variance, s.mse, qq, s.n_failures
        );
    }
}

fn cmd_selftest(quick: bool) -> ExitCode {
    let report = run_selftest(quick);
    for c in &report.checks {
        let tag = match (c.informational, c.passed) {
            (true, _) => "info",
            (false, true) => "ok",
            (false, false) => "FAIL",
        };
        println!("[{tag:>4}] {}: {}", c.name, c.detail);
    }
    let failed = report.failures();
    if failed.is_empty() {
        println!("selftest passed ({} checks)", report.checks.len());
        ExitCode::SUCCESS
    } else {
        eprintln!("selftest failed:");
        for c in failed {
            eprintln!("  {}", c.name);
        }
        ExitCode::from(EXIT_SELFTEST)
    }
}
