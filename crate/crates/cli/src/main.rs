use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diqc_cli::commands::{
    certificate_json, certify, default_cert_path, read_certificate, sweep, sweep_csv, sweep_is_monotone, validate, write_atomic, CertifyOutcome, CliError,
    Overrides, TOL_ENV,
};
use diqc_cli::model::Model;
use diqc_core::conic::SdpOptions;

const EXIT_FAIL: u8 = 2;

#[derive(Parser)]
#[command(name = "diqc", version, about = "Certify incremental L2-gain bounds of uncertain polynomial systems")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Polynomial degree of the storage metric P
    #[arg(long)]
    p_degree: Option<u32>,
    /// Degree of the S-procedure multipliers
    #[arg(long)]
    mult_degree: Option<u32>,
    /// Seed for sampling checks
    #[arg(long)]
    seed: Option<u64>,
    /// Conic solver tolerance (default from DIQC_SOLVER_TOL, else 1e-8)
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Minimize the gain bound and write a certificate
    Certify {
        model: PathBuf,
        /// Delay bound, overriding the model
        #[arg(long)]
        theta: Option<f64>,
        /// Certificate path (default: <model>.cert.json)
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Certify over a list of delay bounds and print a CSV table
    Sweep {
        model: PathBuf,
        /// Comma-separated delay bounds (default: the model's [sweep] thetas)
        #[arg(long, value_delimiter = ',')]
        theta: Vec<f64>,
        /// Also write the CSV to this path
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent rows
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Re-check a certificate and run the simulation battery
    Validate {
        model: PathBuf,
        cert: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in example battery
    Selftest {
        #[arg(long)]
        tol: Option<f64>,
    },
}

fn overrides(c: &Common, theta: Option<f64>) -> Overrides {
    Overrides { theta, p_degree: c.p_degree, mult_degree: c.mult_degree, seed: c.seed, tol: c.tol }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.cmd {
        Cmd::Certify { model, theta, out, common } => {
            let m = Model::load(&model)?;
            match certify(&m, &overrides(&common, theta))? {
                CertifyOutcome::Certified(cert) => {
                    let path = out.unwrap_or_else(|| default_cert_path(&model));
                    write_atomic(&path, certificate_json(&cert).as_bytes())?;
                    println!("alpha = {:.6}", cert.alpha);
                    println!("gamma = {:.6e}", cert.gamma);
                    println!("lambda = {:?}", cert.lambda);
                    let s = &cert.solver;
                    println!(
                        "solver: {} after {} iterations, gap {:.2e}, residuals {:.2e}/{:.2e}{}",
                        s.status,
                        s.iterations,
                        s.gap,
                        s.primal_residual,
                        s.dual_residual,
                        if s.ptilde_resolve { ", re-solved for storage positivity" } else { "" }
                    );
                    println!("certificate: {}", path.display());
                    Ok(0)
                }
                CertifyOutcome::Infeasible { status, diagnostics } => {
                    println!("not certified: {status}");
                    println!("{diagnostics}");
                    Ok(EXIT_FAIL)
                }
            }
        }
        Cmd::Sweep { model, theta, out, jobs, common } => {
            let m = Model::load(&model)?;
            let thetas = if theta.is_empty() { m.sweep.clone() } else { theta };
            let rows = sweep(&m, &thetas, &overrides(&common, None), jobs)?;
            let csv = sweep_csv(&rows);
            print!("{csv}");
            if let Some(path) = out {
                write_atomic(&path, csv.as_bytes())?;
            }
            let monotone = sweep_is_monotone(&rows);
            eprintln!("alpha nondecreasing in theta: {}", if monotone { "yes" } else { "NO" });
            if rows.iter().any(|r| r.status.starts_with("error")) {
                Ok(1)
            } else if rows.iter().any(|r| r.alpha.is_none()) {
                Ok(EXIT_FAIL)
            } else {
                Ok(0)
            }
        }
        Cmd::Validate { model, cert, common } => {
            let m = Model::load(&model)?;
            let c = read_certificate(&cert)?;
            let checks = validate(&m, &c, &overrides(&common, None))?;
            for ch in &checks {
                println!("{}", ch.line());
            }
            Ok(if checks.iter().all(|c| c.pass) { 0 } else { EXIT_FAIL })
        }
        Cmd::Selftest { tol } => {
            let mut opts = SdpOptions::default();
            let t = match tol {
                Some(t) => Some(t),
                None => std::env::var(TOL_ENV).ok().map(|s| s.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("{TOL_ENV} is not a number: {s}")))).transpose()?,
            };
            if let Some(t) = t {
                opts.tol = t;
            }
            let checks = diqc_cli::selftest::run(&opts);
            for ch in &checks {
                println!("{}", ch.line());
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            println!("{} checks, {} failed", checks.len(), failed);
            Ok(if failed == 0 { 0 } else { EXIT_FAIL })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
