use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kinetic_gpc::gpc_basis::PolynomialFamily;
use kinetic_gpc::harness::{self, Config};
use kinetic_gpc::{Error, Result};

#[derive(Parser)]
#[command(name = "kinetic-gpc", version, about = "Stochastic Galerkin kinetic solver harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run scenarios one at a time.
    #[arg(long)]
    serial: bool,
    /// Exit with status 1 when an empirical check fails instead of warning.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Single run: diagnostics CSV and final-state JSON.
    Run(Common),
    /// SG error against collocation over a (K, eps) grid.
    Sweep(Common),
    /// Local-equilibrium defect against eps.
    Scaling(Common),
    /// Distance to the Galerkin diffusion limit against eps.
    Limit(Common),
    /// Sup-in-time z-derivative norms against eps.
    Regularity(Common),
    /// Gram matrix, nodes and weights of a gPC basis as CSV.
    Basis {
        #[arg(long, default_value = "legendre")]
        family: String,
        #[arg(long, default_value_t = 8)]
        k: usize,
    },
    /// Invariant suite; a config adds its kernel (with declared bounds) to the checks.
    Selftest {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn scenario_id(cfg: &Config, path: &Path) -> String {
    cfg.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".into())
    })
}

fn prepare(common: &Common) -> Result<(Config, String)> {
    let cfg = Config::load(&common.config)?;
    std::fs::create_dir_all(&common.out)?;
    let id = scenario_id(&cfg, &common.config);
    Ok((cfg, id))
}

/// Prints warnings; returns the exit status for a study with the given outcome.
fn finish(passed: bool, warnings: &[String], strict: bool) -> ExitCode {
    for w in warnings {
        eprintln!("warning: {w}");
    }
    if passed || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run(c) => {
            let (cfg, id) = prepare(&c)?;
            let out = harness::cmd_run(&cfg)?;
            harness::write_csv(&c.out.join("diagnostics.csv"), &harness::diagnostics_records(&id, &cfg, &out))?;
            harness::write_json(&c.out.join("final_state.json"), &harness::final_state_dump(&id, cfg.scheme, &out))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep(c) => {
            let (cfg, id) = prepare(&c)?;
            let eps = cfg.eps_list_or(&harness::SWEEP_EPS);
            let rep = harness::sweep(&id, &cfg.scenario()?, &cfg.k_list(), &eps, cfg.q_ref(), !c.serial)?;
            harness::write_csv(&c.out.join("sweep.csv"), &rep.rows)?;
            harness::write_json(&c.out.join("sweep_summary.json"), &rep)?;
            Ok(finish(rep.passed(), &rep.warnings, c.strict))
        }
        Command::Scaling(c) => {
            let (cfg, id) = prepare(&c)?;
            let eps = cfg.eps_list_or(&harness::SCALING_EPS);
            let rep = harness::scaling(&id, &cfg.scenario()?, cfg.scheme, &eps, !c.serial)?;
            harness::write_csv(&c.out.join("scaling.csv"), &rep.rows)?;
            harness::write_json(&c.out.join("scaling.json"), &rep)?;
            println!("slope {:.6}", rep.slope);
            Ok(finish(rep.passed(), &rep.warnings, c.strict))
        }
        Command::Limit(c) => {
            let (cfg, id) = prepare(&c)?;
            let eps = cfg.eps_list_or(&harness::LIMIT_EPS);
            let rep = harness::limit(&id, &cfg.scenario()?, &eps, !c.serial)?;
            harness::write_csv(&c.out.join("limit.csv"), &rep.rows)?;
            harness::write_json(&c.out.join("limit.json"), &rep)?;
            println!("D exact: {:?}", rep.d_exact);
            println!("D frequency formula: {:?}", rep.d_frequency);
            println!("relative Frobenius gap: {:e}", rep.d_gap);
            Ok(finish(rep.passed(), &rep.warnings, c.strict))
        }
        Command::Regularity(c) => {
            let (cfg, id) = prepare(&c)?;
            let eps = cfg.eps_list_or(&harness::REGULARITY_EPS);
            let rep = harness::regularity(&id, &cfg.scenario()?, &eps, cfg.k_max(), !c.serial)?;
            harness::write_csv(&c.out.join("regularity.csv"), &rep.rows)?;
            Ok(finish(rep.passed(), &rep.warnings, c.strict))
        }
        Command::Basis { family, k } => {
            let family = PolynomialFamily::from_name(&family)?;
            let table = harness::basis_table(family, k)?;
            harness::write_basis_csv(&table, std::io::stdout().lock())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest { config } => {
            let extra = match config {
                Some(p) => vec![Config::load(&p)?.kernel.to_spec()?],
                None => Vec::new(),
            };
            let checks = harness::selftest(&extra);
            print!("{}", harness::format_checks(&checks));
            if checks.iter().all(|c| c.passed) {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("KINETIC_GPC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
    {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
