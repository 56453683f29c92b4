use anyhow::Context;
use bsvie_cli::config::{load_config, RunConfig};
use bsvie_cli::presets::{self, PRESETS};
use bsvie_cli::runner::{self, Problem};
use bsvie_cli::study::{convergence_study, parse_ladder};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Solver runs and refinement studies for backward stochastic Volterra integral equations.
#[derive(Parser)]
#[command(name = "bsvie", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline of a configuration and write its reports.
    Solve {
        config: PathBuf,
        /// Output directory; defaults to `output.directory` under $BSVIE_OUTPUT_ROOT.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun a configuration over a refinement ladder and fit observed orders.
    Study {
        config: PathBuf,
        /// `KEY=v1,v2,...` with KEY one of M, T, dx, n_paths, seed, degree, substeps; repeat to zip lists.
        #[arg(long, required = true)]
        ladder: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the preset catalog, or print one preset.
    Presets { name: Option<String> },
    /// Validate a configuration without solving.
    Check { config: PathBuf },
}

fn out_dir(config: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| runner::output_dir(config))
}

fn check(config: &RunConfig) -> anyhow::Result<()> {
    let problem = Problem::new(config)?;
    if config.pde.representation || config.pde.hjb {
        let xg = runner::pde_xgrid(config)?;
        println!("x grid      [{}, {}], {} points", xg.lo(), xg.hi(), xg.len());
    }
    let p = &config.problem;
    println!("f           {}", p.f);
    println!("xi          {}", p.xi);
    println!("sigma       {} (bound {})", p.sigma, p.sigma_max);
    println!("solver      {}", if problem.spec.z_diagonal_in_generator() { "full" } else { "simplified" });
    println!("grids       T = {}, M = J = {}", config.grids.horizon, config.grids.m);
    println!("paths       {} (seed {})", config.mc.n_paths, config.mc.seed);
    println!("config hash {}", runner::config_hash(config));
    Ok(())
}

fn main_inner(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Solve { config, out } => {
            let cfg = load_config(&config)?;
            let dir = out_dir(&cfg, out);
            let outcome = runner::run(&cfg, &dir).with_context(|| format!("writing outputs to {}", dir.display()))?;
            print!("{}", std::fs::read_to_string(dir.join("summary.txt")).unwrap_or_default());
            if let Some(e) = &outcome.error {
                eprintln!("error: {e}");
            }
            Ok(ExitCode::from(outcome.exit_code() as u8))
        }
        Command::Study { config, ladder, out } => {
            let cfg = load_config(&config)?;
            let ladder = parse_ladder(&ladder)?;
            let dir = out_dir(&cfg, out);
            let table = convergence_study(&cfg, &ladder);
            table.write(&dir).with_context(|| format!("writing study to {}", dir.display()))?;
            print!("{}", table.orders_csv());
            Ok(ExitCode::SUCCESS)
        }
        Command::Presets { name: None } => {
            let width = PRESETS.iter().map(|p| p.name.len()).max().unwrap_or(0);
            for p in PRESETS {
                println!("{:<width$}  {}", p.name, p.description);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Presets { name: Some(name) } => {
            let p = presets::find(&name).with_context(|| format!("unknown preset '{name}'"))?;
            print!("{}", p.text.trim_start());
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { config } => {
            check(&load_config(&config)?)?;
            println!("ok");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match main_inner(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
