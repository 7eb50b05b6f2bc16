use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hetloop_cli::config::{self, RunConfig, Stage};
use hetloop_cli::pipeline::{self, Status};

#[derive(Parser)]
#[command(name = "hetloop", version, about = "Periodic waves near a FitzHugh-Nagumo heteroclinic loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ignore cached artifacts.
    #[arg(long)]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Locate the heteroclinic loop.
    Loop(Common),
    /// Periodic orbits bifurcating from the loop.
    Periodic(Common),
    /// Adjoint solutions and Melnikov integrals.
    Melnikov(Common),
    /// Reduced two-by-two determinant and its critical curve.
    Reduce(Common),
    /// Bloch spectra of the periodic waves.
    Sweep(Common),
    /// Nonlinear PDE experiment.
    Evolve(Common),
    /// Consolidated report over the artifacts present.
    Report(Common),
    /// The configured stage list, or a single stage with `--stage`.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_stage)]
        stage: Option<Stage>,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
        format!("unknown stage {s:?}; expected one of {}", names.join(", "))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, stages) = match cli.command {
        Command::Loop(c) => (c, Some(vec![Stage::Loop])),
        Command::Periodic(c) => (c, Some(vec![Stage::Periodic])),
        Command::Melnikov(c) => (c, Some(vec![Stage::Melnikov])),
        Command::Reduce(c) => (c, Some(vec![Stage::Reduce])),
        Command::Sweep(c) => (c, Some(vec![Stage::Sweep])),
        Command::Evolve(c) => (c, Some(vec![Stage::Evolve])),
        Command::Report(c) => (c, Some(vec![Stage::Report])),
        Command::Run { common, stage } => (common, stage.map(|s| vec![s])),
    };
    let cfg = match &common.config {
        Some(p) => match config::parse_config(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => RunConfig::default(),
    };
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let stages = stages.unwrap_or_else(|| cfg.stages.clone());
    let out = pipeline::resolve_out(&cfg, common.out.as_deref());
    let outcome = match pipeline::run_pipeline(&cfg, &out, &stages, common.force) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    for r in &outcome.records {
        let status = match r.status {
            Status::Completed => "done",
            Status::Cached => "cached",
            Status::Failed => "FAILED",
            Status::Skipped => "skipped",
        };
        let failed: Vec<&str> = r.gates.iter().filter(|g| !g.pass).map(|g| g.name.as_str()).collect();
        println!(
            "{:<9} {:<7} {:>8.2}s  gates {}/{}",
            r.stage.name(),
            status,
            r.wall_time_s,
            r.gates.len() - failed.len(),
            r.gates.len()
        );
        if let Some(m) = &r.message {
            println!("          {m}");
        }
        for g in failed {
            println!("          gate failed: {g}");
        }
    }
    println!("artifacts in {}", out.display());
    ExitCode::from(outcome.exit_code() as u8)
}
