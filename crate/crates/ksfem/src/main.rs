use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ksfem::{parse_config, run, CliError};
use ksfem_core::adapt::SolverMode;

#[derive(Parser)]
#[command(name = "ksfem", version, about = "Adaptive finite element Kohn-Sham LDA solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the adaptive pipeline for one configuration file.
    Run {
        config: PathBuf,
        /// direct, augmented or uniform.
        #[arg(long, env = "KSFEM_MODE")]
        mode: Option<SolverMode>,
        /// Index of the last adaptive level.
        #[arg(long, env = "KSFEM_LEVELS")]
        levels: Option<usize>,
        /// Worker threads for assembly and solvers.
        #[arg(long, env = "KSFEM_WORKERS")]
        workers: Option<usize>,
        #[arg(long, env = "KSFEM_SEED")]
        seed: Option<u64>,
        /// Output directory; defaults to `out` in the configuration, then
        /// `<config stem>-out`.
        #[arg(long, env = "KSFEM_OUT")]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    let Command::Run {
        config,
        mode,
        levels,
        workers,
        seed,
        out,
    } = command;
    let mut cfg = parse_config(&config)?;
    if let Some(m) = mode {
        cfg.set_mode(m);
    }
    if let Some(k) = levels {
        cfg.set_levels(k);
    }
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    if let Some(w) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Config {
                origin: "--workers".into(),
                line: 0,
                msg: e.to_string(),
            })?;
    }
    let out_dir = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| {
        let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("ksfem");
        PathBuf::from(format!("{stem}-out"))
    });
    let report = run(&cfg, &out_dir)?;
    if let Some(e) = report.final_energy {
        println!(
            "{}: E = {e:.6} hartree after {} levels, outputs in {}",
            cfg.name,
            report.levels.len(),
            out_dir.display()
        );
    }
    Ok(())
}
