use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mstmax::config::{Config, ModeChoice};
use mstmax::studies::{cell_study, run_convergence, run_corrector_study, run_reference, Outcome, StudyError};

#[derive(Clone, Copy)]
enum Command {
    Cell,
    Convergence,
    Corrector,
    Reference,
}

#[derive(Parser)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(ValueEnum, Clone, Copy)]
enum ModeArg {
    Full,
    Sparse,
    Both,
}

impl From<ModeArg> for ModeChoice {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => ModeChoice::Full,
            ModeArg::Sparse => ModeChoice::Sparse,
            ModeArg::Both => ModeChoice::Both,
        }
    }
}

#[derive(Parser)]
#[command(name = "mstmax", version, about = "Two-scale Maxwell wave solver on full and sparse tensor spaces")]
struct Full {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Check homogenized coefficients from cell problems
    Cell(Args),
    /// Convergence study against the exact solution
    Convergence(Args),
    /// Numerical corrector against fine-scale references
    Corrector(Args),
    /// Fine-scale reference run
    Reference(Args),
}

fn write_out(path: &Path, text: &str) -> Result<(), StudyError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run(sub: Sub) -> Result<Outcome, StudyError> {
    let (args, kind) = match sub {
        Sub::Cell(a) => (a, Command::Cell),
        Sub::Convergence(a) => (a, Command::Convergence),
        Sub::Corrector(a) => (a, Command::Corrector),
        Sub::Reference(a) => (a, Command::Reference),
    };
    let cfg = Config::load(&args.config)?;
    let mode = args.mode.map(ModeChoice::from);
    let out = match kind {
        Command::Cell => cell_study(&cfg)?.0,
        Command::Convergence => run_convergence(&cfg, mode)?.0,
        Command::Corrector => run_corrector_study(&cfg, mode)?.0,
        Command::Reference => run_reference(&cfg)?.0,
    };
    match args.out.or(cfg.out.clone()) {
        Some(p) => write_out(&p, &out.csv)?,
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(out.csv.as_bytes())?;
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Full::parse();
    let mut err = std::io::stderr().lock();
    match run(cli.command) {
        Ok(out) => {
            for l in &out.summary {
                let _ = writeln!(err, "{l}");
            }
            if out.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                for f in &out.failures {
                    let _ = writeln!(err, "FAIL: {f}");
                }
                ExitCode::from(2)
            }
        }
        Err(e) => {
            let _ = writeln!(err, "mstmax: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
