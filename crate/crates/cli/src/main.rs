use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mshho::harness::{
    self, format_correctors, format_csv, format_expansion, run_convergence_study, run_offline,
    run_online, solve_reference, Study, StudyConfig,
};
use mshho::util::write_atomic;
use mshho::Error;

/// Multiscale hybrid high-order solver for oscillatory diffusion problems.
#[derive(Parser)]
#[command(name = "mshho", version)]
struct Cli {
    /// Study configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for the offline step (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Cache directory for basis sets and operator packs.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Unit-cell correctors and the homogenized tensor.
    Correctors,
    /// Basis functions and local operators of every study cell.
    Offline,
    /// Global solves from a populated cache.
    Online,
    /// Offline, reference and online steps with CSV and plot data.
    Convergence,
    /// Monoscale reference solution.
    Reference,
    /// Energy error of the two-scale expansion against eps.
    DiagnoseExpansion,
}

fn load_config(cli: &Cli) -> mshho::Result<StudyConfig> {
    let mut config = match &cli.config {
        Some(path) => StudyConfig::load(path)?,
        None => StudyConfig::default(),
    };
    if let Some(w) = cli.workers {
        config.run.workers = w;
    }
    if let Some(c) = &cli.cache {
        config.run.cache = c.clone();
    }
    if let Some(o) = &cli.out {
        config.run.out = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn save(out: &Path, name: &str, text: &str) -> mshho::Result<()> {
    let path = out.join(name);
    write_atomic(&path, text.as_bytes())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> mshho::Result<()> {
    let config = load_config(cli)?;
    let out = config.run.out.clone();
    match cli.command {
        Command::Correctors => {
            let report = harness::run_correctors(&config)?;
            let text = format_correctors(&report);
            print!("{text}");
            save(&out, "correctors.txt", &text)?;
        }
        Command::DiagnoseExpansion => {
            let report = harness::run_expansion(&config)?;
            let text = format_expansion(&report);
            print!("{text}");
            save(&out, "expansion.csv", &text)?;
        }
        Command::Offline => {
            let study = Study::new(config)?;
            for note in &study.notes {
                eprintln!("note: {note}");
            }
            let summary = run_offline(&study)?;
            let text = summary.report();
            print!("{text}");
            save(&out, "offline.txt", &text)?;
        }
        Command::Reference => {
            let study = Study::new(config)?;
            let r = solve_reference(&study, &study.f)?;
            let text = format!(
                "level = {}\nk = {}\ntriangles = {}\nenergy_norm = {:e}\nseconds = {:.3}\n",
                r.level,
                r.q,
                study.hierarchy.trimeshes[r.level].num_triangles(),
                r.energy_norm,
                r.seconds
            );
            print!("{text}");
            save(&out, "reference.txt", &text)?;
        }
        Command::Online => {
            let study = Study::new(config)?;
            let missing = harness::missing_entries(&study)?;
            if !missing.is_empty() {
                return Err(Error::CacheMiss { keys: missing });
            }
            let reference = solve_reference(&study, &study.f)?;
            let runs = run_online(&study, &study.f, Some(&reference))?;
            let records: Vec<_> = runs.into_iter().map(|r| r.record).collect();
            let text = format_csv(&records);
            print!("{text}");
            save(&out, "online.csv", &text)?;
        }
        Command::Convergence => {
            let study = Study::new(config)?;
            for note in &study.notes {
                eprintln!("note: {note}");
            }
            let report = run_convergence_study(&study)?;
            eprint!("{}", report.offline.report());
            print!("{}", format_csv(&report.records));
            for check in &report.checks {
                println!("{}", check.line());
            }
            eprintln!(
                "wrote {}, {}, {}",
                report.files.csv.display(),
                report.files.data.display(),
                report.files.script.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() || matches!(e, Error::CacheMiss { .. }) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
