//! `clb`: run experiments, score boards, build reports, dump streams.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clbench::harness::{
    exit_code, gen_stream, read_record, report, run_experiment, score_fixture, score_records,
    write_records, write_scoreboard, ExperimentSpec, StreamShape, SEED_ENV,
};
use clbench::streamgen::{Protocol, WorldConfig};
use clbench::{Error, Result};

#[derive(Parser)]
#[command(name = "clb", version, about = "Continual-learning benchmark engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment spec and write one JSON record per run.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Use the small world and stream preset.
        #[arg(long)]
        desk: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Record directory; defaults to the spec's output_dir, then `records`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score run records (one track) or a published-table fixture.
    Score {
        #[arg(long)]
        fixture: Option<PathBuf>,
        records: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write CSV series (accuracy, loss, memory, alignment, paired deltas).
    Report {
        records: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Generate a stream and write it in the CLB1 container format.
    GenStream {
        #[arg(long)]
        protocol: Protocol,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        desk: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn cmd_run(spec: &Path, desk: bool, jobs: usize, out: Option<PathBuf>) -> Result<ExitCode> {
    let mut spec = ExperimentSpec::load(spec)?;
    if desk {
        spec = spec.desk();
    }
    spec = spec.with_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
    let dir = out
        .or_else(|| spec.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("records"));
    if spec.output_dir.is_none() {
        spec.output_dir = Some(dir.clone());
    }
    let records = run_experiment(&spec, jobs)?;
    for (r, path) in records.iter().zip(write_records(&dir, &records)?) {
        println!(
            "{} {} seed {}: test_acc {:.4}{} -> {}",
            r.label(),
            r.track,
            r.seed,
            r.metrics.test_acc,
            if r.over_budget { " (over budget)" } else { "" },
            path.display()
        );
    }
    if records.iter().any(|r| r.over_budget) {
        eprintln!("clb: at least one run hit its budget");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_score(fixture: Option<PathBuf>, records: &[PathBuf], out: &Path) -> Result<()> {
    let (board, stem) = match fixture {
        Some(path) => {
            if !records.is_empty() {
                return Err(Error::Config("give either --fixture or records, not both".into()));
            }
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("fixture")
                .to_string();
            (score_fixture(&path)?, format!("scoreboard-{stem}"))
        }
        None => {
            let recs = records
                .iter()
                .map(|p| read_record(p))
                .collect::<Result<Vec<_>>>()?;
            (score_records(&recs)?, "scoreboard".to_string())
        }
    };
    for row in &board.rows {
        match row.published {
            Some(p) => println!("{:>2} {:<16} {:.4} (published {p:.3})", row.rank, row.name, row.score),
            None => println!("{:>2} {:<16} {:.4}", row.rank, row.name, row.score),
        }
    }
    if let Some(d) = board.max_published_deviation() {
        println!("max |computed - published| = {d:.4}");
    }
    let (json, csv) = write_scoreboard(&board, out, &stem)?;
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn cmd_report(records: &[PathBuf], out: &Path) -> Result<()> {
    let recs = records
        .iter()
        .map(|p| read_record(p))
        .collect::<Result<Vec<_>>>()?;
    let rep = report(&recs);
    std::fs::create_dir_all(out)?;
    for (name, body) in [
        ("series.csv", &rep.series),
        ("alignment.csv", &rep.alignment),
        ("paired.csv", &rep.paired),
    ] {
        let path = out.join(name);
        std::fs::write(&path, body)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gen_stream(protocol: Protocol, out: &Path, desk: bool, seed: u64) -> Result<()> {
    let (world, shape) = if desk {
        (WorldConfig::desk(), StreamShape::desk())
    } else {
        (WorldConfig::default(), StreamShape::default())
    };
    let bytes = gen_stream(protocol, &world.with_seed(seed), &shape)?;
    std::fs::write(out, &bytes)?;
    println!("wrote {} ({} bytes)", out.display(), bytes.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            spec,
            desk,
            jobs,
            out,
        } => cmd_run(&spec, desk, jobs, out),
        Command::Score {
            fixture,
            records,
            out,
        } => cmd_score(fixture, &records, &out).map(|()| ExitCode::SUCCESS),
        Command::Report { records, out } => {
            cmd_report(&records, &out).map(|()| ExitCode::SUCCESS)
        }
        Command::GenStream {
            protocol,
            out,
            desk,
            seed,
        } => cmd_gen_stream(protocol, &out, desk, seed).map(|()| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("clb: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
