use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use latentdr::latentdr::dump::LatentDump;
use latentdr::metrics::dump_metrics;
use latentdr_harness::grid::{batch_size_sweep, run_ablation_grid, GRID_SEEDS, SWEEP_BATCH_SIZES};
use latentdr_harness::report::{write_csv, write_json};
use latentdr_harness::{run_with_model, ExperimentConfig, HarnessError, Result};

#[derive(Parser)]
#[command(name = "latentdr", version, about = "Latent degradation/restoration experiments")]
struct Cli {
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; the report goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation grid over kinds, variants, seeds and held-out domains.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Per-domain batch sizes 4, 8, 16, 32, 64 and 100.
    SweepBatch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Alignment and uniformity of a latent dump.
    Metrics {
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::read(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load(&config, cli.seed)?;
            let outcome = run_with_model(&cfg, out.as_deref())?;
            let report = outcome.report;
            match (out, cli.format) {
                (Some(dir), Format::Json) => write_json(&report, &dir.join("report.json"))?,
                (Some(dir), Format::Csv) => write_csv(&[report], &dir.join("report.csv"))?,
                (None, Format::Json) => println!("{}", report.to_json()?),
                (None, Format::Csv) => print!("{}", latentdr_harness::report::csv_text(&[report])?),
            }
        }
        Command::Grid { config, out, workers } => {
            let mut cfg = load(&config, cli.seed)?;
            if cli.seed.is_some() {
                eprintln!("note: the grid always runs seeds {GRID_SEEDS:?}; --seed is ignored");
                cfg.seed = 0;
            }
            create_dir(&out)?;
            let grid = run_ablation_grid(&cfg, workers)?;
            write_csv(&grid.reports, &out.join("runs.csv"))?;
            if cli.format == Format::Json {
                write_json(&grid, &out.join("grid.json"))?;
            }
            print!("{}", grid.summary.table());
        }
        Command::SweepBatch { config, out, workers } => {
            let cfg = load(&config, cli.seed)?;
            create_dir(&out)?;
            let seeds: Vec<u64> = match cli.seed {
                Some(s) => vec![s],
                None => GRID_SEEDS.to_vec(),
            };
            let sweep = batch_size_sweep(&cfg, &SWEEP_BATCH_SIZES, &seeds, workers)?;
            write_csv(&sweep.reports, &out.join("runs.csv"))?;
            if cli.format == Format::Json {
                write_json(&sweep, &out.join("sweep.json"))?;
            }
            for p in &sweep.points {
                println!("B={:<4} test_acc={:.4}±{:.4}", p.batch_size, p.test_acc.mean, p.test_acc.sd);
            }
        }
        Command::Metrics { latents, out } => {
            let dump = LatentDump::read(&latents)?;
            let m = dump_metrics(&dump);
            let text = match cli.format {
                Format::Json => {
                    let rows: Vec<serde_json::Value> = m
                        .rows
                        .iter()
                        .map(|(name, a, u)| serde_json::json!({ "tensor": name, "alignment": a, "uniformity": u }))
                        .collect();
                    latentdr_harness::report::to_json(&rows)? + "\n"
                }
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    w.write_record(["tensor", "alignment", "uniformity"])?;
                    for (name, a, u) in &m.rows {
                        let f = |v: &Option<f64>| v.map(latentdr::textio::fmt_f64).unwrap_or_default();
                        w.write_record([name.to_string(), f(a), f(u)])?;
                    }
                    String::from_utf8(w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))?)
                        .expect("csv writes UTF-8")
                }
            };
            std::fs::write(&out, text).map_err(|e| HarnessError::io(&out, e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
