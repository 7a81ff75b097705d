use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ivm_core::eval::{ate, compare, parse_estimates_csv, sweep, trajectory_from_truth};
use ivm_core::pipeline::{estimates_csv, mixture_trace, run, ModelSelector, PipelineConfig};
use ivm_core::sim::{generate, ScenarioSpec};
use ivm_core::stream::{read_stream, write_stream, Stream};
use ivm_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ivm", version, about = "Robust GNSS/odometry sliding-window estimation with self-tuning error mixtures")]
struct Cli {
    /// Seed for all randomness; overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a measurement stream with ground truth from a scenario file.
    Simulate {
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run one model over a stream and write per-epoch estimates as CSV.
    Run {
        stream: PathBuf,
        #[arg(long, value_parser = parse_model)]
        model: Option<ModelSelector>,
        /// Pipeline configuration (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the per-epoch mixture trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compare an estimates CSV with the ground truth of a stream file.
    Evaluate { estimates: PathBuf, truth: PathBuf },
    /// Run several models over one stream and print a comparison table.
    Sweep {
        stream: PathBuf,
        /// Comma-separated model list.
        #[arg(long, value_delimiter = ',', value_parser = parse_model, default_value = "gaussian,dcs,cdce,sm_em,sm_vbi,sm_em_cl,ivm")]
        models: Vec<ModelSelector>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Concurrent pipelines.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Column label for this stream.
        #[arg(long)]
        dataset: Option<String>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_model(s: &str) -> std::result::Result<ModelSelector, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_stream(path: &Path) -> Result<Stream> {
    let file =
        fs::File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_stream(BufReader::new(file))
}

fn load_config(path: Option<&Path>, model: Option<ModelSelector>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::from_toml(&read_text(p)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = model {
        cfg.model = m;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { spec, output } => {
            let mut spec = ScenarioSpec::from_toml(&read_text(&spec)?)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let (measurements, truth) = generate(&spec)?;
            let stream = Stream::from_ground_truth(measurements, &truth);
            let file = fs::File::create(&output)?;
            write_stream(std::io::BufWriter::new(file), &stream)?;
            println!("wrote {} measurements and {} truth epochs to {}", stream.measurements.len(), stream.truth.len(), output.display());
        }
        Command::Run { stream, model, config, output, trace } => {
            let cfg = load_config(config.as_deref(), model)?;
            let stream = load_stream(&stream)?;
            let results = run(&stream.measurements, &cfg)?;
            fs::write(&output, estimates_csv(&results))?;
            if let Some(t) = trace {
                fs::write(t, mixture_trace(&results))?;
            }
            let total: f64 = results.iter().map(|r| r.runtime).sum();
            println!("{}: {} epochs in {total:.3} s", cfg.model, results.len());
        }
        Command::Evaluate { estimates, truth } => {
            let rows = parse_estimates_csv(&read_text(&estimates)?)?;
            let truth = load_stream(&truth)?.truth;
            let runtime = rows.iter().map(|r| r.runtime).sum();
            let points: Vec<_> = rows.iter().map(|r| r.point).collect();
            let report = ate(&points, &trajectory_from_truth(&truth), runtime)?;
            println!("epochs {}", report.series.len());
            println!("mean_ate_m {}", report.mean);
            println!("median_ate_m {}", report.median);
            println!("runtime_s {}", report.runtime);
        }
        Command::Sweep { stream, models, config, threads, dataset, csv } => {
            let cfg = load_config(config.as_deref(), None)?;
            let label = dataset.unwrap_or_else(|| {
                stream.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "stream".into())
            });
            let stream = load_stream(&stream)?;
            let runs = sweep(&stream.measurements, &stream.truth, &models, &cfg, threads)?;
            let reports: Vec<_> = runs.into_iter().map(|r| (r.model, r.report)).collect();
            let table = compare(&label, &reports)?;
            print!("{}", table.to_text());
            if let Some(p) = csv {
                fs::write(p, table.to_csv())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ivm: error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
