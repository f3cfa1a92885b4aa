//! Command line entry points.
//!
//! Exit codes: 0 on success, 1 for invalid input (bad flags, configuration
//! or files), 2 for failures while running.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use bayesrank::data::synth_generate;
use bayesrank::run::{RunConfig, RunDir};
use bayesrank::{run_loop, Error, LoopDriver, Sampler, SimulatedOracle};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use log::info;

use crate::report::{self, FinishedRun};
use crate::server::{self, Session};

#[derive(Debug, Parser)]
#[command(name = "bayesrank", version, about = "Active learning to rank with MC-dropout uncertainty")]
pub struct Cli {
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for data generation, splitting, training and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (the run directory for `run` and `serve`).
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic imbalanced ordinal dataset as JSON lines.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated class proportions, lowest class first.
        #[arg(long, value_delimiter = ',')]
        proportions: Option<Vec<f64>>,
    },
    /// Run the full loop against the simulated annotator.
    Run {
        #[arg(long)]
        sampler: Option<Sampler>,
    },
    /// Serve the loop over HTTP for a human annotator.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        /// Directory with the annotator UI bundle.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Recompute metrics of a finished run.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Print accuracy, cost and classification tables and dump posteriors.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: if e.is_validation() { 1 } else { 2 }, message: e.to_string() }
    }
}

fn invalid(e: Error) -> Failure {
    Failure { code: 1, message: e.to_string() }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parse `args` and run the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut config = match &cli.config {
        // An unreadable or malformed config file is bad input.
        Some(path) => RunConfig::load(path).map_err(invalid)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    Ok(config)
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Synth { n, proportions } => synth(config, *n, proportions.clone(), &cli.out_dir),
        Command::Run { sampler } => run(config, *sampler, &cli.out_dir),
        Command::Serve { port, ui_dir } => serve(config, *port, ui_dir.clone(), &cli.out_dir),
        Command::Eval { run_dir } => eval(run_dir),
        Command::Report { run_dir } => report(run_dir),
    }
}

fn synth(mut config: RunConfig, n: Option<usize>, proportions: Option<Vec<f64>>, out_dir: &Path) -> CliResult<()> {
    if let Some(n) = n {
        config.synth.n = n;
    }
    if let Some(p) = proportions {
        config.synth.num_classes = p.len();
        config.synth.class_proportions = p;
    }
    let data = synth_generate(&config.synth).map_err(invalid)?;
    fs::create_dir_all(out_dir).map_err(|e| Failure::from(Error::io(out_dir, e)))?;
    let path = out_dir.join("dataset.jsonl");
    data.dataset.write_jsonl(&path)?;
    println!("wrote {} samples to {}", data.dataset.len(), path.display());
    Ok(())
}

fn run(mut config: RunConfig, sampler: Option<Sampler>, out_dir: &Path) -> CliResult<()> {
    if let Some(s) = sampler {
        config.settings.loop_config.sampler = s;
    }
    validate(&config)?;
    let (dataset, split) = config.materialize()?;
    let dir = RunDir::create(out_dir, &config)?;
    let mut oracle = SimulatedOracle::new(&dataset).with_noise(config.flip_probability, config.settings.loop_config.seed)?;
    let state = run_loop(&dataset, split, &mut oracle, config.settings.clone(), Some(dir))?;
    print!("{}", report::accuracy_table(&state.metrics_by_round));
    println!("run written to {}", out_dir.display());
    Ok(())
}

fn validate(config: &RunConfig) -> CliResult<()> {
    config.settings.loop_config.validate().map_err(invalid)?;
    config.settings.train.validate().map_err(invalid)?;
    if !(0.0..=1.0).contains(&config.flip_probability) {
        return Err(invalid(Error::Config(format!("flip probability {} outside [0, 1]", config.flip_probability))));
    }
    Ok(())
}

fn serve(mut config: RunConfig, port: Option<u16>, ui_dir: Option<PathBuf>, out_dir: &Path) -> CliResult<()> {
    if let Some(p) = port {
        config.port = p;
    }
    if ui_dir.is_some() {
        config.ui_dir = ui_dir;
    }
    validate(&config)?;
    if config.settings.train.multitask {
        return Err(invalid(Error::Config(
            "multitask training needs absolute labels, which the annotation service does not collect".into(),
        )));
    }
    let (dataset, split) = config.materialize()?;
    let dir = RunDir::create(out_dir, &config)?;
    // The dataset lives as long as the server process.
    let dataset: &'static _ = Box::leak(Box::new(dataset));
    let driver = LoopDriver::new(dataset, split, config.settings.clone(), Some(dir))?;
    let sessions = server::sessions(Session::new(config.run_id.clone(), driver, dataset));
    let app = server::router(sessions, config.ui_dir.clone());
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure { code: 2, message: e.to_string() })?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", config.port))
            .await
            .map_err(|e| Failure { code: 2, message: format!("cannot bind port {}: {e}", config.port) })?;
        info!("serving run {:?} on port {}", config.run_id, config.port);
        println!("serving run {} at http://localhost:{}/runs/{}/", config.run_id, config.port, config.run_id);
        axum::serve(listener, app)
            .await
            .map_err(|e| Failure { code: 2, message: e.to_string() })
    })
}

fn open_run(run_dir: &Path) -> CliResult<FinishedRun> {
    let dir = RunDir::open(run_dir).map_err(invalid)?;
    FinishedRun::load(&dir).map_err(invalid)
}

fn eval(run_dir: &Path) -> CliResult<()> {
    let run = open_run(run_dir)?;
    let metrics = report::evaluate(&run)?;
    let json = serde_json::to_string_pretty(&metrics).map_err(|e| Failure::from(Error::from(e)))? + "\n";
    let csv = metrics.to_csv();
    for (name, text) in [("metrics.json", &json), ("metrics.csv", &csv)] {
        let path = run_dir.join(name);
        fs::write(&path, text).map_err(|e| Failure::from(Error::io(&path, e)))?;
    }
    print!("{csv}");
    Ok(())
}

fn report(run_dir: &Path) -> CliResult<()> {
    let run = open_run(run_dir)?;
    println!("Pair accuracy by round");
    print!("{}", report::accuracy_table(&run.rounds));
    println!("\nAnnotation cost");
    print!("{}", report::cost_table(&run.rounds));
    if let Some(c) = report::evaluate(&run)?.classification {
        println!("\nQuantized score classification");
        print!("{}", report::classification_table(&c));
    }
    let posteriors = report::all_posteriors(&run)?;
    let path = run_dir.join("posteriors.csv");
    fs::write(&path, report::posteriors_csv(&run.dataset, &posteriors)).map_err(|e| Failure::from(Error::io(&path, e)))?;
    println!("\nposteriors written to {}", path.display());
    Ok(())
}
