//! Command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spikefpn::commands::{self, SweepAxis};
use spikefpn::config::RunConfig;
use spikefpn::CliError;
use spikefpn_core::network::NeuronKind;

#[derive(Parser)]
#[command(
    name = "spikefpn",
    about = "Event-driven spiking feature-pyramid object detection: synthesize scenes, encode event stacks, train, evaluate, infer, and account spikes and energy",
    version
)]
struct Cli {
    /// Run configuration JSON (strict keys; defaults used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FirstLayerArg {
    Lif,
    Alif,
    Binary,
}

impl From<FirstLayerArg> for NeuronKind {
    fn from(v: FirstLayerArg) -> NeuronKind {
        match v {
            FirstLayerArg::Lif => NeuronKind::Lif,
            FirstLayerArg::Alif => NeuronKind::Alif,
            FirstLayerArg::Binary => NeuronKind::Binary,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event scene with ground-truth boxes.
    Synthesize {
        /// Scene duration override in microseconds.
        #[arg(long)]
        duration_us: Option<u64>,
        /// Number of moving objects.
        #[arg(long)]
        objects: Option<usize>,
        /// Background noise rate override (events per second).
        #[arg(long)]
        noise: Option<f64>,
        /// Write events in the packed EVT1 binary format instead of CSV.
        #[arg(long)]
        binary: bool,
    },
    /// Encode an event file into packed frame stacks (STK1).
    Encode {
        /// Event file (CSV or EVT1).
        #[arg(long)]
        events: PathBuf,
        /// Encode one stack per label timestamp from this file.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Encode on a fixed timestamp grid with this stride instead.
        #[arg(long)]
        stride_us: Option<u64>,
    },
    /// Train a detector on a data directory (events + labels).
    Train {
        /// Directory containing events.csv/events.evt1 and labels.csv.
        #[arg(long)]
        data: PathBuf,
        /// Resume from a previously written last.sfpn checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Neuron model of the first layer.
        #[arg(long, value_enum)]
        first_layer: Option<FirstLayerArg>,
        /// Epoch count override.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on a data directory (mAP50, mAP50:95, per class).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run a checkpoint over an event file and export detections CSV.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        events: PathBuf,
        /// Take inference timestamps from this label file.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Or use a fixed timestamp stride (defaults to one stack duration).
        #[arg(long)]
        stride_us: Option<u64>,
    },
    /// Record firing rates and emit the operation/energy report.
    CostReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Cap the number of samples used for rate recording.
        #[arg(long)]
        samples: Option<usize>,
        /// Also write a per-layer CSV next to the JSON report.
        #[arg(long)]
        csv: bool,
    },
    /// Train+eval across a hyper-parameter grid; one CSV row per point.
    Sweep {
        /// Axis: tau, threshold, s_c_config, or beta.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated grid values (e.g. 0,0.1,0.2 or 3x3,2x5).
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        /// Epoch count override for every grid point.
        #[arg(long)]
        epochs: Option<usize>,
        /// Concurrent grid points (bounded by SFPN_THREADS when set).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = spikefpn::init_threads();
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synthesize { duration_us, objects, noise, binary } => {
            if let Some(d) = duration_us {
                cfg.scene.duration_us = d;
            }
            if let Some(o) = objects {
                cfg.scene.num_objects = o;
            }
            if let Some(n) = noise {
                cfg.scene.noise_rate_hz = n;
            }
            commands::cmd_synthesize(&cfg, &cli.out, cli.force, binary)
        }
        Command::Encode { events, labels, stride_us } => {
            commands::cmd_encode(&cfg, &events, labels.as_deref(), stride_us, &cli.out, cli.force)
        }
        Command::Train { data, resume, first_layer, epochs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            commands::cmd_train(
                &cfg,
                &data,
                &cli.out,
                cli.force,
                resume.as_deref(),
                first_layer.map(Into::into),
            )
        }
        Command::Eval { checkpoint, data } => commands::cmd_eval(&cfg, &checkpoint, &data),
        Command::Infer { checkpoint, events, labels, stride_us } => commands::cmd_infer(
            &cfg,
            &checkpoint,
            &events,
            labels.as_deref(),
            stride_us,
            &cli.out,
            cli.force,
        ),
        Command::CostReport { checkpoint, data, samples, csv } => commands::cmd_cost_report(
            &cfg,
            &checkpoint,
            &data,
            samples,
            &cli.out,
            cli.force,
            csv,
        ),
        Command::Sweep { axis, values, data, epochs, jobs } => {
            let jobs = jobs.unwrap_or(threads);
            commands::cmd_sweep(&cfg, axis, &values, &data, &cli.out, cli.force, epochs, jobs)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
