use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use ssacnn::ablation::{apply_switches, config_echo, render_report, run_single, run_table, SwitchArg};
use ssacnn::config::RunConfig;
use ssacnn::data::{load_dataset, load_detections, load_ground_truth, save_detections, split_dirs};
use ssacnn::eval::{filter_subset, mr_curve, Subset};
use ssacnn::pipeline::{train_two_phase, Detector};
use ssacnn::synth::{generate_split, synth_generate, TEST_STREAM, TRAIN_STREAM};
use ssacnn::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ssacnn", version, about = "Two-stage pedestrian detector with segmentation self-attention")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Overrides the seed of the configuration.
    #[arg(long, global = true, env = "SSA_SEED")]
    seed: Option<u64>,
    /// Worker threads; 1 gives fully deterministic runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset into <out>/train and <out>/test.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both stages on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with frames; a `train` subdirectory is used when present.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained detector over a dataset and dump detections.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Miss-rate curve of a detection dump against a dataset's annotations.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "reasonable")]
        subset: Subset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Branch-placement ablation. With no --switch, runs every table column.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root with train/ and test/; synthesised in memory if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// `[rpn.|rcnn.]name=on|off`, e.g. conv4_3_SA=off.
        #[arg(long = "switch")]
        switches: Vec<SwitchArg>,
        #[arg(long, default_value = "reasonable")]
        subset: Subset,
        /// Report CSV path; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// The `train` (or `test`) subdirectory of `dir` if it exists, else `dir`.
fn split_or_self(dir: &Path, test: bool) -> PathBuf {
    let (train, test_dir) = split_dirs(dir);
    let sub = if test { test_dir } else { train };
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let seed = cli.common.seed;
    match cli.command {
        Command::Synth { config, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            synth_generate(&cfg.synth, &out)?;
            println!("wrote {} train and {} test frames to {}", cfg.synth.train_frames, cfg.synth.test_frames, out.display());
        }
        Command::Train { config, data, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let frames = load_dataset(&split_or_self(&data, false))?;
            info!("training on {} frames", frames.len());
            train_two_phase(&frames, &cfg, Some(&out))?;
            println!("checkpoints written to {}", out.display());
        }
        Command::Detect { ckpt, data, out } => {
            let det = Detector::load(&ckpt)?;
            let frames = load_dataset(&data)?;
            let dets = det.detect_frames(&frames)?;
            save_detections(&out, &dets)?;
            println!("{} detections on {} frames", dets.len(), frames.len());
        }
        Command::Eval { dets, data, subset, out } => {
            let detections = load_detections(&dets)?;
            let (gts, n_frames) = load_ground_truth(&data)?;
            let curve = mr_curve(&detections, &filter_subset(&gts, subset), n_frames, 9)?;
            if let Some(p) = out {
                std::fs::write(&p, curve.to_csv()).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            }
            println!("{}", curve.summary());
        }
        Command::Ablate { config, data, switches, subset, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.synth.seed = s;
            }
            apply_switches(&mut cfg, &switches)?;
            println!("{}", config_echo(&cfg));
            let (train, test) = match data {
                Some(d) => (load_dataset(&split_or_self(&d, false))?, load_dataset(&split_or_self(&d, true))?),
                None => (
                    generate_split(&cfg.synth, cfg.synth.train_frames, TRAIN_STREAM),
                    generate_split(&cfg.synth, cfg.synth.test_frames, TEST_STREAM),
                ),
            };
            let rows = if switches.is_empty() {
                run_table(&train, &test, &cfg, subset)?
            } else {
                run_single(&train, &test, &cfg, subset)?
            };
            let report = render_report(&rows);
            match out {
                Some(p) => std::fs::write(&p, &report).map_err(|e| Error::Io { path: p.clone(), source: e })?,
                None => print!("{report}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
