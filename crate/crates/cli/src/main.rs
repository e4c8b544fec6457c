//! Command-line front end. Every stage subcommand reads the experiment config,
//! applies its flag overrides and runs against the artifacts in the output
//! directory; `run-all` runs the whole experiment.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use proberlab::classifier::Architecture;
use proberlab::hitmiss::HitMissDataset;
use proberlab::pipeline::{self, files, ExperimentConfig, Stage, MANIFEST_FILE};
use proberlab::Error;

#[derive(Parser, Debug)]
#[command(name = "proberlab", version, about = "Misclassification probing and counterfactual analysis")]
struct Cli {
    /// Experiment config (JSON); when absent the preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Mnist)]
    preset: Preset,
    /// Directory holding the IDX files.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Output directory; takes precedence over PROBERLAB_OUT and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Mnist,
    MnistQuick,
    Synthetic,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved config, or write it to a file.
    Config {
        #[arg(long)]
        write: Option<PathBuf>,
    },
    TrainClassifier {
        /// `cnn` or `mlp:W1,W2,...`
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    BuildHitmiss,
    TrainProber {
        /// Input and hidden widths, e.g. `256,128,64`.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        miss_weight: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    EvalDetection,
    UncertaintyTest,
    PlaneScan {
        #[arg(long)]
        grid_n: Option<usize>,
        /// Three test indices, e.g. `0,5,9`.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        anchors: Option<Vec<usize>>,
    },
    TrainFlow {
        /// Number of coupling layers.
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    GenCf {
        /// Ascent step size.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        stop_p: Option<f64>,
        /// Cap on the number of prober-predicted misses.
        #[arg(long)]
        limit: Option<usize>,
    },
    Reclassify,
    RunAll {
        /// Skip stages whose inputs and outputs are unchanged.
        #[arg(long)]
        resume: bool,
    },
    Report {
        /// Defaults to the manifest in the output directory.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn base_config(cli: &Cli) -> proberlab::Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let data = cli.data_dir.clone().unwrap_or_else(|| PathBuf::from("data/mnist"));
            match cli.preset {
                Preset::Mnist => ExperimentConfig::mnist(data, "runs/mnist"),
                Preset::MnistQuick => ExperimentConfig::mnist_quick(data, "runs/mnist-quick"),
                Preset::Synthetic => ExperimentConfig::synthetic("runs/synthetic"),
            }
        }
    };
    if let Some(d) = &cli.data_dir {
        c.data_dir = d.clone();
    }
    c.apply_env();
    if let Some(o) = &cli.out {
        c.output_dir = o.clone();
    }
    Ok(c)
}

fn parse_arch(s: &str) -> proberlab::Result<Architecture> {
    let bad = || Error::InvalidConfig(format!("unknown architecture {s:?} (expected cnn or mlp:W1,W2,...)"));
    match s.split_once(':') {
        None if s == "cnn" => Ok(Architecture::mnist_cnn()),
        Some(("mlp", widths)) => {
            let hidden = widths
                .split(',')
                .map(|w| w.trim().parse::<usize>().map_err(|_| bad()))
                .collect::<proberlab::Result<Vec<_>>>()?;
            Ok(Architecture::Mlp { hidden, dropout: 0.0 })
        }
        _ => Err(bad()),
    }
}

fn run(cli: Cli) -> proberlab::Result<()> {
    let mut c = base_config(&cli)?;
    let stage = match cli.command {
        Command::Config { write } => {
            match write {
                Some(path) => c.save(path)?,
                None => println!("{}", c.to_json()),
            }
            return Ok(());
        }
        Command::Report { manifest } => {
            let path = manifest.unwrap_or_else(|| c.output_dir.join(MANIFEST_FILE));
            print!("{}", pipeline::report(path)?);
            return Ok(());
        }
        Command::RunAll { resume } => {
            let outcome = pipeline::run_pipeline(&c, resume)?;
            println!(
                "{} stages executed, {} reused; manifest in {}",
                outcome.executed.len(),
                outcome.reused.len(),
                c.output_dir.join(MANIFEST_FILE).display()
            );
            return Ok(());
        }
        Command::PlaneScan { grid_n, anchors } => {
            if let Some(n) = grid_n {
                c.analysis.plane_grid_n = n;
            }
            if let Some(a) = anchors {
                let a: [usize; 3] = a
                    .try_into()
                    .map_err(|a| Error::InvalidConfig(format!("anchors need three indices, got {a:?}")))?;
                c.analysis.plane_anchors = Some(a);
            }
            pipeline::run_plane_scan(&c)?;
            println!("wrote {}", c.output_dir.join(files::FIG3_CSV).display());
            return Ok(());
        }
        Command::TrainClassifier { arch, epochs, seed } => {
            if let Some(a) = arch {
                c.classifier.arch = parse_arch(&a)?;
            }
            if let Some(e) = epochs {
                c.classifier.epochs = e;
            }
            if let Some(s) = seed {
                c.classifier_seed = s;
            }
            Stage::TrainClassifier
        }
        Command::BuildHitmiss => Stage::BuildHitmiss,
        Command::TrainProber {
            dims,
            alpha,
            miss_weight,
            epochs,
            seed,
        } => {
            if let Some(d) = dims {
                let dp = HitMissDataset::load(c.output_dir.join(files::HITMISS_TRAIN))
                    .map_err(|e| Error::InvalidConfig(format!("--dims needs the hit-miss set: {e}")))?;
                c.prober = c.prober.clone().with_dims(&d, dp.rep_dim)?;
            }
            if let Some(a) = alpha {
                c.prober.alpha = a;
            }
            if let Some(w) = miss_weight {
                c.prober.miss_weight = w;
            }
            if let Some(e) = epochs {
                c.prober.epochs = e;
            }
            if let Some(s) = seed {
                c.prober.seed = s;
            }
            Stage::TrainProber
        }
        Command::EvalDetection => Stage::EvalDetection,
        Command::UncertaintyTest => Stage::UncertaintyTest,
        Command::TrainFlow { levels, epochs, seed } => {
            if let Some(l) = levels {
                c.flow.coupling_layers = l;
            }
            if let Some(e) = epochs {
                c.flow.epochs = e;
            }
            if let Some(s) = seed {
                c.flow.seed = s;
            }
            Stage::TrainFlow
        }
        Command::GenCf {
            lambda,
            max_iters,
            stop_p,
            limit,
        } => {
            if let Some(l) = lambda {
                c.ascent.step_size = l;
            }
            if let Some(m) = max_iters {
                c.ascent.max_iters = m;
            }
            if let Some(p) = stop_p {
                c.ascent.stop_p_hit = p;
            }
            if limit.is_some() {
                c.analysis.cf_limit = limit;
            }
            Stage::GenCf
        }
        Command::Reclassify => Stage::Reclassify,
    };
    pipeline::run_single_stage(&c, stage)?;
    println!("{stage}: done ({})", c.output_dir.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 2,
        Error::StageFailed { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
