use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use kse::analysis::{load_reports, save_reports, write_reports, AnalysisConfig, DEFAULT_ALPHA, DEFAULT_K_NEIGHBORS};
use kse::dataset::Dataset;
use kse::finetune::{accuracy, predict, TrainConfig};
use kse::interpret::{StudyConfig, DEFAULT_QUANTILE};
use kse::io::{load_dense, load_model, save_model};
use kse::{analyze_model, compress_model, correlation_study, finetune, forward_compressed, model_report, toy, with_workers, CompressionConfig, KseError};

#[derive(Parser, Debug)]
#[command(name = "kse", version, about = "Kernel sparsity and entropy compression for CNNs")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Compression granularity G (>= 2)
    #[arg(short = 'G', long = "granularity", global = true, default_value_t = 4)]
    granularity: u32,
    /// Budget shift T
    #[arg(short = 'T', long = "shift", global = true, default_value_t = 0, allow_hyphen_values = true)]
    shift: i32,
    /// Entropy weight alpha in the indicator
    #[arg(long, global = true, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Neighbours k for the kernel density estimate
    #[arg(short = 'k', long = "k-neighbors", global = true, default_value_t = DEFAULT_K_NEIGHBORS)]
    k: usize,
    /// Top quantile kept by receptive-field masks
    #[arg(long, global = true, default_value_t = DEFAULT_QUANTILE)]
    quantile: f64,
    /// Seed for k-means and training shuffles
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads [default: available parallelism]
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Repeat for more log output
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score every input channel of the compressible layers
    Analyze {
        model: PathBuf,
        /// Report file; stdout when omitted
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Cluster kernels and write a compressed model
    Compress {
        model: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Reports from `analyze`; computed inline when omitted
        #[arg(short, long)]
        reports: Option<PathBuf>,
    },
    /// Accuracy on a dataset, and agreement with a dense reference
    Eval {
        model: PathBuf,
        #[arg(short, long)]
        data: PathBuf,
        /// Dense model to compare predictions against
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Train the centroids of a compressed model
    Finetune {
        model: PathBuf,
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.0)]
        weight_decay: f64,
        /// Also train layers left dense
        #[arg(long)]
        train_dense: bool,
    },
    /// Per-layer and total FLOP and parameter ratios
    Report {
        dense: PathBuf,
        compressed: PathBuf,
        /// JSON lines instead of a table
        #[arg(long)]
        json: bool,
    },
    /// Rank correlations between kernel statistics and feature-map masks
    Study {
        model: PathBuf,
        #[arg(short, long)]
        data: PathBuf,
        /// Index of the convolution whose input channels are studied
        #[arg(long)]
        layer: usize,
    },
    /// Generate the synthetic dataset and train the toy classifier
    Toy {
        /// Output directory
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
    },
}

fn exit_code(e: &KseError) -> u8 {
    match e.root() {
        KseError::Config(_) | KseError::Budget { .. } => 3,
        KseError::Io { .. } => 4,
        KseError::Manifest { .. } | KseError::Truncated { .. } | KseError::DimensionMismatch { .. } | KseError::Corrupt(_) => 5,
        KseError::Stage(_) | KseError::Architecture(_) => 6,
        KseError::Shape(_) | KseError::Geometry(_) | KseError::Index(_) | KseError::NonFinite(_) | KseError::DegenerateLayer(_) => 7,
        KseError::UndefinedCorrelation(_) | KseError::EmptyDataset => 8,
        KseError::Layer { .. } => unreachable!("root unwraps layer context"),
    }
}

fn compression_config(g: &Global) -> CompressionConfig {
    CompressionConfig {
        granularity: g.granularity,
        shift: g.shift,
        k_neighbors: g.k,
        alpha: g.alpha,
        kmeans_seed: g.seed,
        ..CompressionConfig::default()
    }
}

fn require_file(p: &Path) -> kse::Result<()> {
    let paths = kse::io::ModelPaths::resolve(p);
    if !paths.manifest.exists() && !p.exists() {
        return Err(KseError::Io {
            path: p.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    Ok(())
}

fn run(cli: Cli) -> kse::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Analyze { model, output } => {
            require_file(&model)?;
            let m = load_dense(&model)?;
            let cfg = AnalysisConfig {
                k_neighbors: g.k,
                alpha: g.alpha,
            };
            let reports = analyze_model(&m, &cfg)?;
            match output {
                Some(path) => {
                    save_reports(&reports, &path)?;
                    info!("wrote {} layer reports to {}", reports.len(), path.display());
                }
                None => write_reports(&reports, std::io::stdout().lock()).map_err(|e| KseError::io("<stdout>", e))?,
            }
        }
        Command::Compress { model, output, reports } => {
            require_file(&model)?;
            let m = load_dense(&model)?;
            let cfg = compression_config(g);
            cfg.validate()?;
            let reports = match reports {
                Some(p) => load_reports(p)?,
                None => analyze_model(&m, &cfg.analysis())?,
            };
            let c = compress_model(&m, &reports, &cfg)?;
            let paths = save_model(&c, &output)?;
            println!("{}", model_report(&m, &c)?.to_text());
            info!("wrote {}", paths.manifest.display());
        }
        Command::Eval { model, data, reference } => {
            require_file(&model)?;
            let m = load_model(&model)?;
            let ds = Dataset::load(&data)?;
            if ds.samples().iter().all(|s| s.label.is_some()) {
                println!("accuracy {:.6}", accuracy(&m, &ds.labeled()?)?);
            }
            if let Some(r) = reference {
                let dense = load_model(&r)?;
                m.same_architecture(&dense)?;
                let mut agree = 0usize;
                for img in ds.images() {
                    let a = predict(forward_compressed(&m, img)?.data());
                    let b = predict(forward_compressed(&dense, img)?.data());
                    agree += usize::from(a == b);
                }
                println!("agreement {:.6}", agree as f64 / ds.len().max(1) as f64);
            }
        }
        Command::Finetune {
            model,
            data,
            output,
            lr,
            momentum,
            epochs,
            batch_size,
            weight_decay,
            train_dense,
        } => {
            require_file(&model)?;
            let m = load_model(&model)?;
            let ds = Dataset::load(&data)?;
            let cfg = TrainConfig {
                learning_rate: lr,
                momentum,
                epochs,
                batch_size,
                seed: g.seed,
                weight_decay,
                train_dense_layers: train_dense,
            };
            let out = finetune(&m, &ds.labeled()?, &cfg)?;
            for (e, l) in out.loss_trace.iter().enumerate() {
                println!("epoch {} loss {l:.6}", e + 1);
            }
            save_model(&out.model, &output)?;
        }
        Command::Report { dense, compressed, json } => {
            require_file(&dense)?;
            require_file(&compressed)?;
            let d = load_dense(&dense)?;
            let c = load_model(&compressed)?;
            let r = model_report(&d, &c)?;
            print!("{}", if json { r.to_json_lines() } else { r.to_text() });
        }
        Command::Study { model, data, layer } => {
            require_file(&model)?;
            let m = load_dense(&model)?;
            let ds = Dataset::load(&data)?;
            let images: Vec<_> = ds.images().cloned().collect();
            let cfg = StudyConfig {
                quantile: g.quantile,
                k_neighbors: g.k,
            };
            let s = correlation_study(&m, &images, layer, &cfg)?;
            println!("{}", serde_json::to_string(&s).expect("study serializes"));
        }
        Command::Toy {
            output,
            per_class,
            test_per_class,
        } => {
            std::fs::create_dir_all(&output).map_err(|e| KseError::io(&output, e))?;
            let train_set = toy::toy_dataset(per_class, g.seed.wrapping_mul(2).wrapping_add(1));
            let test_set = toy::toy_dataset(test_per_class, g.seed.wrapping_mul(2).wrapping_add(2));
            train_set.save(output.join("train"))?;
            test_set.save(output.join("test"))?;
            let mut cfg = toy::toy_train_config();
            cfg.seed = g.seed;
            let out = toy::train_toy(&train_set, g.seed, &cfg)?;
            save_model(&out.model, output.join("toy"))?;
            println!("test accuracy {:.6}", toy::dataset_accuracy(&out.model, &test_set)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let workers = cli.global.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    match with_workers(workers, || run(cli)).and_then(|r| r) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
