mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fdg_core::clustering::{self, KMeansOptions};
use fdg_core::experiment::{self, DomainSelection, RunConfig};
use fdg_core::numerics::Rng;
use fdg_core::synthdata;
use fdg_core::trainer::TrainMode;
use fdg_core::{evalkit, Error};
use log::info;

#[derive(Parser)]
#[command(name = "fdg", version, about = "Synthetic speaker verification with pseudo-domain training")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.lambda_dg=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Sets both the data and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    ProtonetBaseline,
    OriginalLabels,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domains {
    In,
    Out,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write checkpoints, loss log and report to a directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        mode: Mode,
    },
    /// Cluster training utterances into pseudo-domains with a trained encoder.
    Cluster {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Number of pseudo-domains; defaults to `train.m`.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verification metrics on the test speakers.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        domains: Option<Domains>,
        /// FAR operating points for FRR@FAR; repeatable. Defaults to `eval.far_points`.
        #[arg(long)]
        far: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write one embedding row per utterance as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Format(_) | Error::Io { .. } => 2,
        Error::Numerical(_) | Error::Training { .. } => 3,
    }
}

fn threads() -> Result<usize, Error> {
    match std::env::var("FDG_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Usage(format!("FDG_THREADS must be a positive integer, got {v:?}"))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = config::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let threads = threads()?;
    match cli.command {
        Command::Gen { out } => {
            info!("effective configuration:\n{}", config::to_toml(&cfg));
            let ds = synthdata::generate(&cfg.gen)?;
            synthdata::save_dataset(&ds, &out)?;
            println!(
                "wrote {} utterances ({} speakers, {} domains) to {}",
                ds.dataset.len(),
                ds.dataset.n_speakers(),
                ds.domains.len(),
                out.display()
            );
        }
        Command::Train { data, out_dir, mode } => {
            let mode = match mode {
                Mode::Full => TrainMode::Full,
                Mode::ProtonetBaseline => TrainMode::ProtonetBaseline,
                Mode::OriginalLabels => TrainMode::OriginalLabels,
            };
            let ds = synthdata::load_dataset(&data)?;
            echo(&cfg, &out_dir)?;
            let outcome = experiment::run_training(&ds, &cfg.train, mode, Some(&out_dir), threads)?;
            let report = experiment::train_report(&outcome, &cfg.train, mode);
            println!(
                "trained {:?}: final aggregation loss {:?}, pseudo-domain histogram {:?}",
                mode, report.final_agg_loss, report.pseudo_histogram
            );
        }
        Command::Cluster {
            checkpoint,
            data,
            m,
            out,
        } => {
            if let Some(m) = m {
                cfg.train.m = m;
            }
            info!("effective configuration:\n{}", config::to_toml(&cfg));
            let ds = synthdata::load_dataset(&data)?;
            let mut train = ds.train_dataset()?;
            let agg = experiment::load_embedder(&checkpoint, &cfg.train)?;
            let layers = if cfg.train.style_layers.is_empty() {
                clustering::all_layers(&agg)
            } else {
                cfg.train.style_layers.clone()
            };
            let opts = KMeansOptions {
                max_iter: cfg.train.kmeans_max_iter,
                ..KMeansOptions::default()
            };
            let mut rng = Rng::new(cfg.train.seed).split("cluster");
            let model = clustering::fit_pseudo_domains(&agg, &train, &layers, cfg.train.m, &mut rng, opts)?;
            clustering::assign_pseudo_labels(&model, &agg, &mut train)?;
            model.save(&out)?;
            println!("pseudo-domain histogram {:?}", train.pseudo_histogram());
            println!("final inertia {}", model.final_inertia());
        }
        Command::Eval {
            checkpoint,
            data,
            domains,
            far,
            out_dir,
        } => {
            if let Some(d) = domains {
                cfg.eval.domains = match d {
                    Domains::In => DomainSelection::In,
                    Domains::Out => DomainSelection::Out,
                    Domains::All => DomainSelection::All,
                };
            }
            if !far.is_empty() {
                cfg.eval.far_points = far;
            }
            let ds = synthdata::load_dataset(&data)?;
            let agg = experiment::load_embedder(&checkpoint, &cfg.train)?;
            echo(&cfg, &out_dir)?;
            let metric = cfg.eval.metric_for(cfg.train.loss);
            let report = experiment::evaluate(&agg, &ds, &cfg.eval, metric)?;
            experiment::write_eval(&report, &out_dir)?;
            for g in &report.averages {
                let frr: Vec<String> = g
                    .frr_at_far
                    .iter()
                    .map(|(far, frr)| format!("FRR@FAR{far}={}", evalkit::fmt_sig9(*frr)))
                    .collect();
                println!(
                    "{:<3} EER={} MinDCF={} {}",
                    g.group,
                    evalkit::fmt_sig9(g.eer),
                    evalkit::fmt_sig9(g.min_dcf),
                    frr.join(" ")
                );
            }
        }
        Command::ExportEmbeddings {
            checkpoint,
            data,
            out,
        } => {
            info!("effective configuration:\n{}", config::to_toml(&cfg));
            let ds = synthdata::load_dataset(&data)?;
            let agg = experiment::load_embedder(&checkpoint, &cfg.train)?;
            evalkit::export_embeddings(&agg, &ds.dataset, &out)?;
            println!("wrote {} embeddings to {}", ds.dataset.len(), out.display());
        }
    }
    Ok(())
}

/// Logs the effective configuration and writes it into the output directory.
fn echo(cfg: &RunConfig, dir: &Path) -> Result<(), Error> {
    let text = config::to_toml(cfg);
    info!("effective configuration:\n{text}");
    create_dir(dir)?;
    write_text(&dir.join("config.toml"), &text)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
