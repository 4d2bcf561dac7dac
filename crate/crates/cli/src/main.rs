use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hitta_core::backbone::init_network;
use hitta_core::checkpoint::{load_network, save_network};
use hitta_core::datagen::{generate_dataset, load_dataset, train_source};
use hitta_core::harness::{
    build_stream, export_overlays, run_matrix, run_stream, MatrixReport, MethodName, OverlayInput, RunConfig,
    StreamReport,
};
use hitta_core::mask::LabelMap;
use hitta_service::AppState;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "hitta", version, about = "Human-in-the-loop test-time adaptation for segmentation")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true, env = "HITTA_CONFIG")]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a run configuration as TOML.
    InitConfig {
        /// Use the compact (32 px) profile.
        #[arg(long)]
        compact: bool,
    },
    /// Generate the synthetic multi-domain dataset.
    GenData {
        #[arg(long)]
        overwrite: bool,
    },
    /// Train the source model and save its checkpoint.
    TrainSource,
    /// Evaluate one method over the target stream.
    Run {
        #[arg(long)]
        method: MethodName,
        /// Where to write the stream report (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every configured method and write the result tables.
    Matrix,
    /// Print the summary table of a finished matrix directory.
    Report {
        /// Directory holding streams.json; defaults to the configured out_dir.
        dir: Option<PathBuf>,
    },
    /// Render contour overlays for one method's predictions.
    Overlays {
        #[arg(long)]
        method: MethodName,
        /// Directory holding streams.json; defaults to the configured out_dir.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, default_value = "runs/overlays")]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        limit: usize,
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
    /// Serve the interactive annotation API.
    Serve {
        #[arg(long, env = "HITTA_HOST", default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, env = "HITTA_PORT", default_value_t = 8080)]
        port: u16,
        /// Session storage; sessions found here are resumed.
        #[arg(long, env = "HITTA_SESSIONS", default_value = "runs/sessions")]
        sessions: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn read_streams(dir: &Path) -> Result<Vec<StreamReport>> {
    let path = dir.join("streams.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::InitConfig { compact } => {
            let mut out = if compact { RunConfig::compact() } else { RunConfig::default() };
            out.seed = cfg.seed;
            print!("{}", out.to_toml_string()?);
        }
        Command::GenData { overwrite } => {
            let data = generate_dataset(&cfg.data, &cfg.dataset, overwrite)?;
            println!("{} samples written to {}", data.samples.len(), cfg.dataset.display());
        }
        Command::TrainSource => {
            let data = load_dataset(&cfg.dataset)?;
            let mut net = init_network(cfg.arch, cfg.seed)?;
            let mut train = cfg.train.clone();
            train.seed = cfg.seed;
            let t = Instant::now();
            let report = train_source(&mut net, &data, &train)?;
            save_network(&mut net, &cfg.checkpoint)?;
            println!(
                "best validation DSC {:.4} at epoch {} ({:.1} s); saved {}",
                report.best_val_dsc,
                report.best_epoch,
                t.elapsed().as_secs_f64(),
                cfg.checkpoint.display()
            );
        }
        Command::Run { method, out } => {
            let data = load_dataset(&cfg.dataset)?;
            let net = load_network(&cfg.checkpoint)?;
            let spec = cfg.spec(method)?;
            let items = build_stream(&data, &cfg.target_domains(), cfg.seed, cfg.shuffle)?;
            let (report, _) = run_stream(&spec, net, items, cfg.seed)?;
            let single = MatrixReport::from_streams(cfg.seed, vec![report]);
            print!("{}", single.summary());
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string(&single.streams[0])?)
                    .with_context(|| format!("writing {}", out.display()))?;
            }
        }
        Command::Matrix => {
            let data = load_dataset(&cfg.dataset)?;
            let source = load_network(&cfg.checkpoint);
            if let Err(e) = &source {
                tracing::warn!(error = %e, "source checkpoint unavailable; every cell is skipped");
            }
            let report = run_matrix(&cfg, &data, source.as_ref().map_err(clone_err))?;
            report.write(&cfg.out_dir)?;
            print!("{}", report.summary());
        }
        Command::Report { dir } => {
            let dir = dir.unwrap_or(cfg.out_dir.clone());
            let streams = read_streams(&dir)?;
            let seed = streams.first().map_or(cfg.seed, |s| s.seed);
            print!("{}", MatrixReport::from_streams(seed, streams).summary());
        }
        Command::Overlays {
            method,
            from,
            out,
            limit,
            scale,
        } => {
            let dir = from.unwrap_or(cfg.out_dir.clone());
            let streams = read_streams(&dir)?;
            let Some(stream) = streams.iter().find(|s| s.method == method.as_str()) else {
                bail!("{} has no stream for {method}", dir.display());
            };
            let data = load_dataset(&cfg.dataset)?;
            let mut owned = Vec::new();
            for row in stream.rows.iter().take(limit) {
                let sample = data
                    .samples
                    .iter()
                    .find(|s| s.id == row.sample_id)
                    .with_context(|| format!("sample {} is not in the dataset", row.sample_id))?;
                let pred: LabelMap = row.prediction.decode()?;
                owned.push((sample, pred, row.rater.clone()));
            }
            let mut inputs = Vec::new();
            for (sample, pred, rater) in &owned {
                inputs.push(OverlayInput {
                    sample_id: &sample.id,
                    image: &sample.image,
                    prediction: pred,
                    r1: sample.mask("R1")?,
                    rstar: sample.mask(rater)?,
                });
            }
            let paths = export_overlays(&inputs, &out, scale)?;
            println!("{} overlays written to {}", paths.len(), out.display());
        }
        Command::Serve { host, port, sessions } => {
            let state = AppState::resume(&sessions)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(hitta_service::serve(SocketAddr::new(host, port), state))?;
        }
    }
    Ok(())
}

fn clone_err(e: &hitta_core::Error) -> hitta_core::Error {
    hitta_core::Error::Config(e.to_string())
}
