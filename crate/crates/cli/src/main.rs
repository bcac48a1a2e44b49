use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pedsearch::commands;
use pedsearch::service;
use pedsearch::EngineConfig;
use pedsearch_core::eval::{BenchConfig, SynthConfig};

#[derive(Parser)]
#[command(name = "pedsearch", version, about = "Interactive text-based person retrieval")]
struct Cli {
    /// TOML config file; $PEDSEARCH_CONFIG takes precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Describe and index every image of a manifest.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-shot text search over an index.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Multi-round retrieval session on the terminal.
    Interact {
        #[arg(long)]
        index: PathBuf,
        /// Candidates printed per round.
        #[arg(long, default_value_t = 10)]
        show: usize,
    },
    /// Scripted-user benchmark over a manifest.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 6)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON report path; the per-round curve goes to stdout as CSV.
        #[arg(long)]
        report: PathBuf,
        /// Seeded subset of query identities.
        #[arg(long)]
        max_queries: Option<usize>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Write a synthetic gallery and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        identities: usize,
        #[arg(long, default_value_t = 3)]
        views: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = EngineConfig::load(cli.config.as_deref())?;
    let stdout = io::stdout();
    match cli.command {
        Command::Ingest { manifest, out } => {
            let n = commands::ingest(&cfg, &manifest, &out)?;
            println!("indexed {n} images into {}", out.display());
        }
        Command::Search { index, query, top_k } => {
            let engine = commands::open_index(&cfg, &index)?;
            commands::search(&engine, &query, top_k, &mut stdout.lock())?;
        }
        Command::Interact { index, show } => {
            let mut engine = commands::open_index(&cfg, &index)?;
            commands::interact(&mut engine, &mut io::stdin().lock(), &mut stdout.lock(), show)?;
        }
        Command::Bench {
            manifest,
            rounds,
            seed,
            report,
            max_queries,
        } => {
            let result = commands::bench(&cfg, &manifest, &BenchConfig { rounds, seed, max_queries })?;
            fs::write(&report, result.to_json()).with_context(|| format!("writing {}", report.display()))?;
            stdout.lock().write_all(result.to_csv().as_bytes())?;
        }
        Command::Serve { addr } => {
            let app = commands::service_state(&cfg)?;
            let cors = service::cors_layer(&cfg.service.cors_origins)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                service::serve(listener, app, cors, shutdown).await
            })?;
        }
        Command::Synth {
            out,
            identities,
            views,
            seed,
        } => {
            let cfg = SynthConfig {
                identities,
                views,
                seed,
                ..Default::default()
            };
            let n = commands::synth(&cfg, &out)?;
            println!("wrote {n} images and {}", out.join("manifest.jsonl").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
