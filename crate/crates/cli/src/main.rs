use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use coho::commands::{self, EvalArgs, GenerateArgs, RenderArgs};
use coho::server::{router, AppState};
use coho::PipelineConfig;
use log::info;

#[derive(Parser)]
#[command(name = "coho", version, about = "Context-consistent city block layout generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config value, e.g. `--set gmae.train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy cities as GeoJSON.
    MakeToy(Common),
    /// Build block-adjacency graphs from GeoJSON.
    Ingest(Common),
    /// Train the block layout autoencoder.
    TrainBvae(Common),
    /// Fit the percentile codebook and code every city graph.
    FitCodebook(Common),
    /// Train the graph masked autoencoder on the coded graphs.
    TrainGmae(Common),
    /// Generate layouts for the evaluation city.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "run")]
        run_id: String,
        /// Share of blocks kept as priors, e.g. `30%` or `0.3`.
        #[arg(long)]
        priors: Option<String>,
    },
    /// Score a generated run against the real city.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "run")]
        run_id: String,
        /// Evaluate this graph file instead of the run's output.
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Directory for eval.json and eval.csv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Draw a run, or any graph file, as SVG.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "run")]
        run_id: String,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Listen address; defaults to `serve.addr`.
        #[arg(long)]
        addr: Option<String>,
        /// Also write every generated run under the runs directory.
        #[arg(long)]
        persist_runs: bool,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::MakeToy(_) => "make-toy",
            Command::Ingest(_) => "ingest",
            Command::TrainBvae(_) => "train-bvae",
            Command::FitCodebook(_) => "fit-codebook",
            Command::TrainGmae(_) => "train-gmae",
            Command::Generate { .. } => "generate",
            Command::Eval { .. } => "eval",
            Command::Render { .. } => "render",
            Command::Serve { .. } => "serve",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::MakeToy(c) | Command::Ingest(c) | Command::TrainBvae(c) | Command::FitCodebook(c) | Command::TrainGmae(c) => c,
            Command::Generate { common, .. }
            | Command::Eval { common, .. }
            | Command::Render { common, .. }
            | Command::Serve { common, .. } => common,
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    let common = cmd.common();
    let cfg = PipelineConfig::load(&common.config, &common.overrides)?;
    match cmd {
        Command::MakeToy(_) => {
            for dir in commands::make_toy(&cfg)? {
                println!("{}", dir.display());
            }
        }
        Command::Ingest(_) => {
            for (city, r) in cfg.cities.iter().zip(commands::ingest(&cfg)?) {
                println!("{city}: {} blocks, {} buildings, {} blocks skipped", r.blocks, r.buildings, r.skipped_blocks);
            }
        }
        Command::TrainBvae(_) => {
            let s = commands::train_bvae(&cfg)?;
            println!("{} {}", s.artifact.display(), s.hash);
        }
        Command::FitCodebook(_) => {
            let s = commands::fit_codebook(&cfg)?;
            println!("{} {}", s.artifact.display(), s.hash);
        }
        Command::TrainGmae(_) => {
            let s = commands::train_gmae(&cfg)?;
            println!("{} {}", s.stage.artifact.display(), s.stage.hash);
            for a in s.accuracy {
                println!("{}: held-in {:.4} held-out {:.4}", a.city_id, a.held_in, a.held_out);
            }
        }
        Command::Generate { run_id, priors, .. } => {
            let prior_fraction = priors.as_deref().map(commands::parse_fraction).transpose()?;
            let dir = commands::generate(&cfg, &GenerateArgs { run_id, prior_fraction })?;
            println!("{}", dir.display());
        }
        Command::Eval { run_id, generated, out_dir, .. } => {
            let report = commands::eval(&cfg, &EvalArgs { run_id, generated, out_dir })?;
            print!("{}", report.to_csv());
        }
        Command::Render { run_id, graph, out, .. } => {
            println!("{}", commands::render(&cfg, &RenderArgs { run_id, graph, out })?.display());
        }
        Command::Serve { addr, persist_runs, .. } => {
            let (bundle, hashes) = commands::load_bundle(&cfg)?;
            let mut cities = BTreeMap::new();
            for city in &cfg.cities {
                cities.insert(city.clone(), commands::load_coded_graph(&cfg, city, &bundle)?);
            }
            let schedule = coho_core::sampler::ScheduleConfig {
                seed: cfg.stage_seed(cfg.generate.schedule.seed),
                ..cfg.generate.schedule.clone()
            };
            let mut state = AppState::new(bundle, hashes, cities, schedule);
            if persist_runs {
                state.persist_dir = Some(cfg.paths.runs.clone());
            }
            let addr = addr.unwrap_or_else(|| cfg.serve.addr.clone());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
                info!("listening on {addr}");
                eprintln!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, router(Arc::new(state))).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stage = cli.command.stage();
    let started = Instant::now();
    match run(cli.command) {
        Ok(()) => info!("{stage} finished in {:.1}s", started.elapsed().as_secs_f64()),
        Err(e) => {
            eprintln!("error: stage `{stage}` failed: {e:#}");
            std::process::exit(1);
        }
    }
}
