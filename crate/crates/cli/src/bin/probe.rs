use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fwprobe_core::analysis::EmbeddingSource;
use fwprobe_core::forge::load_dataset;
use fwprobe_core::gateway::{MockBackend, MOCK_ENDPOINT};
use fwprobe_core::metrics::{render_records, render_table};
use fwprobe_core::service::{ProbeService, RunParams, RunView, DEFAULT_LAYER};
use fwprobe_core::store::{ProfileMode, RunStatus};
use fwprobe_server::{api_router, serve, transport_for, wire_router, ApiState};

/// Runs masked-LM probes over datasets and serves the results.
#[derive(Parser)]
#[command(name = "probe", version)]
struct Cli {
    /// Run store directory.
    #[arg(long, global = true, env = "PROBE_STORE_DIR", default_value = "probe-store")]
    store: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Records,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Substituted,
    MaskPosition,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profiles {
    Eager,
    Lazy,
}

#[derive(Subcommand)]
enum Command {
    /// Probe a backend with one or more datasets and wait for the reports.
    Run {
        /// Dataset file or registered dataset id; repeatable.
        #[arg(long = "dataset", required = true)]
        datasets: Vec<String>,
        /// Backend base URL, or `builtin:mock`.
        #[arg(long, env = "PROBE_BACKEND_URL", default_value = MOCK_ENDPOINT)]
        backend: String,
        #[arg(long, default_value_t = DEFAULT_LAYER)]
        layer: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_enum, default_value = "lazy")]
        profiles: Profiles,
        #[arg(long, value_enum, default_value = "substituted")]
        source: Source,
        /// Concurrent requests to the backend.
        #[arg(long, default_value_t = 8)]
        max_in_flight: usize,
    },
    /// Print the report of a run for one dataset.
    Report {
        #[arg(long)]
        run: String,
        /// `inconsistent`, `semantic` or a dataset id.
        #[arg(long)]
        dataset: String,
    },
    /// Write every report of a run as a table or as JSON records.
    Export {
        #[arg(long)]
        run: String,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Only this dataset (kind or id).
        #[arg(long)]
        dataset: Option<String>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List runs and registered datasets.
    List,
    /// Print the sentence view of one sentence as JSON.
    View {
        #[arg(long)]
        run: String,
        #[arg(long)]
        sentence: String,
        /// Compute missing profiles through this backend.
        #[arg(long, env = "PROBE_BACKEND_URL")]
        backend: Option<String>,
    },
    /// Serve the run API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Backend used by runs started without an endpoint.
        #[arg(long, env = "PROBE_BACKEND_URL", default_value = MOCK_ENDPOINT)]
        backend: String,
    },
    /// Serve the mock backend over the wire protocol.
    ServeMock {
        #[arg(long, default_value = "127.0.0.1:8090")]
        addr: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            datasets,
            backend,
            layer,
            k,
            profiles,
            source,
            max_in_flight,
        } => {
            let params = RunParams {
                layer,
                k,
                profiles: match profiles {
                    Profiles::Eager => ProfileMode::Eager,
                    Profiles::Lazy => ProfileMode::Lazy,
                },
                source: match source {
                    Source::Substituted => EmbeddingSource::Substituted,
                    Source::MaskPosition => EmbeddingSource::MaskPosition,
                },
                max_in_flight,
            };
            run(&cli.store, &datasets, &backend, params)
        }
        Command::Report { run, dataset } => {
            let svc = open(&cli.store)?;
            print!("{}", render_table(&svc.get_report(&run, &dataset)?.report));
            Ok(())
        }
        Command::Export { run, format, dataset, out } => export(&cli.store, &run, format, dataset.as_deref(), out),
        Command::List => list(&cli.store),
        Command::View { run, sentence, backend } => {
            let svc = open(&cli.store)?;
            if let Some(endpoint) = backend {
                svc.attach_backend(&run, transport_for(&endpoint).map_err(anyhow::Error::msg)?, &endpoint)?;
                svc.ensure_profiles(&run, &sentence)?;
            }
            println!("{}", serde_json::to_string_pretty(&svc.get_sentence_view(&run, &sentence)?)?);
            Ok(())
        }
        Command::Serve { addr, backend } => {
            let state = ApiState {
                service: Arc::new(open(&cli.store)?),
                default_endpoint: backend,
            };
            runtime()?.block_on(serve(&addr, api_router(state))).with_context(|| format!("serving on {addr}"))
        }
        Command::ServeMock { addr, seed } => {
            let backend = Arc::new(MockBackend::new(seed, fwprobe_core::gateway::DEFAULT_VOCAB));
            runtime()?.block_on(serve(&addr, wire_router(backend))).with_context(|| format!("serving on {addr}"))
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn open(store: &Path) -> Result<ProbeService> {
    ProbeService::open(store).with_context(|| format!("opening store {}", store.display()))
}

fn run(store: &Path, datasets: &[String], backend: &str, params: RunParams) -> Result<()> {
    let svc = open(store)?;
    let mut ids = Vec::new();
    for d in datasets {
        let path = Path::new(d);
        if path.is_file() {
            let dataset = load_dataset(path).with_context(|| format!("loading {d}"))?;
            let entry = svc.register_dataset(&dataset)?;
            eprintln!("registered {} ({} items) from {d}", entry.dataset_id, entry.total);
            ids.push(entry.dataset_id);
        } else {
            ids.push(d.clone());
        }
    }
    let transport = transport_for(backend).map_err(anyhow::Error::msg)?;
    let run_id = svc.start_run(transport, backend, &ids, params)?;
    eprintln!("started {run_id}");
    let view = wait_with_progress(&svc, &run_id)?;
    if view.status != RunStatus::Complete {
        bail!("{run_id} {}: {}", view.status, view.cause.unwrap_or_default());
    }
    println!("{run_id}");
    for dataset in &view.reports {
        print!("{}", render_table(&svc.get_report(&run_id, dataset)?.report));
    }
    Ok(())
}

fn wait_with_progress(svc: &ProbeService, run_id: &str) -> Result<RunView> {
    let finished = AtomicBool::new(false);
    std::thread::scope(|scope| {
        scope.spawn(|| {
            let mut last = usize::MAX;
            while !finished.load(Ordering::Relaxed) {
                if let Ok(v) = svc.get_run(run_id) {
                    if v.progress.done != last {
                        last = v.progress.done;
                        log::info!("{run_id}: {}/{} sentences", v.progress.done, v.progress.total);
                    }
                }
                std::thread::sleep(Duration::from_millis(500));
            }
        });
        let view = svc.wait(run_id);
        finished.store(true, Ordering::Relaxed);
        Ok(view?)
    })
}

fn export(store: &Path, run: &str, format: Format, dataset: Option<&str>, out: Option<PathBuf>) -> Result<()> {
    let svc = open(store)?;
    let datasets = match dataset {
        Some(d) => vec![d.to_string()],
        None => svc.get_run(run)?.reports,
    };
    if datasets.is_empty() {
        bail!("{run} has no reports");
    }
    let mut text = String::new();
    for d in &datasets {
        let report = svc.get_report(run, d)?.report;
        text.push_str(&match format {
            Format::Table => render_table(&report),
            Format::Records => render_records(&report),
        });
    }
    match out {
        Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn list(store: &Path) -> Result<()> {
    let svc = open(store)?;
    println!("datasets:");
    for d in svc.list_datasets() {
        println!("  {}  {:<12} {:>5} items", d.dataset_id, d.kind.as_str(), d.total);
    }
    println!("runs:");
    for r in svc.list_runs()? {
        let backend = r.backend.as_ref().map_or("-", |b| b.backend_id.as_str());
        println!(
            "  {}  {:<9} {:<10} layer {:>2} k {:>2}  {}/{}  {}",
            r.run_id,
            r.status.as_str(),
            backend,
            r.layer,
            r.k,
            r.progress.done,
            r.progress.total,
            r.cause.unwrap_or_default()
        );
    }
    Ok(())
}
