use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use clap::Args;
use classlist_core::sim::fig4_world;
use classlist_core::{GoldBank, TaxonomyForest};
use classlist_service::{router, ServiceConfig, SystemClock, TaskService};

use crate::simulate::{ConfigFile, EngineFlags};
use crate::{Classify, CmdResult, Failure, Fixture};

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Taxonomy as CSV (make,model,body,year,trim,images) or JSON lines.
    #[arg(long, required_unless_present = "fixture")]
    pub taxonomy: Option<PathBuf>,
    /// Gold bank as JSON lines.
    #[arg(long, required_unless_present = "fixture")]
    pub golds: Option<PathBuf>,
    /// Serve a built-in fixture instead of files.
    #[arg(long, value_enum, conflicts_with_all = ["taxonomy", "golds"])]
    pub fixture: Option<Fixture>,
    /// TOML file; only its `[engine]` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineFlags,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Seconds a worker may hold a task before it is reissued.
    #[arg(long, default_value_t = 600)]
    pub lease_secs: u64,
    /// Checkpoint and vote log directory; restarts resume from it.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Wait for `POST /api/rounds/advance` before each new round.
    #[arg(long)]
    pub manual_rounds: bool,
}

pub fn run(a: ServeArgs) -> CmdResult {
    // validate every input before anything touches the data directory
    let (forest, golds) = match (a.fixture, &a.taxonomy, &a.golds) {
        (Some(Fixture::Fig4), _, _) => {
            let w = fig4_world(false);
            (w.forest, w.golds)
        }
        (None, Some(t), Some(g)) => {
            let forest = TaxonomyForest::from_path(t).config(t.display())?;
            let golds = GoldBank::from_path(g).config(g.display())?;
            golds.validate().config(g.display())?;
            (forest, golds)
        }
        _ => return Err(Failure::Config("--taxonomy and --golds are required".into())),
    };
    let mut engine = ConfigFile::load(a.config.as_deref())?.engine;
    a.engine.apply(&mut engine)?;
    if a.lease_secs == 0 {
        return Err(Failure::Config("--lease-secs must be positive".into()));
    }
    let config = ServiceConfig {
        lease_duration_ms: a.lease_secs * 1000,
        auto_advance: !a.manual_rounds,
        data_dir: a.data_dir.clone(),
    };

    let rt = tokio::runtime::Runtime::new().runtime("starting runtime")?;
    let listener = rt
        .block_on(tokio::net::TcpListener::bind(a.bind))
        .config(format!("binding {}", a.bind))?;
    let addr = listener.local_addr().runtime("reading bound address")?;

    let service = TaskService::open(forest, golds, engine, config, Arc::new(SystemClock))
        .config("opening run state")?;
    let shared = Arc::new(Mutex::new(service));
    println!("listening on http://{addr}");
    let _ = std::io::stdout().flush();

    rt.block_on(async {
        axum::serve(listener, router(shared.clone()))
            .with_graceful_shutdown(shutdown_signal())
            .await
    })
    .runtime("serving")?;

    let mut svc = shared.lock().unwrap_or_else(|e| e.into_inner());
    svc.persist().runtime("writing checkpoint")?;
    let stats = svc.stats();
    println!(
        "stopped: {} task(s) accepted, {} component(s)",
        stats.progress.tasks_accepted, stats.progress.components
    );
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
