//! HTTP and WebSocket front end over a [`Hub`].

pub mod config;
mod routes;
mod stream;

use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use huddle_core::agent::handraise::{complete_agent_stage, run_hand_raising_round};
use huddle_core::engine::Job;
use huddle_core::ids::ExperimentId;
use huddle_core::llm::http::{AuthHeader, HttpProvider};
use huddle_core::llm::{Gateway, KeyStore, MasterKey, ScriptedProvider, DEFAULT_CONCURRENCY_CAP};
use huddle_core::service::{Allowlist, Frame, Hub, HubOptions};
use huddle_core::time::{SystemClock, ThreadSleeper};
use tokio::sync::broadcast;

pub use config::{ConfigError, ServerConfig};
pub use routes::router;

const FRAME_BUFFER: usize = 4096;
const OPENAI_URL: &str = "https://api.openai.com/v1/chat/completions";

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("binding {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

impl ServeError {
    /// Process exit code for `serve`.
    pub fn exit_code(&self) -> i32 {
        match self {
            ServeError::Config(_) => 2,
            ServeError::Bind { .. } => 3,
            ServeError::Io(_) => 1,
        }
    }
}

pub struct AppState {
    hub: Mutex<Hub>,
    frames: broadcast::Sender<Arc<Frame>>,
    join_delay: Duration,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    pub fn new(hub: Hub, join_delay: Duration) -> SharedState {
        let (frames, _) = broadcast::channel(FRAME_BUFFER);
        Arc::new(AppState {
            hub: Mutex::new(hub),
            frames,
            join_delay,
        })
    }

    fn lock(&self) -> MutexGuard<'_, Hub> {
        // A panic mid-command leaves the hub as it was before the command:
        // engines only mutate state through apply.
        self.hub.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<Frame>> {
        self.frames.subscribe()
    }

    /// Runs `f` against the hub, then publishes frames and starts provider
    /// work it produced.
    pub fn with_hub<T>(self: &Arc<Self>, f: impl FnOnce(&mut Hub) -> T) -> T {
        let (out, frames, jobs) = {
            let mut hub = self.lock();
            let out = f(&mut hub);
            (out, hub.drain_frames(), hub.take_jobs())
        };
        for fr in frames {
            // No receivers is fine.
            let _ = self.frames.send(Arc::new(fr));
        }
        for (exp, job) in jobs {
            self.spawn_job(exp, job);
        }
        out
    }

    pub fn read<T>(&self, f: impl FnOnce(&Hub) -> T) -> T {
        f(&self.lock())
    }

    fn spawn_job(self: &Arc<Self>, exp: ExperimentId, job: Job) {
        let state = self.clone();
        let (gateway, clock) = state.read(|h| (h.gateway(), h.clock()));
        tokio::task::spawn_blocking(move || match job {
            Job::Round(r) => {
                let out = run_hand_raising_round(&r.request, &gateway, clock.as_ref());
                state.with_hub(|h| {
                    if let Err(e) = h.finish_round(&exp, &r, out) {
                        tracing::warn!(experiment = %exp, error = %e, "finishing round");
                    }
                });
            }
            Job::Stage(s) => {
                let (res, logs) = complete_agent_stage(&s.task, &gateway, clock.as_ref());
                state.with_hub(|h| {
                    if let Err(e) = h.finish_stage_task(&exp, &s, res, logs) {
                        tracing::warn!(experiment = %exp, error = %e, "finishing agent stage");
                    }
                });
            }
        });
    }

    pub fn tick(self: &Arc<Self>) {
        self.with_hub(|h| {
            if let Err(e) = h.tick() {
                tracing::warn!(error = %e, "tick");
            }
        });
    }
}

fn invalid(path: &Path, message: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn gateway(cfg: &ServerConfig) -> Result<Gateway, ConfigError> {
    let master = MasterKey::from_file(&cfg.master_key_path).map_err(|e| invalid(&cfg.master_key_path, e))?;
    let key_file = cfg.data_dir.join("keys.json");
    let keys = KeyStore::open(master, key_file.clone()).map_err(|e| invalid(&key_file, e))?;
    let mut gw = Gateway::new(keys, Arc::new(SystemClock), Arc::new(ThreadSleeper));
    let entries = match &cfg.providers_path {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| invalid(p, e))?;
            let file: config::ProvidersFile = serde_json::from_slice(&bytes).map_err(|e| invalid(p, e))?;
            file.providers
        }
        None => vec![config::ProviderEntry {
            id: "openai".into(),
            endpoint_url: Some(OPENAI_URL.into()),
            key_header: None,
            script: None,
            concurrency: None,
        }],
    };
    for e in entries {
        let cap = e.concurrency.unwrap_or(DEFAULT_CONCURRENCY_CAP);
        match (&e.script, &e.endpoint_url) {
            (Some(script), _) => {
                let base = cfg.providers_path.as_deref().and_then(Path::parent).unwrap_or(Path::new("."));
                let path = base.join(script);
                let p = ScriptedProvider::from_file(&path).map_err(|err| invalid(&path, err))?;
                gw.register_provider_with_cap(&e.id, "scripted://", Arc::new(p), cap);
            }
            (None, Some(url)) => {
                let auth = e.key_header.clone().map_or(AuthHeader::Bearer, AuthHeader::Custom);
                gw.register_provider_with_cap(&e.id, url, Arc::new(HttpProvider::new(auth)), cap);
            }
            (None, None) => {
                let p = cfg.providers_path.clone().unwrap_or_default();
                return Err(invalid(&p, format!("provider '{}' needs endpointUrl or script", e.id)));
            }
        }
    }
    Ok(gw)
}

/// Reads the allowlist, key store and providers, and restores persisted
/// experiments.
pub fn load(cfg: &ServerConfig) -> Result<SharedState, ServeError> {
    let allowlist = Allowlist::load(&cfg.allowlist_path).map_err(|e| invalid(&cfg.allowlist_path, e))?;
    std::fs::create_dir_all(&cfg.data_dir).map_err(|e| invalid(&cfg.data_dir, e))?;
    let gw = gateway(cfg)?;
    let options = HubOptions {
        data_dir: Some(cfg.data_dir.clone()),
        sync: cfg.sync,
        id_seed: None,
    };
    let mut hub = Hub::new(allowlist, Arc::new(gw), Arc::new(SystemClock), options);
    let n = hub.load().map_err(|e| invalid(&cfg.data_dir, e))?;
    tracing::info!(experiments = n, "restored");
    Ok(AppState::new(hub, cfg.join_delay))
}

/// Loads state, binds, logs the listening address and serves until ctrl-c.
/// Owns its runtime: the blocking provider clients must be built and dropped
/// outside async context.
pub fn serve(cfg: ServerConfig) -> Result<(), ServeError> {
    let state = load(&cfg)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let result = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(cfg.bind).await.map_err(|source| ServeError::Bind {
            addr: cfg.bind.to_string(),
            source,
        })?;
        let addr = listener.local_addr()?;
        tracing::info!(%addr, version = env!("CARGO_PKG_VERSION"), "listening on {addr}");
        run(listener, state.clone(), cfg.tick).await
    });
    drop(rt);
    drop(state);
    result
}

/// Serves on an already bound listener.
pub async fn run(listener: tokio::net::TcpListener, state: SharedState, tick: Duration) -> Result<(), ServeError> {
    let ticker = state.clone();
    tokio::spawn(async move {
        let mut every = tokio::time::interval(tick);
        every.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        loop {
            every.tick().await;
            let s = ticker.clone();
            // Provider calls are blocking; ticks are cheap but keep them
            // off the reactor too.
            let _ = tokio::task::spawn_blocking(move || s.tick()).await;
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
