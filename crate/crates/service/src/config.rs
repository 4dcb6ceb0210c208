//! TOML configuration for a running service.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mac_core::dialog::{self, samples_from_dialog, DialogContext};
use mac_core::registry::{CompleterRegistry, ModelSpec, RouterSpec};
use mac_core::synth;

use crate::error::{Result, ServiceError};
use crate::service::{Assignment, Options, Service};
use crate::store::EventStore;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: SocketAddr,
    #[serde(default, flatten)]
    pub options: Options,
    /// Event log; events are kept in memory only when absent.
    #[serde(default)]
    pub store: Option<PathBuf>,
    pub pool: PoolConfig,
    pub assignment: Assignment,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub routers: Vec<RouterSpec>,
}

fn default_bind() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

/// Where session openings come from. Exactly one source must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    /// Preprocessed sample JSONL.
    #[serde(default)]
    pub samples: Option<PathBuf>,
    /// Raw dialog JSONL.
    #[serde(default)]
    pub dialogs: Option<PathBuf>,
    /// Number of generated dialogs.
    #[serde(default)]
    pub synthetic: Option<usize>,
}

impl ServiceConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|e| ServiceError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against its
    /// directory, which is returned alongside.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((ServiceConfig::from_toml(&src)?, base))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads the pool as samples, each carrying the context a session opens with.
fn load_pool(cfg: &PoolConfig, base: &Path, seed: u64) -> Result<Vec<dialog::PrefixSample>> {
    let from_dialogs = |dialogs: Vec<dialog::Dialog>| {
        let mut skipped = 0;
        dialogs
            .iter()
            .flat_map(|d| samples_from_dialog(d, seed, &mut skipped))
            .collect::<Vec<_>>()
    };
    match (&cfg.samples, &cfg.dialogs, cfg.synthetic) {
        (Some(p), None, None) => Ok(dialog::read_samples(resolve(base, p))?),
        (None, Some(p), None) => {
            let report = dialog::ingest(resolve(base, p))?;
            for e in &report.errors {
                log::warn!("skipping dialog record: {e}");
            }
            Ok(from_dialogs(report.dialogs))
        }
        (None, None, Some(n)) => Ok(from_dialogs(synth::dialogs(n, seed))),
        _ => Err(ServiceError::Config(
            "pool needs exactly one of samples, dialogs or synthetic".into(),
        )),
    }
}

/// Builds models, routers, the pool and the store, then replays the store.
pub fn build_service(cfg: &ServiceConfig, base: &Path) -> Result<Service> {
    let samples = load_pool(&cfg.pool, base, cfg.options.seed)?;
    let (mut registry, errors) = CompleterRegistry::build(&cfg.models, base, &samples);
    for (id, e) in &errors {
        log::warn!("model {id} unavailable: {e}");
    }
    for r in &cfg.routers {
        registry.add_router(r, base)?;
    }
    let pool: Vec<DialogContext> = samples.into_iter().map(|s| s.context).collect();
    let (store, records) = match &cfg.store {
        Some(p) => EventStore::open(resolve(base, p))?,
        None => (EventStore::in_memory(), Vec::new()),
    };
    let service = Service::new(registry, pool, cfg.assignment.clone(), cfg.options.clone(), store)?;
    service.replay(&records)?;
    if !records.is_empty() {
        log::info!("replayed {} events", records.len());
    }
    Ok(service)
}
