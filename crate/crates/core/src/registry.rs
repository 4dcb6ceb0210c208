//! Named completers built from config, and the router presets.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::completer::{Completer, Query, Suggestion};
use crate::dialog::{PrefixSample, DEFAULT_IMAGE_TOKEN};
use crate::error::{Error, Result};
use crate::ngram::{QbModel, QueryBlazer};
use crate::router::{EmbeddingProvider, RoutedCompleter, Router, RouterModel};
use crate::trie::{Mpc, MpcIndex, MpcPlusPlus};
use crate::vlm::{EndpointConfig, StubRule, VlmCompleter};

/// Average latencies in seconds of the reference models.
pub const MINICPM_V_LATENCY_S: f64 = 2.080;
pub const PALIGEMMA_LATENCY_S: f64 = 1.490;
pub const QWEN2_VL_LATENCY_S: f64 = 0.733;
pub const QB_LATENCY_S: f64 = 0.001;

pub const ROUTER_2: &[&str] = &["qb", "qwen2-vl"];
pub const ROUTER_4: &[&str] = &["qb", "qwen2-vl", "paligemma", "minicpm-v"];

/// Model ids of a named router preset.
pub fn preset(name: &str) -> Option<&'static [&'static str]> {
    match name {
        "router-2" => Some(ROUTER_2),
        "router-4" => Some(ROUTER_4),
        _ => None,
    }
}

/// Reference latency of a model id, if it is one of the known ones.
pub fn reference_latency(id: &str) -> Option<f64> {
    match id {
        "minicpm-v" => Some(MINICPM_V_LATENCY_S),
        "paligemma" => Some(PALIGEMMA_LATENCY_S),
        "qwen2-vl" => Some(QWEN2_VL_LATENCY_S),
        "qb" => Some(QB_LATENCY_S),
        _ => None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Mpc {
        path: PathBuf,
    },
    Mpcpp {
        path: PathBuf,
        #[serde(default)]
        min_backoff: Option<usize>,
    },
    Qb {
        path: PathBuf,
        #[serde(default)]
        beam: Option<usize>,
        #[serde(default)]
        max_tokens: Option<usize>,
    },
    Stub {
        #[serde(default)]
        rules: Vec<StubRule>,
        /// JSON list of rules, read in addition to `rules`.
        #[serde(default)]
        rules_file: Option<PathBuf>,
        /// Actually wait for each rule's latency.
        #[serde(default)]
        sleep: bool,
    },
    Vlm {
        endpoint: EndpointConfig,
    },
    /// Knows every evaluation utterance; for sanity checks.
    Perfect,
    /// Never suggests anything.
    Never,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    /// Average latency used for routing costs.
    #[serde(default)]
    pub latency_s: Option<f64>,
    #[serde(flatten)]
    pub kind: ModelKind,
}

/// A trained router file served as one more completer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterSpec {
    pub id: String,
    pub path: PathBuf,
    /// Embedding service; the hashed embedding is used when absent.
    #[serde(default)]
    pub embedding_url: Option<String>,
    #[serde(default = "default_embedding_timeout")]
    pub embedding_timeout_ms: u64,
}

fn default_embedding_timeout() -> u64 {
    2_000
}

#[derive(Clone)]
pub struct Entry {
    pub id: String,
    pub latency_s: Option<f64>,
    pub completer: Arc<dyn Completer>,
}

impl Entry {
    /// Configured latency, else the reference latency of a known model id.
    pub fn routing_latency(&self) -> Result<f64> {
        self.latency_s
            .or_else(|| reference_latency(&self.id))
            .ok_or_else(|| Error::invalid(format!("model {} needs latency_s for routing", self.id)))
    }
}

#[derive(Clone, Default)]
pub struct CompleterRegistry {
    entries: Vec<Entry>,
}

impl CompleterRegistry {
    pub fn new() -> Self {
        CompleterRegistry::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, latency_s: Option<f64>, completer: Arc<dyn Completer>) {
        let id = id.into();
        self.entries.retain(|e| e.id != id);
        self.entries.push(Entry {
            id,
            latency_s,
            completer,
        });
    }

    /// Builds every spec it can. Specs that fail come back with their error
    /// instead of aborting the rest. Relative paths resolve against `base`;
    /// `samples` feed the `perfect` kind.
    pub fn build(specs: &[ModelSpec], base: &Path, samples: &[PrefixSample]) -> (Self, Vec<(String, Error)>) {
        let mut reg = CompleterRegistry::new();
        let mut errors = Vec::new();
        for spec in specs {
            match build_one(spec, base, samples) {
                Ok(c) => reg.insert(spec.id.clone(), spec.latency_s, c),
                Err(e) => {
                    log::error!("model {}: {e}", spec.id);
                    errors.push((spec.id.clone(), e));
                }
            }
        }
        (reg, errors)
    }

    pub fn get(&self, id: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads a router and registers it over the models named in its cost
    /// profile, which must already be registered.
    pub fn add_router(&mut self, spec: &RouterSpec, base: &Path) -> Result<()> {
        let model = RouterModel::load(resolve(base, &spec.path))?;
        let ids: Vec<&str> = model.profile.model_ids.iter().map(String::as_str).collect();
        let completers = self.select(&ids)?.into_iter().map(|e| e.completer).collect();
        let embedder = match &spec.embedding_url {
            Some(url) => EmbeddingProvider::endpoint(url.clone(), spec.embedding_timeout_ms),
            None => EmbeddingProvider::hashed(),
        };
        let routed = RoutedCompleter::new(spec.id.clone(), Router::new(model, embedder), completers)?;
        self.insert(spec.id.clone(), None, Arc::new(routed));
        Ok(())
    }

    /// Completers and latencies for `ids`, in that order.
    pub fn select(&self, ids: &[&str]) -> Result<Vec<Entry>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("model {id} is not registered")))
            })
            .collect()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn build_one(spec: &ModelSpec, base: &Path, samples: &[PrefixSample]) -> Result<Arc<dyn Completer>> {
    let id = spec.id.clone();
    Ok(match &spec.kind {
        ModelKind::Mpc { path } => {
            let idx = MpcIndex::load(resolve(base, path))?;
            Arc::new(Mpc::new(idx.prefix_trie).with_id(id))
        }
        ModelKind::Mpcpp { path, min_backoff } => {
            let idx = MpcIndex::load(resolve(base, path))?;
            let mut c = MpcPlusPlus::new(idx.suffix_index).with_id(id);
            if let Some(m) = min_backoff {
                c.min_backoff = *m;
            }
            Arc::new(c)
        }
        ModelKind::Qb { path, beam, max_tokens } => {
            let m = QbModel::load(resolve(base, path))?;
            let mut c = QueryBlazer::new(m).with_id(id);
            if let Some(b) = beam {
                c.beam = *b;
            }
            if let Some(t) = max_tokens {
                c.max_tokens = *t;
            }
            Arc::new(c)
        }
        ModelKind::Stub {
            rules,
            rules_file,
            sleep,
        } => {
            let mut all = rules.clone();
            if let Some(f) = rules_file {
                let path = resolve(base, f);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                all.extend(serde_json::from_str::<Vec<StubRule>>(&text)?);
            }
            let stub = VlmCompleter::stub(id, all);
            Arc::new(if *sleep { stub.sleeping() } else { stub })
        }
        ModelKind::Vlm { endpoint } => Arc::new(VlmCompleter::http(id, endpoint.clone())?),
        ModelKind::Perfect => Arc::new(Perfect::from_samples(id, samples)),
        ModelKind::Never => Arc::new(Never(id)),
    })
}

/// Completes each known utterance exactly, keyed by its rendered history.
pub struct Perfect {
    id: String,
    by_context: HashMap<String, Vec<String>>,
}

fn context_key(q: &Query<'_>) -> String {
    format!(
        "{}\u{1f}{:?}\u{1f}{}",
        q.context.render(q.speaker, "", DEFAULT_IMAGE_TOKEN),
        q.context.image_ref,
        q.speaker.label()
    )
}

impl Perfect {
    pub fn from_samples(id: impl Into<String>, samples: &[PrefixSample]) -> Self {
        let mut by_context: HashMap<String, Vec<String>> = HashMap::new();
        for s in samples {
            let key = context_key(&Query::for_sample(s, ""));
            let full = s.full_text();
            let list = by_context.entry(key).or_default();
            if !list.contains(&full) {
                list.push(full);
            }
        }
        Perfect {
            id: id.into(),
            by_context,
        }
    }
}

impl Completer for Perfect {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, q: &Query<'_>) -> Suggestion {
        let rest = self
            .by_context
            .get(&context_key(q))
            .and_then(|l| l.iter().find_map(|f| f.strip_prefix(q.prefix).filter(|r| !r.is_empty())));
        match rest {
            Some(r) => Suggestion::new(&self.id, r.to_owned(), 1.0),
            None => Suggestion::empty(&self.id),
        }
    }
}

pub struct Never(pub String);

impl Completer for Never {
    fn id(&self) -> &str {
        &self.0
    }

    fn complete(&self, _: &Query<'_>) -> Suggestion {
        Suggestion::empty(&self.0)
    }
}
