//! Cost-aware routing between completers.
//!
//! A small classifier reads prefix features and picks the completer to run.
//! Training labels are the completer with the best partial F1 on each
//! sample; the loss trades cross-entropy against expected latency cost.

mod embed;
mod mlp;
mod search;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use embed::{hashed_embedding, Embedded, EmbeddingProvider, EMBED_DIM, NGRAM_SIZES};
pub use mlp::{
    argmax, combined_loss, cross_entropy, expected_cost, logit_grad, predict, softmax, to_matrix, train,
    Dense, Mlp, Optimizer, TrainConfig, Trained, DEFAULT_BATCH, DEFAULT_DROPOUT, DEFAULT_MOMENTUM, LOG_EPS,
};
pub use search::{
    hyperparameter_search, pareto_frontier, select_profiles, Profiles, SearchConfig, SearchData, SearchSpace,
    Trial, DEFAULT_DELTA,
};

use crate::binfile;
use crate::completer::{Completer, Query, Suggestion};
use crate::dialog::{clip_prefix, PrefixSample};
use crate::error::{Error, Result};
use crate::metrics::{self, instance_f1, EvalConfig, MetricRow, TypingMode};

/// Per-model latency normalized by the slowest model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub model_ids: Vec<String>,
    pub latencies_s: Vec<f64>,
    pub costs: Vec<f64>,
    pub max_latency_s: f64,
}

impl CostProfile {
    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    /// Index of the cheapest model; ties go to the lower index.
    pub fn cheapest(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.costs.iter().enumerate() {
            if c < self.costs[best] {
                best = i;
            }
        }
        best
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.model_ids.iter().position(|m| m == id)
    }
}

pub fn cost_profile<S: AsRef<str>>(latencies: &[(S, f64)]) -> Result<CostProfile> {
    if latencies.is_empty() {
        return Err(Error::Empty("latencies"));
    }
    if let Some((id, l)) = latencies.iter().find(|(_, l)| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::invalid(format!("latency of {} must be positive, got {l}", id.as_ref())));
    }
    let max = latencies.iter().map(|(_, l)| *l).fold(0.0, f64::max);
    Ok(CostProfile {
        model_ids: latencies.iter().map(|(id, _)| id.as_ref().to_owned()).collect(),
        latencies_s: latencies.iter().map(|(_, l)| *l).collect(),
        costs: latencies.iter().map(|(_, l)| l / max).collect(),
        max_latency_s: max,
    })
}

/// Index of the completion with the highest partial F1 against `gold`.
/// Ties, including the all-zero case, go to the cheapest model.
pub fn gold_label<S: AsRef<str>>(gold: &str, completions: &[S], costs: &[f64]) -> Result<usize> {
    if completions.len() < 2 {
        return Err(Error::invalid("gold labels need at least two candidates"));
    }
    if completions.len() != costs.len() {
        return Err(Error::LengthMismatch {
            left: completions.len(),
            right: costs.len(),
        });
    }
    let f1: Vec<f64> = completions.iter().map(|c| instance_f1(c.as_ref(), gold)).collect();
    Ok(best_by_f1(&f1, costs))
}

fn best_by_f1(f1: &[f64], costs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..f1.len() {
        if f1[i] > f1[best] || (f1[i] == f1[best] && costs[i] < costs[best]) {
            best = i;
        }
    }
    best
}

/// How traffic was split across models, and what each one costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub shares: Vec<f64>,
    pub latencies_s: Vec<f64>,
    pub router_latency_s: f64,
}

impl RoutingStats {
    pub fn from_choices(choices: &[usize], latencies_s: &[f64], router_latency_s: f64) -> Self {
        let mut shares = vec![0.0; latencies_s.len()];
        for &c in choices {
            shares[c] += 1.0;
        }
        let n = choices.len().max(1) as f64;
        shares.iter_mut().for_each(|s| *s /= n);
        RoutingStats {
            shares,
            latencies_s: latencies_s.to_vec(),
            router_latency_s,
        }
    }

    pub fn total_latency(&self) -> f64 {
        total_latency(&self.shares, &self.latencies_s, self.router_latency_s)
    }
}

/// `L_router + Σ p_i·L_i`.
pub fn total_latency(shares: &[f64], latencies_s: &[f64], router_latency_s: f64) -> f64 {
    router_latency_s + shares.iter().zip(latencies_s).map(|(p, l)| p * l).sum::<f64>()
}

/// Text the router embeds for a sample: the prefix, optionally after the
/// previous turn.
pub fn feature_text(sample: &PrefixSample, prefix: &str, with_context: bool) -> String {
    match sample.context.history.last() {
        Some(t) if with_context => format!("{}\n{}", t.text, prefix),
        _ => prefix.to_owned(),
    }
}

const MAGIC: &[u8; 8] = b"MACROUTE";
const VERSION: u32 = 1;

/// On-disk layout. The training config is kept as JSON because its tagged
/// optimizer enum has no bincode encoding.
#[derive(Serialize, Deserialize)]
struct RouterFile {
    profile: CostProfile,
    config: String,
    mlp: Mlp,
    with_context: bool,
    loss_curve: Vec<f64>,
}

/// Everything needed to route at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterModel {
    pub profile: CostProfile,
    pub config: TrainConfig,
    pub mlp: Mlp,
    #[serde(default)]
    pub with_context: bool,
    pub loss_curve: Vec<f64>,
}

impl RouterModel {
    pub fn fit(features: &Array2<f64>, labels: &[usize], profile: CostProfile, config: TrainConfig) -> Result<Self> {
        let trained = train(features.view(), labels, &profile.costs, &config)?;
        Ok(RouterModel {
            profile,
            config,
            mlp: trained.mlp,
            with_context: false,
            loss_curve: trained.loss_curve,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = RouterFile {
            profile: self.profile.clone(),
            config: serde_json::to_string(&self.config)?,
            mlp: self.mlp.clone(),
            with_context: self.with_context,
            loss_curve: self.loss_curve.clone(),
        };
        binfile::save(path.as_ref(), MAGIC, VERSION, &file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: RouterFile = binfile::load(path.as_ref(), MAGIC, VERSION)?;
        Ok(RouterModel {
            profile: file.profile,
            config: serde_json::from_str(&file.config)?,
            mlp: file.mlp,
            with_context: file.with_context,
            loss_curve: file.loss_curve,
        })
    }

    pub fn probabilities(&self, features: &[f32]) -> Vec<f64> {
        self.mlp.predict_one(features)
    }

    pub fn route_features(&self, features: &[f32]) -> usize {
        argmax(&self.probabilities(features))
    }
}

/// A trained router plus its feature extractor.
#[derive(Debug, Clone)]
pub struct Router {
    pub model: RouterModel,
    pub embedder: EmbeddingProvider,
}

impl Router {
    pub fn new(model: RouterModel, embedder: EmbeddingProvider) -> Self {
        Router { model, embedder }
    }

    pub fn route(&self, text: &str) -> usize {
        self.model.route_features(&self.embedder.embed(text).vector)
    }

    pub fn route_with_probs(&self, text: &str) -> (usize, Vec<f64>) {
        let p = self.model.probabilities(&self.embedder.embed(text).vector);
        (argmax(&p), p)
    }
}

/// Routes each query, then runs the chosen completer.
///
/// Reported latency is the router's own time plus the chosen completer's.
pub struct RoutedCompleter {
    id: String,
    router: Router,
    completers: Vec<Arc<dyn Completer>>,
}

impl RoutedCompleter {
    pub fn new(id: impl Into<String>, router: Router, completers: Vec<Arc<dyn Completer>>) -> Result<Self> {
        let ids = &router.model.profile.model_ids;
        if ids.len() != completers.len() {
            return Err(Error::LengthMismatch {
                left: ids.len(),
                right: completers.len(),
            });
        }
        if let Some((want, got)) = ids.iter().zip(&completers).find(|(w, c)| w.as_str() != c.id()) {
            return Err(Error::invalid(format!("router expects model {want} but got {}", got.id())));
        }
        Ok(RoutedCompleter {
            id: id.into(),
            router,
            completers,
        })
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn choose(&self, query: &Query<'_>) -> usize {
        let text = match query.context.history.last() {
            Some(t) if self.router.model.with_context => format!("{}\n{}", t.text, query.prefix),
            _ => query.prefix.to_owned(),
        };
        self.router.route(&text)
    }
}

impl Completer for RoutedCompleter {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, query: &Query<'_>) -> Suggestion {
        let start = Instant::now();
        let i = self.choose(query);
        let routing_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut s = self.completers[i].complete_timed(query);
        s.latency_ms += routing_ms;
        s
    }
}

/// Per-sample completions of every candidate model with their scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub dialog_id: String,
    pub prefix: String,
    pub completion: String,
    /// Text the router embeds.
    pub feature_text: String,
    pub suggestions: Vec<String>,
    /// Instance partial F1 per model; 0 where nothing was shown.
    pub f1: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub profile: CostProfile,
    pub rows: Vec<RoutingRow>,
}

impl RoutingTable {
    /// Assembles rows from precomputed one-shot suggestions, `per_model[m][s]`.
    pub fn build(
        samples: &[PrefixSample],
        per_model: &[Vec<Suggestion>],
        profile: CostProfile,
        threshold: f64,
        with_context: bool,
    ) -> Result<Self> {
        if per_model.len() != profile.len() {
            return Err(Error::LengthMismatch {
                left: per_model.len(),
                right: profile.len(),
            });
        }
        if profile.len() < 2 {
            return Err(Error::invalid("routing needs at least two models"));
        }
        if let Some(bad) = per_model.iter().find(|m| m.len() != samples.len()) {
            return Err(Error::LengthMismatch {
                left: bad.len(),
                right: samples.len(),
            });
        }
        let rows = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let shown: Vec<&str> = per_model
                    .iter()
                    .map(|m| if m[i].triggers(threshold) { m[i].text.as_str() } else { "" })
                    .collect();
                let f1: Vec<f64> = shown.iter().map(|t| instance_f1(t, &s.completion)).collect();
                RoutingRow {
                    dialog_id: s.dialog_id.clone(),
                    prefix: s.prefix.clone(),
                    completion: s.completion.clone(),
                    feature_text: feature_text(s, &s.prefix, with_context),
                    suggestions: shown.iter().map(|t| (*t).to_owned()).collect(),
                    label: best_by_f1(&f1, &profile.costs),
                    f1,
                }
            })
            .collect();
        Ok(RoutingTable { profile, rows })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn features(&self, embedder: &EmbeddingProvider) -> Vec<Vec<f32>> {
        self.rows.par_iter().map(|r| embedder.embed(&r.feature_text).vector).collect()
    }

    /// Mean instance F1 and traffic split when row `i` goes to `choices[i]`.
    pub fn score(&self, choices: &[usize], router_latency_s: f64) -> RoutedScore {
        let n = self.rows.len().max(1) as f64;
        let mean_f1 = self.rows.iter().zip(choices).map(|(r, &c)| r.f1[c]).sum::<f64>() / n;
        let accuracy = self
            .rows
            .iter()
            .zip(choices)
            .filter(|(r, &c)| r.label == c)
            .count() as f64
            / n;
        let expected_cost = choices.iter().map(|&c| self.profile.costs[c]).sum::<f64>() / n;
        let stats = RoutingStats::from_choices(choices, &self.profile.latencies_s, router_latency_s);
        RoutedScore {
            mean_f1,
            accuracy,
            expected_cost,
            total_latency_s: stats.total_latency(),
            shares: stats.shares,
        }
    }

    /// The per-sample best model, which is the gold label.
    pub fn oracle_choices(&self) -> Vec<usize> {
        self.labels()
    }

    pub fn single_model_choices(&self, m: usize) -> Vec<usize> {
        vec![m; self.rows.len()]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedScore {
    /// Mean instance partial F1 over all samples.
    pub mean_f1: f64,
    /// Agreement with the gold labels.
    pub accuracy: f64,
    pub expected_cost: f64,
    pub total_latency_s: f64,
    pub shares: Vec<f64>,
}

/// Row of metrics when every sample gets its best completion.
///
/// Returns the row and the chosen model per sample.
pub fn oracle_upper_bound(
    samples: &[PrefixSample],
    per_model: &[Vec<Suggestion>],
    costs: &[f64],
    cfg: &EvalConfig,
) -> Result<(MetricRow, Vec<usize>)> {
    if per_model.is_empty() || per_model.len() != costs.len() {
        return Err(Error::LengthMismatch {
            left: per_model.len(),
            right: costs.len(),
        });
    }
    let choices: Vec<usize> = (0..samples.len())
        .map(|i| {
            let f1: Vec<f64> = per_model
                .iter()
                .map(|m| {
                    if m[i].triggers(cfg.trigger_threshold) {
                        instance_f1(&m[i].text, &samples[i].completion)
                    } else {
                        0.0
                    }
                })
                .collect();
            best_by_f1(&f1, costs)
        })
        .collect();
    let picked: Vec<Suggestion> = choices.iter().enumerate().map(|(i, &m)| per_model[m][i].clone()).collect();
    let row = routed_row("oracle", samples, &picked, cfg)?;
    Ok((row, choices))
}

/// Metric row for one suggestion per sample, with split-point traces.
pub fn routed_row(id: &str, samples: &[PrefixSample], picked: &[Suggestion], cfg: &EvalConfig) -> Result<MetricRow> {
    let traces: Vec<_> = samples
        .iter()
        .zip(picked)
        .map(|(s, p)| metrics::split_point_trace(s, p, cfg.trigger_threshold, cfg.policy))
        .collect();
    let cfg = EvalConfig {
        mode: TypingMode::SplitPoint,
        ..cfg.clone()
    };
    metrics::assemble_row(id, samples, picked, &traces, &cfg)
}

/// Routes every sample with `router` over precomputed suggestions.
pub fn route_samples(router: &Router, samples: &[PrefixSample], max_prefix_chars: usize) -> Vec<usize> {
    samples
        .par_iter()
        .map(|s| {
            let prefix = clip_prefix(&s.prefix, max_prefix_chars);
            router.route(&feature_text(s, prefix, router.model.with_context))
        })
        .collect()
}

/// Writes feature rows as `MACF`, version, rows, dims, then `f32` LE values.
pub fn write_features(path: impl AsRef<Path>, rows: &[Vec<f32>]) -> Result<()> {
    let path = path.as_ref();
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid("feature rows differ in length"));
    }
    let mut buf = Vec::with_capacity(16 + rows.len() * dim * 4);
    buf.extend_from_slice(b"MACF");
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in rows {
        r.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn header(bytes: &[u8], magic: &[u8; 4], fields: usize) -> Result<Vec<u32>> {
    let need = 8 + 4 * fields;
    if bytes.len() < need || &bytes[..4] != magic {
        return Err(Error::Format(format!("not a {} file", String::from_utf8_lossy(magic))));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != 1 {
        return Err(Error::Format(format!("unsupported version {}", word(0))));
    }
    Ok((1..=fields).map(word).collect())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<Vec<f32>>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = header(&bytes, b"MACF", 2)?;
    let (n, dim) = (h[0] as usize, h[1] as usize);
    let body = &bytes[16..];
    if body.len() != n * dim * 4 {
        return Err(Error::Format(format!("expected {} feature bytes, found {}", n * dim * 4, body.len())));
    }
    Ok(body
        .chunks_exact(4 * dim.max(1))
        .take(n)
        .map(|r| r.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
        .collect())
}

/// Writes labels as `MACL`, version, count, then `u32` LE values.
pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(12 + labels.len() * 4);
    buf.extend_from_slice(b"MACL");
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    labels.iter().for_each(|&l| buf.extend_from_slice(&(l as u32).to_le_bytes()));
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = header(&bytes, b"MACL", 1)?[0] as usize;
    let body = &bytes[12..];
    if body.len() != n * 4 {
        return Err(Error::Format(format!("expected {} label bytes, found {}", n * 4, body.len())));
    }
    Ok(body
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostEntry {
    pub id: String,
    pub latency_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostsFile {
    pub models: Vec<CostEntry>,
}

impl CostsFile {
    pub fn from_profile(p: &CostProfile) -> Self {
        CostsFile {
            models: p
                .model_ids
                .iter()
                .zip(&p.latencies_s)
                .map(|(id, &latency_s)| CostEntry {
                    id: id.clone(),
                    latency_s,
                })
                .collect(),
        }
    }

    pub fn profile(&self) -> Result<CostProfile> {
        let pairs: Vec<(&str, f64)> = self.models.iter().map(|m| (m.id.as_str(), m.latency_s)).collect();
        cost_profile(&pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
