//! End-to-end benchmark: prepare data, build models, evaluate, route, and
//! write reports.
//!
//! Everything under `out_dir` except `timings.json` depends only on the
//! config and inputs.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::completer::{Completer, Suggestion};
use crate::dialog::{self, Dialog, PrefixSample, PrepConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalConfig, MetricRow, SimTrace, TypingMode};
use crate::ngram::{QbModel, QbTrainConfig, QueryBlazer};
use crate::registry::{self, CompleterRegistry, ModelSpec};
use crate::router::{
    self, cost_profile, hyperparameter_search, pareto_frontier, select_profiles, to_matrix, CostProfile,
    EmbeddingProvider, Profiles, RoutedScore, RouterModel, RoutingTable, SearchConfig, SearchData, SearchSpace,
    TrainConfig, Trial, DEFAULT_DELTA,
};
use crate::text::unit_hash;
use crate::trie::{Mpc, MpcIndex, MpcPlusPlus};

fn default_seed() -> u64 {
    7
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_min_score() -> i32 {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub build: BuildConfig,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub routers: Vec<RouterBench>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dialog JSONL file.
    #[serde(default)]
    pub dialogs: Option<PathBuf>,
    /// Number of synthetic dialogs, used when no file is given.
    #[serde(default)]
    pub synthetic: Option<usize>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_min_score")]
    pub min_score: i32,
}

/// Models trained on the training split. Each field is the id to register
/// the model under.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildConfig {
    #[serde(default)]
    pub mpc: Option<String>,
    #[serde(default)]
    pub mpcpp: Option<String>,
    #[serde(default)]
    pub qb: Option<String>,
    #[serde(default)]
    pub qb_config: QbTrainConfig,
}

fn default_router_train() -> f64 {
    0.6
}
fn default_router_val() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterBench {
    pub name: String,
    /// Preset name such as `router-2`, or an explicit list in `models`.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub models: Vec<String>,
    /// Shares of the test dialogs used to train and validate the router;
    /// the rest is held out for the comparison.
    #[serde(default = "default_router_train")]
    pub train_fraction: f64,
    #[serde(default = "default_router_val")]
    pub val_fraction: f64,
    #[serde(default)]
    pub with_context: bool,
    #[serde(default)]
    pub embedding_url: Option<String>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Runs the random search and reports both profiles instead of
    /// training `train` alone.
    #[serde(default)]
    pub search: Option<SearchBench>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBench {
    #[serde(default)]
    pub space: SearchSpace,
    #[serde(default)]
    pub config: SearchConfig,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

impl BenchConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|e| Error::invalid(format!("bench config: {e}")))
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::from_toml(&src)?, base))
    }
}

/// Test samples whose exact prefix starts some training utterance, and the
/// rest, as index lists into `test`.
pub fn split_seen_unseen<S: AsRef<str>>(train_utterances: &[S], test: &[PrefixSample]) -> (Vec<usize>, Vec<usize>) {
    let set: BTreeSet<&str> = train_utterances.iter().map(AsRef::as_ref).collect();
    (0..test.len()).partition(|&i| {
        let p = test[i].prefix.as_str();
        set.range(p..).next().is_some_and(|u| u.starts_with(p))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelError {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitRows {
    pub all: Vec<MetricRow>,
    pub seen: Vec<MetricRow>,
    pub unseen: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub kind: String,
    #[serde(flatten)]
    pub score: RoutedScore,
    /// Latency of the slowest model over `total_latency_s`.
    pub speedup: f64,
    pub row: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterReport {
    pub name: String,
    pub models: Vec<String>,
    pub latencies_s: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_eval: usize,
    pub comparison: Vec<ComparisonRow>,
    pub profiles: Option<Profiles>,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub n_dialogs: usize,
    pub n_train_samples: usize,
    pub n_test_samples: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub skipped_short: usize,
    /// Offline TES is measured against the gold utterance.
    pub tes_mode: TypingMode,
    pub model_errors: Vec<ModelError>,
    pub rows: SplitRows,
    pub routers: Vec<RouterReport>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub total_s: f64,
    pub build_s: f64,
    pub eval_s: HashMap<String, f64>,
    /// Measured p50 and p99 router inference time per router.
    pub router_latency_s: HashMap<String, (f64, f64)>,
}

struct Prepared {
    n_dialogs: usize,
    skipped_short: usize,
    train: Vec<PrefixSample>,
    test: Vec<PrefixSample>,
}

fn load_dialogs(cfg: &DataConfig, base: &Path, seed: u64) -> Result<Vec<Dialog>> {
    match (&cfg.dialogs, cfg.synthetic) {
        (Some(p), _) => {
            let path = if p.is_absolute() { p.clone() } else { base.join(p) };
            let report = dialog::ingest(&path)?;
            for e in &report.errors {
                log::warn!("{}:{}: {}", path.display(), e.line, e.message);
            }
            Ok(report.dialogs)
        }
        (None, Some(n)) => Ok(crate::synth::dialogs(n, seed)),
        (None, None) => Err(Error::invalid("data needs `dialogs` or `synthetic`")),
    }
}

fn prepare(cfg: &BenchConfig, base: &Path) -> Result<Prepared> {
    let dialogs = load_dialogs(&cfg.data, base, cfg.seed)?;
    let n_dialogs = dialogs.len();
    let (train_d, test_d) = dialog::split_dialogs(dialogs, cfg.data.test_fraction, cfg.seed);
    let prep = PrepConfig {
        min_score: cfg.data.min_score,
        seed: cfg.seed,
    };
    let train = dialog::prepare(train_d, &prep);
    let test = dialog::prepare(test_d, &prep);
    if train.samples.is_empty() || test.samples.is_empty() {
        return Err(Error::Empty("train or test split"));
    }
    Ok(Prepared {
        n_dialogs,
        skipped_short: train.skipped_short + test.skipped_short,
        train: train.samples,
        test: test.samples,
    })
}

fn build_models(cfg: &BuildConfig, corpus: &[(String, u64)], reg: &mut CompleterRegistry) -> Result<()> {
    if cfg.mpc.is_some() || cfg.mpcpp.is_some() {
        let idx = MpcIndex::build(corpus);
        if let Some(id) = &cfg.mpc {
            reg.insert(id.clone(), None, Arc::new(Mpc::new(idx.prefix_trie.clone()).with_id(id.clone())));
        }
        if let Some(id) = &cfg.mpcpp {
            reg.insert(id.clone(), None, Arc::new(MpcPlusPlus::new(idx.suffix_index).with_id(id.clone())));
        }
    }
    if let Some(id) = &cfg.qb {
        let model = QbModel::train_counted(corpus, &cfg.qb_config)?;
        reg.insert(id.clone(), None, Arc::new(QueryBlazer::new(model).with_id(id.clone())));
    }
    Ok(())
}

/// One-shot suggestions and typing traces of one model over the test set.
struct ModelRun {
    suggestions: Vec<Suggestion>,
    traces: Vec<SimTrace>,
}

fn run_model(c: &dyn Completer, samples: &[PrefixSample], cfg: &EvalConfig) -> ModelRun {
    let suggestions = metrics::one_shot(c, samples, cfg.max_prefix_chars);
    let traces = match cfg.mode {
        TypingMode::Keystroke => samples
            .par_iter()
            .map(|s| metrics::simulate_typing(c, s, cfg.trigger_threshold, cfg.policy, cfg.max_prefix_chars))
            .collect(),
        TypingMode::SplitPoint => samples
            .iter()
            .zip(&suggestions)
            .map(|(s, sug)| metrics::split_point_trace(s, sug, cfg.trigger_threshold, cfg.policy))
            .collect(),
    };
    ModelRun { suggestions, traces }
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

fn subset_row(id: &str, samples: &[PrefixSample], run: &ModelRun, idx: &[usize], cfg: &EvalConfig) -> Result<Option<MetricRow>> {
    if idx.is_empty() {
        return Ok(None);
    }
    metrics::assemble_row(
        id,
        &pick(samples, idx),
        &pick(&run.suggestions, idx),
        &pick(&run.traces, idx),
        cfg,
    )
    .map(Some)
}

/// Assigns each sample to router train (0), validation (1) or held-out (2)
/// by a hash of its dialog id.
fn router_part(dialog_id: &str, seed: u64, train: f64, val: f64) -> u8 {
    let u = unit_hash(format!("router\u{1f}{seed}\u{1f}{dialog_id}").as_bytes());
    if u < train {
        0
    } else if u < train + val {
        1
    } else {
        2
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

struct RouterOutcome {
    report: RouterReport,
    table: RoutingTable,
    trials: Vec<Trial>,
    frontier: Vec<usize>,
    models: Vec<(String, RouterModel)>,
    latency: (f64, f64),
}

fn run_router(
    rb: &RouterBench,
    reg: &CompleterRegistry,
    runs: &HashMap<String, ModelRun>,
    test: &[PrefixSample],
    cfg: &BenchConfig,
) -> Result<RouterOutcome> {
    let ids: Vec<&str> = match &rb.preset {
        Some(p) => registry::preset(p).ok_or_else(|| Error::invalid(format!("unknown preset {p}")))?.to_vec(),
        None => rb.models.iter().map(String::as_str).collect(),
    };
    let entries = reg.select(&ids)?;
    let lat: Vec<(String, f64)> = entries.iter().map(|e| Ok((e.id.clone(), e.routing_latency()?))).collect::<Result<_>>()?;
    let profile: CostProfile = cost_profile(&lat)?;
    let per_model: Vec<Vec<Suggestion>> = ids
        .iter()
        .map(|id| {
            runs.get(*id)
                .map(|r| r.suggestions.clone())
                .ok_or_else(|| Error::invalid(format!("model {id} was not evaluated")))
        })
        .collect::<Result<_>>()?;
    let table = RoutingTable::build(test, &per_model, profile.clone(), cfg.eval.trigger_threshold, rb.with_context)?;
    let embedder = match &rb.embedding_url {
        Some(u) => EmbeddingProvider::endpoint(u.clone(), 2_000),
        None => EmbeddingProvider::hashed(),
    };
    let feats = table.features(&embedder);
    let parts: Vec<u8> = test
        .iter()
        .map(|s| router_part(&s.dialog_id, cfg.seed, rb.train_fraction, rb.val_fraction))
        .collect();
    let idx_of = |k: u8| -> Vec<usize> { (0..test.len()).filter(|&i| parts[i] == k).collect() };
    let (tr_i, va_i, ev_i) = (idx_of(0), idx_of(1), idx_of(2));
    if tr_i.is_empty() || ev_i.is_empty() {
        return Err(Error::Empty("router train or held-out split"));
    }
    let labels = table.labels();
    let train_x = to_matrix(&pick(&feats, &tr_i));
    let train_y = pick(&labels, &tr_i);

    let eval_table = RoutingTable {
        profile: profile.clone(),
        rows: pick(&table.rows, &ev_i),
    };
    let eval_samples = pick(test, &ev_i);
    let eval_x: Vec<Vec<f32>> = pick(&feats, &ev_i);

    let mut trials = Vec::new();
    let mut frontier = Vec::new();
    let mut profiles = None;
    let mut models: Vec<(String, RouterModel)> = Vec::new();
    match &rb.search {
        Some(sb) => {
            if va_i.is_empty() {
                return Err(Error::Empty("router validation split"));
            }
            let val_x = to_matrix(&pick(&feats, &va_i));
            let val_y = pick(&labels, &va_i);
            let val_f1: Vec<Vec<f64>> = va_i.iter().map(|&i| table.rows[i].f1.clone()).collect();
            let data = SearchData {
                train_x: &train_x,
                train_y: &train_y,
                val_x: &val_x,
                val_y: &val_y,
                val_f1: &val_f1,
                profile: &profile,
            };
            trials = hyperparameter_search(&data, &sb.space, &sb.config)?;
            frontier = pareto_frontier(&trials);
            let best_model_f1 = (0..profile.len())
                .map(|m| val_f1.iter().map(|f| f[m]).sum::<f64>() / val_f1.len() as f64)
                .fold(0.0, f64::max);
            let p = select_profiles(&trials, &frontier, best_model_f1, sb.delta)?;
            for (suffix, i) in [("P", p.performance), ("L", p.latency)] {
                let m = RouterModel::fit(&train_x, &train_y, profile.clone(), trials[i].config.clone())?;
                models.push((format!("{}-{suffix}", rb.name), m));
            }
            profiles = Some(p);
        }
        None => {
            let m = RouterModel::fit(&train_x, &train_y, profile.clone(), rb.train.clone())?;
            models.push((rb.name.clone(), m));
        }
    }
    for (_, m) in &mut models {
        m.with_context = rb.with_context;
    }

    let max_lat = profile.max_latency_s;
    let speedup = |s: &RoutedScore| if s.total_latency_s > 0.0 { max_lat / s.total_latency_s } else { f64::INFINITY };
    let mut comparison = Vec::new();
    for (m, id) in profile.model_ids.iter().enumerate() {
        let choices = eval_table.single_model_choices(m);
        let score = eval_table.score(&choices, 0.0);
        let picked: Vec<Suggestion> = pick(&per_model[m], &ev_i);
        let row = router::routed_row(id, &eval_samples, &picked, &cfg.eval)?;
        comparison.push(ComparisonRow {
            name: id.clone(),
            kind: "model".into(),
            speedup: speedup(&score),
            score,
            row,
        });
    }
    let eval_per_model: Vec<Vec<Suggestion>> = per_model.iter().map(|m| pick(m, &ev_i)).collect();
    let (oracle_row, oracle_choices) =
        router::oracle_upper_bound(&eval_samples, &eval_per_model, &profile.costs, &cfg.eval)?;
    let oracle_score = eval_table.score(&oracle_choices, 0.0);
    comparison.push(ComparisonRow {
        name: "oracle".into(),
        kind: "oracle".into(),
        speedup: speedup(&oracle_score),
        score: oracle_score,
        row: oracle_row,
    });
    let mut timing = Vec::new();
    for (name, m) in &models {
        let choices: Vec<usize> = eval_x
            .iter()
            .map(|x| {
                let t = Instant::now();
                let c = m.route_features(x);
                timing.push(t.elapsed().as_secs_f64());
                c
            })
            .collect();
        let score = eval_table.score(&choices, 0.0);
        let picked: Vec<Suggestion> = choices
            .iter()
            .enumerate()
            .map(|(i, &c)| eval_per_model[c][i].clone())
            .collect();
        let row = router::routed_row(name, &eval_samples, &picked, &cfg.eval)?;
        comparison.push(ComparisonRow {
            name: name.clone(),
            kind: "router".into(),
            speedup: speedup(&score),
            score,
            row,
        });
    }
    timing.sort_by(f64::total_cmp);
    Ok(RouterOutcome {
        report: RouterReport {
            name: rb.name.clone(),
            models: profile.model_ids.clone(),
            latencies_s: profile.latencies_s.clone(),
            n_train: tr_i.len(),
            n_val: va_i.len(),
            n_eval: ev_i.len(),
            comparison,
            profiles,
            n_trials: trials.len(),
        },
        table,
        trials,
        frontier,
        models,
        latency: (percentile(&timing, 0.5), percentile(&timing, 0.99)),
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn metrics_tsv(rows: &SplitRows) -> String {
    let mut out = format!("split\t{}\n", MetricRow::TSV_HEADER);
    for (split, list) in [("all", &rows.all), ("seen", &rows.seen), ("unseen", &rows.unseen)] {
        for r in list {
            let _ = writeln!(out, "{split}\t{}", r.tsv());
        }
    }
    out
}

pub fn routers_tsv(routers: &[RouterReport]) -> String {
    let mut out = String::from("router\tentry\tkind\tmean_F1\tPR-F1\taccuracy\tcost\tlatency_s\tspeedup\tshares\n");
    for r in routers {
        for c in &r.comparison {
            let shares: Vec<String> = c.score.shares.iter().map(|s| format!("{s:.4}")).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.2}\t{}",
                r.name,
                c.name,
                c.kind,
                c.score.mean_f1,
                c.row.pr_f1,
                c.score.accuracy,
                c.score.expected_cost,
                c.score.total_latency_s,
                c.speedup,
                shares.join(",")
            );
        }
    }
    out
}

pub fn frontier_csv(trials: &[Trial], frontier: &[usize]) -> String {
    let on: BTreeSet<usize> = frontier.iter().copied().collect();
    let mut out = String::from("trial,lambda,hidden,epochs,lr,accuracy,expected_cost,score,latency_s,mean_f1,frontier\n");
    for (i, t) in trials.iter().enumerate() {
        let hidden: Vec<String> = t.config.hidden.iter().map(ToString::to_string).collect();
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            t.config.lambda,
            hidden.join("x"),
            t.config.epochs,
            t.config.lr,
            t.accuracy,
            t.expected_cost,
            t.score,
            t.latency_s,
            t.mean_f1,
            u8::from(on.contains(&i))
        );
    }
    out
}

/// Runs the whole benchmark and writes the reports into `cfg.out_dir`
/// (relative to `base`).
pub fn run_benchmark(cfg: &BenchConfig, base: &Path) -> Result<BenchReport> {
    let start = Instant::now();
    let out_dir = if cfg.out_dir.is_absolute() {
        cfg.out_dir.clone()
    } else {
        base.join(&cfg.out_dir)
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let data = prepare(cfg, base)?;
    let corpus = dialog::utterance_corpus(&data.train);

    let (mut reg, errors) = CompleterRegistry::build(&cfg.models, base, &data.test);
    let mut model_errors: Vec<ModelError> = errors
        .into_iter()
        .map(|(id, e)| ModelError { id, error: e.to_string() })
        .collect();
    let t_build = Instant::now();
    build_models(&cfg.build, &corpus, &mut reg)?;
    let mut timings = Timings {
        build_s: t_build.elapsed().as_secs_f64(),
        ..Timings::default()
    };

    let train_utts: Vec<&str> = corpus.iter().map(|(t, _)| t.as_str()).collect();
    let (seen, unseen) = split_seen_unseen(&train_utts, &data.test);
    let all: Vec<usize> = (0..data.test.len()).collect();

    let mut runs = HashMap::new();
    let mut rows = SplitRows::default();
    for e in reg.entries() {
        let t = Instant::now();
        let run = run_model(e.completer.as_ref(), &data.test, &cfg.eval);
        timings.eval_s.insert(e.id.clone(), t.elapsed().as_secs_f64());
        for (idx, list) in [(&all, &mut rows.all), (&seen, &mut rows.seen), (&unseen, &mut rows.unseen)] {
            if let Some(r) = subset_row(&e.id, &data.test, &run, idx, &cfg.eval)? {
                list.push(r);
            }
        }
        runs.insert(e.id.clone(), run);
    }

    let mut routers = Vec::new();
    for rb in &cfg.routers {
        match run_router(rb, &reg, &runs, &data.test, cfg) {
            Ok(o) => {
                let name = &rb.name;
                let table_rows = &o.table.rows;
                dialog::write_jsonl(out_dir.join(format!("routing-{name}.jsonl")), table_rows)?;
                if !o.trials.is_empty() {
                    write(&out_dir.join(format!("frontier-{name}.csv")), &frontier_csv(&o.trials, &o.frontier))?;
                    let trials_json = serde_json::to_string_pretty(&o.trials)?;
                    write(&out_dir.join(format!("frontier-{name}.json")), &trials_json)?;
                }
                for (id, m) in &o.models {
                    m.save(out_dir.join(format!("{id}.router")))?;
                }
                timings.router_latency_s.insert(name.clone(), o.latency);
                routers.push(o.report);
            }
            Err(e) => {
                log::error!("router {}: {e}", rb.name);
                model_errors.push(ModelError {
                    id: rb.name.clone(),
                    error: e.to_string(),
                });
            }
        }
    }

    let report = BenchReport {
        seed: cfg.seed,
        n_dialogs: data.n_dialogs,
        n_train_samples: data.train.len(),
        n_test_samples: data.test.len(),
        n_seen: seen.len(),
        n_unseen: unseen.len(),
        skipped_short: data.skipped_short,
        tes_mode: cfg.eval.mode,
        model_errors,
        rows,
        routers,
    };
    write(&out_dir.join("metrics.tsv"), &metrics_tsv(&report.rows))?;
    write(&out_dir.join("routers.tsv"), &routers_tsv(&report.routers))?;
    write(&out_dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    timings.total_s = start.elapsed().as_secs_f64();
    write(&out_dir.join("timings.json"), &serde_json::to_string_pretty(&timings)?)?;
    Ok(report)
}
