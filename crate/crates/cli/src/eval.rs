use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use mac_core::bench::{self, metrics_tsv, split_seen_unseen, BenchConfig, SplitRows};
use mac_core::dialog::{self, PrefixSample};
use mac_core::metrics::{self, AcceptPolicy, EvalConfig, TypingMode};
use mac_core::ngram::{QbModel, QueryBlazer};
use mac_core::registry::{CompleterRegistry, ModelSpec, RouterSpec};
use mac_core::trie::{Mpc, MpcIndex, MpcPlusPlus};
use mac_core::Completer;

use crate::{print_json, write_json};

/// A TOML list of completers, as used by `eval --config` and `router-label`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsFile {
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub routers: Vec<RouterSpec>,
}

/// Builds every completer in a models file. Models that fail to load are
/// logged and left out.
pub fn load_registry(path: &Path, samples: &[PrefixSample]) -> Result<CompleterRegistry> {
    let src = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: ModelsFile = toml::from_str(&src).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let (mut reg, errors) = CompleterRegistry::build(&file.models, base, samples);
    for (id, e) in errors {
        log::warn!("model {id}: {e}");
    }
    for spec in &file.routers {
        reg.add_router(spec, base).with_context(|| format!("router {}", spec.id))?;
    }
    Ok(reg)
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Mpc,
    Mpcpp,
    Qb,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Keystroke,
    SplitPoint,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    GreedyLcp,
    AllOrNothing,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Model file written by `build-mpc` or `build-qb`.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    model: Option<PathBuf>,
    /// How to serve an index file; defaults to `mpc` for indexes.
    #[arg(long, value_enum, requires = "model")]
    kind: Option<Kind>,
    /// Models file; pick the model with `--id`.
    #[arg(long, requires = "id")]
    config: Option<PathBuf>,
    /// Model to evaluate from `--config`, or the id to report for `--model`.
    #[arg(long)]
    id: Option<String>,
    /// Test sample JSONL.
    #[arg(long)]
    samples: PathBuf,
    /// Training samples; adds seen and unseen prefix rows.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "keystroke")]
    mode: Mode,
    #[arg(long, value_enum, default_value = "greedy-lcp")]
    policy: Policy,
    /// JSON report to write; printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalReport {
    model: String,
    n_samples: usize,
    n_seen: Option<usize>,
    n_unseen: Option<usize>,
    config: EvalConfig,
    rows: SplitRows,
}

fn file_model(path: &Path, kind: Option<Kind>, id: Option<&str>) -> Result<Arc<dyn Completer>> {
    let id = |default: &str| id.unwrap_or(default).to_owned();
    if MpcIndex::is_index_file(path) {
        let idx = MpcIndex::load(path)?;
        return Ok(match kind {
            None | Some(Kind::Mpc) => Arc::new(Mpc::new(idx.prefix_trie).with_id(id("mpc"))),
            Some(Kind::Mpcpp) => Arc::new(MpcPlusPlus::new(idx.suffix_index).with_id(id("mpcpp"))),
            Some(Kind::Qb) => bail!("{} is an MPC index, not a QB model", path.display()),
        });
    }
    if QbModel::is_model_file(path) {
        if matches!(kind, Some(Kind::Mpc | Kind::Mpcpp)) {
            bail!("{} is a QB model, not an MPC index", path.display());
        }
        return Ok(Arc::new(QueryBlazer::new(QbModel::load(path)?).with_id(id("qb"))));
    }
    bail!("{} is neither an MPC index nor a QB model", path.display())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let samples = dialog::read_samples(&a.samples)?;
    if samples.is_empty() {
        bail!("{} holds no samples", a.samples.display());
    }
    let completer: Arc<dyn Completer> = match (&a.model, &a.config, &a.id) {
        (Some(p), _, id) => file_model(p, a.kind, id.as_deref())?,
        (None, Some(cfg), Some(id)) => {
            let reg = load_registry(cfg, &samples)?;
            let entry = reg.get(id).ok_or_else(|| anyhow!("no model {id} in {}", cfg.display()))?;
            entry.completer.clone()
        }
        _ => bail!("give --model, or --config with --id"),
    };
    let cfg = EvalConfig {
        trigger_threshold: a.threshold,
        policy: match a.policy {
            Policy::GreedyLcp => AcceptPolicy::GreedyLcp,
            Policy::AllOrNothing => AcceptPolicy::AllOrNothing,
        },
        mode: match a.mode {
            Mode::Keystroke => TypingMode::Keystroke,
            Mode::SplitPoint => TypingMode::SplitPoint,
        },
        ..EvalConfig::default()
    };
    let mut rows = SplitRows {
        all: vec![metrics::evaluate(completer.as_ref(), &samples, &cfg)?],
        ..SplitRows::default()
    };
    let (mut n_seen, mut n_unseen) = (None, None);
    if let Some(train) = &a.train {
        let corpus = dialog::utterance_corpus(&dialog::read_samples(train)?);
        let utts: Vec<&str> = corpus.iter().map(|(t, _)| t.as_str()).collect();
        let (seen, unseen) = split_seen_unseen(&utts, &samples);
        for (idx, list) in [(&seen, &mut rows.seen), (&unseen, &mut rows.unseen)] {
            if !idx.is_empty() {
                let subset: Vec<PrefixSample> = idx.iter().map(|&i| samples[i].clone()).collect();
                list.push(metrics::evaluate(completer.as_ref(), &subset, &cfg)?);
            }
        }
        n_seen = Some(seen.len());
        n_unseen = Some(unseen.len());
    }
    if let Some(path) = &a.tsv {
        std::fs::write(path, metrics_tsv(&rows)).with_context(|| format!("writing {}", path.display()))?;
    }
    let report = EvalReport {
        model: completer.id().to_owned(),
        n_samples: samples.len(),
        n_seen,
        n_unseen,
        config: cfg,
        rows,
    };
    match &a.report {
        Some(path) => write_json(path, &report),
        None => print_json(&report),
    }
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let (cfg, base) = BenchConfig::load(&a.config)?;
    let report = bench::run_benchmark(&cfg, &base)?;
    for e in &report.model_errors {
        eprintln!("error in {}: {}", e.id, e.error);
    }
    print!("{}", metrics_tsv(&report.rows));
    if !report.routers.is_empty() {
        print!("{}", bench::routers_tsv(&report.routers));
    }
    Ok(())
}
