use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde::Serialize;

use mac_core::bench::frontier_csv;
use mac_core::dialog;
use mac_core::metrics;
use mac_core::registry;
use mac_core::router::{
    self, cost_profile, hyperparameter_search, pareto_frontier, select_profiles, to_matrix, CostsFile,
    EmbeddingProvider, Profiles, RouterModel, RoutingTable, SearchConfig, SearchData, SearchSpace, TrainConfig, Trial,
    DEFAULT_DELTA,
};
use mac_core::text::unit_hash;

use crate::eval::load_registry;
use crate::{create_dir, print_json, write_json};

#[derive(Args)]
pub struct LabelArgs {
    /// Models file with the candidate completers.
    #[arg(long)]
    config: PathBuf,
    /// Sample JSONL the labels are computed on.
    #[arg(long)]
    samples: PathBuf,
    /// `router-2` or `router-4`.
    #[arg(long, conflicts_with = "models", required_unless_present = "models")]
    preset: Option<String>,
    /// Comma-separated model ids.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    /// Embed the dialog context along with the prefix.
    #[arg(long)]
    with_context: bool,
    /// Embedding service; the hashed embedding is used when absent.
    #[arg(long)]
    embedding_url: Option<String>,
    /// Receives features.bin, labels.bin, costs.json and table.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Serialize)]
struct LabelSummary {
    models: Vec<String>,
    costs: Vec<f64>,
    n_samples: usize,
    /// Share of samples whose best model is each candidate.
    label_shares: Vec<f64>,
}

fn embedder(url: &Option<String>) -> EmbeddingProvider {
    match url {
        Some(u) => EmbeddingProvider::endpoint(u.clone(), 2_000),
        None => EmbeddingProvider::hashed(),
    }
}

fn shares(labels: &[usize], n_models: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_models];
    for &l in labels {
        counts[l] += 1;
    }
    counts.iter().map(|&c| c as f64 / labels.len().max(1) as f64).collect()
}

pub fn label(a: LabelArgs) -> Result<()> {
    let samples = dialog::read_samples(&a.samples)?;
    if samples.is_empty() {
        bail!("{} holds no samples", a.samples.display());
    }
    let ids: Vec<&str> = match &a.preset {
        Some(p) => registry::preset(p).ok_or_else(|| anyhow!("unknown preset {p}"))?.to_vec(),
        None => a.models.iter().map(String::as_str).collect(),
    };
    let reg = load_registry(&a.config, &samples)?;
    let entries = reg.select(&ids)?;
    let latencies: Vec<(String, f64)> = entries
        .iter()
        .map(|e| Ok((e.id.clone(), e.routing_latency()?)))
        .collect::<mac_core::Result<_>>()?;
    let profile = cost_profile(&latencies)?;
    let max_prefix = metrics::EvalConfig::default().max_prefix_chars;
    let per_model: Vec<_> = entries
        .iter()
        .map(|e| metrics::one_shot(e.completer.as_ref(), &samples, max_prefix))
        .collect();
    let table = RoutingTable::build(&samples, &per_model, profile.clone(), a.threshold, a.with_context)?;
    let features = table.features(&embedder(&a.embedding_url));
    let labels = table.labels();

    create_dir(&a.out_dir)?;
    router::write_features(a.out_dir.join("features.bin"), &features)?;
    router::write_labels(a.out_dir.join("labels.bin"), &labels)?;
    write_json(&a.out_dir.join("costs.json"), &CostsFile::from_profile(&profile))?;
    table.save(a.out_dir.join("table.json"))?;
    print_json(&LabelSummary {
        label_shares: shares(&labels, profile.len()),
        models: profile.model_ids,
        costs: profile.costs,
        n_samples: samples.len(),
    })
}

struct Dataset {
    features: Vec<Vec<f32>>,
    labels: Vec<usize>,
    costs: CostsFile,
}

fn read_dataset(features: &Path, labels: &Path, costs: &Path) -> Result<Dataset> {
    let d = Dataset {
        features: router::read_features(features)?,
        labels: router::read_labels(labels)?,
        costs: CostsFile::load(costs)?,
    };
    if d.features.len() != d.labels.len() {
        bail!("{} features but {} labels", d.features.len(), d.labels.len());
    }
    if d.features.is_empty() {
        bail!("no training rows");
    }
    let n_models = d.costs.models.len();
    if let Some(bad) = d.labels.iter().find(|&&l| l >= n_models) {
        bail!("label {bad} but only {n_models} models in the cost file");
    }
    Ok(d)
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "features.bin")]
    features: PathBuf,
    #[arg(long, default_value = "labels.bin")]
    labels: PathBuf,
    #[arg(long, default_value = "costs.json")]
    costs: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().lambda)]
    lambda: f64,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
    /// Hidden layer widths, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = TrainConfig::default().hidden)]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().dropout)]
    dropout: f64,
    /// The features were labelled with `--with-context`.
    #[arg(long)]
    with_context: bool,
    #[arg(long, default_value = "router.router")]
    out: PathBuf,
}

#[derive(Serialize)]
struct TrainSummary {
    n_samples: usize,
    models: Vec<String>,
    final_loss: Option<f64>,
    train_accuracy: f64,
    shares: Vec<f64>,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let d = read_dataset(&a.features, &a.labels, &a.costs)?;
    let profile = d.costs.profile()?;
    let config = TrainConfig {
        hidden: a.hidden,
        epochs: a.epochs,
        lr: a.lr,
        lambda: a.lambda,
        batch_size: a.batch_size,
        dropout: a.dropout,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let x = to_matrix(&d.features);
    let mut model = RouterModel::fit(&x, &d.labels, profile, config)?;
    model.with_context = a.with_context;
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let choices: Vec<usize> = d.features.iter().map(|f| model.route_features(f)).collect();
    let correct = choices.iter().zip(&d.labels).filter(|(c, l)| c == l).count();
    print_json(&TrainSummary {
        n_samples: d.labels.len(),
        models: model.profile.model_ids.clone(),
        final_loss: model.loss_curve.last().copied(),
        train_accuracy: correct as f64 / d.labels.len() as f64,
        shares: shares(&choices, model.profile.len()),
    })
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long, default_value = "features.bin")]
    features: PathBuf,
    #[arg(long, default_value = "labels.bin")]
    labels: PathBuf,
    #[arg(long, default_value = "costs.json")]
    costs: PathBuf,
    /// Routing table from `router-label`; supplies per-model F1 and dialog ids.
    #[arg(long, default_value = "table.json")]
    table: PathBuf,
    /// Random draws per value of λ.
    #[arg(long, default_value_t = SearchConfig::default().trials)]
    trials: usize,
    #[arg(long, default_value_t = SearchConfig::default().seed)]
    seed: u64,
    /// TOML search space; the built-in grid is used when absent.
    #[arg(long)]
    space: Option<PathBuf>,
    /// Share of dialogs held out for validation.
    #[arg(long, default_value_t = 0.25)]
    val_fraction: f64,
    /// Relative F1 band for the latency profile.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, default_value = "frontier.json")]
    out: PathBuf,
    /// Also write the trials as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Retrain both profiles on the training split and save them here.
    #[arg(long)]
    routers_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SearchReport {
    n_train: usize,
    n_val: usize,
    best_model_f1: f64,
    frontier: Vec<usize>,
    profiles: Profiles,
    trials: Vec<Trial>,
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

pub fn search(a: SearchArgs) -> Result<()> {
    let d = read_dataset(&a.features, &a.labels, &a.costs)?;
    let table = RoutingTable::load(&a.table)?;
    if table.rows.len() != d.labels.len() {
        bail!("{} table rows but {} labels", table.rows.len(), d.labels.len());
    }
    let profile = d.costs.profile()?;
    if table.profile.model_ids != profile.model_ids {
        bail!("table and cost file list different models");
    }
    let space: SearchSpace = match &a.space {
        Some(p) => {
            let src = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&src).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SearchSpace::default(),
    };
    let (val_i, train_i): (Vec<usize>, Vec<usize>) = (0..table.rows.len()).partition(|&i| {
        let key = format!("search\u{1f}{}\u{1f}{}", a.seed, table.rows[i].dialog_id);
        unit_hash(key.as_bytes()) < a.val_fraction
    });
    if train_i.is_empty() || val_i.is_empty() {
        bail!("the validation split left {} train and {} validation rows", train_i.len(), val_i.len());
    }
    let train_x = to_matrix(&pick(&d.features, &train_i));
    let train_y = pick(&d.labels, &train_i);
    let val_x = to_matrix(&pick(&d.features, &val_i));
    let val_y = pick(&d.labels, &val_i);
    let val_f1: Vec<Vec<f64>> = val_i.iter().map(|&i| table.rows[i].f1.clone()).collect();
    let data = SearchData {
        train_x: &train_x,
        train_y: &train_y,
        val_x: &val_x,
        val_y: &val_y,
        val_f1: &val_f1,
        profile: &profile,
    };
    let cfg = SearchConfig {
        trials: a.trials,
        seed: a.seed,
        ..SearchConfig::default()
    };
    let trials = hyperparameter_search(&data, &space, &cfg)?;
    let frontier = pareto_frontier(&trials);
    let best_model_f1 = (0..profile.len())
        .map(|m| val_f1.iter().map(|f| f[m]).sum::<f64>() / val_f1.len() as f64)
        .fold(0.0, f64::max);
    let profiles = select_profiles(&trials, &frontier, best_model_f1, a.delta)?;

    if let Some(path) = &a.csv {
        std::fs::write(path, frontier_csv(&trials, &frontier)).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(dir) = &a.routers_out {
        create_dir(dir)?;
        for (name, i) in [("router-P.router", profiles.performance), ("router-L.router", profiles.latency)] {
            let model = RouterModel::fit(&train_x, &train_y, profile.clone(), trials[i].config.clone())?;
            model.save(dir.join(name))?;
        }
    }
    let report = SearchReport {
        n_train: train_i.len(),
        n_val: val_i.len(),
        best_model_f1,
        frontier,
        profiles,
        trials,
    };
    write_json(&a.out, &report)?;
    let (p, l) = (&report.trials[profiles.performance], &report.trials[profiles.latency]);
    eprintln!(
        "{} trials, {} on the frontier; performance F1 {:.4} at {:.4}s, latency F1 {:.4} at {:.4}s",
        report.trials.len(),
        report.frontier.len(),
        p.mean_f1,
        p.latency_s,
        l.mean_f1,
        l.latency_s
    );
    Ok(())
}
