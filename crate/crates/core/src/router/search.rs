//! Random search over router configurations and the latency/quality
//! frontier it traces.

use ndarray::Array2;
use rand::rngs::ChaCha8Rng;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{predict, train, Optimizer, TrainConfig, DEFAULT_BATCH, DEFAULT_DROPOUT};
use super::{CostProfile, RoutingStats};
use crate::error::{Error, Result};
use crate::text::stable_hash;

/// Relative F1 band for the latency-favoring profile.
pub const DEFAULT_DELTA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub hidden: Vec<Vec<usize>>,
    pub epochs: Vec<usize>,
    pub lr: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub batch_size: usize,
    pub dropout: f64,
    pub optimizer: Optimizer,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            hidden: vec![
                vec![128],
                vec![256],
                vec![128, 64],
                vec![256, 128],
                vec![512, 256],
                vec![64, 32],
                vec![256, 128, 64],
                vec![512, 256, 128],
            ],
            epochs: vec![50, 100],
            lr: vec![1e-4, 5e-4, 1e-3],
            lambdas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            batch_size: DEFAULT_BATCH,
            dropout: DEFAULT_DROPOUT,
            optimizer: Optimizer::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Random draws per value of λ.
    pub trials: usize,
    pub seed: u64,
    /// Score with the normalized expected cost itself instead of one minus it.
    pub raw_cost_score: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            trials: 50,
            seed: 7,
            raw_cost_score: false,
        }
    }
}

/// Training and validation sets. `val_f1[i][m]` is model `m`'s instance F1
/// on validation sample `i`.
pub struct SearchData<'a> {
    pub train_x: &'a Array2<f64>,
    pub train_y: &'a [usize],
    pub val_x: &'a Array2<f64>,
    pub val_y: &'a [usize],
    pub val_f1: &'a [Vec<f64>],
    pub profile: &'a CostProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub config: TrainConfig,
    pub accuracy: f64,
    pub expected_cost: f64,
    pub score: f64,
    /// Expected completer latency under the validation traffic split.
    pub latency_s: f64,
    pub mean_f1: f64,
    pub shares: Vec<f64>,
}

fn draw(space: &SearchSpace, rng: &mut ChaCha8Rng, lambda: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: space.hidden.choose(rng).cloned().unwrap_or_default(),
        epochs: space.epochs.choose(rng).copied().unwrap_or(50),
        lr: space.lr.choose(rng).copied().unwrap_or(1e-3),
        lambda,
        batch_size: space.batch_size,
        dropout: space.dropout,
        optimizer: space.optimizer,
        seed,
    }
}

/// Trains `cfg.trials` random configurations for every λ in the space and
/// scores each on the validation set. Trials run in parallel; the result is
/// ordered by λ, then draw.
pub fn hyperparameter_search(data: &SearchData<'_>, space: &SearchSpace, cfg: &SearchConfig) -> Result<Vec<Trial>> {
    if space.hidden.is_empty() || space.epochs.is_empty() || space.lr.is_empty() || space.lambdas.is_empty() {
        return Err(Error::invalid("search space has an empty dimension"));
    }
    if data.val_x.nrows() != data.val_y.len() || data.val_f1.len() != data.val_y.len() {
        return Err(Error::LengthMismatch {
            left: data.val_x.nrows(),
            right: data.val_y.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut configs = Vec::new();
    for &lambda in &space.lambdas {
        for t in 0..cfg.trials {
            let seed = stable_hash(format!("{}\x1f{lambda}\x1f{t}", cfg.seed).as_bytes());
            configs.push(draw(space, &mut rng, lambda, seed));
        }
    }
    configs
        .into_par_iter()
        .map(|c| run_trial(data, c, cfg.raw_cost_score))
        .collect()
}

fn run_trial(data: &SearchData<'_>, config: TrainConfig, raw_cost_score: bool) -> Result<Trial> {
    let costs = &data.profile.costs;
    let trained = train(data.train_x.view(), data.train_y, costs, &config)?;
    let choices = predict(&trained.mlp, data.val_x.view());
    let n = choices.len().max(1) as f64;
    let accuracy = choices.iter().zip(data.val_y).filter(|(c, y)| c == y).count() as f64 / n;
    let expected_cost = choices.iter().map(|&c| costs[c]).sum::<f64>() / n;
    let mean_f1 = choices.iter().zip(data.val_f1).map(|(&c, f)| f[c]).sum::<f64>() / n;
    let cost_term = if raw_cost_score { expected_cost } else { 1.0 - expected_cost };
    let score = (1.0 - config.lambda) * accuracy + config.lambda * cost_term;
    let stats = RoutingStats::from_choices(&choices, &data.profile.latencies_s, 0.0);
    Ok(Trial {
        accuracy,
        expected_cost,
        score,
        latency_s: stats.total_latency(),
        mean_f1,
        shares: stats.shares,
        config,
    })
}

/// Indices of trials not dominated in (lower latency, higher F1), sorted by
/// latency. Of identical points only the first is kept.
pub fn pareto_frontier(trials: &[Trial]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..trials.len()).collect();
    idx.sort_by(|&a, &b| {
        trials[a]
            .latency_s
            .total_cmp(&trials[b].latency_s)
            .then(trials[b].mean_f1.total_cmp(&trials[a].mean_f1))
            .then(a.cmp(&b))
    });
    let mut front = Vec::new();
    let mut best_f1 = f64::NEG_INFINITY;
    for i in idx {
        if trials[i].mean_f1 > best_f1 {
            best_f1 = trials[i].mean_f1;
            front.push(i);
        }
    }
    front
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profiles {
    /// Highest F1.
    pub performance: usize,
    /// Lowest latency within the F1 band.
    pub latency: usize,
    /// No candidate reached the band, so `latency == performance`.
    pub band_empty: bool,
}

/// Picks the two named profiles among `candidates` (indices into `trials`).
pub fn select_profiles(trials: &[Trial], candidates: &[usize], best_model_f1: f64, delta: f64) -> Result<Profiles> {
    let Some(&first) = candidates.first() else {
        return Err(Error::Empty("frontier"));
    };
    let mut performance = first;
    for &i in candidates {
        let (t, p) = (&trials[i], &trials[performance]);
        if t.mean_f1 > p.mean_f1 || (t.mean_f1 == p.mean_f1 && t.latency_s < p.latency_s) {
            performance = i;
        }
    }
    let floor = (1.0 - delta) * best_model_f1;
    let latency = candidates
        .iter()
        .copied()
        .filter(|&i| trials[i].mean_f1 >= floor)
        .min_by(|&a, &b| {
            trials[a]
                .latency_s
                .total_cmp(&trials[b].latency_s)
                .then(trials[b].mean_f1.total_cmp(&trials[a].mean_f1))
        });
    Ok(match latency {
        Some(latency) => Profiles {
            performance,
            latency,
            band_empty: false,
        },
        None => {
            log::warn!("no router reaches {:.4} F1; latency profile falls back to performance", floor);
            Profiles {
                performance,
                latency: performance,
                band_empty: true,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(f1: f64, latency: f64) -> Trial {
        Trial {
            config: TrainConfig::default(),
            accuracy: 0.0,
            expected_cost: 0.0,
            score: 0.0,
            latency_s: latency,
            mean_f1: f1,
            shares: vec![],
        }
    }

    #[test]
    fn profiles_from_reference_shaped_values() {
        let t = vec![trial(0.28, 0.9), trial(0.24, 0.17)];
        let p = select_profiles(&t, &[0, 1], 0.247, DEFAULT_DELTA).unwrap();
        assert_eq!((p.performance, p.latency, p.band_empty), (0, 1, false));
        let p = select_profiles(&t, &[0], 0.247, DEFAULT_DELTA).unwrap();
        assert_eq!((p.performance, p.latency), (0, 0));
        // δ = 0 leaves only configs at least as good as the best model
        let p = select_profiles(&t, &[0, 1], 0.247, 0.0).unwrap();
        assert_eq!(p.latency, 0);
        let p = select_profiles(&t, &[0, 1], 0.5, 0.0).unwrap();
        assert!(p.band_empty);
        assert_eq!(p.latency, p.performance);
        assert!(select_profiles(&t, &[], 0.2, 0.05).is_err());
    }

    #[test]
    fn frontier_drops_dominated_points() {
        let t = vec![
            trial(0.20, 0.1),
            trial(0.25, 0.5),
            trial(0.22, 0.6),
            trial(0.30, 1.0),
            trial(0.25, 0.5),
        ];
        assert_eq!(pareto_frontier(&t), vec![0, 1, 3]);
    }

    #[test]
    fn one_trial_draws_one_config() {
        let space = SearchSpace {
            lambdas: vec![0.5],
            ..SearchSpace::default()
        };
        let x = Array2::from_shape_fn((8, 4), |(i, j)| ((i + j) % 3) as f64);
        let y = [0, 1, 0, 1, 0, 1, 0, 1];
        let f1 = vec![vec![1.0, 0.0]; 8];
        let profile = super::super::cost_profile(&[("qb", 0.001), ("vlm", 0.733)]).unwrap();
        let data = SearchData {
            train_x: &x,
            train_y: &y,
            val_x: &x,
            val_y: &y,
            val_f1: &f1,
            profile: &profile,
        };
        let space = SearchSpace {
            hidden: vec![vec![4], vec![8]],
            epochs: vec![2],
            ..space
        };
        let cfg = SearchConfig {
            trials: 1,
            ..SearchConfig::default()
        };
        let a = hyperparameter_search(&data, &space, &cfg).unwrap();
        assert_eq!(a.len(), 1);
        assert!(space.hidden.contains(&a[0].config.hidden));
        assert_eq!(a, hyperparameter_search(&data, &space, &cfg).unwrap());
        assert!((a[0].shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
