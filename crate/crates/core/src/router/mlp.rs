//! Dense ReLU classifier trained on cross-entropy mixed with expected cost.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::rngs::ChaCha8Rng;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;
pub const DEFAULT_BATCH: usize = 256;
pub const DEFAULT_DROPOUT: f64 = 0.2;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const fn sgd() -> Self {
        Optimizer::Sgd {
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub const fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam()
    }
}

/// Per-parameter optimizer state.
struct OptState {
    first: Vec<Dense>,
    second: Vec<Dense>,
    step: i32,
}

impl OptState {
    fn new(mlp: &Mlp) -> Self {
        let zeros = || -> Vec<Dense> {
            mlp.layers
                .iter()
                .map(|l| Dense {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect()
        };
        OptState {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    fn apply(&mut self, mlp: &mut Mlp, grads: &[Dense], lr: f64, opt: Optimizer) {
        self.step += 1;
        for (i, (layer, g)) in mlp.layers.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            match opt {
                Optimizer::Sgd { momentum } => {
                    let upd = |m: &mut f64, &g: &f64| *m = momentum * *m - lr * g;
                    m.w.zip_mut_with(&g.w, upd);
                    m.b.zip_mut_with(&g.b, upd);
                    layer.w += &m.w;
                    layer.b += &m.b;
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step);
                    let c2 = 1.0 - beta2.powi(self.step);
                    let upd = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    };
                    Zip::from(&mut layer.w)
                        .and(&mut m.w)
                        .and(&mut v.w)
                        .and(&g.w)
                        .for_each(|p, m, v, &g| upd(p, m, v, g));
                    Zip::from(&mut layer.b)
                        .and(&mut m.b)
                        .and(&mut v.b)
                        .and(&g.b)
                        .for_each(|p, m, v, &g| upd(p, m, v, g));
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `inputs × outputs`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub dropout: f64,
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - m).exp());
        let z = row.sum();
        row /= z;
    }
    p
}

pub fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    -labels
        .iter()
        .enumerate()
        .map(|(i, &y)| probs[[i, y]].max(LOG_EPS).ln())
        .sum::<f64>()
        / n
}

/// Mean over rows of the probability-weighted class cost.
pub fn expected_cost(probs: &Array2<f64>, costs: &[f64]) -> f64 {
    let c = Array1::from(costs.to_vec());
    probs.dot(&c).mean().unwrap_or(0.0)
}

/// `(1 − λ)·CE + λ·E[cost]`.
pub fn combined_loss(probs: &Array2<f64>, labels: &[usize], costs: &[f64], lambda: f64) -> f64 {
    (1.0 - lambda) * cross_entropy(probs, labels) + lambda * expected_cost(probs, costs)
}

/// Gradient of [`combined_loss`] with respect to the logits.
pub fn logit_grad(probs: &Array2<f64>, labels: &[usize], costs: &[f64], lambda: f64) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut g = Array2::zeros(probs.raw_dim());
    for (i, (p, mut gi)) in probs.rows().into_iter().zip(g.rows_mut()).enumerate() {
        let mean_cost: f64 = p.iter().zip(costs).map(|(p, c)| p * c).sum();
        for j in 0..p.len() {
            let ce = p[j] - f64::from(u8::from(j == labels[i]));
            let cost = p[j] * (costs[j] - mean_cost);
            gi[j] = ((1.0 - lambda) * ce + lambda * cost) / n;
        }
    }
    g
}

struct Cache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer, for the ReLU mask.
    pre: Vec<Array2<f64>>,
    /// Inverted-dropout masks of each hidden layer.
    masks: Vec<Option<Array2<f64>>>,
}

impl Mlp {
    /// He-uniform weights, zero biases.
    pub fn new(sizes: &[usize], dropout: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout {dropout} outside [0,1)")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Dense {
                    w: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-bound..bound)),
                    b: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Mlp { layers, dropout })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.ncols())
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.w.ncols()));
        s
    }

    fn forward_cached(&self, x: ArrayView2<f64>, mut rng: Option<&mut ChaCha8Rng>) -> (Array2<f64>, Cache) {
        let mut cache = Cache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::new(),
            masks: Vec::new(),
        };
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = a.dot(&l.w) + &l.b;
            cache.inputs.push(a);
            if i == last {
                return (z, cache);
            }
            let mut h = z.mapv(|v| v.max(0.0));
            let mask = match rng.as_deref_mut() {
                Some(r) if self.dropout > 0.0 => {
                    let keep = 1.0 - self.dropout;
                    let m = Array2::from_shape_simple_fn(h.raw_dim(), || {
                        if r.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    h *= &m;
                    Some(m)
                }
                _ => None,
            };
            cache.pre.push(z);
            cache.masks.push(mask);
            a = h;
        }
        unreachable!("network has at least one layer")
    }

    /// Logits without dropout.
    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_cached(x, None).0
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array2<f64> {
        softmax(&self.logits(x))
    }

    /// Class probabilities for a single feature vector.
    pub fn predict_one(&self, x: &[f32]) -> Vec<f64> {
        let row = Array2::from_shape_fn((1, x.len()), |(_, j)| f64::from(x[j]));
        self.predict_proba(row.view()).row(0).to_vec()
    }

    /// Loss and parameter gradients on one batch. Dropout is applied only
    /// when `rng` is given.
    pub fn loss_and_grads(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        costs: &[f64],
        lambda: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (f64, Vec<Dense>) {
        let (logits, cache) = self.forward_cached(x, rng);
        let probs = softmax(&logits);
        let loss = combined_loss(&probs, labels, costs, lambda);
        let mut delta = logit_grad(&probs, labels, costs, lambda);
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let gw = cache.inputs[i].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Dense { w: gw, b: gb });
            if i > 0 {
                let mut d = delta.dot(&self.layers[i].w.t());
                if let Some(m) = &cache.masks[i - 1] {
                    d *= m;
                }
                Zip::from(&mut d)
                    .and(&cache.pre[i - 1])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = d;
            }
        }
        grads.reverse();
        (loss, grads)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn param_slot(&mut self, mut i: usize) -> &mut f64 {
        for l in &mut self.layers {
            if i < l.w.len() {
                let cols = l.w.ncols();
                return &mut l.w[[i / cols, i % cols]];
            }
            i -= l.w.len();
            if i < l.b.len() {
                return &mut l.b[i];
            }
            i -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    /// Parameter `i` in the order weights then biases, layer by layer.
    pub fn param(&self, mut i: usize) -> f64 {
        for l in &self.layers {
            if i < l.w.len() {
                return l.w[[i / l.w.ncols(), i % l.w.ncols()]];
            }
            i -= l.w.len();
            if i < l.b.len() {
                return l.b[i];
            }
            i -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        *self.param_slot(i) = v;
    }

    /// Gradients flattened in [`Mlp::param`] order.
    pub fn flatten(grads: &[Dense]) -> Vec<f64> {
        grads
            .iter()
            .flat_map(|g| g.w.iter().chain(g.b.iter()).copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub dropout: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![256, 128],
            epochs: 50,
            lr: 1e-3,
            lambda: 0.5,
            batch_size: DEFAULT_BATCH,
            dropout: DEFAULT_DROPOUT,
            optimizer: Optimizer::default(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trained {
    pub mlp: Mlp,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Mini-batch training on the combined loss.
pub fn train(
    features: ArrayView2<f64>,
    labels: &[usize],
    costs: &[f64],
    cfg: &TrainConfig,
) -> Result<Trained> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::Empty("training features"));
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= costs.len()) {
        return Err(Error::invalid(format!("label {bad} but only {} classes", costs.len())));
    }
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(Error::invalid(format!("lambda {} outside [0,1]", cfg.lambda)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sizes = vec![features.ncols()];
    sizes.extend(&cfg.hidden);
    sizes.push(costs.len());
    let mut mlp = Mlp::new(&sizes, cfg.dropout, &mut rng)?;
    let mut state = OptState::new(&mlp);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = cfg.batch_size.max(1);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let x = features.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = mlp.loss_and_grads(x.view(), &y, costs, cfg.lambda, Some(&mut rng));
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {batches} (lr {})",
                    cfg.lr
                )));
            }
            state.apply(&mut mlp, &grads, cfg.lr, cfg.optimizer);
            total += loss;
            batches += 1;
        }
        loss_curve.push(total / batches as f64);
    }
    log::debug!(
        "trained {:?} for {} epochs, final loss {:?}",
        sizes,
        cfg.epochs,
        loss_curve.last()
    );
    Ok(Trained { mlp, loss_curve })
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Converts `f32` feature rows into a matrix.
pub fn to_matrix(rows: &[Vec<f32>]) -> Array2<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let mut m = Array2::zeros((rows.len(), d));
    for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d = f64::from(*s));
    }
    m
}

/// Predicted class for every row.
pub fn predict(mlp: &Mlp, x: ArrayView2<f64>) -> Vec<usize> {
    let p = mlp.predict_proba(x);
    (0..p.nrows()).map(|i| argmax(p.slice(s![i, ..]).as_slice().unwrap_or(&[]))).collect()
}
