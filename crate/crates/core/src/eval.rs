//! Frozen-representation evaluation: linear probe, k-NN, collapse metrics.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::matrix::{sym_eig, SymMatrix};

/// Thresholds of the operational collapse definition.
pub const COLLAPSE_TOP_MASS: f64 = 0.9;
pub const COLLAPSE_MEAN_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Fraction of samples used for training; the rest is held out.
    pub split_ratio: f64,
    pub reg: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            split_ratio: 0.5,
            reg: 1e-4,
            steps: 500,
            lr: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub split_seed: u64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Multinomial logistic regression on frozen embeddings (rows are samples),
/// fit by full-batch gradient descent with L2 penalty; reports held-out
/// top-1 accuracy.
pub fn linear_probe(
    embeddings: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let n = embeddings.nrows();
    if labels.len() != n {
        return Err(Error::dims(n, labels.len()));
    }
    if !(cfg.split_ratio > 0.0 && cfg.split_ratio < 1.0) {
        return Err(Error::DegenerateSplit(format!(
            "split ratio {}",
            cfg.split_ratio
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = ((n as f64) * cfg.split_ratio).floor() as usize;
    let (train, test) = order.split_at(n_train);
    if test.is_empty() {
        return Err(Error::DegenerateSplit("empty test split".into()));
    }
    let mut present = vec![false; num_classes];
    for &i in train {
        present[labels[i]] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::DegenerateSplit(
            "fewer than 2 classes in the train split".into(),
        ));
    }

    let x_train = embeddings.select(Axis(0), train);
    let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let (weights, bias) = fit_softmax(x_train.view(), &y_train, num_classes, cfg);

    let x_test = embeddings.select(Axis(0), test);
    let logits = x_test.dot(&weights.t()) + &bias;
    let mut correct = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (row, &i) in logits.rows().into_iter().zip(test) {
        let pred = argmax(row.iter().copied());
        total[labels[i]] += 1;
        if pred == labels[i] {
            correct[labels[i]] += 1;
        }
    }
    let hits: usize = correct.iter().sum();
    Ok(ProbeReport {
        top1: hits as f64 / test.len() as f64,
        per_class: correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect(),
        split_seed: cfg.seed,
        train_size: train.len(),
        test_size: test.len(),
    })
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn fit_softmax(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> (Array2<f64>, Array1<f64>) {
    let (n, d) = x.dim();
    let mut w = Array2::<f64>::zeros((num_classes, d));
    let mut b = Array1::<f64>::zeros(num_classes);
    for _ in 0..cfg.steps {
        let mut probs = x.dot(&w.t()) + &b;
        for mut row in probs.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let s = row.sum();
            row /= s;
        }
        for (row, &label) in probs.rows_mut().into_iter().zip(y) {
            let mut row = row;
            row[label] -= 1.0;
        }
        probs /= n as f64;
        let grad_w = probs.t().dot(&x) + &(&w * cfg.reg);
        let grad_b = probs.sum_axis(Axis(0));
        w.scaled_add(-cfg.lr, &grad_w);
        b.scaled_add(-cfg.lr, &grad_b);
    }
    (w, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub feature_std: Vec<f64>,
    pub mean_std: f64,
    pub effective_rank: f64,
    pub top_eigen_mass: f64,
    pub collapsed: bool,
}

/// Spread diagnostics of raw embeddings (`d × m`): per-feature standard
/// deviation, effective rank `exp(H(λ/Σλ))` of the covariance spectrum, and
/// the share of variance on the leading eigenvalue.
pub fn collapse_metrics(embeddings: &EmbeddingBatch) -> Result<CollapseReport> {
    let x = embeddings.view();
    let (d, m) = x.dim();
    if m < 2 {
        return Err(Error::BatchTooSmall(m));
    }
    let mean = x.mean_axis(Axis(1)).expect("m >= 2");
    let centered = &x - &mean.insert_axis(Axis(1));
    let feature_std: Vec<f64> = centered
        .rows()
        .into_iter()
        .map(|r| (r.dot(&r) / m as f64).sqrt())
        .collect();
    let mean_std = feature_std.iter().sum::<f64>() / d as f64;

    let cov = SymMatrix::symmetrized(centered.dot(&centered.t()) / m as f64);
    let spectrum = sym_eig(&cov)?;
    let lambdas: Vec<f64> = spectrum.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = lambdas.iter().sum();
    let (effective_rank, top_eigen_mass) = if total > 0.0 {
        let entropy: f64 = lambdas
            .iter()
            .map(|&l| l / total)
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        (entropy.exp(), spectrum.lambda_max.max(0.0) / total)
    } else {
        (1.0, 1.0)
    };
    Ok(CollapseReport {
        collapsed: top_eigen_mass >= COLLAPSE_TOP_MASS || mean_std <= COLLAPSE_MEAN_STD,
        feature_std,
        mean_std,
        effective_rank,
        top_eigen_mass,
    })
}

/// Majority vote over the `k` Euclidean nearest training points; ties go to
/// the label of the single nearest neighbor.
pub fn knn_accuracy(
    train_emb: ArrayView2<'_, f64>,
    train_labels: &[usize],
    test_emb: ArrayView2<'_, f64>,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    let n = train_emb.nrows();
    if n == 0 {
        return Err(Error::EmptyTrainSet);
    }
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!(
            "k = {k} must lie in [1, {n}]"
        )));
    }
    if train_labels.len() != n || test_labels.len() != test_emb.nrows() {
        return Err(Error::dims("one label per row", "mismatched label count"));
    }
    if test_labels.is_empty() {
        return Ok(0.0);
    }
    let num_classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let mut hits = 0usize;
    for (q, &truth) in test_emb.rows().into_iter().zip(test_labels) {
        let mut dist: Vec<(f64, usize)> = train_emb
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let d2 = r
                    .iter()
                    .zip(q.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                (d2, i)
            })
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; num_classes];
        for &(_, i) in &dist[..k] {
            votes[train_labels[i]] += 1;
        }
        let top = *votes.iter().max().expect("non-empty");
        let nearest = train_labels[dist[0].1];
        let pred = if votes[nearest] == top {
            nearest
        } else {
            // first class reaching the top count, by neighbor order
            dist[..k]
                .iter()
                .map(|&(_, i)| train_labels[i])
                .find(|&l| votes[l] == top)
                .expect("some label has the top count")
        };
        if pred == truth {
            hits += 1;
        }
    }
    Ok(hits as f64 / test_labels.len() as f64)
}
