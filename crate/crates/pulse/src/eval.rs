//! Evaluation harness: window embeddings, train-statistics
//! standardization, an L2-regularized multinomial logistic probe fit by
//! full-batch gradient descent with backtracking line search, label-scarce
//! probing, and threshold-free ranking metrics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Split, WindowDataset};
use crate::error::{PulseError, Result};
use crate::model::PulseModel;
use crate::rng;
use crate::train::gather;

/// Per-window embeddings (row-major n × d) with labels and split tags.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub features: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub n_classes: usize,
}

impl EmbeddingSet {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn split_rows(&self, split: Split) -> Vec<usize> {
        (0..self.n).filter(|&i| self.splits[i] == split).collect()
    }

    /// Standardize every feature using mean/std computed on the training
    /// rows only. Zero-variance features are left centered but unscaled.
    /// Returns the (mean, std) used.
    pub fn standardize(&mut self) -> (Vec<f64>, Vec<f64>) {
        let train = self.split_rows(Split::Train);
        assert!(!train.is_empty(), "no training rows to standardize with");
        let mut mean = vec![0.0; self.d];
        for &i in &train {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= train.len() as f64;
        }
        let mut var = vec![0.0; self.d];
        for &i in &train {
            for k in 0..self.d {
                let dv = self.features[i * self.d + k] - mean[k];
                var[k] += dv * dv;
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|v| {
                let s = (v / train.len() as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        for i in 0..self.n {
            for k in 0..self.d {
                self.features[i * self.d + k] =
                    (self.features[i * self.d + k] - mean[k]) / std[k];
            }
        }
        (mean, std)
    }
}

/// Encode every window with the system encoder; the embedding of a window
/// is its pooled parameter estimate θ.
pub fn embed(model: &PulseModel, ds: &WindowDataset) -> Result<EmbeddingSet> {
    let d = model.cfg.enc_width;
    let mut features = Vec::with_capacity(ds.n * d);
    let chunk = 64;
    let mut i = 0;
    while i < ds.n {
        let idxs: Vec<usize> = (i..(i + chunk).min(ds.n)).collect();
        let batch = gather(ds, &idxs);
        let rep = model.f_sys(&batch)?;
        features.extend(rep.theta.data());
        i += chunk;
    }
    Ok(EmbeddingSet {
        features,
        n: ds.n,
        d,
        labels: ds.labels.clone(),
        splits: ds.splits.clone(),
        n_classes: ds.class_params.len(),
    })
}

/// Multinomial logistic regression weights (s × d) and biases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Probe {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub classes: usize,
    pub d: usize,
    pub iters: usize,
    pub final_grad_norm: f64,
}

/// Ridge penalty applied to probe weights (biases unpenalized).
pub const PROBE_LAMBDA: f64 = 1.0;
const PROBE_TOL: f64 = 1e-6;
const PROBE_MAX_ITERS: usize = 2000;

fn softmax_row(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

struct ProbeData<'a> {
    x: &'a [f64],
    y: &'a [usize],
    n: usize,
    d: usize,
    s: usize,
    lambda: f64,
}

impl ProbeData<'_> {
    /// Regularized mean cross-entropy and its exact gradient.
    fn loss_grad(&self, w: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let (n, d, s) = (self.n, self.d, self.s);
        let mut loss = 0.0;
        let mut gw = vec![0.0; s * d];
        let mut gb = vec![0.0; s];
        let mut p = vec![0.0; s];
        for i in 0..n {
            let xi = &self.x[i * d..(i + 1) * d];
            for c in 0..s {
                let mut z = b[c];
                for k in 0..d {
                    z += w[c * d + k] * xi[k];
                }
                p[c] = z;
            }
            softmax_row(&mut p);
            loss -= p[self.y[i]].max(1e-300).ln();
            for c in 0..s {
                let r = p[c] - if c == self.y[i] { 1.0 } else { 0.0 };
                gb[c] += r;
                for k in 0..d {
                    gw[c * d + k] += r * xi[k];
                }
            }
        }
        loss /= n as f64;
        for g in gw.iter_mut().chain(gb.iter_mut()) {
            *g /= n as f64;
        }
        for (gwk, wk) in gw.iter_mut().zip(w) {
            *gwk += self.lambda * wk;
            loss += 0.5 * self.lambda * wk * wk;
        }
        (loss, gw, gb)
    }
}

/// Fit the probe with full-batch gradient descent and an Armijo
/// backtracking line search from zero initialization.
pub fn fit_probe(
    x: &[f64],
    y: &[usize],
    n: usize,
    d: usize,
    s: usize,
    lambda: f64,
) -> Result<Probe> {
    if n == 0 || x.len() != n * d || y.len() != n {
        return Err(PulseError::Dimension(format!(
            "probe inputs inconsistent: n={n}, d={d}, |x|={}, |y|={}",
            x.len(),
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= s) {
        return Err(PulseError::Parameter(format!(
            "label {bad} out of range for {s} classes"
        )));
    }
    let data = ProbeData { x, y, n, d, s, lambda };
    let mut w = vec![0.0; s * d];
    let mut b = vec![0.0; s];
    let (mut loss, mut gw, mut gb) = data.loss_grad(&w, &b);
    let mut iters = 0;
    let mut grad_norm = f64::INFINITY;
    while iters < PROBE_MAX_ITERS {
        grad_norm = (gw.iter().chain(gb.iter()).map(|g| g * g).sum::<f64>()).sqrt();
        if grad_norm < PROBE_TOL {
            break;
        }
        // Backtracking line search on the steepest-descent direction.
        let mut lr = 1.0;
        let sq = grad_norm * grad_norm;
        loop {
            let wt: Vec<f64> = w.iter().zip(&gw).map(|(wk, g)| wk - lr * g).collect();
            let bt: Vec<f64> = b.iter().zip(&gb).map(|(bk, g)| bk - lr * g).collect();
            let (lt, gwt, gbt) = data.loss_grad(&wt, &bt);
            if lt <= loss - 1e-4 * lr * sq || lr < 1e-14 {
                w = wt;
                b = bt;
                loss = lt;
                gw = gwt;
                gb = gbt;
                break;
            }
            lr *= 0.5;
        }
        iters += 1;
    }
    Ok(Probe {
        w,
        b,
        classes: s,
        d,
        iters,
        final_grad_norm: grad_norm,
    })
}

impl Probe {
    /// Class probabilities, row-major n × s.
    pub fn scores(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (d, s) = (self.d, self.classes);
        let mut out = vec![0.0; n * s];
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            let row = &mut out[i * s..(i + 1) * s];
            for c in 0..s {
                let mut z = self.b[c];
                for k in 0..d {
                    z += self.w[c * d + k] * xi[k];
                }
                row[c] = z;
            }
            softmax_row(row);
        }
        out
    }
}

/// Argmax with ties resolved toward the lowest class index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub auroc_macro: f64,
    pub auprc_macro: f64,
    /// Classes with no positives or no negatives are skipped from the
    /// macro averages; each skip is recorded here.
    pub warnings: Vec<String>,
}

/// Midranks (average rank for ties), 1-based.
fn midranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// One-vs-rest AUROC via the rank-sum identity with midranks for ties.
pub fn auroc_binary(scores: &[f64], positives: &[bool]) -> f64 {
    let ranks = midranks(scores);
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    assert!(n_pos > 0 && n_neg > 0, "degenerate class for AUROC");
    let rank_sum: f64 = ranks
        .iter()
        .zip(positives)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    (rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// Area under the precision-recall curve by step integration, grouping
/// tied scores into single thresholds.
pub fn auprc_binary(scores: &[f64], positives: &[bool]) -> f64 {
    let n = scores.len();
    let n_pos = positives.iter().filter(|&&p| p).count();
    assert!(n_pos > 0, "no positives for AUPRC");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            if positives[idx[k]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let recall = tp / n_pos as f64;
        let precision = tp / (tp + fp);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    area
}

/// Accuracy plus macro one-vs-rest AUROC/AUPRC over `s` classes from
/// row-major n × s scores.
pub fn compute_metrics(scores: &[f64], labels: &[usize], s: usize) -> Metrics {
    let n = labels.len();
    assert_eq!(scores.len(), n * s, "score matrix shape mismatch");
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        if argmax_lowest(&scores[i * s..(i + 1) * s]) == y {
            correct += 1;
        }
    }
    let mut warnings = Vec::new();
    let mut aurocs = Vec::new();
    let mut auprcs = Vec::new();
    for c in 0..s {
        let positives: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let n_pos = positives.iter().filter(|&&p| p).count();
        if n_pos == 0 || n_pos == n {
            warnings.push(format!(
                "class {c} has {n_pos} positive(s) of {n}; skipped from ranking metrics"
            ));
            continue;
        }
        let col: Vec<f64> = (0..n).map(|i| scores[i * s + c]).collect();
        aurocs.push(auroc_binary(&col, &positives));
        auprcs.push(auprc_binary(&col, &positives));
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Metrics {
        accuracy: correct as f64 / n as f64,
        auroc_macro: mean(&aurocs),
        auprc_macro: mean(&auprcs),
        warnings,
    }
}

/// Probe result on held-out test rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub fraction: f64,
    pub labeled: usize,
    pub pseudo_classes: Vec<usize>,
    pub metrics: Metrics,
    pub probe_iters: usize,
}

fn fit_and_score(
    emb: &EmbeddingSet,
    train_rows: &[usize],
    pseudo_classes: &[usize],
    fraction: f64,
) -> Result<ProbeReport> {
    let s = emb.n_classes;
    let mut x = Vec::with_capacity((train_rows.len() + pseudo_classes.len()) * emb.d);
    let mut y = Vec::with_capacity(train_rows.len() + pseudo_classes.len());
    for &i in train_rows {
        x.extend_from_slice(emb.row(i));
        y.push(emb.labels[i]);
    }
    // Pseudo-examples: one smoothing observation per absent class at the
    // class mean of the full training embeddings.
    let all_train = emb.split_rows(Split::Train);
    for &c in pseudo_classes {
        let members: Vec<usize> = all_train
            .iter()
            .copied()
            .filter(|&i| emb.labels[i] == c)
            .collect();
        let mut mean = vec![0.0; emb.d];
        for &i in &members {
            for (m, v) in mean.iter_mut().zip(emb.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= members.len().max(1) as f64;
        }
        x.extend_from_slice(&mean);
        y.push(c);
    }
    let n_fit = y.len();
    let probe = fit_probe(&x, &y, n_fit, emb.d, s, PROBE_LAMBDA)?;
    let test_rows = emb.split_rows(Split::Test);
    let mut xt = Vec::with_capacity(test_rows.len() * emb.d);
    let mut yt = Vec::with_capacity(test_rows.len());
    for &i in &test_rows {
        xt.extend_from_slice(emb.row(i));
        yt.push(emb.labels[i]);
    }
    let scores = probe.scores(&xt, test_rows.len());
    Ok(ProbeReport {
        fraction,
        labeled: train_rows.len(),
        pseudo_classes: pseudo_classes.to_vec(),
        metrics: compute_metrics(&scores, &yt, s),
        probe_iters: probe.iters,
    })
}

/// Fit on all labeled training embeddings, report on the test split.
pub fn linear_probe(emb: &EmbeddingSet) -> Result<ProbeReport> {
    let train = emb.split_rows(Split::Train);
    fit_and_score(emb, &train, &[], 1.0)
}

/// Fit on a seeded label-scarce subsample of the training rows. Classes
/// absent from the subsample get a mean-embedding pseudo-example; with
/// `resample` set, the draw is retried (up to 100 times) until every
/// class appears instead.
pub fn semi_supervised(
    emb: &EmbeddingSet,
    fraction: f64,
    seed: u64,
    resample: bool,
) -> Result<ProbeReport> {
    if !(0.0..=1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(PulseError::Parameter(format!(
            "label fraction must be in (0, 1], got {fraction}"
        )));
    }
    let train = emb.split_rows(Split::Train);
    if (fraction - 1.0).abs() < 1e-12 {
        return fit_and_score(emb, &train, &[], 1.0);
    }
    let k = ((fraction * train.len() as f64).floor() as usize).max(1);
    let mut rng = rng::stream(seed, &format!("probe-subsample/{fraction}"));
    let mut attempt = 0;
    loop {
        let mut pool = train.clone();
        pool.shuffle(&mut rng);
        let mut chosen: Vec<usize> = pool[..k].to_vec();
        chosen.sort_unstable();
        let mut present = vec![false; emb.n_classes];
        for &i in &chosen {
            present[emb.labels[i]] = true;
        }
        let absent: Vec<usize> = (0..emb.n_classes).filter(|&c| !present[c]).collect();
        if absent.is_empty() || !resample {
            return fit_and_score(emb, &chosen, &absent, fraction);
        }
        attempt += 1;
        if attempt >= 100 {
            return Err(PulseError::Contract(format!(
                "could not draw a subsample covering all {} classes in 100 tries",
                emb.n_classes
            )));
        }
    }
}
