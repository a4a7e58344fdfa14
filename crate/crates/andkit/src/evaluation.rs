//! Feature-quality measurements. This is the only module that reads labels.

use serde::{Deserialize, Serialize};

use crate::affinity::{check_tau, top_k, Neighbourhood};
use crate::encoder::EncoderParams;
use crate::memory_bank::FeatureBank;
use crate::numerics::{log_sum_exp, Mat64, SeededRng};
use crate::pipeline::{MetricsRecord, RoundPlan, TrainMonitor};
use crate::{Error, Result};

pub const DEFAULT_KNN_K: usize = 10;
pub const DEFAULT_EVAL_TAU: f64 = 0.07;

/// Weighted vote over the `k_eval` most similar bank rows:
/// `score_c = Σ_{j ∈ top-k, label_j = c} exp(s_j / τ)`. Ties go to the lower
/// class id. `exclude` drops one bank row from the candidates.
pub fn weighted_knn_predict(
    query: &[f64],
    bank: &FeatureBank,
    labels: &[usize],
    k_eval: usize,
    tau: f64,
    exclude: Option<usize>,
) -> Result<usize> {
    check_tau(tau)?;
    if labels.len() != bank.n() {
        return Err(Error::contract(format!(
            "{} labels for a bank of {} rows",
            labels.len(),
            bank.n()
        )));
    }
    if k_eval == 0 || k_eval > bank.n() {
        return Err(Error::config(format!("k_eval must be in 1..={}, got {k_eval}", bank.n())));
    }
    let sims = bank.all_similarities(query)?;
    Ok(vote(&sims, labels, k_eval, tau, exclude))
}

fn vote(sims: &[f64], labels: &[usize], k_eval: usize, tau: f64, exclude: Option<usize>) -> usize {
    let nearest = top_k(sims, exclude, k_eval);
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let mut scores = vec![0.0; classes];
    for j in nearest {
        scores[labels[j]] += (sims[j] / tau).exp();
    }
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

/// Accuracy of weighted kNN over a split, with per-class breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
}

/// Classifies each row of `features` against the labelled bank.
/// With `leave_one_out`, query `r` is row `r` of the bank and may not vote
/// for itself.
pub fn knn_accuracy_on_features(
    features: &Mat64,
    truth: &[usize],
    bank: &FeatureBank,
    bank_labels: &[usize],
    k_eval: usize,
    tau: f64,
    leave_one_out: bool,
) -> Result<KnnResult> {
    check_tau(tau)?;
    if truth.len() != features.rows() {
        return Err(Error::Dimension {
            expected: features.rows(),
            actual: truth.len(),
        });
    }
    if bank_labels.len() != bank.n() {
        return Err(Error::contract("bank labels do not cover every bank row"));
    }
    if leave_one_out && features.rows() != bank.n() {
        return Err(Error::contract("leave-one-out needs one query per bank row"));
    }
    let candidates = bank.n() - leave_one_out as usize;
    if k_eval == 0 || k_eval > bank.n() {
        return Err(Error::config(format!("k_eval must be in 1..={}, got {k_eval}", bank.n())));
    }
    let k_eval = k_eval.min(candidates);
    let classes = truth.iter().chain(bank_labels).max().map_or(1, |m| m + 1);
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (r, &t) in truth.iter().enumerate() {
        let sims = bank.all_similarities(features.row(r))?;
        let pred = vote(&sims, bank_labels, k_eval, tau, leave_one_out.then_some(r));
        totals[t] += 1;
        hits[t] += (pred == t) as usize;
    }
    let correct: usize = hits.iter().sum();
    Ok(KnnResult {
        accuracy: correct as f64 / truth.len().max(1) as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
            .collect(),
    })
}

/// Encodes `inputs` and scores them with [`knn_accuracy_on_features`].
#[allow(clippy::too_many_arguments)]
pub fn knn_accuracy(
    inputs: &Mat64,
    truth: &[usize],
    params: &EncoderParams,
    bank: &FeatureBank,
    bank_labels: &[usize],
    k_eval: usize,
    tau: f64,
    leave_one_out: bool,
) -> Result<KnnResult> {
    let feats = params.features(inputs)?;
    knn_accuracy_on_features(&feats, truth, bank, bank_labels, k_eval, tau, leave_one_out)
}

/// A softmax-regression layer on frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `classes × dim`
    pub weight: Mat64,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    /// Zero weights: every class scores equally, so prediction is class 0.
    pub fn new(dim: usize, classes: usize) -> Self {
        LinearProbe {
            weight: Mat64::zeros(classes, dim),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes())
            .map(|c| {
                self.bias[c]
                    + self
                        .weight
                        .row(c)
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for (c, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = c;
            }
        }
        best
    }

    /// Mean cross-entropy over `rows` and its gradient.
    pub fn loss_and_grad(&self, features: &Mat64, labels: &[usize], rows: &[usize]) -> (f64, LinearProbe) {
        let mut grad = LinearProbe::new(self.weight.cols(), self.classes());
        let m = rows.len().max(1) as f64;
        let mut loss = 0.0;
        for &r in rows {
            let x = features.row(r);
            let z = self.logits(x);
            let lse = log_sum_exp(&z);
            loss += lse - z[labels[r]];
            for (c, &zc) in z.iter().enumerate() {
                let d = ((zc - lse).exp() - (c == labels[r]) as u8 as f64) / m;
                grad.bias[c] += d;
                for (g, &v) in grad.weight.row_mut(c).iter_mut().zip(x) {
                    *g += d * v;
                }
            }
        }
        (loss / m, grad)
    }

    pub fn accuracy(&self, features: &Mat64, labels: &[usize]) -> f64 {
        let hits = labels
            .iter()
            .enumerate()
            .filter(|&(r, &l)| self.predict(features.row(r)) == l)
            .count();
        hits as f64 / labels.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            lr: 0.5,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Fits a [`LinearProbe`] by mini-batch SGD on fixed features.
pub fn fit_probe(features: &Mat64, labels: &[usize], classes: usize, config: &ProbeConfig) -> Result<LinearProbe> {
    if labels.len() != features.rows() {
        return Err(Error::Dimension {
            expected: features.rows(),
            actual: labels.len(),
        });
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::contract("label outside the probe's class range"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("probe batch_size must be >= 1"));
    }
    let mut probe = LinearProbe::new(features.cols(), classes);
    let mut rng = SeededRng::new(config.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let (_, g) = probe.loss_and_grad(features, labels, batch);
            for (w, gw) in probe.weight.values_mut().iter_mut().zip(g.weight.values()) {
                *w -= config.lr * gw;
            }
            for (b, gb) in probe.bias.iter_mut().zip(&g.bias) {
                *b -= config.lr * gb;
            }
        }
    }
    Ok(probe)
}

/// Trains a probe on encoded `train` inputs and returns accuracy on `test`.
pub fn linear_probe(
    train: (&Mat64, &[usize]),
    test: (&Mat64, &[usize]),
    params: &EncoderParams,
    config: &ProbeConfig,
) -> Result<f64> {
    let classes = train.1.iter().chain(test.1).max().map_or(1, |m| m + 1);
    let train_feats = params.features(train.0)?;
    let test_feats = params.features(test.0)?;
    let probe = fit_probe(&train_feats, train.1, classes, config)?;
    Ok(probe.accuracy(&test_feats, test.1))
}

/// `(consistent, inconsistent)`: a neighbourhood is consistent when all
/// members share one label.
pub fn neighbourhood_consistency<'a>(
    neighbourhoods: impl IntoIterator<Item = &'a Neighbourhood>,
    labels: &[usize],
) -> Result<(usize, usize)> {
    let (mut good, mut bad) = (0, 0);
    for nb in neighbourhoods {
        let first = *labels
            .get(nb.anchor)
            .ok_or(Error::Bounds { index: nb.anchor, len: labels.len() })?;
        let mut pure = true;
        for &m in &nb.members {
            let l = *labels.get(m).ok_or(Error::Bounds { index: m, len: labels.len() })?;
            pure &= l == first;
        }
        if pure {
            good += 1;
        } else {
            bad += 1;
        }
    }
    Ok((good, bad))
}

/// Final evaluation summary, written as one JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `train-loo` or `test`.
    pub split: String,
    pub knn_k: usize,
    pub tau: f64,
    pub knn_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub linear_accuracy: Option<f64>,
    /// Over all anchors, with the run's `k`.
    pub consistent_count: usize,
    pub inconsistent_count: usize,
}

/// One row of the per-round consistency curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConsistency {
    pub round: usize,
    pub selected: usize,
    pub selected_consistent: usize,
    pub selected_inconsistent: usize,
    pub all_consistent: usize,
    pub all_inconsistent: usize,
}

/// Label-aware training observer. Fills consistency counts of the current
/// round's selected neighbourhoods into each epoch record and, optionally,
/// leave-one-out kNN accuracy on the training inputs.
pub struct LabelMonitor<'a> {
    labels: &'a [usize],
    knn: Option<(&'a Mat64, usize, f64)>,
    current: Option<(usize, usize)>,
    pub curve: Vec<RoundConsistency>,
}

impl<'a> LabelMonitor<'a> {
    pub fn new(labels: &'a [usize]) -> Self {
        LabelMonitor {
            labels,
            knn: None,
            current: None,
            curve: Vec::new(),
        }
    }

    /// Also record kNN accuracy after each epoch.
    pub fn with_knn(mut self, inputs: &'a Mat64, k_eval: usize, tau: f64) -> Self {
        self.knn = Some((inputs, k_eval, tau));
        self
    }

    /// Writes the curve as CSV.
    pub fn write_curve_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(e.to_string()))?;
        for row in &self.curve {
            w.serialize(row).map_err(|e| Error::format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

impl TrainMonitor for LabelMonitor<'_> {
    fn on_round(&mut self, plan: &RoundPlan) -> Result<()> {
        if plan.round == 0 {
            self.current = None;
            return Ok(());
        }
        let (sc, si) = neighbourhood_consistency(plan.selected_neighbourhoods(), self.labels)?;
        let (ac, ai) = neighbourhood_consistency(&plan.neighbourhoods, self.labels)?;
        self.current = Some((sc, si));
        self.curve.push(RoundConsistency {
            round: plan.round,
            selected: plan.selected_count(),
            selected_consistent: sc,
            selected_inconsistent: si,
            all_consistent: ac,
            all_inconsistent: ai,
        });
        Ok(())
    }

    fn on_epoch(&mut self, record: &mut MetricsRecord, params: &EncoderParams, bank: &FeatureBank) -> Result<()> {
        if let Some((c, i)) = self.current {
            record.consistent_count = Some(c);
            record.inconsistent_count = Some(i);
        }
        if let Some((inputs, k_eval, tau)) = self.knn {
            let r = knn_accuracy(inputs, self.labels, params, bank, self.labels, k_eval, tau, true)?;
            record.knn_accuracy = Some(r.accuracy);
        }
        Ok(())
    }
}
