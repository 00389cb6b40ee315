//! Confidence weighting of synthetic images.
//!
//! A linear probe trained on real-image features supplies logits, a single
//! temperature calibrated on held-out reals rescales them, and the calibrated
//! softmax entry of the guiding image's class becomes the synthetic's
//! confidence `q`. The training sampler then draws real image `n` with
//! probability `(1 - alpha) / N` and its synthetic `m` with probability
//! `alpha * q[n][m] / (N * sum_j q[n][j])`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DatasetManifest, FeatureTable};
use crate::seed;

#[derive(Debug, Error)]
pub enum WeightingError {
    #[error("class `{0}` has no training examples")]
    EmptyClass(String),
    #[error("label `{0}` is not in the class list")]
    UnknownLabel(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("synthetic probability {0} outside [0, 1]")]
    Alpha(f64),
    #[error("manifest has no real images")]
    NoReals,
    #[error("no confidence score for synthetic `{0}`")]
    MissingScore(String),
    #[error("score {q} for `{id}` outside [0, 1]")]
    ScoreRange { id: String, q: f64 },
    #[error("no feature row for `{0}`")]
    MissingFeature(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed row {row}: {reason}")]
    BadRow { row: usize, reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> WeightingError {
    WeightingError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Multinomial logistic regression on feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// Row-major `classes.len() x dim` weights.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: Vec<String>,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeParams {
    /// L2 penalty on the weights (biases are unpenalized).
    pub l2: f64,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            tolerance: 1e-6,
            max_iter: 2000,
        }
    }
}

impl LinearProbe {
    pub fn zeros(classes: Vec<String>, dim: usize) -> Self {
        Self {
            weights: vec![0.0; classes.len() * dim],
            bias: vec![0.0; classes.len()],
            classes,
            dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// `W x + b`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, WeightingError> {
        if x.len() != self.dim {
            return Err(WeightingError::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(self
            .weights
            .chunks_exact(self.dim.max(1))
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize, WeightingError> {
        Ok(argmax(&self.logits(x)?))
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let split = self.weights.len();
        self.weights.copy_from_slice(&p[..split]);
        self.bias.copy_from_slice(&p[split..]);
    }
}

/// Functional form of [`LinearProbe::logits`].
pub fn logits(probe: &LinearProbe, feature: &[f64]) -> Result<Vec<f64>, WeightingError> {
    probe.logits(feature)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `log sum exp(z)` with max subtraction.
fn log_sum_exp(z: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = z.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + z.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy plus L2 penalty, and its gradient.
fn probe_objective(
    probe: &LinearProbe,
    xs: &[&[f64]],
    ys: &[usize],
    l2: f64,
) -> (f64, Vec<f64>) {
    let c = probe.num_classes();
    let d = probe.dim;
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; c * d + c];
    for (x, &y) in xs.iter().zip(ys) {
        let z = probe.logits(x).expect("dimension checked");
        let lse = log_sum_exp(z.iter().copied());
        loss += lse - z[y];
        for k in 0..c {
            let p = (z[k] - lse).exp();
            let r = (p - if k == y { 1.0 } else { 0.0 }) / n;
            for j in 0..d {
                grad[k * d + j] += r * x[j];
            }
            grad[c * d + k] += r;
        }
    }
    loss /= n;
    for (i, w) in probe.weights.iter().enumerate() {
        loss += 0.5 * l2 * w * w;
        grad[i] += l2 * w;
    }
    (loss, grad)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Fits a probe from zero initialization with L-BFGS (memory 10) and a
/// backtracking Armijo line search.
pub fn train_probe(
    features: &FeatureTable,
    classes: &[String],
    params: ProbeParams,
) -> Result<LinearProbe, WeightingError> {
    let index: HashMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut ys = Vec::with_capacity(features.len());
    for label in features.labels() {
        ys.push(
            *index
                .get(label.as_str())
                .ok_or_else(|| WeightingError::UnknownLabel(label.clone()))?,
        );
    }
    for (i, c) in classes.iter().enumerate() {
        if !ys.contains(&i) {
            return Err(WeightingError::EmptyClass(c.clone()));
        }
    }
    let xs: Vec<&[f64]> = features.rows().collect();
    if xs.iter().flat_map(|r| r.iter()).any(|v| !v.is_finite()) {
        return Err(WeightingError::NonFinite("features"));
    }

    let mut probe = LinearProbe::zeros(classes.to_vec(), features.dim());
    let eval = |p: &[f64], probe: &mut LinearProbe| {
        probe.set_params(p);
        probe_objective(probe, &xs, &ys, params.l2)
    };

    const MEMORY: usize = 10;
    let mut x = probe.params();
    let (mut f, mut g) = eval(&x, &mut probe);
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();

    for _ in 0..params.max_iter {
        if norm(&g) <= params.tolerance {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            history.clear();
        }

        let mut step = 1.0;
        let (x_new, f_new, g_new) = loop {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
            let (fc, gc) = eval(&cand, &mut probe);
            if fc <= f + 1e-4 * step * slope || step < 1e-20 {
                break (cand, fc, gc);
            }
            step *= 0.5;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let progressed = f_new < f || norm(&g_new) < norm(&g);
        x = x_new;
        f = f_new;
        g = g_new;
        if sy > 1e-12 {
            history.push((s, y, 1.0 / sy));
            if history.len() > MEMORY {
                history.remove(0);
            }
        }
        if !progressed {
            break;
        }
    }
    probe.set_params(&x);
    Ok(probe)
}

/// Mean regularized training objective of `probe`.
pub fn probe_loss(
    probe: &LinearProbe,
    features: &FeatureTable,
    l2: f64,
) -> Result<f64, WeightingError> {
    let mut ys = Vec::with_capacity(features.len());
    for label in features.labels() {
        ys.push(
            probe
                .class_index(label)
                .ok_or_else(|| WeightingError::UnknownLabel(label.clone()))?,
        );
    }
    let xs: Vec<&[f64]> = features.rows().collect();
    Ok(probe_objective(probe, &xs, &ys, l2).0)
}

/// Softmax temperature, `T > 0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(value: f64) -> Result<Self, WeightingError> {
        if value > 0.0 && value.is_finite() {
            Ok(Self(value))
        } else {
            Err(WeightingError::Temperature(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.0)
    }
}

/// `softmax(z / T)`.
pub fn softmax_scaled(z: &[f64], t: Temperature) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|v| v / t.0).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Calibrated probability of class `class_index` under logits `z`.
pub fn confidence(z: &[f64], t: Temperature, class_index: usize) -> Result<f64, WeightingError> {
    if class_index >= z.len() {
        return Err(WeightingError::ClassIndex {
            index: class_index,
            classes: z.len(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(WeightingError::NonFinite("logits"));
    }
    Ok(softmax_scaled(z, t)[class_index].clamp(0.0, 1.0))
}

/// Mean negative log-likelihood of `labels` under `softmax(z / T)`.
pub fn nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| log_sum_exp(z.iter().map(|v| v / t)) - z[y] / t)
        .sum();
    total / logits.len() as f64
}

pub const TEMPERATURE_MIN: f64 = 0.05;
pub const TEMPERATURE_MAX: f64 = 20.0;
/// Width of the final bracket on `ln T`.
pub const LOG_T_TOLERANCE: f64 = 1e-4;

/// Temperature minimizing validation NLL over `[0.05, 20]`.
///
/// Golden-section search on `ln T`; the result is never worse than `T = 1`.
pub fn calibrate_temperature(
    val_logits: &[Vec<f64>],
    val_labels: &[usize],
) -> Result<Temperature, WeightingError> {
    if val_logits.is_empty() {
        return Err(WeightingError::EmptyValidation);
    }
    assert_eq!(val_logits.len(), val_labels.len(), "logits and labels must align");
    for (z, &y) in val_logits.iter().zip(val_labels) {
        if y >= z.len() {
            return Err(WeightingError::ClassIndex {
                index: y,
                classes: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(WeightingError::NonFinite("logits"));
        }
    }
    let f = |u: f64| nll(val_logits, val_labels, u.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TEMPERATURE_MIN.ln(), TEMPERATURE_MAX.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > LOG_T_TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let found = (0.5 * (a + b)).exp();
    let best = [found, 1.0, TEMPERATURE_MIN, TEMPERATURE_MAX]
        .into_iter()
        .map(|t| (t, nll(val_logits, val_labels, t)))
        .fold((found, f64::INFINITY), |acc, (t, v)| if v < acc.1 { (t, v) } else { acc });
    Temperature::new(best.0)
}

/// Per-class held-out split of a feature table.
///
/// Each class with `n >= 2` rows gives `max(1, round(fraction * n))` rows
/// (at most `n - 1`) to validation; a class with a single row uses it for
/// both sides. Returns `(train_rows, validation_rows)` in table order.
pub fn split_validation(
    table: &FeatureTable,
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in table.labels().iter().enumerate() {
        by_class.entry(l.as_str()).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (label, mut rows) in by_class {
        if rows.len() == 1 {
            train.push(rows[0]);
            val.push(rows[0]);
            continue;
        }
        let mut rng = seed::rng(seed::stable_hash(&[
            seed::SeedPart::Str("split"),
            seed::SeedPart::Int(seed),
            seed::SeedPart::Str(label),
        ]));
        rows.shuffle(&mut rng);
        let n = rows.len();
        let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        val.extend_from_slice(&rows[..k]);
        train.extend_from_slice(&rows[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Trained probe plus its calibrated temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub probe: LinearProbe,
    pub temperature: Temperature,
    pub train_size: usize,
    pub validation_size: usize,
    pub nll_at_one: f64,
    pub nll_at_temperature: f64,
}

/// Trains a probe on the training part of `real_features` and calibrates a
/// temperature on the held-out part.
pub fn fit_calibration(
    real_features: &FeatureTable,
    classes: &[String],
    validation_fraction: f64,
    seed: u64,
    params: ProbeParams,
) -> Result<Calibration, WeightingError> {
    let (train_rows, val_rows) = split_validation(real_features, validation_fraction, seed);
    let train = real_features.select(&train_rows);
    let val = real_features.select(&val_rows);
    let probe = train_probe(&train, classes, params)?;
    let mut zs = Vec::with_capacity(val.len());
    let mut ys = Vec::with_capacity(val.len());
    for (row, label) in val.rows().zip(val.labels()) {
        zs.push(probe.logits(row)?);
        ys.push(
            probe
                .class_index(label)
                .ok_or_else(|| WeightingError::UnknownLabel(label.clone()))?,
        );
    }
    let temperature = calibrate_temperature(&zs, &ys)?;
    Ok(Calibration {
        nll_at_one: nll(&zs, &ys, 1.0),
        nll_at_temperature: nll(&zs, &ys, temperature.value()),
        probe,
        temperature,
        train_size: train.len(),
        validation_size: val.len(),
    })
}

/// Confidence `q` per synthetic image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfidenceScores(pub BTreeMap<String, f64>);

impl ConfidenceScores {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.0.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// CSV `synthetic_id,q`.
    pub fn to_csv_string(&self) -> Result<String, WeightingError> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["synthetic_id", "q"])?;
        for (id, q) in &self.0 {
            wtr.write_record([id.as_str(), &q.to_string()])?;
        }
        finish_csv(wtr)
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self, WeightingError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut out = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let q: f64 = rec
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| WeightingError::BadRow {
                    row: i,
                    reason: "q is not a number".into(),
                })?;
            let id = rec[0].to_string();
            if !(0.0..=1.0).contains(&q) {
                return Err(WeightingError::ScoreRange { id, q });
            }
            out.insert(id, q);
        }
        Ok(Self(out))
    }

    /// Copies each score into the matching synthetic record.
    pub fn apply_to(&self, manifest: &mut DatasetManifest) {
        for s in &mut manifest.synthetics {
            if let Some(q) = self.get(&s.id) {
                s.confidence = Some(q);
            }
        }
    }
}

fn finish_csv(wtr: csv::Writer<Vec<u8>>) -> Result<String, WeightingError> {
    let bytes = wtr
        .into_inner()
        .map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Scores every synthetic in `manifest` whose guiding class the probe knows.
pub fn score_synthetics(
    calibration: &Calibration,
    manifest: &DatasetManifest,
    synthetic_features: &FeatureTable,
) -> Result<ConfidenceScores, WeightingError> {
    let probe = &calibration.probe;
    let mut out = BTreeMap::new();
    for s in &manifest.synthetics {
        let x = synthetic_features
            .get(&s.id)
            .ok_or_else(|| WeightingError::MissingFeature(s.id.clone()))?;
        let class = probe
            .class_index(&s.class_label)
            .ok_or_else(|| WeightingError::UnknownLabel(s.class_label.clone()))?;
        let z = probe.logits(x)?;
        out.insert(s.id.clone(), confidence(&z, calibration.temperature, class)?);
    }
    Ok(ConfidenceScores(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    Real,
    Synthetic,
}

impl fmt::Display for ImageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImageKind::Real => "real",
            ImageKind::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionEntry {
    pub image_id: String,
    pub kind: ImageKind,
    pub probability: f64,
}

/// Selection probabilities over every real and synthetic image.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    pub entries: Vec<DistributionEntry>,
}

impl SamplingDistribution {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.probability).sum()
    }

    pub fn mass(&self, kind: ImageKind) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.probability)
            .sum()
    }

    pub fn probability(&self, id: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.image_id == id)
            .map(|e| e.probability)
    }

    /// CSV `image_id,kind,probability`.
    pub fn to_csv_string(&self) -> Result<String, WeightingError> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["image_id", "kind", "probability"])?;
        for e in &self.entries {
            wtr.write_record([
                e.image_id.as_str(),
                &e.kind.to_string(),
                &e.probability.to_string(),
            ])?;
        }
        finish_csv(wtr)
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self, WeightingError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |reason: &str| WeightingError::BadRow {
                row: i,
                reason: reason.into(),
            };
            let kind = match rec.get(1) {
                Some("real") => ImageKind::Real,
                Some("synthetic") => ImageKind::Synthetic,
                _ => return Err(bad("kind must be `real` or `synthetic`")),
            };
            let probability: f64 = rec
                .get(2)
                .and_then(|s| s.parse().ok())
                .filter(|p: &f64| *p >= 0.0 && p.is_finite())
                .ok_or_else(|| bad("probability must be a nonnegative number"))?;
            entries.push(DistributionEntry {
                image_id: rec[0].to_string(),
                kind,
                probability,
            });
        }
        Ok(Self { entries })
    }
}

/// Real/synthetic selection probabilities for `manifest`.
///
/// A real image without synthetics keeps the full `1 / N`; one whose scores
/// sum to zero spreads its `alpha / N` evenly over its synthetics.
pub fn build_distribution(
    manifest: &DatasetManifest,
    scores: &ConfidenceScores,
    alpha: f64,
) -> Result<SamplingDistribution, WeightingError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(WeightingError::Alpha(alpha));
    }
    if manifest.reals.is_empty() {
        return Err(WeightingError::NoReals);
    }
    let n = manifest.reals.len() as f64;
    let mut children: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in manifest.synthetics.iter().enumerate() {
        children.entry(s.parent_real_id.as_str()).or_default().push(i);
    }

    let mut real_entries = Vec::with_capacity(manifest.reals.len());
    let mut syn_probs = vec![0.0; manifest.synthetics.len()];
    for real in &manifest.reals {
        let kids = children.get(real.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        if kids.is_empty() {
            real_entries.push(DistributionEntry {
                image_id: real.id.clone(),
                kind: ImageKind::Real,
                probability: 1.0 / n,
            });
            continue;
        }
        real_entries.push(DistributionEntry {
            image_id: real.id.clone(),
            kind: ImageKind::Real,
            probability: (1.0 - alpha) / n,
        });
        let mut qs = Vec::with_capacity(kids.len());
        for &k in kids {
            let id = &manifest.synthetics[k].id;
            let q = scores
                .get(id)
                .ok_or_else(|| WeightingError::MissingScore(id.clone()))?;
            if !(0.0..=1.0).contains(&q) {
                return Err(WeightingError::ScoreRange { id: id.clone(), q });
            }
            qs.push(q);
        }
        let sum: f64 = qs.iter().sum();
        for (&k, q) in kids.iter().zip(qs) {
            syn_probs[k] = if sum > 0.0 {
                alpha * q / (n * sum)
            } else {
                alpha / (n * kids.len() as f64)
            };
        }
    }

    let mut entries = real_entries;
    entries.extend(
        manifest
            .synthetics
            .iter()
            .zip(syn_probs)
            .map(|(s, p)| DistributionEntry {
                image_id: s.id.clone(),
                kind: ImageKind::Synthetic,
                probability: p,
            }),
    );
    Ok(SamplingDistribution { entries })
}

/// `count` i.i.d. draws from `dist`, reproducible from `seed`.
pub fn sample_stream(dist: &SamplingDistribution, seed: u64, count: usize) -> Vec<String> {
    if count == 0 || dist.entries.is_empty() {
        return Vec::new();
    }
    let weights: Vec<f64> = dist.entries.iter().map(|e| e.probability).collect();
    let index = WeightedIndex::new(&weights).expect("distribution has positive total mass");
    let mut rng = seed::rng(seed);
    (0..count)
        .map(|_| dist.entries[index.sample(&mut rng)].image_id.clone())
        .collect()
}

pub fn save_text(path: &Path, text: &str) -> Result<(), WeightingError> {
    seed::atomic_write(path, text.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn load_scores(path: &Path) -> Result<ConfidenceScores, WeightingError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    ConfidenceScores::from_csv_reader(std::io::BufReader::new(file))
}

pub fn load_distribution(path: &Path) -> Result<SamplingDistribution, WeightingError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    SamplingDistribution::from_csv_reader(std::io::BufReader::new(file))
}
