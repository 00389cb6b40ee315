//! Improved precision and recall over feature sets.
//!
//! A point set is summarized by the union of closed balls centred on each
//! point, with radius equal to its distance to the k-th nearest other point.
//! Precision is the fraction of synthetic points inside the real manifold;
//! recall is the fraction of real points inside the synthetic manifold.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::FeatureTable;

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need more than k = {k} points, got {points}")]
    TooFewPoints { points: usize, k: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("non-finite coordinate in point {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty point set")]
    Empty,
}

/// Which implementation answers radius and membership queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    /// Sequential, fully sorted distances and exhaustive scans.
    Naive,
    /// Parallel partial selection with early exit and norm pruning.
    #[default]
    Accelerated,
}

/// Euclidean distance. Both strategies go through this one function.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldModel {
    points: Vec<Vec<f64>>,
    radii: Vec<f64>,
    norms: Vec<f64>,
    k: usize,
    dim: usize,
}

impl ManifoldModel {
    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn check_points(points: &[Vec<f64>]) -> Result<usize, MetricsError> {
    let dim = points.first().ok_or(MetricsError::Empty)?.len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(MetricsError::DimensionMismatch {
                expected: dim,
                found: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite(i));
        }
    }
    Ok(dim)
}

fn kth_naive(points: &[Vec<f64>], i: usize, k: usize) -> f64 {
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, q)| distance(&points[i], q))
        .collect();
    d.sort_by(f64::total_cmp);
    d[k - 1]
}

fn kth_select(points: &[Vec<f64>], i: usize, k: usize) -> f64 {
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, q)| distance(&points[i], q))
        .collect();
    *d.select_nth_unstable_by(k - 1, f64::total_cmp).1
}

pub fn build_manifold(points: &[Vec<f64>], k: usize) -> Result<ManifoldModel, MetricsError> {
    build_manifold_with(points, k, Strategy::default())
}

pub fn build_manifold_with(
    points: &[Vec<f64>],
    k: usize,
    strategy: Strategy,
) -> Result<ManifoldModel, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if points.len() <= k {
        return Err(MetricsError::TooFewPoints {
            points: points.len(),
            k,
        });
    }
    let dim = check_points(points)?;
    let radii = match strategy {
        Strategy::Naive => (0..points.len()).map(|i| kth_naive(points, i, k)).collect(),
        Strategy::Accelerated => (0..points.len())
            .into_par_iter()
            .map(|i| kth_select(points, i, k))
            .collect(),
    };
    Ok(ManifoldModel {
        norms: points.iter().map(|p| distance(p, &vec![0.0; dim])).collect(),
        points: points.to_vec(),
        radii,
        k,
        dim,
    })
}

pub fn in_manifold(point: &[f64], model: &ManifoldModel) -> Result<bool, MetricsError> {
    in_manifold_with(point, model, Strategy::default())
}

pub fn in_manifold_with(
    point: &[f64],
    model: &ManifoldModel,
    strategy: Strategy,
) -> Result<bool, MetricsError> {
    if point.len() != model.dim {
        return Err(MetricsError::DimensionMismatch {
            expected: model.dim,
            found: point.len(),
        });
    }
    Ok(match strategy {
        Strategy::Naive => model
            .points
            .iter()
            .zip(&model.radii)
            .map(|(x, r)| distance(point, x) <= *r)
            .fold(false, |acc, hit| acc | hit),
        Strategy::Accelerated => {
            let norm = distance(point, &vec![0.0; model.dim]);
            model
                .points
                .iter()
                .zip(&model.radii)
                .zip(&model.norms)
                .any(|((x, r), n)| {
                    // reverse triangle inequality, padded well past rounding
                    let gap = (norm - n).abs();
                    if gap > r + 1e-12 * (r + norm + n) {
                        return false;
                    }
                    distance(point, x) <= *r
                })
        }
    })
}

fn fraction_inside(
    queries: &[Vec<f64>],
    model: &ManifoldModel,
    strategy: Strategy,
) -> Result<f64, MetricsError> {
    if queries.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits: Vec<bool> = match strategy {
        Strategy::Naive => queries
            .iter()
            .map(|q| in_manifold_with(q, model, strategy))
            .collect::<Result<_, _>>()?,
        Strategy::Accelerated => queries
            .par_iter()
            .map(|q| in_manifold_with(q, model, strategy))
            .collect::<Result<_, _>>()?,
    };
    Ok(hits.iter().filter(|h| **h).count() as f64 / queries.len() as f64)
}

/// Fraction of synthetic points inside the real manifold.
pub fn precision(real: &[Vec<f64>], syn: &[Vec<f64>], k: usize) -> Result<f64, MetricsError> {
    precision_with(real, syn, k, Strategy::default())
}

/// Fraction of real points inside the synthetic manifold.
pub fn recall(real: &[Vec<f64>], syn: &[Vec<f64>], k: usize) -> Result<f64, MetricsError> {
    recall_with(real, syn, k, Strategy::default())
}

pub fn precision_with(
    real: &[Vec<f64>],
    syn: &[Vec<f64>],
    k: usize,
    strategy: Strategy,
) -> Result<f64, MetricsError> {
    let model = build_manifold_with(real, k, strategy)?;
    fraction_inside(syn, &model, strategy)
}

pub fn recall_with(
    real: &[Vec<f64>],
    syn: &[Vec<f64>],
    k: usize,
    strategy: Strategy,
) -> Result<f64, MetricsError> {
    let model = build_manifold_with(syn, k, strategy)?;
    fraction_inside(real, &model, strategy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub available: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassMean {
    pub precision: f64,
    pub recall: f64,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub n_real: usize,
    pub n_syn: usize,
    pub precision: f64,
    pub recall: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<BTreeMap<String, ClassMetrics>>,
    /// Unweighted mean over available classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_mean: Option<PerClassMean>,
}

impl MetricsReport {
    /// `precision 93.75 recall 62.50`
    pub fn summary_line(&self) -> String {
        format!(
            "precision {:.2} recall {:.2}",
            self.precision * 100.0,
            self.recall * 100.0
        )
    }
}

/// Overall metrics, and per label when `per_class` is set.
///
/// A class lacking more than `k` points on either side is reported as
/// unavailable without affecting the others.
pub fn evaluate_pair(
    real: &FeatureTable,
    syn: &FeatureTable,
    k: usize,
    per_class: bool,
) -> Result<MetricsReport, MetricsError> {
    if real.is_empty() || syn.is_empty() {
        return Err(MetricsError::Empty);
    }
    if real.dim() != syn.dim() {
        return Err(MetricsError::DimensionMismatch {
            expected: real.dim(),
            found: syn.dim(),
        });
    }
    let (r, s) = (real.to_rows(), syn.to_rows());
    let mut report = MetricsReport {
        k,
        n_real: r.len(),
        n_syn: s.len(),
        precision: precision(&r, &s, k)?,
        recall: recall(&r, &s, k)?,
        per_class: None,
        per_class_mean: None,
    };
    if per_class {
        let mut labels: Vec<&String> = real.labels().iter().chain(syn.labels()).collect();
        labels.sort();
        labels.dedup();
        let mut map = BTreeMap::new();
        for label in labels {
            let rc = real.rows_with_label(label);
            let sc = syn.rows_with_label(label);
            let entry = match (precision(&rc, &sc, k), recall(&rc, &sc, k)) {
                (Ok(p), Ok(q)) => ClassMetrics {
                    precision: Some(p),
                    recall: Some(q),
                    available: true,
                    reason: None,
                },
                (Err(e), _) | (_, Err(e)) => ClassMetrics {
                    precision: None,
                    recall: None,
                    available: false,
                    reason: Some(e.to_string()),
                },
            };
            map.insert(label.clone(), entry);
        }
        let ok: Vec<&ClassMetrics> = map.values().filter(|c| c.available).collect();
        if !ok.is_empty() {
            let n = ok.len() as f64;
            report.per_class_mean = Some(PerClassMean {
                precision: ok.iter().filter_map(|c| c.precision).sum::<f64>() / n,
                recall: ok.iter().filter_map(|c| c.recall).sum::<f64>() / n,
                classes: ok.len(),
            });
        }
        report.per_class = Some(map);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|x| vec![*x]).collect()
    }

    #[test]
    fn collinear_radii() {
        for s in [Strategy::Naive, Strategy::Accelerated] {
            let m = build_manifold_with(&pts(&[0.0, 1.0, 3.0]), 1, s).unwrap();
            assert_eq!(m.radii(), &[1.0, 1.0, 2.0]);
            assert!(in_manifold_with(&[2.0], &m, s).unwrap());
            assert!(!in_manifold_with(&[5.5], &m, s).unwrap());
            assert!(in_manifold_with(&[5.0], &m, s).unwrap());
        }
    }

    #[test]
    fn preconditions() {
        assert_eq!(
            build_manifold(&pts(&[0.0, 1.0]), 2),
            Err(MetricsError::TooFewPoints { points: 2, k: 2 })
        );
        assert_eq!(
            build_manifold(&pts(&[0.0, f64::NAN]), 1),
            Err(MetricsError::NonFinite(1))
        );
        let m = build_manifold(&pts(&[0.0, 1.0]), 1).unwrap();
        assert!(matches!(
            in_manifold(&[0.0, 0.0], &m),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn duplicates_have_zero_radius() {
        let m = build_manifold(&pts(&[4.0, 4.0, 4.0, 9.0]), 2).unwrap();
        assert_eq!(&m.radii()[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn identical_and_far_sets() {
        let a: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos(), i as f64 * 0.1])
            .collect();
        assert_eq!(precision(&a, &a, 5).unwrap(), 1.0);
        assert_eq!(recall(&a, &a, 5).unwrap(), 1.0);
        let far: Vec<Vec<f64>> = a.iter().map(|p| p.iter().map(|x| x + 1e3).collect()).collect();
        assert_eq!(precision(&a, &far, 5).unwrap(), 0.0);
        assert_eq!(recall(&a, &far, 5).unwrap(), 0.0);
    }

    #[test]
    fn collapsed_synthetics_have_zero_recall() {
        let real: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0]).collect();
        let syn: Vec<Vec<f64>> = (0..10).map(|i| vec![50.0 + i as f64 * 1e-3, 50.0]).collect();
        assert_eq!(recall(&real, &syn, 5).unwrap(), 0.0);
    }

    fn table(label_rows: &[(&str, Vec<f64>)]) -> FeatureTable {
        FeatureTable::new(
            (0..label_rows.len()).map(|i| format!("i{i}")).collect(),
            label_rows.iter().map(|r| r.0.to_string()).collect(),
            label_rows.iter().map(|r| r.1.clone()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn per_class_marks_degenerate_class() {
        let mut rows = Vec::new();
        for i in 0..8 {
            rows.push(("a", vec![i as f64, (i * i) as f64 * 0.1]));
        }
        for i in 0..3 {
            rows.push(("b", vec![100.0 + i as f64, 0.0]));
        }
        let t = table(&rows);
        let r = evaluate_pair(&t, &t, 5, true).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 1.0));
        let pc = r.per_class.as_ref().unwrap();
        assert!(pc["a"].available && pc["a"].recall == Some(1.0));
        assert!(!pc["b"].available);
        assert_eq!(r.per_class_mean.as_ref().unwrap().classes, 1);
        assert_eq!(r.summary_line(), "precision 100.00 recall 100.00");
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
    }
}
