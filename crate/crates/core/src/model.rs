//! Dataset manifest, feature tables and pipeline configuration.
//!
//! A [`DatasetManifest`] is persisted as one JSON document with top-level keys
//! `classes`, `reals`, `synthetics` and `config_fingerprint`. Feature tables
//! are CSV files with header `id,label,f0,...,f{D-1}`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest violates {} invariant(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),
    #[error("feature table header must start with `id,label` followed by f0..f{{D-1}}")]
    BadHeader,
    #[error("ragged row {row} (`{id}`): expected {expected} features, found {found}")]
    RaggedRow {
        row: usize,
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("row {row}, column {column}: `{value}` is not a finite number")]
    NonNumeric {
        row: usize,
        column: usize,
        value: String,
    },
    #[error("feature table needs at least one feature column")]
    NoFeatures,
    #[error("invalid pipeline config: {0}")]
    Config(String),
}

impl ModelError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealImageRecord {
    pub id: String,
    pub class_label: String,
    /// File path or URI; never decoded by this crate.
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_row: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImageRecord {
    pub id: String,
    pub parent_real_id: String,
    pub class_label: String,
    pub prompt_id: String,
    pub noise_variance: f64,
    pub noise_seed: u64,
    pub generation_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    /// Where the backend's image was stored, when the backend produced pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub reals: Vec<RealImageRecord>,
    pub synthetics: Vec<SyntheticImageRecord>,
    pub config_fingerprint: String,
}

/// Which manifest rule a record breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Rule {
    DuplicateClass,
    DuplicateId,
    UnknownClass,
    MissingParent,
    LabelMismatch,
    ConfidenceRange,
    NegativeVariance,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::DuplicateClass => "duplicate class label",
            Rule::DuplicateId => "duplicate record id",
            Rule::UnknownClass => "class label not in manifest classes",
            Rule::MissingParent => "parent_real_id does not resolve",
            Rule::LabelMismatch => "class_label differs from parent's class_label",
            Rule::ConfidenceRange => "confidence outside [0, 1]",
            Rule::NegativeVariance => "noise_variance negative or non-finite",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub record_id: String,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`: {}", self.record_id, self.rule)
    }
}

impl DatasetManifest {
    pub fn new(classes: Vec<String>, config_fingerprint: impl Into<String>) -> Self {
        Self {
            classes,
            reals: Vec::new(),
            synthetics: Vec::new(),
            config_fingerprint: config_fingerprint.into(),
        }
    }

    /// Lists every invariant violation; empty iff the manifest is consistent.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |id: &str, rule| {
            out.push(Violation {
                record_id: id.to_string(),
                rule,
            })
        };

        let mut classes = HashSet::new();
        for c in &self.classes {
            if !classes.insert(c.as_str()) {
                push(c, Rule::DuplicateClass);
            }
        }

        let mut ids = HashSet::new();
        let mut parents: HashMap<&str, &str> = HashMap::new();
        for r in &self.reals {
            if !ids.insert(r.id.as_str()) {
                push(&r.id, Rule::DuplicateId);
            }
            if !classes.contains(r.class_label.as_str()) {
                push(&r.id, Rule::UnknownClass);
            }
            parents.entry(&r.id).or_insert(&r.class_label);
        }
        for s in &self.synthetics {
            if !ids.insert(s.id.as_str()) {
                push(&s.id, Rule::DuplicateId);
            }
            match parents.get(s.parent_real_id.as_str()) {
                None => push(&s.id, Rule::MissingParent),
                Some(label) if *label != s.class_label => push(&s.id, Rule::LabelMismatch),
                Some(_) => {}
            }
            if !classes.contains(s.class_label.as_str()) {
                push(&s.id, Rule::UnknownClass);
            }
            if let Some(q) = s.confidence {
                if !(0.0..=1.0).contains(&q) {
                    push(&s.id, Rule::ConfidenceRange);
                }
            }
            if !(s.noise_variance >= 0.0 && s.noise_variance.is_finite()) {
                push(&s.id, Rule::NegativeVariance);
            }
        }
        out
    }

    /// Number of synthetics per real image, in `reals` order.
    pub fn synthetic_counts(&self) -> Vec<usize> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in &self.synthetics {
            *counts.entry(s.parent_real_id.as_str()).or_default() += 1;
        }
        self.reals
            .iter()
            .map(|r| counts.get(r.id.as_str()).copied().unwrap_or(0))
            .collect()
    }

    pub fn real(&self, id: &str) -> Option<&RealImageRecord> {
        self.reals.iter().find(|r| r.id == id)
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(text)?)
    }

    /// SHA-256 over the canonical JSON serialization.
    pub fn fingerprint(&self) -> String {
        seed::sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

/// Writes the manifest after checking its invariants.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), ModelError> {
    let violations = manifest.validate();
    if !violations.is_empty() {
        return Err(ModelError::Invalid(violations));
    }
    let mut text = manifest.to_json()?;
    text.push('\n');
    seed::atomic_write(path, text.as_bytes()).map_err(|e| ModelError::io(path, e))
}

/// Reads a manifest. Invariants are not enforced here; see
/// [`DatasetManifest::validate`].
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::io(path, e))?;
    DatasetManifest::from_json(&text)
}

/// Per-image feature vectors, one row per image id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    ids: Vec<String>,
    labels: Vec<String>,
    dim: usize,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(
        ids: Vec<String>,
        labels: Vec<String>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        assert_eq!(ids.len(), labels.len(), "ids and labels must align");
        assert_eq!(ids.len(), rows.len(), "ids and rows must align");
        let dim = rows.first().map(Vec::len).unwrap_or(1);
        if dim == 0 {
            return Err(ModelError::NoFeatures);
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut index = HashMap::with_capacity(ids.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(ModelError::RaggedRow {
                    row: i,
                    id: ids[i].clone(),
                    expected: dim,
                    found: row.len(),
                });
            }
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(ModelError::NonNumeric {
                    row: i,
                    column: c + 2,
                    value: row[c].to_string(),
                });
            }
            if index.insert(ids[i].clone(), i).is_some() {
                return Err(ModelError::DuplicateId(ids[i].clone()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            ids,
            labels,
            dim,
            data,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.row(i))
    }

    /// Owned copies of every row.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    /// Rows whose label equals `label`, in table order.
    pub fn rows_with_label(&self, label: &str) -> Vec<Vec<f64>> {
        self.labels
            .iter()
            .zip(self.rows())
            .filter(|(l, _)| *l == label)
            .map(|(_, r)| r.to_vec())
            .collect()
    }

    /// Table restricted to the given row indices, in the order given.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self::new(
            rows.iter().map(|&i| self.ids[i].clone()).collect(),
            rows.iter().map(|&i| self.labels[i].clone()).collect(),
            rows.iter().map(|&i| self.row(i).to_vec()).collect(),
        )
        .expect("subset of a valid table is valid")
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self, ModelError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
            return Err(ModelError::BadHeader);
        }
        for (j, name) in header.iter().skip(2).enumerate() {
            if name != format!("f{j}") {
                return Err(ModelError::BadHeader);
            }
        }
        let dim = header.len() - 2;

        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let id = record.get(0).unwrap_or_default().to_string();
            if record.len() != dim + 2 {
                return Err(ModelError::RaggedRow {
                    row: i,
                    id,
                    expected: dim,
                    found: record.len().saturating_sub(2),
                });
            }
            let mut row = Vec::with_capacity(dim);
            for (c, cell) in record.iter().enumerate().skip(2) {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => row.push(v),
                    _ => {
                        return Err(ModelError::NonNumeric {
                            row: i,
                            column: c,
                            value: cell.to_string(),
                        })
                    }
                }
            }
            ids.push(id);
            labels.push(record[1].to_string());
            rows.push(row);
        }
        if rows.is_empty() {
            return Ok(Self {
                ids,
                labels,
                dim,
                data: Vec::new(),
                index: HashMap::new(),
            });
        }
        Self::new(ids, labels, rows)
    }

    pub fn to_csv_string(&self) -> Result<String, ModelError> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..self.dim).map(|j| format!("f{j}")));
        wtr.write_record(&header)?;
        for (i, row) in self.rows().enumerate() {
            let mut rec = vec![self.ids[i].clone(), self.labels[i].clone()];
            rec.extend(row.iter().map(f64::to_string));
            wtr.write_record(&rec)?;
        }
        let bytes = wtr
            .into_inner()
            .map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn load_feature_table(path: &Path) -> Result<FeatureTable, ModelError> {
    let file = std::fs::File::open(path).map_err(|e| ModelError::io(path, e))?;
    FeatureTable::from_csv_reader(std::io::BufReader::new(file))
}

pub fn save_feature_table(table: &FeatureTable, path: &Path) -> Result<(), ModelError> {
    let text = table.to_csv_string()?;
    seed::atomic_write(path, text.as_bytes()).map_err(|e| ModelError::io(path, e))
}

/// Hyperparameters shared by every pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub examples_per_class: usize,
    /// Synthetic images generated per real image (M).
    pub synthetics_per_real: usize,
    pub prompts_per_class: usize,
    /// Noise variances cycled by synthetic index.
    pub noise_variances: Vec<f64>,
    /// Optional per-class replacements for `noise_variances`.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub class_noise_variances: BTreeMap<String, Vec<f64>>,
    /// Img2img strength t0.
    pub strength: f64,
    pub guidance_scale: f64,
    /// Probability mass given to synthetic images when sampling (alpha).
    pub synthetic_probability: f64,
    pub knn_k: usize,
    pub master_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            examples_per_class: 8,
            synthetics_per_real: 10,
            prompts_per_class: 10,
            noise_variances: vec![0.005, 0.01, 0.025],
            class_noise_variances: BTreeMap::new(),
            strength: 0.7,
            guidance_scale: 15.0,
            synthetic_probability: 0.7,
            knn_k: 5,
            master_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.examples_per_class == 0 {
            return err("examples_per_class must be positive");
        }
        if self.synthetics_per_real == 0 {
            return err("synthetics_per_real must be positive");
        }
        if self.prompts_per_class == 0 {
            return err("prompts_per_class must be positive");
        }
        if self.knn_k == 0 {
            return err("knn_k must be positive");
        }
        let bad_variance = |v: &f64| !(*v >= 0.0 && v.is_finite());
        if self.noise_variances.iter().any(bad_variance)
            || self
                .class_noise_variances
                .values()
                .flatten()
                .any(bad_variance)
        {
            return err("noise variances must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return err("strength must lie in [0, 1]");
        }
        if !(self.guidance_scale > 0.0 && self.guidance_scale.is_finite()) {
            return err("guidance_scale must be positive");
        }
        if !(0.0..=1.0).contains(&self.synthetic_probability) {
            return err("synthetic_probability must lie in [0, 1]");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn fingerprint(&self) -> String {
        seed::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}
