//! Learned class concept vectors and their noisy variants.
//!
//! A noisy vector is the learned vector plus coordinate-wise i.i.d. Gaussian
//! noise `N(0, variance)`. The noise comes from a ChaCha20 stream seeded with
//! the caller's seed and is drawn in coordinate order `0..D`, one standard
//! normal sample per coordinate (ziggurat method of `rand_distr`), scaled by
//! the standard deviation. No clamping or renormalization is applied.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::model::PipelineConfig;
use crate::seed;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("variance must be finite and nonnegative, got {0}")]
    NegativeVariance(f64),
    #[error("embedding for `{0}` has non-finite entries")]
    NonFinite(String),
    #[error("embedding for `{0}` is empty")]
    Empty(String),
    #[error("noise variance list is empty")]
    NoVariances,
    #[error("class `{class}` has dimension {found}, expected {expected}")]
    DimensionMismatch {
        class: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate class `{0}`")]
    DuplicateClass(String),
    #[error("token `{0}` is used by more than one class")]
    DuplicateToken(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed embedding file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbedding {
    pub class_label: String,
    /// Placeholder written into prompts, e.g. `<cls_car>`.
    pub token: String,
    pub vector: Vec<f64>,
}

impl ClassEmbedding {
    pub fn new(class_label: impl Into<String>, token: impl Into<String>, vector: Vec<f64>) -> Self {
        Self {
            class_label: class_label.into(),
            token: token.into(),
            vector,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyEmbedding<'a> {
    pub base: &'a ClassEmbedding,
    pub vector: Vec<f64>,
    pub variance: f64,
    pub seed: u64,
}

/// Draws `dim` i.i.d. `N(0, variance)` samples from the stream for `seed`.
pub fn gaussian_noise(dim: usize, variance: f64, seed: u64) -> Vec<f64> {
    let std_dev = variance.sqrt();
    let mut rng = seed::rng(seed);
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std_dev
        })
        .collect()
}

/// Adds seeded Gaussian noise of the given variance to `embedding`.
pub fn perturb(
    embedding: &ClassEmbedding,
    variance: f64,
    seed: u64,
) -> Result<NoisyEmbedding<'_>, EmbeddingError> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(EmbeddingError::NegativeVariance(variance));
    }
    if embedding.vector.iter().any(|v| !v.is_finite()) {
        return Err(EmbeddingError::NonFinite(embedding.class_label.clone()));
    }
    let vector = if variance == 0.0 {
        embedding.vector.clone()
    } else {
        gaussian_noise(embedding.dim(), variance, seed)
            .into_iter()
            .zip(&embedding.vector)
            .map(|(g, v)| v + g)
            .collect()
    };
    Ok(NoisyEmbedding {
        base: embedding,
        vector,
        variance,
        seed,
    })
}

/// Variance for synthetic `index`: the configured list, cycled.
pub fn variance_for(index: usize, config: &PipelineConfig) -> Result<f64, EmbeddingError> {
    cycle(&config.noise_variances, index)
}

/// Like [`variance_for`], honoring a per-class override when one is configured.
pub fn variance_for_class(
    class_label: &str,
    index: usize,
    config: &PipelineConfig,
) -> Result<f64, EmbeddingError> {
    match config.class_noise_variances.get(class_label) {
        Some(list) => cycle(list, index),
        None => variance_for(index, config),
    }
}

fn cycle(list: &[f64], index: usize) -> Result<f64, EmbeddingError> {
    if list.is_empty() {
        return Err(EmbeddingError::NoVariances);
    }
    Ok(list[index % list.len()])
}

/// All class embeddings of a run, keyed by class label. Every vector has the
/// same dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingSet {
    by_class: BTreeMap<String, ClassEmbedding>,
    dim: usize,
}

impl EmbeddingSet {
    pub fn new(embeddings: Vec<ClassEmbedding>) -> Result<Self, EmbeddingError> {
        let mut by_class = BTreeMap::new();
        let mut tokens = std::collections::HashSet::new();
        let dim = embeddings.first().map(ClassEmbedding::dim).unwrap_or(0);
        for e in embeddings {
            if e.vector.is_empty() {
                return Err(EmbeddingError::Empty(e.class_label));
            }
            if e.dim() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    class: e.class_label,
                    expected: dim,
                    found: e.vector.len(),
                });
            }
            if e.vector.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite(e.class_label));
            }
            if !tokens.insert(e.token.clone()) {
                return Err(EmbeddingError::DuplicateToken(e.token));
            }
            if by_class.contains_key(&e.class_label) {
                return Err(EmbeddingError::DuplicateClass(e.class_label));
            }
            by_class.insert(e.class_label.clone(), e);
        }
        Ok(Self { by_class, dim })
    }

    pub fn get(&self, class_label: &str) -> Option<&ClassEmbedding> {
        self.by_class.get(class_label)
    }

    /// Embedding whose token is `token`.
    pub fn by_token(&self, token: &str) -> Option<&ClassEmbedding> {
        self.by_class.values().find(|e| e.token == token)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassEmbedding> {
        self.by_class.values()
    }

    pub fn len(&self) -> usize {
        self.by_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// JSON object `{class_label: {token, vector}}`.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, FileEntry> = self
            .by_class
            .values()
            .map(|e| {
                (
                    e.class_label.as_str(),
                    FileEntry {
                        token: e.token.clone(),
                        vector: e.vector.clone(),
                    },
                )
            })
            .collect();
        serde_json::to_string_pretty(&map).expect("embeddings serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, EmbeddingError> {
        let OrderedEntries(entries) = serde_json::from_str(text)?;
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(entries.len());
        for (class_label, entry) in entries {
            if !seen.insert(class_label.clone()) {
                return Err(EmbeddingError::DuplicateClass(class_label));
            }
            out.push(ClassEmbedding {
                class_label,
                token: entry.token,
                vector: entry.vector,
            });
        }
        Self::new(out)
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet, EmbeddingError> {
    let text = std::fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    EmbeddingSet::from_json(&text)
}

#[derive(Debug, Serialize, Deserialize)]
struct FileEntry {
    token: String,
    vector: Vec<f64>,
}

/// JSON object entries in file order, duplicates kept.
struct OrderedEntries(Vec<(String, FileEntry)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object mapping class labels to {token, vector}")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, FileEntry>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}
