//! Image generation backends and the augmentation loop.
//!
//! [`orchestrate_augmentation`] expands every real image into up to M
//! synthetic records. Synthetic `m` of real image `n` uses the class's prompt
//! `m`, noise variance [`variance_for_class`]`(m)` and seeds derived from
//! `(master_seed, real_id, m)`, so the result does not depend on the order in
//! which requests complete.

mod http;
mod mock;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use rayon::prelude::*;
use thiserror::Error;

use crate::embeddings::{perturb, variance_for_class, EmbeddingError, EmbeddingSet};
use crate::model::{
    DatasetManifest, FeatureTable, ModelError, PipelineConfig, RealImageRecord,
    SyntheticImageRecord,
};
use crate::prompts::ClassPrompt;
use crate::seed;

pub use http::{HttpImageClient, HttpTextClient};
pub use mock::{default_direction, mock_generate, projection_matrix, MockBackend, MockParams};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend reported failure: {0}")]
    Generation(String),
    #[error("unsupported guiding image for this backend: {0}")]
    UnsupportedGuide(&'static str),
    #[error("bad endpoint `{0}`")]
    BadEndpoint(String),
}

impl BackendError {
    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// The real image that anchors a generation.
#[derive(Debug, Clone, PartialEq)]
pub enum GuidingImage {
    Bytes(Vec<u8>),
    Locator(String),
    /// Feature vector; only meaningful to the mock backend.
    Feature(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    /// Identifies the prompt; not sent over the wire.
    pub prompt_id: String,
    /// Prompt with the class token already in place.
    pub prompt_text: String,
    pub embedding_token: String,
    /// The noisy class embedding.
    pub embedding_vector: Vec<f64>,
    pub guiding_image: GuidingImage,
    /// Img2img strength t0 in [0, 1].
    pub strength: f64,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(BackendError::InvalidRequest(format!(
                "strength {} outside [0, 1]",
                self.strength
            )));
        }
        if !(self.guidance_scale > 0.0 && self.guidance_scale.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "guidance scale {} must be positive",
                self.guidance_scale
            )));
        }
        let occurrences = self
            .prompt_text
            .split_whitespace()
            .filter(|w| *w == self.embedding_token)
            .count();
        if occurrences != 1 {
            return Err(BackendError::InvalidRequest(format!(
                "prompt must contain `{}` exactly once, found {occurrences}",
                self.embedding_token
            )));
        }
        if self.embedding_vector.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::InvalidRequest(
                "embedding has non-finite entries".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    /// Encoded image from a pixel backend.
    pub image: Option<Vec<u8>>,
    /// Feature vector from the mock backend.
    pub feature: Option<Vec<f64>>,
    pub seed_used: u64,
}

/// A text-to-image service.
pub trait ImageBackend: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError>;
}

/// Checks the request, then forwards it to `backend`.
pub fn generate_image(
    backend: &dyn ImageBackend,
    req: &GenerationRequest,
) -> Result<GenerationResult, BackendError> {
    req.validate()?;
    backend.generate(req)
}

/// Resolves the guiding input for a real image.
pub trait GuideSource: Sync {
    fn guide(&self, real: &RealImageRecord) -> Result<GuidingImage, BackendError>;
}

/// Guides by feature vector, looked up by image id and then by `feature_row`.
pub struct FeatureGuides<'a>(pub &'a FeatureTable);

impl GuideSource for FeatureGuides<'_> {
    fn guide(&self, real: &RealImageRecord) -> Result<GuidingImage, BackendError> {
        let table = self.0;
        let row = table
            .get(&real.id)
            .or_else(|| real.feature_row.filter(|&r| r < table.len()).map(|r| table.row(r)))
            .ok_or_else(|| {
                BackendError::InvalidRequest(format!("no feature row for real image `{}`", real.id))
            })?;
        Ok(GuidingImage::Feature(row.to_vec()))
    }
}

/// Guides by image locator, resolved relative to `base_dir`.
pub struct FileGuides {
    pub base_dir: PathBuf,
}

impl GuideSource for FileGuides {
    fn guide(&self, real: &RealImageRecord) -> Result<GuidingImage, BackendError> {
        let path = self.base_dir.join(&real.image_ref);
        Ok(GuidingImage::Locator(path.display().to_string()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackendOptions {
    pub timeout: Duration,
    pub retries: u32,
    /// Maximum requests in flight.
    pub parallelism: usize,
}

impl Default for BackendOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(120),
            retries: 3,
            parallelism: 4,
        }
    }
}

/// Builds the backend named by `endpoint`: `mock:...` selects the mock,
/// anything else is treated as an HTTP base URL.
pub fn image_backend_from_endpoint(
    endpoint: &str,
    embeddings: &EmbeddingSet,
    options: BackendOptions,
) -> Result<Box<dyn ImageBackend>, BackendError> {
    if let Some(rest) = endpoint.strip_prefix("mock:") {
        let params = MockParams::parse(rest)?;
        Ok(Box::new(MockBackend::new(embeddings, params)))
    } else if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
        Ok(Box::new(HttpImageClient::new(
            endpoint,
            options.timeout,
            options.retries,
        )))
    } else {
        Err(BackendError::BadEndpoint(endpoint.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum OrchestrationError {
    #[error("class `{0}` has no embedding")]
    MissingEmbedding(String),
    #[error("class `{class}` has {have} prompts, {need} needed")]
    MissingPrompts {
        class: String,
        have: usize,
        need: usize,
    },
    #[error("input manifest is invalid: {0}")]
    InvalidManifest(String),
    #[error("synthetic id `{0}` already present in the input manifest")]
    DuplicateSynthetic(String),
    #[error(transparent)]
    Config(#[from] ModelError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("prompt `{0}` not found")]
    UnknownPrompt(String),
    #[error("real image `{0}` not found")]
    UnknownReal(String),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// A generation that was skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationFailure {
    pub real_id: String,
    pub index: usize,
    pub prompt_id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct AugmentationOutcome {
    pub manifest: DatasetManifest,
    /// Features of the new synthetics, for backends that return features.
    pub synthetic_features: Option<FeatureTable>,
    /// Encoded images of the new synthetics, keyed by synthetic id.
    pub images: Vec<(String, Vec<u8>)>,
    pub failures: Vec<GenerationFailure>,
    /// Classes that had real images but no successful generation.
    pub empty_classes: Vec<String>,
}

pub fn synthetic_id(real_id: &str, index: usize) -> String {
    format!("{real_id}-syn{index:02}")
}

fn build_request(
    real: &RealImageRecord,
    index: usize,
    prompt: &ClassPrompt,
    embeddings: &EmbeddingSet,
    guide: GuidingImage,
    config: &PipelineConfig,
) -> Result<(GenerationRequest, SyntheticImageRecord), OrchestrationError> {
    let embedding = embeddings
        .get(&real.class_label)
        .ok_or_else(|| OrchestrationError::MissingEmbedding(real.class_label.clone()))?;
    let variance = variance_for_class(&real.class_label, index, config)?;
    let noise_seed = seed::noise_seed(config.master_seed, &real.id, index);
    let generation_seed = seed::generation_seed(config.master_seed, &real.id, index);
    let noisy = perturb(embedding, variance, noise_seed)?;
    let req = GenerationRequest {
        prompt_id: prompt.id.clone(),
        prompt_text: prompt.text.clone(),
        embedding_token: embedding.token.clone(),
        embedding_vector: noisy.vector,
        guiding_image: guide,
        strength: config.strength,
        guidance_scale: config.guidance_scale,
        seed: generation_seed,
    };
    let record = SyntheticImageRecord {
        id: synthetic_id(&real.id, index),
        parent_real_id: real.id.clone(),
        class_label: real.class_label.clone(),
        prompt_id: prompt.id.clone(),
        noise_variance: variance,
        noise_seed,
        generation_seed,
        confidence: None,
        image_ref: None,
    };
    Ok((req, record))
}

/// Expands each real image of `manifest` into up to
/// `config.synthetics_per_real` synthetic records.
///
/// Failed generations are skipped and reported in
/// [`AugmentationOutcome::failures`]; input records are kept unchanged.
pub fn orchestrate_augmentation(
    manifest: &DatasetManifest,
    embeddings: &EmbeddingSet,
    prompts: &[ClassPrompt],
    backend: &dyn ImageBackend,
    guides: &dyn GuideSource,
    config: &PipelineConfig,
    parallelism: usize,
) -> Result<AugmentationOutcome, OrchestrationError> {
    config.validate()?;
    if let Some(v) = manifest.validate().first() {
        return Err(OrchestrationError::InvalidManifest(v.to_string()));
    }
    let m_per_real = config.synthetics_per_real;
    let by_class = crate::prompts::group_by_class(prompts);
    for real in &manifest.reals {
        if embeddings.get(&real.class_label).is_none() {
            return Err(OrchestrationError::MissingEmbedding(real.class_label.clone()));
        }
        let have = by_class.get(&real.class_label).map_or(0, Vec::len);
        if have < m_per_real {
            return Err(OrchestrationError::MissingPrompts {
                class: real.class_label.clone(),
                have,
                need: m_per_real,
            });
        }
        for m in 0..m_per_real {
            let id = synthetic_id(&real.id, m);
            if manifest.synthetics.iter().any(|s| s.id == id) {
                return Err(OrchestrationError::DuplicateSynthetic(id));
            }
        }
    }

    let jobs: Vec<(usize, usize)> = (0..manifest.reals.len())
        .flat_map(|n| (0..m_per_real).map(move |m| (n, m)))
        .collect();

    let run = |&(n, m): &(usize, usize)| {
        let real = &manifest.reals[n];
        let prompt = &by_class[&real.class_label][m];
        let fail = |e: String| GenerationFailure {
            real_id: real.id.clone(),
            index: m,
            prompt_id: prompt.id.clone(),
            error: e,
        };
        let guide = guides.guide(real).map_err(|e| fail(e.to_string()))?;
        let (req, record) = build_request(real, m, prompt, embeddings, guide, config)
            .map_err(|e| fail(e.to_string()))?;
        generate_image(backend, &req)
            .map(|res| (record, res))
            .map_err(|e| fail(e.to_string()))
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| OrchestrationError::Pool(e.to_string()))?;
    let results: Vec<_> = pool.install(|| jobs.par_iter().map(run).collect());

    let mut out = manifest.clone();
    out.config_fingerprint = config.fingerprint();
    let mut failures = Vec::new();
    let mut images = Vec::new();
    let mut feat_ids = Vec::new();
    let mut feat_labels = Vec::new();
    let mut feat_rows = Vec::new();
    let mut succeeded: BTreeMap<String, usize> = BTreeMap::new();

    for result in results {
        match result {
            Ok((record, res)) => {
                *succeeded.entry(record.class_label.clone()).or_default() += 1;
                if let Some(f) = res.feature {
                    feat_ids.push(record.id.clone());
                    feat_labels.push(record.class_label.clone());
                    feat_rows.push(f);
                }
                if let Some(img) = res.image {
                    images.push((record.id.clone(), img));
                }
                out.synthetics.push(record);
            }
            Err(f) => {
                log::warn!(
                    "generation failed for {} #{} ({}): {}",
                    f.real_id,
                    f.index,
                    f.prompt_id,
                    f.error
                );
                failures.push(f);
            }
        }
    }

    let mut empty_classes: Vec<String> = manifest
        .reals
        .iter()
        .map(|r| r.class_label.clone())
        .filter(|c| !succeeded.contains_key(c))
        .collect();
    empty_classes.sort();
    empty_classes.dedup();
    if !empty_classes.is_empty() {
        log::warn!(
            "no successful generations for classes: {}",
            empty_classes.join(", ")
        );
    }

    let synthetic_features = if feat_rows.is_empty() {
        None
    } else {
        Some(FeatureTable::new(feat_ids, feat_labels, feat_rows)?)
    };
    Ok(AugmentationOutcome {
        manifest: out,
        synthetic_features,
        images,
        failures,
        empty_classes,
    })
}

/// Re-issues the generation recorded in `record` using only its provenance.
pub fn regenerate(
    record: &SyntheticImageRecord,
    manifest: &DatasetManifest,
    embeddings: &EmbeddingSet,
    prompts: &[ClassPrompt],
    backend: &dyn ImageBackend,
    guides: &dyn GuideSource,
    config: &PipelineConfig,
) -> Result<Result<GenerationResult, BackendError>, OrchestrationError> {
    let real = manifest
        .real(&record.parent_real_id)
        .ok_or_else(|| OrchestrationError::UnknownReal(record.parent_real_id.clone()))?;
    let prompt = prompts
        .iter()
        .find(|p| p.id == record.prompt_id)
        .ok_or_else(|| OrchestrationError::UnknownPrompt(record.prompt_id.clone()))?;
    let embedding = embeddings
        .get(&real.class_label)
        .ok_or_else(|| OrchestrationError::MissingEmbedding(real.class_label.clone()))?;
    let noisy = perturb(embedding, record.noise_variance, record.noise_seed)?;
    let guide = match guides.guide(real) {
        Ok(g) => g,
        Err(e) => return Ok(Err(e)),
    };
    let req = GenerationRequest {
        prompt_id: prompt.id.clone(),
        prompt_text: prompt.text.clone(),
        embedding_token: embedding.token.clone(),
        embedding_vector: noisy.vector,
        guiding_image: guide,
        strength: config.strength,
        guidance_scale: config.guidance_scale,
        seed: record.generation_seed,
    };
    Ok(generate_image(backend, &req))
}
