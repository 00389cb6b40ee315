//! Feature-space stand-in for an img2img diffusion service.
//!
//! The mock maps a request to
//!
//! ```text
//! guide + t0 * lambda * dir(prompt_id) + t0 * noise_scale * g(seed) + t0 * embedding_scale * P(delta)
//! ```
//!
//! where `dir` is a unit vector per prompt, `g(seed)` is a standard normal
//! vector drawn from the generation seed, `delta` is the request's embedding
//! minus the class's learned embedding and `P` is a fixed random projection
//! from embedding space to feature space. Every displacement scales with the
//! strength t0, so `t0 = 0` returns the guiding feature unchanged.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::{BackendError, GenerationRequest, GenerationResult, GuidingImage, ImageBackend};
use crate::embeddings::{gaussian_noise, EmbeddingSet};
use crate::seed::{self, SeedPart};

#[derive(Debug, Clone, PartialEq)]
pub struct MockParams {
    /// Length of the per-prompt displacement (lambda).
    pub displacement_scale: f64,
    /// Standard deviation of the seeded per-image noise.
    pub noise_scale: f64,
    /// Gain on the projected embedding perturbation.
    pub embedding_scale: f64,
    /// Prompt ids whose generations fail.
    pub fail_prompts: HashSet<String>,
}

impl Default for MockParams {
    fn default() -> Self {
        Self {
            displacement_scale: 2.0,
            noise_scale: 0.5,
            embedding_scale: 1.0,
            fail_prompts: HashSet::new(),
        }
    }
}

impl MockParams {
    /// Parses the part of a `mock:` endpoint after the scheme, e.g.
    /// `lambda=2&noise=0.5&embedding=1&fail=car-03,dog-01`.
    pub fn parse(query: &str) -> Result<Self, BackendError> {
        let mut params = Self::default();
        let query = query.trim_start_matches("//").trim_start_matches('?');
        for pair in query.split('&').filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| BackendError::BadEndpoint(format!("mock:{query}")))?;
            let number = || {
                value
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && *v >= 0.0)
                    .ok_or_else(|| BackendError::BadEndpoint(format!("mock:{query}")))
            };
            match key {
                "lambda" => params.displacement_scale = number()?,
                "noise" => params.noise_scale = number()?,
                "embedding" => params.embedding_scale = number()?,
                "fail" => params
                    .fail_prompts
                    .extend(value.split(',').filter(|s| !s.is_empty()).map(String::from)),
                _ => return Err(BackendError::BadEndpoint(format!("mock:{query}"))),
            }
        }
        Ok(params)
    }
}

/// Unit vector for `prompt_id` in `dim` dimensions, derived from its hash.
pub fn default_direction(prompt_id: &str, dim: usize) -> Vec<f64> {
    let seed = seed::stable_hash(&[SeedPart::Str("direction"), SeedPart::Str(prompt_id)]);
    let mut v = gaussian_noise(dim, 1.0, seed);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Row-major `feature_dim x embedding_dim` matrix with i.i.d.
/// `N(0, 1 / embedding_dim)` entries from a fixed seed.
pub fn projection_matrix(feature_dim: usize, embedding_dim: usize) -> Vec<f64> {
    let seed = seed::stable_hash(&[
        SeedPart::Str("projection"),
        SeedPart::Int(feature_dim as u64),
        SeedPart::Int(embedding_dim as u64),
    ]);
    gaussian_noise(
        feature_dim * embedding_dim,
        1.0 / embedding_dim.max(1) as f64,
        seed,
    )
}

/// The mock's response feature for `req`.
///
/// `perturbation` is the noisy embedding minus the learned one. Directions
/// missing from `directions` fall back to [`default_direction`].
pub fn mock_generate(
    req: &GenerationRequest,
    guiding_feature: &[f64],
    directions: &BTreeMap<String, Vec<f64>>,
    perturbation: &[f64],
    params: &MockParams,
) -> Result<Vec<f64>, BackendError> {
    let dim = guiding_feature.len();
    let derived;
    let dir = match directions.get(&req.prompt_id) {
        Some(d) => d,
        None => {
            derived = default_direction(&req.prompt_id, dim);
            &derived
        }
    };
    if dir.len() != dim {
        return Err(BackendError::DimensionMismatch {
            expected: dim,
            found: dir.len(),
        });
    }
    let t0 = req.strength;
    let noise = gaussian_noise(dim, 1.0, req.seed);
    let e_dim = perturbation.len();
    let projected: Vec<f64> = if e_dim == 0 || params.embedding_scale == 0.0 {
        vec![0.0; dim]
    } else {
        let proj = projection_matrix(dim, e_dim);
        proj.chunks_exact(e_dim)
            .map(|row| row.iter().zip(perturbation).map(|(a, b)| a * b).sum())
            .collect()
    };
    Ok((0..dim)
        .map(|i| {
            guiding_feature[i]
                + t0 * params.displacement_scale * dir[i]
                + t0 * params.noise_scale * noise[i]
                + t0 * params.embedding_scale * projected[i]
        })
        .collect())
}

/// Deterministic backend operating on feature vectors.
#[derive(Debug, Clone)]
pub struct MockBackend {
    params: MockParams,
    base_embeddings: HashMap<String, Vec<f64>>,
    directions: BTreeMap<String, Vec<f64>>,
}

impl MockBackend {
    pub fn new(embeddings: &EmbeddingSet, params: MockParams) -> Self {
        Self {
            params,
            base_embeddings: embeddings
                .iter()
                .map(|e| (e.token.clone(), e.vector.clone()))
                .collect(),
            directions: BTreeMap::new(),
        }
    }

    /// Pins the displacement direction of a prompt. Vectors are normalized.
    pub fn with_direction(mut self, prompt_id: impl Into<String>, direction: Vec<f64>) -> Self {
        let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        let unit = if norm > 0.0 {
            direction.iter().map(|x| x / norm).collect()
        } else {
            direction
        };
        self.directions.insert(prompt_id.into(), unit);
        self
    }

    pub fn params(&self) -> &MockParams {
        &self.params
    }
}

impl ImageBackend for MockBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        if self.params.fail_prompts.contains(&req.prompt_id) {
            return Err(BackendError::Generation(format!(
                "injected failure for prompt `{}`",
                req.prompt_id
            )));
        }
        let GuidingImage::Feature(guide) = &req.guiding_image else {
            return Err(BackendError::UnsupportedGuide(
                "mock backend needs a feature vector",
            ));
        };
        let base = self.base_embeddings.get(&req.embedding_token).ok_or_else(|| {
            BackendError::InvalidRequest(format!("unknown token `{}`", req.embedding_token))
        })?;
        if base.len() != req.embedding_vector.len() {
            return Err(BackendError::DimensionMismatch {
                expected: base.len(),
                found: req.embedding_vector.len(),
            });
        }
        let delta: Vec<f64> = req
            .embedding_vector
            .iter()
            .zip(base)
            .map(|(v, b)| v - b)
            .collect();
        let feature = mock_generate(req, guide, &self.directions, &delta, &self.params)?;
        Ok(GenerationResult {
            image: None,
            feature: Some(feature),
            seed_used: req.seed,
        })
    }
}
