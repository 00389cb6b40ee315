//! JSON-over-HTTP clients for external generation services.
//!
//! Text-to-image: `POST {endpoint}/v1/img2img` with
//! `{prompt, embedding_token, embedding, guiding_image_b64, strength, guidance_scale, seed}`,
//! answered by `{image_b64, seed_used}` or `{error}`.
//!
//! Text-to-text: `POST {endpoint}/v1/complete` with `{instruction, seed}`,
//! answered by `{text}`.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::{BackendError, GenerationRequest, GenerationResult, GuidingImage, ImageBackend};
use crate::prompts::TextClient;

fn agent(timeout: Duration) -> Agent {
    Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn join(endpoint: &str, path: &str) -> String {
    format!("{}/{}", endpoint.trim_end_matches('/'), path)
}

/// Status code and body, or a transport error message.
fn post_json<T: Serialize>(agent: &Agent, url: &str, body: &T) -> Result<(u16, String), String> {
    let mut resp = agent.post(url).send_json(body).map_err(|e| e.to_string())?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
    Ok((status, text))
}

#[derive(Serialize)]
struct Img2ImgBody<'a> {
    prompt: &'a str,
    embedding_token: &'a str,
    embedding: &'a [f64],
    guiding_image_b64: String,
    strength: f64,
    guidance_scale: f64,
    seed: u64,
}

#[derive(Deserialize)]
struct Img2ImgReply {
    image_b64: Option<String>,
    seed_used: Option<u64>,
    error: Option<String>,
}

/// Client for a remote img2img service.
pub struct HttpImageClient {
    endpoint: String,
    agent: Agent,
    retries: u32,
}

impl HttpImageClient {
    pub fn new(endpoint: &str, timeout: Duration, retries: u32) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            agent: agent(timeout),
            retries,
        }
    }

    fn guide_b64(guide: &GuidingImage) -> Result<String, BackendError> {
        match guide {
            GuidingImage::Bytes(b) => Ok(B64.encode(b)),
            GuidingImage::Locator(path) => std::fs::read(path)
                .map(|b| B64.encode(b))
                .map_err(|e| BackendError::InvalidRequest(format!("cannot read `{path}`: {e}"))),
            GuidingImage::Feature(_) => Err(BackendError::UnsupportedGuide(
                "http backend needs image bytes or a file",
            )),
        }
    }
}

impl ImageBackend for HttpImageClient {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let body = Img2ImgBody {
            prompt: &req.prompt_text,
            embedding_token: &req.embedding_token,
            embedding: &req.embedding_vector,
            guiding_image_b64: Self::guide_b64(&req.guiding_image)?,
            strength: req.strength,
            guidance_scale: req.guidance_scale,
            seed: req.seed,
        };
        let url = join(&self.endpoint, "v1/img2img");
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 << attempt.min(5)));
            }
            let (status, text) = match post_json(&self.agent, &url, &body) {
                Ok(r) => r,
                Err(e) => {
                    last = e;
                    continue;
                }
            };
            let reply: Option<Img2ImgReply> = serde_json::from_str(&text).ok();
            if let Some(Img2ImgReply {
                error: Some(e), ..
            }) = reply
            {
                return Err(BackendError::Generation(e));
            }
            if status >= 500 {
                last = format!("HTTP {status}");
                continue;
            }
            if !(200..300).contains(&status) {
                return Err(BackendError::Generation(format!("HTTP {status}: {text}")));
            }
            let reply = reply.ok_or_else(|| {
                BackendError::Generation(format!("unparseable reply: {text}"))
            })?;
            let image = reply
                .image_b64
                .ok_or_else(|| BackendError::Generation("reply lacks image_b64".into()))?;
            let image = B64
                .decode(image.as_bytes())
                .map_err(|e| BackendError::Generation(format!("bad base64 image: {e}")))?;
            return Ok(GenerationResult {
                image: Some(image),
                feature: None,
                seed_used: reply.seed_used.unwrap_or(req.seed),
            });
        }
        Err(BackendError::Transport(last))
    }
}

#[derive(Serialize)]
struct CompleteBody<'a> {
    instruction: &'a str,
    seed: u64,
}

#[derive(Deserialize)]
struct CompleteReply {
    text: String,
}

/// Client for a remote text-to-text service. Each call is one request;
/// retries are driven by the caller.
pub struct HttpTextClient {
    endpoint: String,
    agent: Agent,
}

impl HttpTextClient {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            agent: agent(timeout),
        }
    }
}

impl TextClient for HttpTextClient {
    fn complete(&self, instruction: &str, seed: u64) -> Result<String, String> {
        let url = join(&self.endpoint, "v1/complete");
        let (status, text) = post_json(&self.agent, &url, &CompleteBody { instruction, seed })?;
        if !(200..300).contains(&status) {
            return Err(format!("HTTP {status}: {text}"));
        }
        serde_json::from_str::<CompleteReply>(&text)
            .map(|r| r.text)
            .map_err(|e| format!("malformed reply: {e}"))
    }
}
