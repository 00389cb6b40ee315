//! Run configuration: one TOML file, environment overrides, flag overrides.

use std::path::{Path, PathBuf};

use diagen_core::PipelineConfig;
use serde::Deserialize;

use crate::CliError;

pub const ENV_T2I: &str = "DIAGEN_T2I_ENDPOINT";
pub const ENV_LLM: &str = "DIAGEN_LLM_ENDPOINT";
pub const ENV_SEED: &str = "DIAGEN_SEED";

/// File locations. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub embeddings: Option<PathBuf>,
    /// Prompt file read by `augment`; defaults to the one `prompts` writes.
    pub prompts: Option<PathBuf>,
    /// Manifest of the real images.
    pub manifest: Option<PathBuf>,
    pub real_features: Option<PathBuf>,
    /// Synthetic features; defaults to the table `augment` writes.
    pub synthetic_features: Option<PathBuf>,
    /// Directory that real `image_ref`s are relative to.
    pub images_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backends {
    pub t2i_endpoint: String,
    pub llm_endpoint: Option<String>,
    /// Top up missing prompts from the grammar generator.
    pub fallback: bool,
    pub timeout_secs: u64,
    pub retries: u32,
    pub parallelism: usize,
}

impl Default for Backends {
    fn default() -> Self {
        Self {
            t2i_endpoint: "mock:".into(),
            llm_endpoint: None,
            fallback: true,
            timeout_secs: 120,
            retries: 3,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeighSection {
    pub validation_fraction: f64,
    pub l2: f64,
    pub max_iter: usize,
}

impl Default for WeighSection {
    fn default() -> Self {
        Self {
            validation_fraction: 0.25,
            l2: 1e-2,
            max_iter: 2000,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub count: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { count: 1000 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub per_class: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub paths: Paths,
    pub backends: Backends,
    pub weigh: WeighSection,
    pub sample: SampleSection,
    pub evaluate: EvaluateSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line overrides applied after the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    /// Reads `path`, or uses defaults rooted at the working directory.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("cannot read {}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Self::parse(&text, &base)
            }
            None => Ok(Self::default()),
        }
    }

    /// Environment overrides take `lookup(name)`; pass `std::env::var` in
    /// production.
    pub fn apply_env(
        &mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<(), CliError> {
        if let Some(v) = lookup(ENV_T2I).filter(|v| !v.is_empty()) {
            self.backends.t2i_endpoint = v;
        }
        if let Some(v) = lookup(ENV_LLM) {
            self.backends.llm_endpoint = Some(v).filter(|v| !v.is_empty());
        }
        if let Some(v) = lookup(ENV_SEED).filter(|v| !v.is_empty()) {
            self.pipeline.master_seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Input(format!("{ENV_SEED}=`{v}` is not an integer")))?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.pipeline.master_seed = s;
        }
        if let Some(out) = &o.out {
            // flags are relative to the working directory, not the config file
            self.paths.out = Some(std::env::current_dir().unwrap_or_default().join(out));
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(self.paths.out.as_deref().unwrap_or(Path::new("out")))
    }

    pub fn out_file(&self, name: &str) -> PathBuf {
        self.out_dir().join(name)
    }

    /// A configured path, or an error naming the missing key.
    pub fn required(&self, value: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
        value
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| CliError::Input(format!("paths.{key} is not set")))
    }

    /// A configured path, or the named file in the output directory.
    pub fn or_out(&self, value: &Option<PathBuf>, default_name: &str) -> PathBuf {
        value
            .as_deref()
            .map(|p| self.resolve(p))
            .unwrap_or_else(|| self.out_file(default_name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_sections() {
        let cfg = RunConfig::parse(
            "[pipeline]\nsynthetics_per_real = 3\n[paths]\nout = \"o\"\n[backends]\nfallback = false\n",
            Path::new("/tmp/run"),
        )
        .unwrap();
        assert_eq!(cfg.pipeline.synthetics_per_real, 3);
        assert_eq!(cfg.pipeline.prompts_per_class, 10);
        assert!(!cfg.backends.fallback);
        assert_eq!(cfg.out_dir(), PathBuf::from("/tmp/run/o"));
        assert_eq!(cfg.backends.t2i_endpoint, "mock:");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[pipeline]\nbogus = 1\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("[nope]\n", Path::new(".")).is_err());
    }

    #[test]
    fn precedence_file_env_flag() {
        let mut cfg = RunConfig::parse("[pipeline]\nmaster_seed = 1\n", Path::new(".")).unwrap();
        cfg.apply_env(|k| match k {
            ENV_SEED => Some("2".into()),
            ENV_T2I => Some("mock:lambda=1".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.pipeline.master_seed, 2);
        assert_eq!(cfg.backends.t2i_endpoint, "mock:lambda=1");
        cfg.apply_overrides(&Overrides {
            seed: Some(3),
            out: None,
        });
        assert_eq!(cfg.pipeline.master_seed, 3);
        assert!(cfg
            .apply_env(|k| (k == ENV_SEED).then(|| "x".to_string()))
            .is_err());
    }
}
