//! The `diagen` command line.
//!
//! Every subcommand reads one run configuration, writes its outputs
//! atomically into the output directory and maps failures to exit codes:
//! 2 for configuration or input problems, 3 for backend failures that
//! cannot be recovered from.

pub mod config;

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use diagen_core::backends::{
    image_backend_from_endpoint, orchestrate_augmentation, BackendOptions, FeatureGuides,
    FileGuides, GuideSource, HttpTextClient,
};
use diagen_core::embeddings::load_embeddings;
use diagen_core::metrics::evaluate_pair;
use diagen_core::model::{load_feature_table, load_manifest, save_feature_table, save_manifest};
use diagen_core::prompts::{
    load_prompts, request_prompts, save_prompts, PromptError, RequestOptions, TextClient,
};
use diagen_core::seed::{self, SeedPart};
use diagen_core::weighting::{
    build_distribution, fit_calibration, load_distribution, sample_stream, save_text,
    score_synthetics, Calibration, ProbeParams,
};
use diagen_core::{DatasetManifest, FeatureTable};
use thiserror::Error;

pub use config::{Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Backend(_) => 3,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "diagen", version, about = "Diversity-oriented synthetic data augmentation")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config file and DIAGEN_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate class prompts (LLM when configured, grammar fallback otherwise).
    Prompts,
    /// Expand each real image into synthetic images.
    Augment,
    /// Train the probe and calibrate its temperature.
    Calibrate,
    /// Score synthetics and write the sampling distribution.
    Weigh,
    /// Draw a training stream of image ids.
    Sample {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Precision and recall of synthetic against real features.
    Evaluate {
        #[arg(long)]
        per_class: bool,
    },
}

/// Loads the configuration with environment and flag overrides.
pub fn load_config(
    cli: &Cli,
    env: impl Fn(&str) -> Option<String>,
) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply_env(env)?;
    cfg.apply_overrides(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
    });
    cfg.pipeline.validate().map_err(input)?;
    Ok(cfg)
}

/// Runs a parsed command and returns the stdout summary.
pub fn run(cli: &Cli, cfg: &RunConfig) -> Result<String, CliError> {
    std::fs::create_dir_all(cfg.out_dir()).map_err(|e| {
        CliError::Input(format!("cannot create {}: {e}", cfg.out_dir().display()))
    })?;
    match &cli.command {
        Command::Prompts => cmd_prompts(cfg),
        Command::Augment => cmd_augment(cfg),
        Command::Calibrate => cmd_calibrate(cfg),
        Command::Weigh => cmd_weigh(cfg),
        Command::Sample { count } => cmd_sample(cfg, count.unwrap_or(cfg.sample.count)),
        Command::Evaluate { per_class } => cmd_evaluate(cfg, *per_class || cfg.evaluate.per_class),
    }
}

fn timeout(cfg: &RunConfig) -> Duration {
    Duration::from_secs(cfg.backends.timeout_secs)
}

fn features(path: &Path) -> Result<FeatureTable, CliError> {
    load_feature_table(path).map_err(input)
}

pub fn cmd_prompts(cfg: &RunConfig) -> Result<String, CliError> {
    let embeddings =
        load_embeddings(&cfg.required(&cfg.paths.embeddings, "embeddings")?).map_err(input)?;
    let client: Option<Box<dyn TextClient>> = cfg
        .backends
        .llm_endpoint
        .as_deref()
        .map(|e| Box::new(HttpTextClient::new(e, timeout(cfg))) as Box<dyn TextClient>);
    let options = RequestOptions {
        retries: cfg.backends.retries,
        fallback: cfg.backends.fallback,
    };
    let n = cfg.pipeline.prompts_per_class;
    let mut all = Vec::new();
    let mut fallback = 0;
    for emb in embeddings.iter() {
        let seed = seed::stable_hash(&[
            SeedPart::Str("prompts"),
            SeedPart::Int(cfg.pipeline.master_seed),
            SeedPart::Str(&emb.class_label),
        ]);
        let outcome = request_prompts(
            client.as_deref(),
            &emb.class_label,
            &emb.token,
            n,
            seed,
            options,
        )
        .map_err(|e| match e {
            PromptError::Transport(_) | PromptError::Insufficient { .. } => {
                CliError::Backend(format!("{}: {e}", emb.class_label))
            }
            other => input(other),
        })?;
        if let Some(last) = outcome.transport_errors.last() {
            log::warn!(
                "{}: text backend failed {} time(s), last error: {last}",
                emb.class_label,
                outcome.transport_errors.len()
            );
        }
        if client.is_some() && outcome.fallback_count() > 0 {
            log::warn!(
                "{}: {} of {n} prompts came from the fallback grammar",
                emb.class_label,
                outcome.fallback_count()
            );
        }
        fallback += outcome.fallback_count();
        all.extend(outcome.prompts);
    }
    let path = cfg.out_file("prompts.json");
    save_prompts(&all, &path).map_err(input)?;
    Ok(format!(
        "classes={} prompts={} fallback={fallback}",
        embeddings.len(),
        all.len()
    ))
}

pub fn cmd_augment(cfg: &RunConfig) -> Result<String, CliError> {
    let embeddings =
        load_embeddings(&cfg.required(&cfg.paths.embeddings, "embeddings")?).map_err(input)?;
    let prompts = load_prompts(&cfg.or_out(&cfg.paths.prompts, "prompts.json")).map_err(input)?;
    let manifest = load_manifest(&cfg.required(&cfg.paths.manifest, "manifest")?).map_err(input)?;
    let options = BackendOptions {
        timeout: timeout(cfg),
        retries: cfg.backends.retries,
        parallelism: cfg.backends.parallelism,
    };
    let backend =
        image_backend_from_endpoint(&cfg.backends.t2i_endpoint, &embeddings, options).map_err(input)?;

    let table;
    let guides: Box<dyn GuideSource + '_> = if cfg.backends.t2i_endpoint.starts_with("mock:") {
        table = features(&cfg.required(&cfg.paths.real_features, "real_features")?)?;
        Box::new(FeatureGuides(&table))
    } else {
        let base = cfg
            .paths
            .images_dir
            .as_deref()
            .map(|p| cfg.resolve(p))
            .unwrap_or_else(|| cfg.base_dir.clone());
        Box::new(FileGuides { base_dir: base })
    };

    let mut outcome = orchestrate_augmentation(
        &manifest,
        &embeddings,
        &prompts,
        backend.as_ref(),
        guides.as_ref(),
        &cfg.pipeline,
        options.parallelism,
    )
    .map_err(input)?;

    for (id, bytes) in &outcome.images {
        let rel = format!("images/{id}.png");
        let path = cfg.out_file(&rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(input)?;
        }
        seed::atomic_write(&path, bytes).map_err(input)?;
        if let Some(rec) = outcome.manifest.synthetics.iter_mut().find(|s| &s.id == id) {
            rec.image_ref = Some(rel);
        }
    }
    if let Some(t) = &outcome.synthetic_features {
        save_feature_table(t, &cfg.out_file("synthetic_features.csv")).map_err(input)?;
    }
    save_manifest(&outcome.manifest, &cfg.out_file("manifest.json")).map_err(input)?;
    if !outcome.failures.is_empty() {
        log::warn!("{} generation(s) failed and were skipped", outcome.failures.len());
    }
    let added = outcome.manifest.synthetics.len() - manifest.synthetics.len();
    Ok(format!(
        "reals={} synthetics={added} failures={}",
        manifest.reals.len(),
        outcome.failures.len()
    ))
}

fn calibrate(
    cfg: &RunConfig,
    real: &FeatureTable,
    classes: &[String],
) -> Result<Calibration, CliError> {
    let params = ProbeParams {
        l2: cfg.weigh.l2,
        max_iter: cfg.weigh.max_iter,
        ..ProbeParams::default()
    };
    let cal = fit_calibration(
        real,
        classes,
        cfg.weigh.validation_fraction,
        cfg.pipeline.master_seed,
        params,
    )
    .map_err(input)?;
    let text = serde_json::to_string_pretty(&cal).map_err(input)?;
    save_text(&cfg.out_file("calibration.json"), &(text + "\n")).map_err(input)?;
    Ok(cal)
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<String, CliError> {
    let real = features(&cfg.required(&cfg.paths.real_features, "real_features")?)?;
    let classes = match &cfg.paths.manifest {
        Some(p) => load_manifest(&cfg.resolve(p)).map_err(input)?.classes,
        None => {
            let mut c = real.labels().to_vec();
            c.sort();
            c.dedup();
            c
        }
    };
    let cal = calibrate(cfg, &real, &classes)?;
    Ok(format!("temperature {}", cal.temperature))
}

fn augmented_manifest(cfg: &RunConfig) -> Result<(PathBuf, DatasetManifest), CliError> {
    let path = cfg.out_file("manifest.json");
    let m = load_manifest(&path).map_err(input)?;
    Ok((path, m))
}

pub fn cmd_weigh(cfg: &RunConfig) -> Result<String, CliError> {
    let (manifest_path, mut manifest) = augmented_manifest(cfg)?;
    let real = features(&cfg.required(&cfg.paths.real_features, "real_features")?)?;
    let syn_path = cfg.or_out(&cfg.paths.synthetic_features, "synthetic_features.csv");
    let syn = if manifest.synthetics.is_empty() && !syn_path.exists() {
        FeatureTable::new(Vec::new(), Vec::new(), Vec::new()).map_err(input)?
    } else {
        features(&syn_path)?
    };
    let cal = calibrate(cfg, &real, &manifest.classes)?;
    let scores = score_synthetics(&cal, &manifest, &syn).map_err(input)?;
    let dist = build_distribution(&manifest, &scores, cfg.pipeline.synthetic_probability)
        .map_err(input)?;
    save_text(&cfg.out_file("scores.csv"), &scores.to_csv_string().map_err(input)?)
        .map_err(input)?;
    save_text(&cfg.out_file("distribution.csv"), &dist.to_csv_string().map_err(input)?)
        .map_err(input)?;
    scores.apply_to(&mut manifest);
    save_manifest(&manifest, &manifest_path).map_err(input)?;
    Ok(format!(
        "temperature {} scored={}",
        cal.temperature,
        scores.len()
    ))
}

pub fn cmd_sample(cfg: &RunConfig, count: usize) -> Result<String, CliError> {
    let dist = load_distribution(&cfg.out_file("distribution.csv")).map_err(input)?;
    if !(dist.total() > 0.0) {
        return Err(CliError::Input("distribution has no probability mass".into()));
    }
    let seed = seed::stable_hash(&[SeedPart::Str("sample"), SeedPart::Int(cfg.pipeline.master_seed)]);
    let ids = sample_stream(&dist, seed, count);
    let mut text = ids.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    save_text(&cfg.out_file("stream.txt"), &text).map_err(input)?;
    Ok(format!("draws={}", ids.len()))
}

pub fn cmd_evaluate(cfg: &RunConfig, per_class: bool) -> Result<String, CliError> {
    let real = features(&cfg.required(&cfg.paths.real_features, "real_features")?)?;
    let syn = features(&cfg.or_out(&cfg.paths.synthetic_features, "synthetic_features.csv"))?;
    let report = evaluate_pair(&real, &syn, cfg.pipeline.knn_k, per_class).map_err(input)?;
    let text = serde_json::to_string_pretty(&report).map_err(input)?;
    save_text(&cfg.out_file("metrics.json"), &(text + "\n")).map_err(input)?;
    Ok(report.summary_line())
}
