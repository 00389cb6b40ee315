use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diagen_core::embeddings::{ClassEmbedding, EmbeddingSet};
use diagen_core::model::{load_manifest, save_feature_table, save_manifest};
use diagen_core::weighting::{load_distribution, load_scores, ImageKind};
use diagen_core::{DatasetManifest, FeatureTable, RealImageRecord};

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    /// Embeddings for `cat` and `dog`, and `per_class` reals of each class
    /// in `classes`, with features in well separated clusters.
    fn new(classes: &[&str], per_class: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let set = EmbeddingSet::new(vec![
            ClassEmbedding::new("cat", "<cat>", vec![0.1, 0.2, -0.3, 0.4]),
            ClassEmbedding::new("dog", "<dog>", vec![-0.2, 0.1, 0.5, 0.0]),
        ])
        .unwrap();
        std::fs::write(dir.path().join("embeddings.json"), set.to_json()).unwrap();

        let mut manifest = DatasetManifest::new(classes.iter().map(|c| c.to_string()).collect(), "");
        let (mut ids, mut labels, mut rows) = (Vec::new(), Vec::new(), Vec::new());
        for (ci, class) in classes.iter().enumerate() {
            let centre = if ci == 0 { -20.0 } else { 20.0 };
            for i in 0..per_class {
                let id = format!("{class}-{i:02}");
                manifest.reals.push(RealImageRecord {
                    id: id.clone(),
                    class_label: class.to_string(),
                    image_ref: format!("images/{id}.png"),
                    feature_row: None,
                });
                ids.push(id);
                labels.push(class.to_string());
                let t = i as f64;
                rows.push(vec![centre + t.sin(), centre + (1.7 * t).cos(), 0.3 * t]);
            }
        }
        save_manifest(&manifest, &dir.path().join("reals.json")).unwrap();
        save_feature_table(
            &FeatureTable::new(ids, labels, rows).unwrap(),
            &dir.path().join("real_features.csv"),
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Writes `diagen.toml` with standard paths plus `extra` sections.
    fn config(&self, pipeline: &str, backends: &str, extra: &str) -> PathBuf {
        let text = format!(
            "[pipeline]\n{pipeline}\n\
             [paths]\nembeddings = \"embeddings.json\"\nmanifest = \"reals.json\"\n\
             real_features = \"real_features.csv\"\nout = \"out\"\n\
             [backends]\n{backends}\n{extra}\n"
        );
        let p = self.path("diagen.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_diagen"));
        cmd.arg("--config").arg(self.path("diagen.toml")).args(args);
        for var in ["DIAGEN_T2I_ENDPOINT", "DIAGEN_LLM_ENDPOINT", "DIAGEN_SEED"] {
            cmd.env_remove(var);
        }
        cmd.envs(env.iter().copied());
        cmd.current_dir(self.dir.path()).output().unwrap()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).to_string()
}

fn ok(o: &Output) -> String {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(o));
    stdout(o)
}

fn prompts_json(path: &Path) -> Vec<serde_json::Value> {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn prompts_fallback_only() {
    let f = Fixture::new(&["cat", "dog"], 2);
    f.config("", "", "");
    assert_eq!(ok(&f.run(&["prompts"])), "classes=2 prompts=20 fallback=20");
    let prompts = prompts_json(&f.path("out/prompts.json"));
    assert_eq!(prompts.len(), 20);
    assert!(prompts.iter().all(|p| p["origin"] == "fallback"));
    assert_eq!(prompts[0]["id"], "cat-00");
}

#[test]
fn prompts_unreachable_llm_falls_back_with_warning() {
    let f = Fixture::new(&["cat", "dog"], 2);
    f.config(
        "",
        "llm_endpoint = \"http://127.0.0.1:1\"\nretries = 0\ntimeout_secs = 2",
        "",
    );
    let out = f.run(&["prompts"]);
    assert_eq!(ok(&out), "classes=2 prompts=20 fallback=20");
    assert!(stderr(&out).contains("WARN"), "{}", stderr(&out));
}

#[test]
fn prompts_unreachable_llm_without_fallback_exits_3() {
    let f = Fixture::new(&["cat"], 2);
    f.config(
        "",
        "llm_endpoint = \"http://127.0.0.1:1\"\nretries = 0\ntimeout_secs = 2\nfallback = false",
        "",
    );
    assert_eq!(f.run(&["prompts"]).status.code(), Some(3));
}

#[test]
fn zero_prompts_per_class_exits_2() {
    let f = Fixture::new(&["cat"], 2);
    f.config("prompts_per_class = 0", "", "");
    let out = f.run(&["prompts"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("prompts_per_class"));
}

#[test]
fn bad_config_and_env_exit_2() {
    let f = Fixture::new(&["cat"], 2);
    f.config("bogus_key = 1", "", "");
    assert_eq!(f.run(&["prompts"]).status.code(), Some(2));
    f.config("", "", "");
    let out = f.run_env(&["prompts"], &[("DIAGEN_SEED", "abc")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn augment_counts_failures_and_is_reproducible() {
    let f = Fixture::new(&["cat"], 4);
    f.config("", "", "");
    ok(&f.run(&["prompts"]));
    assert_eq!(ok(&f.run(&["augment"])), "reals=4 synthetics=40 failures=0");
    let first = load_manifest(&f.path("out/manifest.json")).unwrap();
    ok(&f.run(&["augment"]));
    let second = load_manifest(&f.path("out/manifest.json")).unwrap();
    assert_eq!(first.fingerprint(), second.fingerprint());
    assert_eq!(first.synthetics.len(), 40);

    let out = f.run_env(&["augment"], &[("DIAGEN_T2I_ENDPOINT", "mock:fail=cat-03")]);
    assert_eq!(ok(&out), "reals=4 synthetics=36 failures=4");
    assert!(stderr(&out).contains("WARN"));
}

#[test]
fn augment_missing_inputs_exit_2() {
    let f = Fixture::new(&["cat"], 2);
    f.config("", "", "");
    // no prompt file yet
    assert_eq!(f.run(&["augment"]).status.code(), Some(2));
    ok(&f.run(&["prompts"]));
    f.config("", "t2i_endpoint = \"ftp://nowhere\"", "");
    assert_eq!(f.run(&["augment"]).status.code(), Some(2));
}

#[test]
fn seed_flag_and_env_change_provenance() {
    let f = Fixture::new(&["cat"], 2);
    f.config("synthetics_per_real = 2", "", "");
    ok(&f.run(&["prompts"]));
    ok(&f.run(&["augment"]));
    let base = load_manifest(&f.path("out/manifest.json")).unwrap();
    ok(&f.run_env(&["augment"], &[("DIAGEN_SEED", "5")]));
    let env = load_manifest(&f.path("out/manifest.json")).unwrap();
    ok(&f.run_env(&["--seed", "5", "augment"], &[("DIAGEN_SEED", "9")]));
    let flag = load_manifest(&f.path("out/manifest.json")).unwrap();
    assert_ne!(base.synthetics[0].noise_seed, env.synthetics[0].noise_seed);
    assert_eq!(env.fingerprint(), flag.fingerprint());
}

fn full_run(f: &Fixture) {
    ok(&f.run(&["prompts"]));
    ok(&f.run(&["augment"]));
}

#[test]
fn weigh_separable_classes_gives_confident_scores() {
    let f = Fixture::new(&["cat", "dog"], 8);
    f.config("synthetics_per_real = 4", "", "");
    full_run(&f);
    let line = ok(&f.run(&["weigh"]));
    assert!(line.starts_with("temperature ") && line.ends_with("scored=64"), "{line}");
    let scores = load_scores(&f.path("out/scores.csv")).unwrap();
    assert_eq!(scores.len(), 64);
    assert!(scores.0.values().all(|q| *q > 0.99), "{scores:?}");
    let dist = load_distribution(&f.path("out/distribution.csv")).unwrap();
    assert!((dist.mass(ImageKind::Real) - 0.3).abs() < 1e-9);
    assert!((dist.total() - 1.0).abs() < 1e-9);
    // near-equal scores make the split nearly uniform per image
    for e in dist.entries.iter().filter(|e| e.kind == ImageKind::Synthetic) {
        assert!((e.probability - 0.7 / 64.0).abs() < 1e-4);
    }
    let m = load_manifest(&f.path("out/manifest.json")).unwrap();
    assert!(m.synthetics.iter().all(|s| s.confidence.is_some()));
    assert!(f.path("out/calibration.json").exists());

    assert_eq!(ok(&f.run(&["sample", "--count", "50"])), "draws=50");
    let a = std::fs::read_to_string(f.path("out/stream.txt")).unwrap();
    ok(&f.run(&["sample", "--count", "50"]));
    assert_eq!(a, std::fs::read_to_string(f.path("out/stream.txt")).unwrap());
    assert_eq!(a.lines().count(), 50);
}

#[test]
fn weigh_alpha_zero_has_no_synthetic_mass() {
    let f = Fixture::new(&["cat", "dog"], 4);
    f.config("synthetics_per_real = 2\nsynthetic_probability = 0.0", "", "");
    full_run(&f);
    ok(&f.run(&["weigh"]));
    let dist = load_distribution(&f.path("out/distribution.csv")).unwrap();
    assert_eq!(dist.mass(ImageKind::Synthetic), 0.0);
    assert!((dist.mass(ImageKind::Real) - 1.0).abs() < 1e-12);
}

#[test]
fn weigh_missing_synthetic_features_exit_2() {
    let f = Fixture::new(&["cat", "dog"], 4);
    f.config("synthetics_per_real = 2", "", "");
    full_run(&f);
    std::fs::remove_file(f.path("out/synthetic_features.csv")).unwrap();
    assert_eq!(f.run(&["weigh"]).status.code(), Some(2));
}

#[test]
fn weigh_class_without_real_features_exit_2() {
    let f = Fixture::new(&["cat"], 4);
    f.config("synthetics_per_real = 2", "", "");
    full_run(&f);
    let path = f.path("out/manifest.json");
    let mut m = load_manifest(&path).unwrap();
    m.classes.push("dog".into());
    save_manifest(&m, &path).unwrap();
    let out = f.run(&["weigh"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dog"));
}

#[test]
fn calibrate_prints_temperature() {
    let f = Fixture::new(&["cat", "dog"], 4);
    f.config("", "", "");
    let line = ok(&f.run(&["calibrate"]));
    let t: f64 = line.strip_prefix("temperature ").unwrap().parse().unwrap();
    assert!((0.05..=20.0).contains(&t));
}

#[test]
fn evaluate_equal_far_and_degenerate() {
    let f = Fixture::new(&["cat", "dog"], 6);
    let cfg = |syn: &str, k: usize| {
        std::fs::write(
            f.path("diagen.toml"),
            format!(
                "[pipeline]\nknn_k = {k}\n[paths]\nreal_features = \"real_features.csv\"\n\
                 synthetic_features = \"{syn}\"\nout = \"out\"\n"
            ),
        )
        .unwrap();
    };
    cfg("real_features.csv", 5);
    assert_eq!(ok(&f.run(&["evaluate"])), "precision 100.00 recall 100.00");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("out/metrics.json")).unwrap()).unwrap();
    assert_eq!(report["k"], 5);
    assert_eq!(report["n_real"], 12);
    assert!(report.get("per_class").is_none());

    assert_eq!(
        ok(&f.run(&["evaluate", "--per-class"])),
        "precision 100.00 recall 100.00"
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("out/metrics.json")).unwrap()).unwrap();
    assert_eq!(report["per_class"]["cat"]["available"], true);

    let real = diagen_core::model::load_feature_table(&f.path("real_features.csv")).unwrap();
    let far = FeatureTable::new(
        real.ids().to_vec(),
        real.labels().to_vec(),
        real.to_rows()
            .into_iter()
            .map(|r| r.into_iter().map(|v| v + 1e4).collect())
            .collect(),
    )
    .unwrap();
    save_feature_table(&far, &f.path("far.csv")).unwrap();
    cfg("far.csv", 5);
    assert_eq!(ok(&f.run(&["evaluate"])), "precision 0.00 recall 0.00");

    cfg("real_features.csv", 12);
    assert_eq!(f.run(&["evaluate"]).status.code(), Some(2));
}

#[test]
fn out_flag_redirects_outputs() {
    let f = Fixture::new(&["cat"], 2);
    f.config("", "", "");
    ok(&f.run(&["--out", "elsewhere", "prompts"]));
    assert!(f.path("elsewhere/prompts.json").exists());
    assert!(!f.path("out/prompts.json").exists());
}
