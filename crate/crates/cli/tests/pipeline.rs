mod common;

use std::fs;
use std::process::Command;

use common::*;
use slidelab::classify::{PatchIndex, METRICS_JSON, METRICS_TEXT};
use slidelab::lock::RunLock;
use slidelab::{report, run_classification_pipeline, run_generation_pipeline, run_stage, Error, RunConfig, STAGES};
use slidelab_core::corpus::Split;

#[test]
fn two_slide_corpus_runs_all_seven_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(&tmp.path().join("corpus"), 2, 1, 64);
    let mut c = small_config(manifest, tmp.path().join("run"), 2, 1);
    c.split.counts = counts(1, 1, 0);
    let out = run_classification_pipeline(&c).unwrap();
    let names: Vec<&str> = out.timing.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(names, STAGES);
    assert!(out.timing.stages.iter().all(|s| s.seconds >= 0.0));
    assert_eq!(out.log.epochs.len(), 1);
    assert_eq!(out.report.metrics.slides, 0);
    assert!(c.output_root.join("timing/classification.json").is_file());
    assert!(c.output_root.join("train/checkpoint/meta.json").is_file());
    assert!(c.output_root.join("train/log.jsonl").is_file());
}

#[test]
fn stages_write_only_their_own_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(&tmp.path().join("corpus"), 2, 3, 64);
    let c = small_config(manifest, tmp.path().join("run"), 2, 1);
    let out = run_classification_pipeline(&c).unwrap();
    let mut entries: Vec<String> = fs::read_dir(&c.output_root)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    entries.sort();
    let mut expected: Vec<String> = STAGES.iter().map(|s| s.to_string()).chain(["timing".to_string()]).collect();
    expected.sort();
    assert_eq!(entries, expected);
    for p in &out.overlays {
        assert!(p.starts_with(c.output_root.join("visualize")));
    }
    let patch_root = c.output_root.join("patches");
    for split in ["train", "validation", "test"] {
        assert!(patch_root.join(split).is_dir(), "{split}");
    }
    let index: PatchIndex = serde_json::from_slice(&fs::read(patch_root.join("index.json")).unwrap()).unwrap();
    assert!(!index.train.is_empty());
    for (split, refs) in [(Split::Train, &index.train), (Split::Validation, &index.validation), (Split::Test, &index.test)] {
        for r in refs {
            assert!(r.path_under(&patch_root, split).is_file(), "{split:?}: {}", r.slide_id);
        }
    }
}

#[test]
fn rerun_with_same_seed_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(&tmp.path().join("corpus"), 2, 3, 64);
    let mut a = small_config(manifest.clone(), tmp.path().join("a"), 2, 1);
    a.deterministic = true;
    run_classification_pipeline(&a).unwrap();
    let first = fs::read(a.output_root.join("test").join(METRICS_TEXT)).unwrap();
    run_classification_pipeline(&a).unwrap();
    assert_eq!(fs::read(a.output_root.join("test").join(METRICS_TEXT)).unwrap(), first);
    let b = RunConfig {
        output_root: tmp.path().join("b"),
        ..a.clone()
    };
    run_classification_pipeline(&b).unwrap();
    for f in [METRICS_TEXT, METRICS_JSON] {
        assert_eq!(
            fs::read(a.output_root.join("test").join(f)).unwrap(),
            fs::read(b.output_root.join("test").join(f)).unwrap()
        );
    }
}

#[test]
fn failures_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small_config(tmp.path().join("missing.tsv"), tmp.path().join("run"), 2, 1);
    let err = run_classification_pipeline(&c).unwrap_err();
    assert_eq!(err.stage(), Some("split"));
    let err = run_stage(&c, "train").unwrap_err();
    assert_eq!(err.stage(), Some("train"));
    assert!(matches!(err, Error::Stage { ref source, .. } if matches!(**source, Error::MissingArtifact { stage: "split", .. })));
    assert!(matches!(run_stage(&c, "bogus"), Err(Error::Config(_))));
}

#[test]
fn locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(&tmp.path().join("corpus"), 2, 1, 64);
    let c = small_config(manifest, tmp.path().join("run"), 2, 1);
    let _held = RunLock::acquire(&c.output_root).unwrap();
    assert!(matches!(run_classification_pipeline(&c), Err(Error::Locked { .. })));
}

#[test]
fn generation_writes_images_and_a_table_row() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(&tmp.path().join("corpus"), 2, 2, 64);
    let mut c = small_config(manifest, tmp.path().join("run"), 2, 1);
    small_diffusion(&mut c);
    let out = run_generation_pipeline(&c, "dreambooth_unet").unwrap();
    assert_eq!(out.images.len(), 2);
    for (i, p) in out.images.iter().enumerate() {
        assert_eq!(p, &c.output_root.join("generate/dreambooth_unet").join(format!("job_{i}.png")));
        assert!(p.is_file());
    }
    assert_eq!(out.row.regime, "dreambooth_unet");
    assert_eq!(out.row.modifiers, "UNet");
    assert!(out.row.training_seconds.unwrap() >= 0.0);
    assert_eq!(out.timing.image_seconds.len(), 2);
    assert!(c.output_root.join("finetune/dreambooth_unet/backend/metadata.json").is_file());
}

#[test]
fn zero_count_is_rejected_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(&tmp.path().join("corpus"), 2, 1, 64);
    let mut c = small_config(manifest, tmp.path().join("run"), 2, 1);
    small_diffusion(&mut c);
    c.generation.count = 0;
    assert!(run_generation_pipeline(&c, "dreambooth_unet").is_err());
    assert!(!c.output_root.exists());
}

#[test]
fn reuse_requires_a_saved_backend() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(&tmp.path().join("corpus"), 2, 1, 64);
    let mut c = small_config(manifest, tmp.path().join("run"), 2, 1);
    small_diffusion(&mut c);
    c.diffusion.finetune_enabled = false;
    assert!(matches!(
        run_generation_pipeline(&c, "textual_inversion"),
        Err(Error::MissingBackend { .. })
    ));
    slidelab::run_finetune(&c, slidelab_diffusion::Regime::TextualInversion).unwrap();
    let out = run_generation_pipeline(&c, "textual_inversion").unwrap();
    let names: Vec<&str> = out.timing.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(names, ["generate"]);
    assert_eq!(out.row.training_seconds, None);
}

#[test]
fn report_handles_partial_and_full_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert!(matches!(report(&empty), Err(Error::EmptyRun(_))));

    let manifest = corpus(&tmp.path().join("corpus"), 2, 3, 64);
    let mut c = small_config(manifest, tmp.path().join("run"), 2, 1);
    small_diffusion(&mut c);
    run_classification_pipeline(&c).unwrap();
    let full = report(&c.output_root).unwrap();
    assert!(full.contains("Slide-level accuracy"));
    for s in STAGES {
        assert!(full.contains(&format!("| {s} |")), "{s}");
    }

    let metrics_only = tmp.path().join("metrics_only");
    fs::create_dir_all(metrics_only.join("test")).unwrap();
    fs::copy(c.output_root.join("test").join(METRICS_JSON), metrics_only.join("test").join(METRICS_JSON)).unwrap();
    let partial = report(&metrics_only).unwrap();
    assert!(partial.contains("Slide-level accuracy"));
    assert!(partial.contains("## Classification timing\n\nabsent"));
    assert!(partial.contains("## Generation timing\n\nabsent"));

    run_generation_pipeline(&c, "textual_inversion").unwrap();
    run_generation_pipeline(&c, "dreambooth_unet").unwrap();
    let both = report(&c.output_root).unwrap();
    let a = both.find("| dreambooth_unet |").unwrap();
    let b = both.find("| textual_inversion |").unwrap();
    assert!(a < b);
}

#[test]
fn binary_reports_stage_on_failure_and_prints_config() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_slidelab");
    let out = Command::new(bin)
        .args(["--manifest", "nope.tsv", "--output-root"])
        .arg(tmp.path().join("run"))
        .arg("split")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `split` failed"));

    let out = Command::new(bin).args(["--seed", "11", "config"]).output().unwrap();
    assert!(out.status.success());
    let c = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(c.seed, 11);
}
