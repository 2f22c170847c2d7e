use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use pcus::backbones::Variant;
use pcus::experiment::{emit_report, ExperimentConfig, RunManifest, Runner, StageStatus};

/// Small enough to run in seconds: 64-pixel ROIs, a 16-wide ResNet and a
/// two-layer core transformer.
fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(Variant::Resnet18Slim, out);
    c.k = 3;
    c.dataset.synthetic.n_patients = 40;
    c.dataset.synthetic.cores_per_patient = 1;
    c.dataset.synthetic.cancer_core_rate = 0.5;
    c.dataset.extraction.out_size = 64;
    c.backbone.input_size = 64;
    c.backbone.feature_dim = 16;
    c.backbone.resnet.stem_stride = 4;
    c.pretrain.images_per_leg = 16;
    c.pretrain.schedule.steps = 3;
    c.pretrain.schedule.batch_size = 4;
    c.pretrain.projector.hidden = 16;
    c.pretrain.projector.output = 16;
    c.finetune.schedule.steps = 30;
    c.finetune.schedule.batch_size = 32;
    c.finetune.head.hidden = 16;
    c.multiscale.model.layers = 2;
    c.multiscale.model.head.hidden = 16;
    c.multiscale.schedule.steps = 10;
    c.multiscale.schedule.batch_size = 4;
    c
}

fn files_under(root: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out
}

fn read(p: PathBuf) -> Vec<u8> {
    fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn minimal_run_is_complete_deterministic_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");

    let reports = Runner::new(tiny_config(&a)).unwrap().run_all().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].finetuning, "Linear");
    assert!(reports[1].finetuning.starts_with("BERT + MO"));
    for r in &reports {
        assert_eq!(r.per_fold.len(), 3);
        assert_eq!(r.backbone, "ResNet18");
    }
    let md = String::from_utf8(read(a.join("report.md"))).unwrap();
    assert!(md.contains("| Backbone | Finetuning | AUROC | Bal. Accuracy | Sensitivity | Specificity |"));
    assert!(md.contains(" ± "));

    // every written file except the manifest itself is listed
    let manifest = RunManifest::read(&a).unwrap();
    let mut on_disk = files_under(&a);
    on_disk.remove("manifest.json");
    let missing: Vec<_> = on_disk.difference(&manifest.files).collect();
    assert!(missing.is_empty(), "unlisted files: {missing:?}");
    assert!(manifest.failures().is_empty());
    assert_eq!(manifest.fold_plan.as_deref(), Some("splits/fold_plan.json"));

    // same config and seeds elsewhere: byte-identical metrics
    Runner::new(tiny_config(&b)).unwrap().run_all().unwrap();
    for f in ["report.csv", "report.md", "metrics/roi_linear/per_fold.csv", "metrics/multiscale_gamma_0.50/per_fold.csv"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }

    // rerun in place: every stage is reused
    let before = read(a.join("report.csv"));
    let mut again = Runner::new(tiny_config(&a)).unwrap();
    again.run_all().unwrap();
    let resumed = again
        .manifest()
        .stages
        .iter()
        .filter(|s| matches!(s.stage.as_str(), "data" | "split" | "pretrain" | "finetune" | "multiscale"))
        .all(|s| s.status == StageStatus::Resumed);
    assert!(resumed, "{:?}", again.manifest().stages);
    assert_eq!(read(a.join("report.csv")), before);

    // a different seed changes the outcome
    let c = tmp.path().join("c");
    Runner::new(tiny_config(&c).with_seed(9)).unwrap().run_all().unwrap();
    assert_ne!(read(a.join("splits/fold_plan.json")), read(c.join("splits/fold_plan.json")));
}

#[test]
fn gamma_sweep_gives_one_row_per_gamma() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path());
    cfg.stages.pretrain = false;
    cfg.multiscale.gammas = vec![0.0, 0.25, 0.5, 0.75, 1.0];
    cfg.multiscale.schedule.steps = 3;
    let reports = Runner::new(cfg).unwrap().run_all().unwrap();
    let labels: Vec<&str> = reports.iter().map(|r| r.finetuning.as_str()).collect();
    assert_eq!(
        labels,
        [
            "Linear",
            "BERT",
            "BERT + MO (γ=0.75)",
            "BERT + MO (γ=0.50)",
            "BERT + MO (γ=0.25)",
            "BERT + MO (γ=0.00)"
        ]
    );
    assert_eq!(reports.iter().filter(|r| r.finetuning.starts_with("BERT")).count(), 5);
}

#[test]
fn report_errors_on_empty_or_incomplete_runs() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(emit_report(tmp.path()).is_err());

    let mut cfg = tiny_config(tmp.path());
    cfg.stages.pretrain = false;
    cfg.stages.multiscale = false;
    let mut runner = Runner::new(cfg).unwrap();
    runner.data().unwrap();
    runner.split().unwrap();
    runner.finetune(0).unwrap();
    runner.finetune(2).unwrap();
    runner.evaluate().unwrap();
    let err = runner.report().unwrap_err().to_string();
    assert!(err.contains("roi_linear: folds [1]"), "{err}");
    let failed = RunManifest::read(tmp.path()).unwrap();
    assert_eq!(failed.failures().len(), 1);
    assert_eq!(failed.failures()[0].stage, "report");
}

#[test]
fn stage_failure_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path());
    cfg.stages.pretrain = false;
    let mut runner = Runner::new(cfg).unwrap();
    runner.data().unwrap();
    runner.split().unwrap();
    // the core model needs the fine-tuning outputs of its leg
    assert!(runner.multiscale(0, 0.5).is_err());
    let m = RunManifest::read(tmp.path()).unwrap();
    let f = m.failures();
    assert_eq!(f.len(), 1);
    assert_eq!((f[0].stage.as_str(), f[0].leg), ("multiscale", Some(0)));
    assert!(f[0].error.is_some());
}
