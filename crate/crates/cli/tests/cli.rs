use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pcus::experiment::ExperimentConfig;

const TINY: &str = r#"
seed = 0
k = 3
output_dir = "run"

[dataset.synthetic]
n_patients = 30
cores_per_patient = 1
cancer_core_rate = 0.5

[dataset.extraction]
out_size = 64

[backbone]
variant = "resnet18_slim"
input_size = 64
feature_dim = 16

[backbone.resnet]
stem_stride = 4

[stages]
pretrain = false

[finetune.schedule]
steps = 20
batch_size = 32

[finetune.head]
hidden = 16

[multiscale]
gammas = [0.5]

[multiscale.model]
layers = 1

[multiscale.model.head]
hidden = 16

[multiscale.schedule]
steps = 3
batch_size = 4
"#;

fn pcus(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcus"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn prints_effective_config_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    let o = pcus(
        &["run-all", "-c", "tiny.toml", "--seed", "7", "--gamma", "0.25", "--gamma", "1", "--print-effective-config"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = ExperimentConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!((cfg.seed, cfg.dataset.synthetic.seed), (7, 7));
    assert_eq!(cfg.multiscale.gammas, [0.25, 1.0]);
    assert_eq!(cfg.backbone.feature_dim, 16);
    // nothing is run
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn run_all_then_report_again() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    let o = pcus(&["run-all", "-c", "tiny.toml"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("run");
    for f in ["manifest.json", "report.md", "report.csv", "config.toml", "splits/fold_plan.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(stdout(&o).contains("| Backbone | Finetuning |"));

    let first = fs::read(run.join("report.csv")).unwrap();
    let o = pcus(&["report", "-c", "tiny.toml"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(run.join("report.csv")).unwrap(), first);
}

#[test]
fn stage_by_stage_matches_run_all() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    let ok = |args: &[&str]| {
        let o = pcus(args, tmp.path());
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    ok(&["synth", "-c", "tiny.toml", "-o", "staged"]);
    ok(&["split", "-c", "tiny.toml", "-o", "staged"]);
    ok(&["finetune", "-c", "tiny.toml", "-o", "staged"]);
    ok(&["multiscale", "-c", "tiny.toml", "-o", "staged"]);
    ok(&["evaluate", "-c", "tiny.toml", "-o", "staged"]);
    ok(&["report", "-c", "tiny.toml", "-o", "staged"]);
    ok(&["run-all", "-c", "tiny.toml", "-o", "whole"]);
    assert_eq!(
        fs::read(tmp.path().join("staged/report.csv")).unwrap(),
        fs::read(tmp.path().join("whole/report.csv")).unwrap()
    );
}

#[test]
fn bad_input_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "k = 2\n").unwrap();
    let o = pcus(&["run-all", "-c", "bad.toml"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error:"), "{}", stderr(&o));

    fs::write(tmp.path().join("typo.toml"), "seeed = 1\n").unwrap();
    assert!(!pcus(&["synth", "-c", "typo.toml"], tmp.path()).status.success());

    assert!(!pcus(&["run-all", "-c", "missing.toml"], tmp.path()).status.success());

    let o = pcus(&["report", "-o", "empty"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error:"));
}
