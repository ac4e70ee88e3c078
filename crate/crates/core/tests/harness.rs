//! Command behaviour through the library entry points and the binary.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gar::config::RunConfig;
use gar::eval::{parse_attention_csv, parse_summary_csv, ConfusionMatrix};
use gar::harness::*;
use gar::training::parse_loss_curve;

fn smoke_config(dir: &Path, extra: &str) -> RunConfig {
    let text = format!(
        "seed = 3\nscene.rule = key-actor\nscene.count = 200\nscene.branch_dims = 8,8\n\
         model.d_model = 8\nmodel.d_ff = 16\ntrain.iterations = 200\ntrain.batch_size = 8\n\
         data.train = {0}/train.txt\ndata.test = {0}/test.txt\n{extra}",
        dir.display()
    );
    RunConfig::parse(&text, "smoke").unwrap()
}

#[test]
fn generate_splits_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), "");
    let (train, test) = cmd_generate(&cfg, dir.path()).unwrap();
    assert!((train.len() as f64 - 0.72 * 200.0).abs() <= 1.0);
    assert!((test.len() as f64 - 0.28 * 200.0).abs() <= 1.0);
    let train_ids: Vec<u64> = train.scenes.iter().map(|s| s.id).collect();
    assert!(test.scenes.iter().all(|s| !train_ids.contains(&s.id)));

    let other = tempfile::tempdir().unwrap();
    cmd_generate(&cfg, other.path()).unwrap();
    for f in [TRAIN_FILE, TEST_FILE] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(other.path().join(f)).unwrap()
        );
    }

    let mut zero = cfg.clone();
    zero.set("scene.count", "0").unwrap();
    assert!(cmd_generate(&zero, dir.path()).is_err());
}

#[test]
fn train_evaluate_and_dump_attention() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), "");
    cmd_generate(&cfg, dir.path()).unwrap();

    let t = Instant::now();
    let out = cmd_train(&cfg, dir.path(), None).unwrap();
    assert!(t.elapsed().as_secs_f64() < 10.0);
    assert_eq!(out.iteration, 200);
    let curve = parse_loss_curve(&std::fs::read_to_string(dir.path().join(LOSS_FILE)).unwrap()).unwrap();
    assert_eq!(curve, out.curve);

    let report = cmd_evaluate(&cfg, dir.path(), &out.checkpoint).unwrap();
    let g = ConfusionMatrix::parse_csv(&std::fs::read_to_string(dir.path().join(GROUP_CONFUSION_FILE)).unwrap()).unwrap();
    let a = ConfusionMatrix::parse_csv(&std::fs::read_to_string(dir.path().join(ACTION_CONFUSION_FILE)).unwrap()).unwrap();
    assert_eq!(g, report.group);
    assert_eq!(a, report.action);
    assert_eq!(g.total(), 56);
    let summary = parse_summary_csv(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary[0].1, g.trace() as f64 / g.total() as f64);
    assert_eq!(summary[1].1, a.trace() as f64 / a.total() as f64);

    let files = cmd_attention_dump(&cfg, dir.path(), &out.checkpoint, Some(&[150, 160])).unwrap();
    assert_eq!(files.len(), 2);
    for f in files {
        let m = parse_attention_csv(&std::fs::read_to_string(f).unwrap()).unwrap();
        assert_eq!(m.shape(), &[12, 12]);
        for i in 0..12 {
            assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
    assert!(cmd_attention_dump(&cfg, dir.path(), &out.checkpoint, Some(&[0])).is_err(), "scene 0 is in the training split");
}

#[test]
fn resume_continues_the_iteration_counter() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path(), "");
    cmd_generate(&cfg, dir.path()).unwrap();
    let full = cmd_train(&cfg, &dir.path().join("full"), None).unwrap();

    cfg.set("train.iterations", "80").unwrap();
    let first = cmd_train(&cfg, &dir.path().join("a"), None).unwrap();
    cfg.set("train.iterations", "200").unwrap();
    let second = cmd_train(&cfg, &dir.path().join("b"), Some(&first.checkpoint)).unwrap();
    assert_eq!(second.curve.first().unwrap().iteration, 80);
    assert_eq!(second.iteration, 200);
    assert_eq!(
        std::fs::read(&second.checkpoint).unwrap(),
        std::fs::read(&full.checkpoint).unwrap()
    );
}

#[test]
fn diverging_training_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), "train.lr_schedule = 1e300\n");
    cmd_generate(&cfg, dir.path()).unwrap();
    let err = cmd_train(&cfg, &dir.path().join("run"), None).unwrap_err();
    assert!(matches!(err, gar::GarError::Diverged { .. }), "{err}");
    assert!(!dir.path().join("run").join(CHECKPOINT_FILE).exists());
}

#[test]
fn ablation_grid_rows_are_sorted_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(
        "seed = 3\nscene.rule = key-actor\nscene.count = 60\nscene.branch_dims = 8\n\
         model.d_model = 8\nmodel.d_ff = 16\ntrain.iterations = 5\ntrain.batch_size = 4\n\
         ablate.layers = 1,2\nablate.heads = 1,2\nablate.pe = on,off\n",
        "grid",
    )
    .unwrap();
    let rows = cmd_ablate(&cfg, dir.path()).unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.windows(2).all(|w| w[0].config < w[1].config));
    let again = cmd_ablate(&cfg, &dir.path().join("again")).unwrap();
    assert_eq!(rows, again);
    let parsed = parse_ablation_csv(&std::fs::read_to_string(dir.path().join(ABLATION_FILE)).unwrap()).unwrap();
    assert_eq!(parsed, rows);
}

#[test]
fn binary_reports_errors_with_nonzero_status() {
    let bin = env!("CARGO_BIN_EXE_gar");
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, smoke_config(dir.path(), "").to_text()).unwrap();

    let ok = Command::new(bin)
        .args(["generate", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(ok.success());

    let missing = Command::new(bin).args(["evaluate", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--checkpoint"));

    std::fs::write(&cfg_path, "model.width = 3\n").unwrap();
    let bad = Command::new(bin).args(["train", "--config"]).arg(&cfg_path).status().unwrap();
    assert!(!bad.success());

    let seeded = Command::new(bin)
        .args(["generate", "--seed", "99", "--config"])
        .arg(dir.path().join("nope.cfg"))
        .status()
        .unwrap();
    assert!(!seeded.success());
}
