use std::path::Path;
use std::process::{Command, Output};

use sstda::adaptation::AdaptMode;
use sstda::pipeline::RunConfig;

fn sstda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sstda"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.model = "toy".into();
    cfg.adapt.discriminator = "toy".into();
    for s in [
        &mut cfg.source,
        &mut cfg.target,
        &mut cfg.validation,
        &mut cfg.test,
    ] {
        s.duration_s = [0.5, 0.6];
    }
    let s = &mut cfg.splits;
    (
        s.source_train,
        s.source_val,
        s.target_train,
        s.target_val,
        s.target_test,
    ) = (4, 2, 4, 2, 3);
    cfg.train.epochs = 1;
    cfg.train.batch_size = 2;
    cfg.train.fresh_clips = false;
    cfg.adapt.epochs = 1;
    cfg.adapt.batch_size = 2;
    cfg.adapt.warmup_steps = 1;
    cfg.sweep.modes = vec![AdaptMode::So, AdaptMode::Iwda];
    cfg.sweep.u_values = vec![0.01];
    cfg.sweep.seeds = vec![0, 1];
    cfg.out_dir = dir.join("run");
    cfg.data_dir = Some(dir.join("run"));
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn usage_errors_exit_one() {
    let out = sstda(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(
        sstda(&["adapt", "--mode", "sideways"]).status.code(),
        Some(1)
    );
    assert_eq!(sstda(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out_dir = dir.path().join("o");
    let out = sstda(&[
        "evaluate",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = \"eleven\"").unwrap();
    assert_eq!(
        sstda(&["simulate", "--config", bad.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = sstda(&[
        "gradcheck",
        "--instances",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(!stdout.contains("FAIL"));
    let csv = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().count() > 10);
}

#[test]
fn full_workflow_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    let run = dir.path().join("run");
    let ok = |args: &[&str]| {
        let out = sstda(args);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };

    ok(&["simulate", "--config", c]);
    for split in [
        "source_train",
        "source_val",
        "target_train",
        "target_val",
        "target_test",
    ] {
        assert!(run.join(split).join("manifest.txt").is_file(), "{split}");
    }
    ok(&["pretrain", "--config", c]);
    assert!(run.join("pretrained.ckpt").is_file() && run.join("last.ckpt").is_file());
    let metrics = std::fs::read_to_string(run.join("pretrain_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = run.join("pretrained.ckpt");
    let k = ckpt.to_str().unwrap();
    ok(&["adapt", "--config", c, "--checkpoint", k, "--mode", "so"]);
    let log = std::fs::read_to_string(run.join("adapt_so_log.csv")).unwrap();
    assert_eq!(
        log.lines().next().unwrap(),
        "step,epoch,l_sst,val_mae_deg,val_acc_pct"
    );
    ok(&[
        "adapt",
        "--config",
        c,
        "--checkpoint",
        k,
        "--mode",
        "iwda",
        "--u",
        "0.05",
    ]);
    let log = std::fs::read_to_string(run.join("adapt_iwda_log.csv")).unwrap();
    assert!(log.lines().next().unwrap().contains("l_w"));
    assert_eq!(log.lines().count(), 3);

    let adapted = run.join("adapted_iwda.ckpt");
    ok(&[
        "evaluate",
        "--config",
        c,
        "--checkpoint",
        adapted.to_str().unwrap(),
    ]);
    let m = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(m.lines().next().unwrap(), "scene,mae_deg,acc_pct");
    assert!(m.lines().last().unwrap().starts_with("pooled,"));
    assert!(run.join("boxplot.json").is_file());

    ok(&["sweep", "--config", c, "--checkpoint", k]);
    let sweep = std::fs::read_to_string(run.join("sweep.csv")).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(lines.next().unwrap(), "mode,u,seed,scene,mae_deg,acc_pct");
    assert_eq!(lines.count(), 4);
    assert!(run.join("sweep_summary.csv").is_file());
}
