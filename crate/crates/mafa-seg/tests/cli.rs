//! End-to-end checks of the command-line interface: subcommand plumbing,
//! artifact layout and exit codes.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mafa-seg"))
}

fn write_tiny_config(path: &Path) {
    std::fs::write(
        path,
        "model.input_size = 16\n\
         model.widths = 4,8,8\n\
         model.skip_channels = 4\n\
         model.aspp_channels = 8\n\
         model.decoder_widths = 8,8\n\
         train.epochs = 1\n\
         train.batch_size = 4\n",
    )
    .unwrap();
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let status = bin()
            .args(["synth", "--count", "4", "--size", "16", "--seed", "9", "--out"])
            .arg(dir.path().join(name))
            .status()
            .unwrap();
        assert!(status.success());
    }
    for sub in ["proc_01/images", "proc_01/masks"] {
        for entry in std::fs::read_dir(dir.path().join("a").join(sub)).unwrap() {
            let entry = entry.unwrap();
            let twin = dir.path().join("b").join(sub).join(entry.file_name());
            assert_eq!(
                std::fs::read(entry.path()).unwrap(),
                std::fs::read(&twin).unwrap(),
                "{:?} differs between identical synth runs",
                entry.file_name()
            );
        }
    }
}

#[test]
fn train_eval_audit_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    write_tiny_config(&cfg);
    let data = dir.path().join("data");
    assert!(bin()
        .args(["synth", "--count", "4", "--size", "16", "--seed", "2", "--out"])
        .arg(&data)
        .status()
        .unwrap()
        .success());

    let run = dir.path().join("run");
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--data"])
        .arg(&data)
        .args(["--out"])
        .arg(&run)
        .status()
        .unwrap()
        .success());
    for artifact in ["model.ckpt", "loss_log.csv", "config.resolved.txt"] {
        assert!(run.join(artifact).exists(), "missing {artifact}");
    }

    let eval = dir.path().join("eval");
    assert!(bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .args(["--data"])
        .arg(&data)
        .args(["--ckpt"])
        .arg(run.join("model.ckpt"))
        .args(["--out"])
        .arg(&eval)
        .args(["--overlays"])
        .status()
        .unwrap()
        .success());
    let csv = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("id,dsc,iou,rm_iou,rsd_iou,iou_nb\n"));
    assert_eq!(csv.lines().count(), 5);
    assert!(eval.join("summary.json").exists());
    assert_eq!(std::fs::read_dir(eval.join("overlays")).unwrap().count(), 4);

    let audit = dir.path().join("audit");
    assert!(bin()
        .args(["audit", "--config"])
        .arg(&cfg)
        .args(["--data"])
        .arg(&data)
        .args(["--ckpt"])
        .arg(run.join("model.ckpt"))
        .args(["--out"])
        .arg(&audit)
        .status()
        .unwrap()
        .success());
    let audit_csv = std::fs::read_to_string(audit.join("audit.csv")).unwrap();
    assert!(audit_csv.starts_with("id,iou_0,iou_60,iou_120,iou_180,iou_240,iou_300,rm_iou,rsd_iou"));
}

#[test]
fn gradcheck_prints_one_line_per_op() {
    let out = bin().args(["gradcheck", "--seeds", "1"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert!(lines.len() >= 10);
    for line in &lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3, "bad line {line:?}");
        assert!(fields[2] == "pass" || fields[2] == "fail");
    }
    assert!(lines.iter().any(|l| l.starts_with("end_to_end,")));
}

#[test]
fn exit_codes() {
    // usage error -> 1
    let out = bin().arg("no-such-subcommand").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    // runtime error (missing dataset directory) -> 2
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--data"])
        .arg(dir.path().join("missing"))
        .args(["--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    // help -> 0
    assert!(bin().arg("--help").status().unwrap().success());
}
