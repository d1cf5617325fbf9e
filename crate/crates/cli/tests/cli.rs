use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn graphseg(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphseg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn summary(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("summary.csv")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key},")))
        .unwrap_or_else(|| panic!("{key} missing"))
        .to_string()
}

#[test]
fn gradcheck_passes_and_fault_injection_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = graphseg(&["gradcheck", "--scope", "tensor_ops"], dir.path());
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.starts_with("op,max_rel_err,samples\n"));
    assert!(csv.contains("\nmatmul,"));

    let bad = graphseg(
        &["gradcheck", "--scope", "ba", "--inject-fault", "ba_apply"],
        dir.path(),
    );
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("ba_apply"));

    let unknown = graphseg(&["gradcheck", "--scope", "everything"], dir.path());
    assert_eq!(code(&unknown), 2);
}

#[test]
fn train_writes_reports_and_eval_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let run = graphseg(&["train", "--override", "steps=30"], dir.path());
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    for f in [
        "checkpoint.wgts",
        "loss_curve.csv",
        "metrics.csv",
        "summary.csv",
        "config.txt",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let curve = fs::read_to_string(dir.path().join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 31);
    let trained = fs::read(dir.path().join("metrics.csv")).unwrap();
    assert!(trained.starts_with(b"class_id,iou\n"));

    let eval = graphseg(&["eval", "--override", "steps=30"], dir.path());
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    assert_eq!(fs::read(dir.path().join("metrics.csv")).unwrap(), trained);

    let config = dir.path().join("config.txt");
    let other = tempfile::tempdir().unwrap();
    let again = graphseg(
        &["train", "--config", config.to_str().unwrap()],
        other.path(),
    );
    assert_eq!(code(&again), 0);
    assert_eq!(fs::read(other.path().join("metrics.csv")).unwrap(), trained);
}

#[test]
fn disabling_gt_drops_its_closed_form() {
    let full = tempfile::tempdir().unwrap();
    let bare = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&graphseg(&["train", "--override", "steps=2"], full.path())),
        0
    );
    let args = [
        "train",
        "--override",
        "steps=2",
        "--override",
        "enable_gt=false",
    ];
    assert_eq!(code(&graphseg(&args, bare.path())), 0);
    let n = |d: &Path, k: &str| summary(d, k).parse::<usize>().unwrap();
    // GR 2·16·1 + (1·4·4)² and LR 2·16·1 + 1² per stage, two stages
    let gt = 2 * (2 * 16 + 256 + 2 * 16 + 1);
    assert_eq!(n(full.path(), "gt_params"), gt);
    assert_eq!(n(full.path(), "params") - n(bare.path(), "params"), gt);
    assert_eq!(n(bare.path(), "gt_params"), 0);
}

#[test]
fn same_seed_gives_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "train",
        "--seed",
        "7",
        "--override",
        "steps=15",
        "--override",
        "dataset=blobs",
    ];
    assert_eq!(code(&graphseg(&args, a.path())), 0);
    assert_eq!(code(&graphseg(&args, b.path())), 0);
    for f in ["metrics.csv", "loss_curve.csv", "checkpoint.wgts"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--override", "nonsense=1"][..],
        &["train", "--override", "channels=15"],
        &["train", "--config", "/definitely/not/here.conf"],
        &["ablate", "--axis", "depth"],
        &["eval", "--checkpoint", "/definitely/not/here.wgts"],
    ] {
        let o = graphseg(args, dir.path());
        assert_eq!(
            code(&o),
            2,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn divergence_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = graphseg(
        &["train", "--override", "lr=1e12", "--override", "steps=50"],
        dir.path(),
    );
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn corrupted_checkpoint_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&graphseg(&["train", "--override", "steps=1"], dir.path())),
        0
    );
    let ckpt = dir.path().join("checkpoint.wgts");
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() - 3]).unwrap();
    let o = graphseg(&["eval"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
}

#[test]
fn ablation_sweeps_emit_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    for (axis, rows) in [("theta", 5), ("fusion", 3), ("components", 4), ("ratio", 5)] {
        let o = graphseg(
            &["ablate", "--axis", axis, "--override", "steps=2"],
            dir.path(),
        );
        assert_eq!(
            code(&o),
            0,
            "{axis}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let csv = fs::read_to_string(dir.path().join(format!("ablate_{axis}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("axis,setting,miou,boundary_band_acc,params")
        );
        assert_eq!(
            lines.filter(|l| l.starts_with(axis)).count(),
            rows,
            "{axis}"
        );
    }
    let theta = fs::read_to_string(dir.path().join("ablate_theta.csv")).unwrap();
    let settings: Vec<&str> = theta
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(settings, ["2v", "v", "v/2", "v/4", "v/8"]);
}

#[test]
fn bench_writes_the_timing_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = graphseg(
        &["bench", "--ks", "2,8", "--ds", "4", "--cs", "1,8"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("K,D,c,dense_ms,sparse_ms,max_abs_diff"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.ends_with(",0")));
    assert!(dir.path().join("bench_stddev.csv").is_file());
    assert_eq!(code(&graphseg(&["bench", "--reps", "3"], dir.path())), 2);
}
