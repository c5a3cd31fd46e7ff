use std::path::Path;
use std::process::{Command, Output};

use mixprec::report::{read_tradeoff_csv, TRADEOFF_HEADER};

fn mixprec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixprec")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn formats_describes_and_rejects() {
    let o = mixprec(&["formats", "-e", "5", "-m", "2"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("max: 1.14688e5"), "{}", stdout(&o));

    let o = mixprec(&["formats", "-e", "2", "-m", "1", "--values"]);
    assert_eq!(stdout(&o).lines().count(), 5 + 15);

    let o = mixprec(&["formats", "-e", "13", "-m", "2"]);
    assert!(!o.status.success());
    assert_eq!(stderr(&o).lines().count(), 1);
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn assign_lists_every_tensor() {
    let o = mixprec(&["assign", "--scheme", "ours", "--r", "0.3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,tensor,kind,size,group,level"));
    let rows: Vec<_> = lines.clone().filter(|l| !l.starts_with('#')).collect();
    // 7 operators: 8 activations, 3 weights, and their gradients
    assert_eq!(rows.len(), 22);
    assert!(rows.iter().filter(|r| r.contains(",dtheta")).all(|r| r.ends_with(",hi")));
    assert!(text.contains("# scheme=ours lrt="));

    let o = mixprec(&["assign", "--scheme", "fp16"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("scheme.kind"));
}

#[test]
fn train_writes_outputs_and_appends() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for _ in 0..2 {
        let o = mixprec(&["--out", out, "--seed", "3", "train", "--epochs", "2", "--scheme", "unif"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let epochs = std::fs::read_to_string(dir.path().join("epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 3);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 3);
    let rows = read_tradeoff_csv(&dir.path().join("tradeoff.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);
    assert_eq!(rows[0].r, None);
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "model.input_shape = 2\nmodel.layers = dense(out=8); relu; dense(out=2); softmax_ce\ndata.kind = moons\ndata.n = 100\ntrain.epochs = 50\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = mixprec(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "train.epochs=2",
        "sweep",
        "--schemes",
        "fp32,ours",
        "--r-values",
        "0,1",
        "--repeats",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("tradeoff.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(TRADEOFF_HEADER));
    let rows = read_tradeoff_csv(&out.join("tradeoff.csv")).unwrap();
    assert_eq!(rows.len(), 2 + 2 * 2);
    assert!(out.join("summary.csv").exists());
    assert!(out.join("runs/ours_r1_run1/epochs.csv").exists());
    let epochs = std::fs::read_to_string(out.join("runs/fp32_run0/epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 3);

    std::fs::write(&cfg, "train.epochs = 3\nbogus\n").unwrap();
    let o = mixprec(&["--config", cfg.to_str().unwrap(), "assign"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn csv_data_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write(&data, "a,b,label\n0.5,1.0,0\n0.25,oops,1\n");
    let path = format!("data.path={}", data.display());
    let args = [
        "--set",
        "data.kind=csv",
        "--set",
        &path,
        "--set",
        "model.input_shape=2",
        "--set",
        "model.layers=dense(out=2); softmax_ce",
        "--out",
        dir.path().to_str().unwrap(),
        "train",
        "--epochs",
        "1",
    ];
    let o = mixprec(&args);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    write(&data, "a,b,label\n0.5,1.0,0\n0.25,0.75,1\n-0.5,0.0,1\n0.0,0.0,0\n1.0,1.0,1\n");
    let o = mixprec(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn reduce_reports_the_optimum() {
    let o = mixprec(&["reduce", "--weights", "1,2", "--profits", "3,4", "--capacity", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("knapsack optimum: 01 (profit 4)"), "{text}");
    assert!(text.contains("reduction holds"));

    let o = mixprec(&["reduce", "--weights", "1", "--profits", "3,4", "--capacity", "2"]);
    assert!(!o.status.success());
}
