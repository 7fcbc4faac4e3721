use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn u3ds3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_u3ds3"))
        .args(args)
        .env_remove("U3DS3_THREADS")
        .output()
        .expect("binary runs")
}

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn selftest_passes() {
    let o = u3ds3(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("self-checks passed"));
}

#[test]
fn train_without_classes_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = u3ds3(&["train", "--data", dir.path().to_str().unwrap(), "--out", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--classes"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_and_missing_subcommand_exit_1() {
    assert_eq!(u3ds3(&["selftest", "--bogus"]).status.code(), Some(1));
    assert_eq!(u3ds3(&[]).status.code(), Some(1));
    let o = u3ds3(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("gen-synth"));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ply");
    fs::write(&bad, "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n").unwrap();
    let out = dir.path().join("o");
    let o = u3ds3(&["preprocess", "--in", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let missing = dir.path().join("nope.ply");
    let o = u3ds3(&["superpoints", "--in", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let o = u3ds3(&["--config", cfg.to_str().unwrap(), "selftest"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_u3ds3"))
        .args(["--dump-config", "selftest"])
        .env("U3DS3_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "dump-config does not touch the thread pool");
    let o = Command::new(env!("CARGO_BIN_EXE_u3ds3"))
        .args(["eval", "--pred", "a", "--gt", "b", "--classes", "2"])
        .env("U3DS3_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn dump_config_layers_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "epochs = 3\nlr = 0.5\n").unwrap();
    let o = u3ds3(&[
        "--config",
        cfg.to_str().unwrap(),
        "--dump-config",
        "train",
        "--data",
        ".",
        "--lr",
        "0.25",
        "--out",
        "x",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("epochs = 3"), "{text}");
    assert!(text.contains("lr = 2.5e-1"), "{text}");
    // The echo is itself a valid config file.
    let echo = dir.path().join("echo.cfg");
    fs::write(&echo, &text).unwrap();
    let again = u3ds3(&["--config", echo.to_str().unwrap(), "--dump-config", "selftest"]);
    assert_eq!(stdout(&again), text);
}

#[test]
fn full_pipeline_on_bundled_spec() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let run = |args: &[&str]| {
        let o = u3ds3(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}\n{}{}", stdout(&o), stderr(&o));
        o
    };
    let spec = data("small.spec");
    let cfg = data("quick.cfg");
    fs::create_dir_all(d("raw")).unwrap();
    for seed in ["1", "2"] {
        run(&["gen-synth", "--spec", &spec, "--seed", seed, "--out", &d(&format!("raw/s{seed}.ply"))]);
        run(&["--config", &cfg, "preprocess", "--in", &d(&format!("raw/s{seed}.ply")), "--out", &d("scenes")]);
        run(&[
            "--config",
            &cfg,
            "superpoints",
            "--in",
            &d(&format!("scenes/s{seed}.ply")),
            "--out",
            &d(&format!("scenes/s{seed}.sp")),
        ]);
    }
    let sp = fs::read_to_string(d("scenes/s1.sp")).unwrap();
    let ids: Vec<u32> = sp.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(ids.iter().max().map(|m| m + 1), Some(12), "gamma from the config file");

    let o = run(&[
        "--config",
        &cfg,
        "train",
        "--data",
        &d("scenes"),
        "--report",
        &d("train.csv"),
        "--out",
        &d("m.ckpt"),
    ]);
    assert!(stdout(&o).contains("epoch   1"), "{}", stdout(&o));
    let train_csv = fs::read_to_string(d("train.csv")).unwrap();
    assert_eq!(train_csv.lines().count(), 3, "{train_csv}");

    run(&["segment", "--ckpt", &d("m.ckpt"), "--in", &d("scenes/s1.ply"), "--sp", &d("scenes/s1.sp"), "--out", &d("pred.ply")]);
    run(&[
        "eval",
        "--pred",
        &d("pred.ply"),
        "--gt",
        &d("scenes/s1.ply"),
        "--classes",
        "4",
        "--epoch",
        "2",
        "--out",
        &d("report.csv"),
    ]);
    let report = fs::read_to_string(d("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "epoch,oAcc,mAcc,mIoU,IoU_0,IoU_1,IoU_2,IoU_3");
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(row.len(), 8);
    assert_eq!(row[0], "2");
    let miou: f64 = row[3].parse().unwrap();
    assert!((0.0..=1.0).contains(&miou));

    run(&["export-ply", "--in", &d("pred.ply"), "--out", &d("colored.ply")]);
    let colored = fs::read_to_string(d("colored.ply")).unwrap();
    assert!(colored.contains("property uchar red"));

    // Same seed, same flags, single thread: identical bytes.
    let args = |out: &str| {
        vec![
            "--config".to_string(),
            cfg.clone(),
            "train".into(),
            "--data".into(),
            d("scenes"),
            "--deterministic".into(),
            "--epochs".into(),
            "1".into(),
            "--out".into(),
            d(out),
        ]
    };
    for out in ["a.ckpt", "b.ckpt"] {
        let a = args(out);
        run(&a.iter().map(String::as_str).collect::<Vec<_>>());
    }
    assert_eq!(fs::read(d("a.ckpt")).unwrap(), fs::read(d("b.ckpt")).unwrap());
}
