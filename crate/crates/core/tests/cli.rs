use std::path::Path;
use std::process::{Command, Output};

fn ulda(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ulda"))
        .current_dir(cwd)
        .env_remove("ULDA_OUT")
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small corpus and backbone so each invocation takes a few seconds.
const SMALL: [&str; 6] = [
    "--set",
    "data.synthetic.classes=30",
    "--set",
    "data.synthetic.train_classes=20",
    "--set",
    "train.filters=16",
];

fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train",
        "--out",
        out,
        "--episodes-per-epoch",
        "50",
        "--epochs",
        "2",
        "--seed",
        "7",
    ];
    v.extend(SMALL);
    v.extend(extra);
    v
}

#[test]
fn train_writes_log_and_checkpoint_inside_out_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = ulda(dir.path(), &train_args("run", &[]));
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let log = std::fs::read_to_string(run.join("runlog.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    assert!(run.join("last.ckpt").exists() && run.join("config.txt").exists());
    let top: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(top, vec!["run"]);
}

#[test]
fn printed_configuration_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = ulda(dir.path(), &train_args("a", &[]));
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let printed: String = stdout
        .lines()
        .skip(1)
        .take_while(|l| !l.starts_with("epoch "))
        .map(|l| format!("{l}\n"))
        .collect();
    assert_eq!(
        printed,
        std::fs::read_to_string(dir.path().join("a/config.txt")).unwrap()
    );
    std::fs::write(dir.path().join("printed.txt"), &printed).unwrap();

    let o = ulda(
        dir.path(),
        &["train", "--out", "b", "--config", "printed.txt"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/runlog.csv"), read("b/runlog.csv"));
    assert_eq!(read("a/last.ckpt"), read("b/last.ckpt"));
}

#[test]
fn eval_then_diagnose_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ulda(dir.path(), &train_args("t", &[])).status.success());
    let mut eval = vec![
        "eval",
        "--out",
        "e",
        "--checkpoint",
        "t/last.ckpt",
        "--set",
        "eval.episodes=40",
    ];
    eval.extend(SMALL);
    let o = ulda(dir.path(), &eval);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("e/eval.json")).unwrap())
            .unwrap();
    assert_eq!(json["episode_count"], 40);

    let mut diag = vec![
        "diagnose",
        "--out",
        "d",
        "--checkpoint",
        "t/last.ckpt",
        "--pairs",
        "TA:TA,AA:R+TA",
    ];
    diag.extend(SMALL);
    diag.extend(["--set", "diagnose.samples=60"]);
    let o = ulda(dir.path(), &diag);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("d/diagnose.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn missing_checkpoint_fails_without_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = ulda(
        dir.path(),
        &["eval", "--out", "e", "--checkpoint", "nope.ckpt"],
    );
    assert_eq!(o.status.code(), Some(5));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=io code=5: "), "{err}");
    assert!(!dir.path().join("e/eval.json").exists());
}

#[test]
fn error_kinds_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ulda(dir.path(), &["train", "--out", "x", "--aug-support", "XX"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error kind=unknown_preset code=4"));

    let o = ulda(
        dir.path(),
        &["train", "--out", "x", "--set", "no.such.key=1"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = ulda(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pack_and_preview_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let class = dir.path().join("raw/train/a");
    std::fs::create_dir_all(&class).unwrap();
    std::fs::write(class.join("0.pgm"), b"P5\n2 2\n255\n\x00\x40\x80\xff").unwrap();
    let o = ulda(dir.path(), &["pack", "--out", "packed", "--input", "raw"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("packed/train.bin").exists());

    let mut preview = vec!["preview", "--out", "p", "--set", "preview.sets=TA,TIMsub"];
    preview.extend(SMALL);
    let o = ulda(dir.path(), &preview);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("p/preview_ta.pgm").exists());
    assert!(dir.path().join("p/preview_timsub.pgm").exists());
}
