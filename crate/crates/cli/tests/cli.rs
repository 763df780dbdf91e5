use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_safety-net"));
    c.env_remove("SAFETY_NET_THREADS");
    c
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().arg("--out").arg(out).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_dirs(out: &Path) -> Vec<PathBuf> {
    let Ok(rd) = fs::read_dir(out) else {
        return Vec::new();
    };
    let mut v: Vec<PathBuf> = rd.map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn only_dir(out: &Path, prefix: &str) -> PathBuf {
    let dirs: Vec<PathBuf> = run_dirs(out)
        .into_iter()
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

#[test]
fn missing_config_fails_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = run(&out, &["numeric", "no/such/config.json"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no/such/config.json"), "{}", stderr(&o));
    assert!(run_dirs(&out).is_empty());
}

#[test]
fn config_errors_name_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, "{\n  \"version\": 1,\n  \"epochs\": 3\n}\n").unwrap();
    let out = tmp.path().join("runs");
    let o = run(&out, &["train", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.json:3:"), "{}", stderr(&o));
    assert!(run_dirs(&out).is_empty());
}

#[test]
fn unknown_preset_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["mc-oracle", "preset:nope"]);
    assert!(!o.status.success());
}

#[test]
fn bad_thread_count_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin()
        .env("SAFETY_NET_THREADS", "zero")
        .args(["--out", tmp.path().to_str().unwrap(), "presets"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("SAFETY_NET_THREADS"));
}

#[test]
fn zero_flow_numeric_keeps_the_initial_contour_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = run(
        &out,
        &["--deterministic", "numeric", "preset:zero_flow_debug"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_dir(&out, "numeric-zero_flow_debug-");
    let t0 = dir.join("numeric_t0.json");
    let t1 = dir.join("numeric_t1.json");
    assert!(t0.exists() && t1.exists() && dir.join("numeric_t1.csv").exists());

    let o = run(
        &out,
        &["compare", t0.to_str().unwrap(), t1.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("agreement 1.0000"), "{}", stdout(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(only_dir(&out, "compare-").join("compare.json")).unwrap())
            .unwrap();
    assert_eq!(report["agreement"], 1.0);
    assert_eq!(report["symmetric_difference"], 0.0);

    let first = fs::read(dir.join("manifest.json")).unwrap();
    let o = run(
        &out,
        &["--deterministic", "numeric", "preset:zero_flow_debug"],
    );
    assert!(o.status.success());
    assert_eq!(fs::read(dir.join("manifest.json")).unwrap(), first);
    let m: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(m["deterministic"], true);
    assert_eq!(m["threads"], 1);
    assert!(m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .any(|f| f["path"] == "numeric_t1.json"));
}

#[test]
fn train_eval_resume_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = run(
        &out,
        &["--deterministic", "train", "preset:toy_1d", "--epochs", "4"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_dir(&out, "train-toy_1d-");
    let csv = fs::read_to_string(dir.join("loss_history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let ckpt = dir.join("final.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();

    let o = run(&out, &["eval", ckpt_s, "preset:toy_1d", "--times", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval = only_dir(&out, "eval-toy_1d-");
    for name in [
        "profile_t0.csv",
        "profile_t1.csv",
        "profile_t2.csv",
        "eval_loss.json",
    ] {
        assert!(eval.join(name).exists(), "{name}");
    }

    // Same config, same checkpoint: the rerun reproduces the run bit for bit.
    let before = fs::read(dir.join("final.ckpt")).unwrap();
    let o = run(
        &out,
        &[
            "--deterministic",
            "rerun",
            dir.join("manifest.json").to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(dir.join("final.ckpt")).unwrap(), before);

    let o = run(
        &out,
        &[
            "--deterministic",
            "train",
            "preset:toy_1d",
            "--epochs",
            "6",
            "--resume",
            ckpt_s,
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let resumed = run_dirs(&out)
        .into_iter()
        .filter(|p| {
            p.file_name()
                .unwrap()
                .to_string_lossy()
                .starts_with("train-toy_1d-")
                && *p != dir
        })
        .collect::<Vec<_>>();
    assert_eq!(resumed.len(), 1);
    let csv = fs::read_to_string(resumed[0].join("loss_history.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("5,"), "{csv}");
}

#[test]
fn eval_rejects_a_checkpoint_of_another_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    assert!(run(&out, &["train", "preset:toy_1d", "--epochs", "1"])
        .status
        .success());
    let ckpt = only_dir(&out, "train-").join("final.ckpt");
    let o = run(
        &out,
        &["eval", ckpt.to_str().unwrap(), "preset:zero_flow_debug"],
    );
    assert!(!o.status.success());
    assert!(run_dirs(&out)
        .iter()
        .all(|p| !p.to_string_lossy().contains("eval-")));
}

#[test]
fn presets_are_listed_and_written() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["presets"]);
    assert!(stdout(&o).lines().any(|l| l == "ex2a_pendulum"));
    let dir = tmp.path().join("cfg");
    let o = run(tmp.path(), &["presets", "--write", dir.to_str().unwrap()]);
    assert!(o.status.success());
    let o = run(
        &tmp.path().join("runs"),
        &[
            "numeric",
            dir.join("zero_flow_debug.json").to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}
