use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "samples_per_class": 3, "frames": 2, "height": 8, "width": 8,
  "d_model": 8, "d_state": 4, "layers": 2, "d_spatial": 4, "d_temporal": 4,
  "n_ifs": 1, "epochs": 2, "warmup_epochs": 1, "batch_size": 4
}"#;

fn ssp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssp"))
        .current_dir(dir)
        .env("SSP_DETERMINISTIC", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let o = ssp(dir.path(), &["gen", "--config", "tiny.json", "--out", "data"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

fn hash_line(o: &Output) -> String {
    stdout(o)
        .lines()
        .find(|l| l.starts_with("index sha256"))
        .unwrap()
        .to_string()
}

#[test]
fn gen_is_deterministic_and_reports_counts() {
    let dir = setup();
    let a = ssp(dir.path(), &["gen", "--config", "tiny.json", "--out", "a"]);
    let b = ssp(dir.path(), &["gen", "--config", "tiny.json", "--out", "b"]);
    assert!(stdout(&a).contains("18 clips, 6 classes"));
    assert_eq!(hash_line(&a), hash_line(&b));
    let c = ssp(
        dir.path(),
        &["gen", "--config", "tiny.json", "--out", "c", "--seed", "5"],
    );
    assert_ne!(hash_line(&a), hash_line(&c));
}

#[test]
fn default_gen_writes_the_full_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let o = ssp(dir.path(), &["gen"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("180 clips, 6 classes, 144 train / 36 val"));
    assert!(dir.path().join("data/index.csv").exists());
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"n_clases": 6}"#).unwrap();
    let o = ssp(dir.path(), &["gen", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_clases"));
    let o = ssp(dir.path(), &["train", "--strategy", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let o = ssp(dir.path(), &["train", "--config", "tiny.json", "--data", "nowhere"]);
    assert_eq!(o.status.code(), Some(4));
    let o = ssp(dir.path(), &["analyze", "norun"]);
    assert_eq!(o.status.code(), Some(4));
    let o = ssp(dir.path(), &["gen", "--config", "absent.json"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn train_eval_analyze_round_trip() {
    let dir = setup();
    let o = ssp(dir.path(), &["train", "--config", "tiny.json", "--out", "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("unchanged"));
    let run = dir.path().join("run");
    for f in [
        "config.json",
        "metrics.csv",
        "freeze_report.csv",
        "checkpoints/best/manifest.txt",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }

    let o = ssp(dir.path(), &["eval", "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("top1"));

    let o = ssp(dir.path(), &["analyze", "run", "--paths", "--gates", "--decay"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let exports = run.join("exports");
    let gates = fs::read_to_string(exports.join("gates_layer0.csv")).unwrap();
    assert_eq!(gates.lines().count(), 1 + 2 * 4);
    assert!(exports.join("paths.csv").exists());
    assert!(exports.join("decay_layer1_ch15.csv").exists());
    assert!(!run.join("layer0_prompts.csv").exists());

    let o = ssp(dir.path(), &["analyze", "run", "--prompts"]);
    assert!(o.status.success());
    assert!(run.join("layer1_prompts.csv").exists());
}

#[test]
fn promptless_paths_span_the_sequence() {
    let dir = setup();
    fs::write(
        dir.path().join("plain.json"),
        TINY.replace("\"n_ifs\": 1", "\"n_ifs\": 1, \"use_ifs\": false, \"use_ifg\": false"),
    )
    .unwrap();
    let o = ssp(
        dir.path(),
        &["train", "--config", "plain.json", "--out", "plain", "--epochs", "1"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = ssp(dir.path(), &["analyze", "plain", "--paths"]);
    // S = 1 + T·N = 9
    assert!(
        stdout(&o).contains("max hop count over the sequence: 8"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn zero_lr_keeps_initial_parameters_and_runs_repeat_bitwise() {
    let dir = setup();
    let o = ssp(
        dir.path(),
        &[
            "train",
            "--config",
            "tiny.json",
            "--out",
            "z",
            "--lr",
            "0",
            "--policy",
            "full",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = dir.path().join("z/checkpoints");
    let manifest = fs::read_to_string(ck.join("init/manifest.txt")).unwrap();
    for line in manifest.lines() {
        let file = line.split('\t').nth(1).unwrap();
        assert_eq!(
            fs::read(ck.join("init").join(file)).unwrap(),
            fs::read(ck.join("final").join(file)).unwrap()
        );
    }

    let a = ssp(
        dir.path(),
        &["train", "--config", "tiny.json", "--out", "r1", "--seed", "3"],
    );
    let b = ssp(
        dir.path(),
        &["train", "--config", "tiny.json", "--out", "r2", "--seed", "3"],
    );
    assert!(a.status.success() && b.status.success());
    let m1 = fs::read(dir.path().join("r1/metrics.csv")).unwrap();
    let m2 = fs::read(dir.path().join("r2/metrics.csv")).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn ablation_grid_has_eight_arms_per_seed() {
    let dir = setup();
    let o = ssp(
        dir.path(),
        &[
            "ablate",
            "--config",
            "tiny.json",
            "--out",
            "abl",
            "--seeds",
            "2",
            "--epochs",
            "1",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.path().join("abl/ablation/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 8 * 2);
    let summary = fs::read_to_string(dir.path().join("abl/ablation/ablation_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 8);

    let o = ssp(
        dir.path(),
        &[
            "ablate",
            "--config",
            "tiny.json",
            "--out",
            "st",
            "--seeds",
            "1",
            "--epochs",
            "1",
            "--strategies",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.path().join("st/strategies/strategies.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);
}
