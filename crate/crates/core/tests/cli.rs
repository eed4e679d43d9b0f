use std::path::Path;
use std::process::{Command, Output};

const RUN: &str = r#"{"seed": 3, "preset": "tiny", "train": {"steps": 5}, "teacher_train": {"steps": 5},
    "corpus": {"samples": 3, "min_len": 3, "max_len": 5, "max_duration": 3}}"#;

fn fastmel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastmel"))
        .current_dir(dir)
        .env_remove("FASTMEL_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), RUN).unwrap();
    dir
}

#[test]
fn config_errors_exit_2() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.json"), r#"{"sed": 1}"#).unwrap();
    let o = fastmel(dir.path(), &["--config", "bad.json", "gen-corpus"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sed"));

    let o = fastmel(dir.path(), &["--config", "run.json", "train"]);
    assert_eq!(code(&o), 2, "missing manifest");
    let o = fastmel(dir.path(), &["--config", "run.json", "not-a-command"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupt_data_exits_3() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&fastmel(d, &["--config", "run.json", "gen-corpus"])), 0);
    let manifest = std::fs::read_to_string(d.join("out/manifest.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let mel = d.join("out").join(first["mel_path"].as_str().unwrap());
    let bytes = std::fs::read(&mel).unwrap();
    std::fs::write(&mel, &bytes[..bytes.len() - 3]).unwrap();
    let o = fastmel(d, &["--config", "run.json", "train", "--manifest", "out/manifest.jsonl"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_synthesize_and_seed_override() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&fastmel(d, &["--config", "run.json", "gen-corpus"])), 0);
    let o = fastmel(d, &["--config", "run.json", "train", "--manifest", "out/manifest.jsonl"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("out/train_loss.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,lr,total,mel,duration");
    assert_eq!(csv.lines().count(), 6);

    std::fs::write(d.join("p.txt"), "1 2 3").unwrap();
    let synth = |extra: &[&str]| {
        let mut args = vec!["--config", "run.json", "synthesize", "--checkpoint", "out/student.ckpt", "--phonemes", "p.txt"];
        args.extend_from_slice(extra);
        fastmel(d, &args)
    };
    assert_eq!(code(&synth(&["--alpha", "0"])), 2);
    assert_eq!(code(&synth(&["--alpha", "1.2"])), 0);

    let seeded = Command::new(env!("CARGO_BIN_EXE_fastmel"))
        .current_dir(d)
        .env("FASTMEL_SEED", "99")
        .args(["--config", "run.json", "--out-dir", "seeded", "gen-corpus"])
        .output()
        .unwrap();
    assert_eq!(code(&seeded), 0);
    let a = std::fs::read(d.join("out/manifest.jsonl")).unwrap();
    let b = std::fs::read(d.join("seeded/manifest.jsonl")).unwrap();
    assert_ne!(a, b, "FASTMEL_SEED must change the corpus");
}
