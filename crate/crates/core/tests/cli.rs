use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deepmon"))
}

fn data(p: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/warehouse").join(p)
}

fn run(args: &[&str], out: &Path) -> std::process::Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"], d.path()).status.code(), Some(1));
    assert_eq!(run(&["run", "nope.toml", "--mode", "m"], d.path()).status.code(), Some(2));
    assert_eq!(run(&["run", data("scenarios/remove_panel.toml").to_str().unwrap(), "--mode", "x"], d.path()).status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
    let lib = data("library.toml");
    assert_eq!(run(&["lib", "validate", lib.to_str().unwrap()], d.path()).status.code(), Some(0));
    assert_eq!(run(&["vocab", "check", data("vocab.toml").to_str().unwrap()], d.path()).status.code(), Some(0));
    assert_eq!(run(&["plan", lib.to_str().unwrap(), "fetch"], d.path()).status.code(), Some(0));
    let m = run(&["match", lib.to_str().unwrap(), "Holding(robot_hand, brush)"], d.path());
    assert_eq!(m.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&m.stdout).contains("entry fetch"));
}

#[test]
fn report_gate_fails_with_code_3() {
    let d = tempfile::tempdir().unwrap();
    let summary = r#"{"rows":[
        {"task":"a","mode":"Kn","supported":true,"success_rate":0.9},
        {"task":"a","mode":"M","supported":true,"success_rate":0.5},
        {"task":"a","mode":"GPr","supported":true,"success_rate":0.95}],"curve":[]}"#;
    std::fs::write(d.path().join("summary.json"), summary).unwrap();
    let o = run(&["report", d.path().to_str().unwrap()], d.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn same_seed_same_bytes() {
    let sc = data("scenarios/bring_brush.toml");
    let lib = data("library.toml");
    let invocations: Vec<Vec<&str>> = vec![
        vec!["run", sc.to_str().unwrap(), "--mode", "m", "--trials", "3"],
        vec!["datagen", lib.to_str().unwrap(), "--pairs", "300"],
        vec!["train", lib.to_str().unwrap(), "--pairs", "40", "--epochs", "2"],
    ];
    for args in invocations {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let oa = run(&[&args[..], &["--seed", "11"]].concat(), a.path());
        let ob = run(&[&args[..], &["--seed", "11"]].concat(), b.path());
        assert!(oa.status.success(), "{args:?}: {}", String::from_utf8_lossy(&oa.stderr));
        assert_eq!(oa.stdout, ob.stdout);
        let fa = files(a.path());
        assert!(!fa.is_empty());
        assert_eq!(fa, files(b.path()), "{args:?}");
    }
}
