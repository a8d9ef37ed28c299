use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_generalist"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn train_evaluate_attack_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let out = bin(&["train", "--config", s(&smoke()), "--seed", "3", "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let full = lines(&a.join("metrics.jsonl"));
    assert_eq!(full.len(), 4);
    for f in ["epoch_0002.ckpt", "epoch_0004.ckpt", "final.ckpt", "history.jsonl"] {
        assert!(a.join(f).exists(), "{f}");
    }

    // resume into a fresh directory: only the remaining epochs
    let b = dir.path().join("b");
    let out = bin(&["train", "--checkpoint", s(&a.join("epoch_0002.ckpt")), "--out", s(&b)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&b.join("metrics.jsonl")), full[2..]);
    assert_eq!(fs::read(b.join("final.ckpt")).unwrap(), fs::read(a.join("final.ckpt")).unwrap());

    // resume into a directory holding the earlier lines keeps them
    let c = dir.path().join("c");
    fs::create_dir(&c).unwrap();
    fs::write(c.join("metrics.jsonl"), full.join("\n") + "\n").unwrap();
    let out = bin(&["train", "--checkpoint", s(&a.join("epoch_0002.ckpt")), "--out", s(&c)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(lines(&c.join("metrics.jsonl")), full);

    let rec = dir.path().join("eval.jsonl");
    let out = bin(&["evaluate", "--checkpoint", s(&a.join("final.ckpt")), "--out", s(&rec)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("pgd_linf"));
    assert_eq!(lines(&rec), full[3..]);

    let csv = dir.path().join("adv.csv");
    let out = bin(&["attack", "--checkpoint", s(&a.join("final.ckpt")), "--out", s(&csv), "--norm", "l2"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = lines(&csv);
    assert_eq!(rows[0], "label,x0,x1");
    assert_eq!(rows.len(), 201);
}

#[test]
fn compare_writes_one_row_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cmp.csv");
    let out = bin(&["compare", "--config", s(&smoke()), "--methods", "at_vanilla,generalist_t", "--out", s(&csv)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = lines(&csv);
    assert_eq!(rows[0], "method,natural,pgd_linf,pgd_l2,union");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("at_vanilla,"));
    assert!(rows[2].starts_with("generalist_t,"));
}

#[test]
fn verify_theory_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["verify-theory", "--trials", "4", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("bound violation fraction"));
    for f in ["bound_report.json", "mixing_lemma.json", "stability.json"] {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(f)).unwrap()).unwrap();
        assert!(v.is_object(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let out = bin(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochz = 3\n").unwrap();
    assert_eq!(bin(&["train", "--config", s(&bad), "--out", s(dir.path())]).status.code(), Some(1));
    fs::write(&bad, "method = \"nope\"\n").unwrap();
    assert_eq!(bin(&["compare", "--config", s(&bad)]).status.code(), Some(1));
    assert_eq!(bin(&["compare", "--config", s(&smoke()), "--methods", "nope"]).status.code(), Some(1));
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(bin(&["evaluate", "--checkpoint", s(&missing)]).status.code(), Some(2));
    fs::write(&missing, b"GNRLCKPT\x01garbage").unwrap();
    assert_eq!(bin(&["evaluate", "--checkpoint", s(&missing)]).status.code(), Some(2));
    assert_eq!(
        bin(&["train", "--checkpoint", s(&missing), "--seed", "1", "--out", s(dir.path())]).status.code(),
        Some(1)
    );
}
