//! Command-line behaviour: exit codes, determinism of `synth`, inference
//! output.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn forgeloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forgeloc")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn usage_errors_exit_with_2() {
    let out = forgeloc(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = forgeloc(&[]);
    assert_eq!(out.status.code(), Some(2));
    let out = forgeloc(&["eval", "--checkpoint", "/nonexistent/x.ckpt", "--data", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent"));
}

#[test]
fn synth_with_the_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = forgeloc(&["synth", "--out", p(out), "--seed", "7", "--train", "6", "--val", "2", "--test", "2", "--size", "32"]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key("train/manifest.jsonl"));
    assert_eq!(ta, tb);
}

#[test]
fn gradcheck_passes_and_exits_0() {
    let out = forgeloc(&["gradcheck", "--trials", "2", "--coords", "4"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn train_then_infer_writes_a_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let r = forgeloc(&["synth", "--out", p(&data), "--train", "4", "--val", "2", "--test", "2", "--size", "32"]);
    assert!(r.status.success());
    let r = forgeloc(&["--deterministic", "train", "--data", p(&data), "--out", p(&run), "--epochs", "1", "--batch-size", "2"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["best.ckpt", "last.ckpt", "epochs.csv", "steps.csv", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let image = std::fs::read_dir(data.join("test/images")).unwrap().next().unwrap().unwrap().path();
    let heat = dir.path().join("heat.png");
    let r = forgeloc(&["infer", "--checkpoint", p(&run.join("best.ckpt")), "--image", p(&image), "--out", p(&heat)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let prob: f64 = String::from_utf8_lossy(&r.stdout).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&prob));
    let (w, h) = image_size(&heat);
    assert_eq!((w, h), (32, 32));

    let json = dir.path().join("m.json");
    let r = forgeloc(&["eval", "--checkpoint", p(&run.join("best.ckpt")), "--data", p(&data), "--json", p(&json)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(report["n_images"], 2);
}

/// Width and height from a PNG header.
fn image_size(path: &Path) -> (u32, u32) {
    let b = std::fs::read(path).unwrap();
    assert_eq!(&b[1..4], b"PNG");
    let be = |o: usize| u32::from_be_bytes(b[o..o + 4].try_into().unwrap());
    (be(16), be(20))
}
