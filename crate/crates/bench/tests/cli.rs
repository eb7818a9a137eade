use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn epochkey(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epochkey"))
        .arg("--dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = epochkey(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn store_retrieve_revoke_rollover_rotate() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = tmp.path().join("ws");
    let file = tmp.path().join("note.txt");
    fs::write(&file, b"maintenance window at 02:00").unwrap();

    assert!(epochkey(&ws, &["init", "--seed", "5"]).status.success());
    assert_eq!(epochkey(&ws, &["init"]).status.code(), Some(2), "re-init without --force");
    ok_json(&ws, &["enroll", "alice", "role=admin", "site=hq"]);
    ok_json(&ws, &["enroll", "bob", "role=maintainer", "site=hq"]);

    let policy = "(role=admin OR role=maintainer) AND site=hq";
    let stored = ok_json(&ws, &["store", "--owner", "alice", "--policy", policy, file.to_str().unwrap()]);
    let cid = stored["cid"].as_str().unwrap().to_string();
    assert_eq!(stored["epoch"], 0);

    for who in ["alice", "bob"] {
        let out = epochkey(&ws, &["retrieve", "--principal", who, "--cid", &cid]);
        assert!(out.status.success(), "{who}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(out.stdout, b"maintenance window at 02:00");
    }

    assert!(epochkey(&ws, &["revoke", "bob"]).status.success());
    assert_eq!(ok_json(&ws, &["rollover"])["epoch"], 1);
    let rotated = ok_json(&ws, &["rotate", "--cid", &cid]);
    assert_eq!(rotated["epoch"], 1);

    let alice = epochkey(&ws, &["retrieve", "--principal", "alice", "--cid", &cid]);
    assert!(alice.status.success());
    assert_eq!(alice.stdout, b"maintenance window at 02:00");
    // bob still holds his epoch 0 key file but it no longer satisfies the latest CK
    let bob = epochkey(&ws, &["retrieve", "--principal", "bob", "--cid", &cid]);
    assert_eq!(bob.status.code(), Some(2));

    let gw = epochkey(&ws, &["gateway-retrieve", "--principal", "alice", "--cid", &cid, "--slowdown", "2"]);
    assert!(gw.status.success());
    assert_eq!(gw.stdout, b"maintenance window at 02:00");

    let verified = ok_json(&ws, &["ledger", "verify"]);
    assert!(verified.to_string().contains("ok") || verified.to_string().contains("Ok"), "{verified}");

    let seg = ws.join("store").join("ledger.seg");
    let mut bytes = fs::read(&seg).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&seg, bytes).unwrap();
    let out = epochkey(&ws, &["ledger", "verify"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn bench_writes_results_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("results");
    let run = epochkey(tmp.path(), &["bench", "exp7", "--out", out.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for name in ["exp7.csv", "exp7_success.csv", "exp7.json", "manifest.json"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 3);
}

#[test]
fn unknown_experiment_mode_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = epochkey(tmp.path(), &["bench", "exp1", "--mode", "simulated"]);
    assert!(!out.status.success());
}
