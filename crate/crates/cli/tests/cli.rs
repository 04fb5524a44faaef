use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clbench::harness::{read_record, RunRecord};

fn clb() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_clb"));
    cmd.env_remove("CLB_SEED");
    cmd
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn spec(name: &str) -> PathBuf {
    workspace().join("specs").join(name)
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "clb failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn records_in(dir: &Path) -> Vec<RunRecord> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_record(p).unwrap()).collect()
}

fn write_spec(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("spec.toml");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn repeated_runs_give_identical_records() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&clb()
            .args(["run", "--desk", "--spec"])
            .arg(spec("berr-nic.toml"))
            .arg("--out")
            .arg(dir)
            .output()
            .unwrap());
    }
    let (ra, rb) = (records_in(&a), records_in(&b));
    assert_eq!(ra.len(), 5);
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(x.fingerprint().unwrap(), y.fingerprint().unwrap());
        assert_eq!(x.without_wall_clock(), y.without_wall_clock());
    }
}

#[test]
fn seed_env_overrides_spec_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&clb()
        .env("CLB_SEED", "17")
        .args(["run", "--desk", "--spec"])
        .arg(spec("naive-nic.toml"))
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap());
    let recs = records_in(tmp.path());
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].seed, 17);

    let bad = clb()
        .env("CLB_SEED", "seventeen")
        .args(["run", "--desk", "--spec"])
        .arg(spec("naive-nic.toml"))
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn all_track_writes_children_and_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&clb()
        .args(["run", "--desk", "--spec"])
        .arg(spec("drl-all.toml"))
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap());
    let recs = records_in(tmp.path());
    assert_eq!(recs.len(), 4);
    let agg = recs.iter().find(|r| r.log.is_none()).unwrap();
    let children: Vec<_> = recs.iter().filter(|r| r.log.is_some()).collect();
    assert_eq!(children.len(), 3);
    let mean = children.iter().map(|r| r.metrics.test_acc).sum::<f64>() / 3.0;
    assert!((agg.metrics.test_acc - mean).abs() < 1e-12);
    assert!(agg.stream_hash.is_none());

    let report = tmp.path().join("report");
    let child_paths: Vec<PathBuf> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    ok(&clb().arg("report").args(&child_paths).arg("--out").arg(&report).output().unwrap());
    let series = std::fs::read_to_string(report.join("series.csv")).unwrap();
    let batches: usize = children.iter().map(|r| r.log.as_ref().unwrap().val_acc.len()).sum();
    assert_eq!(series.lines().count(), batches + 1);
    let alignment = std::fs::read_to_string(report.join("alignment.csv")).unwrap();
    assert!(alignment.lines().count() > 1);
}

#[test]
fn score_fixture_and_records() {
    let tmp = tempfile::tempdir().unwrap();
    let out = clb()
        .args(["score", "--fixture"])
        .arg(workspace().join("tables/ni.csv"))
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().next().unwrap().contains("UT_LG"));
    assert!(tmp.path().join("scoreboard-ni.csv").exists());

    let runs = tmp.path().join("runs");
    for s in ["naive-nic.toml", "berr-nic.toml"] {
        ok(&clb()
            .env("CLB_SEED", "3")
            .args(["run", "--desk", "--spec"])
            .arg(spec(s))
            .arg("--out")
            .arg(&runs)
            .output()
            .unwrap());
    }
    let paths: Vec<PathBuf> = std::fs::read_dir(&runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    ok(&clb().arg("score").args(&paths).arg("--out").arg(tmp.path()).output().unwrap());
    let board = std::fs::read_to_string(tmp.path().join("scoreboard.csv")).unwrap();
    assert_eq!(board.lines().count(), 3);
    assert!(board.lines().nth(1).unwrap().contains("berr"));

    ok(&clb().arg("report").args(&paths).arg("--out").arg(tmp.path()).output().unwrap());
    let paired = std::fs::read_to_string(tmp.path().join("paired.csv")).unwrap();
    assert!(paired.lines().any(|l| l.contains(",mean,")));
}

#[test]
fn score_rejects_mixed_tracks_and_empty_input() {
    let tmp = tempfile::tempdir().unwrap();
    for s in ["naive-nic.toml", "naive-mtnc.toml"] {
        ok(&clb()
            .env("CLB_SEED", "0")
            .args(["run", "--desk", "--spec"])
            .arg(spec(s))
            .arg("--out")
            .arg(tmp.path())
            .output()
            .unwrap());
    }
    let paths: Vec<PathBuf> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    let mixed = clb().arg("score").args(&paths).arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(mixed.status.code(), Some(2));

    let empty = clb().arg("score").output().unwrap();
    assert_eq!(empty.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&empty.stderr).contains("--fixture"));
}

#[test]
fn budget_abort_exits_three_and_flags_record() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_spec(
        tmp.path(),
        "name = \"tiny\"\ntrack = \"ni\"\nseeds = [0]\n[strategy]\nkind = \"naive\"\n[budget]\nmax_steps = 1\n",
    );
    let out = clb()
        .args(["run", "--desk", "--spec"])
        .arg(&path)
        .arg("--out")
        .arg(tmp.path().join("r"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let recs = records_in(&tmp.path().join("r"));
    assert_eq!(recs.len(), 1);
    assert!(recs[0].over_budget);
}

#[test]
fn invalid_specs_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        "track = \"ni\"\nbogus = 1\n",
        "track = \"ni\"\nseeds = []\n",
        "track = \"nic\"\n[strategy]\nkind = \"multihead\"\n",
        "track = \"ni\"\n[strategy]\nkind = \"drl\"\n[strategy.drl]\nlambda = -1.0\n",
    ];
    for body in cases {
        let path = write_spec(tmp.path(), body);
        let out = clb()
            .args(["run", "--desk", "--spec"])
            .arg(&path)
            .arg("--out")
            .arg(tmp.path())
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(2), "{body}");
    }
    let missing = clb()
        .args(["run", "--spec"])
        .arg(tmp.path().join("nope.toml"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(5));
}

#[test]
fn gen_stream_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (path, seed) in [(&a, "4"), (&b, "4"), (&c, "5")] {
        ok(&clb()
            .args(["gen-stream", "--protocol", "nic", "--desk", "--seed", seed, "--out"])
            .arg(path)
            .output()
            .unwrap());
    }
    let (ba, bb, bc) = (
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        std::fs::read(&c).unwrap(),
    );
    assert_eq!(ba, bb);
    assert_ne!(ba, bc);
    assert_eq!(&ba[..4], b"CLB1");
}
