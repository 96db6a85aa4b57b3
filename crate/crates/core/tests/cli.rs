use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use annealvq::meta::Meta;

const BIN: &str = env!("CARGO_BIN_EXE_annealvq");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

fn csv_rows(path: PathBuf) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn distortion_of(stdout: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("distortion="))
        .expect("distortion line")
        .parse()
        .unwrap()
}

/// gen → ground-truth → train for a 10k synthetic config.
fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "# smoke config\nn = 10000\nnq = 100\nd = 32\nm = 4\nk = 16\nsweeps = 2\nseed = 5\n").unwrap();
    ok(d, &["--config", "run.cfg", "gen", "--base", "base.fvecs", "--queries", "q.fvecs"]);
    ok(d, &["--config", "run.cfg", "ground-truth", "--base", "base.fvecs", "--queries", "q.fvecs", "--ground-truth", "gt.ivecs"]);
    ok(d, &["--config", "run.cfg", "train", "--base", "base.fvecs", "--codebook", "cb.hclb"]);
    dir
}

#[test]
fn end_to_end_pipeline() {
    let start = std::time::Instant::now();
    let dir = prepared();
    let d = dir.path();
    let log: Vec<f64> = csv_rows(d.join("cb.hclb.train.csv")).iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(log.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-6)), "{log:?}");

    let enc = ok(d, &["--config", "run.cfg", "encode", "--codebook", "cb.hclb", "--base", "base.fvecs", "--codes", "c.hcle"]);
    assert!(distortion_of(&enc) > 0.0);
    ok(d, &["build-tree", "--codebook", "cb.hclb", "--codes", "c.hcle", "--tree", "t.hclt"]);
    ok(d, &["search", "--codebook", "cb.hclb", "--tree", "t.hclt", "--queries", "q.fvecs", "--l0", "4", "--out", "s.csv"]);
    let rows = csv_rows(d.join("s.csv"));
    assert_eq!(rows.len(), 100 * 100);
    assert_eq!(csv_rows(d.join("s.csv.stats.csv")).len(), 100);

    ok(d, &[
        "eval", "--codebook", "cb.hclb", "--tree", "t.hclt", "--queries", "q.fvecs", "--ground-truth", "gt.ivecs",
        "--l0-list", "1,2,4", "--out", "eval.csv",
    ]);
    let rows = csv_rows(d.join("eval.csv"));
    assert_eq!(rows.len(), 3);
    let recall: Vec<f64> = rows.iter().map(|r| r[7].parse().unwrap()).collect();
    assert!(recall.windows(2).all(|w| w[1] >= w[0]), "{recall:?}");
    let json: serde_json::Value = serde_json::from_slice(&read(d, "eval.csv.json")).unwrap();
    assert_eq!(json["reports"].as_array().unwrap().len(), 3);
    assert_eq!(json["reports"][0]["params"]["config.seed"], "0");

    ok(d, &["diagnose", "--codes", "c.hcle", "--out", "mi.csv", "--ground-truth", "gt.ivecs"]);
    assert_eq!(csv_rows(d.join("mi.csv")).len(), 4);
    assert_eq!(csv_rows(d.join("mi.csv.locality.csv")).len(), 4);

    for artifact in ["base.fvecs", "gt.ivecs", "cb.hclb", "c.hcle", "t.hclt", "s.csv", "eval.csv", "mi.csv"] {
        let meta = Meta::read(d.join(format!("{artifact}.meta"))).unwrap();
        assert!(meta.get("seed").is_some(), "{artifact} meta lacks the seed");
    }
    assert_eq!(Meta::read(d.join("cb.hclb.meta")).unwrap().get("seed"), Some("5"));
    assert!(start.elapsed().as_secs() < 300);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &["--config", "run.cfg", "train", "--base", "base.fvecs", "--codebook", "cb2.hclb"]);
    assert_eq!(read(d, "cb.hclb"), read(d, "cb2.hclb"));
    for tag in ["a", "b"] {
        ok(d, &["encode", "--codebook", "cb.hclb", "--base", "base.fvecs", "--codes", &format!("c{tag}.hcle")]);
        ok(d, &["build-tree", "--codebook", "cb.hclb", "--codes", &format!("c{tag}.hcle"), "--tree", &format!("t{tag}.hclt")]);
    }
    assert_eq!(read(d, "ca.hcle"), read(d, "cb.hcle"));
    assert_eq!(read(d, "ta.hclt"), read(d, "tb.hclt"));
}

#[test]
fn wider_beam_does_not_raise_distortion() {
    let dir = prepared();
    let d = dir.path();
    let narrow = distortion_of(&ok(d, &["encode", "--codebook", "cb.hclb", "--base", "base.fvecs", "--codes", "c1.hcle", "--beam", "1"]));
    let wide = distortion_of(&ok(d, &["encode", "--codebook", "cb.hclb", "--base", "base.fvecs", "--codes", "c16.hcle", "--beam", "16"]));
    assert!(wide <= narrow, "{wide} > {narrow}");
}

#[test]
fn unbounded_search_matches_exhaustive_output() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &["encode", "--codebook", "cb.hclb", "--base", "base.fvecs", "--codes", "c.hcle"]);
    ok(d, &["build-tree", "--codebook", "cb.hclb", "--codes", "c.hcle", "--tree", "t.hclt"]);
    ok(d, &["search", "--codebook", "cb.hclb", "--tree", "t.hclt", "--queries", "q.fvecs", "--unbounded", "--r", "20", "--out", "u.csv"]);
    ok(d, &["search", "--codebook", "cb.hclb", "--codes", "c.hcle", "--queries", "q.fvecs", "--exhaustive", "--r", "20", "--out", "e.csv"]);
    assert_eq!(read(d, "u.csv"), read(d, "e.csv"));
}

#[test]
fn online_training_writes_one_checkpoint_per_batch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--base", "b1.fvecs", "--n", "2000", "--nq", "0", "--d", "8", "--seed", "1"]);
    ok(d, &["gen", "--base", "b2.fvecs", "--n", "2000", "--nq", "0", "--d", "8", "--seed", "2"]);
    ok(d, &["train", "--mode", "online", "--batches", "b1.fvecs,b2.fvecs", "--codebook", "on.hclb", "--m", "2", "--k", "8"]);
    for i in 1..=2 {
        assert!(d.join(format!("on.hclb.ckpt{i}")).exists());
        let meta = Meta::read(d.join(format!("on.hclb.ckpt{i}.meta"))).unwrap();
        assert!(meta.get("distortion").is_some() && meta.get("seed").is_some());
    }
    assert!(!d.join("on.hclb.ckpt3").exists());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--base", "b.fvecs", "--n", "500", "--nq", "0", "--d", "4"]);

    let out = run(d, &["train", "--base", "missing.fvecs", "--codebook", "x.hclb", "--m", "2", "--k", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.fvecs"));

    std::fs::write(d.join("bad.hclb"), b"NOPE\x01\x00\x00\x00garbage").unwrap();
    let out = run(d, &["encode", "--codebook", "bad.hclb", "--base", "b.fvecs", "--codes", "c.hcle"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("HCLB") && err.contains("NOPE"), "{err}");

    ok(d, &["train", "--base", "b.fvecs", "--codebook", "cb.hclb", "--m", "2", "--k", "4", "--sweeps", "1"]);
    let full = read(d, "cb.hclb");
    std::fs::write(d.join("short.hclb"), &full[..full.len() - 7]).unwrap();
    let out = run(d, &["encode", "--codebook", "short.hclb", "--base", "b.fvecs", "--codes", "c.hcle"]);
    assert_eq!(out.status.code(), Some(3));

    std::fs::write(d.join("bad.cfg"), "m = 2\nunknown_key = 1\n").unwrap();
    assert_eq!(run(d, &["--config", "bad.cfg", "encode"]).status.code(), Some(2));
    assert_eq!(run(d, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(d, &["search", "--exhaustive", "--unbounded"]).status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.cfg"), "n = 300\nd = 3\nnq = 0\nseed = 9\n").unwrap();
    ok(d, &["--config", "c.cfg", "gen", "--base", "b.fvecs", "--n", "200"]);
    let meta = Meta::read(d.join("b.fvecs.meta")).unwrap();
    assert_eq!(meta.get("n"), Some("200"));
    assert_eq!(meta.get("seed"), Some("9"));
    assert_eq!(annealvq::data_io::read_fvecs(d.join("b.fvecs")).unwrap().len(), 200);
}
