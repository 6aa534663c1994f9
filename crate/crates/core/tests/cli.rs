use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gafsv::gafenc::io::read_pgm;
use gafsv::verify::EvalReport;

const BIN: &str = env!("CARGO_BIN_EXE_gafsv");

const TINY: &str = "M = 32
branch_channels = 4,8
d = 16
heads = 2
self_attn_layers = 1
d_z = 8
writers_per_step = 3
extra_genuine = 1
forgeries_per_step = 2
steps = 4
";

fn gafsv(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("run gafsv")
}

fn ok(args: &[&str]) -> String {
    let out = gafsv(args);
    assert!(out.status.success(), "gafsv {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_dataset(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    ok(&["synth", "--writers", "8", "--genuine", "4", "--forgeries", "2", "--seed", "3", "--M", "32", "--out", s(&data)]);
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    (data, cfg)
}

#[test]
fn encode_then_dump_image() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = tiny_dataset(dir.path());
    let sig = data.join("w000_g00.sig");
    let gaf6 = dir.path().join("sig.gaf6");
    let pgm = dir.path().join("c0.pgm");
    ok(&["encode", "--in", s(&sig), "--out", s(&gaf6), "--M", "64"]);
    ok(&["dump-image", "--in", s(&gaf6), "--channel", "0", "--out", s(&pgm)]);
    let (w, h, pixels) = read_pgm(&fs::read(&pgm).unwrap()).unwrap();
    assert_eq!((w, h, pixels.len()), (32, 32, 1024));
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5"));
    assert_eq!(gafsv(&["dump-image", "--in", s(&gaf6), "--channel", "6", "--out", s(&pgm)]).status.code(), Some(1));
}

#[test]
fn usage_and_data_errors() {
    let out = gafsv(&["eval", "--data", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    assert_eq!(gafsv(&["train", "--data", s(&missing), "--out", s(&missing), "--steps", "1"]).status.code(), Some(2));
    let bad = dir.path().join("bad.sig");
    fs::write(&bad, "not a signature\n").unwrap();
    let out = gafsv(&["encode", "--in", s(&bad), "--out", s(&dir.path().join("x.gaf6"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
    assert_eq!(gafsv(&["train", "--data", "x", "--out", "y", "--steps", "many"]).status.code(), Some(1));
}

#[test]
fn help_lists_defaults() {
    for cmd in ["synth", "encode", "train", "eval", "gradcheck", "dump-image", "stats"] {
        let help = ok(&[cmd, "--help"]);
        assert!(help.contains("[default:"), "{cmd} help has no defaults");
    }
}

#[test]
fn train_eval_stats_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_dataset(dir.path());
    let run = dir.path().join("run");
    let stdout = ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run), "--margin", "0.3"]);
    assert!(stdout.contains("margin = 0.3"), "resolved config printed first");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4);
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().contains("steps = 4"));

    let ck = run.join("checkpoint.gafw");
    let report = dir.path().join("report.json");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--enroll", "2", "--report", s(&report)]);
    let r = EvalReport::from_json(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&r.sf_eer) && (0.0..=1.0).contains(&r.rf_eer));
    assert_eq!(r.per_writer.len(), 2);

    let stats = dir.path().join("stats.json");
    ok(&["stats", "--checkpoint", s(&ck), "--data", s(&data), "--report", s(&stats)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&stats).unwrap()).unwrap();
    assert!(v["delta"].is_number() && v["per_writer"].is_array());
}

#[test]
fn commands_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_dataset(dir.path());
    let again = dir.path().join("again");
    ok(&["synth", "--writers", "8", "--genuine", "4", "--forgeries", "2", "--seed", "3", "--M", "32", "--out", s(&again)]);
    for name in ["dataset.tsv", "split.tsv", "w003_f01.sig"] {
        assert_eq!(fs::read(data.join(name)).unwrap(), fs::read(again.join(name)).unwrap());
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&a)]);
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&b)]);
    for name in ["checkpoint.gafw", "metrics.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn resume_extends_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_dataset(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run), "--steps", "2"]);
    let ck = run.join("checkpoint.gafw");
    let saved = dir.path().join("first.gafw");
    fs::copy(&ck, &saved).unwrap();
    ok(&["train", "--data", s(&data), "--out", s(&run), "--resume", s(&saved), "--steps", "5"]);
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let steps: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5"]);
}
