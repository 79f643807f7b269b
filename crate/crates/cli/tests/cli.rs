use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
repetitions = 1
fractions = [1.0]
[phantom]
width = 64
height = 64
n_cells = 15
[istaple]
burn_in = 5
n_samples = 20
[istaple.learner]
iterations = 15
"#;

fn istaple(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_istaple"))
        .args(args)
        .output()
        .expect("spawn istaple")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulated(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let cfg = dir.join("c.toml");
    fs::write(&cfg, SMALL).unwrap();
    let sim = dir.join("sim");
    let out = istaple(&["simulate", "--config", p(&cfg), "--out", p(&sim)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (cfg, sim)
}

#[test]
fn fuse_is_byte_identical_for_equal_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, sim) = simulated(tmp.path());
    for method in ["istaple", "staple"] {
        let mut dirs = Vec::new();
        for k in 0..2 {
            let out_dir = tmp.path().join(format!("{method}{k}"));
            let out = istaple(&[
                "fuse",
                "--image",
                p(&sim.join("image.pgm")),
                "--annotations",
                p(&sim.join("polygons.json")),
                "--method",
                method,
                "--seed",
                "11",
                "--out",
                p(&out_dir),
                "--config",
                p(&cfg),
            ]);
            assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
            dirs.push(out_dir);
        }
        for f in ["labels.pgm", "marginals.bin", "confusions.csv", "meta.json"] {
            assert_eq!(
                fs::read(dirs[0].join(f)).unwrap(),
                fs::read(dirs[1].join(f)).unwrap(),
                "{method} {f}"
            );
        }
        if method == "istaple" {
            for f in ["history.csv", "model.json"] {
                assert_eq!(fs::read(dirs[0].join(f)).unwrap(), fs::read(dirs[1].join(f)).unwrap());
            }
        }
    }
}

#[test]
fn eval_and_rank_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, sim) = simulated(tmp.path());
    let gt = sim.join("gt.pgm");
    let report = tmp.path().join("r.json");
    let out = istaple(&["eval", "--pred", p(&gt), "--gt", p(&gt), "--report", p(&report)]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"pixel_accuracy\": 1.0"), "{text}");

    let scores = sim.join("true_scores.csv");
    let out = istaple(&["rank", "--estimated", p(&scores), "--truth", p(&scores)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim().parse::<f64>().unwrap(), 0.0);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "fractions = [1.5]\n").unwrap();
    let out = istaple(&["experiment", "--config", p(&bad), "--out", p(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fractions"));

    fs::write(&bad, "no_such_key = 3\n").unwrap();
    let out = istaple(&["simulate", "--config", p(&bad), "--out", p(&tmp.path().join("s"))]);
    assert_eq!(out.status.code(), Some(1));

    let out = istaple(&[
        "fuse",
        "--image",
        "a",
        "--annotations",
        "b",
        "--method",
        "mean",
        "--out",
        "c",
    ]);
    assert_eq!(out.status.code(), Some(1));

    let missing = tmp.path().join("missing.pgm");
    let out = istaple(&["eval", "--pred", p(&missing), "--gt", p(&missing), "--report", "r.json"]);
    assert_eq!(out.status.code(), Some(2));

    let pgm = tmp.path().join("a.pgm");
    fs::write(&pgm, b"P5\n2 2\n255\n\x00\x00\x00\x00").unwrap();
    let other = tmp.path().join("b.pgm");
    fs::write(&other, b"P5\n3 2\n255\n\x00\x00\x00\x00\x00\x00").unwrap();
    let out = istaple(&[
        "eval",
        "--pred",
        p(&pgm),
        "--gt",
        p(&other),
        "--report",
        p(&tmp.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(istaple(&["--help"]).status.code(), Some(0));
    assert_eq!(istaple(&[]).status.code(), Some(1));
}

#[test]
fn minimal_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out_dir = tmp.path().join("exp");
    let out = istaple(&["experiment", "--config", p(&cfg), "--out", p(&out_dir), "--jobs", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("2 runs, 0 failed"));
    for m in ["istaple", "staple"] {
        let run = out_dir.join("runs").join("f1_r00").join(m);
        for f in ["labels.pgm", "metrics.json", "meta.json", "results.csv"] {
            assert!(run.join(f).exists(), "{m}/{f}");
        }
    }
    let results = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert!(results.lines().count() > 2);
    assert!(out_dir.join("config.toml").exists());
    let errors = fs::read_to_string(out_dir.join("errors.csv")).unwrap();
    assert!(errors.lines().count() <= 1);
}
