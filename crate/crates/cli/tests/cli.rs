use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn distvad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distvad")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = distvad(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

const SCENE: &str = r#"{
    "geometry": {"kind": "uca", "radius": 0.1, "num_mics": 8},
    "sources": [
        {"azimuth_rad": 0.7, "onset_s": 0.2, "duration_s": 1.2, "speaker": "A"},
        {"azimuth_rad": 3.5, "onset_s": 0.9, "duration_s": 0.8, "speaker": "B"}
    ],
    "noise": {"kind": "white", "snr_db": 20.0},
    "duration_s": 2.0,
    "seed": 3,
    "file_id": "meet"
}"#;

const TRAIN: &str = r#"{
    "model": {
        "frontend": {"kind": "sacc", "hidden": 8, "n_mels": 16},
        "tcn": {"bottleneck": 8, "hidden": 8, "layers_per_block": 2, "blocks": 1}
    },
    "train": {"batch_size": 2, "steps_per_epoch": 3, "max_epochs": 1, "segment_s": 1.0},
    "invariant": {"lambda": 0.7},
    "data": {"toy": {"template": {
        "geometry": {"kind": "uca", "radius": 0.1, "num_mics": 4},
        "noise": {"kind": "white", "snr_db": 10.0},
        "duration_s": 1.0
    }, "n_segments": 8}}
}"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn simulate(dir: &Path) -> (String, String) {
    let cfg = write(dir, "scene.json", SCENE);
    let out = dir.join("sim");
    ok(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    (
        out.join("meet.wav").to_str().unwrap().to_string(),
        out.join("meet.rttm").to_str().unwrap().to_string(),
    )
}

fn train(dir: &Path, cfg: &str, seed: &str) -> String {
    let c = write(dir, "train.json", cfg);
    let out = dir.join(format!("model{seed}"));
    ok(&["train", "--config", &c, "--seed", seed, "--out", out.to_str().unwrap()]);
    out.join("model.ckpt").to_str().unwrap().to_string()
}

#[test]
fn score_of_reference_against_itself_is_perfect() {
    let dir = TempDir::new().unwrap();
    let (_, rttm) = simulate(dir.path());
    let v: serde_json::Value = serde_json::from_str(&ok(&["score", &rttm, &rttm])).unwrap();
    assert_eq!(v["osd"]["f1"], 100.0);
    assert_eq!(v["vad"]["ser"], 0.0);
}

#[test]
fn simulate_infer_score_end_to_end() {
    let dir = TempDir::new().unwrap();
    let (wav, rttm) = simulate(dir.path());
    let ckpt = train(dir.path(), TRAIN, "1");
    let post = dir.path().join("post.csv");
    let hyp = dir.path().join("hyp.rttm");
    ok(&["infer", "--checkpoint", &ckpt, &wav, "--posteriors", post.to_str().unwrap(), "--out", hyp.to_str().unwrap()]);
    assert!(fs::read_to_string(&post).unwrap().starts_with("frame,p0,p1,p2"));
    let v: serde_json::Value = serde_json::from_str(&ok(&["score", &rttm, hyp.to_str().unwrap()])).unwrap();
    assert!(v["osd"]["f1"].is_number());
    let log = fs::read_to_string(dir.path().join("model1/train.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn maskeval_reports_per_channel_count_rows() {
    let dir = TempDir::new().unwrap();
    let (wav, rttm) = simulate(dir.path());
    let ckpt = train(dir.path(), TRAIN, "2");
    let table = ok(&["maskeval", "--checkpoint", &ckpt, &wav, "--rttm", &rttm, "--keep", "0,1", "--keep", "0,2,4,6"]);
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("C=8"));
    assert!(rows[2].starts_with("C=2"));
    assert!(rows[3].starts_with("C=4"));
}

#[test]
fn features_for_every_variant() {
    let dir = TempDir::new().unwrap();
    let (wav, _) = simulate(dir.path());
    for (variant, width) in [("stft", 64), ("sacc", 64), ("ecsacc", 64), ("icsacc", 64), ("mvdr", 64), ("analytic", 64)] {
        let csv = ok(&["features", &wav, "--variant", variant, "--seed", "1"]);
        let header = csv.lines().next().unwrap();
        assert_eq!(header.split(',').count(), width + 1, "{variant}");
        assert_eq!(csv.lines().count(), 1 + 198, "{variant}");
    }
}

#[test]
fn srp_finds_the_dominant_source() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "one.json",
        r#"{"geometry": {"kind": "uca", "radius": 0.1, "num_mics": 8},
            "sources": [{"azimuth_rad": 1.0471975511965976, "onset_s": 0.0, "duration_s": 1.0}],
            "noise": {"kind": "white", "snr_db": 20.0}, "duration_s": 1.0, "file_id": "one"}"#,
    );
    let out = dir.path().join("one");
    ok(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--float"]);
    let csv = ok(&["srp", out.join("one.wav").to_str().unwrap()]);
    let best = csv
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',').map(|v| v.parse::<f64>().unwrap());
            (it.next().unwrap(), it.next().unwrap())
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert!((best.0 - 60.0).abs() <= 1.0, "{best:?}");
}

#[test]
fn beampattern_outputs() {
    let csv = ok(&["beampattern", "--steer", "90", "--freq", "1000", "--freq", "1500"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0].split(',').count(), 361);
    let row: Vec<f64> = lines[1].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    assert_eq!(arg, 90);
    assert!((row[90] - 1.0).abs() < 1e-9);
    // Above the aliasing limit of the default array.
    assert_eq!(distvad(&["beampattern", "--steer", "0", "--freq", "3000"]).status.code(), Some(2));

    let dir = TempDir::new().unwrap();
    let (wav, _) = simulate(dir.path());
    let ckpt = train(dir.path(), TRAIN, "3");
    let csv = ok(&["beampattern", "--checkpoint", &ckpt, "--wav", &wav, "--freq", "1000"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "freq_hz,theta_deg,magnitude,normalized");
    assert_eq!(lines.len(), 361);
    let peak = lines[1..].iter().map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap()).fold(0.0, f64::max);
    assert!((peak - 1.0).abs() < 1e-9);
}

#[test]
fn exit_codes() {
    assert_eq!(distvad(&[]).status.code(), Some(1));
    assert_eq!(distvad(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(distvad(&["--help"]).status.code(), Some(0));
    assert_eq!(distvad(&["simulate"]).status.code(), Some(1));
    assert_eq!(distvad(&["score", "/nonexistent/a.rttm", "/nonexistent/b.rttm"]).status.code(), Some(2));
    let dir = TempDir::new().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"geometry": {"kind": "uca", "radius": 0.1, "num_mics": 4}, "duration_s": 1.0, "colour": 1}"#);
    let o = distvad(&["simulate", "--config", &bad, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    let garbage = write(dir.path(), "x.wav", "not a wav file");
    assert_eq!(distvad(&["srp", &garbage]).status.code(), Some(2));
    // A diverging learning rate surfaces as a numeric failure.
    let div = TRAIN.replace(r#""segment_s": 1.0"#, r#""segment_s": 1.0, "lr": 1e300"#);
    let c = write(dir.path(), "div.json", &div);
    let o = distvad(&["train", "--config", &c, "--out", dir.path().join("m").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let run = || {
        let dir = TempDir::new().unwrap();
        let (wav, rttm) = simulate(dir.path());
        let ckpt = train(dir.path(), TRAIN, "5");
        let hyp = dir.path().join("hyp.rttm");
        ok(&["infer", "--checkpoint", &ckpt, &wav, "--out", hyp.to_str().unwrap()]);
        let metrics = ok(&["score", &rttm, hyp.to_str().unwrap()]);
        (fs::read(&ckpt).unwrap(), fs::read(&hyp).unwrap(), metrics)
    };
    assert_eq!(run(), run());
}
