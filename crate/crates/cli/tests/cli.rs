use std::path::Path;
use std::process::{Command, Output};

fn cptlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cptlab"))
        .args(args)
        .env_remove("CPTLAB_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// b_min + (b_max - b_min) * sin^2(pi * (t mod T) / (2T)), ties to even.
fn oracle_bits(b_min: u32, b_max: u32, period: usize, t: usize) -> u32 {
    let s = (std::f64::consts::PI * (t % period) as f64 / (2.0 * period as f64)).sin();
    let v = b_min as f64 + (b_max - b_min) as f64 * s * s;
    let lo = v.floor();
    if (v - lo - 0.5).abs() < 1e-9 {
        (if (lo as u32).is_multiple_of(2) { lo } else { lo + 1.0 }) as u32
    } else {
        v.round() as u32
    }
}

const TINY: &[&str] = &[
    "--set", "epochs=4",
    "--set", "lr.stage_boundaries=[4]",
    "--set", "lr.stage_lrs=[0.1]",
    "--set", "precision.num_cycles=2",
    "--set", "data.train_size=96",
    "--set", "data.test_size=48",
    "--set", "checkpoint_every=2",
];

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    cptlab(&args)
}

#[test]
fn schedule_prints_160_epochs() {
    let o = cptlab(&["schedule", "--b-min", "3", "--b-max", "8", "--epochs", "160", "--cycles", "8"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,bits"));
    let rows: Vec<(usize, u32)> = lines
        .map(|l| {
            let (t, b) = l.split_once(',').unwrap();
            (t.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 160);
    for (t, b) in rows {
        assert_eq!(b, oracle_bits(3, 8, 20, t), "epoch {t}");
    }
}

#[test]
fn cost_reduction_matches_hand_count() {
    let o = cptlab(&["cost", "--a", "fw6_bw6", "--b", "fw8_bw8"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("forward_reduction_pct,43.7500"), "{text}");
    // error backprop and weight grad scale by 6*6/(8*8) as well
    assert!(text.contains("total_reduction_pct,43.7500"), "{text}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = cptlab(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn bad_config_exits_2() {
    let o = cptlab(&["train", "--dry-run", "--set", "precision.b_min=1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cptlab(&["train", "--dry-run", "--set", "no_such_key=3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cptlab(&["cost", "--a", "fw9-3", "--b", "fw8_bw8"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dry_run_prints_the_plan() {
    let mut args = vec!["train", "--dry-run"];
    args.extend_from_slice(TINY);
    let o = cptlab(&args);
    assert!(o.status.success());
    let text = stdout(&o);
    let bits: Vec<u32> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let want: Vec<u32> = (0..4).map(|t| oracle_bits(3, 8, 2, t)).collect();
    assert_eq!(bits, want);
}

#[test]
fn train_resume_report() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    assert!(train_tiny(&full, &[]).status.success());
    for f in ["metrics.jsonl", "metrics.csv", "cost.json", "cost_per_epoch.csv", "resolved_config.toml"] {
        assert!(full.join(f).exists(), "{f} missing");
    }
    let jsonl = std::fs::read_to_string(full.join("metrics.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 4);

    let resumed = dir.path().join("resumed");
    let ckpt = full.join("checkpoints").join("epoch_0002.ckpt");
    let o = train_tiny(&resumed, &["--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tail = std::fs::read_to_string(resumed.join("metrics.jsonl")).unwrap();
    let want: Vec<&str> = jsonl.lines().skip(2).collect();
    assert_eq!(tail.lines().collect::<Vec<_>>(), want);

    let o = cptlab(&[
        "report",
        full.join("metrics.jsonl").to_str().unwrap(),
        resumed.join("metrics.jsonl").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().nth(1).unwrap().starts_with("full,4,"), "{text}");
    assert!(text.lines().nth(2).unwrap().starts_with("resumed,2,"), "{text}");
}

#[test]
fn resume_under_a_different_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_tiny(&run, &[]).status.success());
    let ckpt = run.join("checkpoints").join("epoch_0002.ckpt");
    let o = train_tiny(&dir.path().join("other"), &["--resume", ckpt.to_str().unwrap(), "--set", "seed=5"]);
    assert!(!o.status.success());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_tiny(&a, &[]).status.success());
    assert!(train_tiny(&b, &[]).status.success());
    for f in ["metrics.jsonl", "metrics.csv", "cost.json", "cost_per_epoch.csv", "checkpoints/final.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn landscape_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_tiny(&run, &[]).status.success());
    let ckpt = run.join("checkpoints").join("final.ckpt");
    let out = dir.path().join("land");
    let mut args = vec![
        "landscape",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--points",
        "3",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    let o = cptlab(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("landscape.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn cost_only_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cptlab(&["sweep", "--patterns", "cosine,static", "--cycles", "2,4", "--bounds", "3-8", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // header, two cosine rows, one static row
    assert_eq!(stdout(&o).lines().count(), 4);
    assert!(dir.path().join("sweep.csv").exists());
}
