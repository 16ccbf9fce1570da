use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn hdsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdsr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn write(p: &Path, text: &str) -> PathBuf {
    std::fs::write(p, text).unwrap();
    p.to_path_buf()
}

const TINY: &str = r#"
[cohort]
preset = "lorenz63-rho10"
t_max = 200
[train]
epochs = 3
batches_per_epoch = 3
seq_len = 10
hidden = 10
[evaluate.metrics]
n_steps = 1500
transient = 100
"#;

fn train_tiny(dir: &Path, extra: &[&str]) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let cfg = write(&dir.join("cfg.toml"), TINY);
    let out = dir.join("run");
    let mut args = vec!["train", "--config", s(&cfg), "--seed", "7", "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = hdsr(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn csv_rows(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(p).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    (header, lines.map(|l| l.split(',').map(String::from).collect()).collect())
}

fn keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    k.sort();
    k
}

#[test]
fn generate_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = hdsr(&["generate", "--preset", "roessler-c10", "--seed", "11", "--out", s(out)]);
        assert_eq!(code(&o), 0);
    }
    let names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 11);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap());
    }
    let m = read_json(&a.join("manifest.json"));
    let c: Vec<f64> = m["gt_params"].as_array().unwrap().iter().map(|g| g[0].as_f64().unwrap()).collect();
    assert_eq!(c.len(), 10);
    assert!((c[0] - 3.8).abs() < 1e-12 && (c[9] - 4.8).abs() < 1e-12);
}

#[test]
fn configuration_errors_exit_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("c.toml"), "[train]\nepochs = 2\nbogus = 1\n");
    let o = hdsr(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    assert_eq!(code(&hdsr(&["generate", "--preset", "no-such-preset", "--out", s(dir.path())])), 1);
    assert_eq!(code(&hdsr(&["evaluate", "--checkpoint", "/nonexistent/c.json", "--out", s(dir.path())])), 1);
    assert_eq!(code(&hdsr(&["frobnicate"])), 1);
    assert_eq!(code(&hdsr(&["--help"])), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_hdsr"))
        .args(["generate", "--preset", "roessler-c10", "--out", s(&dir.path().join("g"))])
        .env("HDSR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn train_writes_checkpoint_history_snapshots_and_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &[]);
    let ck = read_json(&out.join("checkpoint.json"));
    assert_eq!(ck["n_subjects"], 10);
    assert_eq!(ck["features"].as_array().unwrap().len(), 10);
    assert_eq!(ck["epoch"], 3);
    let (header, rows) = csv_rows(&out.join("loss.csv"));
    assert_eq!(header, ["epoch", "loss", "alpha"]);
    assert_eq!(rows.len(), 3);
    assert!(out.join("cohort/manifest.json").exists());
    assert!(out.join("resolved_config.toml").exists());
}

#[test]
fn resuming_from_a_snapshot_reproduces_the_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("cfg.toml"), &format!("{TINY}\n[run]\ncheckpoint_every = 1\n"));
    let straight = dir.path().join("straight");
    assert_eq!(code(&hdsr(&["train", "--config", s(&cfg), "--out", s(&straight)])), 0);
    let snap = straight.join("checkpoints/epoch_2.json");
    assert!(snap.exists() && straight.join("checkpoints/epoch_1.json").exists());
    let resumed = dir.path().join("resumed");
    let o = hdsr(&["train", "--config", s(&cfg), "--out", s(&resumed), "--resume", s(&snap)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(straight.join("checkpoint.json")).unwrap(),
        std::fs::read(resumed.join("checkpoint.json")).unwrap()
    );
    let (_, all) = csv_rows(&straight.join("loss.csv"));
    let (_, tail) = csv_rows(&resumed.join("loss.csv"));
    assert_eq!(&all[2..], &tail[..]);
}

#[test]
fn parallel_runs_match_their_single_seed_counterparts() {
    let dir = tempfile::tempdir().unwrap();
    // The cohort is drawn once from its own seed and shared by every run.
    let cfg = write(&dir.path().join("cfg.toml"), &TINY.replace("t_max = 200", "t_max = 200\nseed = 5"));
    let multi = dir.path().join("multi");
    assert_eq!(code(&hdsr(&["train", "--config", s(&cfg), "--seed", "5", "--runs", "2", "--out", s(&multi)])), 0);
    let single = dir.path().join("single");
    assert_eq!(code(&hdsr(&["train", "--config", s(&cfg), "--seed", "6", "--out", s(&single)])), 0);
    let a = read_json(&multi.join("run_1/checkpoint.json"));
    let b = read_json(&single.join("checkpoint.json"));
    assert_eq!(a["group"], b["group"]);
    assert_eq!(a["features"], b["features"]);
    assert_ne!(read_json(&multi.join("run_0/checkpoint.json"))["group"], a["group"]);
}

#[test]
fn evaluation_reports_share_one_format_across_training_modes() {
    let dir = tempfile::tempdir().unwrap();
    let hier = train_tiny(&dir.path().join("h"), &[]);
    let ens = train_tiny(&dir.path().join("e"), &["--mode", "ensemble"]);
    let members: Vec<_> = std::fs::read_dir(ens.join("ensemble"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("member_"))
        .collect();
    assert_eq!(members.len(), 10);
    let cfg = write(&dir.path().join("cfg.toml"), TINY);
    let mut reports = Vec::new();
    for (name, run) in [("eh", hier.join("checkpoint.json")), ("ee", ens.join("ensemble"))] {
        let out = dir.path().join(name);
        let o = hdsr(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&run), "--out", s(&out)]);
        assert!(matches!(code(&o), 0 | 2), "{}", String::from_utf8_lossy(&o.stderr));
        reports.push((csv_rows(&out.join("metrics.csv")), read_json(&out.join("metrics.json"))));
    }
    let ((h_header, h_rows), h_json) = &reports[0];
    let ((e_header, e_rows), e_json) = &reports[1];
    assert_eq!(h_header, e_header);
    assert_eq!(h_rows.len(), 10);
    assert_eq!(e_rows.len(), 10);
    assert_eq!(keys(h_json), keys(e_json));
    assert_eq!(keys(&h_json["runs"][0]), keys(&e_json["runs"][0]));
    assert_eq!(keys(&h_json["runs"][0]["subjects"][0]), keys(&e_json["runs"][0]["subjects"][0]));
    assert_eq!(keys(&h_json["summary"]), keys(&e_json["summary"]));
    assert_eq!(h_json["bins_per_dim"], 30);
}

#[test]
fn summary_median_is_the_median_of_run_medians_in_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("cfg.toml"), TINY);
    let out = dir.path().join("runs");
    assert_eq!(code(&hdsr(&["train", "--config", s(&cfg), "--runs", "3", "--out", s(&out)])), 0);
    let ev = dir.path().join("ev");
    let mut args = vec!["evaluate".to_string(), "--config".into(), s(&cfg).into(), "--out".into(), s(&ev).into()];
    for k in 0..3 {
        args.push("--checkpoint".into());
        args.push(s(&out.join(format!("run_{k}/checkpoint.json"))).into());
    }
    let o = Command::new(env!("CARGO_BIN_EXE_hdsr")).args(&args).output().unwrap();
    assert!(matches!(code(&o), 0 | 2));
    let (header, rows) = csv_rows(&ev.join("metrics.csv"));
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let mut run_medians = Vec::new();
    for k in 0..3 {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r[col("run")] == k.to_string())
            .map(|r| r[col("d_stsp")].parse::<f64>().unwrap())
            .collect();
        assert_eq!(v.len(), 10);
        run_medians.push(median(v));
    }
    let summary = read_json(&ev.join("metrics.json"))["summary"].clone();
    let want = median(run_medians);
    assert!((summary["median_d_stsp"].as_f64().unwrap() - want).abs() <= 1e-12 * want.abs().max(1.0));
    assert_eq!(summary["n_runs"], 3);
}

#[test]
fn diverging_subjects_are_flagged_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &[]);
    let path = out.join("checkpoint.json");
    let mut ck = read_json(&path);
    for j in 0..3 {
        ck["features"][j] = json!([1.0e3]);
    }
    std::fs::write(&path, serde_json::to_string(&ck).unwrap()).unwrap();
    let cfg = write(&dir.path().join("cfg.toml"), TINY);
    let ev = dir.path().join("ev");
    let o = hdsr(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&path), "--out", s(&ev)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&ev.join("metrics.json"));
    let subjects = report["runs"][0]["subjects"].as_array().unwrap();
    for (j, sub) in subjects.iter().enumerate() {
        assert_eq!(sub["diverged"].as_bool().unwrap(), j < 3, "subject {j}");
    }
    assert!(subjects[0]["d_stsp"].is_null());
    assert_eq!(report["summary"]["n_diverged_subjects"], 3);
}

/// A checkpoint over scalar data whose subject models are exactly
/// `x' = l·x + l·h`, with features `l_j` and targets `10·l_j + 1`.
fn affine_checkpoint(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    std::fs::create_dir_all(&data).unwrap();
    for j in 0..4 {
        let rows: String = (0..40).map(|t| format!("{}\n", (t as f64 * 0.3 + j as f64).sin())).collect();
        write(&data.join(format!("subject_{j}.csv")), &rows);
    }
    let cfg = write(
        &dir.join("cfg.toml"),
        &format!(
            "[cohort]\ndir = {:?}\nstandardize = \"none\"\n[train]\nepochs = 1\nbatches_per_epoch = 1\nseq_len = 10\nhidden = 4\n",
            s(&data)
        ),
    );
    let out = dir.join("run");
    assert_eq!(code(&hdsr(&["train", "--config", s(&cfg), "--out", s(&out)])), 0);
    let path = out.join("checkpoint.json");
    let mut ck = read_json(&path);
    for block in ck["group"].as_array_mut().unwrap() {
        let value = match block["block"].as_str().unwrap() {
            "PA" => 1.0,
            "PH1" => 2.0,
            _ => 0.0,
        };
        for row in block["values"].as_array_mut().unwrap() {
            for v in row.as_array_mut().unwrap() {
                *v = json!(value);
            }
        }
    }
    let l = [0.3, 0.4, 0.5, 0.6];
    ck["features"] = json!(l.iter().map(|v| vec![*v]).collect::<Vec<_>>());
    ck["gt_params"] = json!(l.iter().map(|v| vec![10.0 * v + 1.0]).collect::<Vec<_>>());
    ck["sigma"] = json!(vec![vec![0.01]; 4]);
    std::fs::write(&path, serde_json::to_string(&ck).unwrap()).unwrap();
    path
}

fn affine_sequence(path: &Path, l: f64) -> PathBuf {
    let mut x = 8.0;
    let mut rows = String::new();
    for _ in 0..60 {
        rows.push_str(&format!("{x}\n"));
        x = l * x + l * 2.0;
    }
    write(path, &rows)
}

fn finetune(dir: &Path, ck: &Path, seq: &Path, name: &str) -> Value {
    let cfg = write(&dir.join("ft.toml"), "[finetune]\nsigma = \"training-mean\"\n");
    let out = dir.join(name);
    let o = hdsr(&["finetune", "--config", s(&cfg), "--checkpoint", s(ck), "--sequence", s(seq), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    read_json(&out.join("finetune.json"))
}

#[test]
fn finetuning_recovers_a_held_in_parameter_and_flags_extrapolation() {
    let dir = tempfile::tempdir().unwrap();
    let ck = affine_checkpoint(dir.path());
    let inside = finetune(dir.path(), &ck, &affine_sequence(&dir.path().join("in.csv"), 0.45), "in");
    assert!((inside["feature"][0].as_f64().unwrap() - 0.45).abs() < 1e-6, "{inside}");
    assert!((inside["predicted"].as_f64().unwrap() - 5.5).abs() < 1e-5);
    assert_eq!(inside["extrapolated"], false);
    assert_eq!(inside["training_range"], json!([4.0, 7.0]));
    let outside = finetune(dir.path(), &ck, &affine_sequence(&dir.path().join("out.csv"), 0.85), "out");
    assert!((outside["predicted"].as_f64().unwrap() - 9.5).abs() < 1e-4, "{outside}");
    assert_eq!(outside["extrapolated"], true);
}

#[test]
fn analysis_checks_arity_and_reports_missing_targets() {
    let dir = tempfile::tempdir().unwrap();
    let ck = affine_checkpoint(dir.path());
    let out = dir.path().join("a");
    let o = hdsr(&["analyze", "--checkpoint", s(&ck), "--task", "robustness", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    let mut v = read_json(&ck);
    v["gt_params"] = Value::Null;
    let bare = write(&dir.path().join("bare.json"), &serde_json::to_string(&v).unwrap());
    let o = hdsr(&["analyze", "--checkpoint", s(&bare), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert!(out.join("features.csv").exists() && out.join("pca.json").exists() && out.join("gmm.json").exists());
    assert!(!out.join("regression.json").exists());
    let o = hdsr(&["analyze", "--checkpoint", s(&bare), "--task", "regression", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gt_params"));
    let o = hdsr(&["analyze", "--checkpoint", s(&ck), "--checkpoint", s(&bare), "--task", "robustness", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let r = read_json(&out.join("robustness.json"));
    assert!(r["mean"].is_number());
    assert!((r["scalar"]["mean"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn landscape_of_an_exact_model_has_one_minimum_at_the_truth() {
    let dir = tempfile::tempdir().unwrap();
    let ck = affine_checkpoint(dir.path());
    let seq = affine_sequence(&dir.path().join("seq.csv"), 0.45);
    let cfg = write(
        &dir.path().join("an.toml"),
        &format!(
            "[finetune]\nsigma = \"training-mean\"\n[analyze]\ntasks = [\"landscape\"]\n[analyze.landscape]\nsequence = {:?}\nmin = 0.05\nmax = 0.95\npoints = 91\n",
            s(&seq)
        ),
    );
    let out = dir.path().join("l");
    let o = hdsr(&["analyze", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let l = read_json(&out.join("landscape.json"));
    assert_eq!(l["local_minima"], 1);
    assert!((l["argmin"].as_f64().unwrap() - 0.45).abs() < 1e-9);
    let (header, rows) = csv_rows(&out.join("landscape.csv"));
    assert_eq!(header, ["feature", "loss"]);
    assert_eq!(rows.len(), 91);
}
