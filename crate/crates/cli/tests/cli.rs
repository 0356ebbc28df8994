use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use splitcomp_core::bottleneck::{inject, BottleneckedModel, SplitConfig};
use splitcomp_core::model::checkpoint::load_teacher;

const CONFIG: &str = r#"
seed = 5

[data]
val_samples = 60
source = { kind = "synthetic", samples = 260, side = 32, seed = 3 }

[teacher_training]
epochs = 1
batch_size = 32

[schedule]
stage_epochs = 1
batch_size = 32

[split]
split_point = "SP1"
bottleneck_channels = 3

[simulate]
jpeg_bytes = 2000
rate_sweep = { from_bps = 1e4, to_bps = 1e9, points = 7, rtt_s = 0.01 }
channels = [{ name = "lora", kind = "fixed_rate", rate_bps = 37500.0 }]

[simulate.profiles.local]
d_head_s = 0.3
d_tail_s = 0.0
p_head_w = 4.3
p_net_w = 1.2

[simulate.profiles.edge]
d_head_s = 0.0
d_tail_s = 0.01
p_head_w = 4.3
p_net_w = 1.2

[simulate.profiles.split]
d_head_s = 0.02
d_tail_s = 0.01
p_head_w = 4.3
p_net_w = 1.2
"#;

fn splitcomp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitcomp")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = splitcomp(dir, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = workspace();
    let d = dir.path();
    assert_eq!(code(&splitcomp(d, &["frobnicate"])), 2);
    assert_eq!(code(&splitcomp(d, &["train", "--epochs", "many"])), 2);

    let out = splitcomp(d, &["--config", "exp.toml", "inject", "--teacher", "nowhere/teacher"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nowhere/teacher"), "{}", stderr(&out));

    let out = splitcomp(d, &["--config", "exp.toml", "train", "--recipe", "bottlefit_ftfe", "--teacher", "t"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bottlefit_ftfe"));

    fs::write(d.join("typo.toml"), "sede = 3\n").unwrap();
    let out = splitcomp(d, &["--config", "typo.toml", "simulate"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("sede"));

    assert_eq!(code(&splitcomp(d, &["--config", "missing.toml", "simulate"])), 2);
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = workspace();
    let d = dir.path();
    let out = splitcomp(d, &["report"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("no run directories"));

    let out = splitcomp(d, &["report", "runs/a", "runs/b"]);
    assert_eq!(code(&out), 3);
    let err = stderr(&out);
    assert!(err.contains("runs/a/manifest.json") && err.contains("runs/b/summary.json"), "{err}");

    let out = splitcomp(d, &["--config", "exp.toml", "eval", "--checkpoint", "absent"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn simulate_writes_rows_summary_and_plots() {
    let dir = workspace();
    let d = dir.path();
    let cfg = CONFIG.to_string()
        + r#"
[[simulate.models]]
name = "bf"
split_point = "SP1"
channels = 3
codec = "bq8"
payload_bytes = 79
input_bytes = 3072
top1 = 0.7
"#;
    fs::write(d.join("sim.toml"), cfg).unwrap();
    ok(d, &["--config", "sim.toml", "--out", "sim", "simulate"]);
    let rows = fs::read_to_string(d.join("sim/sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 8 * 3);
    assert!(rows.lines().next().unwrap().starts_with("model_name,split_point,channels,codec,channel,rate_bps,strategy"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("sim/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["choices"].as_array().unwrap().len(), 8);
    let lora = summary["choices"].as_array().unwrap().iter().find(|c| c["channel"] == "lora").unwrap();
    assert_ne!(lora["strategy"], "edge");
    let x = &summary["split_edge_crossovers"][0];
    let (a, s) = (x["analytic_bps"].as_f64().unwrap(), x["simulated_bps"].as_f64().unwrap());
    assert!(((a - s) / a).abs() < 1e-6);
    for svg in ["delay_vs_rate.svg", "size_vs_accuracy.svg"] {
        assert!(fs::read_to_string(d.join("sim").join(svg)).unwrap().starts_with("<svg"));
    }
}

fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    ["--config", "exp.toml"].into_iter().chain(extra.iter().copied()).collect()
}

fn read_lines(path: PathBuf) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn full_pipeline() {
    let dir = workspace();
    let d = dir.path();

    ok(d, &with(&["--out", "teacher", "train", "--recipe", "pretrain_teacher"]));
    assert!(d.join("teacher/manifest.json").exists());

    // Inject, then reload the checkpoint and compare with an in-process injection.
    ok(d, &with(&["--out", "injected", "--seed", "9", "inject", "--teacher", "teacher"]));
    let teacher = load_teacher(&d.join("teacher")).unwrap();
    let reloaded = BottleneckedModel::load(&d.join("injected")).unwrap();
    let fresh = inject(&teacher, &SplitConfig::sp1(3), 9).unwrap();
    assert_eq!(reloaded.param_digest(), fresh.param_digest());
    let (a, b) = (reloaded.split().unwrap(), fresh.split().unwrap());
    assert_eq!(a.head, b.head);
    assert_eq!(a.tail, b.tail);

    // Zero epochs: header-only log and an untouched student.
    ok(d, &with(&["--out", "zero", "--seed", "9", "train", "--recipe", "bottlefit_kd", "--teacher", "teacher", "--epochs", "0"]));
    assert_eq!(read_lines(d.join("zero/log.csv")), vec!["epoch,stage,loss,lr,val_top1"]);
    assert_eq!(BottleneckedModel::load(&d.join("zero")).unwrap().param_digest(), fresh.param_digest());

    // Identical seeds give identical logs.
    for run in ["run_a", "run_b"] {
        ok(d, &with(&["--out", run, "train", "--recipe", "bottlefit_kd", "--teacher", "teacher"]));
    }
    let log = read_lines(d.join("run_a/log.csv"));
    assert_eq!(log.len(), 3, "{log:?}");
    assert_eq!(log, read_lines(d.join("run_b/log.csv")));

    let stdout = ok(d, &with(&["eval", "--checkpoint", "run_a", "--teacher", "teacher"]));
    assert!(stdout.contains("via bq8"));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run_a/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["codecs"]["bq8"]["payload_bytes"], 79);
    assert_eq!(eval["samples"], 60);

    // Serve the tail and classify a few images through it.
    let mut server = Command::new(env!("CARGO_BIN_EXE_splitcomp"))
        .current_dir(d)
        .args(["serve", "--checkpoint", "run_a", "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let client = splitcomp(d, &with(&["client", "--checkpoint", "run_a", "--endpoint", &addr, "--images", "5", "--report", "client.csv"]));
    server.kill().unwrap();
    server.wait().unwrap();
    assert!(client.status.success(), "{}", stderr(&client));
    let report = read_lines(d.join("client.csv"));
    assert_eq!(report.len(), 6);
    assert!(report[1..].iter().all(|r| r.split(',').nth(3) == Some("79")));

    // Reports: bracket deltas, byte-identical regeneration.
    let table = ok(d, &with(&["--out", "rep1", "report", "run_a", "run_b"]));
    ok(d, &with(&["--out", "rep2", "report", "run_a", "run_b"]));
    assert!(table.contains("| small_resnet | bottlefit_kd | SP1 | 3 |"));
    assert!(table.contains(" (-") || table.contains(" (+"));
    for f in ["accuracy.md", "accuracy.csv", "size_vs_accuracy.svg"] {
        assert_eq!(fs::read(d.join("rep1").join(f)).unwrap(), fs::read(d.join("rep2").join(f)).unwrap(), "{f}");
    }

    // Simulate from the trained runs.
    fs::write(d.join("runs.toml"), CONFIG.replace("[simulate]", "[simulate]\nruns = [\"run_a\"]")).unwrap();
    ok(d, &["--config", "runs.toml", "--out", "sim", "simulate"]);
    let rows = fs::read_to_string(d.join("sim/sweep.csv")).unwrap();
    assert!(rows.contains("bottlefit_kd_SP1_s5"));
}
