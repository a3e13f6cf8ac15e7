use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

const TINY: &str = "\
[data]
n_train = 200
n_test = 40
n_val = 40

[model]
channels = 4,8,8
actor_hidden = 16
critic_hidden = 16

[pretrain]
epochs = 1

[train]
epochs = 2
freeze_epochs = 1
episodes_per_epoch = 10
warmup = 20
";

fn fovea(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fovea")).args(args).output().expect("spawn fovea")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout:\n{}\nstderr:\n{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&fovea(&["--help"])), 0);
    assert_eq!(code(&fovea(&["--version"])), 0);
    assert_eq!(code(&fovea(&["frobnicate"])), 1);
    assert_eq!(code(&fovea(&[])), 1);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&fovea(&["gen-data", "--out", p(&out), "--set", "data.nope=1"])), 1);
    assert_eq!(code(&fovea(&["gen-data", "--out", p(&out), "--set", "train.epochs=many"])), 1);
    let bad = dir.path().join("bad.ini");
    fs::write(&bad, "[train]\nepochs = 1\nfreeze_epochs = 5\n").unwrap();
    assert_eq!(code(&fovea(&["--config", p(&bad), "gen-data", "--out", p(&out)])), 1);
    assert!(!out.exists());
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = fovea(&["pretrain", "--data", p(&dir.path().join("absent")), "--out", p(&dir.path().join("x.fvnn"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn failing_solvability_gate_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    // Thirty training images are far too few for the crop classifier to clear its floor.
    let o = fovea(&["gen-data", "--out", p(&out), "--check", "--set", "data.n_train=30", "--set", "data.n_test=20", "--set", "data.n_val=5"]);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
    assert!(stdout(&o).contains("solvability"));
    assert!(!out.join("manifest.jsonl").exists());
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ini = d.join("tiny.ini");
    fs::write(&ini, TINY).unwrap();
    let data = d.join("data");
    ok(fovea(&["--config", p(&ini), "gen-data", "--out", p(&data)]));
    assert!(data.join("manifest.jsonl").exists());
    assert!(data.join("train/00000.png").exists());

    let pre = d.join("pre.fvnn");
    ok(fovea(&["pretrain", "--data", p(&data), "--out", p(&pre)]));

    let run = d.join("run");
    let o = ok(fovea(&["train", "--data", p(&data), "--checkpoint", p(&pre), "--out", p(&run), "--mode", "full"]));
    assert!(stdout(&o).starts_with("full:"));
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("{\"header\":"));
    let model = run.join("model.fvnn");

    let ev = d.join("eval");
    let o = ok(fovea(&["eval", "--data", p(&data), "--checkpoint", p(&model), "--out", p(&ev), "--policy", "drift,random,center,drift-e", "--trace"]));
    let table = stdout(&o);
    assert!(table.contains("fallback_rate"), "{table}");
    let csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    let mut rows = csv.lines();
    assert!(rows.next().unwrap().starts_with("# config_hash="));
    assert_eq!(rows.next().unwrap(), "policy,acc,pix,bytes,hit_rate,fallback_rate");
    let drift_e: Vec<&str> = rows.find(|r| r.starts_with("drift-e,")).unwrap().split(',').collect();
    let fallback: f64 = drift_e[5].parse().unwrap();
    assert!((fallback - 25.0).abs() <= 10.0, "fallback {fallback}");
    assert!(fs::read_to_string(ev.join("trace.jsonl")).unwrap().lines().count() > 40);
    let samples = fs::read_to_string(ev.join("samples.jsonl")).unwrap();
    assert!(samples.lines().count() > 40);

    let panels = d.join("panels");
    ok(fovea(&["render", "--data", p(&data), "--checkpoint", p(&model), "--out", p(&panels), "--count", "2"]));
    assert_eq!(fs::read_dir(&panels).unwrap().count(), 2);

    let ab = d.join("ablate");
    let o = ok(fovea(&["ablate", "--data", p(&data), "--checkpoint", p(&pre), "--out", p(&ab)]));
    assert_eq!(stdout(&o).lines().count(), 5);
    let csv = fs::read_to_string(ab.join("ablation.csv")).unwrap();
    let modes: Vec<&str> = csv.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modes, ["ddpg", "cc", "coach", "full"]);
    for m in modes {
        assert!(ab.join(m).join("metrics.jsonl").exists());
    }

    // Artifacts built from different data are refused.
    let other = d.join("other");
    ok(fovea(&["--config", p(&ini), "gen-data", "--out", p(&other), "--set", "data.seed=9"]));
    let o = fovea(&["train", "--data", p(&other), "--checkpoint", p(&pre), "--out", p(&d.join("bad"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash"));

    serve_and_edge(&model, &data);
}

fn serve_and_edge(model: &Path, data: &Path) {
    let mut server = Command::new(env!("CARGO_BIN_EXE_fovea"))
        .args(["serve", "--checkpoint", p(model), "--address", "127.0.0.1:0", "--sessions", "3"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    let log = data.parent().unwrap().join("edge.jsonl");
    let o = ok(fovea(&["edge", "--data", p(data), "--address", &addr, "--count", "3", "--out", p(&log)]));
    assert!(stdout(&o).contains("3 sessions, 0 failed"), "{}", stdout(&o));
    assert!(server.wait().unwrap().success());
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 4);
    // Nobody listens any more.
    assert_eq!(code(&fovea(&["edge", "--data", p(data), "--address", &addr, "--count", "1"])), 2);
}
