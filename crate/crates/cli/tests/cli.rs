use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
gen_eye_size = [16, 24]
gen_face_size = [32, 32]
subjects = 4
depth = 10
base_width = 4
stem = "compact"
face_input = [16, 16]
eye_input = [16, 24]
hog_cells = [4, 8]
detector_depth = 10
detector_base_width = 4
detector_input = [16, 24]
epochs = 2
stage1_max_epochs = 2
batch_size = 8
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_headgaze"));
    c.env_remove("HEADGAZE_OUT_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    Fixture { _tmp: tmp, root, config }
}

impl Fixture {
    fn generate(&self, name: &str, n: usize, seed: u64) -> PathBuf {
        let out = self.root.join(name);
        ok(&["generate", "--n", &n.to_string(), "--seed", &seed.to_string(), "--config", s(&self.config), "--out", s(&out)]);
        out
    }
}

#[test]
fn generate_writes_manifest_and_is_reproducible() {
    let f = fixture();
    let a = f.generate("a", 12, 7);
    let b = f.generate("b", 12, 7);
    let ma = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(ma.lines().count(), 13); // header + records
    assert_eq!(ma, fs::read_to_string(b.join("manifest.jsonl")).unwrap());
    for i in 0..12 {
        let name = format!("images/{i:07}_left.png");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
    assert!(a.join("run.toml").is_file());
}

#[test]
fn usage_errors_exit_nonzero() {
    let f = fixture();
    let out = run(&["generate", "--n", "0", "--out", s(&f.root.join("zero"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = run(&["generate", "--n", "2", "--set", "no_such_key=1", "--out", s(&f.root.join("k"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--regime", "bogus", "--data", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_empty_output_needs_force() {
    let f = fixture();
    let a = f.generate("a", 2, 1);
    let args = ["generate", "--n", "2", "--config", s(&f.config), "--out", s(&a)];
    assert_eq!(run(&args).status.code(), Some(2));
    ok(&[&args[..], &["--force"]].concat());
}

#[test]
fn output_root_from_environment() {
    let f = fixture();
    let out = bin()
        .args(["generate", "--n", "2", "--config", s(&f.config)])
        .env("HEADGAZE_OUT_ROOT", &f.root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(f.root.join("generate").join("manifest.jsonl").is_file());
}

fn history_lines(dir: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(dir.join("history.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn stages(lines: &[serde_json::Value]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for l in lines.iter().filter(|l| l["kind"] == "epoch") {
        let st = l["stage"].as_str().unwrap().to_string();
        if out.last() != Some(&st) {
            out.push(st);
        }
    }
    out
}

#[test]
fn train_eval_report_round() {
    let f = fixture();
    let data = f.generate("data", 40, 3);
    let run_dir = f.root.join("run");
    ok(&["train", "--regime", "implicit", "--beta", "0.3", "--data", s(&data), "--config", s(&f.config), "--out", s(&run_dir)]);
    for name in ["run.toml", "history.jsonl", "model.safetensors", "model.safetensors.meta"] {
        assert!(run_dir.join(name).is_file(), "{name}");
    }
    let lines = history_lines(&run_dir);
    assert_eq!(lines.len(), 2);
    for l in &lines {
        let (g, h, t) = (l["train_gaze_loss"].as_f64().unwrap(), l["train_head_loss"].as_f64().unwrap(), l["train_loss"].as_f64().unwrap());
        assert!((t - (g + 0.3 * h)).abs() < 1e-4 * t.max(1.0));
    }
    assert!(fs::read_to_string(run_dir.join("run.toml")).unwrap().contains("beta = 0.3"));

    let ev = f.root.join("eval");
    ok(&["eval", "--checkpoint", s(&run_dir.join("model.safetensors")), "--data", s(&data), "--out", s(&ev), "--classify"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert!(m["aem"].as_f64().unwrap() > 0.0 && m["vem"].as_f64().unwrap() > 0.0);
    let rows = m["confusion"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 9);

    let rep = f.root.join("report");
    let rep_run = f.root.join("reprun");
    fs::create_dir_all(&rep_run).unwrap();
    fs::copy(run_dir.join("history.jsonl"), rep_run.join("history.jsonl")).unwrap();
    fs::copy(ev.join("metrics.json"), rep_run.join("metrics.json")).unwrap();
    ok(&["report", "--run", s(&rep_run), "--data", s(&data), "--out", s(&rep)]);
    for name in ["summary.json", "loss_curves.png", "aem_by_epoch.png", "head_gaze_scatter.png", "confusion.png"] {
        assert!(rep.join(name).is_file(), "{name}");
    }

    let missing = run(&["eval", "--checkpoint", s(&f.root.join("nope.safetensors")), "--data", s(&data), "--out", s(&f.root.join("e2"))]);
    assert!(!missing.status.success());
}

#[test]
fn explicit_history_has_one_boundary() {
    let f = fixture();
    let data = f.generate("data", 24, 4);
    let run_dir = f.root.join("run");
    ok(&["train", "--regime", "explicit", "--data", s(&data), "--config", s(&f.config), "--out", s(&run_dir)]);
    assert_eq!(stages(&history_lines(&run_dir)), vec!["head", "gaze"]);
}

#[test]
fn nohp_runs_three_stages() {
    let f = fixture();
    let synth = f.generate("synth", 24, 5);
    let target = f.generate("target", 16, 6);
    let run_dir = f.root.join("run");
    ok(&[
        "train", "--regime", "nohp", "--synth", s(&synth), "--target", s(&target), "--config", s(&f.config), "--out", s(&run_dir),
    ]);
    let lines = history_lines(&run_dir);
    assert_eq!(stages(&lines), vec!["landmarks", "modules", "final"]);
    assert!(lines.iter().any(|l| l["kind"] == "baseline"));

    let ev = f.root.join("eval");
    ok(&["eval", "--checkpoint", s(&run_dir.join("model.safetensors")), "--data", s(&target), "--split", "all", "--out", s(&ev)]);

    let bad = run(&[
        "train", "--regime", "nohp", "--synth", s(&synth), "--target", s(&target), "--config", s(&f.config), "--set", "strategy=bec",
        "--out", s(&f.root.join("bad")),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = run(&["train", "--regime", "nohp", "--data", s(&synth), "--config", s(&f.config), "--out", s(&f.root.join("bad2"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn classifier_eval_reports_confusion() {
    let f = fixture();
    let data = f.generate("data", 24, 8);
    let run_dir = f.root.join("run");
    ok(&["train", "--regime", "classifier", "--data", s(&data), "--config", s(&f.config), "--out", s(&run_dir)]);
    let ev = f.root.join("eval");
    ok(&["eval", "--checkpoint", s(&run_dir.join("model.safetensors")), "--data", s(&data), "--split", "all", "--out", s(&ev)]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    for (row, zero) in m["confusion"]["rows"].as_array().unwrap().iter().zip(0..) {
        let sum: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        let flagged = m["confusion"]["zero_support"].as_array().unwrap().iter().any(|z| z.as_u64() == Some(zero + 1));
        assert!(flagged || (sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn lda_and_mhog_flags_train() {
    let f = fixture();
    let data = f.generate("data", 40, 9);
    let run_dir = f.root.join("run");
    ok(&[
        "train", "--data", s(&data), "--config", s(&f.config), "--set", "mhog=true", "--set", "lda=true", "--set", "lda_bin_width=15",
        "--out", s(&run_dir),
    ]);
    assert!(run_dir.join("lda.bin").is_file());
    ok(&["eval", "--checkpoint", s(&run_dir.join("model.safetensors")), "--data", s(&data), "--out", s(&f.root.join("ev"))]);
}
