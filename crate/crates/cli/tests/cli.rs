use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fastsearch_core::preset::Preset;
use serde_json::Value;

fn tiny_preset() -> Preset {
    let mut p = Preset::builtin("desk").unwrap();
    p.space.layers = 3;
    p.space.channel_scale = 0.0625;
    p.task.height = 32;
    p.task.width = 32;
    p.task.train_samples = 8;
    p.task.val_samples = 4;
    p.search.pretrain_epochs = 1;
    p.search.search_epochs = 2;
    p.search.batch_size = 4;
    p.train.epochs = 2;
    p.train.batch_size = 4;
    p.teacher_epochs = 2;
    p
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.json"), serde_json::to_string(&tiny_preset()).unwrap()).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_fastsearch")).current_dir(self.dir.path()).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        o
    }

    /// Runs with the tiny preset file.
    fn tiny(&self, args: &[&str]) -> Output {
        let mut a = args.to_vec();
        a.extend(["--config", "tiny.json"]);
        self.ok(&a)
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn error_of(o: &Output) -> Value {
    assert!(!o.status.success());
    let line = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {line}"))
}

#[test]
fn profile_with_injected_deltas_solves_the_reference_weights() {
    let env = Env::new();
    env.ok(&["profile", "--deltas", "10.42,0.01,5.54", "--out", "p"]);
    assert_eq!(json(&env.path("p/weights.json"))["rounded"], serde_json::json!([0.001, 0.997, 0.002]));
    assert_eq!(json(&env.path("p/sensitivity.json"))["source"], "injected");

    env.ok(&["profile", "--deltas", "1,1,1", "--out", "q"]);
    assert_eq!(json(&env.path("q/weights.json"))["rounded"], serde_json::json!([0.333, 0.333, 0.333]));
}

#[test]
fn profile_probe_balances_the_table_deltas() {
    let env = Env::new();
    env.ok(&["profile", "--out", "p"]);
    let s = json(&env.path("p/sensitivity.json"));
    let w = json(&env.path("p/weights.json"));
    assert_eq!(s["source"], "probe");
    let d = [s["delta_o"].as_f64().unwrap(), s["delta_s"].as_f64().unwrap(), s["delta_chi"].as_f64().unwrap()];
    let w = [w["w1"].as_f64().unwrap(), w["w2"].as_f64().unwrap(), w["w3"].as_f64().unwrap()];
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((d[0] * w[0] - d[1] * w[1]).abs() < 1e-9 && (d[1] * w[1] - d[2] * w[2]).abs() < 1e-9);
    let m = json(&env.path("p/manifest.json"));
    let listed: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|a| a["path"].as_str().unwrap()).collect();
    assert_eq!(listed, ["lut.csv", "sensitivity.json", "weights.json"]);
    assert_eq!(m["status"], "ok");
}

#[test]
fn failures_emit_error_json() {
    let env = Env::new();
    std::fs::write(env.path("bad.json"), "{\"space\": 1}").unwrap();
    let e = error_of(&env.run(&["profile", "--config", "bad.json"]));
    assert_eq!(e["kind"], "invalid_config");

    let e = error_of(&env.run(&["profile", "--preset", "nope"]));
    assert_eq!(e["kind"], "invalid_config");

    let e = error_of(&env.run(&["profile", "--deltas", "1,0,1", "--out", "z"]));
    assert_eq!(e["kind"], "degenerate_sensitivity");
    assert_eq!(json(&env.path("z/manifest.json"))["status"], "failed");

    let o = env.run(&["profile", "--deltas", "1,2"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_of(&o)["kind"], "usage");

    let o = Command::new(env!("CARGO_BIN_EXE_fastsearch"))
        .current_dir(env.dir.path())
        .env("FASTSEARCH_THREADS", "0")
        .args(["profile"])
        .output()
        .unwrap();
    assert_eq!(error_of(&o)["kind"], "invalid_config");
}

#[test]
fn foreign_output_directories_are_refused() {
    let env = Env::new();
    std::fs::create_dir(env.path("busy")).unwrap();
    std::fs::write(env.path("busy/notes.txt"), "keep me").unwrap();
    let e = error_of(&env.run(&["profile", "--out", "busy"]));
    assert!(e["message"].as_str().unwrap().contains("not empty"));
    assert_eq!(std::fs::read_to_string(env.path("busy/notes.txt")).unwrap(), "keep me");
}

#[test]
fn zero_epochs_write_a_header_only_trajectory() {
    let env = Env::new();
    env.tiny(&["search", "--epochs", "0", "--out", "s"]);
    let t = std::fs::read_to_string(env.path("s/trajectory.csv")).unwrap();
    assert_eq!(t, "step,phase,L_seg,latency_ms,total,val_mIoU\n");
    let arch = json(&env.path("s/arch.json"));
    for cell in arch["cells"].as_array().unwrap() {
        let a: Vec<f64> = cell["alpha"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!(a.iter().all(|v| *v == a[0]), "alpha moved without training");
    }
}

#[test]
fn search_reruns_are_byte_identical_and_fully_listed() {
    let env = Env::new();
    env.tiny(&["search", "--seed", "42", "--out", "a"]);
    env.tiny(&["search", "--seed", "42", "--out", "b"]);
    let ta = std::fs::read(env.path("a/trajectory.csv")).unwrap();
    assert_eq!(ta, std::fs::read(env.path("b/trajectory.csv")).unwrap());
    let (ma, mb) = (json(&env.path("a/manifest.json")), json(&env.path("b/manifest.json")));
    assert_eq!(ma["input_hash"], mb["input_hash"]);
    assert_eq!(ma["seed"], 42);
    assert_eq!(ma["artifacts"], mb["artifacts"]);

    let mut on_disk = Vec::new();
    for e in walk(&env.path("a")) {
        let rel = e.strip_prefix(env.path("a")).unwrap().to_string_lossy().replace('\\', "/");
        if rel != "manifest.json" {
            on_disk.push(rel);
        }
    }
    on_disk.sort();
    let listed: Vec<String> = ma["artifacts"].as_array().unwrap().iter().map(|a| a["path"].as_str().unwrap().to_string()).collect();
    assert_eq!(listed, on_disk);
    // rerunning into the same directory replaces the previous artifacts
    env.tiny(&["search", "--seed", "42", "--out", "a"]);
    assert_eq!(std::fs::read(env.path("a/trajectory.csv")).unwrap(), ta);

    env.tiny(&["search", "--seed", "7", "--mode", "naive", "--out", "c"]);
    assert_ne!(std::fs::read(env.path("c/trajectory.csv")).unwrap(), ta);
    assert_eq!(json(&env.path("c/summary.json"))["mode"], "naive");
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn search_derive_train_report_pipeline() {
    let env = Env::new();
    env.tiny(&["search", "--out", "s"]);
    env.ok(&["derive", "--run", "s", "--target-ms", "5"]);
    let t = json(&env.path("s/derive/targets.json"));
    let cands = t["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 3);
    for c in cands {
        assert!(env.path("s/derive").join(c["file"].as_str().unwrap()).exists());
        let (acc, lat) = (c["val_miou"].as_f64().unwrap(), c["latency_ms"].as_f64().unwrap());
        // default exponents are -0.07 on both sides of the budget
        assert!((c["target"].as_f64().unwrap() - acc * (lat / 5.0f64).powf(-0.07)).abs() < 1e-12);
    }
    assert!(cands.iter().any(|c| c["rates"] == t["selected"]));

    let e = error_of(&env.run(&["derive", "--run", "s", "--preset", "desk"]));
    assert_eq!(e["kind"], "invalid_config");

    env.tiny(&["train", "--genotype", "s/derive/genotype_8_16.json", "--out", "t"]);
    let m = json(&env.path("t/metrics.json"));
    assert!(m["val_miou"].as_f64().unwrap() >= 0.0 && m["latency_ms"].as_f64().unwrap() > 0.0);
    assert!(m["teacher"].is_null());

    env.tiny(&["train", "--genotype", "s/derive/genotype_8_16.json", "--teacher", "t", "--epochs", "1", "--out", "d"]);
    let m = json(&env.path("d/metrics.json"));
    assert_eq!(m["teacher"]["source"], "weights");
    assert_eq!(m["epochs"], 1);

    env.ok(&["report", "--run", "s"]);
    let svgs: Vec<PathBuf> = walk(&env.path("s/report")).into_iter().filter(|p| p.extension().is_some_and(|e| e == "svg")).collect();
    assert_eq!(svgs.len(), 2);
    env.ok(&["report", "--run", "t"]);
    assert!(env.path("t/report/summary.json").exists());
}

#[test]
fn cosearch_report_has_two_svgs_and_latency_summary() {
    let env = Env::new();
    env.tiny(&["cosearch", "--out", "c"]);
    for f in ["teacher.json", "student.json", "teacher_genotype.json", "student_genotype.json", "state/state.json"] {
        assert!(env.path("c").join(f).exists(), "{f} missing");
    }
    assert_eq!(json(&env.path("c/summary.json"))["teacher_pinned"], true);
    env.ok(&["report", "--run", "c"]);
    let files: Vec<PathBuf> = walk(&env.path("c/report"));
    assert_eq!(files.iter().filter(|p| p.extension().is_some_and(|e| e == "svg")).count(), 2);
    let s = json(&env.path("c/report/summary.json"));
    let (t, st) = (s["teacher_latency_ms"].as_f64().unwrap(), s["student_latency_ms"].as_f64().unwrap());
    assert_eq!(s["student_not_slower"], st <= t);
    env.ok(&["derive", "--run", "c", "--arch", "teacher"]);
    assert_eq!(json(&env.path("c/derive/targets.json"))["source"], "teacher.json");
}

#[test]
fn seed_42_trajectory_matches_the_golden_hash() {
    use sha2::{Digest, Sha256};
    let env = Env::new();
    env.tiny(&["search", "--seed", "42", "--out", "g"]);
    let got = hex::encode(Sha256::digest(std::fs::read(env.path("g/trajectory.csv")).unwrap()));
    let want = include_str!("golden/tiny_seed42_search.sha256").trim();
    assert_eq!(got, want, "trajectory changed; if intended, update tests/golden/tiny_seed42_search.sha256");
}
