use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use adsandbox::harness::record::EpisodeRecord;
use adsandbox::stack::dataset::{relabel_from_scene, IndexEntry};
use adsandbox::stack::zoo::default_camera;
use adsandbox::stack::{ObstacleClass, Target};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_adsandbox"));
    for (k, _) in std::env::vars() {
        if k.starts_with("ADSANDBOX_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_exits_two_with_usage() {
    let o = run(&["run", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(run(&["run", "--seed", "x"]).status.code(), Some(2));
    assert_eq!(run(&["run", "--scenario", "no_such_scenario"]).status.code(), Some(2));
    assert_eq!(run(&["run", "--executor", "carrier-pigeon"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn run_ego_only_completes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["run", "--scenario", "ego_only", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&out.join("metrics.json"));
    assert_eq!(m["metrics"]["route_completion"], 1.0);
    assert_eq!(m["header"]["schema_version"], 1);
    let digest = m["header"]["config_digest"].as_str().unwrap().to_string();
    let rec = EpisodeRecord::load(&out.join("record.jsonl")).unwrap();
    assert_eq!(rec.header.config_digest, digest);

    let first = (std::fs::read(out.join("metrics.json")).unwrap(), std::fs::read(out.join("record.jsonl")).unwrap());
    assert!(run(&["run", "--scenario", "ego_only", "--out", p(&out)]).status.success());
    let second = (std::fs::read(out.join("metrics.json")).unwrap(), std::fs::read(out.join("record.jsonl")).unwrap());
    assert!(first == second, "rerun changed the outputs");
}

#[test]
fn flags_override_env_which_overrides_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"scenario": "ego_only", "label": "from-file", "seed": 4}"#).unwrap();
    let out = dir.path().join("o");
    let label = |extra: &[&str], env: Option<&str>| {
        let mut c = bin();
        c.args(["run", "--config", p(&cfg), "--out", p(&out)]).args(extra);
        if let Some(v) = env {
            c.env("ADSANDBOX_LABEL", v);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let m = json(&out.join("metrics.json"));
        assert_eq!(m["header"]["config"]["scenario"], "ego_only");
        m["header"]["config"]["label"].as_str().unwrap().to_string()
    };
    assert_eq!(label(&[], None), "from-file");
    assert_eq!(label(&[], Some("from-env")), "from-env");
    assert_eq!(label(&["--label", "from-flag"], Some("from-env")), "from-flag");
    let rec = EpisodeRecord::load(&out.join("record.jsonl")).unwrap();
    assert_eq!(rec.header.scenario.seed, 4);

    std::fs::write(&cfg, r#"{"scenaro": "ego_only"}"#).unwrap();
    assert_eq!(run(&["run", "--config", p(&cfg)]).status.code(), Some(2));
}

#[test]
fn make_assets_is_deterministic_and_labels_match_rerender() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["make-assets", "--frames", "24", "--seed", "5", "--out", p(d)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ma, mb) = (json(&a.join("manifest.json")), json(&b.join("manifest.json")));
    assert_eq!(ma["digest"], mb["digest"]);
    assert_eq!(ma["files"], mb["files"]);
    assert_eq!(ma["frames"], 24);
    for name in ["straight", "curve", "intersection"] {
        assert!(a.join("maps").join(format!("{name}.json")).is_file());
    }
    assert!(a.join("scenarios/cutin_benign.json").is_file());

    let labels = std::fs::read_to_string(a.join("dataset/labels.jsonl")).unwrap();
    let entries: Vec<IndexEntry> = labels.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(entries.len(), 24);
    for e in entries {
        let Target::Class(y) = e.label else { panic!("classification label expected") };
        assert!(a.join("dataset").join(&e.file).is_file());
        let oracle = relabel_from_scene(ObstacleClass::from_index(y), e.provenance, &default_camera()).unwrap();
        assert_eq!(oracle, ObstacleClass::from_index(y), "{}", e.file);
    }
}

#[test]
fn replay_flags_a_tampered_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(run(&["run", "--scenario", "cutin_benign", "--out", p(&out)]).status.success());
    let path = out.join("record.jsonl");
    assert!(run(&["replay", p(&path), "--out", p(&dir.path().join("r1"))]).status.success());

    let mut rec = EpisodeRecord::load(&path).unwrap();
    let c = rec.ticks[30].control;
    rec.ticks[30].control = adsandbox::world::ControlCommand::new(-c.throttle(), 0.5, c.source);
    let bad = dir.path().join("bad.jsonl");
    rec.save(&bad).unwrap();
    let r2 = dir.path().join("r2");
    assert_eq!(run(&["replay", p(&bad), "--out", p(&r2)]).status.code(), Some(1));
    assert_eq!(json(&r2.join("replay.json"))["report"]["first_divergence"], rec.ticks[30].tick);
    assert_eq!(run(&["replay", p(&dir.path().join("missing.jsonl"))]).status.code(), Some(2));
}

/// Starts a long-running subcommand and returns it with the address it printed.
fn spawn_server(args: &[&str], marker: &str) -> (Child, String) {
    let mut child = bin().args(args).stdout(Stdio::piped()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix(marker).unwrap_or_else(|| panic!("unexpected banner {line:?}")).to_string();
    (child, addr)
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn hil_executor_subcommand_matches_sil() {
    let (child, addr) = spawn_server(&["executor", "--port", "0"], "executor listening on ");
    let _guard = Killed(child);
    let dir = tempfile::tempdir().unwrap();
    let (sil, hil) = (dir.path().join("sil"), dir.path().join("hil"));
    assert!(run(&["run", "--scenario", "dense_traffic", "--out", p(&sil)]).status.success());
    let o = run(&["run", "--scenario", "dense_traffic", "--executor", &format!("hil:{addr}"), "--out", p(&hil)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (EpisodeRecord::load(&sil.join("record.jsonl")).unwrap(), EpisodeRecord::load(&hil.join("record.jsonl")).unwrap());
    assert_eq!(a.header.executor, "sil");
    assert_eq!(b.header.executor, "hil");
    assert_eq!(a.state_trace(), b.state_trace());
}

#[test]
fn serve_records_a_scripted_session() {
    use tungstenite::Message;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sessions");
    let (child, url) = spawn_server(&["serve", "--port", "0", "--scenario", "ego_only", "--out", p(&out)], "listening on ");
    let _guard = Killed(child);
    assert!(json(&out.join("session_schema.json"))["schema"]["version"].is_number());

    let (mut ws, _) = tungstenite::connect(url.as_str()).unwrap();
    ws.send(Message::text(r#"{"type":"JOIN","config":{"lockstep":true}}"#)).unwrap();
    ws.send(Message::text(r#"{"type":"STEP","ticks":10}"#)).unwrap();
    ws.send(Message::text(r#"{"type":"END"}"#)).unwrap();
    let summary = loop {
        let Message::Text(t) = ws.read().unwrap() else { continue };
        let v: Value = serde_json::from_str(t.as_str()).unwrap();
        if v["type"] == "SUMMARY" {
            break v;
        }
    };
    let rec = EpisodeRecord::load(Path::new(summary["record"].as_str().unwrap())).unwrap();
    assert_eq!(rec.ticks.len(), 10);
    assert_eq!(rec.header.stack_id, "untrained");
}

#[test]
fn serve_prints_the_session_schema() {
    let o = run(&["serve", "--schema"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["version"], 1);
}

#[test]
fn evolve_writes_lineage_and_falls_back_from_a_dead_proposer() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("evo");
    let o = bin()
        .args(["evolve", "--iterations", "4", "--out", p(&out)])
        .env("ADSANDBOX_PROPOSER_URL", "http://127.0.0.1:9/propose")
        .env("ADSANDBOX_PROPOSER_TIMEOUT_MS", "300")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let evo = json(&out.join("evolution.json"));
    assert_eq!(evo["adversary"]["source"], "heuristic");
    assert_eq!(evo["header"]["config"]["proposer_timeout_ms"], 300);
    let accepted: Vec<f64> = serde_json::from_value(evo["accepted_objectives"].clone()).unwrap();
    assert!(accepted.windows(2).all(|w| w[1] >= w[0]));
    let lineage = std::fs::read_to_string(out.join("lineage.jsonl")).unwrap();
    let lines: Vec<Value> = lineage.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["header"]["config_digest"], evo["header"]["config_digest"]);
    assert_eq!(lines.len(), 1 + 5);
    adsandbox::scenario::ScenarioSpec::load(&out.join("evolved_scenario.json")).unwrap().validate().unwrap();
}

/// Accuracy of the reference trained classifier on 200 held-out frames (seed 8),
/// clean and under PGD(0.1, 0.01, 20) and uniform noise at the same budget.
const FIXTURE_PGD_ACCURACY: f64 = 0.0;
const FIXTURE_NOISE_ACCURACY: f64 = 0.945;

#[test]
fn attack_eval_on_trained_stack_matches_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = run(&["train", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(json(&out.join("train_report.json"))["report"]["final_accuracy"].as_f64().unwrap() >= 0.9);
    let stack = out.join("stack");
    let eval = dir.path().join("e");
    let o = run(&[
        "attack-eval", "--stack", p(&stack), "--attack", "pgd,random", "--epsilon", "0.1", "--alpha", "0.01", "--steps", "20", "--out", p(&eval),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = json(&eval.join("attack_eval.json"))["rows"].clone();
    let acc = |i: usize| rows[i]["accuracy"].as_f64().unwrap();
    assert_eq!(rows[0]["attack"], "clean");
    assert_eq!(rows[1]["attack"], "pgd");
    assert_eq!(rows[2]["attack"], "random");
    assert_eq!(acc(1), FIXTURE_PGD_ACCURACY);
    assert_eq!(acc(2), FIXTURE_NOISE_ACCURACY);
    assert!(acc(0) - acc(1) > 0.7, "accuracy drop {} -> {}", acc(0), acc(1));
    assert!(rows[1]["max_linf"].as_f64().unwrap() <= 0.1 + 1e-9);
}
