use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use adsandbox::attacks::{attack_success_rate, run_attack, AttackConfig, AttackMethod};
use adsandbox::digest::{json_digest, sha256_hex};
use adsandbox::harness::record::EpisodeRecord;
use adsandbox::harness::replay::replay_frames;
use adsandbox::harness::session::{session_schema, SessionServer, SessionServerConfig};
use adsandbox::harness::{
    aggregate as group_records, format_table, replay as replay_record, run_episode, EpisodeOptions, Executor, ExecutorServer,
    ExecutorServerConfig, HilExecutor, SilExecutor, Termination, DEFAULT_TIMEOUT,
};
use adsandbox::scenario::proposer::DEFAULT_PROPOSER_TIMEOUT;
use adsandbox::scenario::{builtin, evolve as evolve_scenario, AttackBinding, EvolutionConfig, ExternalProposer, Proposer, ScenarioSpec};
use adsandbox::stack::dataset::{dump_dataset, synthesize_dataset};
use adsandbox::stack::model::Model;
use adsandbox::stack::zoo::{classifier_spec, default_camera, ModularStack};
use adsandbox::stack::{Target, TrainRecipe};
use adsandbox::world::MapSpec;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{OutputHeader, Settings};
use crate::CliError;

/// Stack name that selects the seeded, untrained classifier.
pub const UNTRAINED: &str = "untrained";
pub const UNTRAINED_SEED: u64 = 1;
pub const DEFAULT_SCENARIO: &str = "cutin_benign";
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_TEST_FRAMES: usize = 200;
pub const DEFAULT_TEST_SEED: u64 = 8;
pub const DEFAULT_SERVE_PORT: u16 = 8765;
pub const DEFAULT_EXECUTOR_PORT: u16 = 9100;

fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn out_dir(s: &Settings) -> PathBuf {
    s.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| failure(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(path, contents).map_err(|e| failure(format!("{}: {e}", path.display())))
}

/// Writes `{"header": .., <body fields>}` as pretty JSON.
fn write_output(path: &Path, header: &OutputHeader, body: Value) -> Result<(), CliError> {
    let mut doc = serde_json::Map::new();
    doc.insert("header".into(), serde_json::to_value(header).expect("header serializes"));
    if let Value::Object(m) = body {
        doc.extend(m);
    }
    write_file(path, &(serde_json::to_string_pretty(&Value::Object(doc)).expect("output serializes") + "\n"))
}

fn load_stack(name: &str) -> Result<ModularStack, CliError> {
    if name == UNTRAINED {
        return Ok(ModularStack::new(Model::init(classifier_spec(), UNTRAINED_SEED).map_err(failure)?));
    }
    let dir = Path::new(name);
    if !dir.is_dir() {
        return Err(usage(format!("stack directory {name} does not exist")));
    }
    ModularStack::load(dir).map_err(|e| usage(format!("stack {name}: {e}")))
}

fn load_scenario(name: &str) -> Result<ScenarioSpec, CliError> {
    let s = ScenarioSpec::resolve(name).map_err(usage)?;
    s.validate().map_err(usage)?;
    Ok(s)
}

fn parse_method(name: &str, s: &Settings) -> Result<AttackConfig, CliError> {
    let method = AttackMethod::parse(name.trim()).ok_or_else(|| usage(format!("unknown attack {name:?}")))?;
    let mut cfg = AttackConfig::new(method, s.epsilon.unwrap_or(DEFAULT_EPSILON));
    if let Some(a) = s.alpha {
        cfg.alpha = a;
    }
    if let Some(n) = s.steps {
        cfg.steps = n;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Method names (comma separated) or a JSON file holding one config or a list.
fn parse_attacks(spec: &str, s: &Settings) -> Result<Vec<AttackConfig>, CliError> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(usage)?;
        let v: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{spec}: {e}")))?;
        let list = if v.is_array() { v } else { Value::Array(vec![v]) };
        let cfgs: Vec<AttackConfig> = serde_json::from_value(list).map_err(|e| usage(format!("{spec}: {e}")))?;
        for c in &cfgs {
            c.validate().map_err(usage)?;
        }
        return Ok(cfgs);
    }
    spec.split(',').map(|m| parse_method(m, s)).collect()
}

fn executor_for(spec: &str) -> Result<Box<dyn Executor>, CliError> {
    match spec {
        "sil" => Ok(Box::new(SilExecutor)),
        _ => match spec.strip_prefix("hil:") {
            Some(addr) if !addr.is_empty() => Ok(Box::new(HilExecutor::connect(addr, DEFAULT_TIMEOUT).map_err(failure)?)),
            _ => Err(usage(format!("executor must be `sil` or `hil:HOST:PORT`, got {spec:?}"))),
        },
    }
}

#[derive(Serialize)]
struct MakeAssetsConfig {
    out: PathBuf,
    seed: u64,
    frames: usize,
}

pub fn make_assets(s: &Settings) -> Result<(), CliError> {
    let recipe = TrainRecipe::default();
    let cfg = MakeAssetsConfig {
        out: out_dir(s),
        seed: s.seed.unwrap_or(recipe.dataset_seed),
        frames: s.frames.unwrap_or(recipe.frames),
    };
    if cfg.frames == 0 {
        return Err(usage("frames must be positive"));
    }
    let header = OutputHeader::new("make-assets", &cfg);
    let data = synthesize_dataset(cfg.frames, cfg.seed, &default_camera()).map_err(failure)?;
    let dataset_dir = cfg.out.join("dataset");
    dump_dataset(&data, &dataset_dir).map_err(failure)?;
    for name in MapSpec::builtin_names() {
        let map = MapSpec::builtin(name).expect("listed map exists");
        write_file(&cfg.out.join("maps").join(format!("{name}.json")), &(serde_json::to_string_pretty(&map).expect("map serializes") + "\n"))?;
    }
    for name in adsandbox::scenario::spec::builtin_names() {
        let scenario = builtin(name).expect("listed scenario exists");
        write_file(&cfg.out.join("scenarios").join(format!("{name}.json")), &(scenario.to_json() + "\n"))?;
    }

    let mut files = BTreeMap::new();
    for sub in ["dataset", "maps", "scenarios"] {
        let dir = cfg.out.join(sub);
        for entry in fs::read_dir(&dir).map_err(failure)? {
            let path = entry.map_err(failure)?.path();
            let bytes = fs::read(&path).map_err(failure)?;
            files.insert(format!("{sub}/{}", path.file_name().unwrap().to_string_lossy()), sha256_hex(&bytes));
        }
    }
    let digest = json_digest(&files);
    write_output(&cfg.out.join("manifest.json"), &header, json!({ "frames": data.len(), "digest": digest, "files": files }))?;
    println!("wrote {} frames, {} files to {} (digest {digest})", data.len(), files.len(), cfg.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainConfig {
    out: PathBuf,
    recipe: TrainRecipe,
}

pub fn train(s: &Settings) -> Result<(), CliError> {
    let d = TrainRecipe::default();
    let cfg = TrainConfig {
        out: out_dir(s),
        recipe: TrainRecipe {
            frames: s.frames.unwrap_or(d.frames),
            dataset_seed: s.seed.unwrap_or(d.dataset_seed),
            epochs: s.epochs.unwrap_or(d.epochs),
            lr: s.lr.unwrap_or(d.lr),
            ..d
        },
    };
    if cfg.recipe.frames == 0 || cfg.recipe.epochs == 0 || !(cfg.recipe.lr > 0.0) {
        return Err(usage("frames, epochs and lr must be positive"));
    }
    let header = OutputHeader::new("train", &cfg);
    let (model, report) = cfg.recipe.train_classifier(&default_camera()).map_err(failure)?;
    let stack_dir = cfg.out.join("stack");
    ModularStack::new(model).save(&stack_dir).map_err(failure)?;
    write_output(&cfg.out.join("train_report.json"), &header, json!({ "stack": stack_dir, "report": report }))?;
    println!(
        "trained {} epochs on {} frames: accuracy {:.4}, stack in {}",
        cfg.recipe.epochs,
        cfg.recipe.frames,
        report.final_accuracy.unwrap_or(f64::NAN),
        stack_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunConfig {
    out: PathBuf,
    scenario: String,
    scenario_digest: String,
    stack: String,
    executor: String,
    label: String,
}

pub fn run(s: &Settings) -> Result<(), CliError> {
    let name = s.scenario.clone().unwrap_or_else(|| DEFAULT_SCENARIO.into());
    let mut scenario = load_scenario(&name)?;
    if let Some(seed) = s.seed {
        scenario.seed = seed;
    }
    match s.attack.as_deref() {
        None => {}
        Some("none") => scenario.attack = None,
        Some(spec) => {
            let mut cfgs = parse_attacks(spec, s)?;
            if cfgs.len() != 1 {
                return Err(usage("run takes a single attack"));
            }
            scenario.attack = Some(AttackBinding::Digital(cfgs.remove(0)));
        }
    }
    let default_label = match &scenario.attack {
        Some(AttackBinding::Digital(c)) => c.method.name().to_string(),
        Some(AttackBinding::Patch(_)) => "patch".into(),
        None => "clean".into(),
    };
    let cfg = RunConfig {
        out: out_dir(s),
        scenario_digest: json_digest(&scenario),
        scenario: name,
        stack: s.stack.clone().unwrap_or_else(|| UNTRAINED.into()),
        executor: s.executor.clone().unwrap_or_else(|| "sil".into()),
        label: s.label.clone().unwrap_or(default_label),
    };
    let header = OutputHeader::new("run", &cfg);
    let stack = load_stack(&cfg.stack)?;
    let mut executor = executor_for(&cfg.executor)?;
    let opts = EpisodeOptions {
        label: cfg.label.clone(),
        stack_id: cfg.stack.clone(),
        config_digest: header.config_digest.clone(),
        ..Default::default()
    };
    let (record, metrics) = run_episode(&scenario, &stack, executor.as_mut(), &opts).map_err(failure)?;
    let record_path = cfg.out.join("record.jsonl");
    create_dir(&cfg.out)?;
    record.save(&record_path).map_err(failure)?;
    write_output(
        &cfg.out.join("metrics.json"),
        &header,
        json!({ "record": record_path, "record_digest": record.digest(), "termination": record.summary.termination, "metrics": metrics }),
    )?;
    println!(
        "{}: {:?} after {} ticks, completion {:.3}, collision {}, min-TTC {:.3}",
        scenario.name, record.summary.termination, metrics.ticks, metrics.route_completion, metrics.collision, metrics.min_ttc
    );
    if record.summary.termination == Termination::Truncated {
        return Err(failure(format!("episode truncated: {}", record.summary.detail)));
    }
    Ok(())
}

#[derive(Serialize)]
struct AttackEvalConfig {
    out: PathBuf,
    stack: String,
    frames: usize,
    seed: u64,
    attacks: Vec<AttackConfig>,
}

#[derive(Debug, Serialize)]
struct EvalRow {
    attack: String,
    epsilon: f64,
    accuracy: f64,
    success_rate: Option<f64>,
    max_linf: f64,
}

pub fn attack_eval(s: &Settings) -> Result<(), CliError> {
    let spec = s.attack.clone().unwrap_or_else(|| AttackMethod::ALL.map(|m| m.name()).join(","));
    let cfg = AttackEvalConfig {
        out: out_dir(s),
        stack: s.stack.clone().unwrap_or_else(|| UNTRAINED.into()),
        frames: s.frames.unwrap_or(DEFAULT_TEST_FRAMES),
        seed: s.seed.unwrap_or(DEFAULT_TEST_SEED),
        attacks: parse_attacks(&spec, s)?,
    };
    if cfg.frames == 0 {
        return Err(usage("frames must be positive"));
    }
    let header = OutputHeader::new("attack-eval", &cfg);
    let stack = load_stack(&cfg.stack)?;
    let model = &stack.classifier;
    let test = synthesize_dataset(cfg.frames, cfg.seed, &default_camera()).map_err(failure)?;
    let labels: Vec<usize> = test
        .iter()
        .map(|f| match f.label {
            Target::Class(y) => y,
            Target::Value(_) => unreachable!("classification dataset"),
        })
        .collect();
    let accuracy = |frames: &[&adsandbox::world::SensorFrame]| -> Result<f64, CliError> {
        let hits: Result<Vec<bool>, _> =
            frames.par_iter().zip(&labels).map(|(f, &y)| model.predict(f).map(|o| o.argmax() == Some(y))).collect();
        Ok(hits.map_err(failure)?.iter().filter(|h| **h).count() as f64 / frames.len() as f64)
    };

    let clean: Vec<_> = test.iter().map(|f| &f.frame).collect();
    let mut rows = vec![EvalRow {
        attack: "clean".into(),
        epsilon: 0.0,
        accuracy: accuracy(&clean)?,
        success_rate: None,
        max_linf: 0.0,
    }];
    for attack in &cfg.attacks {
        let adv: Vec<_> = test
            .par_iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (f, &y))| {
                let per_frame = AttackConfig {
                    seed: attack.seed.wrapping_add(i as u64),
                    ..attack.clone()
                };
                run_attack(model, &f.frame, y, &per_frame)
            })
            .collect::<Result<_, _>>()
            .map_err(failure)?;
        let refs: Vec<_> = adv.iter().collect();
        let pairs: Vec<_> = test.iter().zip(&adv).zip(&labels).map(|((f, a), &y)| (f.frame.clone(), a.clone(), y)).collect();
        rows.push(EvalRow {
            attack: attack.method.name().into(),
            epsilon: attack.epsilon,
            accuracy: accuracy(&refs)?,
            success_rate: Some(attack_success_rate(model, &pairs, attack.target_class.filter(|_| attack.targeted)).map_err(failure)?),
            max_linf: test.iter().zip(&adv).map(|(f, a)| a.max_abs_diff(&f.frame)).fold(0.0, f64::max),
        });
    }
    write_output(&cfg.out.join("attack_eval.json"), &header, json!({ "rows": rows }))?;
    println!("{:<10} {:>8} {:>9} {:>9} {:>9}", "attack", "epsilon", "accuracy", "success", "max_linf");
    for r in &rows {
        let success = r.success_rate.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{:<10} {:>8.4} {:>9.4} {:>9} {:>9.4}", r.attack, r.epsilon, r.accuracy, success, r.max_linf);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvolveConfig {
    out: PathBuf,
    scenario: String,
    stack: String,
    evolution: EvolutionConfig,
    proposer_url: Option<String>,
    proposer_timeout_ms: u64,
}

pub fn evolve(s: &Settings) -> Result<(), CliError> {
    let d = EvolutionConfig::default();
    let cfg = EvolveConfig {
        out: out_dir(s),
        scenario: s.scenario.clone().unwrap_or_else(|| DEFAULT_SCENARIO.into()),
        stack: s.stack.clone().unwrap_or_else(|| UNTRAINED.into()),
        evolution: EvolutionConfig {
            iterations: s.iterations.unwrap_or(d.iterations),
            n_background: s.n_background.unwrap_or(d.n_background),
            seed: s.seed.unwrap_or(d.seed),
            ..d
        },
        proposer_url: s.proposer_url.clone(),
        proposer_timeout_ms: s.proposer_timeout_ms.unwrap_or(DEFAULT_PROPOSER_TIMEOUT.as_millis() as u64),
    };
    cfg.evolution.validate().map_err(usage)?;
    let header = OutputHeader::new("evolve", &cfg);
    let seed = load_scenario(&cfg.scenario)?;
    let stack = load_stack(&cfg.stack)?;
    let proposer = match &cfg.proposer_url {
        Some(url) => Proposer::External(ExternalProposer {
            endpoint: url.clone(),
            timeout: Duration::from_millis(cfg.proposer_timeout_ms),
        }),
        None => Proposer::Heuristic,
    };
    let opts = EpisodeOptions {
        label: "evolve".into(),
        stack_id: cfg.stack.clone(),
        config_digest: header.config_digest.clone(),
        ..Default::default()
    };
    let result = evolve_scenario(&seed, &stack, &cfg.evolution, &proposer, &mut SilExecutor, &opts).map_err(failure)?;
    if let Some(w) = &result.adversary.warning {
        eprintln!("warning: {w}");
    }

    let scenario_path = cfg.out.join("evolved_scenario.json");
    write_file(&scenario_path, &(result.scenario.to_json() + "\n"))?;
    let header_line = serde_json::to_string(&json!({ "header": header })).expect("header serializes");
    write_file(&cfg.out.join("lineage.jsonl"), &format!("{header_line}\n{}", result.lineage_jsonl()))?;
    write_output(
        &cfg.out.join("evolution.json"),
        &header,
        json!({
            "adversary": result.adversary,
            "seed_report": result.seed_report,
            "best_report": result.best_report,
            "accepted_objectives": result.accepted_objectives(),
            "scenario": scenario_path,
            "scenario_digest": json_digest(&result.scenario),
        }),
    )?;
    println!(
        "adversary {} ({:?}); objective {:.4} -> {:.4}, min-TTC {:.4} -> {:.4}, collision {}",
        result.adversary.agent_index,
        result.adversary.source,
        result.seed_report.objective,
        result.best_report.objective,
        result.seed_report.min_ttc,
        result.best_report.min_ttc,
        result.best_report.collision
    );
    Ok(())
}

#[derive(Serialize)]
struct ReplayConfig {
    out: PathBuf,
    record: PathBuf,
    render: bool,
}

pub fn replay(s: &Settings, record: &Path, render: bool) -> Result<(), CliError> {
    let cfg = ReplayConfig {
        out: out_dir(s),
        record: record.to_path_buf(),
        render,
    };
    let header = OutputHeader::new("replay", &cfg);
    let rec = EpisodeRecord::load(record).map_err(|e| usage(format!("{}: {e}", record.display())))?;
    let report = if render {
        replay_frames(&rec, &cfg.out.join("frames"), &default_camera()).map_err(failure)?
    } else {
        replay_record(&rec).map_err(failure)?
    };
    write_output(&cfg.out.join("replay.json"), &header, json!({ "record_digest": rec.digest(), "report": report }))?;
    match report.first_divergence {
        None => {
            println!("replay matched over {} ticks", report.ticks_checked);
            Ok(())
        }
        Some(t) => Err(failure(format!("replay diverged at tick {t}: {}", report.detail))),
    }
}

#[derive(Serialize)]
struct ServeConfig {
    out: PathBuf,
    port: u16,
    scenario: String,
    stack: String,
}

pub fn serve(s: &Settings, schema_only: bool) -> Result<(), CliError> {
    if schema_only {
        println!("{}", serde_json::to_string_pretty(&session_schema()).expect("schema serializes"));
        return Ok(());
    }
    let cfg = ServeConfig {
        out: out_dir(s),
        port: s.port.unwrap_or(DEFAULT_SERVE_PORT),
        scenario: s.scenario.clone().unwrap_or_else(|| DEFAULT_SCENARIO.into()),
        stack: s.stack.clone().unwrap_or_else(|| UNTRAINED.into()),
    };
    let header = OutputHeader::new("serve", &cfg);
    let scenario = load_scenario(&cfg.scenario)?;
    let stack = load_stack(&cfg.stack)?;
    create_dir(&cfg.out)?;
    write_output(&cfg.out.join("session_schema.json"), &header, json!({ "schema": session_schema() }))?;
    let mut server_cfg = SessionServerConfig::new(Arc::new(stack), scenario, cfg.out.clone());
    server_cfg.options.stack_id = cfg.stack.clone();
    server_cfg.options.config_digest = header.config_digest.clone();
    let server = SessionServer::start(&format!("127.0.0.1:{}", cfg.port), server_cfg).map_err(failure)?;
    println!("listening on ws://{}", server.addr());
    let _ = std::io::stdout().flush();
    server.join();
    Ok(())
}

pub fn executor(s: &Settings) -> Result<(), CliError> {
    let port = s.port.unwrap_or(DEFAULT_EXECUTOR_PORT);
    let server = ExecutorServer::start(&format!("127.0.0.1:{port}"), ExecutorServerConfig::default()).map_err(failure)?;
    println!("executor listening on {}", server.addr());
    let _ = std::io::stdout().flush();
    server.join();
    Ok(())
}

#[derive(Serialize)]
struct AggregateConfig {
    out: PathBuf,
    records: Vec<PathBuf>,
}

pub fn aggregate(s: &Settings, records: &[PathBuf]) -> Result<(), CliError> {
    if records.is_empty() {
        return Err(usage("aggregate needs at least one record"));
    }
    let cfg = AggregateConfig {
        out: out_dir(s),
        records: records.to_vec(),
    };
    let header = OutputHeader::new("aggregate", &cfg);
    let loaded: Vec<EpisodeRecord> = records
        .iter()
        .map(|p| EpisodeRecord::load(p).map_err(|e| usage(format!("{}: {e}", p.display()))))
        .collect::<Result<_, _>>()?;
    let rows = group_records(&loaded);
    write_output(&cfg.out.join("aggregate.json"), &header, json!({ "rows": rows }))?;
    print!("{}", format_table(&rows));
    Ok(())
}
