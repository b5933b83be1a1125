mod common;

use std::time::Duration;

use adsandbox::attacks::{AttackConfig, AttackMethod};
use adsandbox::harness::record::EpisodeRecord;
use adsandbox::harness::replay::replay_frames;
use adsandbox::harness::{
    aggregate, compute_metrics, replay, run_episode, EpisodeOptions, ExecutorServer, ExecutorServerConfig, HilExecutor, SilExecutor,
    Termination, DEFAULT_TIMEOUT,
};
use adsandbox::scenario::{builtin, AttackBinding};
use adsandbox::world::vehicle::{ControlCommand, ControlSource};
use common::{fuzz_executor, long_scenario, untrained_stack};

fn opts(label: &str) -> EpisodeOptions {
    EpisodeOptions {
        label: label.into(),
        stack_id: "untrained".into(),
        ..Default::default()
    }
}

#[test]
fn identical_runs_have_identical_digests() {
    let stack = untrained_stack();
    let s = builtin("dense_traffic").unwrap();
    let (a, _) = run_episode(&s, &stack, &mut SilExecutor, &opts("clean")).unwrap();
    let (b, _) = run_episode(&s, &stack, &mut SilExecutor, &opts("clean")).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    let mut other = s.clone();
    other.seed += 1;
    let (c, _) = run_episode(&other, &stack, &mut SilExecutor, &opts("clean")).unwrap();
    assert_ne!(a.header.run_digest, c.header.run_digest);
}

#[test]
fn replay_matches_and_locates_a_tampered_control() {
    let stack = untrained_stack();
    let s = builtin("cutin_benign").unwrap();
    let (record, _) = run_episode(&s, &stack, &mut SilExecutor, &opts("clean")).unwrap();
    let parsed = EpisodeRecord::from_jsonl(&record.to_jsonl()).unwrap();
    assert_eq!(parsed, record);
    assert!(replay(&parsed).unwrap().matched());

    for k in [0usize, 1, 57, record.ticks.len() - 1] {
        let mut tampered = parsed.clone();
        let c = tampered.ticks[k].control;
        let flipped = if c.throttle() > 0.0 { -1.0 } else { 1.0 };
        tampered.ticks[k].control = ControlCommand::new(flipped, c.steer_cmd(), c.source);
        let report = replay(&tampered).unwrap();
        assert_eq!(report.first_divergence, Some(tampered.ticks[k].tick), "tampered tick {k}");
    }
}

#[test]
fn replay_frames_writes_one_image_per_tick() {
    let stack = untrained_stack();
    let mut s = builtin("ego_only").unwrap();
    s.episode_ticks = 12;
    let (record, _) = run_episode(&s, &stack, &mut SilExecutor, &opts("clean")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = replay_frames(&record, dir.path(), &Default::default()).unwrap();
    assert!(report.matched());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 12);
}

#[test]
fn sil_and_hil_traces_are_bit_identical() {
    let stack = untrained_stack();
    let s = long_scenario(500);
    let server = ExecutorServer::start("127.0.0.1:0", ExecutorServerConfig::default()).unwrap();
    let mut hil = HilExecutor::connect(&server.addr().to_string(), DEFAULT_TIMEOUT).unwrap();
    let (sil_rec, _) = run_episode(&s, &stack, &mut SilExecutor, &opts("sil")).unwrap();
    let (hil_rec, _) = run_episode(&s, &stack, &mut hil, &opts("hil")).unwrap();
    assert_eq!(sil_rec.ticks.len(), 500);
    assert_eq!(sil_rec.summary.termination, Termination::TickLimit);
    assert_eq!(sil_rec.state_trace(), hil_rec.state_trace());
    assert_eq!(sil_rec.summary.final_digest, hil_rec.summary.final_digest);
}

#[test]
fn executor_survives_malformed_frames() {
    let server = ExecutorServer::start("127.0.0.1:0", ExecutorServerConfig::default()).unwrap();
    let hangs = fuzz_executor(server.addr(), 2_000, 8, Duration::from_secs(5));
    assert_eq!(hangs, 0);
    let mut hil = HilExecutor::connect(&server.addr().to_string(), DEFAULT_TIMEOUT).unwrap();
    let s = builtin("ego_only").unwrap();
    use adsandbox::harness::Executor;
    hil.load(&s, 0.05).unwrap();
    hil.apply(0, &s.initial_ego(), &ControlCommand::idle(), 0.05).unwrap();
}

/// Answers HELLO and LOAD, then hangs up on the first STEP.
fn executor_that_dies() -> std::net::SocketAddr {
    use adsandbox::harness::protocol::{read_message, write_message, ExecutorMessage, PROTOCOL_VERSION};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        loop {
            match read_message(&mut s) {
                Ok(ExecutorMessage::Hello { .. }) => {
                    write_message(&mut s, &ExecutorMessage::Hello { version: PROTOCOL_VERSION }).unwrap()
                }
                Ok(ExecutorMessage::Load { .. }) => write_message(
                    &mut s,
                    &ExecutorMessage::Event {
                        kind: "loaded".into(),
                        payload: serde_json::Value::Null,
                    },
                )
                .unwrap(),
                _ => return,
            }
        }
    });
    addr
}

#[test]
fn dead_executor_truncates_the_record() {
    let stack = untrained_stack();
    let s = long_scenario(200);
    let mut hil = HilExecutor::connect(&executor_that_dies().to_string(), Duration::from_millis(500)).unwrap();
    let (rec, m) = run_episode(&s, &stack, &mut hil, &opts("hil")).unwrap();
    assert_eq!(rec.summary.termination, Termination::Truncated);
    assert!(rec.ticks.is_empty());
    assert!(m.truncated);
}

#[test]
fn aggregate_groups_by_label() {
    let stack = untrained_stack();
    let mut s = builtin("cutin_benign").unwrap();
    s.episode_ticks = 40;
    let (r1, _) = run_episode(&s, &stack, &mut SilExecutor, &opts("clean")).unwrap();
    let mut s2 = s.clone();
    s2.agents[0].spawn.x = 30.0;
    let (r2, _) = run_episode(&s2, &stack, &mut SilExecutor, &opts("clean")).unwrap();
    let mut s3 = s.clone();
    s3.attack = Some(AttackBinding::Digital(AttackConfig::new(AttackMethod::Fgsm, 0.05)));
    let (r3, _) = run_episode(&s3, &stack, &mut SilExecutor, &opts("fgsm")).unwrap();

    let rows = aggregate(&[r1.clone(), r3.clone(), r2.clone()]);
    assert_eq!(rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), ["clean", "fgsm"]);
    let (m1, m2, m3) = (compute_metrics(&r1), compute_metrics(&r2), compute_metrics(&r3));
    let clean = &rows[0];
    assert_eq!(clean.episodes, 2);
    assert_eq!(clean.mean_route_completion, (m1.route_completion + m2.route_completion) / 2.0);
    let finite: Vec<f64> = [m1.min_ttc, m2.min_ttc].into_iter().filter(|v| v.is_finite()).collect();
    let expect_ttc = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
    assert_eq!(clean.mean_min_ttc, expect_ttc);
    assert_eq!(clean.mean_attack_success_rate, None);
    assert_eq!(rows[1].episodes, 1);
    assert_eq!(rows[1].mean_attack_success_rate, m3.attack_success_rate);
    assert!(m3.attacked && !m1.attacked);
    assert!(r3.ticks.iter().all(|t| t.attack.as_ref().is_some_and(|a| a.linf <= 0.05 + 1e-12)));
    assert!(r1.sources().iter().all(|s| *s == ControlSource::Autonomy));
}
