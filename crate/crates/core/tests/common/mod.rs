//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use adsandbox::scenario::{AgentSpec, ScenarioSpec};
use adsandbox::attacks::{patch_gradient, PatchSpec};
use adsandbox::stack::dataset::classification_scene;
use adsandbox::stack::loss::{backward_input, loss, LossKind, Target};
use adsandbox::stack::model::Model;
use adsandbox::stack::tensor::Tensor;
use adsandbox::stack::TrainRecipe;
use adsandbox::stack::zoo::{classifier_spec, default_camera, ModularStack};
use adsandbox::world::geom::{Obb, Vec2};
use adsandbox::world::map::Pose;
use adsandbox::world::render::{render_sensor, SensorFrame};
use adsandbox::world::state::Behavior;
use adsandbox::world::vehicle::{VehicleClass, DEFAULT_DT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Area of the intersection of two convex quadrilaterals (Sutherland–Hodgman).
pub fn intersection_area(a: &[Vec2; 4], b: &[Vec2; 4]) -> f64 {
    let ccw = |p: &[Vec2; 4]| {
        let mut v = p.to_vec();
        if signed_area(&v) < 0.0 {
            v.reverse();
        }
        v
    };
    let mut poly = ccw(a);
    let clip = ccw(b);
    for i in 0..clip.len() {
        let (c0, c1) = (clip[i], clip[(i + 1) % clip.len()]);
        let side = |p: Vec2| (c1 - c0).cross(p - c0);
        let input = std::mem::take(&mut poly);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                poly.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                poly.push(p + (q - p) * t);
            }
        }
        if poly.is_empty() {
            return 0.0;
        }
    }
    signed_area(&poly).abs()
}

fn signed_area(p: &[Vec2]) -> f64 {
    let n = p.len();
    (0..n).map(|i| p[i].cross(p[(i + 1) % n])).sum::<f64>() * 0.5
}

/// Does any point of a dense grid over `a` lie strictly inside both boxes?
pub fn sampled_overlap(a: &Obb, b: &Obb, n: usize) -> bool {
    let (ax, ay) = a.axes();
    for i in 0..n {
        for j in 0..n {
            let u = (i as f64 + 0.5) / n as f64 - 0.5;
            let v = (j as f64 + 0.5) / n as f64 - 0.5;
            let p = a.center + ax * (u * 2.0 * a.half_length) + ay * (v * 2.0 * a.half_width);
            if a.contains_strict(p) && b.contains_strict(p) {
                return true;
            }
        }
    }
    false
}

/// Central finite difference of `f` along coordinate `i`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Closed-form distance from `p` to the segment `a`–`b`.
fn segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let d = b - a;
    let t = ((p - a).dot(d) / d.dot(d)).clamp(0.0, 1.0);
    (p - (a + d * t)).norm()
}

/// Closest approach of each benign agent (constant speed along its spawn heading)
/// to a polyline route, over ticks `0..=ticks`.
pub fn brute_force_route_distances(scenario: &ScenarioSpec) -> Vec<f64> {
    let route = &scenario.ego.route;
    scenario
        .agents
        .iter()
        .map(|a| {
            let dir = Vec2::new(a.spawn.heading.cos(), a.spawn.heading.sin());
            (0..=scenario.episode_ticks)
                .map(|k| {
                    let p = a.spawn.position() + dir * (a.speed * k as f64 * DEFAULT_DT);
                    route
                        .windows(2)
                        .map(|w| segment_distance(p, w[0], w[1]))
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Three cut-in agents on the straight road with random placement, heading and speed.
pub fn random_three_agent_scene(seed: u64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = adsandbox::scenario::builtin("cutin_benign").unwrap();
    s.name = format!("random_{seed}");
    s.episode_ticks = 200;
    s.agents = (0..3)
        .map(|_| AgentSpec {
            class: VehicleClass::Car,
            spawn: Pose {
                x: rng.random_range(-30.0..200.0),
                y: rng.random_range(-1.6..5.1),
                heading: rng.random_range(-0.05..0.05),
            },
            speed: rng.random_range(0.0..15.0),
            behavior: Behavior::CutIn {
                trigger_gap: rng.random_range(0.0..60.0),
                lateral_shift: rng.random_range(-8.0..8.0),
                aggressiveness: rng.random_range(0.5..6.0),
            },
        })
        .collect();
    s
}

pub enum StubReply {
    Json(String),
    Garbage,
    Sleep(Duration),
}

/// Minimal HTTP server answering every request with `reply`. Returns the URL and a
/// request counter.
pub fn stub_proposer(reply: StubReply) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/propose", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let reply = Arc::new(reply);
    thread::spawn(move || {
        for conn in listener.incoming() {
            let Ok(mut s) = conn else { continue };
            counter.fetch_add(1, Ordering::SeqCst);
            let reply = reply.clone();
            thread::spawn(move || {
                let _ = s.set_read_timeout(Some(Duration::from_secs(2)));
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                // Read headers, then the declared body.
                let body_len = loop {
                    let Ok(n) = s.read(&mut chunk) else { return };
                    if n == 0 {
                        return;
                    }
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(end) = find(&buf, b"\r\n\r\n") {
                        let head = String::from_utf8_lossy(&buf[..end]).to_ascii_lowercase();
                        let len = head
                            .lines()
                            .find_map(|l| l.strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap_or(0)))
                            .unwrap_or(0);
                        break end + 4 + len;
                    }
                };
                while buf.len() < body_len {
                    match s.read(&mut chunk) {
                        Ok(0) | Err(_) => break,
                        Ok(n) => buf.extend_from_slice(&chunk[..n]),
                    }
                }
                let body = match &*reply {
                    StubReply::Json(j) => j.clone(),
                    StubReply::Garbage => "this is not json".to_string(),
                    StubReply::Sleep(d) => {
                        thread::sleep(*d);
                        r#"{"agent_index":0,"rationale":"late"}"#.to_string()
                    }
                };
                let resp = format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    body.len(),
                    body
                );
                let _ = s.write_all(resp.as_bytes());
            });
        }
    });
    (url, hits)
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Untrained classifier stack: cheap, deterministic, exposes a white-box model.
pub fn untrained_stack() -> ModularStack {
    ModularStack::new(Model::init(classifier_spec(), 1).unwrap())
}

/// The reference classifier trained from scratch, with its training accuracy.
pub fn trained_stack() -> (ModularStack, f64) {
    let (m, report) = TrainRecipe::default().train_classifier(&default_camera()).unwrap();
    (ModularStack::new(m), report.final_accuracy.unwrap())
}

/// `dense_traffic` on a route long enough that the episode ends on the tick limit.
pub fn long_scenario(ticks: u64) -> ScenarioSpec {
    let mut s = adsandbox::scenario::builtin("dense_traffic").unwrap();
    s.name = "long_dense".into();
    s.ego.route = vec![Vec2::new(0.0, 0.0), Vec2::new(340.0, 0.0)];
    s.episode_ticks = ticks;
    s
}

/// One malformed or hostile byte sequence for the executor, chosen by `kind`.
pub fn malformed_frame(kind: u64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    use adsandbox::harness::protocol::{encode_frame, ExecutorMessage, MAX_FRAME, PROTOCOL_VERSION};
    let valid_hello = encode_frame(&ExecutorMessage::Hello { version: PROTOCOL_VERSION });
    let mut random_bytes = |n: usize| (0..n).map(|_| rng.random::<u8>()).collect::<Vec<u8>>();
    match kind % 9 {
        0 => {
            let n = 1 + (random_bytes(1)[0] as usize % 64);
            random_bytes(n)
        }
        1 => {
            let n = 1 + (random_bytes(1)[0] as usize % 200);
            let mut v = (n as u32).to_be_bytes().to_vec();
            v.extend(random_bytes(n));
            v
        }
        2 => {
            let mut v = encode_frame(&ExecutorMessage::step(0, &adsandbox::world::vehicle::ControlCommand::idle()));
            for _ in 0..3 {
                let i = 4 + (u16::from_be_bytes([random_bytes(1)[0], random_bytes(1)[0]]) as usize % (v.len() - 4));
                v[i] = random_bytes(1)[0];
            }
            v
        }
        3 => ((MAX_FRAME as u32) + 1 + (random_bytes(1)[0] as u32)).to_be_bytes().to_vec(),
        4 => {
            let mut v = 100u32.to_be_bytes().to_vec();
            v.extend(random_bytes(10));
            v
        }
        5 => {
            let mut v = valid_hello;
            let body = br#"{"type":"STEP","tick":"zero","throttle":1,"steer":0,"source":"autonomy"}"#;
            v.extend((body.len() as u32).to_be_bytes());
            v.extend_from_slice(body);
            v
        }
        6 => 0u32.to_be_bytes().to_vec(),
        7 => {
            let mut v = valid_hello;
            let body = br#"{"type":"LOAD","scenario":{"schema_version":1},"dt":"3fa999999999999a"}"#;
            v.extend((body.len() as u32).to_be_bytes());
            v.extend_from_slice(body);
            v
        }
        _ => {
            let body = format!(r#"{{"type":"HELLO","version":{}}}"#, u32::MAX);
            let mut v = (body.len() as u32).to_be_bytes().to_vec();
            v.extend(body.into_bytes());
            v
        }
    }
}

/// Sends `n` malformed frames to an executor, one connection each, from `workers`
/// threads. Returns the number of connections the server failed to close within
/// `deadline` after the client finished writing.
pub fn fuzz_executor(addr: std::net::SocketAddr, n: usize, workers: usize, deadline: Duration) -> usize {
    use std::net::{Shutdown, TcpStream};
    let hangs = Arc::new(AtomicUsize::new(0));
    let handles: Vec<_> = (0..workers)
        .map(|w| {
            let hangs = hangs.clone();
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(0xf022 + w as u64);
                for i in (w..n).step_by(workers) {
                    let bytes = malformed_frame(i as u64, &mut rng);
                    let Ok(mut s) = TcpStream::connect(addr) else {
                        hangs.fetch_add(1, Ordering::SeqCst);
                        continue;
                    };
                    let _ = s.set_read_timeout(Some(deadline));
                    let _ = s.write_all(&bytes);
                    let _ = s.shutdown(Shutdown::Write);
                    let mut sink = [0u8; 1024];
                    loop {
                        match s.read(&mut sink) {
                            Ok(0) => break,
                            Ok(_) => continue,
                            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                                hangs.fetch_add(1, Ordering::SeqCst);
                                break;
                            }
                            Err(_) => break,
                        }
                    }
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    hangs.load(Ordering::SeqCst)
}

/// Rendered frame of a random classification scene; the class cycles with `seed`.
pub fn scene_frame(seed: u64) -> SensorFrame {
    let class = [None, Some(VehicleClass::Car), Some(VehicleClass::Truck), Some(VehicleClass::Pedestrian)][(seed % 4) as usize];
    render_sensor(&classification_scene(class, seed), &default_camera()).unwrap()
}

/// Rendered frames have flat regions whose exact max-pool and ReLU ties make the loss
/// non-differentiable; a small dither moves the check point off those ties.
pub fn dithered_frame(seed: u64) -> SensorFrame {
    let mut x = scene_frame(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1);
    for v in &mut x.pixels {
        *v = (*v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    x
}

/// Worst relative error between `backward_input` and central differences at 25
/// random input coordinates.
pub fn input_gradient_check(m: &Model, target: Target, kind: LossKind, seed: u64) -> (usize, f64) {
    let x = dithered_frame(seed);
    let input = m.frame_to_input(&x).unwrap();
    let (_, cache) = m.forward_tensor(&input).unwrap();
    let analytic = backward_input(m, &cache, target, kind).unwrap();
    let shape = input.shape.clone();
    let mut f = |v: &[f64]| {
        let t = Tensor::from_vec(&shape, v.to_vec()).unwrap();
        loss(&m.forward_tensor(&t).unwrap().0, target, kind).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let n = 25;
    for _ in 0..n {
        let i = rng.random_range(0..input.len());
        let fd = central_difference(&mut f, &input.data, i, 1e-3);
        worst = worst.max(relative_error(analytic.data[i], fd));
    }
    (n, worst)
}


/// Worst relative error between the patch texel gradient and central differences
/// at 25 texels that influence the frame, with the number of such texels.
pub fn texel_gradient_check(m: &Model) -> (usize, f64) {
    let cam = default_camera();
    let world = classification_scene(Some(VehicleClass::Car), 31);
    let mut patch = PatchSpec::centered(&world, 0, 0.9, 4.0, [0.5, 0.5, 0.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in &mut patch.texture.texels {
        *t = rng.random_range(0.1..0.9);
    }
    let (_, grad) = patch_gradient(m, &world, &patch, 1, &cam).unwrap();
    let texels = patch.texture.texels.clone();
    let mut f = |v: &[f64]| {
        let mut p = patch.clone();
        p.texture.texels = v.to_vec();
        patch_gradient(m, &world, &p, 1, &cam).unwrap().0
    };
    let live: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
    let mut worst = 0.0f64;
    for _ in 0..25.min(live.len()) {
        let i = live[rng.random_range(0..live.len())];
        worst = worst.max(relative_error(grad[i], central_difference(&mut f, &texels, i, 1e-3)));
    }
    (live.len(), worst)
}
