mod common;

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::oracle::{
    brute_force_target, device_frame, distance_to_line, expanded_rotation, max_abs_diff, product_rotation, px_to_table,
};
use mosaic::geometry::{
    compose_rotation, global_to_local, local_to_global, pose_to_transform, select_throw_target, throw_direction,
    DevicePose, EulerAngles, ScreenSpec, Vec2, Vec3,
};
use mosaic::model::{InteractionModel, ModelConfig, Resource};
use mosaic::protocol::{
    decode, encode, DeviceMessage, PointLine, ScreenSnapshot, ServerCommand, TrackedBody, TrackingFrame, TrackingMessage,
};
use mosaic::simclient::DeviceClient;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn angle(r: &mut impl Rng) -> f64 {
    r.random_range(-PI..PI)
}

// ---------------------------------------------------------------------------

fn rotation_correctness() -> Outcome {
    let mut r = rng(1);
    let start = Instant::now();
    let (mut worst_expanded, mut worst_product) = (0.0f64, 0.0f64);
    for _ in 0..100_000 {
        let (a, b, g) = (angle(&mut r), angle(&mut r), angle(&mut r));
        let m = compose_rotation(EulerAngles::new(a, b, g));
        worst_expanded = worst_expanded.max(max_abs_diff(m.rows(), &expanded_rotation(a, b, g)));
        worst_product = worst_product.max(max_abs_diff(m.rows(), &product_rotation(a, b, g)));
    }
    let elapsed = start.elapsed();
    outcome(
        worst_expanded <= 1e-12 && worst_product <= 1e-12 && elapsed < Duration::from_secs(5),
        format!("1e5 triples, max diff {worst_expanded:.2e} / {worst_product:.2e}, {elapsed:.2?}"),
    )
}

fn transform_roundtrip() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let center = Vec3::new(r.random_range(-2000.0..2000.0), r.random_range(-2000.0..2000.0), r.random_range(-2000.0..2000.0));
        let pose = DevicePose::new(1, center, EulerAngles::new(angle(&mut r), angle(&mut r), angle(&mut r)), 0);
        let t = pose_to_transform(&pose);
        let p = Vec3::new(r.random_range(-1e4..1e4), r.random_range(-1e4..1e4), r.random_range(-1e4..1e4));
        worst = worst.max((global_to_local(&t, local_to_global(&t, p)) - p).norm());
    }
    outcome(worst <= 1e-9, format!("1e4 cases, max error {worst:.2e} mm"))
}

fn random_screen(r: &mut impl Rng) -> ScreenSpec {
    ScreenSpec {
        width_px: r.random_range(600.0..2600.0_f64).round(),
        height_px: r.random_range(400.0..2000.0_f64).round(),
        width_mm: r.random_range(100.0..300.0),
        height_mm: r.random_range(70.0..220.0),
    }
}

fn screen_array(s: &ScreenSpec) -> [f64; 4] {
    [s.width_px, s.height_px, s.width_mm, s.height_mm]
}

fn line_collinearity() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let screens = [random_screen(&mut r), random_screen(&mut r)];
        // Both screens lie in the table plane.
        let z = r.random_range(-50.0..50.0);
        let poses: Vec<DevicePose> = (0..2)
            .map(|i| {
                let c = Vec3::new(r.random_range(-1000.0..1000.0), r.random_range(-1000.0..1000.0), z);
                DevicePose::new(i + 1, c, EulerAngles::new(angle(&mut r), 0.0, 0.0), 1)
            })
            .collect();
        let spots: Vec<Vec2> = screens
            .iter()
            .map(|s| Vec2::new(r.random_range(0.0..s.width_px), r.random_range(0.0..s.height_px)))
            .collect();

        let mut m = InteractionModel::new(ModelConfig::default());
        for i in 0..2 {
            m.register_device(i as u32 + 1, screens[i]).unwrap();
        }
        m.on_pose_frame(&poses).unwrap();
        for i in 0..2 {
            m.insert_resource(Resource {
                resource_id: i as u32 + 1,
                text: String::new(),
                tags: Default::default(),
                timestamp: Some(i as i64),
                host_device: Some(i as u32 + 1),
                local_pos: spots[i],
            })
            .unwrap();
        }
        let cmds = m.on_long_clicked(1, 1).unwrap();

        let frames: Vec<_> = poses
            .iter()
            .map(|p| device_frame([p.center.x, p.center.y, p.center.z], p.angles.alpha, p.angles.beta, p.angles.gamma))
            .collect();
        let g: Vec<_> = (0..2).map(|i| px_to_table(&frames[i], screen_array(&screens[i]), (spots[i].x, spots[i].y))).collect();
        let mut segments = 0;
        for a in &cmds {
            let ServerCommand::LineToPoint { resource_id, x_px, y_px, on: true } = a.command else { continue };
            let i = (a.device - 1) as usize;
            if resource_id != a.device {
                return outcome(false, format!("case {case}: line for resource {resource_id} on device {}", a.device));
            }
            let start = px_to_table(&frames[i], screen_array(&screens[i]), (spots[i].x, spots[i].y));
            let end = px_to_table(&frames[i], screen_array(&screens[i]), (x_px, y_px));
            worst = worst.max(distance_to_line(&start, &g[0], &g[1])).max(distance_to_line(&end, &g[0], &g[1]));
            segments += 1;
        }
        if segments != 2 {
            return outcome(false, format!("case {case}: {segments} segments emitted"));
        }
    }
    outcome(worst <= 1e-6, format!("1e3 configurations, max deviation {worst:.2e} mm"))
}

fn throw_routing() -> Outcome {
    let mut r = rng(4);
    let mut agreed = 0;
    let mut skipped = 0;
    let mut disagreements = Vec::new();
    while agreed + disagreements.len() < 10_000 {
        let n = r.random_range(2..=8);
        let screen = random_screen(&mut r);
        let poses: Vec<DevicePose> = (0..n)
            .map(|i| {
                let c = Vec3::new(r.random_range(-1500.0..1500.0), r.random_range(-1500.0..1500.0), 0.0);
                DevicePose::new(i as u32 + 1, c, EulerAngles::new(angle(&mut r), 0.0, 0.0), 1)
            })
            .collect();
        let v = Vec2::new(r.random_range(-4000.0..4000.0), r.random_range(-4000.0..4000.0));
        let source = &poses[0];
        let theta = throw_direction(source, v, &screen).unwrap();

        // Heading of the flick derived independently through the device frame.
        let frame = device_frame([0.0; 3], source.angles.alpha, 0.0, 0.0);
        let local = nalgebra::Vector3::new(v.x * screen.width_mm / screen.width_px, -v.y * screen.height_mm / screen.height_px, 0.0);
        let global = frame * local;
        let oracle_theta = global.y.atan2(global.x);

        let others: Vec<(u32, f64, f64)> = poses[1..].iter().map(|p| (p.device_id, p.center.x, p.center.y)).collect();
        let near_boundary = others.iter().any(|&(_, x, y)| {
            let (dx, dy) = (x - source.center.x, y - source.center.y);
            let ahead = dx * oracle_theta.cos() + dy * oracle_theta.sin();
            ahead.abs() <= 1e-9 * dx.hypot(dy)
        });
        if near_boundary {
            skipped += 1;
            continue;
        }
        let expected = brute_force_target((source.center.x, source.center.y), &others, oracle_theta);
        let got = select_throw_target(source, &poses, theta);
        if got == expected {
            agreed += 1;
        } else {
            disagreements.push((n, got, expected));
        }
    }

    // Candidates exactly a quarter turn off the heading never qualify.
    let src = DevicePose::new(1, Vec3::new(0.0, 0.0, 0.0), EulerAngles::new(0.0, 0.0, 0.0), 1);
    let at = |id, x, y| DevicePose::new(id, Vec3::new(x, y, 0.0), EulerAngles::new(0.0, 0.0, 0.0), 1);
    let perpendicular = [
        (0.0, vec![at(2, 0.0, 400.0), at(3, 0.0, -250.0), at(4, -300.0, 0.0)]),
        (PI / 2.0, vec![at(2, 400.0, 0.0), at(3, -250.0, 0.0), at(4, 0.0, -10.0)]),
        (PI, vec![at(2, 0.0, 400.0), at(3, 0.0, -250.0), at(4, 90.0, 0.0)]),
        (-PI / 2.0, vec![at(2, 400.0, 0.0), at(3, 0.0, 300.0)]),
    ];
    let strict = perpendicular.iter().all(|(theta, others)| {
        let mut all = vec![src];
        all.extend(others.iter().copied());
        select_throw_target(&src, &all, *theta).is_none()
    });
    outcome(
        disagreements.is_empty() && strict,
        format!(
            "{agreed}/1e4 agree ({skipped} boundary cases excluded), perpendicular cases none: {strict}{}",
            disagreements.first().map(|d| format!(", first mismatch {d:?}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------

fn random_f64(r: &mut impl Rng) -> f64 {
    match r.random_range(0..4) {
        0 => r.random_range(-1e4..1e4),
        1 => r.random_range(-1e4..1e4_f64).round(),
        2 => f64::from_bits(r.random()),
        _ => r.random::<f64>(),
    }
}

fn finite(r: &mut impl Rng) -> f64 {
    let v = random_f64(r);
    if v.is_finite() {
        v
    } else {
        0.0
    }
}

fn positive(r: &mut impl Rng) -> f64 {
    let v = finite(r).abs();
    if v > 0.0 {
        v
    } else {
        1.0
    }
}

fn random_text(r: &mut impl Rng) -> String {
    let n = r.random_range(0..24);
    (0..n)
        .map(|_| match r.random_range(0..5) {
            0 => '"',
            1 => '\\',
            2 => char::from_u32(r.random_range(0x80..0x2FFF)).unwrap_or('?'),
            3 => '\n',
            _ => char::from(r.random_range(b' '..=b'~')),
        })
        .collect()
}

fn random_snapshot(r: &mut impl Rng) -> ScreenSnapshot {
    let mut s = ScreenSnapshot::default();
    for _ in 0..r.random_range(0..4) {
        s.resources.insert(r.random(), Vec2::new(finite(r), finite(r)));
        s.highlighted.insert(r.random());
        s.lines_local.insert((r.random(), r.random()));
        s.lines_to_point.push(PointLine { resource_id: r.random(), x_px: finite(r), y_px: finite(r) });
    }
    s.sort_lines();
    s
}

fn random_device_message(r: &mut impl Rng) -> DeviceMessage {
    match r.random_range(0..7) {
        0 => DeviceMessage::Hello {
            device_id: r.random(),
            screen: ScreenSpec { width_px: positive(r), height_px: positive(r), width_mm: positive(r), height_mm: positive(r) },
        },
        1 => DeviceMessage::Moved { resource_id: r.random(), x_px: finite(r), y_px: finite(r) },
        2 => DeviceMessage::Clicked { resource_id: r.random() },
        3 => DeviceMessage::LongClicked { resource_id: r.random() },
        4 => DeviceMessage::Thrown { resource_id: r.random(), vx_px_s: finite(r), vy_px_s: finite(r) },
        5 => DeviceMessage::Ping { seq: r.random() },
        _ => DeviceMessage::DumpState,
    }
}

fn random_server_command(r: &mut impl Rng) -> ServerCommand {
    match r.random_range(0..10) {
        0 => ServerCommand::ResourceDef { resource_id: r.random(), text: random_text(r), has_timestamp: r.random() },
        1 => ServerCommand::Show { resource_id: r.random(), x_px: finite(r), y_px: finite(r) },
        2 => ServerCommand::Hide { resource_id: r.random() },
        3 => ServerCommand::Highlight { resource_id: r.random(), on: r.random() },
        4 => ServerCommand::LineLocal { from_resource: r.random(), to_resource: r.random(), on: r.random() },
        5 => ServerCommand::LineToPoint { resource_id: r.random(), x_px: finite(r), y_px: finite(r), on: r.random() },
        6 => ServerCommand::Error { message: random_text(r) },
        7 => ServerCommand::Pong { seq: r.random(), frame_t_ms: r.random::<bool>().then(|| r.random()) },
        _ => ServerCommand::StateDump { device_id: r.random(), screen: random_snapshot(r) },
    }
}

fn random_tracking_message(r: &mut impl Rng) -> TrackingMessage {
    if r.random_range(0..5) == 0 {
        return TrackingMessage::Poll;
    }
    let first_id: u32 = r.random_range(0..u32::MAX - 8);
    let bodies = (0..r.random_range(0..6))
        .map(|i| TrackedBody {
            id: first_id + i,
            x_mm: finite(r),
            y_mm: finite(r),
            z_mm: finite(r),
            roll_deg: finite(r),
            pitch_deg: finite(r),
            yaw_deg: finite(r),
        })
        .collect();
    TrackingMessage::Frame(TrackingFrame { t_ms: r.random(), bodies })
}

fn random_line(r: &mut impl Rng) -> Vec<u8> {
    match r.random_range(0..3) {
        0 => (0..r.random_range(0..300)).map(|_| r.random()).collect(),
        1 => {
            // A valid line with a few bytes flipped, dropped or duplicated.
            let mut line = match r.random_range(0..3) {
                0 => encode(&random_device_message(r)),
                1 => encode(&random_server_command(r)),
                _ => encode(&random_tracking_message(r)),
            };
            for _ in 0..r.random_range(1..4) {
                if line.is_empty() {
                    break;
                }
                let i = r.random_range(0..line.len());
                match r.random_range(0..3) {
                    0 => line[i] = r.random(),
                    1 => {
                        line.remove(i);
                    }
                    _ => {
                        let b = line[i];
                        line.insert(i, b);
                    }
                }
            }
            line
        }
        _ => {
            const PIECES: [&str; 14] = [
                "{", "}", "[", "]", "\"type\"", ":", ",", "\"moved\"", "\"frame\"", "\"bodies\"", "1e999", "-0", "null",
                "\"resource_id\"",
            ];
            (0..r.random_range(0..20)).flat_map(|_| PIECES[r.random_range(0..PIECES.len())].bytes()).collect()
        }
    }
}

fn protocol_fuzz() -> Outcome {
    let mut r = rng(5);
    let mut panics = 0;
    let mut accepted = 0;
    for _ in 0..100_000 {
        let line = random_line(&mut r);
        let ok = catch_unwind(AssertUnwindSafe(|| {
            let a = decode::<DeviceMessage>(&line).is_ok();
            let b = decode::<ServerCommand>(&line).is_ok();
            let c = decode::<TrackingMessage>(&line).is_ok();
            a || b || c
        }));
        match ok {
            Ok(true) => accepted += 1,
            Ok(false) => {}
            Err(_) => panics += 1,
        }
    }
    let mut mismatches = 0;
    let mut first_mismatch = None;
    let mut check = |line: Vec<u8>, same: bool| {
        if !same {
            mismatches += 1;
            first_mismatch.get_or_insert_with(|| String::from_utf8_lossy(&line).trim_end().to_string());
        }
    };
    for _ in 0..10_000 {
        let d = random_device_message(&mut r);
        let line = encode(&d);
        let same = decode::<DeviceMessage>(&line).ok() == Some(d);
        check(line, same);
        let s = random_server_command(&mut r);
        let line = encode(&s);
        let same = decode::<ServerCommand>(&line).ok() == Some(s);
        check(line, same);
        let t = random_tracking_message(&mut r);
        let line = encode(&t);
        let same = decode::<TrackingMessage>(&line).ok() == Some(t);
        check(line, same);
    }
    outcome(
        panics == 0 && mismatches == 0,
        format!(
            "1e5 random lines: {panics} panics ({accepted} decoded); 1e4 roundtrips per vocabulary: {mismatches} mismatches{}",
            first_mismatch.map(|l| format!(", first: {l}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------

fn golden_mystery_31(rt: &tokio::runtime::Runtime) -> Outcome {
    let files = common::load_scenario("mystery-31");
    let mut logs = Vec::new();
    let mut problems = Vec::new();
    let mut slowest = Duration::ZERO;
    for i in 0..5 {
        let start = Instant::now();
        let run = rt.block_on(common::run_fast(&files, |_| {}));
        let elapsed = start.elapsed();
        slowest = slowest.max(elapsed);
        if elapsed >= Duration::from_secs(10) {
            problems.push(format!("run {i} took {elapsed:.2?}"));
        }
        if !run.report.dumps_match() {
            problems.push(format!("run {i}: client screens differ from server dumps"));
        }
        for a in run.report.assertions.iter().filter(|a| !a.passed) {
            problems.push(format!("run {i}: {} ({})", a.description, a.detail));
        }
        logs.push(run.report.log);
    }
    if logs.iter().any(|l| *l != logs[0]) {
        problems.push("command logs differ between runs".into());
    }
    let lines = logs[0].lines().count();
    outcome(
        problems.is_empty() && lines > 0,
        if problems.is_empty() {
            format!("5 runs, {lines} log lines each, byte-identical, slowest {slowest:.2?}")
        } else {
            problems.join("; ")
        },
    )
}

fn fault_tolerance(rt: &tokio::runtime::Runtime) -> Outcome {
    let reconnect = rt.block_on(async {
        let files = common::load_scenario("mystery-31");
        let server = common::start_plain(files.config.clone(), Some(files.fixture.clone())).await;
        let spec = files.config.devices[0].screen;
        let mut c = DeviceClient::connect(server.local_addr(), 1, spec, 1000.0).await.unwrap();
        c.ping().await.unwrap();
        let shown: Vec<u32> = c.model.visible.keys().copied().take(2).collect();
        c.drag(shown[0], &[Vec2::new(900.0, 700.0), Vec2::new(1000.0, 720.0)]).await.unwrap();
        c.click(shown[1]).await.unwrap();
        c.ping().await.unwrap();
        let before = c.model.snapshot();
        c.kill();
        let mut again = loop {
            let mut c = DeviceClient::connect(server.local_addr(), 1, spec, 1000.0).await.unwrap();
            if c.ping().await.is_ok() {
                break c;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        };
        let restored = again.model.snapshot();
        let dump = again.dump().await.unwrap();
        server.shutdown().await.unwrap();
        (restored == before && dump == before && !before.highlighted.is_empty(), before.resources.len())
    });

    let dir = tempfile::tempdir().unwrap();
    let mut worst_loss = 0;
    let mut intact = true;
    for i in 0..5 {
        let o = common::crash::kill_during_flush("crash_child", dir.path(), Duration::from_millis(700 + 113 * i));
        intact &= o.integrity_ok && o.stored_seq > 0;
        worst_loss = worst_loss.max(o.loss_ms);
    }
    outcome(
        reconnect.0 && intact && worst_loss <= 500,
        format!(
            "reconnect restored {} notes: {}; 5 kills during flush: integrity {}, worst loss {worst_loss} ms",
            reconnect.1, reconnect.0, if intact { "ok" } else { "BROKEN" }
        ),
    )
}

#[test]
fn crash_child() {
    common::crash::child_entry();
}

#[test]
fn acceptance() {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("rotation correctness", Box::new(rotation_correctness)),
        ("transform roundtrip", Box::new(transform_roundtrip)),
        ("cross-device line collinearity", Box::new(line_collinearity)),
        ("throw routing oracle", Box::new(throw_routing)),
        ("protocol fuzz", Box::new(protocol_fuzz)),
        ("golden scenario mystery-31", Box::new(|| golden_mystery_31(&rt))),
        ("fault tolerance", Box::new(|| fault_tolerance(&rt))),
    ];
    let mut failed = Vec::new();
    println!();
    for (name, check) in &criteria {
        let o = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        if !o.passed {
            failed.push(*name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
