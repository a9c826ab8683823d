//! Writes the synthetic reference timelines.
//!
//! ```text
//! cargo run -p ctxsched-core --example gen_timelines -- data/timelines
//! ```
//!
//! The robot stands still for the first 4 s of every 12 s cycle, moves for
//! the next 6 s, then stands still again. IMU samples land 50 ms past each
//! 100 ms tick so movement never starts exactly on a second.

use std::path::PathBuf;

use ctxsched_core::harness::{Timeline, TimelineEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn moving(t_ms: u64) -> bool {
    (4_000..10_000).contains(&(t_ms % 12_000))
}

fn jitter(rng: &mut ChaCha8Rng, base: u64) -> u64 {
    base * rng.random_range(85..=115) / 100
}

fn entry(t_ms: u64, stream: &str, payload: Value, work_us: Option<u64>) -> TimelineEntry {
    TimelineEntry {
        t_ms,
        stream: stream.into(),
        payload,
        work_us,
        ground_truth: None,
    }
}

fn imu(rng: &mut ChaCha8Rng, t: u64) -> TimelineEntry {
    let a = if moving(t) {
        let mut axis = || rng.random_range(0.05..1.5f64) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        json!({"x": axis(), "y": axis(), "z": axis()})
    } else {
        json!({"x": 0.0, "y": 0.0, "z": 0.0})
    };
    TimelineEntry {
        ground_truth: Some(json!({ "moving": moving(t) })),
        ..entry(t, "imu", json!({ "accelerometer": a }), None)
    }
}

fn experiment(name: &str, duration_ms: u64, seed: u64) -> Timeline {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut burst = 0u32;
    let mut frame = 0u64;
    for tick in 0..duration_ms / 10 {
        let t = tick * 10;
        if t % 1_000 == 0 {
            let lost = rng.random_bool(0.1);
            entries.push(entry(t, "slam/status", json!({ "lost": lost }), None));
        }
        if t % 100 == 0 {
            entries.push(entry(t, "camera", json!({ "frame": frame }), Some(jitter(&mut rng, 150_000))));
            frame += 1;
        }
        if t % 100 == 50 {
            entries.push(imu(&mut rng, t));
        }
        if t % 200 == 30 {
            // Signs come in bursts of a few frames.
            if burst == 0 && rng.random_bool(0.08) {
                burst = rng.random_range(3..8);
            }
            let signs = if burst > 0 {
                burst -= 1;
                rng.random_range(1..=3)
            } else {
                0
            };
            entries.push(entry(t, "sign_cam", json!({ "signs": signs }), Some(jitter(&mut rng, 180_000))));
        }
        if t % 250 == 120 {
            let level = rng.random_range(0.2..1.0f64);
            entries.push(entry(t, "mic", json!({ "level": level }), Some(jitter(&mut rng, 700_000))));
        }
    }
    Timeline {
        name: name.into(),
        duration_ms,
        entries,
    }
}

/// Only movement and speech, for looking at the context rule in isolation.
fn movement_speech() -> Timeline {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let duration_ms = 24_000;
    let mut entries = vec![
        entry(0, "slam/status", json!({ "lost": false }), None),
        entry(0, "sign_cam", json!({ "signs": 0 }), Some(180_000)),
    ];
    for tick in 0..duration_ms / 10 {
        let t = tick * 10;
        if t % 100 == 50 {
            entries.push(imu(&mut rng, t));
        }
        if t % 500 == 120 {
            entries.push(entry(t, "mic", json!({ "level": 0.8 }), Some(jitter(&mut rng, 400_000))));
        }
    }
    Timeline {
        name: "movement_speech".into(),
        duration_ms,
        entries,
    }
}

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/timelines".into()));
    std::fs::create_dir_all(&out).expect("create output directory");
    let timelines = [
        experiment("exp1", 180_000, 1),
        experiment("exp2", 60_000, 2),
        experiment("exp3", 15_000, 3),
        movement_speech(),
    ];
    for t in timelines {
        let path = out.join(format!("{}.json", t.name));
        std::fs::write(&path, t.to_json_string() + "\n").expect("write timeline");
        println!("{}: {} entries, {} ms", path.display(), t.entries.len(), t.duration_ms);
    }
}
