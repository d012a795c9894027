use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fusepose::event::{EventBuffer, Event, Polarity};
use fusepose::geometry::AffineWarp;
use fusepose::io::{read_json, SequenceMeta};

fn fusepose(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_fusepose"))
        .args(args)
        .current_dir(dir)
        .env_remove("FUSEPOSE_SEED")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn simulate_fuse_evaluate_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("scenario.json"),
        r#"{"n_frames": 12, "harsh_ranges": [{"start": 3, "end": 5}], "synthesize_events": false, "seed": 4}"#,
    )
    .unwrap();
    fusepose(&["simulate", "--config", "scenario.json", "--out", "bundle"], d);
    let meta: SequenceMeta = read_json(&d.join("bundle/meta.json")).unwrap();
    assert_eq!(meta.n_frames, 12);

    fusepose(&["fuse", "--bundle", "bundle", "--mode", "fusion", "--ransac-iters", "200", "--out", "runs"], d);
    fusepose(&["fuse", "--bundle", "bundle", "--mode", "rgb-only", "--ransac-iters", "200", "--out", "runs"], d);
    let errors = d.join("runs/sat-1-close/fusion.errors.csv");
    assert_eq!(fs::read_to_string(&errors).unwrap().lines().count(), 13);

    let table = fusepose(&["evaluate", "--runs", "runs", "--rho-m", "0.01", "--sigma-deg", "10"], d);
    let text = String::from_utf8(table.stdout).unwrap();
    assert!(text.starts_with("metric,sequence,fusion_all,fusion_psi,rgb_only_all,rgb_only_psi\n"), "{text}");

    fusepose(&["plot", "--errors", "runs/sat-1-close/fusion.errors.csv", "--meta", "bundle/meta.json", "--out", "plot.svg"], d);
    let svg = fs::read_to_string(d.join("plot.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("class=\"band harsh\""));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |seed: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_fusepose"))
            .args(["simulate", "--out", out])
            .env("FUSEPOSE_SEED", seed)
            .current_dir(d)
            .output()
            .unwrap();
        assert!(o.status.success());
        fs::read(d.join(out).join("scenario.json")).unwrap()
    };
    let a = run("21", "a");
    let b = run("21", "b");
    let c = run("22", "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn align_recovers_warp() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let truth = AffineWarp::new(1.1, 0.95, -12.0, 7.5).unwrap();
    let mut csv = String::from("x_event,y_event,x_rgb,y_rgb\n");
    for (x, y) in [(10.0, 20.0), (300.0, 40.0), (150.0, 260.0), (30.0, 400.0)] {
        let p = truth.apply(&fusepose::geometry::Point2::new(x, y));
        csv.push_str(&format!("{x},{y},{},{}\n", p.x, p.y));
    }
    fs::write(d.join("pairs.csv"), csv).unwrap();
    fusepose(&["align", "--correspondences", "pairs.csv", "--out", "warp.json"], d);
    let w: AffineWarp = read_json(&d.join("warp.json")).unwrap();
    for (a, b) in [(w.sx, truth.sx), (w.sy, truth.sy), (w.tx, truth.tx), (w.ty, truth.ty)] {
        assert!((a - b).abs() < 1e-9, "{w:?}");
    }
}

#[test]
fn accumulate_writes_one_grid_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let events = vec![
        Event::new(10, 0, 0, Polarity::On),
        Event::new(20, 1, 0, Polarity::On),
        Event::new(20, 1, 0, Polarity::Off),
        Event::new(40_000, 2, 1, Polarity::On),
    ];
    let buf = EventBuffer::new(3, 2, events).unwrap();
    buf.write_binary(fs::File::create(d.join("e.bin")).unwrap()).unwrap();
    fusepose(&["accumulate", "--events", "e.bin", "--fps", "30", "--width", "3", "--height", "2", "--out", "frames"], d);
    let f1 = fs::read_to_string(d.join("frames/frame_00001.csv")).unwrap();
    assert_eq!(f1, "0.500000,1.000000,0.000000\n0.000000,0.000000,0.000000\n");
    let f2 = fs::read_to_string(d.join("frames/frame_00002.csv")).unwrap();
    assert_eq!(f2, "0.000000,0.000000,0.000000\n0.000000,0.000000,1.000000\n");
    assert!(!d.join("frames/frame_00003.csv").exists());
}

#[test]
fn bad_input_reports_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fusepose"))
        .args(["fuse", "--bundle", "missing"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("meta.json"));
}
