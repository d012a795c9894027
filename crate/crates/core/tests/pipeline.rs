use fusepose::fusion::{FusionConfig, Provenance};
use fusepose::geometry::KeypointSet;
use fusepose::io::{self, emit_plots, ErrorRow, FrameRange, PipelineConfig, PipelineMode, PlotLayout};
use fusepose::metrics::{success_rates, SuccessConfig};
use fusepose::pnp::RansacConfig;
use fusepose::simkit::{NoiseModel, ScenarioConfig};
use regex::Regex;

fn quick() -> PipelineConfig {
    PipelineConfig {
        fusion: FusionConfig {
            ransac: RansacConfig {
                iterations: 300,
                ..RansacConfig::default()
            },
            ..FusionConfig::default()
        },
        seed: 5,
        seed_score_min: None,
    }
}

fn clean(n: usize) -> ScenarioConfig {
    ScenarioConfig {
        n_frames: n,
        noise_rgb: NoiseModel {
            sporadic_rate: 0.0,
            ..NoiseModel::default()
        },
        noise_event: NoiseModel {
            sporadic_rate: 0.0,
            ..NoiseModel::default()
        },
        synthesize_events: false,
        seed: 3,
        ..ScenarioConfig::default()
    }
}

#[test]
fn rgb_only_on_clean_sequence_always_succeeds() {
    let b = io::simulate_bundle(&clean(30)).unwrap();
    let out = io::run_pipeline(&b, PipelineMode::RgbOnly, &quick()).unwrap();
    let errors: Vec<_> = out.iter().map(|o| o.error).collect();
    let r = success_rates(&errors, &SuccessConfig::default(), None).unwrap();
    assert_eq!((r.omega, r.theta), (1.0, 1.0));
}

#[test]
fn event_only_matches_fusion_when_rgb_is_all_invalid() {
    let mut b = io::simulate_bundle(&ScenarioConfig {
        low_motion_ranges: vec![FrameRange::new(5, 12)],
        ..clean(20)
    })
    .unwrap();
    for p in b.predictions.as_mut().unwrap() {
        let z = p.rgb.keypoints.len();
        p.rgb.keypoints = KeypointSet::invalid(z);
        for s in p.rgb.mc_samples.iter_mut() {
            *s = KeypointSet::invalid(z);
        }
    }
    let cfg = quick();
    let fused = io::run_pipeline(&b, PipelineMode::Fusion, &cfg).unwrap();
    let single = io::run_pipeline(&b, PipelineMode::EventOnly, &cfg).unwrap();
    for (f, s) in fused.iter().zip(&single) {
        assert_eq!(f.result.provenance, Provenance::UndefinedCmkd);
        assert_eq!(f.result.pose, s.result.pose, "frame {}", f.frame);
        assert_eq!(f.result.degenerate, s.result.degenerate);
        assert_eq!(f.result.inliers_event, s.result.inliers_event);
    }
}

#[test]
fn pipeline_is_deterministic() {
    let b = io::simulate_bundle(&ScenarioConfig {
        harsh_ranges: vec![FrameRange::new(3, 8)],
        ..clean(12)
    })
    .unwrap();
    let a = io::run_pipeline(&b, PipelineMode::Fusion, &quick()).unwrap();
    let c = io::run_pipeline(&b, PipelineMode::Fusion, &quick()).unwrap();
    assert_eq!(a, c);
}

#[test]
fn written_runs_evaluate_into_a_table() {
    let b = io::simulate_bundle(&ScenarioConfig {
        harsh_ranges: vec![FrameRange::new(3, 6)],
        ..clean(10)
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    for m in [PipelineMode::RgbOnly, PipelineMode::Fusion] {
        let out = io::run_pipeline(&b, m, &quick()).unwrap();
        io::write_run(dir.path(), &b.meta, m, &out).unwrap();
    }
    let table = io::evaluate_runs(&[dir.path().to_path_buf()], &SuccessConfig::default()).unwrap();
    assert_eq!(table.header, ["metric", "sequence", "fusion_all", "fusion_psi", "rgb_only_all", "rgb_only_psi"]);
    let row = table.row("omega", "sat-1-close").unwrap();
    assert_eq!(row.cells.len(), 4);
    assert!(table.row("theta", "avg").is_some());
}

#[test]
fn plot_bands_follow_meta_ranges() {
    let mut meta = io::SequenceMeta::from_config(&clean(120));
    meta.harsh_ranges = vec![FrameRange::new(10, 29)];
    meta.low_motion_ranges = vec![FrameRange::new(60, 99), FrameRange::new(110, 120)];
    let rows: Vec<ErrorRow> = (1..=120)
        .map(|f| ErrorRow {
            frame: f,
            omega_m: 0.002,
            theta_deg: 1.0,
            degenerate: f % 10 == 0,
            mode: "fused".into(),
            cmkd: None,
            u_rgb: Some(2.0),
            u_event: Some(4.0),
        })
        .collect();
    let svg = emit_plots(&rows, &meta, &SuccessConfig::default());
    let lay = PlotLayout::default();
    let re = Regex::new(r#"class="band ([a-z-]+)" data-start="(\d+)" data-end="(\d+)" x="([\d.]+)" y="[\d.]+" width="([\d.]+)""#).unwrap();
    let bands: Vec<_> = re.captures_iter(&svg).collect();
    // Three ranges drawn once per panel.
    assert_eq!(bands.len(), 6);
    for c in &bands {
        let (start, end): (usize, usize) = (c[2].parse().unwrap(), c[3].parse().unwrap());
        let expected = meta
            .harsh_ranges
            .iter()
            .map(|r| ("harsh", r))
            .chain(meta.low_motion_ranges.iter().map(|r| ("low-motion", r)))
            .any(|(class, r)| class == &c[1] && r.start == start && r.end == end);
        assert!(expected, "unexpected band {}", &c[0]);
        let x: f64 = c[4].parse().unwrap();
        let w: f64 = c[5].parse().unwrap();
        assert!((x - lay.x(start as f64, 120)).abs() < 0.01);
        assert!((x + w - lay.x(end as f64 + 1.0, 120)).abs() < 0.02);
    }
    assert_eq!(svg.matches("class=\"degenerate\"").count(), 24);
    assert_eq!(svg.matches("class=\"u-event\"").count(), 2);
}
