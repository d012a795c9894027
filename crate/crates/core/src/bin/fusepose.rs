use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fusepose::event::{self, EventBuffer, PolarityMode};
use fusepose::fusion::{Aggregation, FusionConfig};
use fusepose::geometry::{fit_alignment, Point2};
use fusepose::io::{self, PipelineConfig, PipelineMode, SequenceMeta};
use fusepose::metrics::SuccessConfig;
use fusepose::pnp::RansacConfig;
use fusepose::simkit::{frame_time_us, ScenarioConfig};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "fusepose", version, about = "Event/RGB keypoint fusion for spacecraft pose estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fusion,
    FusionNoGate,
    RgbOnly,
    EventOnly,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolarityArg {
    Count,
    Signed,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Mean,
    Median,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic sequence bundle from a scenario JSON file.
    Simulate {
        /// Scenario JSON; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use a built-in scenario instead of --config.
        #[arg(long, value_parser = ["fusion", "confounding", "clustered"], conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long, env = "FUSEPOSE_SEED")]
        seed: Option<u64>,
    },
    /// Run one pose-estimation method over a bundle.
    Fuse {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum, default_value = "fusion")]
        mode: ModeArg,
        #[arg(long, env = "FUSEPOSE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        ransac_iters: usize,
        #[arg(long, default_value_t = 20.0)]
        reproj_px: f64,
        #[arg(long, default_value_t = fusepose::fusion::DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, value_enum, default_value = "mean")]
        aggregation: AggregationArg,
        /// Ignore detector seeds scoring below this value.
        #[arg(long)]
        seed_score_min: Option<f64>,
        /// Run directory; results go to <out>/<sequence>/<mode>.*
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Build the success-rate table from one or more run directories.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        rho_m: f64,
        #[arg(long, default_value_t = 10.0)]
        sigma_deg: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the event-to-RGB warp from CSV point pairs x_event,y_event,x_rgb,y_rgb.
    Align {
        #[arg(long)]
        correspondences: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accumulate a binary event file into per-frame histograms (CSV grids).
    Accumulate {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        fps: f64,
        #[arg(long)]
        out: PathBuf,
        /// Sensor size from a sequence meta.json.
        #[arg(long, conflicts_with_all = ["width", "height"])]
        meta: Option<PathBuf>,
        #[arg(long, requires = "height")]
        width: Option<u32>,
        #[arg(long, requires = "width")]
        height: Option<u32>,
        #[arg(long, value_enum, default_value = "count")]
        polarity: PolarityArg,
        #[arg(long, default_value_t = 0)]
        t0_us: u64,
    },
    /// Render the per-frame error plot of one run.
    Plot {
        #[arg(long)]
        errors: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        rho_m: f64,
        #[arg(long, default_value_t = 10.0)]
        sigma_deg: f64,
    },
}

fn simulate(config: Option<PathBuf>, preset: Option<String>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: ScenarioConfig = match (config, preset.as_deref()) {
        (Some(p), _) => io::read_json(&p)?,
        (None, Some("fusion")) => ScenarioConfig::fusion_benchmark(0),
        (None, Some("confounding")) => ScenarioConfig::confounding_benchmark(0),
        (None, Some("clustered")) => ScenarioConfig::clustered_outlier_fixture(0),
        _ => ScenarioConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let bundle = io::simulate_bundle(&cfg)?;
    io::write_bundle(out, &bundle)?;
    log::info!("wrote {} ({} frames, {} events) to {}", bundle.meta.name, bundle.meta.n_frames, bundle.events.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fuse(bundle: &Path, mode: ModeArg, seed: u64, iters: usize, reproj: f64, alpha: f64, agg: AggregationArg, seed_score_min: Option<f64>, out: &Path) -> Result<()> {
    let b = io::read_bundle(bundle)?;
    let cfg = PipelineConfig {
        fusion: FusionConfig {
            ransac: RansacConfig {
                iterations: iters,
                reproj_threshold: reproj,
                ..RansacConfig::default()
            },
            alpha,
            aggregation: match agg {
                AggregationArg::Mean => Aggregation::Mean,
                AggregationArg::Median => Aggregation::Median,
            },
            ..FusionConfig::default()
        },
        seed,
        seed_score_min,
    };
    let modes: Vec<PipelineMode> = match mode {
        ModeArg::All => PipelineMode::ALL.to_vec(),
        ModeArg::Fusion => vec![PipelineMode::Fusion],
        ModeArg::FusionNoGate => vec![PipelineMode::FusionNoGate],
        ModeArg::RgbOnly => vec![PipelineMode::RgbOnly],
        ModeArg::EventOnly => vec![PipelineMode::EventOnly],
    };
    let success = SuccessConfig::default();
    for m in modes {
        let outputs = io::run_pipeline(&b, m, &cfg)?;
        let path = io::write_run(out, &b.meta, m, &outputs)?;
        let errors: Vec<_> = outputs.iter().map(|o| o.error).collect();
        let rates = io::method_rates(&errors, &b.meta, &success)?;
        println!(
            "{} {}: omega {:.3} theta {:.3} -> {}",
            b.meta.name,
            m,
            rates.omega_all.unwrap_or(f64::NAN),
            rates.theta_all.unwrap_or(f64::NAN),
            path.display()
        );
    }
    Ok(())
}

fn evaluate(runs: &[PathBuf], rho: f64, sigma: f64, out: Option<&Path>) -> Result<()> {
    let cfg = SuccessConfig { rho, sigma };
    cfg.validate()?;
    let table = io::evaluate_runs(runs, &cfg)?;
    match out {
        Some(p) => table.write_csv(BufWriter::new(File::create(p)?))?,
        None => table.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct AlignRow {
    x_event: f64,
    y_event: f64,
    x_rgb: f64,
    y_rgb: f64,
}

fn align(path: &Path, out: &Path) -> Result<()> {
    let mut rd = csv::Reader::from_path(path)?;
    let rows: Vec<AlignRow> = rd.deserialize().collect::<std::result::Result<_, _>>()?;
    let src: Vec<Point2> = rows.iter().map(|r| Point2::new(r.x_event, r.y_event)).collect();
    let dst: Vec<Point2> = rows.iter().map(|r| Point2::new(r.x_rgb, r.y_rgb)).collect();
    let fit = fit_alignment(&src, &dst)?;
    io::write_json(out, &fit.warp)?;
    println!("rms residual {:.4} px over {} pairs", fit.rms, rows.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn accumulate(events: &Path, fps: f64, out: &Path, meta: Option<PathBuf>, width: Option<u32>, height: Option<u32>, polarity: PolarityArg, t0_us: u64) -> Result<()> {
    if !(fps > 0.0) {
        return Err("fps must be > 0".into());
    }
    let (w, h) = match (meta, width, height) {
        (Some(m), _, _) => {
            let m: SequenceMeta = io::read_json(&m)?;
            (m.width, m.height)
        }
        (None, Some(w), Some(h)) => (w, h),
        _ => return Err("give either --meta or --width and --height".into()),
    };
    let buf = EventBuffer::read_binary(BufReader::new(File::open(events)?), w, h)?;
    let mode = match polarity {
        PolarityArg::Count => PolarityMode::Count,
        PolarityArg::Signed => PolarityMode::Signed,
    };
    fs::create_dir_all(out)?;
    let last = buf.events().last().map_or(t0_us, |e| e.t);
    let mut n = 0;
    while frame_time_us(t0_us, n, fps) < last {
        n += 1;
        let frame = event::accumulate_window(&buf, frame_time_us(t0_us, n - 1, fps), frame_time_us(t0_us, n, fps), mode)?;
        let mut f = BufWriter::new(File::create(out.join(format!("frame_{n:05}.csv")))?);
        io::write_frame_csv(&mut f, &frame)?;
        f.flush()?;
    }
    println!("{n} frames from {} events", buf.len());
    Ok(())
}

fn plot(errors: &Path, meta: &Path, out: &Path, rho: f64, sigma: f64) -> Result<()> {
    let rows = io::read_errors_csv(errors)?;
    let meta: SequenceMeta = io::read_json(meta)?;
    let svg = io::emit_plots(&rows, &meta, &SuccessConfig { rho, sigma });
    fs::write(out, svg)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate { config, preset, out, seed } => simulate(config, preset, &out, seed),
        Cmd::Fuse {
            bundle,
            mode,
            seed,
            ransac_iters,
            reproj_px,
            alpha,
            aggregation,
            seed_score_min,
            out,
        } => fuse(&bundle, mode, seed, ransac_iters, reproj_px, alpha, aggregation, seed_score_min, &out),
        Cmd::Evaluate { runs, rho_m, sigma_deg, out } => evaluate(&runs, rho_m, sigma_deg, out.as_deref()),
        Cmd::Align { correspondences, out } => align(&correspondences, &out),
        Cmd::Accumulate {
            events,
            fps,
            out,
            meta,
            width,
            height,
            polarity,
            t0_us,
        } => accumulate(&events, fps, &out, meta, width, height, polarity, t0_us),
        Cmd::Plot {
            errors,
            meta,
            out,
            rho_m,
            sigma_deg,
        } => plot(&errors, &meta, &out, rho_m, sigma_deg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
