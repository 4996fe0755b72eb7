mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use mcball::detector::{Detector, TemplateDetector};
use mcball::eval::{EvalError, MatchCriterion, Report};
use mcball::geometry::Rig;
use mcball::sim::{generate, read_dataset, write_dataset, Dataset};
use mcball::tracker::{
    parse_outputs, run_sequence_timed, write_outputs, DetectorCallStats, Pipeline, Strategy, TimedRun,
};

use config::{DetectorKind, RunConfig};

/// Multi-camera ball localization: simulate datasets, track, evaluate.
#[derive(Parser, Debug)]
#[command(name = "mcball", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone, Default)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the simulation seed (simulate) or the detector seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to the configured dataset dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Track the ball through a dataset and write per-frame records.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        detector: Option<config::DetectorKind>,
        /// Output records file (defaults to `<dataset>/outputs_<strategy>.txt`);
        /// timing goes to the same path with a `.bench` suffix.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score tracker records against the dataset's ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Strategy whose default records file is evaluated.
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Records file to evaluate.
        #[arg(long)]
        outputs: Option<PathBuf>,
        /// Also write the report as key=value lines here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run strategies on a dataset and report timing and detector calls.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Single strategy to run (default: M1, M2 and M3).
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        detector: Option<config::DetectorKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Dataset(String),
    Eval(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dataset(_) => 3,
            CliError::Eval(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Dataset(m) | CliError::Eval(m) => m,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Config(format!("config error: {e}"))),
        None => Ok(RunConfig::default()),
    }
}

fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let mut d = read_dataset(&cfg.dataset).map_err(|e| CliError::Dataset(format!("dataset error: {e}")))?;
    if let Some(rig_path) = &cfg.rig {
        let text = fs::read_to_string(rig_path)
            .map_err(|e| CliError::Dataset(format!("dataset error: {}: {e}", rig_path.display())))?;
        let rig =
            Rig::parse(&text).map_err(|e| CliError::Dataset(format!("dataset error: {}: {e}", rig_path.display())))?;
        if rig.ids().ne(d.rig.ids()) {
            return Err(CliError::Dataset(format!(
                "dataset error: {} lists different cameras than the dataset",
                rig_path.display()
            )));
        }
        d.rig = rig;
    }
    Ok(d)
}

fn default_outputs(cfg: &RunConfig, strategy: Strategy) -> PathBuf {
    cfg.dataset.join(format!("outputs_{}.txt", strategy.name()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Dataset(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Dataset(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------

fn cmd_simulate(common: Common, out: Option<PathBuf>) -> CliResult<()> {
    let mut cfg = load_config(&common)?;
    if let Some(seed) = common.seed {
        cfg.sim.seed = seed;
    }
    let dir = out.unwrap_or(cfg.dataset.clone());
    let d = generate(&cfg.sim).map_err(|e| CliError::Config(format!("simulation error: {e}")))?;
    write_dataset(&d, &dir).map_err(|e| CliError::Dataset(format!("dataset error: {e}")))?;
    let occluded: usize = d.occlusions.episodes.iter().map(|e| e.end - e.start).sum();
    let rows: usize = d.groundtruth.values().map(Vec::len).sum();
    let visible: usize = d.groundtruth.values().flatten().filter(|r| r.vis).count();
    println!("dataset: {}", dir.display());
    println!("frames: {}", d.meta.n_frames);
    println!("cameras: {}", d.rig.len());
    println!(
        "occlusion episodes: {} (one per occluded camera), {} camera-frames",
        d.occlusions.episodes.len(),
        occluded
    );
    println!("visible ground-truth rows: {visible} of {rows}");
    println!("rendered: {}", d.meta.rendered);
    Ok(())
}

fn template_for(cfg: &RunConfig, d: &Dataset) -> CliResult<TemplateDetector> {
    if !d.meta.rendered {
        return Err(CliError::Config(
            "config error: the template detector needs rendered frames; simulate with render = true".into(),
        ));
    }
    let (lo, hi) = match cfg.template_radius {
        Some(r) => r,
        None => {
            let half_sides = d
                .groundtruth
                .values()
                .flatten()
                .filter(|r| r.vis)
                .map(|r| r.bbox.w.max(r.bbox.h) / 2.0);
            let (lo, hi) = half_sides.fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r), hi.max(r)));
            if hi == 0.0 {
                (1.0, 4.0)
            } else {
                ((lo - 0.5).max(1.0), (hi + 0.5).max(1.0))
            }
        }
    };
    Ok(TemplateDetector::new(cfg.tracker.detector, lo, hi))
}

fn run_one(cfg: &RunConfig, d: &Dataset, strategy: Strategy, kind: DetectorKind, seed: u64) -> CliResult<TimedRun> {
    let oracle;
    let template;
    let det: &dyn Detector = match kind {
        DetectorKind::Oracle => {
            oracle = mcball::detector::OracleDetector::new(d.oracle_truth(), cfg.sim.noise, seed);
            &oracle
        }
        DetectorKind::Template => {
            template = template_for(cfg, d)?;
            &template
        }
    };
    let mut tracker = cfg.tracker.clone();
    tracker.smooth.fps = d.meta.fps;
    tracker.ball_radius_m = d.meta.ball_radius_m;
    let mut p = Pipeline::new(&d.rig, det, tracker).with_court(&d.court);
    run_sequence_timed(&mut p, d, strategy).map_err(|e| CliError::Dataset(format!("tracking error: {e}")))
}

fn bench_record(strategy: Strategy, kind: DetectorKind, run: &TimedRun) -> String {
    let ms = |t: &Duration| t.as_secs_f64() * 1e3;
    let n = run.frame_times.len().max(1) as f64;
    let mean = run.frame_times.iter().map(ms).sum::<f64>() / n;
    let DetectorCallStats {
        full_image_calls,
        roi_calls,
        full_image_frames,
        pixels_scanned,
    } = run.stats;
    let mut s = String::new();
    let _ = writeln!(s, "strategy={strategy}");
    let _ = writeln!(s, "detector={kind}");
    let _ = writeln!(s, "frames={}", run.frame_times.len());
    let _ = writeln!(s, "mean_frame_ms={mean:.4}");
    let _ = writeln!(s, "full_image_calls={full_image_calls}");
    let _ = writeln!(s, "roi_calls={roi_calls}");
    let _ = writeln!(s, "full_image_frames={full_image_frames}");
    let _ = writeln!(s, "pixels_scanned={pixels_scanned}");
    for (i, t) in run.frame_times.iter().enumerate() {
        let _ = writeln!(s, "frame_ms {i} {:.4}", ms(t));
    }
    s
}

fn cmd_track(
    common: Common,
    strategy: Option<Strategy>,
    detector: Option<DetectorKind>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let cfg = load_config(&common)?;
    let strategy = strategy.map(|s| match cfg.strategy {
        Strategy::M1 { interval } | Strategy::M2 { interval } => s.with_interval(interval),
        Strategy::M3 => s,
    });
    let strategy = strategy.unwrap_or(cfg.strategy);
    let kind = detector.unwrap_or(cfg.detector);
    let d = load_dataset(&cfg)?;
    let seed = common.seed.or(cfg.detector_seed).unwrap_or(d.meta.seed);
    let run = run_one(&cfg, &d, strategy, kind, seed)?;
    let out = out.unwrap_or_else(|| default_outputs(&cfg, strategy));
    write_text(&out, &write_outputs(&run.outputs))?;
    let mut bench = out.clone().into_os_string();
    bench.push(".bench");
    write_text(Path::new(&bench), &bench_record(strategy, kind, &run))?;
    let counts = |st: mcball::tracker::Status| run.outputs.iter().filter(|o| o.status == st).count();
    use mcball::tracker::Status;
    println!("outputs: {}", out.display());
    println!(
        "frames: {} ok {} interpolated {} carried {} lost {}",
        run.outputs.len(),
        counts(Status::Ok),
        counts(Status::Interpolated),
        counts(Status::CarriedForward),
        counts(Status::Lost)
    );
    println!(
        "detector calls: full-image {} roi {} full-image frames {} pixels {}",
        run.stats.full_image_calls, run.stats.roi_calls, run.stats.full_image_frames, run.stats.pixels_scanned
    );
    Ok(())
}

fn cmd_eval(
    common: Common,
    strategy: Option<Strategy>,
    outputs: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let cfg = load_config(&common)?;
    let d = load_dataset(&cfg)?;
    let path = outputs.unwrap_or_else(|| default_outputs(&cfg, strategy.unwrap_or(cfg.strategy)));
    let text = fs::read_to_string(&path).map_err(|e| CliError::Dataset(format!("{}: {e}", path.display())))?;
    let records = parse_outputs(&text).map_err(|e| CliError::Dataset(format!("{}: {e}", path.display())))?;
    let report = Report::build(
        &records,
        &d.groundtruth,
        &d.truth3d,
        &MatchCriterion::report_columns(),
        cfg.eval_distance_m,
    )
    .map_err(|e: EvalError| CliError::Eval(format!("evaluation error: {e}")))?;
    print!("{}", report.to_table());
    if let Some(out) = out {
        write_text(&out, &report.to_key_values())?;
    }
    Ok(())
}

fn cmd_bench(
    common: Common,
    strategy: Option<Strategy>,
    detector: Option<DetectorKind>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let cfg = load_config(&common)?;
    let d = load_dataset(&cfg)?;
    let kind = detector.unwrap_or(cfg.detector);
    let seed = common.seed.or(cfg.detector_seed).unwrap_or(d.meta.seed);
    let strategies = match strategy {
        Some(s) => vec![s],
        None => vec![Strategy::m1(), Strategy::m2(), Strategy::M3],
    };
    let mut all = String::new();
    println!(
        "{:<8} {:>8} {:>12} {:>12} {:>10} {:>12} {:>16}",
        "strategy", "frames", "mean ms", "full calls", "roi calls", "full frames", "pixels scanned"
    );
    for s in strategies {
        let run = run_one(&cfg, &d, s, kind, seed)?;
        let n = run.frame_times.len().max(1) as f64;
        let mean = run.frame_times.iter().map(|t| t.as_secs_f64() * 1e3).sum::<f64>() / n;
        println!(
            "{:<8} {:>8} {:>12.3} {:>12} {:>10} {:>12} {:>16}",
            s.to_string(),
            run.frame_times.len(),
            mean,
            run.stats.full_image_calls,
            run.stats.roi_calls,
            run.stats.full_image_frames,
            run.stats.pixels_scanned
        );
        all.push_str(&bench_record(s, kind, &run));
        all.push('\n');
    }
    if let Some(out) = out {
        write_text(&out, &all)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { common, out } => cmd_simulate(common, out),
        Command::Track {
            common,
            strategy,
            detector,
            out,
        } => cmd_track(common, strategy, detector, out),
        Command::Eval {
            common,
            strategy,
            outputs,
            out,
        } => cmd_eval(common, strategy, outputs, out),
        Command::Bench {
            common,
            strategy,
            detector,
            out,
        } => cmd_bench(common, strategy, detector, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mcball: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
