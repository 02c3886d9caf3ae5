//! `aquarange`: scenario runner, stage benchmark and stream export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use aquarange_core::audioclock::{EmissionKind, StreamClock};
use aquarange_core::dualmic::PathMethod;
use aquarange_core::hydrosim::{
    self, noise_sigma_for, DeviceGeometry, DeviceModel, Medium, MediumParams, PreambleKind, Trajectory,
    DIST_SWEEP_TOML,
};
use aquarange_core::receiver::{DetectorConfig, DualStreamReceiver};
use aquarange_core::{pcm, report, stages, waveform, Error, MediumConfig, ProfilePreset, SimScenario};

#[derive(Parser)]
#[command(name = "aquarange", version, about = "Two-way acoustic ranging simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write results.csv, summary.csv and an error CDF.
    Run(RunArgs),
    /// Time the receive stages over one processing buffer.
    Bench(BenchArgs),
    /// Range a moving replier and write its trajectory against ground truth.
    Track(TrackArgs),
    /// Write tx and rx streams of one preamble as raw PCM, plus channel plots.
    Render(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SpeedModel {
    Fixed,
    Wilson,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Dual,
    Bottom,
    Top,
}

impl From<Method> for PathMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Dual => PathMethod::Dual,
            Method::Bottom => PathMethod::BottomOnly,
            Method::Top => PathMethod::TopOnly,
        }
    }
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file (TOML). Defaults to the bundled distance sweep.
    scenario: Option<PathBuf>,
    /// Exchanges per distance.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// clean, case_air, case_underwater_dense or shallow_severe.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    preamble: Option<String>,
    #[arg(long, value_enum)]
    speed_model: Option<SpeedModel>,
    /// Water temperature for the Wilson model.
    #[arg(long, default_value_t = 15.0)]
    temperature_c: f64,
    #[arg(long, default_value_t = 35.0)]
    salinity_psu: f64,
    #[arg(long, default_value_t = 1.0)]
    depth_m: f64,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Per-sample SNR at 1 m; overrides the scenario.
    #[arg(long)]
    snr_db: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 500.0)]
    buffer_ms: f64,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long)]
    preamble: Option<String>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Replier speed away from the sender, m/s; overrides the scenario.
    #[arg(long)]
    velocity: Option<f64>,
    /// Starting range, m; overrides the scenario's first distance.
    #[arg(long)]
    start_m: Option<f64>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long, default_value_t = 20.0)]
    distance_m: f64,
    #[arg(long, default_value = "case_underwater_dense")]
    profile: String,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    preamble: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Failures mapped to exit codes: 2 for configuration, 3 at run time.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Scenario { .. } | Error::Parameter { .. } => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn config<T: std::fmt::Display>(field: &str) -> impl FnOnce(T) -> Failure + '_ {
    move |e| Failure::Config(format!("`{field}`: {e}"))
}

fn load(args: &ScenarioArgs) -> Result<SimScenario, Failure> {
    let mut sc = match &args.scenario {
        Some(p) => SimScenario::from_path(p).map_err(|e| match e {
            Error::Io { .. } => Failure::Config(e.to_string()),
            other => other.into(),
        })?,
        None => SimScenario::from_toml_str(DIST_SWEEP_TOML)?,
    };
    if let Some(n) = args.trials {
        sc.exchanges = n;
    }
    if let Some(s) = args.seed {
        sc.seed = s;
    }
    if let Some(p) = &args.profile {
        sc.profile = p.parse::<ProfilePreset>()?;
    }
    if let Some(p) = &args.preamble {
        sc.preamble = p.parse::<PreambleKind>()?;
    }
    if let Some(m) = args.method {
        sc.path_method = m.into();
    }
    if args.snr_db.is_some() {
        sc.snr_db = args.snr_db;
    }
    match args.speed_model {
        Some(SpeedModel::Fixed) => sc.medium = MediumConfig::Fixed { speed_mps: 1500.0 },
        Some(SpeedModel::Wilson) => {
            sc.medium = MediumConfig::Wilson {
                temperature_c: args.temperature_c,
                salinity_psu: args.salinity_psu,
                depth_m: args.depth_m,
            }
        }
        None => {}
    }
    sc.validate()?;
    Ok(sc)
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn method_name(m: PathMethod) -> &'static str {
    match m {
        PathMethod::Dual => "dual",
        PathMethod::BottomOnly => "bottom",
        PathMethod::TopOnly => "top",
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

fn run(args: &RunArgs) -> Result<(), Failure> {
    let sc = load(&args.scenario)?;
    let out = &args.scenario.out;
    prepare_out(out)?;
    let rep = hydrosim::run_trials(&sc)?;
    report::write_results(&out.join(report::RESULTS_FILE), &rep.records, method_name(sc.path_method))?;
    report::write_summary(&out.join(report::SUMMARY_FILE), &rep.summary)?;
    let series: Vec<(String, Vec<f64>)> = sc
        .distances_m
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let errs = rep.records.iter().filter(|r| r.distance_index == i).filter_map(|r| r.error_m);
            (format!("{d} m"), errs.collect::<Vec<f64>>())
        })
        .filter(|(_, v)| !v.is_empty())
        .collect();
    if !series.is_empty() {
        write_text(&out.join("error_cdf.svg"), &report::cdf_svg(&series))?;
    }
    println!("scenario {} ({} exchanges per distance, seed {})", sc.name, sc.exchanges, sc.seed);
    println!("{:>10} {:>9} {:>7} {:>9} {:>9}", "distance", "detected", "rate", "median", "p95");
    for s in &rep.summary {
        println!(
            "{:>8.1} m {:>4}/{:<4} {:>7.3} {:>9} {:>9}",
            s.distance_m,
            s.ranged,
            s.attempts,
            s.detection_rate,
            fmt_opt(s.median_abs_error_m),
            fmt_opt(s.p95_abs_error_m)
        );
    }
    if sc.multinode.is_some() {
        let mn = hydrosim::run_multinode(&sc)?;
        report::write_multinode(&out.join(report::MULTINODE_FILE), &mn.rows)?;
        let worst = mn.rows.iter().filter_map(|r| r.disagreement_m).fold(0.0f64, f64::max);
        println!("multinode: {} rows, {} failures, worst disagreement {worst:.3} m", mn.rows.len(), mn.failures);
    }
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<(), Failure> {
    let kind = match &args.preamble {
        Some(p) => p.parse::<PreambleKind>()?,
        None => PreambleKind::Short,
    };
    if !(args.buffer_ms > 0.0 && args.buffer_ms.is_finite()) {
        return Err(Failure::Config("`buffer_ms`: must be positive".into()));
    }
    let t = stages::time_stages(&kind.spec(), args.buffer_ms, args.runs, 0)?;
    if args.json {
        let text = serde_json::to_string_pretty(&t).map_err(|e| Failure::Runtime(e.to_string()))?;
        println!("{text}");
        return Ok(());
    }
    println!("{} runs over a {} ms buffer", t.runs, t.buffer_ms);
    for (name, s) in [
        ("cross-correlation", t.cross_correlation),
        ("auto-correlation", t.auto_correlation),
        ("channel estimation", t.channel_estimation),
        ("total", t.total),
    ] {
        println!("{name:<20} {s}");
    }
    Ok(())
}

fn track(args: &TrackArgs) -> Result<(), Failure> {
    let mut sc = load(&args.scenario)?;
    if let Some(v) = args.velocity {
        sc.velocity_mps = v;
    }
    if let Some(d) = args.start_m {
        sc.distances_m = vec![d];
    }
    sc.distances_m.truncate(1);
    sc.validate()?;
    let out = &args.scenario.out;
    prepare_out(out)?;
    let session = hydrosim::run_session(&sc, 0)?;
    let recs = &session.records;
    report::write_track(&out.join(report::TRACK_FILE), recs)?;
    let truth: Vec<(f64, f64)> = recs.iter().map(|r| (r.t_query_s, r.true_distance_m)).collect();
    let est: Vec<(f64, f64)> = recs.iter().filter_map(|r| r.est_distance_m.map(|d| (r.t_query_s, d))).collect();
    let svg = report::line_svg("time (s)", "range (m)", &[("truth".into(), truth), ("estimate".into(), est)]);
    write_text(&out.join("trajectory.svg"), &svg)?;
    let s = hydrosim::summarize(sc.distances_m[0], recs);
    println!(
        "{} queries every {} s at {} m/s: {} ranged, median {} m, p95 {} m",
        s.attempts,
        sc.period_s,
        sc.velocity_mps,
        s.ranged,
        fmt_opt(s.median_abs_error_m),
        fmt_opt(s.p95_abs_error_m)
    );
    Ok(())
}

fn render(args: &RenderArgs) -> Result<(), Failure> {
    let profile: ProfilePreset = args.profile.parse()?;
    let kind = match &args.preamble {
        Some(p) => p.parse::<PreambleKind>()?,
        None => PreambleKind::Short,
    };
    if !(args.distance_m > 0.0 && args.distance_m <= 500.0) {
        return Err(config("distance_m")("must be within (0, 500] m"));
    }
    let spec = kind.spec();
    let preamble = waveform::build_preamble(&spec)?;
    let noise_sigma = args.snr_db.map(|s| noise_sigma_for(&spec, s)).transpose()?;
    let params = MediumParams { sound_speed_mps: 1500.0, preset: profile, noise_sigma, seed: args.seed, impulse: None };
    let device = |x: f64| DeviceModel {
        clock: StreamClock::default(),
        geometry: DeviceGeometry::default(),
        trajectory: Trajectory::fixed([x, 0.0, 0.0]),
    };
    let mut medium = Medium::new(params, vec![device(0.0), device(args.distance_m)])?;
    let start = spec.sample_rate_hz as i64 / 10;
    medium.emit(0, start, EmissionKind::Query, &preamble.samples)?;
    let len = spec.sample_rate_hz as usize;
    let rx = [medium.render(1, 0, 0, len), medium.render(1, 1, 0, len)];

    prepare_out(&args.out)?;
    let mut tx = vec![0.0; start as usize];
    tx.extend_from_slice(&preamble.samples);
    waveform::export_waveform(&args.out.join("tx.pcm"), "preamble", &tx, &preamble)?;
    pcm::write_pcm16(&args.out.join("rx_bottom.pcm"), &rx[0])?;
    pcm::write_pcm16(&args.out.join("rx_top.pcm"), &rx[1])?;

    let mut receiver = DualStreamReceiver::new(&preamble, DetectorConfig { buffer_len: len, ..DetectorConfig::default() });
    match receiver.push(&rx[0], &rx[1])? {
        Some(r) => {
            let series: Vec<(String, Vec<(f64, f64)>)> = r
                .estimates
                .iter()
                .zip(["bottom", "top"])
                .map(|(e, name)| (name.to_string(), e.taps.iter().enumerate().map(|(k, &v)| (k as f64, v)).collect()))
                .collect();
            write_text(&args.out.join("channel.svg"), &report::line_svg("tap", "|h|", &series))?;
            println!(
                "detected at sample {} (autocorrelation {:.3}); streams and channel plot in {}",
                r.detection.coarse_index,
                r.detection.autocorr_score,
                args.out.display()
            );
        }
        None => println!("no preamble detected; streams written to {}", args.out.display()),
    }
    Ok(())
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("AQUARANGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config("AQUARANGE_THREADS")(format!("`{v}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Run(a) => run(a),
        Command::Bench(a) => bench(a),
        Command::Track(a) => track(a),
        Command::Render(a) => render(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
