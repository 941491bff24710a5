//! Command-line front end: `simulate`, `detect`, `align`, `fuse`, `evaluate`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::align::{pair_poses, solve_alignment, AlignOptions, AlignmentJson, AlignmentWindow, RobustKernel};
use crate::degeneracy::{debounced_episodes, detect_stream, interval_iou, write_health_csv, DetectorConfig};
use crate::error::Error;
use crate::eval::{compare_row, evaluate, render_errors_csv, Alignment, EvalOptions, Trajectory, COMPARE_HEADER};
use crate::format::{round_sig, serde_sig, sig};
use crate::scan::{list_scans, read_scan, IcpParams};
use crate::sim::{read_json, read_scenario_dir, write_scenario, Scenario, Subsystem, SCANS_DIR};
use crate::supervisor::{run_offline, write_fuse_output, Convention, FuseConfig, HealthSource, SmootherConfig, SupervisorConfig};
use crate::tum::write_text;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const LOG_ENV: &str = "RESILIENT_FUSION_LOG";

#[derive(Debug, Parser)]
#[command(name = "resilient-fusion", version, about = "Degradation-aware LIO/VIO switching toolkit")]
pub struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the scenario or configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario directory.
    Simulate(SimulateArgs),
    /// Run the LiDAR degradation detector over a scan sequence.
    Detect(DetectArgs),
    /// Solve the VIO-to-LIO frame alignment over a window of pose pairs.
    Align(AlignArgs),
    /// Fuse the LIO and VIO streams of a scenario directory.
    Fuse(FuseArgs),
    /// Compute trajectory metrics against a reference.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Built-in scenario name.
    #[arg(long, conflicts_with = "scenario_file")]
    pub scenario: Option<String>,
    /// Full scenario definition (same schema as the written `scenario.json`).
    #[arg(long)]
    pub scenario_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Scenario directory or directory of `scan_*.xyz` files.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Scenario directory with `lio.tum` and `vio.tum`.
    #[arg(long)]
    pub input: PathBuf,
    /// Window end time (s). Defaults to the first scheduled LIO degradation,
    /// or the end of the streams.
    #[arg(long)]
    pub until: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Scenario directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub health_source: Option<HealthSource>,
    #[arg(long, value_enum)]
    pub convention: Option<Convention>,
    /// Ground-truth trajectory; the summary then includes the fused ATE.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Exit with status 3 if any alignment solve fails to converge.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Reference trajectory.
    #[arg(long)]
    pub gt: PathBuf,
    /// Estimated trajectory.
    #[arg(long, required_unless_present = "compare")]
    pub est: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub alignment: Option<Alignment>,
    /// Also write `errors.csv`.
    #[arg(long)]
    pub errors: bool,
    /// Evaluate several trajectories and write one CSV row per file.
    #[arg(long, num_args = 1.., conflicts_with = "est")]
    pub compare: Vec<PathBuf>,
}

/// Contents of the `--config` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub health_source: HealthSource,
    pub detector: DetectorConfig,
    pub icp: IcpParams,
    /// Cauchy kernel scale.
    pub kernel_c: f64,
    /// Alignment window size K (pairs).
    pub window: usize,
    /// Pose pairing tolerance (s).
    pub pair_tolerance: f64,
    pub smoother: SmootherConfig,
    pub align: AlignOptions,
    pub continuous_alignment: bool,
    pub clock_skew: f64,
    pub evaluation: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sup = SupervisorConfig::default();
        RunConfig {
            seed: None,
            health_source: HealthSource::Detector,
            detector: DetectorConfig::default(),
            icp: IcpParams::default(),
            kernel_c: sup.kernel_c,
            window: sup.window,
            pair_tolerance: sup.pair_tolerance,
            smoother: sup.smoother,
            align: sup.align,
            continuous_alignment: sup.continuous_alignment,
            clock_skew: sup.clock_skew,
            evaluation: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn supervisor(&self) -> SupervisorConfig {
        SupervisorConfig {
            smoother: self.smoother.clone(),
            window: self.window,
            pair_tolerance: self.pair_tolerance,
            kernel_c: self.kernel_c,
            align: self.align.clone(),
            continuous_alignment: self.continuous_alignment,
            clock_skew: self.clock_skew,
        }
    }

    pub fn fuse(&self) -> FuseConfig {
        FuseConfig {
            health_source: self.health_source,
            detector: self.detector.clone(),
            icp: self.icp.clone(),
            supervisor: self.supervisor(),
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.detector.validate()?;
        self.supervisor().validate()?;
        if !(self.icp.gate > 0.0) || self.icp.source_stride == 0 || self.icp.max_iterations == 0 {
            return Err(Error::InvalidArgument("invalid icp parameters".into()));
        }
        if !(self.evaluation.tolerance >= 0.0) || !(self.evaluation.rpe_delta > 0.0) {
            return Err(Error::InvalidArgument("invalid evaluation options".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

/// Errors raised while processing inputs.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

type CliResult<T> = std::result::Result<T, CliError>;

fn init_logging(verbose: bool) {
    let default = if verbose { "info" } else { "warn" };
    let env = env_logger::Env::new().filter_or(LOG_ENV, default);
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let cfg: RunConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn json_text<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    init_logging(cli.verbose);
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let config = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(cli, &config, a),
        Command::Detect(a) => cmd_detect(cli, &config, a),
        Command::Align(a) => cmd_align(cli, &config, a),
        Command::Fuse(a) => cmd_fuse(cli, &config, a),
        Command::Evaluate(a) => cmd_evaluate(cli, &config, a),
    }
}

fn cmd_simulate(cli: &Cli, config: &RunConfig, args: &SimulateArgs) -> CliResult<()> {
    let mut scenario = match (&args.scenario, &args.scenario_file) {
        (_, Some(path)) => read_json::<Scenario>(path).map_err(usage)?,
        (Some(name), None) => Scenario::named(name).map_err(usage)?,
        (None, None) => Scenario::corridor01(),
    };
    if let Some(seed) = cli.seed.or(config.seed) {
        scenario.seed = seed;
    }
    scenario.validate().map_err(usage)?;
    let n = write_scenario(&scenario, &cli.out)?;
    println!(
        "simulated {} (seed {}): {} poses, {} scans -> {}",
        scenario.name,
        scenario.seed,
        scenario.pose_count(),
        n,
        cli.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DetectSummary {
    samples: usize,
    raw_degraded: usize,
    episodes: Vec<[f64; 2]>,
    #[serde(serialize_with = "serde_sig::serialize")]
    mean_eps_align: f64,
    schedule_iou: Option<f64>,
    detector: DetectorConfig,
    icp: IcpParams,
}

fn cmd_detect(cli: &Cli, config: &RunConfig, args: &DetectArgs) -> CliResult<()> {
    let scans_dir = if args.input.join(SCANS_DIR).is_dir() {
        args.input.join(SCANS_DIR)
    } else {
        args.input.clone()
    };
    if !scans_dir.is_dir() {
        return Err(Error::data(&scans_dir, "not a directory").into());
    }
    let scans = list_scans(&scans_dir)?
        .iter()
        .map(|p| read_scan(p))
        .collect::<crate::Result<Vec<_>>>()?;
    if scans.is_empty() {
        return Err(Error::data(&scans_dir, "no scan files").into());
    }
    let out = detect_stream(&scans, &config.icp, &config.detector)?;
    let samples: Vec<_> = out.iter().map(|(h, _)| *h).collect();
    let episodes = debounced_episodes(&samples);
    let finite: Vec<f64> = samples.iter().skip(1).map(|h| h.eps_align).filter(|e| e.is_finite()).collect();
    let schedule_path = args.input.join("schedule.json");
    let schedule_iou = if schedule_path.exists() {
        let schedule: Vec<crate::sim::DegradationWindow> = read_json(&schedule_path)?;
        let windows: Vec<(f64, f64)> = schedule
            .iter()
            .filter(|w| w.subsystem == Subsystem::Lio)
            .map(|w| (w.t_start, w.t_end))
            .collect();
        Some(round_sig(interval_iou(&episodes, &windows)))
    } else {
        None
    };
    let summary = DetectSummary {
        samples: samples.len(),
        raw_degraded: samples.iter().filter(|h| h.raw).count(),
        episodes: episodes.iter().map(|(a, b)| [round_sig(*a), round_sig(*b)]).collect(),
        mean_eps_align: if finite.is_empty() {
            0.0
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        },
        schedule_iou,
        detector: config.detector.clone(),
        icp: config.icp.clone(),
    };
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    write_health_csv(&cli.out.join("health.csv"), &samples)?;
    write_text(&cli.out.join("detect.json"), &json_text(&summary))?;
    println!("detected {} degradation episode(s) over {} scans", episodes.len(), samples.len());
    Ok(())
}

fn cmd_align(cli: &Cli, config: &RunConfig, args: &AlignArgs) -> CliResult<()> {
    let dir = read_scenario_dir(&args.input)?;
    let until = args.until.unwrap_or_else(|| {
        dir.schedule
            .iter()
            .filter(|w| w.subsystem == Subsystem::Lio)
            .map(|w| w.t_start)
            .fold(f64::INFINITY, f64::min)
    });
    let pairs: Vec<_> = pair_poses(&dir.lio, &dir.vio, config.pair_tolerance)
        .into_iter()
        .filter(|p| p.timestamp < until)
        .collect();
    let start = pairs.len().saturating_sub(config.window);
    let window = AlignmentWindow::new(pairs[start..].to_vec(), config.align.k_min)?;
    let kernel = RobustKernel::new(config.kernel_c).map_err(usage)?;
    let result = solve_alignment(&window, &kernel, &config.align)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    write_text(&cli.out.join("align.json"), &json_text(&AlignmentJson::from(&result)))?;
    println!(
        "aligned {} pairs: cost {} after {} iterations, inliers {}",
        window.len(),
        sig(result.final_cost),
        result.iterations,
        sig(result.inlier_fraction)
    );
    if !result.converged {
        return Err(CliError::Numeric("alignment did not converge".into()));
    }
    Ok(())
}

fn cmd_fuse(cli: &Cli, config: &RunConfig, args: &FuseArgs) -> CliResult<()> {
    let mut fuse = config.fuse();
    if let Some(h) = args.health_source {
        fuse.health_source = h;
    }
    if let Some(c) = args.convention {
        fuse.supervisor.smoother.convention = c;
    }
    let output = run_offline(&args.input, &fuse)?;
    write_fuse_output(&cli.out, &output)?;
    let mut line = format!(
        "{} VIO episode(s), {} fused poses",
        output.report.vio_episodes, output.report.outputs.poses
    );
    if let Some(gt_path) = &args.gt {
        let gt = Trajectory::load(gt_path)?;
        let fused = Trajectory::load(&cli.out.join("fused.tum"))?;
        let (m, _) = evaluate(&fused, &gt, &config.evaluation)?;
        line.push_str(&format!(", ate_rmse {}", sig(m.ate_rmse)));
    }
    println!("{line}");
    if args.strict && output.had_solver_failure() {
        return Err(CliError::Numeric("an alignment solve failed to converge".into()));
    }
    Ok(())
}

fn cmd_evaluate(cli: &Cli, config: &RunConfig, args: &EvaluateArgs) -> CliResult<()> {
    let mut opts = config.evaluation.clone();
    if let Some(a) = args.alignment {
        opts.alignment = a;
    }
    let gt = Trajectory::load(&args.gt)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    if !args.compare.is_empty() {
        let mut csv = String::from(COMPARE_HEADER);
        csv.push('\n');
        for path in &args.compare {
            let est = Trajectory::load(path)?;
            let (m, _) = evaluate(&est, &gt, &opts).map_err(|e| Error::data(path, e.to_string()))?;
            csv.push_str(&compare_row(&path.display().to_string(), &m));
            csv.push('\n');
        }
        write_text(&cli.out.join("compare.csv"), &csv)?;
        print!("{csv}");
        return Ok(());
    }
    let est_path = args.est.as_ref().expect("clap requires --est without --compare");
    let est = Trajectory::load(est_path)?;
    let (m, errors) = evaluate(&est, &gt, &opts).map_err(|e| Error::data(est_path, e.to_string()))?;
    write_text(&cli.out.join("metrics.json"), &json_text(&m))?;
    if args.errors {
        write_text(&cli.out.join("errors.csv"), &render_errors_csv(&errors))?;
    }
    println!("ate_rmse {}", sig(m.ate_rmse));
    Ok(())
}
