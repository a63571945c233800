use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use cavitykin::dataio::{
    self, fit_local_frame, load_dataset, load_json, load_model, load_report, load_surface,
    save_case_records, save_cell_depths, save_dataset, save_model, save_report, save_surface,
    DatasetFile, ExcludeDisc, ModelMeta, Versioned,
};
use cavitykin::geometry::{unit, DEFAULT_STANDOFF};
use cavitykin::kinematics::fk_surface;
use cavitykin::planner::{plan_solve, PlanProblem};
use cavitykin::slp::{fit_slp, FitConfig, FitReport};
use cavitykin::synth::{self, BeamProfile, ExperimentPlan, SuccessReport};
use cavitykin::volumetrics::{
    compare_cavities, depth_field_measured, depth_field_predicted, sample_roi, VolumetricReport,
    DEFAULT_RESOLUTION,
};
use cavitykin::{Error, IkConstraints, LaserConfig, LocalSurfaceFrame, Point3, SolverOpts};

#[derive(Parser, Debug)]
#[command(name = "cavitykin", version, about = "Laser ablation cavity prediction and planning")]
struct Cli {
    /// RNG seed. Defaults to 0, or to the plan's seed for `simulate`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for reports and derived outputs.
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    /// Format for surfaces written without a recognised extension.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a depth model to a regression dataset.
    Fit(FitArgs),
    /// Predict the post-ablation surface of one shot.
    Predict(PredictArgs),
    /// Find the shot that turns a pre-ablation surface into a target.
    Plan(PlanArgs),
    /// Compare a predicted cavity against a measured one.
    Evaluate(EvaluateArgs),
    /// Run a seeded planning sweep in a synthetic world.
    Simulate(SimulateArgs),
    /// Write synthetic inputs for the other commands.
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    #[arg(long, default_value_t = 500)]
    max_iterations: usize,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    surface: PathBuf,
    /// `cx,cy,cz,vx,vy,vz`
    #[arg(long, allow_hyphen_values = true)]
    config: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STANDOFF)]
    standoff: f64,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    constraints: PathBuf,
    /// `cx,cy,cz,vx,vy,vz`
    #[arg(long, allow_hyphen_values = true)]
    init: String,
    #[arg(long, default_value_t = 0)]
    restarts: usize,
    #[arg(long, default_value_t = DEFAULT_STANDOFF)]
    standoff: f64,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// `cx,cy,cz,vx,vy,vz`
    #[arg(long, allow_hyphen_values = true)]
    config: String,
    #[arg(long)]
    gt_surface: PathBuf,
    /// `auto` fits the tissue plane outside the cavity; otherwise a frame JSON file.
    #[arg(long, default_value = "auto")]
    frame: String,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    /// ROI cells per mm.
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    resolution: f64,
    /// Points within this distance of the shot center are left out of the `auto` plane fit.
    #[arg(long)]
    exclude_radius: Option<f64>,
    /// Write per-cell depths to this CSV.
    #[arg(long)]
    cells: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_STANDOFF)]
    standoff: f64,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    /// Worker threads; 0 picks one per core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 0.35)]
    width: f64,
    /// Radial taper of a skewed profile; omit for a symmetric Gaussian.
    #[arg(long)]
    taper: Option<f64>,
    /// Shot used for the target and ground-truth cavity.
    #[arg(long, allow_hyphen_values = true, default_value = "0.1,-0.05,0,0.2,0.1,-1")]
    config: String,
    /// Points per side of the pre-ablation grid.
    #[arg(long, default_value_t = 41)]
    grid: usize,
    #[arg(long, default_value_t = 1.5)]
    half_width: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct FrameFile {
    center: [f64; 3],
    normal: [f64; 3],
}

#[derive(Debug, Serialize)]
struct PlanOutput {
    config: [f64; 6],
    total_cost: f64,
    converged: bool,
    iterations: usize,
    kkt_residual: f64,
    per_point_costs: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct SimulateOutput<'a> {
    fit: &'a FitReport,
    #[serde(flatten)]
    report: &'a SuccessReport,
}

/// Failure with the intended exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<ExitCode, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAVITYKIN_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(&cli, a),
        Command::Predict(a) => cmd_predict(&cli, a),
        Command::Plan(a) => cmd_plan(&cli, a),
        Command::Evaluate(a) => cmd_evaluate(&cli, a),
        Command::Simulate(a) => cmd_simulate(&cli, a),
        Command::Generate(a) => cmd_generate(&cli, a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn parse_config(text: &str) -> Result<LaserConfig, Error> {
    let values: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::InvalidInput(format!("config '{text}': {e}")))?;
    let Ok(x) = <[f64; 6]>::try_from(values) else {
        return Err(Error::InvalidInput(format!(
            "config '{text}' needs 6 comma-separated values cx,cy,cz,vx,vy,vz"
        )));
    };
    let norm = Vector3::new(x[3], x[4], x[5]).norm();
    let cfg = LaserConfig::from_array(x)?;
    if (norm - 1.0).abs() > 1e-9 {
        log::warn!("direction has norm {norm}; normalized to unit length");
    }
    Ok(cfg)
}

fn out_path(cli: &Cli, name: &str) -> PathBuf {
    cli.output_dir.join(name)
}

fn with_format(cli: &Cli, path: &Path) -> PathBuf {
    if path.extension().is_some() {
        return path.to_path_buf();
    }
    path.with_extension(match cli.format {
        Format::Json => "json",
        Format::Csv => "csv",
    })
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(&Versioned::new(value))?);
    Ok(())
}

fn cmd_fit(cli: &Cli, a: &FitArgs) -> CmdResult {
    let data = load_dataset(&a.dataset)?.into_dataset()?;
    let config = FitConfig {
        restarts: a.restarts,
        max_iterations: a.max_iterations,
        seed: cli.seed.unwrap_or(0),
        ..FitConfig::default()
    };
    let (model, report) = fit_slp(&data, &config)?;
    save_model(&model, ModelMeta::from_report(&report), &a.out)?;
    save_report(&report, &out_path(cli, "fit_report.json"))?;
    print_json(&report)?;
    if !report.converged {
        log::warn!("fit hit the iteration limit without converging");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(cli: &Cli, a: &PredictArgs) -> CmdResult {
    let (model, _) = load_model(&a.model)?;
    let pre = load_surface(&a.surface)?;
    let cfg = parse_config(&a.config)?;
    let post = fk_surface(&cfg, &model, &pre, a.standoff);
    save_surface(&post, &with_format(cli, &a.out))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_plan(cli: &Cli, a: &PlanArgs) -> CmdResult {
    let (model, _) = load_model(&a.model)?;
    let pre = load_surface(&a.pre)?;
    let target = load_surface(&a.target)?;
    let constraints: IkConstraints = load_report(&a.constraints)?;
    let init = parse_config(&a.init)?;
    let problem = PlanProblem::new(pre, target, model, constraints, a.standoff)?;
    let opts = SolverOpts {
        restarts: a.restarts,
        seed: cli.seed.unwrap_or(0),
        standoff: a.standoff,
        ..SolverOpts::default()
    };
    let sol = plan_solve(&problem, &init, &opts)?;
    let out = PlanOutput {
        config: sol.config.to_array(),
        total_cost: sol.total_cost,
        converged: sol.converged,
        iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
        per_point_costs: sol.per_point_costs,
    };
    save_report(&out, &out_path(cli, "plan_solution.json"))?;
    print_json(&out)?;
    if !sol.converged {
        log::warn!("planner stopped without meeting the KKT tolerance");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> CmdResult {
    let (model, _) = load_model(&a.model)?;
    let cfg = parse_config(&a.config)?;
    let gt = load_surface(&a.gt_surface)?;
    let frame = if a.frame == "auto" {
        let exclude = ExcludeDisc {
            center: cfg.center.into(),
            radius: a.exclude_radius.unwrap_or(a.radius),
        };
        fit_local_frame(&gt, Some(&exclude))?
    } else {
        let f: FrameFile = load_report(Path::new(&a.frame))?;
        LocalSurfaceFrame {
            center: Point3::from(f.center),
            normal: unit(Vector3::from(f.normal))?,
        }
    };
    let grid = sample_roi(&cfg.incident_plane(a.standoff), a.radius, a.resolution)?;
    let predicted = depth_field_predicted(&model, &grid);
    let measured = depth_field_measured(&gt, &frame, &grid)?;
    let report: VolumetricReport = compare_cavities(&predicted, &measured, &grid)?;
    save_report(&report, &out_path(cli, "volumetric_report.json"))?;
    let cells = a
        .cells
        .clone()
        .or_else(|| (cli.format == Format::Csv).then(|| out_path(cli, "cell_depths.csv")));
    if let Some(path) = cells {
        save_cell_depths(&grid, &predicted, &measured, &path)?;
    }
    print_json(&report)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> CmdResult {
    let mut plan: ExperimentPlan = load_json(&a.plan)?;
    if let Some(seed) = cli.seed {
        plan.seed = seed;
    }
    let profile: BeamProfile = load_report(&a.profile)?;
    let sim = synth::simulate(&plan, &profile, a.workers)?;
    save_model(
        &sim.model,
        ModelMeta::from_report(&sim.fit),
        &out_path(cli, "model.json"),
    )?;
    save_case_records(&sim.report.records, &out_path(cli, "cases.csv"))?;
    let out = SimulateOutput {
        fit: &sim.fit,
        report: &sim.report,
    };
    save_report(&out, &out_path(cli, "simulation.json"))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&Versioned::new(serde_json::json!({
            "rate": sim.report.rate,
            "successes": sim.report.successes,
            "cases": sim.report.cases,
            "fit_rmse": sim.fit.rmse,
        })))
        .map_err(Error::from)?
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_generate(cli: &Cli, a: &GenerateArgs) -> CmdResult {
    let seed = cli.seed.unwrap_or(0);
    let profile = match a.taper {
        Some(t) => BeamProfile::skewed(a.amplitude, a.width, t),
        None => BeamProfile::gaussian(a.amplitude, a.width),
    };
    profile.validate()?;
    let cfg = parse_config(&a.config)?;

    let mut plan = ExperimentPlan::paper_default(seed);
    plan.base_center = [0.0; 3];
    let data = synth::training_dataset(&profile, &plan.training, seed)?;
    let mut provenance = serde_json::Map::new();
    provenance.insert("generator".into(), "cavitykin generate".into());
    provenance.insert("seed".into(), seed.into());
    provenance.insert("profile".into(), serde_json::to_value(profile).map_err(Error::from)?);
    save_dataset(
        &DatasetFile::from_dataset(&data, provenance),
        &out_path(cli, "dataset.json"),
    )?;
    save_report(&profile, &out_path(cli, "profile.json"))?;
    dataio::save_json(&plan, &out_path(cli, "plan.json"))?;
    save_report(
        &IkConstraints::centered(cfg.center.z, 5.0),
        &out_path(cli, "constraints.json"),
    )?;

    let pre = synth::planar_grid(a.half_width, a.grid, cfg.center.z)?;
    let (cavity, _) = synth::generate_cavity(&profile, &cfg, &pre, 0.0, seed, DEFAULT_STANDOFF, 1);
    let ext = match cli.format {
        Format::Json => "json",
        Format::Csv => "csv",
    };
    save_surface(&pre, &out_path(cli, &format!("pre.{ext}")))?;
    save_surface(&cavity, &out_path(cli, &format!("cavity.{ext}")))?;
    Ok(ExitCode::SUCCESS)
}
