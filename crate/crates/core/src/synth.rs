//! Synthetic ground truth: beam profiles, cavities and planning sweeps.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance_to_laser_center, unit, LaserConfig, Point3, Surface, UnitVec3};
use crate::kinematics::{fk_surface, DepthProfile, IkConstraints, SolverOpts};
use crate::planner::{plan_solve, PlanProblem};
use crate::slp::{fit_slp, CavitySample, FitConfig, FitReport, RegressionDataset, SlpModel};

/// ‖X_opt − X_gt‖₂ threshold for a successful plan.
pub const SUCCESS_THRESHOLD: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProfileKind {
    Gaussian,
    /// Gaussian multiplied by `1 + taper * s / width`.
    Skewed { taper: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamProfile {
    /// Peak depth of the Gaussian factor, mm.
    pub amplitude: f64,
    /// Gaussian width σ, mm.
    pub width: f64,
    pub kind: ProfileKind,
}

impl BeamProfile {
    pub fn gaussian(amplitude: f64, width: f64) -> Self {
        Self {
            amplitude,
            width,
            kind: ProfileKind::Gaussian,
        }
    }

    pub fn skewed(amplitude: f64, width: f64, taper: f64) -> Self {
        Self {
            amplitude,
            width,
            kind: ProfileKind::Skewed { taper },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "profile amplitude {} must be non-negative",
                self.amplitude
            )));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "profile width {} must be positive",
                self.width
            )));
        }
        if let ProfileKind::Skewed { taper } = self.kind {
            if !taper.is_finite() {
                return Err(Error::InvalidInput("profile taper must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn depth(&self, s: f64) -> f64 {
        let g = self.amplitude * (-s * s / (2.0 * self.width * self.width)).exp();
        match self.kind {
            ProfileKind::Gaussian => g,
            ProfileKind::Skewed { taper } => (g * (1.0 + taper * s / self.width)).max(0.0),
        }
    }
}

impl DepthProfile for BeamProfile {
    fn depth(&self, s: f64) -> f64 {
        BeamProfile::depth(self, s)
    }

    fn depth_slope(&self, s: f64) -> f64 {
        let w2 = self.width * self.width;
        let g = self.amplitude * (-s * s / (2.0 * w2)).exp();
        let dg = -s / w2 * g;
        match self.kind {
            ProfileKind::Gaussian => dg,
            ProfileKind::Skewed { taper } => {
                let lin = 1.0 + taper * s / self.width;
                if g * lin <= 0.0 {
                    0.0
                } else {
                    dg * lin + g * taper / self.width
                }
            }
        }
    }
}

/// Square `n × n` grid of points on the plane `z`, centered on the origin.
pub fn planar_grid(half_width: f64, n: usize, z: f64) -> Result<Surface> {
    if n < 2 || !(half_width > 0.0) {
        return Err(Error::InvalidInput(format!(
            "grid needs n >= 2 and a positive half width, got n={n}, half width {half_width}"
        )));
    }
    let step = 2.0 * half_width / (n - 1) as f64;
    let mut pts = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            pts.push(Point3::new(
                -half_width + i as f64 * step,
                -half_width + j as f64 * step,
                z,
            ));
        }
    }
    Surface::new(pts)
}

/// `n` points uniformly distributed over a disc on the plane `z`.
pub fn random_disc_patch(radius: f64, n: usize, z: f64, seed: u64) -> Result<Surface> {
    if n == 0 || !(radius > 0.0) {
        return Err(Error::InvalidInput(format!(
            "disc patch needs n >= 1 and a positive radius, got n={n}, radius {radius}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            let r = radius * rng.random::<f64>().sqrt();
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            Point3::new(r * t.cos(), r * t.sin(), z)
        })
        .collect();
    Surface::new(pts)
}

/// Ablates `pre` with one shot and returns the cavity and its `(s, d)` tuples.
///
/// Each point moves `|depth(s) + ε|` along the beam with `ε ~ N(0, noise_sigma²)`.
pub fn generate_cavity(
    profile: &BeamProfile,
    cfg: &LaserConfig,
    pre: &Surface,
    noise_sigma: f64,
    seed: u64,
    standoff: f64,
    cavity_id: u32,
) -> (Surface, Vec<CavitySample>) {
    let plane = cfg.incident_plane(standoff);
    let noise = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma).expect("finite sigma"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = cfg.direction.into_inner();
    let mut points = Vec::with_capacity(pre.len());
    let mut samples = Vec::with_capacity(pre.len());
    for (k, p) in pre.points().iter().enumerate() {
        let s = distance_to_laser_center(p, &plane);
        let mut d = profile.depth(s);
        if let Some(n) = &noise {
            d = (d + n.sample(&mut rng)).abs();
        }
        points.push(p + v * d);
        samples.push(CavitySample {
            s,
            d,
            cavity_id,
            point_index: k,
        });
    }
    (
        Surface::new(points).expect("finite displacement of a valid surface"),
        samples,
    )
}

/// Rotation `Rx(θx) Ry(θy)` with angles in degrees.
pub fn xy_rotation(theta_x_deg: f64, theta_y_deg: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), theta_x_deg.to_radians())
        * Rotation3::from_axis_angle(&Vector3::y_axis(), theta_y_deg.to_radians())
}

/// Inclusive degree grid `lo, lo + step, …, hi` in both axes.
pub fn angle_grid(lo: f64, hi: f64, step: f64) -> Vec<[f64; 2]> {
    let n = ((hi - lo) / step).round() as usize + 1;
    let axis: Vec<f64> = (0..n).map(|i| lo + i as f64 * step).collect();
    axis.iter()
        .flat_map(|&x| axis.iter().map(move |&y| [x, y]))
        .collect()
}

/// Training data for the model fitted inside a simulated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSpec {
    pub cavities: u32,
    pub samples_per_cavity: usize,
    /// Cavity ids (1-based) held out for testing.
    pub test_cavities: Vec<u32>,
    pub val_fraction: f64,
    pub patch_radius: f64,
    pub noise_sigma: f64,
    pub fit: FitConfig,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            cavities: 5,
            samples_per_cavity: 660,
            test_cavities: vec![4, 5],
            val_fraction: 0.2,
            patch_radius: 1.5,
            noise_sigma: 0.0,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfaceSpec {
    pub half_width: f64,
    pub points_per_side: usize,
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        Self {
            half_width: 1.0,
            points_per_side: 21,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// `(θx, θy)` pairs in degrees for the ground-truth directions.
    pub gt_angle_grid: Vec<[f64; 2]>,
    /// `(θx, θy)` pairs in degrees applied to each gt direction to form inits.
    pub init_angle_grid: Vec<[f64; 2]>,
    /// Init centers are offset by uniform noise in `[-bound, bound]` in x and y, mm.
    pub position_noise_bound: f64,
    pub seed: u64,
    /// Shared laser incident center for every gt configuration.
    #[serde(default = "origin")]
    pub base_center: [f64; 3],
    #[serde(default = "down")]
    pub base_direction: [f64; 3],
    #[serde(default)]
    pub surface: SurfaceSpec,
    #[serde(default = "crate::geometry::default_standoff")]
    pub standoff: f64,
    #[serde(default)]
    pub solver: SolverOpts,
    /// Defaults to ±5 mm around the origin with the plane through `base_center`.
    #[serde(default)]
    pub constraints: Option<IkConstraints>,
    #[serde(default)]
    pub training: TrainingSpec,
}

fn origin() -> [f64; 3] {
    [0.0; 3]
}

fn down() -> [f64; 3] {
    [0.0, 0.0, -1.0]
}

impl ExperimentPlan {
    /// 25 gt orientations over ±30° at 15°, 9 inits over ±15° at 15°, 0.5 mm
    /// position noise.
    pub fn paper_default(seed: u64) -> Self {
        Self {
            gt_angle_grid: angle_grid(-30.0, 30.0, 15.0),
            init_angle_grid: angle_grid(-15.0, 15.0, 15.0),
            position_noise_bound: 0.5,
            seed,
            base_center: origin(),
            base_direction: down(),
            surface: SurfaceSpec::default(),
            standoff: crate::geometry::DEFAULT_STANDOFF,
            solver: SolverOpts::default(),
            constraints: None,
            training: TrainingSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gt_angle_grid.is_empty() || self.init_angle_grid.is_empty() {
            return Err(Error::InvalidInput("angle grids must be non-empty".into()));
        }
        if !(self.position_noise_bound >= 0.0 && self.position_noise_bound.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "position noise bound {} must be >= 0",
                self.position_noise_bound
            )));
        }
        if !(self.standoff > 0.0 && self.standoff.is_finite()) {
            return Err(Error::InvalidInput("standoff must be positive".into()));
        }
        unit(Vector3::from(self.base_direction))?;
        Ok(())
    }

    pub fn case_count(&self) -> usize {
        self.gt_angle_grid.len() * self.init_angle_grid.len()
    }

    pub fn effective_constraints(&self) -> IkConstraints {
        self.constraints
            .unwrap_or_else(|| IkConstraints::centered(self.base_center[2], 5.0))
    }

    pub fn pre_surface(&self) -> Result<Surface> {
        planar_grid(
            self.surface.half_width,
            self.surface.points_per_side,
            self.base_center[2],
        )
    }
}

/// SplitMix64 finalizer applied to `seed + case`.
pub fn derive_seed(seed: u64, case: u64) -> u64 {
    let mut z = seed.wrapping_add(case.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperimentCase {
    pub case_id: usize,
    pub gt_index: usize,
    pub init_index: usize,
    pub gt: LaserConfig,
    pub init: LaserConfig,
    pub seed: u64,
}

/// Ground-truth configurations, each paired with its initial guesses.
pub fn sample_experiment_configs(
    plan: &ExperimentPlan,
    base_direction: &UnitVec3,
    base_center: &Point3,
) -> Vec<(LaserConfig, Vec<LaserConfig>)> {
    experiment_cases_from(plan, base_direction, base_center)
        .chunk_by(|a, b| a.gt_index == b.gt_index)
        .map(|chunk| (chunk[0].gt, chunk.iter().map(|c| c.init).collect()))
        .collect()
}

/// Flat list of cases in `case_id` order, using the plan's base pose.
pub fn experiment_cases(plan: &ExperimentPlan) -> Result<Vec<ExperimentCase>> {
    plan.validate()?;
    let dir = unit(Vector3::from(plan.base_direction))?;
    Ok(experiment_cases_from(plan, &dir, &Point3::from(plan.base_center)))
}

fn experiment_cases_from(
    plan: &ExperimentPlan,
    base_direction: &UnitVec3,
    base_center: &Point3,
) -> Vec<ExperimentCase> {
    let mut cases = Vec::with_capacity(plan.case_count());
    let bound = plan.position_noise_bound;
    for (gi, &[gx, gy]) in plan.gt_angle_grid.iter().enumerate() {
        let gt_dir = xy_rotation(gx, gy) * base_direction.into_inner();
        let gt = LaserConfig::new(*base_center, unit(gt_dir).expect("rotation keeps unit norm"));
        for (ii, &[ix, iy]) in plan.init_angle_grid.iter().enumerate() {
            let case_id = cases.len();
            let seed = derive_seed(plan.seed, case_id as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (dx, dy) = if bound > 0.0 {
                (rng.random_range(-bound..=bound), rng.random_range(-bound..=bound))
            } else {
                (0.0, 0.0)
            };
            let init_dir = xy_rotation(ix, iy) * gt_dir;
            let init = LaserConfig::new(
                gt.center + Vector3::new(dx, dy, 0.0),
                unit(init_dir).expect("rotation keeps unit norm"),
            );
            cases.push(ExperimentCase {
                case_id,
                gt_index: gi,
                init_index: ii,
                gt,
                init,
                seed,
            });
        }
    }
    cases
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Success,
    /// The solver converged, but not to the ground truth.
    Failed,
    NotConverged,
    /// The constraints exclude the ground truth or reject the start.
    Infeasible,
    Error,
}

impl CaseStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CaseStatus::Success => "success",
            CaseStatus::Failed => "failed",
            CaseStatus::NotConverged => "not_converged",
            CaseStatus::Infeasible => "infeasible",
            CaseStatus::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: usize,
    pub gt_index: usize,
    pub init_index: usize,
    pub gt: [f64; 6],
    pub init: [f64; 6],
    /// Final configuration; equals `init` when the solver did not run.
    #[serde(rename = "final")]
    pub final_config: [f64; 6],
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// ‖X_opt − X_gt‖₂.
    pub error: f64,
    pub status: CaseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl CaseRecord {
    pub fn success(&self) -> bool {
        self.status == CaseStatus::Success
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessReport {
    /// Percent of cases with status `success`.
    pub rate: f64,
    pub successes: usize,
    pub cases: usize,
    pub records: Vec<CaseRecord>,
}

impl SuccessReport {
    fn from_records(records: Vec<CaseRecord>) -> Self {
        let successes = records.iter().filter(|r| r.success()).count();
        let cases = records.len();
        let rate = if cases == 0 {
            0.0
        } else {
            successes as f64 * 100.0 / cases as f64
        };
        Self {
            rate,
            successes,
            cases,
            records,
        }
    }
}

fn run_case(
    case: &ExperimentCase,
    pre: &Surface,
    model: &SlpModel,
    constraints: &IkConstraints,
    plan: &ExperimentPlan,
) -> CaseRecord {
    let mut record = CaseRecord {
        case_id: case.case_id,
        gt_index: case.gt_index,
        init_index: case.init_index,
        gt: case.gt.to_array(),
        init: case.init.to_array(),
        final_config: case.init.to_array(),
        cost: f64::NAN,
        iterations: 0,
        converged: false,
        error: case.gt.distance(&case.init),
        status: CaseStatus::Error,
        message: None,
    };
    let target = fk_surface(&case.gt, model, pre, plan.standoff);
    let problem = match PlanProblem::new(pre.clone(), target, *model, *constraints, plan.standoff)
    {
        Ok(p) => p,
        Err(e) => {
            record.message = Some(e.to_string());
            return record;
        }
    };
    let opts = SolverOpts {
        seed: case.seed,
        standoff: plan.standoff,
        ..plan.solver
    };
    match plan_solve(&problem, &case.init, &opts) {
        Ok(sol) => {
            record.final_config = sol.config.to_array();
            record.cost = sol.total_cost;
            record.iterations = sol.iterations;
            record.converged = sol.converged;
            record.error = sol.config.distance(&case.gt);
            record.status = if !constraints.is_satisfied(&case.gt, 0.0) {
                CaseStatus::Infeasible
            } else if record.error <= SUCCESS_THRESHOLD {
                CaseStatus::Success
            } else if sol.converged {
                CaseStatus::Failed
            } else {
                CaseStatus::NotConverged
            };
        }
        Err(e) => {
            record.status = match e {
                Error::InfeasibleStart(_) => CaseStatus::Infeasible,
                _ => CaseStatus::Error,
            };
            record.message = Some(e.to_string());
        }
    }
    record
}

/// Plans every case against a target generated by `model` at the gt
/// configuration. `workers = 0` uses the global rayon pool.
pub fn run_planning_experiment(
    plan: &ExperimentPlan,
    model: &SlpModel,
    constraints: &IkConstraints,
    workers: usize,
) -> Result<SuccessReport> {
    let cases = experiment_cases(plan)?;
    let pre = plan.pre_surface()?;
    let run = || -> Vec<CaseRecord> {
        cases
            .par_iter()
            .map(|c| run_case(c, &pre, model, constraints, plan))
            .collect()
    };
    let mut records = if workers == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidInput(format!("cannot start {workers} workers: {e}")))?
            .install(run)
    };
    records.sort_by_key(|r| r.case_id);
    Ok(SuccessReport::from_records(records))
}

/// Training dataset sampled from `profile` at normal incidence. Cavity `i`
/// uses a fresh random disc patch, so the cavities share a profile but no
/// sample positions.
pub fn training_dataset(
    profile: &BeamProfile,
    training: &TrainingSpec,
    seed: u64,
) -> Result<RegressionDataset> {
    profile.validate()?;
    let cfg = LaserConfig::from_raw(Point3::zeros(), Vector3::new(0.0, 0.0, -1.0))?;
    let mut samples = Vec::new();
    for id in 1..=training.cavities {
        let s = derive_seed(seed, u64::from(id));
        let pre = random_disc_patch(training.patch_radius, training.samples_per_cavity, 0.0, s)?;
        let (_, mut tuples) = generate_cavity(
            profile,
            &cfg,
            &pre,
            training.noise_sigma,
            s ^ 0x5eed,
            crate::geometry::DEFAULT_STANDOFF,
            id,
        );
        samples.append(&mut tuples);
    }
    RegressionDataset::with_held_out_cavities(samples, &training.test_cavities, training.val_fraction, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub model: SlpModel,
    pub fit: FitReport,
    pub report: SuccessReport,
}

/// Fits a model on data generated from `profile` and runs the planning sweep
/// in that world.
pub fn simulate(plan: &ExperimentPlan, profile: &BeamProfile, workers: usize) -> Result<Simulation> {
    let data = training_dataset(profile, &plan.training, plan.seed)?;
    let fit_cfg = FitConfig {
        seed: plan.seed,
        ..plan.training.fit
    };
    let (model, fit) = fit_slp(&data, &fit_cfg)?;
    let report = run_planning_experiment(plan, &model, &plan.effective_constraints(), workers)?;
    Ok(Simulation { model, fit, report })
}
