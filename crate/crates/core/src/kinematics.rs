//! Forward and inverse laser-tissue kinematics.
//!
//! Forward kinematics moves each pre-ablation point along the beam by the
//! depth the model predicts for its distance-to-laser-center:
//! `q = p + f(s(p; p^c, v^c)) * v^c`.
//!
//! The optimization variable is the center plus a *raw* direction 3-vector;
//! the direction is normalized before every evaluation, so all derivatives
//! with respect to the direction are taken through that normalization.

use nalgebra::{Matrix3, Matrix3x6, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance_to_laser_center, project_to_incident_plane, LaserConfig};
use crate::slp::SlpModel;
use crate::solver::{self, Alignment};

pub use crate::geometry::{Point3, Surface};

/// Radial depth profile usable by the kinematics: depth and its slope in `s`.
pub trait DepthProfile {
    fn depth(&self, s: f64) -> f64;
    fn depth_slope(&self, s: f64) -> f64;
}

impl DepthProfile for SlpModel {
    fn depth(&self, s: f64) -> f64 {
        self.forward(s)
    }

    fn depth_slope(&self, s: f64) -> f64 {
        self.input_derivative(s)
    }
}

/// Below this radial distance the beam-axis gradient of `s` is undefined.
const AXIS_EPS: f64 = 1e-12;

pub fn fk_point<M: DepthProfile + ?Sized>(
    cfg: &LaserConfig,
    model: &M,
    p: &Point3,
    standoff: f64,
) -> Point3 {
    let plane = cfg.incident_plane(standoff);
    let d = model.depth(distance_to_laser_center(p, &plane));
    p + cfg.direction.into_inner() * d
}

pub fn fk_surface<M: DepthProfile + ?Sized>(
    cfg: &LaserConfig,
    model: &M,
    pre: &Surface,
    standoff: f64,
) -> Surface {
    let points = pre
        .points()
        .iter()
        .map(|p| fk_point(cfg, model, p, standoff))
        .collect();
    Surface::new(points).expect("same cardinality as a valid surface")
}

pub fn ik_cost<M: DepthProfile + ?Sized>(
    cfg: &LaserConfig,
    model: &M,
    p: &Point3,
    target: &Point3,
    standoff: f64,
) -> f64 {
    (fk_point(cfg, model, p, standoff) - target).norm_squared()
}

/// FK output of one point and its Jacobian with respect to `[p^c ; v^c]`.
#[derive(Debug, Clone, Copy)]
pub struct PointJacobian {
    pub q: Point3,
    pub depth: f64,
    pub s: f64,
    /// `dq / d[p^c, v^c]`, the direction columns taken through normalization.
    pub jacobian: Matrix3x6<f64>,
    /// The point sits on the beam axis, where `ds/dp_proj` is undefined; the
    /// depth-gradient part of the Jacobian is set to zero.
    pub singular: bool,
}

/// Analytic chain for one point.
///
/// With `u = p_proj - p^o` and `s = |u|`:
///
/// * `ds/dp^c = -u/s` (the shift of the origin cancels the projection term),
/// * `ds/dv = (L - v.(p - p^o)) u/s`, already tangent to the unit sphere,
/// * `dq/dx = v (f'(s) ds/dx) + d dv/dx`, with `dv/dv` the tangent projector
///   `I - v v^T` coming from the normalization.
pub fn fk_point_jacobian<M: DepthProfile + ?Sized>(
    cfg: &LaserConfig,
    model: &M,
    p: &Point3,
    standoff: f64,
) -> PointJacobian {
    let plane = cfg.incident_plane(standoff);
    let v = cfg.direction.into_inner();
    let proj = project_to_incident_plane(p, &plane);
    let u = proj - plane.origin;
    let s = u.norm();
    let depth = model.depth(s);
    let q = p + v * depth;

    let mut jacobian = Matrix3x6::zeros();
    let tangent = Matrix3::identity() - v * v.transpose();
    jacobian
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(tangent * depth));

    let singular = s <= AXIS_EPS;
    if !singular {
        let slope = model.depth_slope(s);
        if slope != 0.0 {
            let radial = u / s;
            let axial = standoff - v.dot(&(p - plane.origin));
            let ds_dc = -radial;
            let ds_dv = radial * axial;
            let jc = v * (ds_dc * slope).transpose();
            let jv = v * (ds_dv * slope).transpose();
            jacobian.fixed_view_mut::<3, 3>(0, 0).copy_from(&jc);
            let mut dir_block = jacobian.fixed_view_mut::<3, 3>(0, 3);
            dir_block += jv;
        }
    }
    PointJacobian {
        q,
        depth,
        s,
        jacobian,
        singular,
    }
}

/// Gradient of the single-point cost with respect to `[p^c ; v^c]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostGradient {
    pub center: Vector3<f64>,
    pub direction: Vector3<f64>,
    /// Evaluated on the beam axis; the radial sub-gradient was taken as zero.
    pub singular: bool,
}

impl CostGradient {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.center.x,
            self.center.y,
            self.center.z,
            self.direction.x,
            self.direction.y,
            self.direction.z,
        ]
    }
}

pub fn ik_cost_gradient<M: DepthProfile + ?Sized>(
    cfg: &LaserConfig,
    model: &M,
    p: &Point3,
    target: &Point3,
    standoff: f64,
) -> CostGradient {
    let pj = fk_point_jacobian(cfg, model, p, standoff);
    let g = pj.jacobian.transpose() * ((pj.q - target) * 2.0);
    CostGradient {
        center: Vector3::new(g[0], g[1], g[2]),
        direction: Vector3::new(g[3], g[4], g[5]),
        singular: pj.singular,
    }
}

/// Equality plane for the center plus box limits on center and raw direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkConstraints {
    /// Required z-coordinate of the ablation center.
    pub plane_z: f64,
    /// Per-axis `[lo, hi]` for the center, mm.
    pub center_box: [[f64; 2]; 3],
    /// Per-axis `[lo, hi]` for the raw direction components.
    pub direction_box: [[f64; 2]; 3],
}

impl Default for IkConstraints {
    fn default() -> Self {
        Self::centered(0.0, 5.0)
    }
}

impl IkConstraints {
    /// Center box `±half_width` around the origin in x and y and around
    /// `plane_z` in z; direction components in `[-1, 1]`.
    pub fn centered(plane_z: f64, half_width: f64) -> Self {
        Self {
            plane_z,
            center_box: [
                [-half_width, half_width],
                [-half_width, half_width],
                [plane_z - half_width, plane_z + half_width],
            ],
            direction_box: [[-1.0, 1.0]; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let boxes = self.center_box.iter().chain(self.direction_box.iter());
        for (axis, b) in boxes.enumerate() {
            if !(b[0].is_finite() && b[1].is_finite() && b[0] <= b[1]) {
                return Err(Error::InfeasibleStart(format!(
                    "box {axis} is empty or non-finite: [{}, {}]",
                    b[0], b[1]
                )));
            }
        }
        let [zlo, zhi] = self.center_box[2];
        if !(self.plane_z >= zlo && self.plane_z <= zhi) {
            return Err(Error::InfeasibleStart(format!(
                "center plane z = {} lies outside the center box [{zlo}, {zhi}]",
                self.plane_z
            )));
        }
        Ok(())
    }

    /// Whether a center and raw direction satisfy the equality plane and the
    /// boxes within `tol`.
    pub fn contains(&self, center: &Point3, raw_direction: &Vector3<f64>, tol: f64) -> bool {
        (center.z - self.plane_z).abs() <= tol
            && (0..3).all(|i| {
                center[i] >= self.center_box[i][0] - tol
                    && center[i] <= self.center_box[i][1] + tol
                    && raw_direction[i] >= self.direction_box[i][0] - tol
                    && raw_direction[i] <= self.direction_box[i][1] + tol
            })
    }

    /// [`IkConstraints::contains`] for a configuration's unit direction.
    pub fn is_satisfied(&self, cfg: &LaserConfig, tol: f64) -> bool {
        self.contains(&cfg.center, &cfg.direction, tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    /// Box-projected Levenberg-Marquardt on the stacked point residuals.
    #[default]
    LevenbergMarquardt,
    /// Projected gradient with Barzilai-Borwein steps and Armijo backtracking.
    ProjectedGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOpts {
    /// First-order KKT tolerance on the projected gradient (infinity norm).
    pub tol: f64,
    pub max_iterations: usize,
    /// Extra seeded random restarts around the initial guess.
    pub restarts: usize,
    pub seed: u64,
    pub standoff: f64,
    pub method: SolverMethod,
}

impl Default for SolverOpts {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iterations: 200,
            restarts: 0,
            seed: 0,
            standoff: crate::geometry::DEFAULT_STANDOFF,
            method: SolverMethod::LevenbergMarquardt,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub config: LaserConfig,
    /// Direction before normalization; the box constraints bound these components.
    pub raw_direction: Vector3<f64>,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

/// Single-point constrained IK.
pub fn ik_solve<M: DepthProfile + ?Sized>(
    model: &M,
    p: &Point3,
    target: &Point3,
    constraints: &IkConstraints,
    init: &LaserConfig,
    opts: &SolverOpts,
) -> Result<IkSolution> {
    let pre = [*p];
    let targets = [*target];
    let problem = Alignment {
        pre: &pre,
        targets: &targets,
        model,
        standoff: opts.standoff,
    };
    let out = solver::solve(&problem, constraints, init, opts)?;
    Ok(IkSolution {
        config: out.config,
        raw_direction: out.raw_direction,
        final_cost: out.cost,
        iterations: out.iterations,
        converged: out.converged,
        kkt_residual: out.kkt_residual,
    })
}
