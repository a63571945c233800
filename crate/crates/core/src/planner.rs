//! Surface-alignment laser planning.
//!
//! Finds the single laser configuration whose predicted cavity best matches a
//! target surface, as the sum of per-point IK costs. Correspondence between
//! pre-ablation and target points is by shared index.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{LaserConfig, Surface};
use crate::kinematics::{ik_cost, ik_cost_gradient, IkConstraints, SolverOpts};
use crate::slp::SlpModel;
use crate::solver::{self, Alignment};

#[derive(Debug, Clone)]
pub struct PlanProblem {
    pre_surface: Surface,
    target_surface: Surface,
    pub model: SlpModel,
    pub constraints: IkConstraints,
    pub standoff: f64,
}

impl PlanProblem {
    pub fn new(
        pre_surface: Surface,
        target_surface: Surface,
        model: SlpModel,
        constraints: IkConstraints,
        standoff: f64,
    ) -> Result<Self> {
        if pre_surface.len() != target_surface.len() {
            return Err(Error::CardinalityMismatch {
                pre: pre_surface.len(),
                target: target_surface.len(),
            });
        }
        if !(standoff > 0.0 && standoff.is_finite()) {
            return Err(Error::InvalidInput(format!("standoff {standoff} must be positive")));
        }
        Ok(Self {
            pre_surface,
            target_surface,
            model,
            constraints,
            standoff,
        })
    }

    pub fn pre_surface(&self) -> &Surface {
        &self.pre_surface
    }

    pub fn target_surface(&self) -> &Surface {
        &self.target_surface
    }

    pub fn len(&self) -> usize {
        self.pre_surface.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pre_surface.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanSolution {
    pub config: LaserConfig,
    /// Direction before normalization; the box constraints bound these components.
    pub raw_direction: Vector3<f64>,
    pub total_cost: f64,
    pub per_point_costs: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Total cost and the per-point costs in index order.
pub fn plan_cost(problem: &PlanProblem, cfg: &LaserConfig) -> (f64, Vec<f64>) {
    let per_point: Vec<f64> = problem
        .pre_surface
        .points()
        .iter()
        .zip(problem.target_surface.points())
        .map(|(p, t)| ik_cost(cfg, &problem.model, p, t, problem.standoff))
        .collect();
    (per_point.iter().sum(), per_point)
}

/// Sum of per-point cost gradients with respect to `[p^c ; v^c]`, accumulated
/// in index order.
pub fn plan_gradient(problem: &PlanProblem, cfg: &LaserConfig) -> [f64; 6] {
    let mut total = [0.0; 6];
    for (p, t) in problem
        .pre_surface
        .points()
        .iter()
        .zip(problem.target_surface.points())
    {
        let g = ik_cost_gradient(cfg, &problem.model, p, t, problem.standoff).to_array();
        for (acc, gi) in total.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    total
}

pub fn plan_solve(
    problem: &PlanProblem,
    init: &LaserConfig,
    opts: &SolverOpts,
) -> Result<PlanSolution> {
    let alignment = Alignment {
        pre: problem.pre_surface.points(),
        targets: problem.target_surface.points(),
        model: &problem.model,
        standoff: problem.standoff,
    };
    let out = solver::solve(&alignment, &problem.constraints, init, opts)?;
    let (total_cost, per_point_costs) = plan_cost(problem, &out.config);
    Ok(PlanSolution {
        config: out.config,
        raw_direction: out.raw_direction,
        total_cost,
        per_point_costs,
        converged: out.converged,
        iterations: out.iterations,
        kkt_residual: out.kkt_residual,
    })
}
