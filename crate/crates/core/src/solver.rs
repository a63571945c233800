//! Box-constrained least-squares alignment of FK outputs to targets.
//!
//! Free variables are `[cx, cy, vx, vy, vz]`: the center z-coordinate is
//! eliminated by the equality plane and the direction is a raw 3-vector that
//! is normalized inside every evaluation. Box limits apply to the raw values.

use nalgebra::{SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{unit, LaserConfig, Point3};
use crate::kinematics::{fk_point_jacobian, DepthProfile, IkConstraints, SolverMethod, SolverOpts};

const N: usize = 5;
type Mat = SMatrix<f64, N, N>;
type Vec5 = SVector<f64, N>;

pub(crate) struct Alignment<'a, M: ?Sized> {
    pub pre: &'a [Point3],
    pub targets: &'a [Point3],
    pub model: &'a M,
    pub standoff: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub config: LaserConfig,
    pub raw_direction: Vector3<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

struct Eval {
    cost: f64,
    jtj: Mat,
    jtr: Vec5,
}

impl Eval {
    fn gradient(&self) -> Vec5 {
        self.jtr * 2.0
    }
}

struct Bounds {
    lo: Vec5,
    hi: Vec5,
}

impl Bounds {
    fn new(c: &IkConstraints) -> Self {
        let lo = Vec5::from([
            c.center_box[0][0],
            c.center_box[1][0],
            c.direction_box[0][0],
            c.direction_box[1][0],
            c.direction_box[2][0],
        ]);
        let hi = Vec5::from([
            c.center_box[0][1],
            c.center_box[1][1],
            c.direction_box[0][1],
            c.direction_box[1][1],
            c.direction_box[2][1],
        ]);
        Self { lo, hi }
    }

    fn project(&self, x: &Vec5) -> Vec5 {
        Vec5::from_fn(|i, _| x[i].clamp(self.lo[i], self.hi[i]))
    }

    /// Infinity norm of `x - P(x - g)`.
    fn kkt(&self, x: &Vec5, g: &Vec5) -> f64 {
        (x - self.project(&(x - g))).amax()
    }
}

fn to_config(x: &Vec5, plane_z: f64) -> Option<LaserConfig> {
    let dir = unit(Vector3::new(x[2], x[3], x[4])).ok()?;
    Some(LaserConfig::new(Point3::new(x[0], x[1], plane_z), dir))
}

fn evaluate<M: DepthProfile + ?Sized>(
    problem: &Alignment<'_, M>,
    x: &Vec5,
    plane_z: f64,
) -> Option<Eval> {
    let cfg = to_config(x, plane_z)?;
    let rho = Vector3::new(x[2], x[3], x[4]).norm();
    let mut jtj = Mat::zeros();
    let mut jtr = Vec5::zeros();
    let mut cost = 0.0;
    for (p, t) in problem.pre.iter().zip(problem.targets) {
        let pj = fk_point_jacobian(&cfg, problem.model, p, problem.standoff);
        let r = pj.q - t;
        let mut j = SMatrix::<f64, 3, N>::zeros();
        j.column_mut(0).copy_from(&pj.jacobian.column(0));
        j.column_mut(1).copy_from(&pj.jacobian.column(1));
        for k in 0..3 {
            j.column_mut(2 + k).copy_from(&(pj.jacobian.column(3 + k) / rho));
        }
        jtj += j.transpose() * j;
        jtr += j.transpose() * r;
        cost += r.norm_squared();
    }
    cost.is_finite().then_some(Eval { cost, jtj, jtr })
}

fn initial_point(init: &LaserConfig) -> Vec5 {
    let v = init.direction.into_inner();
    Vec5::from([init.center.x, init.center.y, v.x, v.y, v.z])
}

/// Runs the configured method from `init` and from `opts.restarts` seeded
/// perturbations of it, keeping the lowest-cost result.
pub(crate) fn solve<M: DepthProfile + ?Sized>(
    problem: &Alignment<'_, M>,
    constraints: &IkConstraints,
    init: &LaserConfig,
    opts: &SolverOpts,
) -> Result<Outcome> {
    if problem.pre.len() != problem.targets.len() {
        return Err(Error::CardinalityMismatch {
            pre: problem.pre.len(),
            target: problem.targets.len(),
        });
    }
    constraints.validate()?;
    let bounds = Bounds::new(constraints);

    let mut starts = vec![initial_point(init)];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        let tilt_x = rng.random_range(-15f64..=15.0).to_radians();
        let tilt_y = rng.random_range(-15f64..=15.0).to_radians();
        let rot = nalgebra::Rotation3::from_euler_angles(tilt_x, tilt_y, 0.0);
        let v = rot * init.direction.into_inner();
        starts.push(Vec5::from([
            init.center.x + rng.random_range(-0.5..=0.5),
            init.center.y + rng.random_range(-0.5..=0.5),
            v.x,
            v.y,
            v.z,
        ]));
    }

    let mut best: Option<Outcome> = None;
    for (i, x0) in starts.iter().enumerate() {
        let x0 = bounds.project(x0);
        let Some(first) = evaluate(problem, &x0, constraints.plane_z) else {
            if i == 0 {
                return Err(Error::InfeasibleStart(
                    "initial direction projects to the zero vector".into(),
                ));
            }
            continue;
        };
        let out = match opts.method {
            SolverMethod::LevenbergMarquardt => {
                levenberg_marquardt(problem, &bounds, constraints.plane_z, x0, first, opts)
            }
            SolverMethod::ProjectedGradient => {
                projected_gradient(problem, &bounds, constraints.plane_z, x0, first, opts)
            }
        };
        log::trace!(
            "start {i}: cost {:.3e} after {} iterations (converged {})",
            out.cost,
            out.iterations,
            out.converged
        );
        if best.as_ref().is_none_or(|b| out.cost < b.cost) {
            best = Some(out);
        }
    }
    Ok(best.expect("the first start is always evaluated"))
}

fn outcome(x: &Vec5, plane_z: f64, ev: &Eval, iterations: usize, converged: bool, kkt: f64) -> Outcome {
    Outcome {
        config: to_config(x, plane_z).expect("accepted iterates have a non-zero direction"),
        raw_direction: Vector3::new(x[2], x[3], x[4]),
        cost: ev.cost,
        iterations,
        converged,
        kkt_residual: kkt,
    }
}

fn levenberg_marquardt<M: DepthProfile + ?Sized>(
    problem: &Alignment<'_, M>,
    bounds: &Bounds,
    plane_z: f64,
    mut x: Vec5,
    mut ev: Eval,
    opts: &SolverOpts,
) -> Outcome {
    let scale = ev.jtj.diagonal().amax().max(1e-12);
    let mut lambda = 1e-3 * scale;

    for it in 0..opts.max_iterations {
        let g = ev.gradient();
        let kkt = bounds.kkt(&x, &g);
        if kkt <= opts.tol {
            return outcome(&x, plane_z, &ev, it, true, kkt);
        }
        // variables pinned at a bound with the gradient pushing outward stay fixed
        let free: [bool; N] = std::array::from_fn(|i| {
            !((x[i] <= bounds.lo[i] && g[i] > 0.0) || (x[i] >= bounds.hi[i] && g[i] < 0.0))
        });

        let mut accepted = false;
        while lambda <= 1e30 * scale {
            let mut a = ev.jtj;
            let mut b = -ev.jtr;
            for i in 0..N {
                if free[i] {
                    a[(i, i)] += lambda;
                } else {
                    a.row_mut(i).fill(0.0);
                    a.column_mut(i).fill(0.0);
                    a[(i, i)] = 1.0;
                    b[i] = 0.0;
                }
            }
            if let Some(chol) = a.cholesky() {
                let step = chol.solve(&b);
                let trial = bounds.project(&(x + step));
                if let Some(tev) = evaluate(problem, &trial, plane_z) {
                    // near the rounding floor of the cost, progress is judged
                    // by the stationarity measure instead
                    let polish = tev.cost <= ev.cost * (1.0 + 1e-13)
                        && bounds.kkt(&trial, &tev.gradient()) < 0.5 * kkt;
                    if tev.cost < ev.cost || polish {
                        x = trial;
                        ev = tev;
                        lambda = (lambda * 0.1).max(1e-15 * scale);
                        accepted = true;
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no representable decrease at any damping
            let kkt = bounds.kkt(&x, &ev.gradient());
            return outcome(&x, plane_z, &ev, it, kkt <= opts.tol, kkt);
        }
    }
    let kkt = bounds.kkt(&x, &ev.gradient());
    outcome(&x, plane_z, &ev, opts.max_iterations, kkt <= opts.tol, kkt)
}

fn projected_gradient<M: DepthProfile + ?Sized>(
    problem: &Alignment<'_, M>,
    bounds: &Bounds,
    plane_z: f64,
    mut x: Vec5,
    mut ev: Eval,
    opts: &SolverOpts,
) -> Outcome {
    let mut step = 1.0 / (2.0 * ev.jtj.diagonal().amax()).max(1e-12);
    let mut prev: Option<(Vec5, Vec5)> = None;

    for it in 0..opts.max_iterations {
        let g = ev.gradient();
        let kkt = bounds.kkt(&x, &g);
        if kkt <= opts.tol {
            return outcome(&x, plane_z, &ev, it, true, kkt);
        }
        if let Some((px, pg)) = prev {
            let s = x - px;
            let y = g - pg;
            let sy = s.dot(&y);
            if sy > 0.0 {
                step = s.norm_squared() / sy;
            }
        }
        let mut t = step;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = bounds.project(&(x - g * t));
            if let Some(tev) = evaluate(problem, &trial, plane_z) {
                if tev.cost <= ev.cost + 1e-4 * g.dot(&(trial - x)) && tev.cost < ev.cost {
                    accepted = Some((trial, tev));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((trial, tev)) = accepted else {
            return outcome(&x, plane_z, &ev, it, false, kkt);
        };
        prev = Some((x, g));
        x = trial;
        ev = tev;
    }
    let kkt = bounds.kkt(&x, &ev.gradient());
    outcome(&x, plane_z, &ev, opts.max_iterations, kkt <= opts.tol, kkt)
}
