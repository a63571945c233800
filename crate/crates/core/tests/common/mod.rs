//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use cavitykin::geometry::{distance_to_laser_center, LaserConfig, Point3};
use cavitykin::kinematics::{fk_point, fk_point_jacobian, ik_cost, ik_cost_gradient};
use cavitykin::slp::{CavitySample, SlpModel};
use nalgebra::Vector3;
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;

/// `‖a − f‖∞ / max(‖a‖∞, ‖f‖∞, 1e-12)`.
pub fn rel_err(a: &[f64], f: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(f)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a
        .iter()
        .chain(f)
        .map(|x| x.abs())
        .fold(1e-12, f64::max);
    diff / scale
}

pub fn random_slp(rng: &mut impl Rng) -> SlpModel {
    let params = [
        rng.random_range(0.5..3.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.5..-0.3),
        rng.random_range(-0.5..0.5),
    ];
    let s_max = rng.random_range(0.8..2.0);
    let d_max = rng.random_range(0.2..1.5);
    SlpModel::new(params, (0.0, s_max), (0.0, d_max)).unwrap()
}

/// Raw configuration vector: center and an unnormalized direction.
pub fn random_raw_config(rng: &mut impl Rng) -> [f64; 6] {
    let theta = rng.random_range(0.0..40f64.to_radians());
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let rho = rng.random_range(0.5..2.0);
    [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.5..0.5),
        rho * theta.sin() * phi.cos(),
        rho * theta.sin() * phi.sin(),
        -rho * theta.cos(),
    ]
}

pub fn config(raw: &[f64; 6]) -> LaserConfig {
    LaserConfig::from_array(*raw).unwrap()
}

pub struct GradientCase {
    pub model: SlpModel,
    pub raw: [f64; 6],
    pub p: Point3,
    pub target: Point3,
    pub standoff: f64,
}

/// Draws a case away from the kinks of the composite map: the beam axis,
/// the support boundary and the non-negative output clamp.
pub fn interior_case(rng: &mut impl Rng, model: &SlpModel) -> GradientCase {
    loop {
        let raw = random_raw_config(rng);
        let cfg = config(&raw);
        let standoff = rng.random_range(0.5..2.0);
        let r = rng.random_range(0.0..model.clamp_max_s() * 1.2);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let p = cfg.center
            + Vector3::new(r * a.cos(), r * a.sin(), rng.random_range(-0.3..0.3));
        let s = distance_to_laser_center(&p, &cfg.incident_plane(standoff));
        let kink = s < 1e-3 || (s - model.clamp_max_s()).abs() < 1e-3 || model.forward(s) < 1e-4;
        // a saturated unit leaves nothing to compare in the radial check
        let flat = model.input_derivative(s).abs() < 1e-6;
        if kink || flat {
            continue;
        }
        let q = fk_point(&cfg, model, &p, standoff);
        let target = q + Vector3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        );
        return GradientCase {
            model: *model,
            raw,
            p,
            target,
            standoff,
        };
    }
}

fn perturbed(raw: &[f64; 6], i: usize, h: f64) -> [f64; 6] {
    let mut x = *raw;
    x[i] += h;
    x
}

/// Analytic gradient with respect to the raw 6-vector: the direction part is
/// divided by the raw norm.
pub fn analytic_raw_gradient(c: &GradientCase) -> [f64; 6] {
    let cfg = config(&c.raw);
    let rho = Vector3::new(c.raw[3], c.raw[4], c.raw[5]).norm();
    let mut g = ik_cost_gradient(&cfg, &c.model, &c.p, &c.target, c.standoff).to_array();
    for gi in &mut g[3..] {
        *gi /= rho;
    }
    g
}

pub fn fd_raw_gradient(c: &GradientCase) -> [f64; 6] {
    std::array::from_fn(|i| {
        let up = ik_cost(&config(&perturbed(&c.raw, i, FD_STEP)), &c.model, &c.p, &c.target, c.standoff);
        let dn = ik_cost(&config(&perturbed(&c.raw, i, -FD_STEP)), &c.model, &c.p, &c.target, c.standoff);
        (up - dn) / (2.0 * FD_STEP)
    })
}

/// Relative error of the whole FK Jacobian against central differences of
/// step `h`, normalized by the largest entry.
pub fn jacobian_rel_err_with_step(c: &GradientCase, h: f64) -> f64 {
    let cfg = config(&c.raw);
    let rho = Vector3::new(c.raw[3], c.raw[4], c.raw[5]).norm();
    let j = fk_point_jacobian(&cfg, &c.model, &c.p, c.standoff).jacobian;
    let mut a = Vec::with_capacity(18);
    let mut f = Vec::with_capacity(18);
    for i in 0..6 {
        let scale = if i >= 3 { rho } else { 1.0 };
        a.extend(j.column(i).iter().map(|x| x / scale));
        let up = fk_point(&config(&perturbed(&c.raw, i, h)), &c.model, &c.p, c.standoff);
        let dn = fk_point(&config(&perturbed(&c.raw, i, -h)), &c.model, &c.p, c.standoff);
        f.extend(((up - dn) / (2.0 * h)).iter().copied());
    }
    rel_err(&a, &f)
}

pub fn jacobian_rel_err(c: &GradientCase) -> f64 {
    jacobian_rel_err_with_step(c, FD_STEP)
}

/// Worst relative error of the radial-distance sub-derivatives `ds/dp^c` and
/// `ds/dv`, recovered from the Jacobian's radial part.
pub fn radial_rel_err(c: &GradientCase) -> f64 {
    let cfg = config(&c.raw);
    let s_of = |raw: &[f64; 6]| distance_to_laser_center(&c.p, &config(raw).incident_plane(c.standoff));
    let rho = Vector3::new(c.raw[3], c.raw[4], c.raw[5]).norm();
    let pj = fk_point_jacobian(&cfg, &c.model, &c.p, c.standoff);
    let slope = c.model.input_derivative(pj.s);
    let v = cfg.direction.into_inner();
    // v^T J = f' ds/dx (the depth-times-projector block is orthogonal to v)
    let vj = v.transpose() * pj.jacobian;
    let a: Vec<f64> = (0..6)
        .map(|i| vj[i] / slope / if i >= 3 { rho } else { 1.0 })
        .collect();
    let f: Vec<f64> = (0..6)
        .map(|i| {
            (s_of(&perturbed(&c.raw, i, FD_STEP)) - s_of(&perturbed(&c.raw, i, -FD_STEP)))
                / (2.0 * FD_STEP)
        })
        .collect();
    rel_err(&a, &f)
}

pub fn slope_rel_err(model: &SlpModel, s: f64) -> f64 {
    let fd = (model.forward(s + FD_STEP) - model.forward(s - FD_STEP)) / (2.0 * FD_STEP);
    rel_err(&[model.input_derivative(s)], &[fd])
}

/// Least-squares fit of `A exp(−s²/2σ²)`: `A` is linear given `σ`, so `σ` is
/// located by a dense scan followed by golden-section refinement.
pub fn fit_gaussian_baseline(train: &[CavitySample]) -> (f64, f64) {
    let amp_for = |sigma: f64| {
        let (mut num, mut den) = (0.0, 0.0);
        for c in train {
            let g = (-c.s * c.s / (2.0 * sigma * sigma)).exp();
            num += g * c.d;
            den += g * g;
        }
        num / den
    };
    let sse = |sigma: f64| {
        let a = amp_for(sigma);
        train
            .iter()
            .map(|c| (a * (-c.s * c.s / (2.0 * sigma * sigma)).exp() - c.d).powi(2))
            .sum::<f64>()
    };
    let s_max = train.iter().map(|c| c.s).fold(0.0, f64::max);
    let n = 2000;
    let mut best = (f64::INFINITY, 0.0);
    for i in 1..=n {
        let sigma = s_max * i as f64 / n as f64;
        let e = sse(sigma);
        if e < best.0 {
            best = (e, sigma);
        }
    }
    let h = s_max / n as f64;
    let (mut lo, mut hi) = ((best.1 - h).max(1e-9), best.1 + h);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let m1 = hi - phi * (hi - lo);
        let m2 = lo + phi * (hi - lo);
        if sse(m1) < sse(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let sigma = 0.5 * (lo + hi);
    (amp_for(sigma), sigma)
}

pub fn rmse_of(samples: &[CavitySample], f: impl Fn(f64) -> f64) -> f64 {
    (samples.iter().map(|c| (f(c.s) - c.d).powi(2)).sum::<f64>() / samples.len() as f64).sqrt()
}
