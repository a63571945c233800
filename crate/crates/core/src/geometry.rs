//! Laser incident plane geometry.
//!
//! A laser shot is described by its ablation center `p^c` and unit incident
//! direction `v^c`. The laser origin sits a fixed standoff behind the center,
//! `p^o = p^c - L * v^c`, and the incident plane passes through `p^o` with
//! normal `v^c`. Surface points are projected onto that plane along the beam
//! to obtain their radial distance-to-laser-center `s`.

use nalgebra::{Unit, Vector3};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;
pub type UnitVec3 = Unit<Vector3<f64>>;

/// Default laser standoff `L_ref` in mm.
pub const DEFAULT_STANDOFF: f64 = 1.0;

pub(crate) fn default_standoff() -> f64 {
    DEFAULT_STANDOFF
}

/// Minimum `|v^N . v^c|` for a measurable depth-of-cut.
pub const DEGENERATE_INCIDENCE: f64 = 1e-6;

/// Normalizes a raw direction, rejecting zero and non-finite input.
pub fn unit(raw: Vector3<f64>) -> Result<UnitVec3> {
    let norm = raw.norm();
    if !norm.is_finite() || norm < 1e-300 {
        return Err(Error::InvalidInput(format!(
            "direction ({}, {}, {}) cannot be normalized",
            raw.x, raw.y, raw.z
        )));
    }
    Ok(Unit::new_unchecked(raw / norm))
}

/// 6-dof laser incident configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaserConfig {
    pub center: Point3,
    pub direction: UnitVec3,
}

impl LaserConfig {
    pub fn new(center: Point3, direction: UnitVec3) -> Self {
        Self { center, direction }
    }

    /// Builds a configuration from a raw (possibly non-unit) direction.
    pub fn from_raw(center: Point3, raw_direction: Vector3<f64>) -> Result<Self> {
        if !(center.x.is_finite() && center.y.is_finite() && center.z.is_finite()) {
            return Err(Error::InvalidInput("center must be finite".into()));
        }
        Ok(Self {
            center,
            direction: unit(raw_direction)?,
        })
    }

    /// `[cx, cy, cz, vx, vy, vz]`.
    pub fn to_array(&self) -> [f64; 6] {
        let c = self.center;
        let v = self.direction.into_inner();
        [c.x, c.y, c.z, v.x, v.y, v.z]
    }

    pub fn from_array(x: [f64; 6]) -> Result<Self> {
        Self::from_raw(
            Vector3::new(x[0], x[1], x[2]),
            Vector3::new(x[3], x[4], x[5]),
        )
    }

    /// Euclidean distance between two configurations in the 6-dof space.
    pub fn distance(&self, other: &LaserConfig) -> f64 {
        let a = self.to_array();
        let b = other.to_array();
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn incident_plane(&self, standoff: f64) -> IncidentPlane {
        IncidentPlane {
            origin: laser_origin(self, standoff),
            normal: self.direction,
            standoff,
        }
    }
}

/// Plane through the laser origin perpendicular to the beam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncidentPlane {
    pub origin: Point3,
    pub normal: UnitVec3,
    pub standoff: f64,
}

impl IncidentPlane {
    /// An orthonormal in-plane basis `(e1, e2)` with `e1 x e2 = normal`.
    pub fn basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        let n = self.normal.into_inner();
        let helper = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
            Vector3::x()
        } else if n.y.abs() <= n.z.abs() {
            Vector3::y()
        } else {
            Vector3::z()
        };
        let e1 = (helper - n * n.dot(&helper)).normalize();
        let e2 = n.cross(&e1);
        (e1, e2)
    }

    /// In-plane coordinates of a point already lying on the plane.
    pub fn local_coords(&self, p: &Point3) -> [f64; 2] {
        let (e1, e2) = self.basis();
        let d = p - self.origin;
        [d.dot(&e1), d.dot(&e2)]
    }

    /// Signed offset of `p` from the plane along its normal.
    pub fn offset(&self, p: &Point3) -> f64 {
        self.normal.dot(&(p - self.origin))
    }
}

/// Local reference plane of the un-ablated tissue surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSurfaceFrame {
    pub center: Point3,
    pub normal: UnitVec3,
}

/// Ordered point set; the position in `points` is the correspondence index.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    points: Vec<Point3>,
}

impl Surface {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("surface needs at least one point".into()));
        }
        if let Some(k) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(Error::InvalidInput(format!("point {k} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }
}

pub fn laser_origin(cfg: &LaserConfig, standoff: f64) -> Point3 {
    cfg.center - cfg.direction.into_inner() * standoff
}

/// Projects `p` onto the incident plane along the beam direction.
pub fn project_to_incident_plane(p: &Point3, plane: &IncidentPlane) -> Point3 {
    let v = plane.normal.into_inner();
    let ratio = v.dot(&(p - plane.origin)) / v.dot(&(-v));
    p - (-v) * ratio
}

/// Radial distance `s` from the projection of `p` to the laser origin.
pub fn distance_to_laser_center(p: &Point3, plane: &IncidentPlane) -> f64 {
    (project_to_incident_plane(p, plane) - plane.origin).norm()
}

/// Depth-of-cut of a measured point: the beam-aligned length from `p` to the
/// local surface reference plane.
pub fn depth_of_cut_measured(
    p: &Point3,
    frame: &LocalSurfaceFrame,
    direction: &UnitVec3,
) -> Result<f64> {
    let vn = frame.normal.into_inner();
    let vc = direction.into_inner();
    let cos = vn.dot(&vc);
    if cos.abs() <= DEGENERATE_INCIDENCE {
        return Err(Error::DegenerateProjection(cos.abs()));
    }
    let t = (-vn).dot(&(p - frame.center)) / (-vn).dot(&(-vc));
    Ok(((-vc) * t).norm())
}

/// Mean projected coordinate of the deepest `top_fraction` of cavity points.
///
/// Selection is nearest-rank: the threshold is the depth at rank
/// `ceil(top_fraction * n)` in descending order and every point at or above
/// it is kept, so ties can push the selection past the nominal fraction.
pub fn estimate_incident_center(
    cavity: &Surface,
    plane: &IncidentPlane,
    depths: &[f64],
    top_fraction: f64,
) -> Result<Point3> {
    if cavity.is_empty() {
        return Err(Error::EmptySelection);
    }
    if depths.len() != cavity.len() {
        return Err(Error::InvalidInput(format!(
            "{} depths for {} cavity points",
            depths.len(),
            cavity.len()
        )));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "top fraction {top_fraction} outside (0, 1]"
        )));
    }
    let mut sorted = depths.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let rank = ((top_fraction * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let threshold = sorted[rank - 1];

    let mut sum = Vector3::zeros();
    let mut count = 0usize;
    for (p, &d) in cavity.points().iter().zip(depths) {
        if d >= threshold {
            sum += project_to_incident_plane(p, plane);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}
