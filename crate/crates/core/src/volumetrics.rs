//! Volumetric comparison of predicted and ground-truth cavities.
//!
//! Both cavities are sampled as depth fields over a disc-shaped region of
//! interest on the laser incident plane. Volumes are midpoint-rule integrals
//! over square cells clipped to the disc.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    depth_of_cut_measured, project_to_incident_plane, IncidentPlane, LocalSurfaceFrame, Point3,
    Surface,
};
use crate::kinematics::DepthProfile;

pub const DEFAULT_ROI_RADIUS: f64 = 1.0;
pub const DEFAULT_RESOLUTION: f64 = 64.0;

/// Sub-samples per axis used to clip boundary cells.
const CLIP_SUBSAMPLES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSample {
    pub point: Point3,
    /// In-plane coordinates relative to the plane origin.
    pub local: [f64; 2],
    pub cell_area: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiGrid {
    pub plane: IncidentPlane,
    pub radius: f64,
    pub resolution: f64,
    pub samples: Vec<RoiSample>,
}

impl RoiGrid {
    pub fn total_area(&self) -> f64 {
        self.samples.iter().map(|s| s.cell_area).sum()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Uniform grid of `1/resolution` mm cells on the ROI disc.
pub fn sample_roi(plane: &IncidentPlane, radius: f64, resolution: f64) -> Result<RoiGrid> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidInput(format!("ROI radius {radius} must be positive")));
    }
    if !(resolution >= 8.0 && resolution.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "ROI resolution {resolution} cells/mm must be at least 8"
        )));
    }
    let h = 1.0 / resolution;
    let n = (radius / h).ceil() as i64;
    let (e1, e2) = plane.basis();
    let r2 = radius * radius;
    let mut samples = Vec::new();

    for i in -n..n {
        for j in -n..n {
            let (x0, y0) = (i as f64 * h, j as f64 * h);
            let (x1, y1) = (x0 + h, y0 + h);
            let far_x = x0.abs().max(x1.abs());
            let far_y = y0.abs().max(y1.abs());
            let near_x = if x0 <= 0.0 && x1 >= 0.0 { 0.0 } else { x0.abs().min(x1.abs()) };
            let near_y = if y0 <= 0.0 && y1 >= 0.0 { 0.0 } else { y0.abs().min(y1.abs()) };
            if near_x * near_x + near_y * near_y >= r2 {
                continue;
            }
            let (local, area) = if far_x * far_x + far_y * far_y <= r2 {
                ([x0 + 0.5 * h, y0 + 0.5 * h], h * h)
            } else {
                let sub = h / CLIP_SUBSAMPLES as f64;
                let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
                for a in 0..CLIP_SUBSAMPLES {
                    for b in 0..CLIP_SUBSAMPLES {
                        let px = x0 + (a as f64 + 0.5) * sub;
                        let py = y0 + (b as f64 + 0.5) * sub;
                        if px * px + py * py <= r2 {
                            sx += px;
                            sy += py;
                            count += 1;
                        }
                    }
                }
                if count == 0 {
                    continue;
                }
                let frac = count as f64 / (CLIP_SUBSAMPLES * CLIP_SUBSAMPLES) as f64;
                ([sx / count as f64, sy / count as f64], frac * h * h)
            };
            samples.push(RoiSample {
                point: plane.origin + e1 * local[0] + e2 * local[1],
                local,
                cell_area: area,
            });
        }
    }
    Ok(RoiGrid {
        plane: *plane,
        radius,
        resolution,
        samples,
    })
}

/// Depth-of-cut per ROI sample, aligned with `RoiGrid::samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthField {
    pub values: Vec<f64>,
}

/// Depths predicted by a model at each sample's radial distance.
pub fn depth_field_predicted<M: DepthProfile + ?Sized>(model: &M, grid: &RoiGrid) -> DepthField {
    DepthField {
        values: grid
            .samples
            .iter()
            .map(|s| model.depth((s.local[0] * s.local[0] + s.local[1] * s.local[1]).sqrt()))
            .collect(),
    }
}

/// Measured depths of a cavity surface resampled onto the grid.
///
/// Each cavity point gets its beam-aligned depth below `frame`; the point is
/// placed on the incident plane by projecting along the beam and every ROI
/// sample takes the depth of its nearest projected point. Samples farther
/// than twice the median point spacing from any point count as uncovered.
pub fn depth_field_measured(
    cavity: &Surface,
    frame: &LocalSurfaceFrame,
    grid: &RoiGrid,
) -> Result<DepthField> {
    let plane = &grid.plane;
    let mut depths = Vec::with_capacity(cavity.len());
    let mut coords = Vec::with_capacity(cavity.len());
    for p in cavity.points() {
        depths.push(depth_of_cut_measured(p, frame, &plane.normal)?);
        coords.push(plane.local_coords(&project_to_incident_plane(p, plane)));
    }
    let index = PlanarIndex::new(coords);
    let spacing = index.median_spacing();
    let reach = 2.0 * spacing;

    let mut uncovered = 0usize;
    let values = grid
        .samples
        .iter()
        .map(|s| {
            let (k, dist) = index.nearest(s.local, None).expect("cavity is non-empty");
            if dist > reach {
                uncovered += 1;
            }
            depths[k]
        })
        .collect();
    let frac = uncovered as f64 / grid.len().max(1) as f64;
    if frac > 0.05 {
        return Err(Error::SparseCoverage {
            uncovered: 100.0 * frac,
        });
    }
    Ok(DepthField { values })
}

fn check_aligned(field: &DepthField, grid: &RoiGrid) -> Result<()> {
    if field.values.len() != grid.len() {
        return Err(Error::InvalidInput(format!(
            "depth field has {} values for {} ROI samples",
            field.values.len(),
            grid.len()
        )));
    }
    Ok(())
}

pub fn cavity_volume(field: &DepthField, grid: &RoiGrid) -> Result<f64> {
    check_aligned(field, grid)?;
    Ok(field
        .values
        .iter()
        .zip(&grid.samples)
        .map(|(d, s)| d * s.cell_area)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub radius: f64,
    pub resolution: f64,
    pub cells: usize,
    pub area: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumetricReport {
    pub v_predict: f64,
    pub v_gt: f64,
    pub v_overlap: f64,
    /// Percent of the ground-truth volume.
    pub over_cut_ratio: f64,
    /// Percent of the ground-truth volume.
    pub under_cut_ratio: f64,
    /// `2 V_overlap / (V_gt + V_predict)`, percent.
    pub iou: f64,
    pub grid: GridMeta,
}

/// Over-cut, under-cut and 3D-cavity-IoU of a prediction against ground truth.
/// The overlap depth at each sample is the pointwise minimum of the two.
pub fn compare_cavities(
    predicted: &DepthField,
    gt: &DepthField,
    grid: &RoiGrid,
) -> Result<VolumetricReport> {
    check_aligned(predicted, grid)?;
    check_aligned(gt, grid)?;
    let (mut vp, mut vg, mut vo, mut over, mut under) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((&dp, &dg), s) in predicted.values.iter().zip(&gt.values).zip(&grid.samples) {
        let a = s.cell_area;
        vp += dp * a;
        vg += dg * a;
        vo += dp.min(dg) * a;
        over += (dp - dg).max(0.0) * a;
        under += (dg - dp).max(0.0) * a;
    }
    if vg <= 0.0 {
        return Err(Error::ZeroGroundTruth);
    }
    Ok(VolumetricReport {
        v_predict: vp,
        v_gt: vg,
        v_overlap: vo,
        over_cut_ratio: 100.0 * over / vg,
        under_cut_ratio: 100.0 * under / vg,
        iou: 100.0 * 2.0 * vo / (vg + vp),
        grid: GridMeta {
            radius: grid.radius,
            resolution: grid.resolution,
            cells: grid.len(),
            area: grid.total_area(),
        },
    })
}

/// Uniform bucket grid over 2-D points for nearest-neighbour queries.
struct PlanarIndex {
    pts: Vec<[f64; 2]>,
    min: [f64; 2],
    cell: f64,
    dims: [usize; 2],
    buckets: Vec<Vec<u32>>,
}

impl PlanarIndex {
    fn new(pts: Vec<[f64; 2]>) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in &pts {
            for a in 0..2 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let extent = [(max[0] - min[0]).max(1e-9), (max[1] - min[1]).max(1e-9)];
        let cell = (extent[0] * extent[1] / pts.len().max(1) as f64).sqrt().max(1e-9) * 1.5;
        let dims = [
            ((extent[0] / cell).ceil() as usize).clamp(1, 4096),
            ((extent[1] / cell).ceil() as usize).clamp(1, 4096),
        ];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1]];
        let mut index = Self {
            pts,
            min,
            cell,
            dims,
            buckets: Vec::new(),
        };
        for (i, p) in index.pts.iter().enumerate() {
            let (bx, by) = index.bucket_of(*p);
            buckets[by * dims[0] + bx].push(i as u32);
        }
        index.buckets = buckets;
        index
    }

    fn bucket_of(&self, p: [f64; 2]) -> (usize, usize) {
        let f = |a: usize| {
            (((p[a] - self.min[a]) / self.cell).floor().max(0.0) as usize).min(self.dims[a] - 1)
        };
        (f(0), f(1))
    }

    fn nearest(&self, q: [f64; 2], skip: Option<usize>) -> Option<(usize, f64)> {
        let (cx, cy) = self.bucket_of(q);
        let mut best: Option<(usize, f64)> = None;
        let max_ring = self.dims[0].max(self.dims[1]);
        for ring in 0..=max_ring {
            let r = ring as i64;
            for by in (cy as i64 - r)..=(cy as i64 + r) {
                for bx in (cx as i64 - r)..=(cx as i64 + r) {
                    let on_ring = (by - cy as i64).abs() == r || (bx - cx as i64).abs() == r;
                    if !on_ring
                        || bx < 0
                        || by < 0
                        || bx >= self.dims[0] as i64
                        || by >= self.dims[1] as i64
                    {
                        continue;
                    }
                    for &i in &self.buckets[by as usize * self.dims[0] + bx as usize] {
                        let i = i as usize;
                        if Some(i) == skip {
                            continue;
                        }
                        let p = self.pts[i];
                        let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                        if best.is_none_or(|(_, bd)| d < bd) {
                            best = Some((i, d));
                        }
                    }
                }
            }
            if let Some((_, bd)) = best {
                if bd <= ring as f64 * self.cell {
                    break;
                }
            }
        }
        best
    }

    fn median_spacing(&self) -> f64 {
        if self.pts.len() < 2 {
            return 0.0;
        }
        let mut d: Vec<f64> = (0..self.pts.len())
            .map(|i| self.nearest(self.pts[i], Some(i)).map_or(0.0, |(_, d)| d))
            .collect();
        d.sort_by(f64::total_cmp);
        d[d.len() / 2]
    }
}
