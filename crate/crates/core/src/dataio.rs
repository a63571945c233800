//! File formats: surfaces, regression datasets, models and reports.
//!
//! Surfaces are CSV (`x,y,z` header, one point per row) or JSON. **Row order
//! is the correspondence index**: the planner pairs point `k` of the
//! pre-ablation file with point `k` of the target file.
//!
//! Floats are written in shortest round-trip form, so saving is
//! byte-deterministic and loading restores every value exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    depth_of_cut_measured, distance_to_laser_center, unit, LaserConfig, LocalSurfaceFrame, Point3,
    Surface,
};
use crate::slp::{CavitySample, FitReport, RegressionDataset, SlpModel, Split};
use crate::synth::CaseRecord;
use crate::volumetrics::{DepthField, RoiGrid};

pub const SCHEMA_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn read_to_string(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    if text.trim().is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok(text)
}

fn is_json(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    }
}

/// Pretty JSON with a trailing newline.
pub fn save_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| json_error(path, e))
}

/// A machine-readable output tagged with the schema version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Versioned<T> {
    pub fn new(body: T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            body,
        }
    }
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unsupported schema_version {version}, expected {SCHEMA_VERSION}"),
        });
    }
    Ok(())
}

pub fn save_report<T: Serialize>(report: &T, path: &Path) -> Result<()> {
    save_json(
        &Versioned {
            schema_version: SCHEMA_VERSION,
            body: report,
        },
        path,
    )
}

pub fn load_report<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let v: Versioned<T> = load_json(path)?;
    check_version(path, v.schema_version)?;
    Ok(v.body)
}

#[derive(Debug, Serialize, Deserialize)]
struct SurfaceJson {
    schema_version: u32,
    points: Vec<[f64; 3]>,
    #[serde(default)]
    metadata: serde_json::Map<String, serde_json::Value>,
}

/// Loads a surface; `.json` files use the JSON layout, anything else is CSV.
pub fn load_surface(path: &Path) -> Result<Surface> {
    if is_json(path) {
        let s: SurfaceJson = load_json(path)?;
        check_version(path, s.schema_version)?;
        if s.points.is_empty() {
            return Err(Error::EmptyFile(path.to_path_buf()));
        }
        return Surface::new(s.points.into_iter().map(Point3::from).collect());
    }
    load_surface_csv(path)
}

fn load_surface_csv(path: &Path) -> Result<Surface> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    if headers.iter().collect::<Vec<_>>() != ["x", "y", "z"] {
        return Err(parse_err(1, format!("expected header x,y,z, found {:?}", headers)));
    }
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, found {}", record.len())));
        }
        let mut xyz = [0.0; 3];
        for (i, (field, name)) in record.iter().zip(["x", "y", "z"]).enumerate() {
            xyz[i] = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("field {name}: '{field}' is not a finite number")))?;
        }
        points.push(Point3::from(xyz));
    }
    if points.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Surface::new(points)
}

/// Saves a surface as CSV, or as JSON when the path ends in `.json`.
pub fn save_surface(surface: &Surface, path: &Path) -> Result<()> {
    if is_json(path) {
        let s = SurfaceJson {
            schema_version: SCHEMA_VERSION,
            points: surface.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
            metadata: serde_json::Map::new(),
        };
        return save_json(&s, path);
    }
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["x", "y", "z"])?;
    for p in surface.points() {
        w.write_record([p.x.to_string(), p.y.to_string(), p.z.to_string()])?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub schema_version: u32,
    pub samples: Vec<CavitySample>,
    pub splits: SplitLists,
    #[serde(default)]
    pub provenance: serde_json::Map<String, serde_json::Value>,
}

impl DatasetFile {
    pub fn from_dataset(
        data: &RegressionDataset,
        provenance: serde_json::Map<String, serde_json::Value>,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            samples: data.samples().to_vec(),
            splits: SplitLists {
                train: data.split_indices(Split::Train),
                val: data.split_indices(Split::Val),
                test: data.split_indices(Split::Test),
            },
            provenance,
        }
    }

    /// Checks that the split lists partition the sample indices.
    pub fn into_dataset(self) -> Result<RegressionDataset> {
        let n = self.samples.len();
        let mut labels: Vec<Option<Split>> = vec![None; n];
        for (split, list) in [
            (Split::Train, &self.splits.train),
            (Split::Val, &self.splits.val),
            (Split::Test, &self.splits.test),
        ] {
            for &i in list {
                match labels.get_mut(i) {
                    None => {
                        return Err(Error::InvalidInput(format!(
                            "split index {i} out of range for {n} samples"
                        )))
                    }
                    Some(Some(_)) => {
                        return Err(Error::InvalidInput(format!(
                            "sample {i} appears in more than one split"
                        )))
                    }
                    Some(slot) => *slot = Some(split),
                }
            }
        }
        let splits = labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::InvalidInput(format!("sample {i} has no split"))))
            .collect::<Result<Vec<_>>>()?;
        RegressionDataset::new(self.samples, splits)
    }
}

pub fn save_dataset(file: &DatasetFile, path: &Path) -> Result<()> {
    save_json(file, path)
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    let file: DatasetFile = load_json(path)?;
    check_version(path, file.schema_version)?;
    Ok(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputRange {
    pub in_min: f64,
    pub in_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputRange {
    pub out_min: f64,
    pub out_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: Option<u64>,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
}

impl ModelMeta {
    pub fn from_report(report: &FitReport) -> Self {
        Self {
            seed: Some(report.seed),
            rmse: Some(report.rmse),
            mae: Some(report.mae),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub w1: f64,
    pub b1: f64,
    pub w2: f64,
    pub b2: f64,
    pub tx: InputRange,
    pub ty: OutputRange,
    pub clamp_max_s: f64,
    #[serde(default)]
    pub meta: ModelMeta,
}

impl ModelFile {
    pub fn from_model(model: &SlpModel, meta: ModelMeta) -> Self {
        let tx = model.input_transform();
        let ty = model.output_transform();
        Self {
            schema_version: SCHEMA_VERSION,
            w1: model.w1,
            b1: model.b1,
            w2: model.w2,
            b2: model.b2,
            tx: InputRange {
                in_min: tx.in_min,
                in_max: tx.in_max,
            },
            ty: OutputRange {
                out_min: ty.out_min,
                out_max: ty.out_max,
            },
            clamp_max_s: model.clamp_max_s(),
            meta,
        }
    }

    pub fn to_model(&self) -> Result<SlpModel> {
        SlpModel::with_support(
            [self.w1, self.b1, self.w2, self.b2],
            (self.tx.in_min, self.tx.in_max),
            (self.ty.out_min, self.ty.out_max),
            self.clamp_max_s,
        )
    }
}

pub fn save_model(model: &SlpModel, meta: ModelMeta, path: &Path) -> Result<()> {
    save_json(&ModelFile::from_model(model, meta), path)
}

pub fn load_model(path: &Path) -> Result<(SlpModel, ModelMeta)> {
    let file: ModelFile = load_json(path)?;
    check_version(path, file.schema_version)?;
    Ok((file.to_model()?, file.meta))
}

/// Disc of cavity points to leave out of a plane fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcludeDisc {
    pub center: [f64; 3],
    pub radius: f64,
}

/// Total-least-squares plane through the points outside `exclude`.
///
/// The center is the centroid of the used points and the normal is oriented
/// toward positive z.
pub fn fit_local_frame(surface: &Surface, exclude: Option<&ExcludeDisc>) -> Result<LocalSurfaceFrame> {
    let used: Vec<&Point3> = surface
        .points()
        .iter()
        .filter(|p| {
            exclude.is_none_or(|d| (*p - Point3::from(d.center)).norm() > d.radius)
        })
        .collect();
    if used.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "plane fit needs at least 3 points, {} remain",
            used.len()
        )));
    }
    let centroid = used.iter().fold(Vector3::zeros(), |acc, p| acc + *p) / used.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &used {
        let d = *p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (small, mid, large) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if !(large > 0.0) || mid <= 1e-12 * large {
        return Err(Error::DegenerateGeometry(
            "points are collinear or coincident".into(),
        ));
    }
    log::debug!("plane fit eigenvalues {small:e} {mid:e} {large:e}");
    let mut n: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    let flip = if n.z != 0.0 {
        n.z < 0.0
    } else if n.y != 0.0 {
        n.y < 0.0
    } else {
        n.x < 0.0
    };
    if flip {
        n = -n;
    }
    Ok(LocalSurfaceFrame {
        center: centroid,
        normal: unit(n)?,
    })
}

/// `(s, d)` tuples of a measured cavity, one per point in index order.
pub fn extract_regression_tuples(
    cavity: &Surface,
    frame: &LocalSurfaceFrame,
    cfg: &LaserConfig,
    standoff: f64,
    cavity_id: u32,
) -> Result<Vec<CavitySample>> {
    let plane = cfg.incident_plane(standoff);
    cavity
        .points()
        .iter()
        .enumerate()
        .map(|(k, q)| {
            Ok(CavitySample {
                s: distance_to_laser_center(q, &plane),
                d: depth_of_cut_measured(q, frame, &cfg.direction)?,
                cavity_id,
                point_index: k,
            })
        })
        .collect()
}

/// Per-cell depths for plotting.
pub fn save_cell_depths(
    grid: &RoiGrid,
    predicted: &DepthField,
    gt: &DepthField,
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["cell", "u", "v", "x", "y", "z", "area", "d_predict", "d_gt"])?;
    for (i, ((s, p), g)) in grid
        .samples
        .iter()
        .zip(&predicted.values)
        .zip(&gt.values)
        .enumerate()
    {
        w.write_record([
            i.to_string(),
            s.local[0].to_string(),
            s.local[1].to_string(),
            s.point.x.to_string(),
            s.point.y.to_string(),
            s.point.z.to_string(),
            s.cell_area.to_string(),
            p.to_string(),
            g.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

/// One row per planning case.
pub fn save_case_records(records: &[CaseRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["case_id".to_string(), "gt_index".into(), "init_index".into()];
    for prefix in ["gt", "init", "final"] {
        for axis in ["cx", "cy", "cz", "vx", "vy", "vz"] {
            header.push(format!("{prefix}_{axis}"));
        }
    }
    header.extend(["cost", "iterations", "converged", "error", "status", "success"].map(String::from));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.case_id.to_string(),
            r.gt_index.to_string(),
            r.init_index.to_string(),
        ];
        for x in r.gt.iter().chain(&r.init).chain(&r.final_config) {
            row.push(x.to_string());
        }
        row.push(r.cost.to_string());
        row.push(r.iterations.to_string());
        row.push(r.converged.to_string());
        row.push(r.error.to_string());
        row.push(r.status.as_str().to_string());
        row.push(r.success().to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))
}

/// `path` with its file name replaced, for sibling outputs.
pub fn sibling(path: &Path, file_name: &str) -> PathBuf {
    path.with_file_name(file_name)
}
