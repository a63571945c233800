//! Laser ablation cavity prediction and laser pose planning.
//!
//! A trained single-layer perceptron maps a surface point's distance to the
//! laser axis onto a depth-of-cut. Forward kinematics applies that model to a
//! pre-ablation surface to predict the cavity of one laser shot; inverse
//! kinematics and the planner search for the shot whose predicted cavity
//! matches a target surface; the volumetric module scores predicted cavities
//! against ground truth.

pub mod dataio;
pub mod error;
pub mod geometry;
pub mod kinematics;
pub mod planner;
pub mod slp;
mod solver;
pub mod synth;
pub mod volumetrics;

pub use error::{Error, Result};
pub use geometry::{LaserConfig, LocalSurfaceFrame, Point3, Surface, UnitVec3};
pub use kinematics::{DepthProfile, IkConstraints, SolverMethod, SolverOpts};
pub use slp::SlpModel;
