//! Single-layer perceptron depth model `d = f(s)`.
//!
//! The network is one tansig hidden unit followed by a linear output unit,
//! wrapped in min-max transforms: the input transform maps the training range
//! of `s` onto `[-1, 1]` and the output transform maps the network range
//! `[-1, 1]` back onto the training range of depths.
//!
//! ```text
//! d = T_y( tansig(w1 * T_x(s) + b1) * w2 + b2 )
//! ```
//!
//! Training minimizes the mean squared error over the training split with
//! Levenberg-Marquardt on the four parameters; each LM iteration counts as
//! one epoch, and the epoch with the lowest validation loss is returned.

use nalgebra::{Matrix4, Vector4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperbolic tangent sigmoid. `f64::tanh` saturates cleanly to `±1`.
pub fn tansig(z: f64) -> f64 {
    z.tanh()
}

pub fn tansig_derivative(z: f64) -> f64 {
    let t = z.tanh();
    1.0 - t * t
}

/// Linear map from `[in_min, in_max]` onto `[out_min, out_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMaxTransform {
    pub in_min: f64,
    pub in_max: f64,
    pub out_min: f64,
    pub out_max: f64,
}

impl MinMaxTransform {
    pub fn new(in_min: f64, in_max: f64, out_min: f64, out_max: f64) -> Result<Self> {
        let ok = [in_min, in_max, out_min, out_max].iter().all(|v| v.is_finite())
            && in_max > in_min
            && out_max > out_min;
        if !ok {
            return Err(Error::InvalidInput(format!(
                "min-max transform needs finite increasing ranges, got [{in_min}, {in_max}] -> [{out_min}, {out_max}]"
            )));
        }
        Ok(Self {
            in_min,
            in_max,
            out_min,
            out_max,
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.in_min) / (self.in_max - self.in_min) * (self.out_max - self.out_min)
            + self.out_min
    }

    pub fn invert(&self, y: f64) -> f64 {
        (y - self.out_min) / (self.out_max - self.out_min) * (self.in_max - self.in_min)
            + self.in_min
    }

    pub fn slope(&self) -> f64 {
        (self.out_max - self.out_min) / (self.in_max - self.in_min)
    }
}

/// Fitted depth model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlpModel {
    pub w1: f64,
    pub b1: f64,
    pub w2: f64,
    pub b2: f64,
    tx: MinMaxTransform,
    ty: MinMaxTransform,
    clamp_max_s: f64,
}

impl SlpModel {
    /// Builds a model whose input transform covers `s_range` and whose output
    /// transform covers `d_range`. The support boundary is `s_range.1`.
    pub fn new(params: [f64; 4], s_range: (f64, f64), d_range: (f64, f64)) -> Result<Self> {
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::InvalidInput("SLP parameters must be finite".into()));
        }
        let tx = MinMaxTransform::new(s_range.0, s_range.1, -1.0, 1.0)?;
        let ty = MinMaxTransform::new(-1.0, 1.0, d_range.0, d_range.1)?;
        Ok(Self {
            w1: params[0],
            b1: params[1],
            w2: params[2],
            b2: params[3],
            tx,
            ty,
            clamp_max_s: tx.in_max,
        })
    }

    /// Like [`SlpModel::new`] with an explicit support boundary.
    pub fn with_support(
        params: [f64; 4],
        s_range: (f64, f64),
        d_range: (f64, f64),
        clamp_max_s: f64,
    ) -> Result<Self> {
        if !(clamp_max_s.is_finite() && clamp_max_s > 0.0) {
            return Err(Error::InvalidInput(format!(
                "support boundary {clamp_max_s} must be positive"
            )));
        }
        Ok(Self {
            clamp_max_s,
            ..Self::new(params, s_range, d_range)?
        })
    }

    pub fn params(&self) -> [f64; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn with_params(&self, params: [f64; 4]) -> Self {
        Self {
            w1: params[0],
            b1: params[1],
            w2: params[2],
            b2: params[3],
            ..*self
        }
    }

    pub fn input_transform(&self) -> &MinMaxTransform {
        &self.tx
    }

    pub fn output_transform(&self) -> &MinMaxTransform {
        &self.ty
    }

    pub fn clamp_max_s(&self) -> f64 {
        self.clamp_max_s
    }

    /// Network output before the `d >= 0` clamp, for `s` already inside the support.
    fn raw(&self, s: f64) -> f64 {
        let z = self.w1 * self.tx.apply(s) + self.b1;
        self.ty.apply(tansig(z) * self.w2 + self.b2)
    }

    /// Predicted depth. Inputs beyond the support return the boundary value and
    /// negative outputs are clamped to zero.
    pub fn forward(&self, s: f64) -> f64 {
        self.raw(s.min(self.clamp_max_s)).max(0.0)
    }

    /// `d f / d s`. Zero outside `(0, clamp_max_s)` and wherever the output clamp is active.
    pub fn input_derivative(&self, s: f64) -> f64 {
        if !(s > 0.0 && s < self.clamp_max_s) || self.raw(s) < 0.0 {
            return 0.0;
        }
        let z = self.w1 * self.tx.apply(s) + self.b1;
        self.w1 * self.w2 * self.ty.slope() * self.tx.slope() * tansig_derivative(z)
    }

    /// Unclamped output and its gradient with respect to `(w1, b1, w2, b2)`.
    fn raw_with_param_gradient(&self, s: f64) -> (f64, [f64; 4]) {
        let x = self.tx.apply(s);
        let h = tansig(self.w1 * x + self.b1);
        let k = self.ty.slope();
        let dh = 1.0 - h * h;
        let out = self.ty.apply(h * self.w2 + self.b2);
        (out, [k * self.w2 * dh * x, k * self.w2 * dh, k * h, k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One `(s, d)` training tuple with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavitySample {
    pub s: f64,
    pub d: f64,
    pub cavity_id: u32,
    pub point_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    samples: Vec<CavitySample>,
    splits: Vec<Split>,
}

impl RegressionDataset {
    pub fn new(samples: Vec<CavitySample>, splits: Vec<Split>) -> Result<Self> {
        if samples.len() != splits.len() {
            return Err(Error::InvalidInput(format!(
                "{} samples but {} split labels",
                samples.len(),
                splits.len()
            )));
        }
        if let Some(i) = samples
            .iter()
            .position(|c| !(c.s.is_finite() && c.d.is_finite() && c.s >= 0.0 && c.d >= 0.0))
        {
            return Err(Error::InvalidInput(format!(
                "sample {i} must have finite s >= 0 and d >= 0"
            )));
        }
        Ok(Self { samples, splits })
    }

    /// Holds out whole cavities for testing and splits the rest `1 - val_fraction : val_fraction`
    /// into train and validation by a seeded shuffle.
    pub fn with_held_out_cavities(
        samples: Vec<CavitySample>,
        test_cavities: &[u32],
        val_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::InvalidInput(format!(
                "validation fraction {val_fraction} outside [0, 1)"
            )));
        }
        let mut splits = vec![Split::Test; samples.len()];
        let mut fit_idx: Vec<usize> = (0..samples.len())
            .filter(|&i| !test_cavities.contains(&samples[i].cavity_id))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fit_idx.shuffle(&mut rng);
        let n_val = (fit_idx.len() as f64 * val_fraction).round() as usize;
        for (rank, &i) in fit_idx.iter().enumerate() {
            splits[i] = if rank < fit_idx.len() - n_val {
                Split::Train
            } else {
                Split::Val
            };
        }
        Self::new(samples, splits)
    }

    pub fn samples(&self) -> &[CavitySample] {
        &self.samples
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    fn subset(&self, split: Split) -> Vec<CavitySample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, &sp)| sp == split)
            .map(|(c, _)| *c)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub lambda0: f64,
    pub min_mse_change: f64,
    pub min_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iterations: 500,
            seed: 0,
            lambda0: 1e-3,
            min_mse_change: 1e-12,
            min_step: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Root-mean-square error on the report split, mm.
    pub rmse: f64,
    /// Mean absolute error on the report split, mm.
    pub mae: f64,
    /// Split the error metrics were computed on (test when available).
    pub report_split: Split,
    /// LM iteration at which the selected parameters were reached.
    pub epochs_used: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub test_mse: Option<f64>,
    pub converged: bool,
    pub best_restart: usize,
    pub seed: u64,
}

/// Seeded initial guesses, uniform in `[-1, 1]`.
pub fn initial_guesses(seed: u64, n: usize) -> Vec<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
        .collect()
}

pub fn mse(model: &SlpModel, samples: &[CavitySample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples
        .iter()
        .map(|c| (model.forward(c.s) - c.d).powi(2))
        .sum::<f64>()
        / samples.len() as f64
}

fn raw_mse(model: &SlpModel, samples: &[CavitySample]) -> f64 {
    samples
        .iter()
        .map(|c| (model.raw(c.s) - c.d).powi(2))
        .sum::<f64>()
        / samples.len() as f64
}

struct RestartOutcome {
    params: [f64; 4],
    val_loss: f64,
    epoch: usize,
    converged: bool,
}

fn levenberg_marquardt(
    template: &SlpModel,
    init: [f64; 4],
    train: &[CavitySample],
    val: &[CavitySample],
    cfg: &FitConfig,
) -> RestartOutcome {
    let n = train.len() as f64;
    let mut model = template.with_params(init);
    let mut cost = raw_mse(&model, train);
    let val_loss = |m: &SlpModel| {
        if val.is_empty() {
            raw_mse(m, train)
        } else {
            mse(m, val)
        }
    };
    let mut best = RestartOutcome {
        params: init,
        val_loss: val_loss(&model),
        epoch: 0,
        converged: false,
    };
    let mut lambda = cfg.lambda0;

    for epoch in 1..=cfg.max_iterations {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for c in train {
            let (out, g) = model.raw_with_param_gradient(c.s);
            let g = Vector4::from(g);
            jtj += g * g.transpose();
            jtr += g * (out - c.d);
        }
        jtj /= n;
        jtr /= n;

        let mut accepted = None;
        while lambda <= 1e10 {
            let damped = jtj + Matrix4::identity() * lambda;
            if let Some(chol) = damped.cholesky() {
                let step = -chol.solve(&jtr);
                let p = model.params();
                let trial_params = [p[0] + step[0], p[1] + step[1], p[2] + step[2], p[3] + step[3]];
                let trial = model.with_params(trial_params);
                let trial_cost = raw_mse(&trial, train);
                if trial_cost.is_finite() && trial_cost < cost {
                    lambda = (lambda * 0.1).max(1e-20);
                    accepted = Some((trial, trial_cost, step.norm()));
                    break;
                }
            }
            lambda *= 10.0;
        }

        let Some((trial, trial_cost, step_norm)) = accepted else {
            // no descent direction left at any damping: a stationary point
            best.converged = true;
            break;
        };
        let change = cost - trial_cost;
        model = trial;
        cost = trial_cost;

        let v = val_loss(&model);
        if v < best.val_loss {
            best.params = model.params();
            best.val_loss = v;
            best.epoch = epoch;
        }
        if change < cfg.min_mse_change || step_norm < cfg.min_step {
            best.converged = true;
            break;
        }
    }
    best
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Fits the SLP on the training split.
///
/// Returns the model with the lowest validation loss over all restarts and
/// LM epochs. A run that hits `max_iterations` still returns its best model
/// with `converged = false` in the report.
pub fn fit_slp(data: &RegressionDataset, config: &FitConfig) -> Result<(SlpModel, FitReport)> {
    let train = data.subset(Split::Train);
    let val = data.subset(Split::Val);
    let test = data.subset(Split::Test);
    if train.len() < 10 {
        return Err(Error::DegenerateData(format!(
            "need at least 10 training samples, got {}",
            train.len()
        )));
    }
    let s_range = range(train.iter().map(|c| c.s));
    let d_range = range(train.iter().map(|c| c.d));
    if s_range.1 - s_range.0 <= 1e-12 {
        return Err(Error::DegenerateData(
            "all training distances are equal".into(),
        ));
    }

    if d_range.1 - d_range.0 <= 1e-12 {
        // constant depth: exact flat fit, output pinned at the lower label bound
        let m = SlpModel::new([0.0, 0.0, 0.0, -1.0], s_range, (d_range.0, d_range.0 + 1.0))?;
        let outcome = RestartOutcome {
            params: m.params(),
            val_loss: mse(&m, &val),
            epoch: 0,
            converged: true,
        };
        return Ok(finish(m, outcome, 0, config.seed, &train, &val, &test));
    }

    let template = SlpModel::new([0.0; 4], s_range, d_range)?;
    let mut best: Option<(usize, RestartOutcome)> = None;
    for (i, init) in initial_guesses(config.seed, config.restarts.max(1))
        .into_iter()
        .enumerate()
    {
        let out = levenberg_marquardt(&template, init, &train, &val, config);
        log::debug!(
            "restart {i}: val loss {:.3e} at epoch {} (converged {})",
            out.val_loss,
            out.epoch,
            out.converged
        );
        if best.as_ref().is_none_or(|(_, b)| out.val_loss < b.val_loss) {
            best = Some((i, out));
        }
    }
    let (i, out) = best.expect("at least one restart");
    let model = template.with_params(out.params);
    Ok(finish(model, out, i, config.seed, &train, &val, &test))
}

fn finish(
    model: SlpModel,
    outcome: RestartOutcome,
    restart: usize,
    seed: u64,
    train: &[CavitySample],
    val: &[CavitySample],
    test: &[CavitySample],
) -> (SlpModel, FitReport) {
    let (report_split, eval) = if !test.is_empty() {
        (Split::Test, test)
    } else if !val.is_empty() {
        (Split::Val, val)
    } else {
        (Split::Train, train)
    };
    let rmse = mse(&model, eval).sqrt();
    let mae = eval
        .iter()
        .map(|c| (model.forward(c.s) - c.d).abs())
        .sum::<f64>()
        / eval.len() as f64;
    let report = FitReport {
        rmse,
        mae,
        report_split,
        epochs_used: outcome.epoch,
        train_mse: mse(&model, train),
        val_mse: (!val.is_empty()).then(|| mse(&model, val)),
        test_mse: (!test.is_empty()).then(|| mse(&model, test)),
        converged: outcome.converged,
        best_restart: restart,
        seed,
    };
    (model, report)
}
