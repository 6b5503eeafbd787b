//! The adversarial game between the primal network `f` (weights `theta`) and
//! the adversary `u` (weights `omega`).
//!
//! Per-sample payoff, with residual `r = sum_k c_k f(x_k) - b~`:
//!
//! ```text
//! F = r * u(x2) - u(x2)^2 / 2 + alpha / 2 * f(x_ridge)^2
//! ```
//!
//! The single-point case (`c = [1]`) is the plain IV-type game; two points
//! with `c = [+1, -1]` cover first-differenced panels and other `(I - K) f = b`
//! equations. `f` descends, `u` ascends, both are projected back onto their
//! balls after every simultaneous step, and the reported estimator is the
//! average of the primal networks (averaged as functions, not as weights).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::nn::{norm, NetworkState};
use crate::oracle::DiscretizedOperator;

/// Snapshot budget used when no stride is given.
pub const DEFAULT_MAX_SNAPSHOTS: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub coeff: f64,
    pub point: Vec<f64>,
}

/// One observation written as a linear residual specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub eval_points: Vec<EvalPoint>,
    /// Point at which the adversary is evaluated.
    pub instrument: Vec<f64>,
    pub b_tilde: f64,
    /// Evaluation point that carries the ridge term.
    pub ridge_index: usize,
}

impl Sample {
    pub fn new(
        eval_points: Vec<EvalPoint>,
        instrument: Vec<f64>,
        b_tilde: f64,
        ridge_index: usize,
    ) -> Result<Self> {
        let s = Self {
            eval_points,
            instrument,
            b_tilde,
            ridge_index,
        };
        s.validate()?;
        Ok(s)
    }

    /// `f(x1) - b~` against `u(x2)`.
    pub fn single(x1: Vec<f64>, x2: Vec<f64>, b_tilde: f64) -> Self {
        Self {
            eval_points: vec![EvalPoint { coeff: 1.0, point: x1 }],
            instrument: x2,
            b_tilde,
            ridge_index: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.instrument.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_points.is_empty() {
            return Err(Error::Shape("sample has no evaluation points".into()));
        }
        if self.ridge_index >= self.eval_points.len() {
            return Err(Error::Shape(format!(
                "ridge index {} out of range for {} points",
                self.ridge_index,
                self.eval_points.len()
            )));
        }
        let d = self.instrument.len();
        for p in &self.eval_points {
            Error::check_dim(d, p.point.len())?;
        }
        Ok(())
    }

    /// Largest Euclidean norm among all points of the sample.
    pub fn max_point_norm(&self) -> f64 {
        self.eval_points
            .iter()
            .map(|p| norm(&p.point))
            .fold(norm(&self.instrument), f64::max)
    }
}

/// `sum_k c_k f(x_k) - b~`.
pub fn residual(f: &NetworkState, sample: &Sample) -> Result<f64> {
    let mut acc = -sample.b_tilde;
    for p in &sample.eval_points {
        acc += p.coeff * f.forward(&p.point)?;
    }
    Ok(acc)
}

pub fn payoff(theta: &NetworkState, omega: &NetworkState, sample: &Sample, alpha: f64) -> Result<f64> {
    sample.validate()?;
    let u = omega.forward(&sample.instrument)?;
    let r = residual(theta, sample)?;
    let fr = theta.forward(&sample.eval_points[sample.ridge_index].point)?;
    Ok(r * u - 0.5 * u * u + 0.5 * alpha * fr * fr)
}

/// `u(x2) * sum_k c_k grad f(x_k) + alpha * f(x_ridge) * grad f(x_ridge)`.
pub fn grad_theta(
    theta: &NetworkState,
    omega: &NetworkState,
    sample: &Sample,
    alpha: f64,
) -> Result<Vec<f64>> {
    let mut gt = vec![0.0; theta.num_params()];
    let mut go = vec![0.0; omega.num_params()];
    accumulate_step(theta, omega, sample, alpha, 1.0, &mut gt, &mut go)?;
    Ok(gt)
}

/// `(r - u(x2)) * grad u(x2)`.
pub fn grad_omega(
    theta: &NetworkState,
    omega: &NetworkState,
    sample: &Sample,
    alpha: f64,
) -> Result<Vec<f64>> {
    let mut gt = vec![0.0; theta.num_params()];
    let mut go = vec![0.0; omega.num_params()];
    accumulate_step(theta, omega, sample, alpha, 1.0, &mut gt, &mut go)?;
    Ok(go)
}

/// Adds `scale` times both payoff gradients into the buffers and returns the payoff.
fn accumulate_step(
    theta: &NetworkState,
    omega: &NetworkState,
    sample: &Sample,
    alpha: f64,
    scale: f64,
    g_theta: &mut [f64],
    g_omega: &mut [f64],
) -> Result<f64> {
    sample.validate()?;
    let (u, grad_u) = omega.value_and_gradient(&sample.instrument)?;
    let mut r = -sample.b_tilde;
    let mut f_ridge = 0.0;
    for (k, p) in sample.eval_points.iter().enumerate() {
        let (v, g) = theta.value_and_gradient(&p.point)?;
        r += p.coeff * v;
        let mut s = u * p.coeff;
        if k == sample.ridge_index {
            f_ridge = v;
            s += alpha * v;
        }
        let s = scale * s;
        for (o, gi) in g_theta.iter_mut().zip(&g) {
            *o += s * gi;
        }
    }
    let s = scale * (r - u);
    for (o, gi) in g_omega.iter_mut().zip(&grad_u) {
        *o += s * gi;
    }
    Ok(r * u - 0.5 * u * u + 0.5 * alpha * f_ridge * f_ridge)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    /// Ridge weight on `f`.
    pub alpha: f64,
    /// Constant stepsize shared by both players.
    pub eta: f64,
    /// Number of simultaneous update pairs.
    pub iterations: usize,
    pub snapshot_stride: usize,
    pub seed: u64,
    /// Samples averaged per gradient step; 1 reproduces the one-sample update.
    #[serde(default = "one")]
    pub batch_size: usize,
}

fn one() -> usize {
    1
}

impl GameConfig {
    /// Config with the default stride (at most 512 snapshots) and batch size 1.
    pub fn new(alpha: f64, eta: f64, iterations: usize) -> Self {
        Self {
            alpha,
            eta,
            iterations,
            snapshot_stride: default_stride(iterations),
            seed: 0,
            batch_size: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.snapshot_stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha must be nonnegative and finite"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta must be nonnegative and finite"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if self.snapshot_stride == 0 {
            return Err(Error::config("snapshot_stride must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        Ok(())
    }
}

pub fn default_stride(iterations: usize) -> usize {
    iterations.div_ceil(DEFAULT_MAX_SNAPSHOTS).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Sample payoff at `(theta_t, omega_t)`.
    pub payoff: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_omega: f64,
    /// `||theta_{t+1} - theta_1||` after the update of this iteration.
    pub dist_theta: f64,
    pub dist_omega: f64,
}

#[derive(Clone, Debug)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    /// Iterations `t` (1-based, `theta_1` is the initialization) at which snapshots were taken.
    pub snapshot_iters: Vec<usize>,
    pub theta_snapshots: Vec<NetworkState>,
    pub omega_snapshots: Vec<NetworkState>,
    pub theta: NetworkState,
    pub omega: NetworkState,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str =
        "iter,payoff,grad_norm_theta,grad_norm_omega,dist_theta,dist_omega";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.iter,
                fmt_f64(r.payoff),
                fmt_f64(r.grad_norm_theta),
                fmt_f64(r.grad_norm_omega),
                fmt_f64(r.dist_theta),
                fmt_f64(r.dist_omega)
            )?;
        }
        Ok(())
    }
}

/// Projected stochastic gradient descent-ascent.
///
/// Each iteration draws `batch_size` fresh samples, evaluates both gradients
/// at the current pair and applies
/// `theta <- P(theta - eta * g_theta)`, `omega <- P(omega + eta * g_omega)`.
pub fn sgda_run<I>(
    theta0: &NetworkState,
    omega0: &NetworkState,
    config: &GameConfig,
    data: I,
) -> Result<TrainTrace>
where
    I: IntoIterator<Item = Sample>,
{
    config.validate()?;
    if !theta0.is_feasible(1e-12) || !omega0.is_feasible(1e-12) {
        return Err(Error::config("initial iterates must lie inside their balls"));
    }
    let mut data = data.into_iter();
    let mut theta = theta0.clone();
    let mut omega = omega0.clone();
    let n_snap = config.iterations / config.snapshot_stride;
    let mut trace = TrainTrace {
        rows: Vec::with_capacity(config.iterations),
        snapshot_iters: Vec::with_capacity(n_snap),
        theta_snapshots: Vec::with_capacity(n_snap),
        omega_snapshots: Vec::with_capacity(n_snap),
        theta: theta0.clone(),
        omega: omega0.clone(),
    };
    let mut g_theta = vec![0.0; theta.num_params()];
    let mut g_omega = vec![0.0; omega.num_params()];
    let inv_batch = 1.0 / config.batch_size as f64;
    let mut consumed = 0usize;

    for t in 1..=config.iterations {
        if t % config.snapshot_stride == 0 {
            trace.snapshot_iters.push(t);
            trace.theta_snapshots.push(theta.clone());
            trace.omega_snapshots.push(omega.clone());
        }
        g_theta.iter_mut().for_each(|g| *g = 0.0);
        g_omega.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        for _ in 0..config.batch_size {
            let sample = data.next().ok_or(Error::StreamExhausted {
                needed: config.iterations * config.batch_size,
                got: consumed,
            })?;
            consumed += 1;
            value += inv_batch
                * accumulate_step(
                    &theta,
                    &omega,
                    &sample,
                    config.alpha,
                    inv_batch,
                    &mut g_theta,
                    &mut g_omega,
                )?;
        }
        let gn_theta = norm(&g_theta);
        let gn_omega = norm(&g_omega);
        if !value.is_finite() {
            return Err(Error::NonFinite { iteration: t, what: "payoff" });
        }
        if !gn_theta.is_finite() {
            return Err(Error::NonFinite { iteration: t, what: "primal gradient" });
        }
        if !gn_omega.is_finite() {
            return Err(Error::NonFinite { iteration: t, what: "adversary gradient" });
        }
        if config.eta != 0.0 {
            for (w, g) in theta.weights_mut().iter_mut().zip(&g_theta) {
                *w -= config.eta * g;
            }
            for (w, g) in omega.weights_mut().iter_mut().zip(&g_omega) {
                *w += config.eta * g;
            }
            theta.project_in_place();
            omega.project_in_place();
        }
        trace.rows.push(TraceRow {
            iter: t,
            payoff: value,
            grad_norm_theta: gn_theta,
            grad_norm_omega: gn_omega,
            dist_theta: theta.distance_from_init(),
            dist_omega: omega.distance_from_init(),
        });
    }
    trace.theta = theta;
    trace.omega = omega;
    Ok(trace)
}

/// Anything that can be evaluated at a point.
pub trait Estimator {
    fn eval(&self, x: &[f64]) -> Result<f64>;

    fn tabulate(&self, grid: &[Vec<f64>]) -> Result<Vec<f64>> {
        grid.iter().map(|x| self.eval(x)).collect()
    }
}

impl Estimator for NetworkState {
    fn eval(&self, x: &[f64]) -> Result<f64> {
        self.forward(x)
    }
}

/// Mean of the primal networks over the stored snapshots.
#[derive(Clone, Debug)]
pub struct AveragedEstimator {
    snapshots: Vec<NetworkState>,
}

impl AveragedEstimator {
    pub fn new(snapshots: Vec<NetworkState>) -> Result<Self> {
        let first = snapshots.first().ok_or(Error::EmptySnapshots)?;
        if snapshots
            .iter()
            .any(|s| s.config() != first.config() || s.seed() != first.seed())
        {
            return Err(Error::config("snapshots must share architecture and initialization"));
        }
        Ok(Self { snapshots })
    }

    pub fn snapshots(&self) -> &[NetworkState] {
        &self.snapshots
    }
}

impl Estimator for AveragedEstimator {
    fn eval(&self, x: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for s in &self.snapshots {
            acc += s.forward(x)?;
        }
        Ok(acc / self.snapshots.len() as f64)
    }
}

pub fn average_estimator(trace: &TrainTrace) -> Result<AveragedEstimator> {
    AveragedEstimator::new(trace.theta_snapshots.clone())
}

/// Inner maximizer of the game on a grid: `u* = A f - b`.
pub fn best_response(op: &DiscretizedOperator, f: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim(op.k2(), b.len())?;
    let af = op.apply(f)?;
    Ok(af.iter().zip(b).map(|(a, bi)| a - bi).collect())
}

/// Expected game value without the ridge term:
/// `<A f - b, u>_E - ||u||_E^2 / 2`.
pub fn grid_game_value(op: &DiscretizedOperator, f: &[f64], u: &[f64], b: &[f64]) -> Result<f64> {
    Error::check_dim(op.k2(), u.len())?;
    let r = best_response(op, f, b)?;
    Ok(op.inner_e(&r, u)? - 0.5 * op.inner_e(u, u)?)
}

/// Expected payoff `phi(f, u)` including the ridge term.
pub fn grid_payoff(
    op: &DiscretizedOperator,
    f: &[f64],
    u: &[f64],
    b: &[f64],
    alpha: f64,
) -> Result<f64> {
    Ok(grid_game_value(op, f, u, b)? + 0.5 * alpha * op.inner_h(f, f)?)
}

/// Riesz representers of the payoff gradients under the weighted inner products:
/// `(A* u + alpha f, A f - b - u)`.
pub fn grid_payoff_gradients(
    op: &DiscretizedOperator,
    f: &[f64],
    u: &[f64],
    b: &[f64],
    alpha: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut gf = op.adjoint(u)?;
    for (g, fi) in gf.iter_mut().zip(f) {
        *g += alpha * fi;
    }
    let r = best_response(op, f, b)?;
    let gu = r.iter().zip(u).map(|(ri, ui)| ri - ui).collect();
    Ok((gf, gu))
}

/// Mean payoff of `F` over a batch.
pub fn batch_payoff(
    theta: &NetworkState,
    omega: &NetworkState,
    batch: &[Sample],
    alpha: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut acc = 0.0;
    for s in batch {
        acc += payoff(theta, omega, s, alpha)?;
    }
    Ok(acc / batch.len() as f64)
}
