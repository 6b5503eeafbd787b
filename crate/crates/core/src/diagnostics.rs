//! Experiment drivers and verification harnesses.
//!
//! Sweep cells are independent and run in parallel on the current rayon
//! pool; every cell derives its seeds from the sweep seed alone, so rows are
//! reproducible one by one and come back in a fixed order.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{
    grad_omega, grad_theta, payoff, sgda_run, AveragedEstimator, Estimator, GameConfig, Sample,
    TrainTrace,
};
use crate::io::{Cell, Table};
use crate::nn::{dot, linearization_gap, norm, Arch, NetConfig, NetworkState};
use crate::oracle::{svd_system, TikhonovOracle};
use crate::rng::{mix, Stream};
use crate::sem::{circular_design, CircularSpec, DiscreteDesign, DiscreteStream, TestFunction};

// ---------------------------------------------------------------- statistics

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    ols_slope(&lx, &ly)
}

pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    sxy / (sxx * syy).sqrt()
}

// ------------------------------------------------------------------- specs

/// Discrete instance used by the sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Instance {
    Circular(CircularSpec),
    Discrete(DiscreteDesign),
}

impl Instance {
    /// The design, with the truth regenerated for `beta` when given.
    pub fn design(&self, beta: Option<f64>) -> Result<DiscreteDesign> {
        match (self, beta) {
            (Instance::Circular(spec), None) => circular_design(spec),
            (Instance::Circular(spec), Some(beta)) => circular_design(&CircularSpec { beta, ..*spec }),
            (Instance::Discrete(d), None) => {
                d.validate()?;
                Ok(d.clone())
            }
            (Instance::Discrete(_), Some(_)) => Err(Error::config(
                "beta grids need a circular instance (the truth is regenerated per beta)",
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepRule {
    Constant { eta: f64 },
    /// `eta = scale / sqrt(T)`.
    InvSqrt { scale: f64 },
}

impl StepRule {
    pub fn eta(&self, iterations: usize) -> f64 {
        match *self {
            StepRule::Constant { eta } => eta,
            StepRule::InvSqrt { scale } => scale / (iterations as f64).sqrt(),
        }
    }
}

/// Architecture shared by both players; the width comes from the sweep grid
/// and the input dimension from the instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub arch: Arch,
    pub radius: f64,
    #[serde(default = "one")]
    pub depth: usize,
    /// Ball radius of the adversary; defaults to `radius`.
    #[serde(default)]
    pub adversary_radius: Option<f64>,
}

fn one() -> usize {
    1
}

impl NetSpec {
    pub fn two_layer(radius: f64) -> Self {
        Self {
            arch: Arch::TwoLayer,
            radius,
            depth: 1,
            adversary_radius: None,
        }
    }

    fn config(&self, d: usize, m: usize, radius: f64) -> NetConfig {
        match self.arch {
            Arch::TwoLayer => NetConfig::two_layer(d, m, radius),
            Arch::MultiLayer => NetConfig::multi_layer(d, m, self.depth, radius),
        }
    }

    pub fn theta_config(&self, d: usize, m: usize) -> NetConfig {
        self.config(d, m, self.radius)
    }

    pub fn omega_config(&self, d: usize, m: usize) -> NetConfig {
        self.config(d, m, self.adversary_radius.unwrap_or(self.radius))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub instance: Instance,
    pub net: NetSpec,
    pub widths: Vec<usize>,
    pub iterations: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Smoothness levels of regenerated truths (consistency sweeps only).
    #[serde(default)]
    pub betas: Vec<f64>,
    pub step: StepRule,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub snapshot_stride: Option<usize>,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub output: Option<String>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.iterations.is_empty() || self.alphas.is_empty() {
            return Err(Error::config("sweep grids must be nonempty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds must be distinct"));
        }
        if self.widths.contains(&0) || self.iterations.contains(&0) {
            return Err(Error::config("widths and iterations must be positive"));
        }
        Ok(())
    }

    fn game(&self, alpha: f64, iterations: usize, seed: u64) -> GameConfig {
        let mut g = GameConfig::new(alpha, self.step.eta(iterations), iterations);
        if let Some(s) = self.snapshot_stride {
            g.snapshot_stride = s;
        }
        g.seed = seed;
        g.batch_size = self.batch_size;
        g
    }
}

// ------------------------------------------------------------ training cells

/// Seeds of one training run: the data stream depends on the sweep seed only,
/// so runs that differ in width or horizon see the same samples.
pub fn cell_seeds(seed: u64, width: usize) -> (u64, u64, u64) {
    (
        mix(&[seed, 1, width as u64]),
        mix(&[seed, 2, width as u64]),
        mix(&[seed, 3]),
    )
}

/// Trains both players on a discrete design.
pub fn train_discrete(
    design: &DiscreteDesign,
    net: &NetSpec,
    width: usize,
    game: &GameConfig,
) -> Result<TrainTrace> {
    let d = design.x1_grid[0].len();
    let (ts, os, ds) = cell_seeds(game.seed, width);
    let theta = NetworkState::init(net.theta_config(d, width), ts)?;
    let omega = NetworkState::init(net.omega_config(d, width), os)?;
    sgda_run(&theta, &omega, game, DiscreteStream::new(design, ds)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellOutcome {
    pub suboptimality: f64,
    /// Mean of the suboptimalities of the individual snapshots.
    pub mean_iterate_suboptimality: f64,
    pub l2_error_vs_oracle: f64,
    pub rel_l2_error_vs_oracle: f64,
    /// Weighted squared distance to the true structural function.
    pub sq_error_to_truth: f64,
    pub f_bar: Vec<f64>,
    pub runtime: f64,
}

/// One full training run plus its evaluation against the oracle and the truth.
pub fn run_cell(
    design: &DiscreteDesign,
    oracle: &TikhonovOracle,
    net: &NetSpec,
    width: usize,
    game: &GameConfig,
) -> Result<CellOutcome> {
    let start = Instant::now();
    let trace = train_discrete(design, net, width, game)?;
    let grid = oracle.op.x1_grid();
    let est = AveragedEstimator::new(trace.theta_snapshots)?;
    let f_bar = est.tabulate(grid)?;
    let suboptimality = oracle.suboptimality(&f_bar)?;
    let mut mean_sub = 0.0;
    for s in est.snapshots() {
        mean_sub += oracle.suboptimality(&s.tabulate(grid)?)?;
    }
    mean_sub /= est.snapshots().len() as f64;
    let l2 = oracle.distance(&f_bar)?;
    let rel = l2 / oracle.op.norm_h(&oracle.f_alpha)?;
    let diff: Vec<f64> = f_bar.iter().zip(&design.f_true).map(|(a, b)| a - b).collect();
    let sq_truth = oracle.op.inner_h(&diff, &diff)?;
    Ok(CellOutcome {
        suboptimality,
        mean_iterate_suboptimality: mean_sub,
        l2_error_vs_oracle: l2,
        rel_l2_error_vs_oracle: rel,
        sq_error_to_truth: sq_truth,
        f_bar,
        runtime: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Table,
    pub summary: Table,
}

fn status(r: &Result<CellOutcome>) -> Cell {
    match r {
        Ok(_) => "ok".into(),
        Err(e) => Cell::Text(format!("\"{}\"", e.to_string().replace('"', "'"))),
    }
}

/// Suboptimality of the averaged estimator across widths, horizons, ridge
/// levels and seeds, with the log-log slope of the median against `T`.
pub fn convergence_experiment(spec: &SweepSpec) -> Result<SweepReport> {
    spec.validate()?;
    let design = spec.instance.design(None)?;
    let op = design.operator()?;
    let b = op.apply(&design.f_true)?;
    let mut cells = Vec::new();
    for &m in &spec.widths {
        for &t in &spec.iterations {
            for &alpha in &spec.alphas {
                for &seed in &spec.seeds {
                    cells.push((m, t, alpha, seed));
                }
            }
        }
    }
    let oracles: Vec<TikhonovOracle> = spec
        .alphas
        .iter()
        .map(|&a| TikhonovOracle::new(op.clone(), b.clone(), a))
        .collect::<Result<_>>()?;
    let results: Vec<Result<CellOutcome>> = cells
        .par_iter()
        .map(|&(m, t, alpha, seed)| {
            let k = spec.alphas.iter().position(|&a| a == alpha).expect("alpha from grid");
            run_cell(&design, &oracles[k], &spec.net, m, &spec.game(alpha, t, seed))
        })
        .collect();

    let mut rows = Table::new(&[
        "m",
        "T",
        "eta",
        "alpha",
        "seed",
        "suboptimality",
        "mean_iterate_suboptimality",
        "l2_error_vs_oracle",
        "rel_l2_error_vs_oracle",
        "runtime",
        "status",
    ]);
    for (&(m, t, alpha, seed), r) in cells.iter().zip(&results) {
        let (a, b2, c, d, e) = match r {
            Ok(o) => (
                o.suboptimality,
                o.mean_iterate_suboptimality,
                o.l2_error_vs_oracle,
                o.rel_l2_error_vs_oracle,
                o.runtime,
            ),
            Err(_) => (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        rows.push(vec![
            m.into(),
            t.into(),
            spec.step.eta(t).into(),
            alpha.into(),
            seed.into(),
            a.into(),
            b2.into(),
            c.into(),
            d.into(),
            e.into(),
            status(r),
        ]);
    }

    let mut summary = Table::new(&["m", "alpha", "T", "median_suboptimality", "slope_vs_T"]);
    for &m in &spec.widths {
        for &alpha in &spec.alphas {
            let meds: Vec<f64> = spec
                .iterations
                .iter()
                .map(|&t| {
                    let v: Vec<f64> = cells
                        .iter()
                        .zip(&results)
                        .filter(|((cm, ct, ca, _), _)| *cm == m && *ct == t && *ca == alpha)
                        .filter_map(|(_, r)| r.as_ref().ok().map(|o| o.suboptimality))
                        .collect();
                    median(&v)
                })
                .collect();
            let ts: Vec<f64> = spec.iterations.iter().map(|&t| t as f64).collect();
            let slope = if ts.len() >= 2 && meds.iter().all(|v| *v > 0.0) {
                loglog_slope(&ts, &meds)
            } else {
                f64::NAN
            };
            for (&t, &med) in spec.iterations.iter().zip(&meds) {
                summary.push(vec![m.into(), alpha.into(), t.into(), med.into(), slope.into()]);
            }
        }
    }
    Ok(SweepReport { rows, summary })
}

/// Weighted distance of the averaged estimator to the true function across
/// the ridge grid; the summary marks the ridge level with the smallest median.
pub fn consistency_experiment(spec: &SweepSpec) -> Result<SweepReport> {
    spec.validate()?;
    let betas: Vec<Option<f64>> = if spec.betas.is_empty() {
        vec![None]
    } else {
        spec.betas.iter().map(|&b| Some(b)).collect()
    };
    let mut designs = Vec::new();
    for &beta in &betas {
        let design = spec.instance.design(beta)?;
        let op = design.operator()?;
        let b = op.apply(&design.f_true)?;
        let oracles: Vec<TikhonovOracle> = spec
            .alphas
            .iter()
            .map(|&a| TikhonovOracle::new(op.clone(), b.clone(), a))
            .collect::<Result<_>>()?;
        designs.push((design, oracles));
    }
    let mut cells = Vec::new();
    for bi in 0..betas.len() {
        for ai in 0..spec.alphas.len() {
            for &t in &spec.iterations {
                for &m in &spec.widths {
                    for &seed in &spec.seeds {
                        cells.push((bi, ai, t, m, seed));
                    }
                }
            }
        }
    }
    let results: Vec<Result<CellOutcome>> = cells
        .par_iter()
        .map(|&(bi, ai, t, m, seed)| {
            let (design, oracles) = &designs[bi];
            run_cell(design, &oracles[ai], &spec.net, m, &spec.game(spec.alphas[ai], t, seed))
        })
        .collect();
    let beta_value = |bi: usize| betas[bi].unwrap_or(f64::NAN);

    let mut rows = Table::new(&[
        "alpha",
        "beta",
        "T",
        "m",
        "seed",
        "l2_error_to_truth",
        "sq_l2_error_to_truth",
        "oracle_sq_bias",
        "status",
    ]);
    let bias = |bi: usize, ai: usize| -> Result<f64> {
        let (design, oracles) = &designs[bi];
        let o = &oracles[ai];
        let d: Vec<f64> = o.f_alpha.iter().zip(&design.f_true).map(|(a, b)| a - b).collect();
        o.op.inner_h(&d, &d)
    };
    for (&(bi, ai, t, m, seed), r) in cells.iter().zip(&results) {
        let sq = r.as_ref().map(|o| o.sq_error_to_truth).unwrap_or(f64::NAN);
        rows.push(vec![
            spec.alphas[ai].into(),
            beta_value(bi).into(),
            t.into(),
            m.into(),
            seed.into(),
            sq.sqrt().into(),
            sq.into(),
            bias(bi, ai)?.into(),
            status(r),
        ]);
    }

    let mut summary = Table::new(&[
        "beta",
        "T",
        "m",
        "alpha",
        "median_sq_error",
        "oracle_sq_bias",
        "is_argmin",
    ]);
    for bi in 0..betas.len() {
        for &t in &spec.iterations {
            for &m in &spec.widths {
                let meds: Vec<f64> = (0..spec.alphas.len())
                    .map(|ai| {
                        let v: Vec<f64> = cells
                            .iter()
                            .zip(&results)
                            .filter(|((cb, ca, ct, cm, _), _)| {
                                *cb == bi && *ca == ai && *ct == t && *cm == m
                            })
                            .filter_map(|(_, r)| r.as_ref().ok().map(|o| o.sq_error_to_truth))
                            .collect();
                        median(&v)
                    })
                    .collect();
                let best = (0..meds.len())
                    .min_by(|&a, &b| meds[a].total_cmp(&meds[b]))
                    .expect("nonempty alpha grid");
                for (ai, &med) in meds.iter().enumerate() {
                    summary.push(vec![
                        beta_value(bi).into(),
                        t.into(),
                        m.into(),
                        spec.alphas[ai].into(),
                        med.into(),
                        bias(bi, ai)?.into(),
                        usize::from(ai == best).into(),
                    ]);
                }
            }
        }
    }
    Ok(SweepReport { rows, summary })
}

// ----------------------------------------------------------- linearization

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearizationSpec {
    pub arch: Arch,
    pub input_dim: usize,
    #[serde(default = "one")]
    pub depth: usize,
    pub radius: f64,
    pub widths: Vec<usize>,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearizationReport {
    pub rows: Table,
    pub value_slope: f64,
    pub grad_slope: f64,
    pub value_spearman: f64,
    pub grad_spearman: f64,
    /// Slope of the gradient gap divided by the mean squared init gradient.
    pub rel_grad_slope: f64,
}

pub fn linearization_experiment(spec: &LinearizationSpec) -> Result<LinearizationReport> {
    let spec_c = spec.clone();
    let factory = move |m: usize, seed: u64| {
        let cfg = match spec_c.arch {
            Arch::TwoLayer => NetConfig::two_layer(spec_c.input_dim, m, spec_c.radius),
            Arch::MultiLayer => NetConfig::multi_layer(spec_c.input_dim, m, spec_c.depth, spec_c.radius),
        };
        NetworkState::init(cfg, seed)
    };
    let gaps = linearization_gap(factory, &spec.widths, spec.n_samples, spec.seed)?;
    let ms: Vec<f64> = gaps.iter().map(|g| g.width as f64).collect();
    let vs: Vec<f64> = gaps.iter().map(|g| g.mean_sq_value_gap).collect();
    let gs: Vec<f64> = gaps.iter().map(|g| g.mean_sq_grad_gap).collect();
    let rel: Vec<f64> = gaps.iter().map(|g| g.mean_sq_grad_gap / g.mean_sq_init_grad).collect();
    let mut rows = Table::new(&["m", "mean_sq_value_gap", "mean_sq_grad_gap", "mean_sq_init_grad"]);
    for g in &gaps {
        rows.push(vec![g.width.into(), g.mean_sq_value_gap.into(), g.mean_sq_grad_gap.into(), g.mean_sq_init_grad.into()]);
    }
    let slope = |ys: &[f64]| {
        if ms.len() >= 2 && ys.iter().all(|v| *v > 0.0) {
            loglog_slope(&ms, ys)
        } else {
            f64::NAN
        }
    };
    Ok(LinearizationReport {
        value_slope: slope(&vs),
        grad_slope: slope(&gs),
        value_spearman: spearman(&ms, &vs),
        grad_spearman: spearman(&ms, &gs),
        rel_grad_slope: slope(&rel),
        rows,
    })
}

// ------------------------------------------------------------------ regret

/// Online projected gradient descent on random quadratics
/// `f_t(x) = (x - c_t)' Q_t (x - c_t) / 2` over the ball `||x|| <= radius`,
/// with bounded zero-mean noise and a fixed bias vector added to each gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegretSpec {
    pub dim: usize,
    pub eig_min: f64,
    pub eig_max: f64,
    /// Bound on `||c_t||`.
    pub center_scale: f64,
    /// Radius of the uniform-ball gradient noise.
    pub noise_scale: f64,
    /// `||xi_t||`.
    pub bias: f64,
    pub radius: f64,
    /// Stepsize; defaults to `sqrt(2 M / T) / K`.
    #[serde(default)]
    pub eta: Option<f64>,
    pub horizon: usize,
    pub delta: f64,
    pub seeds: Vec<u64>,
    #[serde(default = "three")]
    pub max_violations: usize,
}

fn three() -> usize {
    3
}

impl Default for RegretSpec {
    fn default() -> Self {
        Self {
            dim: 5,
            eig_min: 0.2,
            eig_max: 0.6,
            center_scale: 0.5,
            noise_scale: 0.2,
            bias: 0.05,
            radius: 0.5,
            eta: None,
            horizon: 2000,
            delta: 0.05,
            seeds: (0..20).collect(),
            max_violations: 3,
        }
    }
}

impl RegretSpec {
    /// Bound on `||zeta_t + xi_t||`.
    pub fn k_bound(&self) -> f64 {
        self.eig_max * (self.radius + self.center_scale) + self.noise_scale + self.bias
    }

    /// Bound on the Bregman divergence `||x - y||^2 / 2` over the ball.
    pub fn m_bound(&self) -> f64 {
        2.0 * self.radius * self.radius
    }

    pub fn step(&self) -> f64 {
        self.eta
            .unwrap_or_else(|| (2.0 * self.m_bound() / self.horizon as f64).sqrt() / self.k_bound())
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [self.eig_min, self.eig_max, self.radius, self.delta];
        if pos.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.delta >= 1.0 {
            return Err(Error::config("eigenvalues, radius and delta must be positive (delta < 1)"));
        }
        if self.eig_min > self.eig_max {
            return Err(Error::config("eig_min exceeds eig_max"));
        }
        let nonneg = [self.center_scale, self.noise_scale, self.bias];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config("scales must be nonnegative"));
        }
        if self.dim == 0 || self.horizon == 0 || self.seeds.is_empty() {
            return Err(Error::config("dim, horizon and seeds must be nonempty"));
        }
        if matches!(self.eta, Some(e) if !(e > 0.0)) {
            return Err(Error::config("eta must be positive"));
        }
        Ok(())
    }

    /// Right-hand side of the regret bound for the given bias magnitudes.
    pub fn bound(&self, bias_norm_sum: f64) -> RegretBound {
        let (k, m, t, eta) = (self.k_bound(), self.m_bound(), self.horizon as f64, self.step());
        RegretBound {
            step_term: eta * k / 2.0,
            radius_term: m / (t * eta),
            concentration_term: 8.0 * k * (m * (1.0 / self.delta).ln() / t).sqrt(),
            bias_term: 2.0 * (2.0 * m).sqrt() / t * bias_norm_sum,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegretBound {
    pub step_term: f64,
    pub radius_term: f64,
    pub concentration_term: f64,
    pub bias_term: f64,
}

impl RegretBound {
    pub fn total(&self) -> f64 {
        self.step_term + self.radius_term + self.concentration_term + self.bias_term
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegretRow {
    pub seed: u64,
    pub regret: f64,
    pub bound: f64,
    pub violated: bool,
    pub max_update_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegretReport {
    pub rows: Vec<RegretRow>,
    pub terms: RegretBound,
    pub violations: usize,
    pub pass: bool,
}

fn random_quadratic(rng: &mut Stream, spec: &RegretSpec) -> (DMatrix<f64>, DVector<f64>) {
    let d = spec.dim;
    let g = DMatrix::from_fn(d, d, |_, _| rng.gaussian());
    let q = g.qr().q();
    let eig = DVector::from_fn(d, |_, _| rng.uniform_range(spec.eig_min, spec.eig_max));
    let qm = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    let qm = (&qm + qm.transpose()) * 0.5;
    let c = DVector::from_vec(rng.uniform_ball(d, spec.center_scale));
    (qm, c)
}

fn project_ball(x: &mut DVector<f64>, radius: f64) {
    let n = x.norm();
    if n > radius {
        *x *= radius / n;
    }
}

/// Minimizer of `x' P x / 2 - q' x` over `||x|| <= radius` for `P` positive definite.
pub fn ball_quadratic_min(p: &DMatrix<f64>, q: &DVector<f64>, radius: f64) -> DVector<f64> {
    let eig = SymmetricEigen::new(p.clone());
    let qt = eig.eigenvectors.transpose() * q;
    let sol = |lam: f64| -> DVector<f64> {
        DVector::from_fn(qt.len(), |i, _| qt[i] / (eig.eigenvalues[i] + lam))
    };
    let free = sol(0.0);
    if free.norm() <= radius {
        return &eig.eigenvectors * free;
    }
    // ||x(lam)|| decreases in lam; bracket then bisect
    let (mut lo, mut hi) = (0.0, 1.0);
    while sol(hi).norm() > radius {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sol(mid).norm() > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = &eig.eigenvectors * sol(hi);
    project_ball(&mut x, radius);
    x
}

/// One seeded run; returns `(average regret, sum ||xi_t||, max ||zeta_t + xi_t||)`.
pub fn regret_run(spec: &RegretSpec, seed: u64) -> Result<(f64, f64, f64)> {
    spec.validate()?;
    let d = spec.dim;
    let eta = spec.step();
    let mut rng = Stream::new(seed, 40);
    let mut bias_dir = DVector::from_vec(rng.unit_sphere(d));
    bias_dir *= spec.bias;
    let mut x = DVector::zeros(d);
    let mut p_sum = DMatrix::zeros(d, d);
    let mut q_sum = DVector::zeros(d);
    let mut const_sum = 0.0;
    let mut loss_sum = 0.0;
    let mut bias_sum = 0.0;
    let mut max_update = 0.0f64;
    for _ in 0..spec.horizon {
        let (q, c) = random_quadratic(&mut rng, spec);
        let diff = &x - &c;
        let qd = &q * &diff;
        loss_sum += 0.5 * diff.dot(&qd);
        let qc = &q * &c;
        p_sum += &q;
        q_sum += &qc;
        const_sum += 0.5 * c.dot(&qc);
        let noise = DVector::from_vec(rng.uniform_ball(d, spec.noise_scale));
        let update = qd + noise + &bias_dir;
        max_update = max_update.max(update.norm());
        bias_sum += bias_dir.norm();
        x -= eta * update;
        project_ball(&mut x, spec.radius);
    }
    let xs = ball_quadratic_min(&p_sum, &q_sum, spec.radius);
    let best = 0.5 * xs.dot(&(&p_sum * &xs)) - q_sum.dot(&xs) + const_sum;
    let t = spec.horizon as f64;
    Ok(((loss_sum - best) / t, bias_sum, max_update))
}

pub fn regret_harness(spec: &RegretSpec) -> Result<RegretReport> {
    spec.validate()?;
    let runs: Vec<(f64, f64, f64)> = spec
        .seeds
        .par_iter()
        .map(|&s| regret_run(spec, s))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(runs.len());
    for (&seed, &(regret, bias_sum, max_update)) in spec.seeds.iter().zip(&runs) {
        let bound = spec.bound(bias_sum).total();
        rows.push(RegretRow {
            seed,
            regret,
            bound,
            violated: regret > bound,
            max_update_norm: max_update,
        });
    }
    let violations = rows.iter().filter(|r| r.violated).count();
    Ok(RegretReport {
        terms: spec.bound(spec.bias * spec.horizon as f64),
        pass: violations <= spec.max_violations,
        violations,
        rows,
    })
}

// ----------------------------------------------------------- decomposition

/// Linearization data of one network at every point of a frozen batch.
struct LinearCache {
    values: Vec<f64>,
    grads: Vec<Vec<f64>>,
    init: Vec<f64>,
}

impl LinearCache {
    fn new(state: &NetworkState, points: &[&[f64]]) -> Result<Self> {
        let mut values = Vec::with_capacity(points.len());
        let mut grads = Vec::with_capacity(points.len());
        for x in points {
            let (v, g) = state.linearization_at(x)?;
            values.push(v);
            grads.push(g);
        }
        Ok(Self {
            values,
            grads,
            init: state.init_weights().to_vec(),
        })
    }

    fn eval(&self, k: usize, w: &[f64]) -> f64 {
        let g = &self.grads[k];
        self.values[k]
            + g.iter()
                .zip(w.iter().zip(&self.init))
                .map(|(g, (a, b))| g * (a - b))
                .sum::<f64>()
    }
}

/// Batch-mean payoff with both players replaced by their linearizations.
struct LinearGame<'a> {
    batch: &'a [Sample],
    f: LinearCache,
    u: LinearCache,
    /// Offsets of each sample's evaluation points in the `f` cache.
    offsets: Vec<usize>,
    alpha: f64,
}

impl<'a> LinearGame<'a> {
    fn new(batch: &'a [Sample], theta: &NetworkState, omega: &NetworkState, alpha: f64) -> Result<Self> {
        let mut pts: Vec<&[f64]> = Vec::new();
        let mut offsets = Vec::with_capacity(batch.len());
        for s in batch {
            offsets.push(pts.len());
            pts.extend(s.eval_points.iter().map(|p| p.point.as_slice()));
        }
        let inst: Vec<&[f64]> = batch.iter().map(|s| s.instrument.as_slice()).collect();
        Ok(Self {
            batch,
            f: LinearCache::new(theta, &pts)?,
            u: LinearCache::new(omega, &inst)?,
            offsets,
            alpha,
        })
    }

    fn payoff(&self, theta_w: &[f64], omega_w: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (k, s) in self.batch.iter().enumerate() {
            let u = self.u.eval(k, omega_w);
            let mut r = -s.b_tilde;
            let mut fr = 0.0;
            for (i, p) in s.eval_points.iter().enumerate() {
                let v = self.f.eval(self.offsets[k] + i, theta_w);
                r += p.coeff * v;
                if i == s.ridge_index {
                    fr = v;
                }
            }
            acc += r * u - 0.5 * u * u + 0.5 * self.alpha * fr * fr;
        }
        acc / self.batch.len() as f64
    }
}

fn batch_payoff(theta: &NetworkState, omega: &NetworkState, batch: &[Sample], alpha: f64) -> Result<f64> {
    crate::game::batch_payoff(theta, omega, batch, alpha)
}

/// The regret of the primal iterates against `comparator` on a frozen batch,
/// split into linearization gaps and the regret of the linearized game.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Decomposition {
    pub snapshots: usize,
    /// Mean of `phi_t(theta_t) - phi_t(theta)`.
    pub raw_regret: f64,
    /// Mean of `phi_t(theta_t) - phi^_t(theta_t)`.
    pub gap_at_iterates: f64,
    /// Mean of `phi^_t(theta_t) - phi^_t(theta)`.
    pub linear_regret: f64,
    /// Mean of `phi^_t(theta) - phi_t(theta)`.
    pub gap_at_comparator: f64,
    /// `|sum of the three terms - raw regret|`.
    pub identity_error: f64,
}

impl Decomposition {
    pub fn holds(&self, tol: f64) -> bool {
        self.identity_error <= tol
    }
}

pub fn decomposition_report(
    trace: &TrainTrace,
    batch: &[Sample],
    comparator: &NetworkState,
    alpha: f64,
) -> Result<Decomposition> {
    if trace.theta_snapshots.is_empty() || trace.omega_snapshots.len() != trace.theta_snapshots.len() {
        return Err(Error::EmptySnapshots);
    }
    if batch.is_empty() {
        return Err(Error::Shape("frozen batch is empty".into()));
    }
    let lin = LinearGame::new(batch, &trace.theta_snapshots[0], &trace.omega_snapshots[0], alpha)?;
    let n = trace.theta_snapshots.len() as f64;
    let (mut raw, mut t16, mut t17, mut t16c) = (0.0, 0.0, 0.0, 0.0);
    for (th, om) in trace.theta_snapshots.iter().zip(&trace.omega_snapshots) {
        let phi_it = batch_payoff(th, om, batch, alpha)?;
        let phi_cmp = batch_payoff(comparator, om, batch, alpha)?;
        let hat_it = lin.payoff(th.weights(), om.weights());
        let hat_cmp = lin.payoff(comparator.weights(), om.weights());
        raw += phi_it - phi_cmp;
        t16 += phi_it - hat_it;
        t17 += hat_it - hat_cmp;
        t16c += hat_cmp - phi_cmp;
    }
    let (raw, t16, t17, t16c) = (raw / n, t16 / n, t17 / n, t16c / n);
    Ok(Decomposition {
        snapshots: trace.theta_snapshots.len(),
        raw_regret: raw,
        gap_at_iterates: t16,
        linear_regret: t17,
        gap_at_comparator: t16c,
        identity_error: (t16 + t17 + t16c - raw).abs(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionSpec {
    pub instance: Instance,
    pub net: NetSpec,
    pub widths: Vec<usize>,
    pub iterations: usize,
    pub alpha: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Stride-1 run per width, decomposed against the final primal iterate on
/// a fresh frozen batch.
pub fn decomposition_experiment(spec: &DecompositionSpec) -> Result<Vec<(usize, Decomposition)>> {
    if spec.widths.is_empty() || spec.batch_size == 0 {
        return Err(Error::config("widths and batch_size must be nonempty"));
    }
    let design = spec.instance.design(None)?;
    let batch: Vec<Sample> = DiscreteStream::new(&design, mix(&[spec.seed, 4]))?
        .take(spec.batch_size)
        .collect();
    spec.widths
        .par_iter()
        .map(|&m| {
            let mut game = GameConfig::new(spec.alpha, spec.eta, spec.iterations).with_stride(1);
            game.seed = spec.seed;
            let trace = train_discrete(&design, &spec.net, m, &game)?;
            let report = decomposition_report(&trace, &batch, &trace.theta, spec.alpha)?;
            Ok((m, report))
        })
        .collect()
}

// --------------------------------------------------------------------- GMM

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GmmValue {
    pub value: f64,
    /// Moment violations `mean(r h_j)`.
    pub psi: Vec<f64>,
    /// Diagonal shift added to a singular second-moment matrix (0 if none).
    pub ridge: f64,
}

/// Residuals `sum_k c_k g(x_k) - b~`.
pub fn residuals<E: Estimator + ?Sized>(g: &E, samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let mut r = -s.b_tilde;
            for p in &s.eval_points {
                r += p.coeff * g.eval(&p.point)?;
            }
            Ok(r)
        })
        .collect()
}

fn moment_design(samples: &[Sample], tests: &[TestFunction]) -> Result<DMatrix<f64>> {
    let d = samples[0].dim();
    for t in tests {
        if let TestFunction::Coord(k) | TestFunction::CoordSq(k) | TestFunction::Power(k, _) = *t {
            if k >= d {
                return Err(Error::DimensionMismatch { expected: k + 1, got: d });
            }
        }
    }
    Ok(DMatrix::from_fn(samples.len(), tests.len(), |i, j| tests[j].eval(&samples[i].instrument)))
}

/// `J = psi' Lambda^{-1} psi / 2` with `psi = mean(r h)` and `Lambda = mean(h h')`.
pub fn gmm_objective<E: Estimator + ?Sized>(
    g: &E,
    tests: &[TestFunction],
    samples: &[Sample],
) -> Result<GmmValue> {
    if tests.is_empty() || samples.is_empty() {
        return Err(Error::config("need at least one test function and one sample"));
    }
    let r = DVector::from_vec(residuals(g, samples)?);
    gmm_from_residuals(&r, tests, samples)
}

pub fn gmm_from_residuals(r: &DVector<f64>, tests: &[TestFunction], samples: &[Sample]) -> Result<GmmValue> {
    let h = moment_design(samples, tests)?;
    let n = samples.len() as f64;
    let psi = h.tr_mul(r) / n;
    let mut lambda = h.tr_mul(&h) / n;
    let mut ridge = 0.0;
    let chol = match lambda.clone().cholesky() {
        Some(c) if c.l().diagonal().iter().all(|v| *v > 1e-7 * lambda.trace().sqrt()) => c,
        _ => {
            ridge = 1e-10 * lambda.trace() / tests.len() as f64;
            for i in 0..tests.len() {
                lambda[(i, i)] += ridge;
            }
            lambda.clone().cholesky().ok_or(Error::SingularMatrix)?
        }
    };
    let sol = chol.solve(&psi);
    Ok(GmmValue {
        value: 0.5 * psi.dot(&sol),
        psi: psi.as_slice().to_vec(),
        ridge,
    })
}

/// Adversary value `mean(r u - u^2 / 2)` for `u = sum_j a_j h_j`.
pub fn gmm_inner(r: &[f64], coeffs: &[f64], tests: &[TestFunction], samples: &[Sample]) -> f64 {
    let mut acc = 0.0;
    for (ri, s) in r.iter().zip(samples) {
        let u: f64 = coeffs.iter().zip(tests).map(|(a, t)| a * t.eval(&s.instrument)).sum();
        acc += ri * u - 0.5 * u * u;
    }
    acc / samples.len() as f64
}

/// Maximizes [`gmm_inner`] over the coefficients by conjugate gradients on
/// the sample-level gradient `mean((r - u) h)`. Returns `(max value, coeffs)`.
pub fn gmm_direct_max(r: &[f64], tests: &[TestFunction], samples: &[Sample]) -> (f64, Vec<f64>) {
    let m = tests.len();
    let n = samples.len() as f64;
    let hv: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| tests.iter().map(|t| t.eval(&s.instrument)).collect())
        .collect();
    let grad = |a: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; m];
        for (ri, h) in r.iter().zip(&hv) {
            let e = ri - dot(a, h);
            for (gj, hj) in g.iter_mut().zip(h) {
                *gj += e * hj / n;
            }
        }
        g
    };
    // Hessian-vector product: -mean(h h') p
    let curv = |p: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; m];
        for h in &hv {
            let s = dot(p, h);
            for (o, hj) in out.iter_mut().zip(h) {
                *o += s * hj / n;
            }
        }
        out
    };
    let mut a = vec![0.0; m];
    let mut g = grad(&a);
    let mut p = g.clone();
    for _ in 0..(4 * m + 10) {
        let gg = dot(&g, &g);
        if gg.sqrt() < 1e-15 {
            break;
        }
        let cp = curv(&p);
        let denom = dot(&p, &cp);
        if denom <= 0.0 {
            break;
        }
        let step = gg / denom;
        a.iter_mut().zip(&p).for_each(|(ai, pi)| *ai += step * pi);
        // recompute the residual from samples to avoid drift
        let g_new = grad(&a);
        let beta = dot(&g_new, &g_new) / gg;
        p = g_new.iter().zip(&p).map(|(gn, pi)| gn + beta * pi).collect();
        g = g_new;
    }
    (gmm_inner(r, &a, tests, samples), a)
}

// ------------------------------------------------------------------- audit

/// Away-from-kink threshold for audit probes.
pub const KINK_MARGIN: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRow {
    pub arch: String,
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub probes: usize,
    pub resampled: usize,
    pub max_rel_err_network: f64,
    pub max_rel_err_theta: f64,
    pub max_rel_err_omega: f64,
}

impl AuditRow {
    pub fn max_error(&self) -> f64 {
        self.max_rel_err_network
            .max(self.max_rel_err_theta)
            .max(self.max_rel_err_omega)
    }
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale.max(1e-12)
    }
}

/// Central differences of `f` at `w` along every coordinate.
pub fn finite_difference<F: Fn(&[f64]) -> Result<f64>>(f: F, w: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut x = w.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x)?;
        x[i] = orig - h;
        let down = f(&x)?;
        x[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

fn displaced(cfg: NetConfig, seed: u64, rng: &mut Stream) -> Result<NetworkState> {
    let s = NetworkState::init(cfg, seed)?;
    let block = match cfg {
        NetConfig::TwoLayer(_) => s.num_params(),
        NetConfig::MultiLayer(c) => c.width * c.width,
    };
    let mut w = s.init_weights().to_vec();
    for chunk in w.chunks_mut(block) {
        let d = rng.uniform_ball(chunk.len(), cfg.radius());
        chunk.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    s.with_weights(w)
}

fn kink_free(s: &NetworkState, pts: &[&[f64]]) -> Result<bool> {
    for x in pts {
        if s.pre_activations(x)?.iter().any(|z| z.abs() <= KINK_MARGIN) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Compares the analytic network and payoff gradients against central
/// differences on `n_probes` random kink-free probes per configuration.
pub fn gradient_audit(configs: &[NetConfig], n_probes: usize, alpha: f64, seed: u64) -> Result<Vec<AuditRow>> {
    configs
        .par_iter()
        .enumerate()
        .map(|(ci, &cfg)| audit_config(cfg, n_probes, alpha, mix(&[seed, ci as u64])))
        .collect()
}

fn audit_config(cfg: NetConfig, n_probes: usize, alpha: f64, seed: u64) -> Result<AuditRow> {
    cfg.validate()?;
    let d = cfg.input_dim();
    let mut rng = Stream::new(seed, 50);
    let (mut e_net, mut e_theta, mut e_omega) = (0.0f64, 0.0f64, 0.0f64);
    let mut resampled = 0;
    let mut done = 0;
    while done < n_probes {
        if resampled > 1000 * n_probes.max(1) {
            return Err(Error::Invariant("could not draw kink-free probes".into()));
        }
        let theta = displaced(cfg, rng.next_u64(), &mut rng)?;
        let omega = displaced(cfg, rng.next_u64(), &mut rng)?;
        let x1 = rng.uniform_ball(d, 1.0);
        let x1b = rng.uniform_ball(d, 1.0);
        let x2 = rng.uniform_ball(d, 1.0);
        if !kink_free(&theta, &[&x1, &x1b])? || !kink_free(&omega, &[&x2])? {
            resampled += 1;
            continue;
        }
        let sample = Sample::new(
            vec![
                crate::game::EvalPoint { coeff: 1.0, point: x1.clone() },
                crate::game::EvalPoint { coeff: -0.5, point: x1b },
            ],
            x2,
            rng.uniform_range(-1.0, 1.0),
            0,
        )?;
        let g = theta.gradient(&x1)?;
        let fd = finite_difference(|w| theta.with_weights(w.to_vec())?.forward(&x1), theta.weights(), FD_STEP)?;
        e_net = e_net.max(relative_error(&g, &fd));
        let g = grad_theta(&theta, &omega, &sample, alpha)?;
        let fd = finite_difference(
            |w| payoff(&theta.with_weights(w.to_vec())?, &omega, &sample, alpha),
            theta.weights(),
            FD_STEP,
        )?;
        e_theta = e_theta.max(relative_error(&g, &fd));
        let g = grad_omega(&theta, &omega, &sample, alpha)?;
        let fd = finite_difference(
            |w| payoff(&theta, &omega.with_weights(w.to_vec())?, &sample, alpha),
            omega.weights(),
            FD_STEP,
        )?;
        e_omega = e_omega.max(relative_error(&g, &fd));
        done += 1;
    }
    let (width, depth) = match cfg {
        NetConfig::TwoLayer(c) => (c.width, 1),
        NetConfig::MultiLayer(c) => (c.width, c.depth),
    };
    Ok(AuditRow {
        arch: match cfg.arch() {
            Arch::TwoLayer => "two_layer".into(),
            Arch::MultiLayer => "multi_layer".into(),
        },
        input_dim: d,
        width,
        depth,
        probes: n_probes,
        resampled,
        max_rel_err_network: e_net,
        max_rel_err_theta: e_theta,
        max_rel_err_omega: e_omega,
    })
}

/// Singular values of the instance, for decay plots.
pub fn spectrum(instance: &Instance) -> Result<Vec<f64>> {
    Ok(svd_system(&instance.design(None)?.operator()?)?.values)
}
