//! ReLU network parametrizations.
//!
//! Two architectures share one state type:
//!
//! * 2-layer: `f(x) = m^{-1/2} * sum_r b_r * relu(W_r . x)` with fixed output
//!   signs `b_r` and trainable first-layer rows `W_r`, constrained to the ball
//!   `||W - W0||_2 <= B`.
//! * multi-layer: `x0 = A x`, `x_h = m^{-1/2} * relu(W_h x_{h-1})` for
//!   `h = 1..=H`, output `b . x_H`. Only the square middle layers are trained,
//!   each constrained to `||W_h - W_h(0)||_F <= B`.
//!
//! The ReLU subgradient at exactly zero is taken to be zero, so gradients use
//! the indicator `1{z > 0}`. Finite-difference checks must stay away from
//! kinks.

use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{l2_norm, mix, Stream};

/// Upper bound on the number of trainable weights, to reject absurd configs early.
pub const MAX_PARAMS: usize = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    TwoLayer,
    MultiLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoLayerConfig {
    pub input_dim: usize,
    pub width: usize,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepConfig {
    pub input_dim: usize,
    pub width: usize,
    /// Number of trained hidden layers `H`.
    pub depth: usize,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", content = "config", rename_all = "snake_case")]
pub enum NetConfig {
    TwoLayer(TwoLayerConfig),
    MultiLayer(DeepConfig),
}

impl NetConfig {
    pub fn two_layer(input_dim: usize, width: usize, radius: f64) -> Self {
        NetConfig::TwoLayer(TwoLayerConfig { input_dim, width, radius })
    }

    pub fn multi_layer(input_dim: usize, width: usize, depth: usize, radius: f64) -> Self {
        NetConfig::MultiLayer(DeepConfig { input_dim, width, depth, radius })
    }

    pub fn arch(&self) -> Arch {
        match self {
            NetConfig::TwoLayer(_) => Arch::TwoLayer,
            NetConfig::MultiLayer(_) => Arch::MultiLayer,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            NetConfig::TwoLayer(c) => c.input_dim,
            NetConfig::MultiLayer(c) => c.input_dim,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            NetConfig::TwoLayer(c) => c.width,
            NetConfig::MultiLayer(c) => c.width,
        }
    }

    pub fn radius(&self) -> f64 {
        match self {
            NetConfig::TwoLayer(c) => c.radius,
            NetConfig::MultiLayer(c) => c.radius,
        }
    }

    /// Same architecture with a different width.
    pub fn with_width(&self, width: usize) -> Self {
        match *self {
            NetConfig::TwoLayer(c) => NetConfig::TwoLayer(TwoLayerConfig { width, ..c }),
            NetConfig::MultiLayer(c) => NetConfig::MultiLayer(DeepConfig { width, ..c }),
        }
    }

    pub fn with_radius(&self, radius: f64) -> Self {
        match *self {
            NetConfig::TwoLayer(c) => NetConfig::TwoLayer(TwoLayerConfig { radius, ..c }),
            NetConfig::MultiLayer(c) => NetConfig::MultiLayer(DeepConfig { radius, ..c }),
        }
    }

    /// Number of trainable weights.
    pub fn num_params(&self) -> Result<usize> {
        let n = match self {
            NetConfig::TwoLayer(c) => c.width.checked_mul(c.input_dim),
            NetConfig::MultiLayer(c) => c
                .width
                .checked_mul(c.width)
                .and_then(|w2| w2.checked_mul(c.depth)),
        };
        match n {
            Some(n) if n <= MAX_PARAMS => Ok(n),
            _ => Err(Error::config("network size overflows the parameter limit")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let radius_ok = |r: f64| r.is_finite() && r > 0.0;
        match self {
            NetConfig::TwoLayer(c) => {
                if c.input_dim == 0 || c.width == 0 {
                    return Err(Error::config("input_dim and width must be positive"));
                }
                if !radius_ok(c.radius) {
                    return Err(Error::config("radius must be positive and finite"));
                }
            }
            NetConfig::MultiLayer(c) => {
                if c.input_dim == 0 || c.width == 0 || c.depth == 0 {
                    return Err(Error::config("input_dim, width and depth must be positive"));
                }
                if !radius_ok(c.radius) {
                    return Err(Error::config("radius must be positive and finite"));
                }
                if let Some(n) = c.width.checked_mul(c.input_dim) {
                    if n > MAX_PARAMS {
                        return Err(Error::config("input embedding too large"));
                    }
                } else {
                    return Err(Error::config("input embedding too large"));
                }
            }
        }
        self.num_params().map(|_| ())
    }

    /// Soft checks that do not block construction.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let NetConfig::MultiLayer(c) = self {
            // Radius order from the multi-layer width condition, constants unknown.
            let limit = (c.width as f64).sqrt() * (c.depth as f64).powi(-6);
            if c.radius > limit {
                out.push(format!(
                    "radius {} exceeds sqrt(m) * H^-6 = {:.3e}; linearization guarantees may not apply",
                    c.radius, limit
                ));
            }
        }
        out
    }
}

/// Initialization draws that never change during training.
#[derive(Debug, PartialEq)]
struct Frozen {
    init_weights: Vec<f64>,
    /// 2-layer output signs `b_r`.
    output_signs: Vec<f64>,
    /// Multi-layer input embedding `A`, `m x d` row-major.
    input_embed: Vec<f64>,
    /// Multi-layer output vector `b`.
    output_vec: Vec<f64>,
}

/// Weights of one network plus its frozen initialization.
///
/// Clones share the frozen part, so keeping many weight snapshots costs one
/// weight vector each.
#[derive(Clone, Debug)]
pub struct NetworkState {
    config: NetConfig,
    seed: u64,
    weights: Vec<f64>,
    frozen: Arc<Frozen>,
}

impl PartialEq for NetworkState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.seed == other.seed
            && self.weights == other.weights
            && (Arc::ptr_eq(&self.frozen, &other.frozen) || self.frozen == other.frozen)
    }
}

impl NetworkState {
    /// Draws a fresh initialization. `W` starts equal to `W0`.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        for w in config.warnings() {
            warn!("{w}");
        }
        let frozen = match config {
            NetConfig::TwoLayer(c) => {
                let mut signs = Stream::new(seed, 1);
                let output_signs = (0..c.width).map(|_| signs.sign()).collect();
                let mut draws = Stream::new(seed, 2);
                let std = (1.0 / c.input_dim as f64).sqrt();
                let init_weights = (0..c.width * c.input_dim)
                    .map(|_| draws.normal(0.0, std))
                    .collect();
                Frozen {
                    init_weights,
                    output_signs,
                    input_embed: Vec::new(),
                    output_vec: Vec::new(),
                }
            }
            NetConfig::MultiLayer(c) => {
                let std2 = 2f64.sqrt();
                let mut embed = Stream::new(seed, 3);
                let input_embed = (0..c.width * c.input_dim)
                    .map(|_| embed.normal(0.0, std2))
                    .collect();
                let mut layers = Stream::new(seed, 4);
                let init_weights = (0..c.depth * c.width * c.width)
                    .map(|_| layers.normal(0.0, std2))
                    .collect();
                let mut out = Stream::new(seed, 5);
                let output_vec = (0..c.width).map(|_| out.gaussian()).collect();
                Frozen {
                    init_weights,
                    output_signs: Vec::new(),
                    input_embed,
                    output_vec,
                }
            }
        };
        Ok(Self {
            config,
            seed,
            weights: frozen.init_weights.clone(),
            frozen: Arc::new(frozen),
        })
    }

    /// Same initialization, different trainable weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Error::check_dim(self.weights.len(), weights.len())?;
        Ok(Self {
            config: self.config,
            seed: self.seed,
            weights,
            frozen: Arc::clone(&self.frozen),
        })
    }

    /// Same initialization with `W` reset to `W0`.
    pub fn at_init(&self) -> Self {
        Self {
            config: self.config,
            seed: self.seed,
            weights: self.frozen.init_weights.clone(),
            frozen: Arc::clone(&self.frozen),
        }
    }

    /// Replaces the output signs of a 2-layer network. Intended for tests and
    /// hand-built examples; the result no longer matches its seed.
    pub fn with_output_signs(&self, signs: Vec<f64>) -> Result<Self> {
        if self.config.arch() != Arch::TwoLayer {
            return Err(Error::config("output signs exist only for 2-layer networks"));
        }
        Error::check_dim(self.frozen.output_signs.len(), signs.len())?;
        if signs.iter().any(|s| s.abs() != 1.0) {
            return Err(Error::config("output signs must be +1 or -1"));
        }
        Ok(Self {
            config: self.config,
            seed: self.seed,
            weights: self.weights.clone(),
            frozen: Arc::new(Frozen {
                init_weights: self.frozen.init_weights.clone(),
                output_signs: signs,
                input_embed: Vec::new(),
                output_vec: Vec::new(),
            }),
        })
    }

    /// Replaces both `W0` and `W`. Intended for tests and hand-built examples.
    pub fn with_init_weights(&self, init: Vec<f64>) -> Result<Self> {
        Error::check_dim(self.weights.len(), init.len())?;
        Ok(Self {
            config: self.config,
            seed: self.seed,
            weights: init.clone(),
            frozen: Arc::new(Frozen {
                init_weights: init,
                output_signs: self.frozen.output_signs.clone(),
                input_embed: self.frozen.input_embed.clone(),
                output_vec: self.frozen.output_vec.clone(),
            }),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.config.arch()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn init_weights(&self) -> &[f64] {
        &self.frozen.init_weights
    }

    pub fn output_signs(&self) -> Option<&[f64]> {
        match self.arch() {
            Arch::TwoLayer => Some(&self.frozen.output_signs),
            Arch::MultiLayer => None,
        }
    }

    pub fn input_embed(&self) -> Option<&[f64]> {
        match self.arch() {
            Arch::TwoLayer => None,
            Arch::MultiLayer => Some(&self.frozen.input_embed),
        }
    }

    pub fn output_vec(&self) -> Option<&[f64]> {
        match self.arch() {
            Arch::TwoLayer => None,
            Arch::MultiLayer => Some(&self.frozen.output_vec),
        }
    }

    /// `||W - W0||_2` over all trainable weights.
    pub fn distance_from_init(&self) -> f64 {
        distance(&self.weights, &self.frozen.init_weights)
    }

    /// Per-constraint distances: one entry for 2-layer, one per layer otherwise.
    pub fn constraint_distances(&self) -> Vec<f64> {
        match self.config {
            NetConfig::TwoLayer(_) => vec![self.distance_from_init()],
            NetConfig::MultiLayer(c) => {
                let block = c.width * c.width;
                self.weights
                    .chunks(block)
                    .zip(self.frozen.init_weights.chunks(block))
                    .map(|(w, w0)| distance(w, w0))
                    .collect()
            }
        }
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        let r = self.config.radius();
        self.constraint_distances().iter().all(|&d| d <= r * (1.0 + tol) + tol)
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.forward_with(&self.weights, x)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.weights.len()];
        self.accumulate_gradient_with(&self.weights, x, 1.0, &mut g)?;
        Ok(g)
    }

    /// Forward value and weight gradient in one pass.
    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; self.weights.len()];
        let v = self.accumulate_gradient_with(&self.weights, x, 1.0, &mut g)?;
        Ok((v, g))
    }

    /// Adds `scale * grad f(x)` into `out` and returns `f(x)`.
    pub fn accumulate_gradient(&self, x: &[f64], scale: f64, out: &mut [f64]) -> Result<f64> {
        self.accumulate_gradient_with(&self.weights, x, scale, out)
    }

    pub fn forward_at_init(&self, x: &[f64]) -> Result<f64> {
        self.forward_with(&self.frozen.init_weights, x)
    }

    pub fn gradient_at_init(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.weights.len()];
        self.accumulate_gradient_with(&self.frozen.init_weights, x, 1.0, &mut g)?;
        Ok(g)
    }

    /// First-order expansion around `W0`: `f(W0; x) + <grad f(W0; x), W - W0>`.
    pub fn linearized_forward(&self, x: &[f64]) -> Result<f64> {
        let (v0, g0) = self.linearization_at(x)?;
        Ok(v0 + linear_term(&g0, &self.weights, &self.frozen.init_weights))
    }

    /// Value and gradient at `W0`; together they define the linearized model at `x`.
    pub fn linearization_at(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut g0 = vec![0.0; self.weights.len()];
        let v0 = self.accumulate_gradient_with(&self.frozen.init_weights, x, 1.0, &mut g0)?;
        Ok((v0, g0))
    }

    /// Pre-activations of every hidden unit at the current weights, layer by layer.
    pub fn pre_activations(&self, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.input_dim(), x.len())?;
        match self.config {
            NetConfig::TwoLayer(c) => Ok(self
                .weights
                .chunks(c.input_dim)
                .map(|row| dot(row, x))
                .collect()),
            NetConfig::MultiLayer(c) => {
                let pass = self.deep_pass(&self.weights, &c, x);
                Ok(pass.pre.into_iter().flatten().collect())
            }
        }
    }

    /// Metric projection onto the feasible ball(s) around `W0`.
    pub fn project(&self) -> Self {
        let mut out = self.clone();
        out.project_in_place();
        out
    }

    pub fn project_in_place(&mut self) {
        let radius = self.config.radius();
        let block = match self.config {
            NetConfig::TwoLayer(_) => self.weights.len(),
            NetConfig::MultiLayer(c) => c.width * c.width,
        };
        let init = &self.frozen.init_weights;
        for (w, w0) in self.weights.chunks_mut(block).zip(init.chunks(block)) {
            let dist = distance(w, w0);
            // Points already on the sphere up to rounding are left untouched.
            if dist > radius * (1.0 + 1e-12) {
                let scale = radius / dist;
                for (wi, &w0i) in w.iter_mut().zip(w0) {
                    *wi = w0i + scale * (*wi - w0i);
                }
            }
        }
    }

    fn forward_with(&self, weights: &[f64], x: &[f64]) -> Result<f64> {
        Error::check_dim(self.input_dim(), x.len())?;
        Ok(match self.config {
            NetConfig::TwoLayer(c) => {
                let mut acc = 0.0;
                for (row, &b) in weights.chunks(c.input_dim).zip(&self.frozen.output_signs) {
                    let z = dot(row, x);
                    if z > 0.0 {
                        acc += b * z;
                    }
                }
                acc / (c.width as f64).sqrt()
            }
            NetConfig::MultiLayer(c) => self.deep_pass(weights, &c, x).output,
        })
    }

    fn accumulate_gradient_with(
        &self,
        weights: &[f64],
        x: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> Result<f64> {
        Error::check_dim(self.input_dim(), x.len())?;
        Error::check_dim(weights.len(), out.len())?;
        match self.config {
            NetConfig::TwoLayer(c) => {
                let d = c.input_dim;
                let inv_sqrt_m = 1.0 / (c.width as f64).sqrt();
                let mut acc = 0.0;
                for ((row, g), &b) in weights
                    .chunks(d)
                    .zip(out.chunks_mut(d))
                    .zip(&self.frozen.output_signs)
                {
                    let z = dot(row, x);
                    if z > 0.0 {
                        acc += b * z;
                        let s = scale * b * inv_sqrt_m;
                        for (gk, &xk) in g.iter_mut().zip(x) {
                            *gk += s * xk;
                        }
                    }
                }
                Ok(acc * inv_sqrt_m)
            }
            NetConfig::MultiLayer(c) => {
                let pass = self.deep_pass(weights, &c, x);
                let m = c.width;
                let inv_sqrt_m = 1.0 / (m as f64).sqrt();
                // upstream = d output / d x_h, starting from the output vector
                let mut upstream = self.frozen.output_vec.clone();
                let mut dz = vec![0.0; m];
                for h in (0..c.depth).rev() {
                    for k in 0..m {
                        dz[k] = if pass.pre[h][k] > 0.0 {
                            upstream[k] * inv_sqrt_m
                        } else {
                            0.0
                        };
                    }
                    let block = &mut out[h * m * m..(h + 1) * m * m];
                    let input = &pass.acts[h];
                    for (k, row) in block.chunks_mut(m).enumerate() {
                        let s = scale * dz[k];
                        if s != 0.0 {
                            for (gj, &xj) in row.iter_mut().zip(input) {
                                *gj += s * xj;
                            }
                        }
                    }
                    if h > 0 {
                        let w = &weights[h * m * m..(h + 1) * m * m];
                        upstream.iter_mut().for_each(|u| *u = 0.0);
                        for (k, row) in w.chunks(m).enumerate() {
                            if dz[k] != 0.0 {
                                for (uj, &wkj) in upstream.iter_mut().zip(row) {
                                    *uj += dz[k] * wkj;
                                }
                            }
                        }
                    }
                }
                Ok(pass.output)
            }
        }
    }

    fn deep_pass(&self, weights: &[f64], c: &DeepConfig, x: &[f64]) -> DeepPass {
        let m = c.width;
        let inv_sqrt_m = 1.0 / (m as f64).sqrt();
        let x0: Vec<f64> = self
            .frozen
            .input_embed
            .chunks(c.input_dim)
            .map(|row| dot(row, x))
            .collect();
        let mut acts = Vec::with_capacity(c.depth + 1);
        let mut pre = Vec::with_capacity(c.depth);
        acts.push(x0);
        for h in 0..c.depth {
            let w = &weights[h * m * m..(h + 1) * m * m];
            let input = &acts[h];
            let z: Vec<f64> = w.chunks(m).map(|row| dot(row, input)).collect();
            let a: Vec<f64> = z.iter().map(|&zk| inv_sqrt_m * zk.max(0.0)).collect();
            pre.push(z);
            acts.push(a);
        }
        let output = dot(&self.frozen.output_vec, &acts[c.depth]);
        DeepPass { acts, pre, output }
    }
}

struct DeepPass {
    /// `x_0 .. x_H`
    acts: Vec<Vec<f64>>,
    /// `W_h x_{h-1}` for `h = 1..=H`
    pre: Vec<Vec<f64>>,
    output: f64,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn linear_term(grad0: &[f64], w: &[f64], w0: &[f64]) -> f64 {
    grad0
        .iter()
        .zip(w.iter().zip(w0))
        .map(|(g, (a, b))| g * (a - b))
        .sum()
}

/// One row of a linearization-gap sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub width: usize,
    /// Monte Carlo estimate of `E |f(W; x) - f_lin(W; x)|^2`.
    pub mean_sq_value_gap: f64,
    /// Monte Carlo estimate of `E ||grad f(W; x) - grad f(W0; x)||^2`.
    pub mean_sq_grad_gap: f64,
    /// Monte Carlo estimate of `E ||grad f(W0; x)||^2`, the scale of the gradient gap.
    pub mean_sq_init_grad: f64,
}

/// Monte Carlo estimate of the local linearization error as the width grows.
///
/// For each width and draw: a fresh initialization from `factory(width,
/// init_seed)`, a displacement uniform in the feasible ball (per layer for
/// multi-layer nets), and an input uniform on the unit sphere.
pub fn linearization_gap<F>(
    factory: F,
    widths: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<GapRow>>
where
    F: Fn(usize, u64) -> Result<NetworkState> + Sync,
{
    if widths.is_empty() {
        return Err(Error::config("width grid must be nonempty"));
    }
    if widths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("width grid must be strictly increasing"));
    }
    if n_samples < 100 {
        return Err(Error::config("linearization gap needs at least 100 draws"));
    }
    let mut rows = Vec::with_capacity(widths.len());
    for &width in widths {
        let draws: Vec<(f64, f64, f64)> = (0..n_samples)
            .into_par_iter()
            .map(|k| gap_draw(&factory, width, k as u64, seed))
            .collect::<Result<_>>()?;
        let n = n_samples as f64;
        let (sv, sg, sn) = draws
            .iter()
            .fold((0.0, 0.0, 0.0), |(a, b, c), &(v, g, n)| (a + v, b + g, c + n));
        rows.push(GapRow {
            width,
            mean_sq_value_gap: sv / n,
            mean_sq_grad_gap: sg / n,
            mean_sq_init_grad: sn / n,
        });
    }
    Ok(rows)
}

fn gap_draw<F>(factory: &F, width: usize, k: u64, seed: u64) -> Result<(f64, f64, f64)>
where
    F: Fn(usize, u64) -> Result<NetworkState>,
{
    let init_seed = mix(&[seed, width as u64, k]);
    let state = factory(width, init_seed)?;
    let mut rng = Stream::derived(seed, &[width as u64, k, 1]);
    let radius = state.config().radius();
    let block = match state.config() {
        NetConfig::TwoLayer(_) => state.num_params(),
        NetConfig::MultiLayer(c) => c.width * c.width,
    };
    let mut w = state.init_weights().to_vec();
    for chunk in w.chunks_mut(block) {
        let delta = rng.uniform_ball(chunk.len(), radius);
        for (wi, di) in chunk.iter_mut().zip(delta) {
            *wi += di;
        }
    }
    let moved = state.with_weights(w)?;
    let x = rng.unit_sphere(state.input_dim());
    let (v, g) = moved.value_and_gradient(&x)?;
    let (v0, g0) = moved.linearization_at(&x)?;
    let lin = v0 + linear_term(&g0, moved.weights(), moved.init_weights());
    let grad_gap: f64 = g.iter().zip(&g0).map(|(a, b)| (a - b) * (a - b)).sum();
    let init_sq: f64 = g0.iter().map(|a| a * a).sum();
    Ok(((v - lin) * (v - lin), grad_gap, init_sq))
}

/// JSON document for a network: architecture, config, seed and `W`. `W0` and the
/// other frozen draws are re-derived from the seed on load.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateDoc {
    #[serde(flatten)]
    config: NetConfig,
    seed: u64,
    weights: Vec<f64>,
}

impl NetworkState {
    pub fn to_json(&self) -> Result<String> {
        let doc = StateDoc {
            config: self.config,
            seed: self.seed,
            weights: self.weights.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: StateDoc = serde_json::from_str(text)?;
        Self::init(doc.config, doc.seed)?.with_weights(doc.weights)
    }

    /// `W` as raw little-endian `f64`s.
    pub fn weights_to_le_bytes(&self) -> Vec<u8> {
        self.weights.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    /// Rebuilds a state from its config, seed and a raw little-endian blob.
    pub fn from_le_bytes(config: NetConfig, seed: u64, blob: &[u8]) -> Result<Self> {
        if blob.len() % 8 != 0 {
            return Err(Error::Shape("weight blob length is not a multiple of 8".into()));
        }
        let weights = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::init(config, seed)?.with_weights(weights)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    l2_norm(v)
}
