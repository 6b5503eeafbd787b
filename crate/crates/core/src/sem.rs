//! Seeded synthetic data for the worked examples.
//!
//! Every generator emits [`Sample`]s whose points have Euclidean norm at
//! most one. Noise terms are Gaussians truncated at three scales, so `b~` is
//! bounded.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{EvalPoint, Sample};
use crate::io::fmt_f64;
use crate::oracle::{make_beta_regular_truth, svd_system, DiscretizedOperator};
use crate::rng::Stream;

/// Truncation level of all noise draws, in units of the noise scale.
pub const TRUNCATION: f64 = 3.0;
/// Periods simulated and discarded before a panel is recorded.
pub const BURN_IN: usize = 50;

fn noise(rng: &mut Stream, scale: f64) -> f64 {
    if scale == 0.0 {
        0.0
    } else {
        rng.truncated_normal(scale, TRUNCATION)
    }
}

fn check_scale(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be nonnegative and finite")))
    }
}

/// Scalar link applied to the coordinate sum of its input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Link {
    Linear { slope: f64, intercept: f64 },
    Sigmoid { scale: f64 },
    Sine { freq: f64 },
}

impl Link {
    pub fn eval_scalar(&self, s: f64) -> f64 {
        match *self {
            Link::Linear { slope, intercept } => slope * s + intercept,
            Link::Sigmoid { scale } => 1.0 / (1.0 + (-scale * s).exp()),
            Link::Sine { freq } => (freq * s).sin(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_scalar(x.iter().sum())
    }

    /// Bound on `|g|` when the coordinate sum lies in `[-r, r]`.
    pub fn bound(&self, r: f64) -> f64 {
        match *self {
            Link::Linear { slope, intercept } => slope.abs() * r + intercept.abs(),
            Link::Sigmoid { .. } => 1.0,
            Link::Sine { .. } => 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Link::Linear { slope, intercept } => slope.is_finite() && intercept.is_finite(),
            Link::Sigmoid { scale } => scale.is_finite(),
            Link::Sine { freq } => freq.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("link parameters must be finite"))
        }
    }
}

/// Nonparametric IV design: `Y = g0(X) + e + nu` with confounder `e`
/// entering `X` and instrument `Z` independent of `(e, nu)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IvDesign {
    pub g0: Link,
    pub rho: f64,
    pub confounder_scale: f64,
    pub noise_scale: f64,
    pub dim: usize,
}

impl Default for IvDesign {
    fn default() -> Self {
        Self {
            g0: Link::Sine { freq: 2.0 },
            rho: 0.5,
            confounder_scale: 0.1,
            noise_scale: 0.1,
            dim: 1,
        }
    }
}

impl IvDesign {
    pub fn validate(&self) -> Result<()> {
        self.g0.validate()?;
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config("rho must lie in [0, 1]"));
        }
        check_scale("confounder_scale", self.confounder_scale)?;
        check_scale("noise_scale", self.noise_scale)?;
        if self.dim == 0 {
            return Err(Error::config("dim must be at least 1"));
        }
        Ok(())
    }

    pub fn truth(&self, x: &[f64]) -> f64 {
        self.g0.eval(x)
    }
}

/// IV samples: eval point `X`, instrument `Z`, `b~ = Y`.
pub fn gen_iv(design: &IvDesign, n: usize, seed: u64) -> Result<Vec<Sample>> {
    design.validate()?;
    if n == 0 {
        return Err(Error::config("n must be at least 1"));
    }
    let d = design.dim;
    let inv = 1.0 / (d as f64).sqrt();
    let mix = (1.0 - design.rho * design.rho).sqrt();
    let mut rng = Stream::new(seed, 10);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let e = noise(&mut rng, design.confounder_scale);
        let nu = noise(&mut rng, design.noise_scale);
        let x: Vec<f64> = u
            .iter()
            .map(|uk| (design.rho * uk + mix * e).tanh() * inv)
            .collect();
        let z: Vec<f64> = u.iter().map(|uk| uk * inv).collect();
        let y = design.truth(&x) + e + nu;
        out.push(Sample::single(x, z, y));
    }
    Ok(out)
}

/// Panel structural function `m(y, x) = rho * y + g(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelFn {
    pub rho: f64,
    pub g: Link,
}

impl PanelFn {
    pub fn eval(&self, y: f64, x: &[f64]) -> f64 {
        self.rho * y + self.g.eval(x)
    }
}

/// Dynamic panel `Y_it = m(Y_{i,t-1}, X_it) + alpha_i + eps_it`.
///
/// Points are `U = (Y, X) / scale` where `scale` (see [`PanelDesign::point_scale`])
/// bounds `||(Y, X)||`, so the structural function in point coordinates is
/// `f(v) = m(scale * v)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelDesign {
    pub m_true: PanelFn,
    pub fixed_effect_scale: f64,
    pub noise_scale: f64,
    pub n_units: usize,
    pub t_periods: usize,
    /// Dimension of the exogenous regressor `X`.
    pub x_dim: usize,
}

impl Default for PanelDesign {
    fn default() -> Self {
        Self {
            m_true: PanelFn {
                rho: 0.5,
                g: Link::Sine { freq: 1.0 },
            },
            fixed_effect_scale: 1.0,
            noise_scale: 0.1,
            n_units: 1000,
            t_periods: 5,
            x_dim: 1,
        }
    }
}

impl PanelDesign {
    pub fn validate(&self) -> Result<()> {
        self.m_true.g.validate()?;
        if !(0.0..1.0).contains(&self.m_true.rho.abs()) {
            return Err(Error::config("panel rho must satisfy |rho| < 1"));
        }
        check_scale("fixed_effect_scale", self.fixed_effect_scale)?;
        check_scale("noise_scale", self.noise_scale)?;
        if self.n_units == 0 {
            return Err(Error::config("n_units must be at least 1"));
        }
        if self.t_periods < 3 {
            return Err(Error::config("t_periods must be at least 3"));
        }
        if self.x_dim == 0 {
            return Err(Error::config("x_dim must be at least 1"));
        }
        Ok(())
    }

    /// Bound on `||(Y, X)||` over all simulated periods.
    pub fn point_scale(&self) -> f64 {
        let r = 1.0 - self.m_true.rho.abs();
        let g = self.m_true.g.bound(self.x_dim as f64);
        let y = (TRUNCATION * self.fixed_effect_scale + g + TRUNCATION * self.noise_scale) / r;
        (y * y + self.x_dim as f64).sqrt()
    }

    /// Structural function in point coordinates.
    pub fn truth(&self, v: &[f64]) -> f64 {
        let s = self.point_scale();
        let x: Vec<f64> = v[1..].iter().map(|c| c * s).collect();
        self.m_true.eval(v[0] * s, &x)
    }

    pub fn point_dim(&self) -> usize {
        1 + self.x_dim
    }
}

/// First-differenced panel samples, `N * (T - 2)` of them.
///
/// Each unit is simulated in deviation form `Y = alpha_i / (1 - rho) + Y~`,
/// so `b~ = Delta Y~` never touches the fixed effect. Fixed effects and the
/// remaining randomness use separate streams.
pub fn gen_panel(design: &PanelDesign, seed: u64) -> Result<Vec<Sample>> {
    design.validate()?;
    let rho = design.m_true.rho;
    let dx = design.x_dim;
    let scale = design.point_scale();
    let periods = design.t_periods;
    let mut fe_rng = Stream::new(seed, 20);
    let mut rng = Stream::new(seed, 21);
    let mut out = Vec::with_capacity(design.n_units * (periods - 2));
    for _ in 0..design.n_units {
        let alpha = noise(&mut fe_rng, design.fixed_effect_scale);
        let mu = alpha / (1.0 - rho);
        let mut dev = 0.0;
        let mut ys = Vec::with_capacity(periods);
        let mut xs = Vec::with_capacity(periods);
        for t in 0..BURN_IN + periods {
            let x: Vec<f64> = (0..dx).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let eps = noise(&mut rng, design.noise_scale);
            dev = rho * dev + design.m_true.g.eval(&x) + eps;
            if t >= BURN_IN {
                ys.push(dev);
                xs.push(x);
            }
        }
        // U_s = (Y_s, X_{s+1}); the sample at t uses U_{t-1}, U_{t-2}
        let point = |s: usize| -> Vec<f64> {
            let mut p = Vec::with_capacity(1 + dx);
            p.push((mu + ys[s]) / scale);
            p.extend(xs[s + 1].iter().map(|c| c / scale));
            p
        };
        for t in 2..periods {
            let b = ys[t] - ys[t - 1];
            let u1 = point(t - 1);
            let u2 = point(t - 2);
            out.push(Sample {
                eval_points: vec![
                    EvalPoint { coeff: 1.0, point: u1 },
                    EvalPoint { coeff: -1.0, point: u2.clone() },
                ],
                instrument: u2,
                b_tilde: b,
                ridge_index: 0,
            });
        }
    }
    Ok(out)
}

/// Finite design with exactly known conditional expectation operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteDesign {
    /// `K2 x K1`, `joint_pmf[j][i] = P(X2 = j, X1 = i)`.
    pub joint_pmf: Vec<Vec<f64>>,
    pub x1_grid: Vec<Vec<f64>>,
    pub x2_grid: Vec<Vec<f64>>,
    pub f_true: Vec<f64>,
    #[serde(default)]
    pub noise_scale: f64,
}

impl DiscreteDesign {
    pub fn operator(&self) -> Result<DiscretizedOperator> {
        DiscretizedOperator::from_pmf(&self.joint_pmf, self.x1_grid.clone(), self.x2_grid.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let op = self.operator()?;
        Error::check_dim(op.k1(), self.f_true.len())?;
        check_scale("noise_scale", self.noise_scale)?;
        Ok(())
    }

    /// `b = A f_true`.
    pub fn rhs(&self) -> Result<Vec<f64>> {
        self.operator()?.apply(&self.f_true)
    }

    pub fn k1(&self) -> usize {
        self.f_true.len()
    }

    pub fn k2(&self) -> usize {
        self.joint_pmf.len()
    }
}

/// Draws `(i, j)` from the pmf and emits `b~ = f_true[i] + noise`.
pub fn gen_discrete(design: &DiscreteDesign, n: usize, seed: u64) -> Result<Vec<Sample>> {
    DiscreteStream::new(design, seed)?.take_checked(n)
}

/// Unbounded sample stream from a discrete design.
#[derive(Clone, Debug)]
pub struct DiscreteStream<'a> {
    design: &'a DiscreteDesign,
    cumulative: Vec<f64>,
    rng: Stream,
}

impl<'a> DiscreteStream<'a> {
    pub fn new(design: &'a DiscreteDesign, seed: u64) -> Result<Self> {
        design.validate()?;
        let mut acc = 0.0;
        let cumulative = design
            .joint_pmf
            .iter()
            .flatten()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self {
            design,
            cumulative,
            rng: Stream::new(seed, 30),
        })
    }

    fn take_checked(self, n: usize) -> Result<Vec<Sample>> {
        if n == 0 {
            return Err(Error::config("n must be at least 1"));
        }
        Ok(self.take(n).collect())
    }
}

impl Iterator for DiscreteStream<'_> {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        let k = self.rng.categorical(&self.cumulative);
        let k1 = self.design.k1();
        let (j, i) = (k / k1, k % k1);
        let b = self.design.f_true[i] + noise(&mut self.rng, self.design.noise_scale);
        Some(Sample::single(
            self.design.x1_grid[i].clone(),
            self.design.x2_grid[j].clone(),
            b,
        ))
    }
}

/// Parameters of the circular banded instances used by the experiments.
///
/// States sit at equally spaced angles on a circle. `X2` is uniform and
/// `X1 | X2 = j` is a wrapped Gaussian in the state index with standard
/// deviation `bandwidth` (in states). Each state embeds as
/// `(cos t, sin t, lift) / sqrt(1 + lift^2)`, padded with zeros up to
/// `embed_dim` coordinates. Padding leaves the network's tangent kernel
/// unchanged and shrinks the output at initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircularSpec {
    pub states: usize,
    pub bandwidth: f64,
    pub lift: f64,
    #[serde(default)]
    pub embed_dim: usize,
    pub beta: f64,
    pub coeff_norm: f64,
    pub noise_scale: f64,
    pub truth_seed: u64,
}

impl Default for CircularSpec {
    fn default() -> Self {
        Self {
            states: 20,
            bandwidth: 1.0,
            lift: 0.0,
            embed_dim: 0,
            beta: 1.0,
            coeff_norm: 1.0,
            noise_scale: 0.1,
            truth_seed: 0,
        }
    }
}

pub fn circular_grid(states: usize, lift: f64, embed_dim: usize) -> Vec<Vec<f64>> {
    let s = (1.0 + lift * lift).sqrt();
    (0..states)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / states as f64;
            let mut x = if lift == 0.0 {
                vec![t.cos(), t.sin()]
            } else {
                vec![t.cos() / s, t.sin() / s, lift / s]
            };
            if embed_dim > x.len() {
                x.resize(embed_dim, 0.0);
            }
            x
        })
        .collect()
}

pub fn circular_pmf(states: usize, bandwidth: f64) -> Vec<Vec<f64>> {
    let k = states as f64;
    (0..states)
        .map(|j| {
            let w: Vec<f64> = (0..states)
                .map(|i| {
                    let raw = (i as f64 - j as f64).abs();
                    let d = raw.min(k - raw);
                    (-0.5 * d * d / (bandwidth * bandwidth)).exp()
                })
                .collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|v| v / (z * k)).collect()
        })
        .collect()
}

/// Circular instance whose truth is beta-regular for its own operator.
pub fn circular_design(spec: &CircularSpec) -> Result<DiscreteDesign> {
    if spec.states < 2 {
        return Err(Error::config("states must be at least 2"));
    }
    if !(spec.bandwidth > 0.0 && spec.bandwidth.is_finite()) {
        return Err(Error::config("bandwidth must be positive"));
    }
    let grid = circular_grid(spec.states, spec.lift, spec.embed_dim);
    let joint_pmf = circular_pmf(spec.states, spec.bandwidth);
    let op = DiscretizedOperator::from_pmf(&joint_pmf, grid.clone(), grid.clone())?;
    let sys = svd_system(&op)?;
    let f_true = make_beta_regular_truth(&sys, spec.beta, spec.coeff_norm, spec.truth_seed)?;
    let design = DiscreteDesign {
        joint_pmf,
        x1_grid: grid.clone(),
        x2_grid: grid,
        f_true,
        noise_scale: spec.noise_scale,
    };
    design.validate()?;
    Ok(design)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    One,
    /// `z_k` (0-based coordinate of the instrument).
    Coord(usize),
    /// `z_k^2`.
    CoordSq(usize),
    /// `z_k^p`.
    Power(usize, u32),
}

impl TestFunction {
    pub fn name(&self) -> String {
        match self {
            TestFunction::One => "one".into(),
            TestFunction::Coord(k) => format!("z{}", k + 1),
            TestFunction::CoordSq(k) => format!("z{}_sq", k + 1),
            TestFunction::Power(k, p) => format!("z{}_pow{p}", k + 1),
        }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        match *self {
            TestFunction::One => 1.0,
            TestFunction::Coord(k) => z[k],
            TestFunction::CoordSq(k) => z[k] * z[k],
            TestFunction::Power(k, p) => z[k].powi(p as i32),
        }
    }

    /// `{1, z1, z1^2}`.
    pub fn battery() -> Vec<TestFunction> {
        vec![TestFunction::One, TestFunction::Coord(0), TestFunction::CoordSq(0)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentRow {
    pub name: String,
    pub mean: f64,
    pub std_err: f64,
}

impl MomentRow {
    /// `|mean| <= k * std_err`.
    pub fn within(&self, k: f64) -> bool {
        self.mean.abs() <= k * self.std_err
    }
}

/// Mean and standard error of `eps * h(z)`, where
/// `eps = b~ - sum_k c_k truth(x_k)`.
pub fn moment_check<F>(samples: &[Sample], truth: F, tests: &[TestFunction]) -> Result<Vec<MomentRow>>
where
    F: Fn(&[f64]) -> f64,
{
    if samples.is_empty() {
        return Err(Error::Shape("no samples".into()));
    }
    let eps: Vec<f64> = samples
        .iter()
        .map(|s| s.b_tilde - s.eval_points.iter().map(|p| p.coeff * truth(&p.point)).sum::<f64>())
        .collect();
    let n = samples.len() as f64;
    let mut rows = Vec::with_capacity(tests.len());
    for h in tests {
        if let TestFunction::Coord(k) | TestFunction::CoordSq(k) | TestFunction::Power(k, _) = *h {
            if k >= samples[0].dim() {
                return Err(Error::DimensionMismatch { expected: k + 1, got: samples[0].dim() });
            }
        }
        let v: Vec<f64> = samples.iter().zip(&eps).map(|(s, e)| e * h.eval(&s.instrument)).collect();
        let mean = v.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        rows.push(MomentRow {
            name: h.name(),
            mean,
            std_err: (var / n).sqrt(),
        });
    }
    Ok(rows)
}

/// Writes samples as `n_points,c_1,x_1_1..,c_2,..,x2_1..,b_tilde`.
/// All samples must share the number of points and the dimension.
pub fn write_samples_csv<W: Write>(samples: &[Sample], mut w: W, comment: Option<&str>) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::Shape("no samples".into()))?;
    let (np, d) = (first.eval_points.len(), first.dim());
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let mut header = vec!["n_points".to_string()];
    for k in 1..=np {
        header.push(format!("c_{k}"));
        header.extend((1..=d).map(|l| format!("x_{k}_{l}")));
    }
    header.extend((1..=d).map(|l| format!("x2_{l}")));
    header.push("b_tilde".into());
    writeln!(w, "{}", header.join(","))?;
    for s in samples {
        if s.eval_points.len() != np || s.dim() != d {
            return Err(Error::Shape("samples differ in layout".into()));
        }
        let mut cells = vec![np.to_string()];
        for p in &s.eval_points {
            cells.push(fmt_f64(p.coeff));
            cells.extend(p.point.iter().map(|v| fmt_f64(*v)));
        }
        cells.extend(s.instrument.iter().map(|v| fmt_f64(*v)));
        cells.push(fmt_f64(s.b_tilde));
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Reads the format of [`write_samples_csv`]; comment lines start with `#`.
pub fn read_samples_csv<R: BufRead>(r: R) -> Result<Vec<Sample>> {
    let mut lines = r.lines();
    let header = loop {
        match lines.next() {
            Some(line) => {
                let line = line?;
                if !line.starts_with('#') && !line.trim().is_empty() {
                    break line;
                }
            }
            None => return Err(Error::Shape("missing header".into())),
        }
    };
    let cols: Vec<&str> = header.split(',').collect();
    let d = cols.iter().filter(|c| c.starts_with("x2_")).count();
    let np = cols.iter().filter(|c| c.starts_with("c_")).count();
    if d == 0 || np == 0 || cols.len() != 2 + np * (1 + d) + d {
        return Err(Error::Shape(format!("unrecognized sample header: {header}")));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Shape(format!("line {}: {e}", ln + 2)))?;
        if vals.len() != cols.len() || vals[0] as usize != np {
            return Err(Error::Shape(format!("line {}: wrong number of fields", ln + 2)));
        }
        let mut pos = 1;
        let mut pts = Vec::with_capacity(np);
        for _ in 0..np {
            pts.push(EvalPoint {
                coeff: vals[pos],
                point: vals[pos + 1..pos + 1 + d].to_vec(),
            });
            pos += 1 + d;
        }
        out.push(Sample::new(pts, vals[pos..pos + d].to_vec(), vals[pos + d], 0)?);
    }
    Ok(out)
}

/// Largest point norm across a batch.
pub fn max_norm(samples: &[Sample]) -> f64 {
    samples.iter().map(Sample::max_point_norm).fold(0.0, f64::max)
}
