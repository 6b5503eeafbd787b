//! Exact finite-state reference for the operator equation `Af = b`.
//!
//! `A[j, i] = P(X1 = i | X2 = j)` maps functions on the `K1` states of `X1`
//! to functions on the `K2` states of `X2`. Both spaces carry the
//! probability-weighted inner products `<f, g> = sum_i w_i f_i g_i`, so the
//! adjoint is `(A* u)_i = sum_j P(X2 = j | X1 = i) u_j`.
//!
//! Linear algebra is done on the symmetrized matrix
//! `S = D2^{1/2} A D1^{-1/2}`, which is an isometric copy of `A` between
//! plain Euclidean spaces.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::Sample;
use crate::io::fmt_f64;
use crate::rng::Stream;

/// Two grid points closer than this are treated as the same state.
pub const GRID_MATCH_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedOperator {
    a: DMatrix<f64>,
    w1: DVector<f64>,
    w2: DVector<f64>,
    x1_grid: Vec<Vec<f64>>,
    x2_grid: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OperatorDoc {
    k1: usize,
    k2: usize,
    /// Row-major `K2 x K1`.
    matrix: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
    x1_grid: Vec<Vec<f64>>,
    x2_grid: Vec<Vec<f64>>,
}

fn check_grid(grid: &[Vec<f64>], k: usize, name: &str) -> Result<()> {
    Error::check_dim(k, grid.len())?;
    let d = grid.first().map(Vec::len).unwrap_or(0);
    for x in grid {
        Error::check_dim(d, x.len())?;
        if crate::nn::norm(x) > 1.0 + 1e-12 {
            return Err(Error::Shape(format!("{name} point with norm above 1")));
        }
    }
    Ok(())
}

/// Index of the grid point equal to `x` (within [`GRID_MATCH_TOL`]).
pub fn grid_index(grid: &[Vec<f64>], x: &[f64]) -> Option<usize> {
    grid.iter().position(|g| {
        g.len() == x.len() && g.iter().zip(x).all(|(a, b)| (a - b).abs() <= GRID_MATCH_TOL)
    })
}

impl DiscretizedOperator {
    /// Exact operator from a joint pmf given as a `K2 x K1` matrix with
    /// `joint[j][i] = P(X2 = j, X1 = i)`.
    pub fn from_pmf(
        joint: &[Vec<f64>],
        x1_grid: Vec<Vec<f64>>,
        x2_grid: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let k2 = joint.len();
        let k1 = joint.first().map(Vec::len).unwrap_or(0);
        if k1 == 0 || k2 == 0 {
            return Err(Error::InvalidPmf("empty pmf".into()));
        }
        let mut total = 0.0;
        for row in joint {
            if row.len() != k1 {
                return Err(Error::InvalidPmf("ragged pmf".into()));
            }
            for &p in row {
                if !(p >= 0.0 && p.is_finite()) {
                    return Err(Error::InvalidPmf(format!("invalid entry {p}")));
                }
                total += p;
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPmf(format!("total mass {total}")));
        }
        check_grid(&x1_grid, k1, "x1")?;
        check_grid(&x2_grid, k2, "x2")?;
        let mut a = DMatrix::zeros(k2, k1);
        let mut w1 = DVector::zeros(k1);
        let mut w2 = DVector::zeros(k2);
        for (j, row) in joint.iter().enumerate() {
            let mass: f64 = row.iter().sum();
            if mass <= 0.0 {
                return Err(Error::InvalidPmf(format!("x2 state {j} has zero probability")));
            }
            w2[j] = mass / total;
            for (i, &p) in row.iter().enumerate() {
                a[(j, i)] = p / mass;
                w1[i] += p / total;
            }
        }
        if let Some(i) = w1.iter().position(|&w| w <= 0.0) {
            return Err(Error::InvalidPmf(format!("x1 state {i} has zero probability")));
        }
        Ok(Self { a, w1, w2, x1_grid, x2_grid })
    }

    /// Empirical conditional frequencies from single-point samples whose
    /// points lie on the grids.
    pub fn from_samples(
        samples: &[Sample],
        x1_grid: Vec<Vec<f64>>,
        x2_grid: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let (k1, k2) = (x1_grid.len(), x2_grid.len());
        let mut counts = vec![vec![0.0; k1]; k2];
        for s in samples {
            if s.eval_points.len() != 1 {
                return Err(Error::Shape("empirical operator needs single-point samples".into()));
            }
            let i = grid_index(&x1_grid, &s.eval_points[0].point)
                .ok_or_else(|| Error::Shape("sample point not on the x1 grid".into()))?;
            let j = grid_index(&x2_grid, &s.instrument)
                .ok_or_else(|| Error::Shape("sample point not on the x2 grid".into()))?;
            counts[j][i] += 1.0;
        }
        if let Some(j) = counts.iter().position(|r| r.iter().sum::<f64>() == 0.0) {
            return Err(Error::EmptyCell(j));
        }
        let n = samples.len() as f64;
        for row in &mut counts {
            row.iter_mut().for_each(|c| *c /= n);
        }
        Self::from_pmf(&counts, x1_grid, x2_grid)
    }

    pub fn k1(&self) -> usize {
        self.a.ncols()
    }

    pub fn k2(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn w1(&self) -> &[f64] {
        self.w1.as_slice()
    }

    pub fn w2(&self) -> &[f64] {
        self.w2.as_slice()
    }

    pub fn x1_grid(&self) -> &[Vec<f64>] {
        &self.x1_grid
    }

    pub fn x2_grid(&self) -> &[Vec<f64>] {
        &self.x2_grid
    }

    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.k1(), f.len())?;
        Ok((&self.a * DVector::from_column_slice(f)).data.into())
    }

    pub fn adjoint(&self, u: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.k2(), u.len())?;
        let wu = DVector::from_iterator(self.k2(), u.iter().zip(self.w2.iter()).map(|(a, b)| a * b));
        let t = self.a.tr_mul(&wu);
        Ok(t.iter().zip(self.w1.iter()).map(|(v, w)| v / w).collect())
    }

    pub fn inner_h(&self, f: &[f64], g: &[f64]) -> Result<f64> {
        weighted_inner(self.w1.as_slice(), f, g)
    }

    pub fn inner_e(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        weighted_inner(self.w2.as_slice(), u, v)
    }

    pub fn norm_h(&self, f: &[f64]) -> Result<f64> {
        Ok(self.inner_h(f, f)?.sqrt())
    }

    pub fn norm_e(&self, u: &[f64]) -> Result<f64> {
        Ok(self.inner_e(u, u)?.sqrt())
    }

    /// `D2^{1/2} A D1^{-1/2}`.
    pub fn symmetrized(&self) -> DMatrix<f64> {
        let mut s = self.a.clone();
        for j in 0..self.k2() {
            for i in 0..self.k1() {
                s[(j, i)] *= self.w2[j].sqrt() / self.w1[i].sqrt();
            }
        }
        s
    }

    /// Operator norm under the weighted inner products.
    pub fn weighted_norm(&self) -> f64 {
        self.symmetrized()
            .singular_values()
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        for j in 0..self.k2() {
            let s: f64 = self.a.row(j).sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::Invariant(format!("row {j} of A sums to {s}")));
            }
        }
        let n = self.weighted_norm();
        if n > 1.0 + 1e-10 {
            return Err(Error::Invariant(format!("weighted operator norm {n} above 1")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut matrix = Vec::with_capacity(self.k1() * self.k2());
        for j in 0..self.k2() {
            matrix.extend(self.a.row(j).iter());
        }
        let doc = OperatorDoc {
            k1: self.k1(),
            k2: self.k2(),
            matrix,
            w1: self.w1.as_slice().to_vec(),
            w2: self.w2.as_slice().to_vec(),
            x1_grid: self.x1_grid.clone(),
            x2_grid: self.x2_grid.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: OperatorDoc = serde_json::from_str(text)?;
        Error::check_dim(doc.k1 * doc.k2, doc.matrix.len())?;
        Error::check_dim(doc.k1, doc.w1.len())?;
        Error::check_dim(doc.k2, doc.w2.len())?;
        check_grid(&doc.x1_grid, doc.k1, "x1")?;
        check_grid(&doc.x2_grid, doc.k2, "x2")?;
        let op = Self {
            a: DMatrix::from_row_slice(doc.k2, doc.k1, &doc.matrix),
            w1: DVector::from_vec(doc.w1),
            w2: DVector::from_vec(doc.w2),
            x1_grid: doc.x1_grid,
            x2_grid: doc.x2_grid,
        };
        op.validate()?;
        Ok(op)
    }
}

fn weighted_inner(w: &[f64], f: &[f64], g: &[f64]) -> Result<f64> {
    Error::check_dim(w.len(), f.len())?;
    Error::check_dim(w.len(), g.len())?;
    Ok(w.iter().zip(f).zip(g).map(|((w, a), b)| w * a * b).sum())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// Solves `(alpha I + A* A) f = A* b`.
pub fn tikhonov_solve(op: &DiscretizedOperator, b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    Error::check_dim(op.k2(), b.len())?;
    let s = op.symmetrized();
    let bt = DVector::from_iterator(op.k2(), b.iter().zip(op.w2.iter()).map(|(b, w)| b * w.sqrt()));
    let mut m = s.tr_mul(&s);
    for i in 0..op.k1() {
        m[(i, i)] += alpha;
    }
    let rhs = s.tr_mul(&bt);
    let chol = m.clone().cholesky().ok_or(Error::SingularMatrix)?;
    let mut g = chol.solve(&rhs);
    // one step of iterative refinement
    let r = &rhs - &m * &g;
    g += chol.solve(&r);
    Ok(g.iter().zip(op.w1.iter()).map(|(g, w)| g / w.sqrt()).collect())
}

/// Minimum-norm minimizer of `||Af - b||_E`, the `alpha -> 0` limit of
/// [`tikhonov_solve`]. Singular values below `1e-12 * lambda_1` count as zero.
pub fn least_squares_solve(op: &DiscretizedOperator, b: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim(op.k2(), b.len())?;
    let bt = DVector::from_iterator(op.k2(), b.iter().zip(op.w2.iter()).map(|(b, w)| b * w.sqrt()));
    let svd = op.symmetrized().svd(true, true);
    let cutoff = 1e-12 * svd.singular_values.max();
    let g = svd.solve(&bt, cutoff).map_err(|_| Error::SingularMatrix)?;
    Ok(g.iter().zip(op.w1.iter()).map(|(g, w)| g / w.sqrt()).collect())
}

/// Weighted norm of `alpha f + A* A f - A* b`.
pub fn normal_equation_residual(
    op: &DiscretizedOperator,
    f: &[f64],
    b: &[f64],
    alpha: f64,
) -> Result<f64> {
    let af = op.apply(f)?;
    let r: Vec<f64> = af.iter().zip(b).map(|(a, b)| a - b).collect();
    let astar = op.adjoint(&r)?;
    let v: Vec<f64> = astar.iter().zip(f).map(|(a, f)| a + alpha * f).collect();
    op.norm_h(&v)
}

/// `1/2 ||Af - b||_E^2 + alpha/2 ||f||_H^2`.
pub fn primal_loss(op: &DiscretizedOperator, f: &[f64], b: &[f64], alpha: f64) -> Result<f64> {
    Error::check_dim(op.k2(), b.len())?;
    let af = op.apply(f)?;
    let r: Vec<f64> = af.iter().zip(b).map(|(a, b)| a - b).collect();
    Ok(0.5 * op.inner_e(&r, &r)? + 0.5 * alpha * op.inner_h(f, f)?)
}

/// `L(f) - L(f^alpha)`.
pub fn suboptimality(op: &DiscretizedOperator, f: &[f64], b: &[f64], alpha: f64) -> Result<f64> {
    let fa = tikhonov_solve(op, b, alpha)?;
    Ok(primal_loss(op, f, b, alpha)? - primal_loss(op, &fa, b, alpha)?)
}

/// A Tikhonov problem with its solution cached.
#[derive(Clone, Debug)]
pub struct TikhonovOracle {
    pub op: DiscretizedOperator,
    pub b: Vec<f64>,
    pub alpha: f64,
    pub f_alpha: Vec<f64>,
    pub l_star: f64,
}

impl TikhonovOracle {
    /// `alpha = 0` selects the minimum-norm least-squares solution.
    pub fn new(op: DiscretizedOperator, b: Vec<f64>, alpha: f64) -> Result<Self> {
        let f_alpha = if alpha == 0.0 {
            least_squares_solve(&op, &b)?
        } else {
            tikhonov_solve(&op, &b, alpha)?
        };
        let l_star = primal_loss(&op, &f_alpha, &b, alpha)?;
        Ok(Self { op, b, alpha, f_alpha, l_star })
    }

    pub fn suboptimality(&self, f: &[f64]) -> Result<f64> {
        Ok(primal_loss(&self.op, f, &self.b, self.alpha)? - self.l_star)
    }

    /// Weighted `||f - f^alpha||_H`.
    pub fn distance(&self, f: &[f64]) -> Result<f64> {
        Error::check_dim(self.f_alpha.len(), f.len())?;
        let d: Vec<f64> = f.iter().zip(&self.f_alpha).map(|(a, b)| a - b).collect();
        self.op.norm_h(&d)
    }
}

/// Singular triples `A phi_j = lambda_j psi_j`, orthonormal under the weighted products.
#[derive(Clone, Debug, PartialEq)]
pub struct SingularSystem {
    pub values: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    pub w1: Vec<f64>,
}

impl SingularSystem {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Coefficients `<f, phi_j>_H`.
    pub fn coefficients(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.phi.iter().map(|p| weighted_inner(&self.w1, f, p)).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "j,lambda_j")?;
        for (j, l) in self.values.iter().enumerate() {
            writeln!(w, "{},{}", j + 1, fmt_f64(*l))?;
        }
        Ok(())
    }
}

pub fn svd_system(op: &DiscretizedOperator) -> Result<SingularSystem> {
    let svd = op.symmetrized().svd(true, true);
    let u = svd.u.ok_or(Error::SingularMatrix)?;
    let vt = svd.v_t.ok_or(Error::SingularMatrix)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut sys = SingularSystem {
        values: Vec::with_capacity(order.len()),
        phi: Vec::with_capacity(order.len()),
        psi: Vec::with_capacity(order.len()),
        w1: op.w1.as_slice().to_vec(),
    };
    for k in order {
        let mut phi: Vec<f64> = (0..op.k1()).map(|i| vt[(k, i)] / op.w1[i].sqrt()).collect();
        let mut psi: Vec<f64> = (0..op.k2()).map(|j| u[(j, k)] / op.w2[j].sqrt()).collect();
        // sign convention: largest entry of phi is positive
        let peak = phi.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if peak < 0.0 {
            phi.iter_mut().for_each(|v| *v = -*v);
            psi.iter_mut().for_each(|v| *v = -*v);
        }
        sys.values.push(svd.singular_values[k]);
        sys.phi.push(phi);
        sys.psi.push(psi);
    }
    Ok(sys)
}

/// Decay weight `s_j` applied to the `j`-th (1-based) component.
pub fn truth_decay(j: usize) -> f64 {
    1.0 / j as f64
}

/// `f = sum_j c_j phi_j` with `c_j = s_j lambda_j^beta g_j`, scaled so that
/// `sum_j c_j^2 / lambda_j^{2 beta} = coeff_norm^2`. Uses every component.
pub fn make_beta_regular_truth(
    sys: &SingularSystem,
    beta: f64,
    coeff_norm: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    make_beta_regular_truth_with(sys, beta, coeff_norm, seed, sys.len())
}

/// As [`make_beta_regular_truth`] but restricted to the leading `components`.
pub fn make_beta_regular_truth_with(
    sys: &SingularSystem,
    beta: f64,
    coeff_norm: f64,
    seed: u64,
    components: usize,
) -> Result<Vec<f64>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config("beta must be positive"));
    }
    if !(coeff_norm >= 0.0 && coeff_norm.is_finite()) {
        return Err(Error::config("coeff_norm must be nonnegative"));
    }
    if components == 0 || components > sys.len() {
        return Err(Error::config(format!(
            "components must be in 1..={}",
            sys.len()
        )));
    }
    if let Some(j) = sys.values[..components].iter().position(|&l| l <= 0.0) {
        return Err(Error::ZeroSingularValue { index: j });
    }
    let k1 = sys.w1.len();
    if coeff_norm == 0.0 {
        return Ok(vec![0.0; k1]);
    }
    let mut rng = Stream::new(seed, 0x7e);
    let mut c: Vec<f64> = (0..components)
        .map(|j| truth_decay(j + 1) * sys.values[j].powf(beta) * rng.gaussian())
        .collect();
    let reg = regularity_sum(&sys.values[..components], &c, beta);
    let scale = coeff_norm / reg.sqrt();
    c.iter_mut().for_each(|v| *v *= scale);
    let mut f = vec![0.0; k1];
    for (cj, phi) in c.iter().zip(&sys.phi) {
        for (fi, p) in f.iter_mut().zip(phi) {
            *fi += cj * p;
        }
    }
    Ok(f)
}

/// `sum_j c_j^2 / lambda_j^{2 beta}`.
pub fn regularity_sum(values: &[f64], coeffs: &[f64], beta: f64) -> f64 {
    values
        .iter()
        .zip(coeffs)
        .map(|(l, c)| c * c / l.powf(2.0 * beta))
        .sum()
}
