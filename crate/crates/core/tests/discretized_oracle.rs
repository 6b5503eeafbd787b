use asem::game::Sample;
use asem::oracle::{
    least_squares_solve, make_beta_regular_truth, make_beta_regular_truth_with, normal_equation_residual, primal_loss, regularity_sum, suboptimality, svd_system,
    tikhonov_solve, DiscretizedOperator, TikhonovOracle,
};
use asem::rng::Stream;
use asem::sem::{circular_design, gen_discrete, CircularSpec};
use asem::Error;
use nalgebra::{DMatrix, DVector};

fn grid(k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|i| vec![i as f64 / k as f64]).collect()
}

fn random_pmf(k2: usize, k1: usize, rng: &mut Stream) -> Vec<Vec<f64>> {
    let mut p: Vec<Vec<f64>> = (0..k2).map(|_| (0..k1).map(|_| 0.02 + rng.uniform()).collect()).collect();
    let t: f64 = p.iter().flatten().sum();
    p.iter_mut().flatten().for_each(|v| *v /= t);
    p
}

fn random_op(k2: usize, k1: usize, seed: u64) -> DiscretizedOperator {
    let mut rng = Stream::new(seed, 1);
    DiscretizedOperator::from_pmf(&random_pmf(k2, k1, &mut rng), grid(k1), grid(k2)).unwrap()
}

fn diagonal(k: usize) -> DiscretizedOperator {
    let mut p = vec![vec![0.0; k]; k];
    (0..k).for_each(|i| p[i][i] = 1.0 / k as f64);
    DiscretizedOperator::from_pmf(&p, grid(k), grid(k)).unwrap()
}

fn gaussians(n: usize, rng: &mut Stream) -> Vec<f64> {
    (0..n).map(|_| rng.gaussian()).collect()
}

/// Minimizer of the weighted Tikhonov objective as a stacked least-squares
/// problem, solved by QR.
fn tikhonov_by_qr(op: &DiscretizedOperator, b: &[f64], alpha: f64) -> Vec<f64> {
    let (k1, k2) = (op.k1(), op.k2());
    let a = op.matrix();
    let mut m = DMatrix::zeros(k2 + k1, k1);
    let mut rhs = DVector::zeros(k2 + k1);
    for j in 0..k2 {
        let s = op.w2()[j].sqrt();
        for i in 0..k1 {
            m[(j, i)] = s * a[(j, i)];
        }
        rhs[j] = s * b[j];
    }
    for i in 0..k1 {
        m[(k2 + i, i)] = (alpha * op.w1()[i]).sqrt();
    }
    let qr = m.qr();
    let qtb = qr.q().transpose() * rhs;
    qr.r().solve_upper_triangular(&qtb).unwrap().iter().copied().collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn operator_from_pmf_examples() {
    let op = DiscretizedOperator::from_pmf(&[vec![0.4, 0.1], vec![0.2, 0.3]], grid(2), grid(2)).unwrap();
    let a = op.matrix();
    assert!((a[(0, 0)] - 0.8).abs() < 1e-15 && (a[(0, 1)] - 0.2).abs() < 1e-15);
    assert!((a[(1, 0)] - 0.4).abs() < 1e-15 && (a[(1, 1)] - 0.6).abs() < 1e-15);
    assert!((op.w1()[0] - 0.6).abs() < 1e-15 && (op.w2()[1] - 0.5).abs() < 1e-15);

    let (px, py) = ([0.2, 0.5, 0.3], [0.6, 0.4]);
    let product: Vec<Vec<f64>> = py.iter().map(|q| px.iter().map(|p| p * q).collect()).collect();
    let op = DiscretizedOperator::from_pmf(&product, grid(3), grid(2)).unwrap();
    for j in 0..2 {
        for i in 0..3 {
            assert!((op.matrix()[(j, i)] - op.w1()[i]).abs() < 1e-15);
        }
    }

    let d = diagonal(4);
    assert_eq!(d.matrix(), &DMatrix::identity(4, 4));
}

#[test]
fn operator_invariants_and_rejections() {
    for seed in 0..10 {
        let op = random_op(7, 9, seed);
        for j in 0..7 {
            assert!((op.matrix().row(j).sum() - 1.0).abs() < 1e-14);
        }
        assert!((op.w1().iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((op.w2().iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(op.weighted_norm() <= 1.0 + 1e-10);
        assert!(op.validate().is_ok());
    }
    assert!(matches!(
        DiscretizedOperator::from_pmf(&[vec![0.5, 0.6]], grid(2), grid(1)),
        Err(Error::InvalidPmf(_))
    ));
    assert!(DiscretizedOperator::from_pmf(&[vec![0.5, -0.5, 1.0]], grid(3), grid(1)).is_err());
    assert!(DiscretizedOperator::from_pmf(&[vec![1.0, 0.0]], grid(2), grid(1)).is_err());
    assert!(DiscretizedOperator::from_pmf(&[vec![0.5], vec![0.0]], grid(1), grid(2)).is_err());
}

#[test]
fn adjoint_is_weighted_transpose() {
    let mut rng = Stream::new(3, 0);
    let op = random_op(6, 8, 3);
    for _ in 0..10 {
        let f = gaussians(8, &mut rng);
        let u = gaussians(6, &mut rng);
        let lhs = op.inner_e(&op.apply(&f).unwrap(), &u).unwrap();
        let rhs = op.inner_h(&f, &op.adjoint(&u).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-13);
    }
}

#[test]
fn empirical_operator_from_samples() {
    let design = circular_design(&CircularSpec { states: 5, bandwidth: 0.8, ..CircularSpec::default() }).unwrap();
    let exact = design.operator().unwrap();
    let samples = gen_discrete(&design, 100_000, 4).unwrap();
    let est = DiscretizedOperator::from_samples(&samples, design.x1_grid.clone(), design.x2_grid.clone()).unwrap();
    let diff = (est.matrix() - exact.matrix()).abs().max();
    assert!(diff < 0.02, "{diff}");

    // a grid state that never appears as an instrument
    let mut x2 = design.x2_grid.clone();
    x2.push(vec![0.0, 0.0]);
    assert!(matches!(
        DiscretizedOperator::from_samples(&samples, design.x1_grid.clone(), x2),
        Err(Error::EmptyCell(5))
    ));
    let off = vec![Sample::single(vec![9.0, 9.0], design.x2_grid[0].clone(), 0.0)];
    assert!(DiscretizedOperator::from_samples(&off, design.x1_grid.clone(), design.x2_grid.clone()).is_err());
}

#[test]
fn tikhonov_examples() {
    let mut rng = Stream::new(5, 0);
    let id = diagonal(6);
    let b = gaussians(6, &mut rng);
    for alpha in [1e-3, 0.5, 7.0] {
        let f = tikhonov_solve(&id, &b, alpha).unwrap();
        for (fi, bi) in f.iter().zip(&b) {
            assert!((fi - bi / (1.0 + alpha)).abs() < 1e-14);
        }
    }
    let op = random_op(8, 8, 6);
    assert!(tikhonov_solve(&op, &[0.0; 8], 0.1).unwrap().iter().all(|v| *v == 0.0));
    assert!(matches!(tikhonov_solve(&op, &[0.0; 8], 0.0), Err(Error::InvalidAlpha(_))));
    assert!(tikhonov_solve(&op, &[0.0; 8], -1.0).is_err());
    assert!(tikhonov_solve(&op, &[0.0; 7], 1.0).is_err());

    for seed in 0..10 {
        let op = random_op(8, 8, 100 + seed);
        let b = gaussians(8, &mut rng);
        for alpha in [1e-3, 0.1, 1.0] {
            let f = tikhonov_solve(&op, &b, alpha).unwrap();
            let reference = tikhonov_by_qr(&op, &b, alpha);
            assert!(max_abs_diff(&f, &reference) < 1e-8, "{}", max_abs_diff(&f, &reference));
            assert!(normal_equation_residual(&op, &f, &b, alpha).unwrap() <= 1e-10);
        }
    }
}

#[test]
fn rectangular_instances_agree_with_qr() {
    let mut rng = Stream::new(7, 0);
    for (k2, k1) in [(5, 12), (12, 5)] {
        let op = random_op(k2, k1, 7 + k1 as u64);
        let b = gaussians(k2, &mut rng);
        let f = tikhonov_solve(&op, &b, 0.01).unwrap();
        assert!(max_abs_diff(&f, &tikhonov_by_qr(&op, &b, 0.01)) < 1e-8);
        assert!(normal_equation_residual(&op, &f, &b, 0.01).unwrap() <= 1e-10);
    }
}

#[test]
fn regularization_is_monotone_and_recovers_least_squares() {
    let mut rng = Stream::new(8, 0);
    let op = diagonal(6);
    // a well-conditioned square operator: mix the identity with a product measure
    let mut p = vec![vec![0.0; 6]; 6];
    for (j, row) in p.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            *v = if i == j { 0.7 / 6.0 } else { 0.3 / 30.0 };
        }
    }
    let mixed = DiscretizedOperator::from_pmf(&p, grid(6), grid(6)).unwrap();
    for op in [op, mixed, random_op(8, 8, 9)] {
        let b = gaussians(op.k2(), &mut rng);
        let mut last = f64::INFINITY;
        for alpha in [1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0] {
            let n = op.norm_h(&tikhonov_solve(&op, &b, alpha).unwrap()).unwrap();
            assert!(n <= last + 1e-12);
            last = n;
        }
    }

    let b = gaussians(6, &mut rng);
    let mixed = DiscretizedOperator::from_pmf(&p, grid(6), grid(6)).unwrap();
    let f = tikhonov_solve(&mixed, &b, 1e-8).unwrap();
    let a = mixed.matrix().clone();
    let ls = a.lu().solve(&DVector::from_vec(b)).unwrap();
    assert!(max_abs_diff(&f, ls.as_slice()) < 1e-5);
}

#[test]
fn zero_ridge_oracle_uses_minimum_norm_least_squares() {
    let mut rng = Stream::new(12, 0);
    let op = random_op(8, 8, 60);
    let b = gaussians(8, &mut rng);
    let direct = op.matrix().clone().lu().solve(&DVector::from_vec(b.clone())).unwrap();
    assert!(max_abs_diff(&least_squares_solve(&op, &b).unwrap(), direct.as_slice()) < 1e-8);

    // rank one: the minimum-norm solution of A f = c 1 is the constant c
    let k = 4;
    let product = vec![vec![1.0 / (k * k) as f64; k]; k];
    let flat = DiscretizedOperator::from_pmf(&product, grid(k), grid(k)).unwrap();
    let f = least_squares_solve(&flat, &[0.3; 4]).unwrap();
    assert!(f.iter().all(|v| (v - 0.3).abs() < 1e-12));
    let oracle = TikhonovOracle::new(flat, vec![0.3; 4], 0.0).unwrap();
    assert!(oracle.l_star.abs() < 1e-20);
    assert!(oracle.suboptimality(&[0.3, 0.5, 0.1, 0.3]).unwrap().abs() < 1e-15);
}

#[test]
fn singular_system_identities() {
    let id = svd_system(&diagonal(5)).unwrap();
    assert!(id.values.iter().all(|l| (l - 1.0).abs() < 1e-14));

    for seed in 0..5 {
        let op = random_op(7, 9, 20 + seed);
        let sys = svd_system(&op).unwrap();
        assert!(sys.values.windows(2).all(|w| w[0] >= w[1]));
        assert!((sys.values[0] - 1.0).abs() < 1e-10);
        let c = sys.phi[0][0];
        assert!(sys.phi[0].iter().all(|v| (v - c).abs() < 1e-8));
        for (j, ((l, phi), psi)) in sys.values.iter().zip(&sys.phi).zip(&sys.psi).enumerate() {
            let aphi = op.apply(phi).unwrap();
            let apsi = op.adjoint(psi).unwrap();
            assert!(max_abs_diff(&aphi, &psi.iter().map(|v| l * v).collect::<Vec<_>>()) < 1e-8);
            assert!(max_abs_diff(&apsi, &phi.iter().map(|v| l * v).collect::<Vec<_>>()) < 1e-8);
            for (k, (phk, psk)) in sys.phi.iter().zip(&sys.psi).enumerate() {
                let delta = if j == k { 1.0 } else { 0.0 };
                assert!((op.inner_h(phi, phk).unwrap() - delta).abs() < 1e-8);
                assert!((op.inner_e(psi, psk).unwrap() - delta).abs() < 1e-8);
            }
        }
        // reconstruction of A from its singular triples, compared under the weights
        let mut recon = DMatrix::<f64>::zeros(7, 9);
        for ((l, phi), psi) in sys.values.iter().zip(&sys.phi).zip(&sys.psi) {
            for j in 0..7 {
                for i in 0..9 {
                    recon[(j, i)] += l * psi[j] * phi[i] * op.w1()[i];
                }
            }
        }
        let mut err = 0.0f64;
        for j in 0..7 {
            for i in 0..9 {
                let d = recon[(j, i)] - op.matrix()[(j, i)];
                err += op.w2()[j] * d * d / op.w1()[i];
            }
        }
        assert!(err.sqrt() < 1e-8);
    }
}

#[test]
fn beta_regular_truths() {
    let id = svd_system(&diagonal(6)).unwrap();
    for beta in [0.5, 1.0, 3.0] {
        let f = make_beta_regular_truth(&id, beta, 2.0, 1).unwrap();
        let c = id.coefficients(&f).unwrap();
        assert!((regularity_sum(&id.values, &c, beta) - 4.0).abs() < 1e-12);
    }
    assert!(make_beta_regular_truth(&id, 1.0, 0.0, 1).unwrap().iter().all(|v| *v == 0.0));

    let op = random_op(10, 10, 30);
    let sys = svd_system(&op).unwrap();
    for (beta, norm) in [(0.5, 1.0), (1.0, 0.3), (2.0, 3.0)] {
        let f = make_beta_regular_truth(&sys, beta, norm, 2).unwrap();
        let c = sys.coefficients(&f).unwrap();
        assert!((regularity_sum(&sys.values, &c, beta) - norm * norm).abs() < 1e-10);
    }
    assert!(make_beta_regular_truth(&sys, 0.0, 1.0, 2).is_err());

    // a vanishing singular value among the used components
    let mut degenerate = id.clone();
    degenerate.values[5] = 0.0;
    assert!(matches!(
        make_beta_regular_truth(&degenerate, 1.0, 1.0, 0),
        Err(Error::ZeroSingularValue { index: 5 })
    ));
    assert!(make_beta_regular_truth_with(&degenerate, 1.0, 1.0, 0, 5).is_ok());
}

#[test]
fn regularization_bias_rate() {
    let design = circular_design(&CircularSpec { states: 30, bandwidth: 1.0, ..CircularSpec::default() }).unwrap();
    let op = design.operator().unwrap();
    let sys = svd_system(&op).unwrap();
    let alphas = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];
    for beta in [0.5, 1.0, 2.0, 3.0] {
        let f = make_beta_regular_truth(&sys, beta, 1.0, 3).unwrap();
        let b = op.apply(&f).unwrap();
        let errs: Vec<f64> = alphas
            .iter()
            .map(|&a| {
                let fa = tikhonov_solve(&op, &b, a).unwrap();
                let d: Vec<f64> = fa.iter().zip(&f).map(|(x, y)| x - y).collect();
                op.inner_h(&d, &d).unwrap()
            })
            .collect();
        let xs: Vec<f64> = alphas.iter().map(|a| a.ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / 5.0, ys.iter().sum::<f64>() / 5.0);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
        assert!(slope >= f64::min(beta, 2.0) - 0.3, "beta {beta}: slope {slope}");
    }
}

#[test]
fn primal_loss_and_suboptimality() {
    let mut rng = Stream::new(11, 0);
    let op = random_op(8, 8, 40);
    let f_true = gaussians(8, &mut rng);
    let b = op.apply(&f_true).unwrap();
    assert!(primal_loss(&op, &f_true, &b, 0.0).unwrap().abs() < 1e-28);
    let zero = vec![0.0; 8];
    let half_b = 0.5 * op.inner_e(&b, &b).unwrap();
    assert!((primal_loss(&op, &zero, &b, 0.3).unwrap() - half_b).abs() < 1e-15);

    for alpha in [1e-3, 0.1, 1.0] {
        let oracle = TikhonovOracle::new(op.clone(), b.clone(), alpha).unwrap();
        assert!(oracle.suboptimality(&oracle.f_alpha).unwrap().abs() < 1e-12);
        assert!((suboptimality(&op, &zero, &b, alpha).unwrap() - (half_b - oracle.l_star)).abs() < 1e-12);
        for _ in 0..20 {
            let f: Vec<f64> = oracle.f_alpha.iter().map(|v| v + rng.gaussian()).collect();
            let sub = oracle.suboptimality(&f).unwrap();
            let d = oracle.distance(&f).unwrap();
            assert!(sub >= 0.5 * alpha * d * d - 1e-10);
            assert!(sub >= -1e-10);
        }
    }
}

#[test]
fn operator_json_round_trip() {
    let op = random_op(4, 5, 50);
    let back = DiscretizedOperator::from_json(&op.to_json().unwrap()).unwrap();
    assert_eq!(back.matrix(), op.matrix());
    assert_eq!(back.w1(), op.w1());
    assert_eq!(back.x2_grid(), op.x2_grid());
}
