use asem::game::{
    average_estimator, best_response, grad_omega, grad_theta, grid_payoff, grid_payoff_gradients, payoff,
    residual, sgda_run, EvalPoint, Estimator, GameConfig, Sample,
};
use asem::nn::{NetConfig, NetworkState};
use asem::oracle::{primal_loss, tikhonov_solve, DiscretizedOperator};
use asem::rng::Stream;
use asem::sem::{gen_discrete, DiscreteDesign};
use asem::Error;

fn perturbed(cfg: NetConfig, seed: u64, step: f64) -> NetworkState {
    let s = NetworkState::init(cfg, seed).unwrap();
    let mut rng = Stream::new(seed, 77);
    let w = s.weights().iter().map(|v| v + step * rng.uniform_range(-1.0, 1.0)).collect();
    s.with_weights(w).unwrap().project()
}

fn random_sample(rng: &mut Stream, d: usize, points: usize) -> Sample {
    let eval_points = (0..points)
        .map(|k| EvalPoint {
            coeff: if k % 2 == 0 { 1.0 } else { -1.0 },
            point: rng.uniform_ball(d, 1.0),
        })
        .collect();
    Sample::new(eval_points, rng.uniform_ball(d, 1.0), rng.uniform_range(-1.0, 1.0), 0).unwrap()
}

fn kink_free(s: &NetworkState, pts: &[&[f64]]) -> bool {
    pts.iter().all(|x| s.pre_activations(x).unwrap().iter().all(|z| z.abs() > 1e-3))
}

fn rel_err(reference: &[f64], got: &[f64]) -> f64 {
    let num: f64 = reference.iter().zip(got).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = reference.iter().map(|a| a * a).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn fd<F: Fn(&[f64]) -> f64>(f: F, w: &[f64], h: f64) -> Vec<f64> {
    (0..w.len())
        .map(|i| {
            let mut p = w.to_vec();
            let mut m = w.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn random_design(k1: usize, k2: usize, seed: u64, noise: f64) -> DiscreteDesign {
    let mut rng = Stream::new(seed, 5);
    let mut joint: Vec<Vec<f64>> = (0..k2).map(|_| (0..k1).map(|_| 0.05 + rng.uniform()).collect()).collect();
    let total: f64 = joint.iter().flatten().sum();
    joint.iter_mut().flatten().for_each(|p| *p /= total);
    let grid = |k: usize| -> Vec<Vec<f64>> {
        (0..k)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                vec![0.6 * t.cos(), 0.6 * t.sin(), 0.8]
            })
            .collect()
    };
    DiscreteDesign {
        joint_pmf: joint,
        x1_grid: grid(k1),
        x2_grid: grid(k2),
        f_true: (0..k1).map(|_| rng.uniform_range(-0.5, 0.5)).collect(),
        noise_scale: noise,
    }
}

#[test]
fn residual_and_payoff_match_substitution() {
    let mut rng = Stream::new(1, 0);
    let theta = perturbed(NetConfig::two_layer(3, 16, 1.0), 1, 0.2);
    let omega = perturbed(NetConfig::two_layer(3, 16, 1.0), 2, 0.2);
    for points in [1, 2, 3] {
        let s = random_sample(&mut rng, 3, points);
        let fs: Vec<f64> = s.eval_points.iter().map(|p| theta.forward(&p.point).unwrap()).collect();
        let r: f64 = s.eval_points.iter().zip(&fs).map(|(p, f)| p.coeff * f).sum::<f64>() - s.b_tilde;
        assert!((residual(&theta, &s).unwrap() - r).abs() < 1e-14);
        let u = omega.forward(&s.instrument).unwrap();
        for alpha in [0.0, 0.3, 2.0] {
            let expect = r * u - 0.5 * u * u + 0.5 * alpha * fs[0] * fs[0];
            assert!((payoff(&theta, &omega, &s, alpha).unwrap() - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn panel_residual_cancels_identical_points() {
    let theta = perturbed(NetConfig::two_layer(2, 8, 1.0), 3, 0.3);
    let x = vec![0.3, -0.4];
    let s = Sample::new(
        vec![
            EvalPoint { coeff: 1.0, point: x.clone() },
            EvalPoint { coeff: -1.0, point: x.clone() },
        ],
        x,
        0.0,
        0,
    )
    .unwrap();
    assert_eq!(residual(&theta, &s).unwrap(), 0.0);
}

#[test]
fn sample_validation_rejects_bad_shapes() {
    let bad = Sample::new(vec![EvalPoint { coeff: 1.0, point: vec![0.0; 3] }], vec![0.0; 2], 0.0, 0);
    assert!(matches!(bad, Err(Error::DimensionMismatch { .. })));
    assert!(Sample::new(vec![], vec![0.0], 0.0, 0).is_err());
    assert!(Sample::new(vec![EvalPoint { coeff: 1.0, point: vec![0.0] }], vec![0.0], 0.0, 1).is_err());
    let theta = NetworkState::init(NetConfig::two_layer(3, 4, 1.0), 0).unwrap();
    let s = Sample::single(vec![0.1, 0.1], vec![0.1, 0.1], 0.0);
    assert!(payoff(&theta, &theta, &s, 0.0).is_err());
}

#[test]
fn payoff_gradients_match_finite_differences() {
    let mut rng = Stream::new(2, 0);
    let archs = [NetConfig::two_layer(3, 24, 1.0), NetConfig::multi_layer(3, 12, 2, 1.0)];
    for (k, cfg) in archs.iter().enumerate() {
        let theta = perturbed(*cfg, 10 + k as u64, 0.1);
        let omega = perturbed(*cfg, 20 + k as u64, 0.1);
        let mut checked = 0;
        while checked < 8 {
            let s = random_sample(&mut rng, 3, 1 + checked % 2);
            let pts: Vec<&[f64]> = s.eval_points.iter().map(|p| p.point.as_slice()).collect();
            if !kink_free(&theta, &pts) || !kink_free(&omega, &[&s.instrument]) {
                continue;
            }
            let alpha = 0.25;
            let gt = grad_theta(&theta, &omega, &s, alpha).unwrap();
            let go = grad_omega(&theta, &omega, &s, alpha).unwrap();
            let ft = fd(
                |w| payoff(&theta.with_weights(w.to_vec()).unwrap(), &omega, &s, alpha).unwrap(),
                theta.weights(),
                1e-6,
            );
            let fo = fd(
                |w| payoff(&theta, &omega.with_weights(w.to_vec()).unwrap(), &s, alpha).unwrap(),
                omega.weights(),
                1e-6,
            );
            assert!(rel_err(&ft, &gt) <= 1e-6, "{cfg:?} theta {}", rel_err(&ft, &gt));
            assert!(rel_err(&fo, &go) <= 1e-6, "{cfg:?} omega {}", rel_err(&fo, &go));
            checked += 1;
        }
    }
}

#[test]
fn gradient_formula_reductions() {
    let theta = perturbed(NetConfig::two_layer(2, 10, 1.0), 4, 0.2);
    let zero_u = NetworkState::init(NetConfig::two_layer(2, 10, 1.0), 5).unwrap();
    let zero_u = zero_u.with_weights(vec![0.0; zero_u.num_params()]).unwrap();
    let x1 = vec![0.5, 0.2];
    let x2 = vec![-0.1, 0.6];
    let s = Sample::single(x1.clone(), x2.clone(), 0.4);
    assert!(grad_theta(&theta, &zero_u, &s, 0.0).unwrap().iter().all(|g| *g == 0.0));

    let omega = perturbed(NetConfig::two_layer(2, 10, 1.0), 6, 0.2);
    let u = omega.forward(&x2).unwrap();
    let gf = theta.gradient(&x1).unwrap();
    let gt = grad_theta(&theta, &omega, &s, 0.0).unwrap();
    for (a, b) in gt.iter().zip(&gf) {
        assert!((a - u * b).abs() < 1e-15);
    }

    // residual equal to u: the adversary is at its best response
    let f = theta.forward(&x1).unwrap();
    let at_br = Sample::single(x1.clone(), x2.clone(), f - u);
    let go = grad_omega(&theta, &omega, &at_br, 0.7).unwrap();
    assert!(go.iter().all(|g| g.abs() < 1e-14));

    let gu = omega.gradient(&x2).unwrap();
    let shifted = Sample::single(x1, x2, f - u - 1.0);
    for (a, b) in grad_omega(&theta, &omega, &shifted, 0.0).unwrap().iter().zip(&gu) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn zero_stepsize_leaves_iterates_unchanged() {
    let design = random_design(6, 5, 1, 0.1);
    let theta0 = NetworkState::init(NetConfig::two_layer(3, 32, 1.0), 1).unwrap();
    let omega0 = NetworkState::init(NetConfig::two_layer(3, 32, 1.0), 2).unwrap();
    let data = gen_discrete(&design, 50, 3).unwrap();
    let trace = sgda_run(&theta0, &omega0, &GameConfig::new(0.1, 0.0, 50), data).unwrap();
    assert_eq!(trace.theta.weights(), theta0.weights());
    assert_eq!(trace.omega.weights(), omega0.weights());
    assert!(trace.rows.iter().all(|r| r.dist_theta == 0.0 && r.dist_omega == 0.0));
}

#[test]
fn single_step_is_one_gradient_update() {
    let design = random_design(6, 5, 2, 0.1);
    let theta0 = NetworkState::init(NetConfig::two_layer(3, 32, 10.0), 1).unwrap();
    let omega0 = NetworkState::init(NetConfig::two_layer(3, 32, 10.0), 2).unwrap();
    let data = gen_discrete(&design, 1, 4).unwrap();
    let (eta, alpha) = (0.05, 0.3);
    let gt = grad_theta(&theta0, &omega0, &data[0], alpha).unwrap();
    let go = grad_omega(&theta0, &omega0, &data[0], alpha).unwrap();
    let trace = sgda_run(&theta0, &omega0, &GameConfig::new(alpha, eta, 1), data).unwrap();
    for ((w, w0), g) in trace.theta.weights().iter().zip(theta0.weights()).zip(&gt) {
        assert_eq!(*w, w0 - eta * g);
    }
    for ((w, w0), g) in trace.omega.weights().iter().zip(omega0.weights()).zip(&go) {
        assert_eq!(*w, w0 + eta * g);
    }
    assert_eq!(trace.rows.len(), 1);
    assert_eq!(trace.theta_snapshots.len(), 1);
    assert_eq!(trace.theta_snapshots[0].weights(), theta0.weights());
}

#[test]
fn iterates_stay_feasible_and_trace_is_complete() {
    let design = random_design(8, 8, 3, 0.2);
    for cfg in [NetConfig::two_layer(3, 16, 0.2), NetConfig::multi_layer(3, 8, 2, 0.2)] {
        let theta0 = NetworkState::init(cfg, 1).unwrap();
        let omega0 = NetworkState::init(cfg, 2).unwrap();
        let t = 205;
        let config = GameConfig::new(0.1, 0.5, t).with_stride(10);
        let trace = sgda_run(&theta0, &omega0, &config, gen_discrete(&design, t, 5).unwrap()).unwrap();
        assert_eq!(trace.rows.len(), t);
        assert_eq!(trace.theta_snapshots.len(), t / 10);
        assert_eq!(trace.omega_snapshots.len(), t / 10);
        assert_eq!(trace.snapshot_iters, (1..=t / 10).map(|k| 10 * k).collect::<Vec<_>>());
        for s in trace.theta_snapshots.iter().chain(&trace.omega_snapshots) {
            assert!(s.is_feasible(1e-12));
        }
        assert!(trace.theta.is_feasible(1e-12) && trace.omega.is_feasible(1e-12));
        if let NetConfig::TwoLayer(_) = cfg {
            assert!(trace.rows.iter().all(|r| r.dist_theta <= 0.2 + 1e-12 && r.dist_omega <= 0.2 + 1e-12));
            // the large stepsize makes the constraint bind
            assert!(trace.rows.iter().any(|r| (r.dist_theta - 0.2).abs() < 1e-9));
        }
    }
}

#[test]
fn two_layer_gradient_norm_is_bounded_by_output_magnitudes() {
    let design = random_design(6, 6, 4, 0.1);
    let theta = perturbed(NetConfig::two_layer(3, 20, 1.0), 7, 0.2);
    let omega = perturbed(NetConfig::two_layer(3, 20, 1.0), 8, 0.2);
    let alpha = 0.5;
    for s in gen_discrete(&design, 200, 6).unwrap() {
        let u = omega.forward(&s.instrument).unwrap();
        let f = theta.forward(&s.eval_points[0].point).unwrap();
        let g = grad_theta(&theta, &omega, &s, alpha).unwrap();
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n <= u.abs() + alpha * f.abs() + 1e-12);
    }
}

#[test]
fn sgda_is_deterministic_and_reports_exhaustion() {
    let design = random_design(5, 5, 5, 0.1);
    let theta0 = NetworkState::init(NetConfig::two_layer(3, 16, 1.0), 1).unwrap();
    let omega0 = NetworkState::init(NetConfig::two_layer(3, 16, 1.0), 2).unwrap();
    let cfg = GameConfig::new(0.1, 0.1, 100);
    let a = sgda_run(&theta0, &omega0, &cfg, gen_discrete(&design, 100, 9).unwrap()).unwrap();
    let b = sgda_run(&theta0, &omega0, &cfg, gen_discrete(&design, 100, 9).unwrap()).unwrap();
    assert_eq!(a.theta.weights(), b.theta.weights());
    assert_eq!(a.rows, b.rows);
    let short = sgda_run(&theta0, &omega0, &cfg, gen_discrete(&design, 40, 9).unwrap());
    assert!(matches!(short, Err(Error::StreamExhausted { got: 40, .. })));
    let infeasible = theta0.with_weights(theta0.weights().iter().map(|w| w + 1.0).collect()).unwrap();
    assert!(sgda_run(&infeasible, &omega0, &cfg, gen_discrete(&design, 100, 9).unwrap()).is_err());
}

#[test]
fn averaged_estimator_means_snapshot_outputs() {
    let design = random_design(6, 6, 6, 0.1);
    let theta0 = NetworkState::init(NetConfig::two_layer(3, 32, 1.0), 3).unwrap();
    let omega0 = NetworkState::init(NetConfig::two_layer(3, 32, 1.0), 4).unwrap();
    let one = sgda_run(
        &theta0,
        &omega0,
        &GameConfig::new(0.1, 0.1, 1),
        gen_discrete(&design, 1, 1).unwrap(),
    )
    .unwrap();
    let est = average_estimator(&one).unwrap();
    let x = design.x1_grid[2].clone();
    assert_eq!(est.eval(&x).unwrap(), one.theta_snapshots[0].forward(&x).unwrap());

    let t = 4000;
    let data = gen_discrete(&design, t, 2).unwrap();
    let cfg = GameConfig::new(0.1, 0.5 / (t as f64).sqrt(), t);
    let fine = sgda_run(&theta0, &omega0, &cfg.with_stride(1), data.clone()).unwrap();
    let coarse = sgda_run(&theta0, &omega0, &cfg.with_stride(10), data).unwrap();
    assert_eq!(fine.theta.weights(), coarse.theta.weights());
    let manual: f64 = fine.theta_snapshots.iter().map(|s| s.forward(&x).unwrap()).sum::<f64>() / t as f64;
    let fine_est = average_estimator(&fine).unwrap();
    assert!((fine_est.eval(&x).unwrap() - manual).abs() < 1e-12);
    let coarse_est = average_estimator(&coarse).unwrap();
    let op = design.operator().unwrap();
    let ff = fine_est.tabulate(op.x1_grid()).unwrap();
    let fc = coarse_est.tabulate(op.x1_grid()).unwrap();
    let diff: Vec<f64> = ff.iter().zip(&fc).map(|(a, b)| a - b).collect();
    let drift: Vec<f64> = ff
        .iter()
        .zip(&theta0.tabulate(op.x1_grid()).unwrap())
        .map(|(a, b)| a - b)
        .collect();
    // subsampling error is a small fraction of the distance travelled
    assert!(op.norm_h(&diff).unwrap() <= 0.05 * op.norm_h(&drift).unwrap());
}

#[test]
fn best_response_and_grid_saddle() {
    let design = random_design(8, 8, 7, 0.0);
    let op = design.operator().unwrap();
    let b = design.rhs().unwrap();
    let r = best_response(&op, &design.f_true, &b).unwrap();
    assert!(r.iter().all(|v| v.abs() < 1e-15));

    let k = 5;
    let mut joint = vec![vec![0.0; k]; k];
    (0..k).for_each(|i| joint[i][i] = 1.0 / k as f64);
    let grid: Vec<Vec<f64>> = (0..k).map(|i| vec![i as f64 / k as f64]).collect();
    let ident = DiscretizedOperator::from_pmf(&joint, grid.clone(), grid).unwrap();
    let f = vec![0.3, -0.1, 0.7, 0.0, -0.5];
    assert_eq!(best_response(&ident, &f, &[0.0; 5]).unwrap(), f);

    let mut rng = Stream::new(8, 0);
    for alpha in [0.0, 0.05, 1.0] {
        let f: Vec<f64> = (0..8).map(|_| rng.gaussian()).collect();
        let bb: Vec<f64> = (0..8).map(|_| rng.gaussian()).collect();
        let u = best_response(&op, &f, &bb).unwrap();
        let lhs = grid_payoff(&op, &f, &u, &bb, alpha).unwrap();
        assert!((lhs - primal_loss(&op, &f, &bb, alpha).unwrap()).abs() < 1e-10);
        // strict concavity in u: any perturbation lowers the payoff
        for _ in 0..10 {
            let v: Vec<f64> = u.iter().map(|x| x + 0.1 * rng.gaussian()).collect();
            assert!(grid_payoff(&op, &f, &v, &bb, alpha).unwrap() < lhs);
        }
    }

    let alpha = 0.05;
    let fa = tikhonov_solve(&op, &b, alpha).unwrap();
    let ua = best_response(&op, &fa, &b).unwrap();
    let (gf, gu) = grid_payoff_gradients(&op, &fa, &ua, &b, alpha).unwrap();
    assert!(op.norm_h(&gf).unwrap() <= 1e-8);
    assert!(op.norm_e(&gu).unwrap() <= 1e-8);
}
