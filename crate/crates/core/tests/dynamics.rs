mod common;

use common::{gaussian_vec, homogeneous_quadratic, logistic_problem, rng};
use fedbias::analysis_det::{
    bias_bound_det, find_fixed_point, gamma_matrix_bias, DEFAULT_FIXED_POINT_TOL,
};
use fedbias::analysis_sto::{coupling_decay_from, estimate_stationary};
use fedbias::datasets::{
    gen_synthetic_heterogeneous, gen_synthetic_noisy, random_quadratic, scalar_quadratic, softplus_1d,
    QuadraticConfig,
};
use fedbias::fedavg::{round_det, round_sto, run, Algorithm, RunConfig};
use fedbias::linalg::{matrix_power, sym_eigen};
use fedbias::problems::ClientObjective;
use fedbias::rng::ChainStreams;
use fedbias::theory::{predicted_cov, quadratic_bias, slope_table, loglog_slope, SlopeQuantity};
use fedbias::{DenseMatrix, DenseVector, Problem};

fn quad() -> Problem {
    random_quadratic(7, 2, 4, &QuadraticConfig::default())
}

fn built_in() -> Vec<(&'static str, Problem)> {
    vec![
        ("scalar", scalar_quadratic(&[1.0, 3.0], &[1.0, 0.0], 1.0)),
        ("quadratic", quad()),
        ("softplus", softplus_1d(4, 0.1, 0.5)),
        ("logistic_d3", logistic_problem(1, 3, 4, 40, 0.1)),
        ("noisy", gen_synthetic_noisy(0, 1000)),
        ("heterogeneous", gen_synthetic_heterogeneous(0, 1000)),
    ]
}

#[test]
fn deterministic_round_is_a_contraction() {
    for (name, p) in built_in() {
        let gamma = 1.0 / (2.0 * p.lip());
        let mut r = rng(3);
        for h in [1, 3, 10] {
            let rate = (1.0 - gamma * p.mu()).powi(h as i32);
            for _ in 0..10 {
                let x = gaussian_vec(&mut r, p.dim(), 2.0);
                let y = gaussian_vec(&mut r, p.dim(), 2.0);
                let tx = round_det(&p, &x, gamma, h).unwrap();
                let ty = round_det(&p, &y, gamma, h).unwrap();
                assert!(
                    tx.dist_sq(&ty).sqrt() <= rate * x.dist_sq(&y).sqrt() * (1.0 + 1e-12),
                    "{name} H={h}"
                );
            }
        }
    }
}

#[test]
fn quadratic_round_is_affine_with_averaged_contraction() {
    let p = quad();
    let (gamma, h) = (0.1, 5);
    let id = DenseMatrix::identity(2);
    let mut b_bar = DenseMatrix::zeros(2);
    for client in p.clients() {
        let ClientObjective::Quadratic(q) = client else {
            unreachable!()
        };
        let mut step = id.clone();
        step.axpy(-gamma, &q.a);
        b_bar.axpy(0.25, &matrix_power(&step, h));
    }
    let mut r = rng(4);
    for _ in 0..20 {
        let x = gaussian_vec(&mut r, 2, 3.0);
        let y = gaussian_vec(&mut r, 2, 3.0);
        let lhs = &round_det(&p, &x, gamma, h).unwrap() - &round_det(&p, &y, gamma, h).unwrap();
        let rhs = b_bar.matvec(&(&x - &y));
        assert!((&lhs - &rhs).norm() < 1e-12 * (1.0 + rhs.norm()));
    }
}

#[test]
fn quadratic_stochastic_round_is_unbiased() {
    let p = quad();
    let (gamma, h) = (0.1, 5);
    let theta = DenseVector::new(vec![0.7, -1.2]).unwrap();
    let want = round_det(&p, &theta, gamma, h).unwrap();
    let n = 20_000;
    let mut sum = DenseVector::zeros(2);
    let mut sum_sq = DenseVector::zeros(2);
    for k in 0..n {
        let x = round_sto(&p, &theta, gamma, h, &ChainStreams::new(9, k), 0).unwrap();
        for i in 0..2 {
            sum[i] += x[i];
            sum_sq[i] += x[i] * x[i];
        }
    }
    for i in 0..2 {
        let mean = sum[i] / n as f64;
        let se = ((sum_sq[i] / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - want[i]).abs() <= 4.0 * se, "coordinate {i}");
    }
}

#[test]
fn runs_are_bit_reproducible() {
    let p = gen_synthetic_heterogeneous(0, 200);
    for alg in [Algorithm::Fedavg, Algorithm::Scaffold, Algorithm::RrGamma, Algorithm::RrH] {
        let cfg = RunConfig::new(alg, 0.01, 4, 50, 21).with_chain(3);
        let a = run(&p, &cfg).unwrap();
        let b = run(&p, &cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv(), "{alg:?}");
        assert_eq!(a.tail_average, b.tail_average);
        let json = p.to_json().unwrap();
        let c = run(&Problem::from_json(&json).unwrap(), &cfg).unwrap();
        assert_eq!(a.to_csv(), c.to_csv());
    }
}

#[test]
fn fixed_point_residual_on_built_in_grid() {
    for (name, p) in built_in() {
        for denom in [4.0, 8.0] {
            let gamma = 1.0 / (denom * p.lip());
            for h in [1, 2, 10, 100] {
                if gamma * p.mu() * h as f64 > 1.0 {
                    continue;
                }
                let fp = find_fixed_point(&p, gamma, h, DEFAULT_FIXED_POINT_TOL).unwrap();
                let scale = 1.0 + fp.theta_bar.norm();
                assert!(
                    fp.residual <= DEFAULT_FIXED_POINT_TOL * scale,
                    "{name} γ=1/({denom}L) H={h}: residual {}",
                    fp.residual
                );
                let bias = &fp.theta_bar - &p.global_optimum().unwrap();
                let rhs = gamma_matrix_bias(&p, gamma, h, &fp.theta_bar).unwrap();
                assert!(
                    (&rhs - &bias).norm() <= 1e-8 * (1.0 + bias.norm()),
                    "{name} H={h}: identity off by {}",
                    (&rhs - &bias).norm()
                );
                assert!(bias.norm() <= bias_bound_det(&p, gamma, h).unwrap() + 1e-12, "{name} H={h}");
            }
        }
    }
}

#[test]
fn deterministic_runs_stay_in_the_neighbourhood_bound() {
    for (name, p) in built_in() {
        let gamma = 1.0 / (4.0 * p.lip());
        let h = ((1.0 / (gamma * p.mu())).floor() as usize).clamp(1, 10);
        let opt = p.global_optimum().unwrap();
        let fp = find_fixed_point(&p, gamma, h, DEFAULT_FIXED_POINT_TOL).unwrap();
        let c1 = p.lip() * p.heterogeneity().unwrap().delta1 / p.mu();
        let init = &opt + &DenseVector::from_fn(p.dim(), |i| 2.0 - i as f64);
        let tr = run(&p, &RunConfig::new(Algorithm::FedavgDet, gamma, h, 200, 0).with_init(init.clone())).unwrap();
        let d0 = init.dist_sq(&fp.theta_bar);
        let roundoff = (1e-13 * (1.0 + opt.norm())).powi(2);
        let floor = 2.0 * (gamma * (h as f64 - 1.0) * c1).powi(2) + roundoff;
        for pt in &tr.points {
            let bound = 2.0 * (1.0 - gamma * p.mu()).powi((h * pt.t) as i32) * d0 + floor;
            assert!(pt.theta.dist_sq(&opt) <= bound * (1.0 + 1e-12), "{name} t={}", pt.t);
        }
    }
}

#[test]
fn consistency_triangle_on_quadratic() {
    let p = quad();
    let (gamma, h) = (0.1, 4);
    let closed = quadratic_bias(&p, gamma, h).unwrap();
    let fp = find_fixed_point(&p, gamma, h, 1e-13).unwrap();
    let det = &fp.theta_bar - &p.global_optimum().unwrap();
    assert!((&closed - &det).norm() < 1e-10);
    let est = estimate_stationary(&p, gamma, h, 16, 200, 1000, 5).unwrap();
    let emp = est.bias();
    for i in 0..2 {
        assert!((emp[i] - closed[i]).abs() <= 4.0 * est.mean_stderr[i], "coordinate {i}");
    }
    assert!(est.stationarity_z() <= 4.0);
}

#[test]
fn expansion_residual_has_slope_two() {
    let p = quad();
    let gammas: Vec<f64> = (0..4).map(|k| 0.02 / 2f64.powi(k)).collect();
    let rows = slope_table(&p, &gammas, 5, SlopeQuantity::FirstOrderResidual).unwrap();
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let fit = loglog_slope(&xs, &ys).unwrap();
    assert!((fit.slope - 2.0).abs() <= 0.15, "slope {}", fit.slope);
}

#[test]
fn predicted_covariance_structure() {
    let a = DenseMatrix::from_rows(vec![vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
    let opt = DenseVector::new(vec![1.0, -1.0]).unwrap();
    let base = predicted_cov(&homogeneous_quadratic(a.clone(), opt.clone(), 1, 0.7), 0.1).unwrap();
    assert!(base.is_symmetric(1e-12));
    assert!(sym_eigen(&base).unwrap().min() > 0.0);
    let p1 = homogeneous_quadratic(a.clone(), opt.clone(), 1, 0.7);
    let double = predicted_cov(&p1, 0.2).unwrap();
    assert!((&double - &base.scale(2.0)).max_abs() < 1e-14);
    for n in [2, 4, 8] {
        let pn = predicted_cov(&homogeneous_quadratic(a.clone(), opt.clone(), n, 0.7), 0.1).unwrap();
        assert!((&pn.scale(n as f64) - &base).max_abs() < 1e-14);
    }
}

#[test]
fn scaffold_converges_to_the_global_optimum() {
    for (name, p) in [("quadratic", quad()), ("logistic", logistic_problem(2, 3, 4, 30, 0.1))] {
        let p = p.without_noise();
        let gamma = 1.0 / (4.0 * p.lip());
        let tr = run(&p, &RunConfig::new(Algorithm::Scaffold, gamma, 5, 3000, 0)).unwrap();
        let err = tr.last().dist_sq(&p.global_optimum().unwrap()).sqrt();
        assert!(err < 1e-8, "{name}: {err}");
        let fedavg = run(&p, &RunConfig::new(Algorithm::FedavgDet, gamma, 5, 3000, 0)).unwrap();
        assert!(fedavg.last().dist_sq(&p.global_optimum().unwrap()).sqrt() > 1e-4, "{name}");
    }
}

#[test]
fn coupled_chains_contract() {
    let p = logistic_problem(6, 3, 4, 30, 0.2);
    let (gamma, h) = (1.0 / (2.0 * p.lip()), 3);
    let tr = coupling_decay_from(&p, gamma, h, 200, 30, 1, 1.0).unwrap();
    let m0 = tr.rows[0].1;
    for &(t, m) in &tr.rows {
        assert!(m <= tr.rate_bound.powi(t as i32) * m0 * 1.1, "t={t}");
    }
}
