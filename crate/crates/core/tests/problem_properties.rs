mod common;

use common::{gaussian_vec, logistic_problem, rng};
use fedbias::datasets::{
    gen_synthetic_heterogeneous, gen_synthetic_noisy, random_quadratic, softplus_1d, QuadraticConfig,
};
use fedbias::problems::ClientObjective;
use fedbias::rng::RandomStream;
use fedbias::{DenseVector, Problem};

fn corpus() -> Vec<(&'static str, Problem)> {
    vec![
        ("logistic_d3", logistic_problem(1, 3, 3, 25, 0.1)),
        ("quadratic_d3", random_quadratic(2, 3, 4, &QuadraticConfig::default())),
        ("softplus", softplus_1d(2, 0.1, 0.5)),
        ("noisy", gen_synthetic_noisy(0, 50)),
        ("heterogeneous", gen_synthetic_heterogeneous(0, 50)),
    ]
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

#[test]
fn derivatives_match_finite_differences() {
    let eps = 1e-5;
    for (name, p) in corpus() {
        let d = p.dim();
        let mut r = rng(11);
        for _ in 0..20 {
            let theta = gaussian_vec(&mut r, d, 0.5);
            for c in 0..p.n_clients() {
                let g = p.grad(c, &theta).unwrap();
                let h = p.hess(c, &theta).unwrap();
                let t = p.third(c, &theta).unwrap();
                for i in 0..d {
                    let e = DenseVector::basis(d, i).scale(eps);
                    let (plus, minus) = (&theta + &e, &theta - &e);
                    let fd = (p.loss(c, &plus).unwrap() - p.loss(c, &minus).unwrap()) / (2.0 * eps);
                    assert!(rel_err(fd, g[i]) < 1e-6, "{name}: grad[{i}] {} vs {fd}", g[i]);
                    let dg = &p.grad(c, &plus).unwrap() - &p.grad(c, &minus).unwrap();
                    let dh = &p.hess(c, &plus).unwrap() - &p.hess(c, &minus).unwrap();
                    for j in 0..d {
                        let fd = dg[j] / (2.0 * eps);
                        assert!(rel_err(fd, h.get(i, j)) < 1e-5, "{name}: hess[{i},{j}]");
                        for k in 0..d {
                            let fd = dh.get(j, k) / (2.0 * eps);
                            assert!(rel_err(fd, t.get(i, j, k)) < 1e-4, "{name}: third[{i},{j},{k}]");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn stochastic_gradients_are_unbiased() {
    let draws = 100_000;
    for (name, p) in corpus() {
        let d = p.dim();
        let mut points = vec![p.global_optimum().unwrap()];
        let mut r = rng(5);
        points.extend((0..3).map(|_| gaussian_vec(&mut r, d, 1.0)));
        for (k, theta) in points.iter().enumerate() {
            let c = k % p.n_clients();
            let exact = p.grad(c, theta).unwrap();
            let mut stream = RandomStream::aux(77, k as u64);
            let mut sum = DenseVector::zeros(d);
            let mut sum_sq = DenseVector::zeros(d);
            for _ in 0..draws {
                let g = p.sample_grad(c, theta, &mut stream).unwrap();
                for i in 0..d {
                    sum[i] += g[i];
                    sum_sq[i] += g[i] * g[i];
                }
            }
            let n = draws as f64;
            for i in 0..d {
                let mean = sum[i] / n;
                let var = (sum_sq[i] / n - mean * mean).max(0.0);
                let se = (var / n).sqrt();
                assert!(
                    (mean - exact[i]).abs() <= 4.0 * se + 1e-12,
                    "{name}: coordinate {i} mean {mean} vs {} (se {se})",
                    exact[i]
                );
            }
        }
    }
}

#[test]
fn per_record_gradients_are_cocoercive() {
    let p = logistic_problem(3, 3, 2, 30, 0.1);
    let mut r = rng(8);
    for c in 0..p.n_clients() {
        let ClientObjective::Logistic(l) = &p.clients()[c] else {
            unreachable!()
        };
        let max_sq = l.features.iter().map(|x| x.norm_sq()).fold(0.0, f64::max);
        let lip = l.reg + max_sq / 4.0;
        for _ in 0..100 {
            let x = gaussian_vec(&mut r, 3, 2.0);
            let y = gaussian_vec(&mut r, 3, 2.0);
            let gx = p.record_grads(c, &x).unwrap();
            let gy = p.record_grads(c, &y).unwrap();
            for (a, b) in gx.iter().zip(&gy) {
                let dg = a - b;
                let lhs = dg.dot(&(&x - &y));
                assert!(lhs + 1e-12 >= dg.norm_sq() / lip);
            }
        }
    }
}

#[test]
fn gradients_sum_to_zero_at_optimum() {
    for (name, p) in corpus() {
        let opt = p.global_optimum().unwrap();
        let mut total = DenseVector::zeros(p.dim());
        for c in 0..p.n_clients() {
            total.axpy(1.0, &p.grad(c, &opt).unwrap());
        }
        assert!(total.norm() < 1e-9, "{name}: {}", total.norm());
    }
}

#[test]
fn hessians_respect_curvature_bounds() {
    for (name, p) in corpus() {
        let opt = p.global_optimum().unwrap();
        let eig = fedbias::linalg::sym_eigen(&p.full_hess(&opt)).unwrap();
        assert!(eig.min() >= p.mu() * (1.0 - 1e-10), "{name}");
        assert!(eig.max() <= p.lip() * (1.0 + 1e-10), "{name}");
    }
}

#[test]
fn single_sample_noise_covariance_matches_records() {
    let p = logistic_problem(4, 2, 2, 10, 0.2);
    let opt = p.global_optimum().unwrap();
    let cov = p.noise_cov_at_opt().unwrap();
    let mut want = fedbias::DenseMatrix::zeros(2);
    for c in 0..2 {
        let g = p.grad(c, &opt).unwrap();
        let recs = p.record_grads(c, &opt).unwrap();
        for r in &recs {
            let e = r - &g;
            want.axpy(1.0 / (2.0 * recs.len() as f64), &e.outer(&e));
        }
    }
    assert!((&cov - &want).max_abs() < 1e-12);
}
