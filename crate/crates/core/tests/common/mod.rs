#![allow(dead_code)]

use fedbias::problems::{ClientObjective, LogisticClient, QuadraticClient};
use fedbias::{DenseMatrix, DenseVector, NoiseModel, Problem};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

pub fn v(xs: &[f64]) -> DenseVector {
    DenseVector::new(xs.to_vec()).unwrap()
}

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut StdRng, d: usize, scale: f64) -> DenseVector {
    DenseVector::from_fn(d, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Heterogeneous logistic clients in dimension `d`: client `c` sees features
/// shifted by a client-specific offset and labels from a client-specific
/// direction, so gradients and Hessians differ at the optimum.
pub fn logistic_problem(seed: u64, d: usize, n_clients: usize, records: usize, reg: f64) -> Problem {
    let mut r = rng(seed);
    let clients = (0..n_clients)
        .map(|_| {
            let shift = gaussian_vec(&mut r, d, 1.0);
            let dir = gaussian_vec(&mut r, d, 1.0);
            let mut features = Vec::with_capacity(records);
            let mut labels = Vec::with_capacity(records);
            for _ in 0..records {
                let mut x = gaussian_vec(&mut r, d, 1.0);
                x.axpy(1.0, &shift);
                let y = if x.dot(&dir) + 0.5 * r.sample::<f64, _>(StandardNormal) > 0.0 {
                    1.0
                } else {
                    -1.0
                };
                features.push(x);
                labels.push(y);
            }
            ClientObjective::Logistic(LogisticClient {
                features,
                labels,
                reg,
                margin: 0.0,
            })
        })
        .collect();
    Problem::new(clients, NoiseModel::SingleSample).unwrap()
}

/// Quadratic population sharing one Hessian, with identical optima.
pub fn homogeneous_quadratic(a: DenseMatrix, opt: DenseVector, n_clients: usize, sigma: f64) -> Problem {
    let d = opt.len();
    let clients = vec![ClientObjective::Quadratic(QuadraticClient { a, local_opt: opt }); n_clients];
    Problem::new(clients, NoiseModel::isotropic(n_clients, d, sigma)).unwrap()
}
