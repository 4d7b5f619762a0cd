//! Built-in problem generators.
//!
//! The two logistic datasets are two-blob mixtures in d = 2 split over
//! ten clients; blob geometry and regularization are free parameters held in
//! [`BlobConfig`]. All draws come from the path-keyed streams, so a seed
//! fully determines the generated problem.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{sym_eigen, DenseMatrix, DenseVector};
use crate::problems::{ClientObjective, LogisticClient, NoiseModel, Problem, QuadraticClient};
use crate::rng::RandomStream;

pub const FIG1_CLIENTS: usize = 10;
pub const DEFAULT_RECORDS_PER_CLIENT: usize = 1000;

/// Geometry of a two-blob dataset in the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    /// Blob centers are `(±center, 0)`; label `+1` sits at `+center`.
    pub center: f64,
    /// Isotropic standard deviation of each blob.
    pub std: f64,
    pub reg: f64,
    pub margin: f64,
    /// Standard deviation of the feature perturbation applied to the copied
    /// records of the label-shuffled clients.
    pub perturb: f64,
}

impl BlobConfig {
    pub const NOISY: BlobConfig = BlobConfig {
        center: 3.0,
        std: 6.0,
        reg: 0.1,
        margin: 1.0,
        perturb: 0.0,
    };

    pub const HETEROGENEOUS: BlobConfig = BlobConfig {
        center: 4.0,
        std: 0.1,
        reg: 0.1,
        margin: 1.0,
        perturb: 0.1,
    };
}

fn blob_record(rng: &mut RandomStream, cfg: &BlobConfig) -> (DenseVector, f64) {
    let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let x0 = y * cfg.center + cfg.std * rng.sample::<f64, _>(StandardNormal);
    let x1 = cfg.std * rng.sample::<f64, _>(StandardNormal);
    (DenseVector::new(vec![x0, x1]).unwrap(), y)
}

fn logistic_problem(
    clients: Vec<(Vec<DenseVector>, Vec<f64>)>,
    cfg: &BlobConfig,
    label: &str,
    seed: u64,
) -> Problem {
    let clients = clients
        .into_iter()
        .map(|(features, labels)| {
            ClientObjective::Logistic(LogisticClient {
                features,
                labels,
                reg: cfg.reg,
                margin: cfg.margin,
            })
        })
        .collect();
    Problem::new(clients, NoiseModel::SingleSample)
        .expect("generated logistic problem is valid")
        .with_label(Some(label.to_string()))
        .with_seed(Some(seed))
}

/// Two wide blobs, records split uniformly among ten clients.
pub fn gen_synthetic_noisy(seed: u64, n_per_client: usize) -> Problem {
    gen_synthetic_noisy_with(seed, n_per_client, &BlobConfig::NOISY)
}

pub fn gen_synthetic_noisy_with(seed: u64, n_per_client: usize, cfg: &BlobConfig) -> Problem {
    assert!(n_per_client > 0);
    let mut rng = RandomStream::aux(seed, 1);
    let mut records: Vec<_> = (0..FIG1_CLIENTS * n_per_client)
        .map(|_| blob_record(&mut rng, cfg))
        .collect();
    records.shuffle(&mut rng);
    let clients = records
        .chunks(n_per_client)
        .map(|chunk| chunk.iter().cloned().unzip())
        .collect();
    logistic_problem(clients, cfg, "synthetic_noisy", seed)
}

/// Two tight blobs; the first half of the clients hold clean records, the
/// second half hold perturbed copies whose labels are shuffled.
pub fn gen_synthetic_heterogeneous(seed: u64, n_per_client: usize) -> Problem {
    gen_synthetic_heterogeneous_with(seed, n_per_client, &BlobConfig::HETEROGENEOUS)
}

pub fn gen_synthetic_heterogeneous_with(
    seed: u64,
    n_per_client: usize,
    cfg: &BlobConfig,
) -> Problem {
    assert!(n_per_client > 0);
    let mut rng = RandomStream::aux(seed, 2);
    let half = FIG1_CLIENTS / 2;
    let mut clients = Vec::with_capacity(FIG1_CLIENTS);
    let mut clean = Vec::with_capacity(half);
    for _ in 0..half {
        let recs: (Vec<_>, Vec<_>) = (0..n_per_client)
            .map(|_| blob_record(&mut rng, cfg))
            .unzip();
        clean.push(recs);
    }
    for c in 0..(FIG1_CLIENTS - half) {
        let (src_x, src_y) = &clean[c % half];
        let features: Vec<_> = src_x
            .iter()
            .map(|x| {
                DenseVector::from_fn(x.len(), |k| {
                    x[k] + cfg.perturb * rng.sample::<f64, _>(StandardNormal)
                })
            })
            .collect();
        let mut labels = src_y.clone();
        labels.shuffle(&mut rng);
        clients.push((features, labels));
    }
    let mut all = clean;
    all.extend(clients);
    logistic_problem(all, cfg, "synthetic_heterogeneous", seed)
}

/// Parameters for random quadratic populations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticConfig {
    /// Hessian eigenvalues are drawn uniformly in `[eig_min, eig_max]`.
    pub eig_min: f64,
    pub eig_max: f64,
    /// Local optima are `N(0, opt_scale²·Id)`.
    pub opt_scale: f64,
    /// Additive gradient noise `N(0, noise_sigma²·Id)` on every client.
    pub noise_sigma: f64,
}

impl Default for QuadraticConfig {
    fn default() -> Self {
        QuadraticConfig {
            eig_min: 0.5,
            eig_max: 2.0,
            opt_scale: 1.0,
            noise_sigma: 1.0,
        }
    }
}

/// Random heterogeneous quadratic population.
pub fn random_quadratic(seed: u64, dim: usize, n_clients: usize, cfg: &QuadraticConfig) -> Problem {
    let mut rng = RandomStream::aux(seed, 3);
    let clients = (0..n_clients)
        .map(|_| {
            let raw = DenseMatrix::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let q = sym_eigen(&(&raw + &raw.transpose()))
                .expect("symmetric")
                .vectors;
            let eigs: Vec<f64> = (0..dim)
                .map(|_| rng.random_range(cfg.eig_min..=cfg.eig_max))
                .collect();
            let a = DenseMatrix::from_fn(dim, |i, j| {
                (0..dim).map(|k| q.get(i, k) * eigs[k] * q.get(j, k)).sum()
            })
            .symmetrize();
            let local_opt =
                DenseVector::from_fn(dim, |_| cfg.opt_scale * rng.sample::<f64, _>(StandardNormal));
            ClientObjective::Quadratic(QuadraticClient { a, local_opt })
        })
        .collect();
    Problem::new(clients, NoiseModel::isotropic(n_clients, dim, cfg.noise_sigma))
        .expect("generated quadratic problem is valid")
        .with_label(Some("random_quadratic".into()))
        .with_seed(Some(seed))
}

/// Scalar quadratic population `f_c(θ) = a_c (θ − m_c)² / 2` with additive
/// noise of standard deviation `sigma`.
pub fn scalar_quadratic(curvatures: &[f64], optima: &[f64], sigma: f64) -> Problem {
    assert_eq!(curvatures.len(), optima.len());
    let clients = curvatures
        .iter()
        .zip(optima)
        .map(|(&a, &m)| {
            ClientObjective::Quadratic(QuadraticClient {
                a: DenseMatrix::diag(&[a]),
                local_opt: DenseVector::new(vec![m]).unwrap(),
            })
        })
        .collect();
    Problem::new(clients, NoiseModel::isotropic(curvatures.len(), 1, sigma))
        .expect("valid scalar quadratic")
        .with_label(Some("scalar_quadratic".into()))
}

/// Homogeneous one-dimensional `f(θ) = log(1 + e^θ) + (reg/2) θ²` on every
/// client, with additive gradient noise of standard deviation `sigma`.
pub fn softplus_1d(n_clients: usize, reg: f64, sigma: f64) -> Problem {
    let client = ClientObjective::Logistic(LogisticClient {
        features: vec![DenseVector::new(vec![-1.0]).unwrap()],
        labels: vec![1.0],
        reg,
        margin: 0.0,
    });
    Problem::new(
        vec![client; n_clients],
        NoiseModel::isotropic(n_clients, 1, sigma),
    )
    .expect("valid softplus problem")
    .with_label(Some("softplus_1d".into()))
}
