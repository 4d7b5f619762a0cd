//! Client objective families, gradient noise models and the federated
//! problem they form.
//!
//! Two families are supported: quadratics `½‖Ā_c^{1/2}(θ − θ*_c)‖²` and
//! ridge-regularized logistic regression with loss
//! `log(1 + exp(margin − y·xᵀθ)) + (λ/2)‖θ‖²` averaged over a client's
//! records. Clients are indexed from 0.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, DenseMatrix, DenseVector, SymTensor3, MAX_DIM};

const PSD_RTOL: f64 = 1e-12;
const OPT_GRAD_TOL: f64 = 1e-12;
const OPT_MAX_ITERS: usize = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticClient {
    /// Hessian `Ā_c`.
    pub a: DenseMatrix,
    /// Local minimizer `θ*_c`.
    pub local_opt: DenseVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticClient {
    pub features: Vec<DenseVector>,
    /// Labels in `{-1, +1}`.
    pub labels: Vec<f64>,
    /// Ridge coefficient λ.
    pub reg: f64,
    /// Shift inside the loss, `log(1 + exp(margin − y xᵀθ))`.
    #[serde(default)]
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ClientObjective {
    Quadratic(QuadraticClient),
    Logistic(LogisticClient),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Quadratic,
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// `∇F_c(θ, Z) = ∇f_c(θ) + ξ`, `ξ ~ N(0, covs[c])`.
    AdditiveGaussian { covs: Vec<DenseMatrix> },
    /// Gradient of the loss at one uniformly drawn record (batch size one).
    SingleSample,
}

impl NoiseModel {
    /// Additive model with zero covariance: sampled gradients are exact.
    pub fn none(n_clients: usize, dim: usize) -> Self {
        NoiseModel::AdditiveGaussian {
            covs: vec![DenseMatrix::zeros(dim); n_clients],
        }
    }

    /// Same isotropic covariance `σ²·Id` on every client.
    pub fn isotropic(n_clients: usize, dim: usize, sigma: f64) -> Self {
        NoiseModel::AdditiveGaussian {
            covs: vec![DenseMatrix::identity(dim).scale(sigma * sigma); n_clients],
        }
    }
}

/// Gradient and Hessian dissimilarity at the optimum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heterogeneity {
    pub delta1: f64,
    pub delta2: f64,
}

/// On-disk form of a [`Problem`].
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ProblemFile {
    family: Family,
    n_clients: usize,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    mu: f64,
    lip: f64,
    noise: NoiseModel,
    clients: Vec<ClientObjective>,
}

/// A federated problem `f = (1/N) Σ_c f_c` with its noise model.
///
/// Immutable after construction. The global optimum is computed lazily and
/// cached.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ProblemFile", into = "ProblemFile")]
pub struct Problem {
    family: Family,
    dim: usize,
    mu: f64,
    lip: f64,
    label: Option<String>,
    seed: Option<u64>,
    clients: Vec<ClientObjective>,
    noise: NoiseModel,
    /// Square roots of the additive covariances (`None` where the covariance is zero).
    noise_factors: Vec<Option<DenseMatrix>>,
    optimum: OnceLock<DenseVector>,
}

impl TryFrom<ProblemFile> for Problem {
    type Error = Error;
    fn try_from(f: ProblemFile) -> Result<Self> {
        if f.clients.len() != f.n_clients {
            return Err(Error::invalid(format!(
                "n_clients = {} but {} clients listed",
                f.n_clients,
                f.clients.len()
            )));
        }
        let p = Problem::new(f.clients, f.noise)?;
        if p.dim != f.dim {
            return Err(Error::DimensionMismatch {
                expected: f.dim,
                found: p.dim,
            });
        }
        if p.family != f.family {
            return Err(Error::invalid("declared family does not match clients"));
        }
        Ok(p.with_label(f.label).with_seed(f.seed))
    }
}

impl From<Problem> for ProblemFile {
    fn from(p: Problem) -> Self {
        ProblemFile {
            family: p.family,
            n_clients: p.clients.len(),
            dim: p.dim,
            label: p.label,
            seed: p.seed,
            mu: p.mu,
            lip: p.lip,
            noise: p.noise,
            clients: p.clients,
        }
    }
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

impl LogisticClient {
    fn n_records(&self) -> usize {
        self.labels.len()
    }

    fn margin_arg(&self, i: usize, theta: &DenseVector) -> f64 {
        self.margin - self.labels[i] * self.features[i].dot(theta)
    }

    fn record_loss(&self, i: usize, theta: &DenseVector) -> f64 {
        softplus(self.margin_arg(i, theta)) + 0.5 * self.reg * theta.norm_sq()
    }

    /// `out = ∇ℓ_i(θ)`, ridge term included.
    fn record_grad_into(&self, i: usize, theta: &DenseVector, out: &mut DenseVector) {
        let s = sigmoid(self.margin_arg(i, theta));
        let coef = -self.labels[i] * s;
        let x = &self.features[i];
        for k in 0..theta.len() {
            out[k] = coef * x[k] + self.reg * theta[k];
        }
    }

    fn loss(&self, theta: &DenseVector) -> f64 {
        let n = self.n_records();
        (0..n).map(|i| self.record_loss(i, theta)).sum::<f64>() / n as f64
    }

    fn grad_into(&self, theta: &DenseVector, out: &mut DenseVector) {
        let n = self.n_records() as f64;
        let d = theta.len();
        for k in 0..d {
            out[k] = 0.0;
        }
        for (x, &y) in self.features.iter().zip(&self.labels) {
            let s = sigmoid(self.margin - y * x.dot(theta));
            let coef = -y * s / n;
            for k in 0..d {
                out[k] += coef * x[k];
            }
        }
        for k in 0..d {
            out[k] += self.reg * theta[k];
        }
    }

    fn hess(&self, theta: &DenseVector) -> DenseMatrix {
        let d = theta.len();
        let n = self.n_records() as f64;
        let mut h = DenseMatrix::identity(d).scale(self.reg);
        for (x, &y) in self.features.iter().zip(&self.labels) {
            let s = sigmoid(self.margin - y * x.dot(theta));
            h.axpy(s * (1.0 - s) / n, &x.outer(x));
        }
        h
    }

    fn third(&self, theta: &DenseVector) -> SymTensor3 {
        let d = theta.len();
        let n = self.n_records() as f64;
        let mut t = SymTensor3::zeros(d);
        for (x, &y) in self.features.iter().zip(&self.labels) {
            let s = sigmoid(self.margin - y * x.dot(theta));
            t.add_cube(-y * s * (1.0 - s) * (1.0 - 2.0 * s) / n, x);
        }
        t
    }

    /// Smoothness bound `λ + (1/n) Σ ‖x‖² / 4`.
    fn mean_smoothness(&self) -> f64 {
        let n = self.n_records() as f64;
        self.reg + self.features.iter().map(|x| x.norm_sq()).sum::<f64>() / (4.0 * n)
    }
}

impl ClientObjective {
    fn dim(&self) -> Option<usize> {
        match self {
            ClientObjective::Quadratic(q) => Some(q.local_opt.len()),
            ClientObjective::Logistic(l) => l.features.first().map(|x| x.len()),
        }
    }

    fn family(&self) -> Family {
        match self {
            ClientObjective::Quadratic(_) => Family::Quadratic,
            ClientObjective::Logistic(_) => Family::Logistic,
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        match self {
            ClientObjective::Quadratic(q) => {
                if q.a.dim() != d || q.local_opt.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: q.a.dim(),
                    });
                }
                if !q.a.is_symmetric(1e-10) {
                    return Err(Error::NotSymmetric {
                        asymmetry: q.a.asymmetry(),
                    });
                }
                let lmin = sym_eigen(&q.a)?.min();
                if lmin <= 0.0 {
                    return Err(Error::SingularOperator { eigenvalue: lmin });
                }
            }
            ClientObjective::Logistic(l) => {
                if l.features.is_empty() || l.features.len() != l.labels.len() {
                    return Err(Error::invalid(
                        "logistic client needs matching, non-empty features and labels",
                    ));
                }
                if !(l.reg > 0.0 && l.reg.is_finite()) {
                    return Err(Error::invalid("logistic ridge coefficient must be > 0"));
                }
                if !l.margin.is_finite() {
                    return Err(Error::invalid("logistic margin must be finite"));
                }
                for x in &l.features {
                    if x.len() != d {
                        return Err(Error::DimensionMismatch {
                            expected: d,
                            found: x.len(),
                        });
                    }
                    if !x.is_finite() {
                        return Err(Error::invalid("features must be finite"));
                    }
                }
                if l.labels.iter().any(|&y| y != 1.0 && y != -1.0) {
                    return Err(Error::invalid("labels must be -1 or +1"));
                }
            }
        }
        Ok(())
    }

    fn strong_convexity_and_smoothness(&self) -> Result<(f64, f64)> {
        match self {
            ClientObjective::Quadratic(q) => {
                let e = sym_eigen(&q.a)?;
                Ok((e.min(), e.max()))
            }
            ClientObjective::Logistic(l) => Ok((l.reg, l.mean_smoothness())),
        }
    }
}

impl Problem {
    /// Validates clients and noise model and derives `μ` and `L`.
    ///
    /// `μ` is the smallest and `L` the largest per-client constant. For
    /// logistic clients these are `λ` and `λ + (1/n)Σ‖x‖²/4`.
    pub fn new(clients: Vec<ClientObjective>, noise: NoiseModel) -> Result<Self> {
        let first = clients
            .first()
            .ok_or_else(|| Error::invalid("problem needs at least one client"))?;
        let family = first.family();
        let dim = first
            .dim()
            .ok_or_else(|| Error::invalid("cannot infer dimension from first client"))?;
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::invalid(format!(
                "dimension {dim} outside supported range 1..={MAX_DIM}"
            )));
        }
        let mut mu = f64::INFINITY;
        let mut lip = 0.0_f64;
        for c in &clients {
            if c.family() != family {
                return Err(Error::invalid("all clients must share one family"));
            }
            c.validate(dim)?;
            let (m, l) = c.strong_convexity_and_smoothness()?;
            mu = mu.min(m);
            lip = lip.max(l);
        }

        let noise_factors = match &noise {
            NoiseModel::AdditiveGaussian { covs } => {
                if covs.len() != clients.len() {
                    return Err(Error::invalid(format!(
                        "{} noise covariances for {} clients",
                        covs.len(),
                        clients.len()
                    )));
                }
                covs.iter()
                    .map(|cov| noise_factor(cov, dim))
                    .collect::<Result<Vec<_>>>()?
            }
            NoiseModel::SingleSample => {
                if family != Family::Logistic {
                    return Err(Error::UnsupportedFamily {
                        expected: "logistic (single-sample noise)",
                    });
                }
                vec![None; clients.len()]
            }
        };

        Ok(Problem {
            family,
            dim,
            mu,
            lip,
            label: None,
            seed: None,
            clients,
            noise,
            noise_factors,
            optimum: OnceLock::new(),
        })
    }

    pub fn with_label(mut self, label: Option<String>) -> Self {
        self.label = label;
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    /// Same objectives, different noise model.
    pub fn with_noise(&self, noise: NoiseModel) -> Result<Self> {
        Ok(Problem::new(self.clients.clone(), noise)?
            .with_label(self.label.clone())
            .with_seed(self.seed))
    }

    /// Same objectives with exact gradients.
    pub fn without_noise(&self) -> Self {
        self.with_noise(NoiseModel::none(self.n_clients(), self.dim))
            .expect("zero noise is always valid")
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn lip(&self) -> f64 {
        self.lip
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn clients(&self) -> &[ClientObjective] {
        &self.clients
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    /// True when every client has the same objective and the same noise law.
    pub fn is_homogeneous(&self) -> bool {
        let same_clients = self.clients.windows(2).all(|w| w[0] == w[1]);
        let same_noise = match &self.noise {
            NoiseModel::AdditiveGaussian { covs } => covs.windows(2).all(|w| w[0] == w[1]),
            NoiseModel::SingleSample => true,
        };
        same_clients && same_noise
    }

    /// True when all sampled gradients are exact.
    pub fn is_noiseless(&self) -> bool {
        matches!(self.noise, NoiseModel::AdditiveGaussian { .. })
            && self.noise_factors.iter().all(Option::is_none)
    }

    fn client(&self, c: usize) -> Result<&ClientObjective> {
        self.clients.get(c).ok_or(Error::ClientIndex {
            index: c,
            n_clients: self.clients.len(),
        })
    }

    pub fn loss(&self, c: usize, theta: &DenseVector) -> Result<f64> {
        Ok(match self.client(c)? {
            ClientObjective::Quadratic(q) => {
                let r = theta - &q.local_opt;
                0.5 * r.dot(&q.a.matvec(&r))
            }
            ClientObjective::Logistic(l) => l.loss(theta),
        })
    }

    /// Exact local gradient `∇f_c(θ)`.
    pub fn grad(&self, c: usize, theta: &DenseVector) -> Result<DenseVector> {
        let mut out = DenseVector::zeros(self.dim);
        self.grad_into(c, theta, &mut out)?;
        Ok(out)
    }

    pub fn grad_into(&self, c: usize, theta: &DenseVector, out: &mut DenseVector) -> Result<()> {
        match self.client(c)? {
            ClientObjective::Quadratic(q) => {
                let d = self.dim;
                for i in 0..d {
                    let mut s = 0.0;
                    for j in 0..d {
                        s += q.a.get(i, j) * (theta[j] - q.local_opt[j]);
                    }
                    out[i] = s;
                }
            }
            ClientObjective::Logistic(l) => l.grad_into(theta, out),
        }
        Ok(())
    }

    pub fn hess(&self, c: usize, theta: &DenseVector) -> Result<DenseMatrix> {
        Ok(match self.client(c)? {
            ClientObjective::Quadratic(q) => q.a.clone(),
            ClientObjective::Logistic(l) => l.hess(theta),
        })
    }

    pub fn third(&self, c: usize, theta: &DenseVector) -> Result<SymTensor3> {
        Ok(match self.client(c)? {
            ClientObjective::Quadratic(_) => SymTensor3::zeros(self.dim),
            ClientObjective::Logistic(l) => l.third(theta),
        })
    }

    pub fn full_loss(&self, theta: &DenseVector) -> f64 {
        (0..self.n_clients())
            .map(|c| self.loss(c, theta).unwrap())
            .sum::<f64>()
            / self.n_clients() as f64
    }

    pub fn full_grad(&self, theta: &DenseVector) -> DenseVector {
        let gs: Vec<_> = (0..self.n_clients())
            .map(|c| self.grad(c, theta).unwrap())
            .collect();
        DenseVector::mean(&gs)
    }

    pub fn full_hess(&self, theta: &DenseVector) -> DenseMatrix {
        let hs: Vec<_> = (0..self.n_clients())
            .map(|c| self.hess(c, theta).unwrap())
            .collect();
        DenseMatrix::mean(&hs)
    }

    pub fn full_third(&self, theta: &DenseVector) -> SymTensor3 {
        let mut t = SymTensor3::zeros(self.dim);
        for c in 0..self.n_clients() {
            t.axpy(1.0, &self.third(c, theta).unwrap());
        }
        t.scale(1.0 / self.n_clients() as f64)
    }

    /// One stochastic gradient `∇F_c(θ, Z)` drawn from `rng`.
    pub fn sample_grad<R: Rng + ?Sized>(
        &self,
        c: usize,
        theta: &DenseVector,
        rng: &mut R,
    ) -> Result<DenseVector> {
        let mut out = DenseVector::zeros(self.dim);
        self.sample_grad_into(c, theta, rng, &mut out)?;
        Ok(out)
    }

    pub fn sample_grad_into<R: Rng + ?Sized>(
        &self,
        c: usize,
        theta: &DenseVector,
        rng: &mut R,
        out: &mut DenseVector,
    ) -> Result<()> {
        match &self.noise {
            NoiseModel::AdditiveGaussian { .. } => {
                self.grad_into(c, theta, out)?;
                if let Some(f) = &self.noise_factors[c] {
                    let d = self.dim;
                    let mut xi = [0.0f64; MAX_DIM];
                    for x in xi.iter_mut().take(d) {
                        *x = rng.sample(StandardNormal);
                    }
                    for i in 0..d {
                        let mut s = 0.0;
                        for j in 0..d {
                            s += f.get(i, j) * xi[j];
                        }
                        out[i] += s;
                    }
                }
            }
            NoiseModel::SingleSample => match self.client(c)? {
                ClientObjective::Logistic(l) => {
                    let i = rng.random_range(0..l.n_records());
                    l.record_grad_into(i, theta, out);
                }
                ClientObjective::Quadratic(_) => unreachable!("validated at construction"),
            },
        }
        Ok(())
    }

    /// Per-record gradients of a logistic client (ridge included).
    pub fn record_grads(&self, c: usize, theta: &DenseVector) -> Result<Vec<DenseVector>> {
        match self.client(c)? {
            ClientObjective::Logistic(l) => Ok((0..l.n_records())
                .map(|i| {
                    let mut g = DenseVector::zeros(self.dim);
                    l.record_grad_into(i, theta, &mut g);
                    g
                })
                .collect()),
            ClientObjective::Quadratic(_) => Err(Error::UnsupportedFamily {
                expected: "logistic",
            }),
        }
    }

    /// Global minimizer `θ*` of `f`.
    pub fn global_optimum(&self) -> Result<DenseVector> {
        if let Some(opt) = self.optimum.get() {
            return Ok(opt.clone());
        }
        let opt = self.compute_optimum()?;
        Ok(self.optimum.get_or_init(|| opt).clone())
    }

    fn compute_optimum(&self) -> Result<DenseVector> {
        match self.family {
            Family::Quadratic => {
                let n = self.n_clients() as f64;
                let mut a_sum = DenseMatrix::zeros(self.dim);
                let mut b = DenseVector::zeros(self.dim);
                for c in &self.clients {
                    if let ClientObjective::Quadratic(q) = c {
                        a_sum.axpy(1.0 / n, &q.a);
                        b.axpy(1.0 / n, &q.a.matvec(&q.local_opt));
                    }
                }
                crate::linalg::solve_linear(&a_sum, &b)
            }
            Family::Logistic => {
                // Gradient descent with step 1/L, then a few Newton polishing
                // steps since 1/L descent stalls near roundoff on flat problems.
                let step = 1.0 / self.lip;
                let mut theta = DenseVector::zeros(self.dim);
                let mut g = self.full_grad(&theta);
                let mut iters = 0;
                while g.norm() > 1e-8 {
                    if iters == OPT_MAX_ITERS {
                        return Err(Error::NoConvergence {
                            iterations: iters,
                            last_step: g.norm(),
                        });
                    }
                    theta.axpy(-step, &g);
                    g = self.full_grad(&theta);
                    iters += 1;
                }
                for _ in 0..50 {
                    if g.norm() <= OPT_GRAD_TOL {
                        break;
                    }
                    let h = self.full_hess(&theta);
                    let dx = crate::linalg::solve_linear(&h, &g)?;
                    let next = &theta - &dx;
                    let gn = self.full_grad(&next);
                    if gn.norm() >= g.norm() {
                        break;
                    }
                    theta = next;
                    g = gn;
                }
                Ok(theta)
            }
        }
    }

    /// `(Δ₁, Δ₂)` at `θ*`; matrix deviations measured in spectral norm.
    pub fn heterogeneity(&self) -> Result<Heterogeneity> {
        let opt = self.global_optimum()?;
        let n = self.n_clients();
        let grads: Vec<_> = (0..n).map(|c| self.grad(c, &opt)).collect::<Result<_>>()?;
        let hessians: Vec<_> = (0..n).map(|c| self.hess(c, &opt)).collect::<Result<_>>()?;
        let g_bar = DenseVector::mean(&grads);
        let h_bar = DenseMatrix::mean(&hessians);
        let d1 = grads.iter().map(|g| g.dist_sq(&g_bar)).sum::<f64>() / n as f64;
        let mut d2 = 0.0;
        for h in &hessians {
            let s = (h - &h_bar).sym_spectral_norm()?;
            d2 += s * s;
        }
        Ok(Heterogeneity {
            delta1: d1.sqrt(),
            delta2: (d2 / n as f64).sqrt(),
        })
    }

    /// `C(θ*) = E[(1/N) Σ_c ε_c(θ*)^⊗2]`.
    pub fn noise_cov_at_opt(&self) -> Result<DenseMatrix> {
        let n = self.n_clients();
        match &self.noise {
            NoiseModel::AdditiveGaussian { covs } => Ok(DenseMatrix::mean(covs).symmetrize()),
            NoiseModel::SingleSample => {
                let opt = self.global_optimum()?;
                let mut acc = DenseMatrix::zeros(self.dim);
                for c in 0..n {
                    let g = self.grad(c, &opt)?;
                    let recs = self.record_grads(c, &opt)?;
                    let w = 1.0 / (recs.len() as f64 * n as f64);
                    for r in &recs {
                        let e = r - &g;
                        acc.axpy(w, &e.outer(&e));
                    }
                }
                Ok(acc.symmetrize())
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("problem serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn noise_factor(cov: &DenseMatrix, dim: usize) -> Result<Option<DenseMatrix>> {
    if cov.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: cov.dim(),
        });
    }
    if cov.max_abs() == 0.0 {
        return Ok(None);
    }
    let eig = sym_eigen(cov)?;
    let scale = cov.frobenius_norm();
    if eig.min() < -PSD_RTOL * scale {
        return Err(Error::invalid(format!(
            "noise covariance is not PSD (eigenvalue {:e})",
            eig.min()
        )));
    }
    let q = &eig.vectors;
    let roots: Vec<f64> = eig.values.iter().map(|l| l.max(0.0).sqrt()).collect();
    Ok(Some(DenseMatrix::from_fn(dim, |i, j| q.get(i, j) * roots[j])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets;
    use crate::rng::RandomStream;

    fn scalar_quadratic(a: f64, m: f64) -> ClientObjective {
        ClientObjective::Quadratic(QuadraticClient {
            a: DenseMatrix::diag(&[a]),
            local_opt: DenseVector::new(vec![m]).unwrap(),
        })
    }

    fn two_client_1d() -> Problem {
        Problem::new(
            vec![scalar_quadratic(1.0, 1.0), scalar_quadratic(3.0, 0.0)],
            NoiseModel::none(2, 1),
        )
        .unwrap()
    }

    fn v(xs: &[f64]) -> DenseVector {
        DenseVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_gradient_examples() {
        let p = Problem::new(vec![scalar_quadratic(3.0, 0.0)], NoiseModel::none(1, 1)).unwrap();
        assert_eq!(p.grad(0, &v(&[0.0])).unwrap()[0], 0.0);
        assert_eq!(p.grad(0, &v(&[0.25])).unwrap()[0], 0.75);
        assert_eq!(p.hess(0, &v(&[5.0])).unwrap().get(0, 0), 3.0);
        assert_eq!(p.third(0, &v(&[5.0])).unwrap().norm(), 0.0);
        assert!(matches!(p.grad(1, &v(&[0.0])), Err(Error::ClientIndex { .. })));
    }

    #[test]
    fn weighted_mean_optimum_and_heterogeneity() {
        let p = two_client_1d();
        let opt = p.global_optimum().unwrap();
        assert!((opt[0] - 0.25).abs() < 1e-15);
        let h = p.heterogeneity().unwrap();
        assert!((h.delta1 - 0.75).abs() < 1e-14);
        assert!((h.delta2 - 1.0).abs() < 1e-14);
        assert!((p.mu() - 1.0).abs() < 1e-15 && (p.lip() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn homogeneous_problem_has_zero_heterogeneity() {
        let p = Problem::new(
            vec![scalar_quadratic(2.0, 0.7); 3],
            NoiseModel::isotropic(3, 1, 1.0),
        )
        .unwrap();
        assert!(p.is_homogeneous());
        assert!((p.global_optimum().unwrap()[0] - 0.7).abs() < 1e-15);
        let h = p.heterogeneity().unwrap();
        assert_eq!((h.delta1, h.delta2), (0.0, 0.0));
    }

    #[test]
    fn equal_hessians_give_zero_delta2() {
        let p = Problem::new(
            vec![scalar_quadratic(2.0, 1.0), scalar_quadratic(2.0, -3.0)],
            NoiseModel::none(2, 1),
        )
        .unwrap();
        let h = p.heterogeneity().unwrap();
        assert_eq!(h.delta2, 0.0);
        assert!(h.delta1 > 0.0);
    }

    #[test]
    fn zero_noise_is_exact() {
        let p = two_client_1d();
        assert!(p.is_noiseless());
        let theta = v(&[0.3]);
        let mut rng = RandomStream::aux(1, 0);
        assert_eq!(
            p.sample_grad(1, &theta, &mut rng).unwrap(),
            p.grad(1, &theta).unwrap()
        );
        assert_eq!(p.noise_cov_at_opt().unwrap(), DenseMatrix::zeros(1));
    }

    #[test]
    fn isotropic_noise_cov() {
        let p = Problem::new(
            vec![scalar_quadratic(1.0, 1.0), scalar_quadratic(3.0, 0.0)],
            NoiseModel::isotropic(2, 1, 0.5),
        )
        .unwrap();
        assert!((p.noise_cov_at_opt().unwrap().get(0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn construction_errors() {
        let asym = ClientObjective::Quadratic(QuadraticClient {
            a: DenseMatrix::from_rows(vec![vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap(),
            local_opt: DenseVector::zeros(2),
        });
        assert!(Problem::new(vec![asym], NoiseModel::none(1, 2)).is_err());
        assert!(Problem::new(vec![], NoiseModel::none(0, 1)).is_err());
        assert!(Problem::new(vec![scalar_quadratic(0.0, 1.0)], NoiseModel::none(1, 1)).is_err());
        assert!(Problem::new(vec![scalar_quadratic(1.0, 1.0)], NoiseModel::SingleSample).is_err());
        assert!(Problem::new(vec![scalar_quadratic(1.0, 1.0)], NoiseModel::none(2, 1)).is_err());
        let bad_cov = NoiseModel::AdditiveGaussian {
            covs: vec![DenseMatrix::diag(&[-1.0])],
        };
        assert!(Problem::new(vec![scalar_quadratic(1.0, 1.0)], bad_cov).is_err());
        let no_reg = ClientObjective::Logistic(LogisticClient {
            features: vec![v(&[1.0])],
            labels: vec![1.0],
            reg: 0.0,
            margin: 1.0,
        });
        assert!(Problem::new(vec![no_reg], NoiseModel::SingleSample).is_err());
        let big = ClientObjective::Quadratic(QuadraticClient {
            a: DenseMatrix::identity(MAX_DIM + 1),
            local_opt: DenseVector::zeros(MAX_DIM + 1),
        });
        assert!(Problem::new(vec![big], NoiseModel::none(1, MAX_DIM + 1)).is_err());
    }

    #[test]
    fn single_sample_enumeration_reproduces_gradient() {
        let p = datasets::gen_synthetic_heterogeneous(3, 40);
        let theta = v(&[0.3, -0.2]);
        for c in [0, 7] {
            let recs = p.record_grads(c, &theta).unwrap();
            let mean = DenseVector::mean(&recs);
            assert!((&mean - &p.grad(c, &theta).unwrap()).norm() < 1e-13);
        }
    }

    #[test]
    fn json_roundtrip_preserves_digest() {
        let p = datasets::gen_synthetic_noisy(5, 20);
        let json = p.to_json().unwrap();
        let back = Problem::from_json(&json).unwrap();
        assert_eq!(back.digest(), p.digest());
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn json_rejects_inconsistent_header() {
        let p = two_client_1d();
        let mut value: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        value["n_clients"] = serde_json::json!(3);
        assert!(serde_json::from_value::<Problem>(value).is_err());
    }
}
