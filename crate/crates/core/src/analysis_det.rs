//! Deterministic oracles: the FedAvg-D fixed point, the exact bias identity
//! built from integrated Hessians, and the first-order heterogeneity bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedavg::{check_step_size, round_det};
use crate::linalg::{gauss_legendre_unit, solve_linear, DenseMatrix, DenseVector};
use crate::problems::{ClientObjective, Problem};

pub const DEFAULT_FIXED_POINT_TOL: f64 = 1e-12;
pub const QUADRATURE_ORDER: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResult {
    pub theta_bar: DenseVector,
    /// `‖T(θ̄) − θ̄‖` for the returned point.
    pub residual: f64,
    pub iterations: usize,
}

/// Iterates FedAvg-D rounds until the step falls below
/// `tol·(1 − (1 − γμ)^{H/2})`, which bounds the distance to the fixed point
/// by `tol`. Steps at the roundoff level of `θ` also stop the iteration.
pub fn find_fixed_point(p: &Problem, gamma: f64, h_local: usize, tol: f64) -> Result<FixedPointResult> {
    if h_local == 0 || !(gamma > 0.0) {
        return Err(Error::invalid("need gamma > 0 and H ≥ 1"));
    }
    check_step_size(p, gamma, false)?;
    let rho = (1.0 - gamma * p.mu()).powf(h_local as f64 / 2.0);
    let target = tol * (1.0 - rho);
    let max_iter = 1000 + (400.0 / (1.0 - rho)).ceil() as usize;
    let mut theta = p.global_optimum()?;
    let mut iterations = 0;
    loop {
        let next = round_det(p, &theta, gamma, h_local)?;
        let step = (&next - &theta).norm();
        iterations += 1;
        let floor = 64.0 * f64::EPSILON * (1.0 + next.norm());
        theta = next;
        if step <= target.max(floor) {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::NoConvergence {
                iterations,
                last_step: step,
            });
        }
    }
    let residual = (&round_det(p, &theta, gamma, h_local)? - &theta).norm();
    Ok(FixedPointResult {
        theta_bar: theta,
        residual,
        iterations,
    })
}

/// `∫₀¹ ∇²f_c(a + u(b − a)) du`.
fn integrated_hessian(p: &Problem, c: usize, a: &DenseVector, b: &DenseVector) -> Result<DenseMatrix> {
    if let ClientObjective::Quadratic(q) = &p.clients()[c] {
        return Ok(q.a.clone());
    }
    let diff = b - a;
    let mut acc = DenseMatrix::zeros(p.dim());
    for (u, w) in gauss_legendre_unit(QUADRATURE_ORDER) {
        let mut x = a.clone();
        x.axpy(u, &diff);
        acc.axpy(w, &p.hess(c, &x)?);
    }
    Ok(acc.symmetrize())
}

/// Right-hand side of the exact bias identity at the fixed point `theta_bar`.
///
/// Along the local path `θ_c^h` started at `θ̄`, each step satisfies
/// `θ_c^{h+1} − θ* = M_c^h(θ_c^h − θ*) − γ∇f_c(θ*)` with
/// `M_c^h = Id − γJ_c^h` and `J_c^h` the Hessian integrated over the segment
/// `[θ*, θ_c^h]`. Averaging over clients gives
/// `θ̄ − θ* = −(γ/N)(Id − F̄)^{-1} Σ_c Σ_h F_{c,h+1:H} ∇f_c(θ*)`, where
/// `F_{c,a:b} = M_c^{b−1}···M_c^a` and `F̄ = (1/N) Σ_c F_{c,0:H}`.
pub fn gamma_matrix_bias(
    p: &Problem,
    gamma: f64,
    h_local: usize,
    theta_bar: &DenseVector,
) -> Result<DenseVector> {
    let d = p.dim();
    if theta_bar.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: theta_bar.len(),
        });
    }
    let opt = p.global_optimum()?;
    let n = p.n_clients();
    let mut f_bar = DenseMatrix::zeros(d);
    let mut rhs = DenseVector::zeros(d);
    let mut g = DenseVector::zeros(d);
    for c in 0..n {
        let g_opt = p.grad(c, &opt)?;
        let mut x = theta_bar.clone();
        let mut prod = DenseMatrix::identity(d);
        let mut s = DenseVector::zeros(d);
        for _ in 0..h_local {
            let mut m = DenseMatrix::identity(d);
            m.axpy(-gamma, &integrated_hessian(p, c, &opt, &x)?);
            prod = m.matmul(&prod);
            s = &m.matvec(&s) + &g_opt;
            p.grad_into(c, &x, &mut g)?;
            x.axpy(-gamma, &g);
        }
        f_bar.axpy(1.0 / n as f64, &prod);
        rhs.axpy(-gamma / n as f64, &s);
    }
    let lhs = &DenseMatrix::identity(d) - &f_bar;
    solve_linear(&lhs, &rhs)
}

/// `γ(H − 1)LΔ₁/μ`.
pub fn bias_bound_det(p: &Problem, gamma: f64, h_local: usize) -> Result<f64> {
    let het = p.heterogeneity()?;
    Ok(gamma * (h_local.saturating_sub(1)) as f64 * p.lip() * het.delta1 / p.mu())
}

/// `b_h = (1/N) H̄^{-1} Σ_c (H_c − H̄) ∇f_c(θ*)` with Hessians at `θ*`.
///
/// With this sign `θ̄ − θ* = (γ(H − 1)/2)·b_h + O(γ²)` for fixed `H`.
pub fn first_order_bias_h(p: &Problem) -> Result<DenseVector> {
    let opt = p.global_optimum()?;
    let n = p.n_clients();
    let hessians: Vec<_> = (0..n).map(|c| p.hess(c, &opt)).collect::<Result<_>>()?;
    let h_bar = DenseMatrix::mean(&hessians);
    let mut acc = DenseVector::zeros(p.dim());
    for (c, h) in hessians.iter().enumerate() {
        acc.axpy(1.0 / n as f64, &(h - &h_bar).matvec(&p.grad(c, &opt)?));
    }
    solve_linear(&h_bar, &acc)
}

/// Everything the `fixed-point` command reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub gamma: f64,
    pub h_local: usize,
    pub theta_star: DenseVector,
    pub theta_bar: DenseVector,
    pub residual: f64,
    pub iterations: usize,
    pub bias: DenseVector,
    pub bias_identity_rhs: DenseVector,
    pub bias_bound: f64,
    pub b_h: DenseVector,
    pub first_order_prediction: DenseVector,
}

pub fn fixed_point_report(p: &Problem, gamma: f64, h_local: usize, tol: f64) -> Result<FixedPointReport> {
    let fp = find_fixed_point(p, gamma, h_local, tol)?;
    let opt = p.global_optimum()?;
    let b_h = first_order_bias_h(p)?;
    Ok(FixedPointReport {
        gamma,
        h_local,
        bias: &fp.theta_bar - &opt,
        bias_identity_rhs: gamma_matrix_bias(p, gamma, h_local, &fp.theta_bar)?,
        bias_bound: bias_bound_det(p, gamma, h_local)?,
        first_order_prediction: b_h.scale(gamma * (h_local as f64 - 1.0) / 2.0),
        b_h,
        theta_star: opt,
        theta_bar: fp.theta_bar,
        residual: fp.residual,
        iterations: fp.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_synthetic_heterogeneous, scalar_quadratic};

    fn example() -> Problem {
        scalar_quadratic(&[1.0, 3.0], &[1.0, 0.0], 0.0)
    }

    /// Scalar closed form of the quadratic fixed point.
    fn scalar_fixed_point(a: &[f64], m: &[f64], gamma: f64, h: i32) -> f64 {
        let n = a.len() as f64;
        let b: Vec<f64> = a.iter().map(|ai| (1.0 - gamma * ai).powi(h)).collect();
        let num: f64 = b.iter().zip(m).map(|(bi, mi)| (1.0 - bi) * mi).sum::<f64>() / n;
        let den = 1.0 - b.iter().sum::<f64>() / n;
        num / den
    }

    #[test]
    fn one_dimensional_example() {
        let p = example();
        let fp = find_fixed_point(&p, 0.1, 10, 1e-12).unwrap();
        assert!(fp.residual <= 1e-12);
        let want = scalar_fixed_point(&[1.0, 3.0], &[1.0, 0.0], 0.1, 10);
        assert!((fp.theta_bar[0] - want).abs() < 1e-11);
        let bias = fp.theta_bar[0] - 0.25;
        assert!((bias - 0.15129).abs() < 1e-5, "bias {bias}");
        let rhs = gamma_matrix_bias(&p, 0.1, 10, &fp.theta_bar).unwrap();
        assert!((rhs[0] - bias).abs() < 1e-11);
    }

    #[test]
    fn bias_vanishes_without_heterogeneity_or_local_steps() {
        let p = scalar_quadratic(&[2.0; 3], &[0.5; 3], 0.0);
        let fp = find_fixed_point(&p, 0.1, 10, 1e-12).unwrap();
        assert!((fp.theta_bar[0] - 0.5).abs() < 1e-12);
        let fp = find_fixed_point(&example(), 0.1, 1, 1e-12).unwrap();
        assert!((fp.theta_bar[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn first_order_terms_on_example() {
        let p = example();
        let b_h = first_order_bias_h(&p).unwrap();
        assert!((b_h[0] - 0.375).abs() < 1e-14);
        assert!((bias_bound_det(&p, 0.1, 10).unwrap() - 2.025).abs() < 1e-12);
        assert_eq!(bias_bound_det(&p, 0.1, 1).unwrap(), 0.0);
        let equal = scalar_quadratic(&[2.0, 2.0], &[1.0, -1.0], 0.0);
        assert!(first_order_bias_h(&equal).unwrap().norm() < 1e-15);
    }

    #[test]
    fn identity_holds_on_logistic() {
        let p = gen_synthetic_heterogeneous(3, 40);
        let gamma = 0.25 / p.lip();
        let fp = find_fixed_point(&p, gamma, 5, 1e-13).unwrap();
        let opt = p.global_optimum().unwrap();
        let bias = &fp.theta_bar - &opt;
        let rhs = gamma_matrix_bias(&p, gamma, 5, &fp.theta_bar).unwrap();
        assert!((&rhs - &bias).norm() < 1e-9 * (1.0 + bias.norm()));
    }

    #[test]
    fn gate_rejects_large_steps() {
        assert!(matches!(
            find_fixed_point(&example(), 0.5, 2, 1e-12),
            Err(Error::StepSizeGate { .. })
        ));
    }
}
