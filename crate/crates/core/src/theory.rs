//! Closed-form and first-order predictions for the long-run bias and
//! covariance of FedAvg, and for its extrapolated variants.

use serde::{Deserialize, Serialize};

use crate::analysis_det::{find_fixed_point, first_order_bias_h, DEFAULT_FIXED_POINT_TOL};
use crate::error::{Error, Result};
use crate::fedavg::rr_h_weights;
use crate::linalg::{contract3, matrix_power, solve_linear, solve_lyapunov, DenseMatrix, DenseVector};
use crate::problems::{ClientObjective, Family, Problem};

fn require_quadratic(p: &Problem) -> Result<()> {
    if p.family() != Family::Quadratic {
        return Err(Error::UnsupportedFamily {
            expected: "quadratic",
        });
    }
    Ok(())
}

/// Exact limit bias of FedAvg on a quadratic problem,
/// `(Id − B̄)^{-1} (1/N) Σ_c (Id − B_c)(θ*_c − θ*)` with `B_c = (Id − γĀ_c)^H`.
///
/// It is the same for the deterministic fixed point and for the stationary
/// mean, since the noise enters the quadratic dynamics additively.
pub fn quadratic_bias(p: &Problem, gamma: f64, h_local: usize) -> Result<DenseVector> {
    require_quadratic(p)?;
    let d = p.dim();
    let n = p.n_clients() as f64;
    let opt = p.global_optimum()?;
    let id = DenseMatrix::identity(d);
    let mut b_bar = DenseMatrix::zeros(d);
    let mut rhs = DenseVector::zeros(d);
    for client in p.clients() {
        if let ClientObjective::Quadratic(q) = client {
            let mut step = id.clone();
            step.axpy(-gamma, &q.a);
            let b = matrix_power(&step, h_local);
            rhs.axpy(1.0 / n, &(&id - &b).matvec(&(&q.local_opt - &opt)));
            b_bar.axpy(1.0 / n, &b);
        }
    }
    solve_linear(&(&id - &b_bar), &rhs)
}

/// `γ(H − 1)Δ₂Δ₁/(2μ)`.
pub fn quadratic_bias_bound(p: &Problem, gamma: f64, h_local: usize) -> Result<f64> {
    require_quadratic(p)?;
    let het = p.heterogeneity()?;
    Ok(gamma * h_local.saturating_sub(1) as f64 * het.delta2 * het.delta1 / (2.0 * p.mu()))
}

/// The looser form without the factor one half.
pub fn quadratic_bias_bound_loose(p: &Problem, gamma: f64, h_local: usize) -> Result<f64> {
    Ok(2.0 * quadratic_bias_bound(p, gamma, h_local)?)
}

/// `A·C(θ*)`: the solution `X` of `H̄X + XH̄ = C(θ*)` with `H̄ = ∇²f(θ*)`.
pub fn lyapunov_noise(p: &Problem) -> Result<DenseMatrix> {
    let opt = p.global_optimum()?;
    solve_lyapunov(&p.full_hess(&opt), &p.noise_cov_at_opt()?)
}

/// Stationary covariance to first order, `(γ/N)·A·C(θ*)`.
pub fn predicted_cov(p: &Problem, gamma: f64) -> Result<DenseMatrix> {
    Ok(lyapunov_noise(p)?
        .scale(gamma / p.n_clients() as f64)
        .symmetrize())
}

/// `b_s = −H̄^{-1}·∇³f(θ*)[A·C(θ*)]`.
///
/// With this sign the stationary mean satisfies
/// `μ̄ − θ* = (γ/(2N))·b_s + …` on homogeneous problems. In one dimension it
/// reads `−f‴σ²/(2f″²)`.
pub fn stochastic_bias_b_s(p: &Problem) -> Result<DenseVector> {
    let opt = p.global_optimum()?;
    let ac = lyapunov_noise(p)?;
    let v = contract3(&p.full_third(&opt), &ac)?;
    Ok(solve_linear(&p.full_hess(&opt), &v)?.scale(-1.0))
}

/// Rows of the bias summary table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Exact gradients: heterogeneity bias only, no covariance.
    Deterministic,
    /// Quadratic objectives: no stochasticity bias.
    Quadratic,
    /// Identical clients: no heterogeneity bias.
    Homogeneous,
    Heterogeneous,
}

impl Setting {
    pub fn detect(p: &Problem) -> Setting {
        if p.is_noiseless() {
            Setting::Deterministic
        } else if p.family() == Family::Quadratic {
            Setting::Quadratic
        } else if p.is_homogeneous() {
            Setting::Homogeneous
        } else {
            Setting::Heterogeneous
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Setting::Deterministic),
            "quadratic" => Ok(Setting::Quadratic),
            "homogeneous" => Ok(Setting::Homogeneous),
            "heterogeneous" => Ok(Setting::Heterogeneous),
            other => Err(Error::invalid(format!("unknown setting '{other}'"))),
        }
    }
}

/// First-order bias prediction split by source, optionally compared with a
/// measured bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub setting: Setting,
    pub gamma: f64,
    pub h_local: usize,
    pub n_clients: usize,
    /// `(γ(H − 1)/2)·b_h`.
    pub bias_het: DenseVector,
    /// `(γ/(2N))·b_s`.
    pub bias_sto: DenseVector,
    pub bias_total: DenseVector,
    /// `(γ/N)·A·C(θ*)`.
    pub cov_pred: DenseMatrix,
    pub empirical_bias: Option<DenseVector>,
    pub residual_norm: Option<f64>,
    /// Exact bias, available for quadratics.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_bias: Option<DenseVector>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl BiasReport {
    pub fn with_empirical(mut self, empirical: DenseVector) -> Self {
        self.residual_norm = Some((&empirical - &self.bias_total).norm());
        self.empirical_bias = Some(empirical);
        self
    }
}

/// Warnings for step sizes outside the ranges where the expansions are
/// proven. They are not enforced.
pub fn theory_gate_warnings(p: &Problem, gamma: f64, h_local: usize) -> Vec<String> {
    let mut out = Vec::new();
    let l = p.lip();
    if gamma * p.mu() * h_local as f64 > 1.0 {
        out.push(format!("gamma*mu*H = {} exceeds 1", gamma * p.mu() * h_local as f64));
    }
    if gamma > 1.0 / (8.0 * l) {
        out.push(format!("gamma = {gamma} exceeds 1/(8L) = {}", 1.0 / (8.0 * l)));
    }
    if gamma > 1.0 / (25.0 * l) {
        out.push(format!("gamma = {gamma} exceeds 1/(25L) = {}", 1.0 / (25.0 * l)));
    }
    out
}

/// Bias prediction for `setting`; terms that vanish in that setting are
/// zeroed.
pub fn predicted_bias(p: &Problem, gamma: f64, h_local: usize, setting: Setting) -> Result<BiasReport> {
    let d = p.dim();
    let n = p.n_clients();
    let het = match setting {
        Setting::Homogeneous => DenseVector::zeros(d),
        _ => first_order_bias_h(p)?.scale(gamma * (h_local as f64 - 1.0) / 2.0),
    };
    let sto = match setting {
        Setting::Deterministic | Setting::Quadratic => DenseVector::zeros(d),
        _ => stochastic_bias_b_s(p)?.scale(gamma / (2.0 * n as f64)),
    };
    let cov_pred = match setting {
        Setting::Deterministic => DenseMatrix::zeros(d),
        _ => predicted_cov(p, gamma)?,
    };
    let exact_bias = if p.family() == Family::Quadratic {
        Some(quadratic_bias(p, gamma, h_local)?)
    } else {
        None
    };
    Ok(BiasReport {
        setting,
        gamma,
        h_local,
        n_clients: n,
        bias_total: &het + &sto,
        bias_het: het,
        bias_sto: sto,
        cov_pred,
        empirical_bias: None,
        residual_norm: None,
        exact_bias,
        warnings: theory_gate_warnings(p, gamma, h_local),
    })
}

/// Limit bias of one FedAvg configuration: exact for quadratics, the
/// deterministic fixed point otherwise.
fn limit_bias(p: &Problem, gamma: f64, h_local: usize) -> Result<DenseVector> {
    if p.family() == Family::Quadratic {
        quadratic_bias(p, gamma, h_local)
    } else {
        let fp = find_fixed_point(p, gamma, h_local, DEFAULT_FIXED_POINT_TOL)?;
        Ok(&fp.theta_bar - &p.global_optimum()?)
    }
}

/// `θ̃ − θ*` for the step-size extrapolation `2θ^{(γ,H)} − θ^{(2γ,H)}`.
///
/// Quadratics are evaluated exactly; other families use the deterministic
/// fixed points, so only the heterogeneity part is covered there.
pub fn rr_limit_prediction(p: &Problem, gamma: f64, h_local: usize) -> Result<DenseVector> {
    let mut out = limit_bias(p, gamma, h_local)?.scale(2.0);
    out.axpy(-1.0, &limit_bias(p, 2.0 * gamma, h_local)?);
    Ok(out)
}

/// Limit bias of the local-step extrapolation between `H` and `2H`.
pub fn rr_h_limit_prediction(p: &Problem, gamma: f64, h_local: usize) -> Result<DenseVector> {
    let (a, b) = rr_h_weights(h_local)?;
    let mut out = limit_bias(p, gamma, h_local)?.scale(a);
    out.axpy(b, &limit_bias(p, gamma, 2 * h_local)?);
    Ok(out)
}

/// Least-squares fit of `log y = slope·log x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope (zero for two points or a perfect fit).
    pub slope_stderr: f64,
}

pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("slope fit needs at least two paired points"));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid("slope fit needs positive finite values"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("slope fit needs distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let slope_stderr = if lx.len() > 2 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(SlopeFit {
        slope,
        intercept,
        slope_stderr,
    })
}

/// Quantities whose scaling in `γ` the `slope` command tabulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeQuantity {
    /// `‖θ̄ − θ*‖`, expected slope 1.
    Bias,
    /// `‖θ̄ − θ* − (γ(H − 1)/2)b_h‖`, expected slope 2.
    FirstOrderResidual,
    /// Step-size extrapolated limit bias, expected slope 2.
    RrGamma,
    /// Local-step extrapolated limit bias, expected slope 2.
    RrH,
}

impl std::str::FromStr for SlopeQuantity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bias" => Ok(SlopeQuantity::Bias),
            "first_order_residual" => Ok(SlopeQuantity::FirstOrderResidual),
            "rr_gamma" => Ok(SlopeQuantity::RrGamma),
            "rr_h" => Ok(SlopeQuantity::RrH),
            other => Err(Error::invalid(format!("unknown slope quantity '{other}'"))),
        }
    }
}

/// `(γ, value)` rows for each step size, from deterministic limits.
pub fn slope_table(
    p: &Problem,
    gammas: &[f64],
    h_local: usize,
    quantity: SlopeQuantity,
) -> Result<Vec<(f64, f64)>> {
    let b_h = match quantity {
        SlopeQuantity::FirstOrderResidual => Some(first_order_bias_h(p)?),
        _ => None,
    };
    gammas
        .iter()
        .map(|&g| {
            let value = match quantity {
                SlopeQuantity::Bias => limit_bias(p, g, h_local)?.norm(),
                SlopeQuantity::FirstOrderResidual => {
                    let mut r = limit_bias(p, g, h_local)?;
                    r.axpy(-g * (h_local as f64 - 1.0) / 2.0, b_h.as_ref().unwrap());
                    r.norm()
                }
                SlopeQuantity::RrGamma => rr_limit_prediction(p, g, h_local)?.norm(),
                SlopeQuantity::RrH => rr_h_limit_prediction(p, g, h_local)?.norm(),
            };
            Ok((g, value))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{random_quadratic, scalar_quadratic, softplus_1d, QuadraticConfig};

    fn example() -> Problem {
        scalar_quadratic(&[1.0, 3.0], &[1.0, 0.0], 0.0)
    }

    #[test]
    fn quadratic_bias_example() {
        let b = quadratic_bias(&example(), 0.1, 10).unwrap();
        let (b1, b2) = (0.9f64.powi(10), 0.7f64.powi(10));
        let want = ((1.0 - b1) * 0.75 + (1.0 - b2) * -0.25) / 2.0 / (1.0 - (b1 + b2) / 2.0);
        assert!((b[0] - want).abs() < 1e-15);
        assert!((b[0] - 0.15129).abs() < 1e-5);
        assert!(quadratic_bias(&example(), 0.1, 1).unwrap()[0].abs() < 1e-15);
        let equal = scalar_quadratic(&[2.0, 2.0], &[1.0, -1.0], 0.0);
        assert!(quadratic_bias(&equal, 0.1, 10).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn quadratic_bias_bounds() {
        let p = example();
        let bound = quadratic_bias_bound(&p, 0.1, 10).unwrap();
        assert!((bound - 0.3375).abs() < 1e-12);
        assert!(bound >= quadratic_bias(&p, 0.1, 10).unwrap().norm());
        assert_eq!(quadratic_bias_bound_loose(&p, 0.1, 10).unwrap(), 2.0 * bound);
        assert!(quadratic_bias(&softplus_1d(2, 0.1, 1.0), 0.1, 2).is_err());
    }

    #[test]
    fn scalar_covariance_prediction() {
        let p = scalar_quadratic(&[2.0; 4], &[0.0; 4], 1.5);
        let cov = predicted_cov(&p, 0.05).unwrap();
        assert!((cov.get(0, 0) - 0.05 * 2.25 / (2.0 * 2.0 * 4.0)).abs() < 1e-15);
        assert_eq!(predicted_cov(&p.without_noise(), 0.05).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn b_s_scalar_formula() {
        let sigma = 1.3;
        let p = softplus_1d(3, 0.1, sigma);
        let opt = p.global_optimum().unwrap()[0];
        let s = 1.0 / (1.0 + (-opt).exp());
        let f2 = s * (1.0 - s) + 0.1;
        let f3 = s * (1.0 - s) * (1.0 - 2.0 * s);
        let want = -f3 * sigma * sigma / (2.0 * f2 * f2);
        let got = stochastic_bias_b_s(&p).unwrap()[0];
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        let q = random_quadratic(1, 2, 3, &QuadraticConfig::default());
        assert_eq!(stochastic_bias_b_s(&q).unwrap().norm(), 0.0);
    }

    #[test]
    fn report_zeroes_terms_per_setting() {
        let q = random_quadratic(2, 2, 4, &QuadraticConfig::default());
        let r = predicted_bias(&q, 0.05, 5, Setting::detect(&q)).unwrap();
        assert_eq!(r.setting, Setting::Quadratic);
        assert_eq!(r.bias_sto.norm(), 0.0);
        assert_eq!(r.bias_total, r.bias_het);
        let h = softplus_1d(4, 0.1, 1.0);
        let r = predicted_bias(&h, 0.05, 5, Setting::detect(&h)).unwrap();
        assert_eq!(r.setting, Setting::Homogeneous);
        assert_eq!(r.bias_het.norm(), 0.0);
        assert!(r.bias_sto.norm() > 0.0);
        let total = r.bias_total.clone();
        let r = r.with_empirical(total);
        assert_eq!(r.residual_norm, Some(0.0));
    }

    #[test]
    fn rr_prediction_cancels_first_order() {
        let p = example();
        let plain = quadratic_bias(&p, 0.05, 10).unwrap()[0].abs();
        let rr = rr_limit_prediction(&p, 0.05, 10).unwrap()[0].abs();
        assert!(rr < plain / 3.0, "{rr} vs {plain}");
        // with H = 10 the second-order coefficient crosses zero near γ = 0.01
        let rows = slope_table(&p, &[0.02, 0.01, 0.005, 0.0025], 2, SlopeQuantity::RrGamma).unwrap();
        let (xs, ys): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        assert!((loglog_slope(&xs, &ys).unwrap().slope - 2.0).abs() < 0.2);
    }

    #[test]
    fn slope_fit_exact_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(2)).collect();
        let fit = loglog_slope(&xs, &ys).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(fit.slope_stderr < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_err());
        assert!(loglog_slope(&[1.0, 2.0], &[1.0, -1.0]).is_err());
    }
}
