//! Analyses shared by the subcommands and the experiment runner.

use clap::{Args, ValueEnum};
use fedbias::analysis_det::{find_fixed_point, fixed_point_report, DEFAULT_FIXED_POINT_TOL};
use fedbias::analysis_sto::{
    burn_in_floor, coupling_decay, estimate_stationary, mse_trace, MseTrace, DEFAULT_CHAINS,
    DEFAULT_SAMPLES_PER_CHAIN,
};
use fedbias::datasets::{gen_synthetic_heterogeneous, gen_synthetic_noisy, FIG1_CLIENTS};
use fedbias::fedavg::{contraction_gate, run, Algorithm, RunConfig};
use fedbias::theory::{
    loglog_slope, predicted_bias, predicted_cov, quadratic_bias, rr_h_limit_prediction,
    rr_limit_prediction, slope_table, theory_gate_warnings, Setting, SlopeQuantity,
};
use fedbias::{DenseVector, Error, Family, Problem, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::output::{
    Outputs, COUPLING_SCHEMA, MSE_SCHEMA, SLOPE_SCHEMA, STATIONARY_SCHEMA, TRAJECTORY_SCHEMA,
};

/// Flags that apply to every analysis.
#[derive(Clone, Copy, Debug)]
pub struct Ctx {
    pub strict: bool,
    pub coupled: bool,
    pub allow_large_step: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalysisKind {
    Run,
    FixedPoint,
    Stationary,
    BiasCheck,
    RrCompare,
    ScaffoldCompare,
    MseTrace,
    Slope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RrVariant {
    Gamma,
    H,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettingArg {
    Deterministic,
    Quadratic,
    Homogeneous,
    Heterogeneous,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Deterministic => Setting::Deterministic,
            SettingArg::Quadratic => Setting::Quadratic,
            SettingArg::Homogeneous => Setting::Homogeneous,
            SettingArg::Heterogeneous => Setting::Heterogeneous,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantityArg {
    Bias,
    FirstOrderResidual,
    RrGamma,
    RrH,
}

impl From<QuantityArg> for SlopeQuantity {
    fn from(q: QuantityArg) -> Self {
        match q {
            QuantityArg::Bias => SlopeQuantity::Bias,
            QuantityArg::FirstOrderResidual => SlopeQuantity::FirstOrderResidual,
            QuantityArg::RrGamma => SlopeQuantity::RrGamma,
            QuantityArg::RrH => SlopeQuantity::RrH,
        }
    }
}

fn d_replicas() -> usize {
    10
}
fn d_chains() -> usize {
    DEFAULT_CHAINS
}
fn d_samples() -> usize {
    DEFAULT_SAMPLES_PER_CHAIN
}
fn d_tol() -> f64 {
    DEFAULT_FIXED_POINT_TOL
}
fn d_halvings() -> usize {
    4
}
fn d_pairs() -> usize {
    200
}
fn d_coupling_rounds() -> usize {
    100
}
fn d_quantity() -> QuantityArg {
    QuantityArg::Bias
}
fn d_variant() -> RrVariant {
    RrVariant::Gamma
}

/// Tuning knobs of the analyses; every field has a default.
#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Independent replicas for MSE traces.
    #[arg(long, default_value_t = d_replicas())]
    #[serde(default = "d_replicas")]
    pub replicas: usize,
    /// Chains for stationary estimates.
    #[arg(long, default_value_t = d_chains())]
    #[serde(default = "d_chains")]
    pub chains: usize,
    /// Kept samples per chain.
    #[arg(long, default_value_t = d_samples())]
    #[serde(default = "d_samples")]
    pub samples: usize,
    /// Burn-in rounds; defaults to the mixing floor ⌈10/(γμH)⌉.
    #[arg(long)]
    #[serde(default)]
    pub burn_in: Option<usize>,
    /// Fixed-point tolerance.
    #[arg(long, default_value_t = d_tol())]
    #[serde(default = "d_tol")]
    pub tol: f64,
    /// Coupled pairs for the contraction diagnostic.
    #[arg(long, default_value_t = d_pairs())]
    #[serde(default = "d_pairs")]
    pub pairs: usize,
    /// Rounds of the contraction diagnostic.
    #[arg(long, default_value_t = d_coupling_rounds())]
    #[serde(default = "d_coupling_rounds")]
    pub coupling_rounds: usize,
    /// Bias-summary row; detected from the problem when absent.
    #[arg(long, value_enum)]
    #[serde(default)]
    pub setting: Option<SettingArg>,
    /// Also measure the bias (fixed point or stationary mean).
    #[arg(long)]
    #[serde(default)]
    pub empirical: bool,
    /// Extrapolation flavour for `rr-compare`.
    #[arg(long, value_enum, default_value_t = d_variant())]
    #[serde(default = "d_variant")]
    pub variant: RrVariant,
    /// Quantity tabulated by `slope`.
    #[arg(long, value_enum, default_value_t = d_quantity())]
    #[serde(default = "d_quantity")]
    pub quantity: QuantityArg,
    /// Explicit step sizes for `slope`, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub gammas: Vec<f64>,
    /// Number of step sizes `γ, γ/2, …` for `slope` when `--gammas` is absent.
    #[arg(long, default_value_t = d_halvings())]
    #[serde(default = "d_halvings")]
    pub halvings: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("all fields have defaults")
    }
}

/// Rejects `(γ, H)` outside `γ ≤ 1/(2L)`, `γμH ≤ 1` under `--strict`;
/// otherwise records the theory-range warnings.
fn theory_check(p: &Problem, gamma: f64, h: usize, ctx: &Ctx, out: &mut Outputs) -> Result<()> {
    let gate = contraction_gate(p);
    let mix = 1.0 / (p.mu() * h as f64);
    if ctx.strict && (gamma > gate || gamma > mix) {
        return Err(Error::StepSizeGate {
            gamma,
            limit: gate.min(mix),
        });
    }
    out.warn(theory_gate_warnings(p, gamma, h));
    Ok(())
}

fn run_config(cell: &RunConfig, ctx: &Ctx, algorithm: Algorithm) -> RunConfig {
    let mut cfg = cell.clone();
    cfg.algorithm = algorithm;
    cfg.allow_large_step |= ctx.allow_large_step;
    cfg.coupled |= ctx.coupled;
    cfg
}

fn limit_bias(p: &Problem, gamma: f64, h: usize) -> Result<DenseVector> {
    if p.family() == Family::Quadratic {
        quadratic_bias(p, gamma, h)
    } else {
        let fp = find_fixed_point(p, gamma, h, DEFAULT_FIXED_POINT_TOL)?;
        Ok(&fp.theta_bar - &p.global_optimum()?)
    }
}

fn trace_summary(t: &MseTrace) -> serde_json::Value {
    let (m, se) = t.final_avg_mse();
    let last = t.rows.last().expect("trace has rows");
    json!({
        "final_tail_avg_mse": m,
        "final_tail_avg_mse_stderr": se,
        "final_mse": last.mse,
        "replicas": t.n_replicas,
    })
}

pub fn run_analysis(
    kind: AnalysisKind,
    p: &Problem,
    cell: &RunConfig,
    opts: &AnalysisOptions,
    ctx: &Ctx,
) -> Result<Outputs> {
    let mut out = Outputs::default();
    out.digest(p.digest());
    let (gamma, h) = (cell.gamma, cell.h_local);
    match kind {
        AnalysisKind::Run => {
            let tr = run(p, &run_config(cell, ctx, cell.algorithm))?;
            let opt = p.global_optimum()?;
            out.csv("trajectory.csv", tr.to_csv(), TRAJECTORY_SCHEMA);
            out.json("trajectory.json", &tr.sidecar())?;
            out.summary("algorithm", cell.algorithm.name())?;
            out.summary("last", tr.last())?;
            out.summary("tail_average", &tr.tail_average)?;
            out.summary("tail_average_error", tr.tail_average.dist_sq(&opt).sqrt())?;
        }
        AnalysisKind::FixedPoint => {
            theory_check(p, gamma, h, ctx, &mut out)?;
            let r = fixed_point_report(p, gamma, h, opts.tol)?;
            out.json("fixed_point.json", &r)?;
            out.summary("bias_norm", r.bias.norm())?;
            out.summary("residual", r.residual)?;
            out.summary("identity_gap", (&r.bias - &r.bias_identity_rhs).norm())?;
            out.summary("bias_bound", r.bias_bound)?;
            out.summary("first_order_gap", (&r.bias - &r.first_order_prediction).norm())?;
        }
        AnalysisKind::Stationary => {
            theory_check(p, gamma, h, ctx, &mut out)?;
            let burn = opts.burn_in.unwrap_or_else(|| burn_in_floor(p, gamma, h));
            let est = estimate_stationary(p, gamma, h, opts.chains, burn, opts.samples, cell.seed)?;
            out.warn(est.warnings.clone());
            let pred = predicted_cov(p, gamma)?;
            let coupling = coupling_decay(p, gamma, h, opts.pairs, opts.coupling_rounds, cell.seed)?;
            out.csv("stationary.csv", est.to_csv(), STATIONARY_SCHEMA);
            out.csv("coupling.csv", coupling.to_csv(), COUPLING_SCHEMA);
            out.json(
                "stationary.json",
                &json!({ "estimate": est, "predicted_cov": pred, "coupling_rate_bound": coupling.rate_bound }),
            )?;
            out.summary("bias", est.bias())?;
            out.summary("bias_stderr", &est.mean_stderr)?;
            out.summary("stationarity_z", est.stationarity_z())?;
            out.summary("n_effective", est.n_effective)?;
            out.summary("cov_error_frobenius", (&est.cov - &pred).frobenius_norm())?;
            out.summary("cov_stderr_frobenius", est.cov_stderr.frobenius_norm())?;
        }
        AnalysisKind::BiasCheck => {
            theory_check(p, gamma, h, ctx, &mut out)?;
            let setting = opts.setting.map(Setting::from).unwrap_or_else(|| Setting::detect(p));
            let mut report = predicted_bias(p, gamma, h, setting)?;
            if opts.empirical {
                let emp = if p.is_noiseless() {
                    limit_bias(p, gamma, h)?
                } else {
                    let burn = opts.burn_in.unwrap_or_else(|| burn_in_floor(p, gamma, h));
                    let est = estimate_stationary(p, gamma, h, opts.chains, burn, opts.samples, cell.seed)?;
                    out.warn(est.warnings.clone());
                    out.summary("empirical_bias_stderr", &est.mean_stderr)?;
                    est.bias()
                };
                report = report.with_empirical(emp);
            }
            out.json("bias_report.json", &report)?;
            out.summary("report", &report)?;
        }
        AnalysisKind::RrCompare => {
            let (alg, coarse_gamma) = match opts.variant {
                RrVariant::Gamma => (Algorithm::RrGamma, 2.0 * gamma),
                RrVariant::H => (Algorithm::RrH, gamma),
            };
            theory_check(p, coarse_gamma, h, ctx, &mut out)?;
            let fa = mse_trace(p, &run_config(cell, ctx, Algorithm::Fedavg), opts.replicas, cell.seed)?;
            let rr = mse_trace(p, &run_config(cell, ctx, alg), opts.replicas, cell.seed)?;
            out.csv("mse_fedavg.csv", fa.to_csv(), MSE_SCHEMA);
            out.csv(&format!("mse_{}.csv", alg.name()), rr.to_csv(), MSE_SCHEMA);
            let predicted_rr = match opts.variant {
                RrVariant::Gamma => rr_limit_prediction(p, gamma, h)?,
                RrVariant::H => rr_h_limit_prediction(p, gamma, h)?,
            };
            out.summary("fedavg", trace_summary(&fa))?;
            out.summary(alg.name(), trace_summary(&rr))?;
            out.summary("predicted_limit_bias_fedavg", limit_bias(p, gamma, h)?)?;
            out.summary("predicted_limit_bias_rr", predicted_rr)?;
            out.summary("coupled", ctx.coupled)?;
        }
        AnalysisKind::ScaffoldCompare => {
            let fa = mse_trace(p, &run_config(cell, ctx, Algorithm::Fedavg), opts.replicas, cell.seed)?;
            let sc = mse_trace(p, &run_config(cell, ctx, Algorithm::Scaffold), opts.replicas, cell.seed)?;
            out.csv("mse_fedavg.csv", fa.to_csv(), MSE_SCHEMA);
            out.csv("mse_scaffold.csv", sc.to_csv(), MSE_SCHEMA);
            out.summary("fedavg", trace_summary(&fa))?;
            out.summary("scaffold", trace_summary(&sc))?;
            out.summary("scaffold_variant", "option_ii")?;
        }
        AnalysisKind::MseTrace => {
            let t = mse_trace(p, &run_config(cell, ctx, cell.algorithm), opts.replicas, cell.seed)?;
            out.csv("mse.csv", t.to_csv(), MSE_SCHEMA);
            out.summary(cell.algorithm.name(), trace_summary(&t))?;
        }
        AnalysisKind::Slope => {
            let gammas: Vec<f64> = if opts.gammas.is_empty() {
                (0..opts.halvings).map(|k| gamma / 2f64.powi(k as i32)).collect()
            } else {
                opts.gammas.clone()
            };
            let largest = gammas.iter().cloned().fold(0.0, f64::max);
            let quantity = SlopeQuantity::from(opts.quantity);
            let check_gamma = if quantity == SlopeQuantity::RrGamma { 2.0 * largest } else { largest };
            theory_check(p, check_gamma, h, ctx, &mut out)?;
            let rows = slope_table(p, &gammas, h, quantity)?;
            let mut csv = String::from("gamma,residual_norm\n");
            for (g, v) in &rows {
                csv.push_str(&format!("{g},{v}\n"));
            }
            out.csv("slope.csv", csv, SLOPE_SCHEMA);
            let (xs, ys): (Vec<f64>, Vec<f64>) = rows.iter().cloned().unzip();
            let fit = loglog_slope(&xs, &ys)?;
            let expected = if quantity == SlopeQuantity::Bias { 1.0 } else { 2.0 };
            out.json("slope.json", &json!({ "quantity": quantity, "h_local": h, "rows": rows, "fit": fit, "expected_slope": expected }))?;
            out.summary("slope", fit.slope)?;
            out.summary("slope_stderr", fit.slope_stderr)?;
            out.summary("expected_slope", expected)?;
        }
    }
    Ok(out)
}

pub const FIG1_GAMMA: f64 = 0.01;
pub const FIG1_BUDGET: usize = 10_000;
pub const FIG1_LOCAL_STEPS: [usize; 2] = [10, 100];
pub const FIG1_ALGORITHMS: [Algorithm; 3] = [Algorithm::Fedavg, Algorithm::RrGamma, Algorithm::Scaffold];

/// The benchmark matrix: two datasets × two local-step counts × three
/// algorithms, each an MSE trace over `replicas` runs.
pub fn repro_fig1(replicas: usize, records: usize, problem_seed: u64, seed: u64, ctx: &Ctx) -> Result<Outputs> {
    let datasets = [
        ("noisy", gen_synthetic_noisy(problem_seed, records)),
        ("heterogeneous", gen_synthetic_heterogeneous(problem_seed, records)),
    ];
    let cells: Vec<(usize, usize, Algorithm)> = (0..datasets.len())
        .flat_map(|d| FIG1_LOCAL_STEPS.iter().flat_map(move |&h| FIG1_ALGORITHMS.iter().map(move |&a| (d, h, a))))
        .collect();
    let traces: Vec<MseTrace> = cells
        .par_iter()
        .map(|&(d, h, alg)| {
            let t = FIG1_BUDGET / h;
            let mut cfg = RunConfig::new(alg, FIG1_GAMMA, h, t, seed);
            cfg.coupled = ctx.coupled;
            cfg.allow_large_step = ctx.allow_large_step;
            mse_trace(&datasets[d].1, &cfg, replicas, seed)
        })
        .collect::<Result<_>>()?;
    let mut out = Outputs::default();
    for (_, p) in &datasets {
        out.digest(p.digest());
    }
    let mut table = Vec::new();
    for (&(d, h, alg), tr) in cells.iter().zip(&traces) {
        let name = datasets[d].0;
        out.csv(&format!("{name}/H{h}/{}/mse.csv", alg.name()), tr.to_csv(), MSE_SCHEMA);
        let (m, se) = tr.final_avg_mse();
        table.push(json!({
            "dataset": name,
            "h_local": h,
            "rounds": FIG1_BUDGET / h,
            "algorithm": alg.name(),
            "final_tail_avg_mse": m,
            "final_tail_avg_mse_stderr": se,
        }));
    }
    out.summary("gamma", FIG1_GAMMA)?;
    out.summary("n_clients", FIG1_CLIENTS)?;
    out.summary("replicas", replicas)?;
    out.summary("cells", &table)?;
    out.json("fig1_summary.json", &out.summary_value())?;
    Ok(out)
}
