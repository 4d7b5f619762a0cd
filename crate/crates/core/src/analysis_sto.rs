//! Monte Carlo estimates of the stationary law of stochastic FedAvg and
//! coupled-chain contraction diagnostics.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedavg::{check_step_size, round_sto_in_place, run, stream_chain, tail_start, RoundBuffers, RunConfig};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::problems::Problem;
use crate::rng::ChainStreams;

const STATIONARY_TAG: u64 = 6;
const COUPLING_TAG: u64 = 7;

pub const DEFAULT_CHAINS: usize = 32;
pub const DEFAULT_SAMPLES_PER_CHAIN: usize = 2000;

/// Rounds needed for ten contraction time constants, `⌈10/(γμH)⌉`.
pub fn burn_in_floor(p: &Problem, gamma: f64, h_local: usize) -> usize {
    (10.0 / (gamma * p.mu() * h_local as f64)).ceil() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryEstimate {
    pub mean: DenseVector,
    /// Second moment about `θ*`, symmetrized.
    pub cov: DenseMatrix,
    /// Between-chain standard errors.
    pub mean_stderr: DenseVector,
    pub cov_stderr: DenseMatrix,
    /// Mean of the first and second halves of the kept samples, with stderrs.
    pub half_means: [DenseVector; 2],
    pub half_stderr: [DenseVector; 2],
    /// Total kept samples scaled by the ratio of the iid variance to the
    /// between-chain variance of the mean.
    pub n_effective: f64,
    pub burn_in: usize,
    pub burn_in_floor: usize,
    pub n_samples: usize,
    pub n_chains: usize,
    pub theta_star: DenseVector,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl StationaryEstimate {
    pub fn bias(&self) -> DenseVector {
        &self.mean - &self.theta_star
    }

    /// Largest coordinate-wise z-score between the two half means.
    pub fn stationarity_z(&self) -> f64 {
        let [a, b] = &self.half_means;
        let [sa, sb] = &self.half_stderr;
        (0..a.len())
            .map(|i| (a[i] - b[i]).abs() / (sa[i] * sa[i] + sb[i] * sb[i]).sqrt())
            .fold(0.0, f64::max)
    }

    /// CSV rows `quantity,i,j,estimate,stderr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity,i,j,estimate,stderr\n");
        let d = self.mean.len();
        for i in 0..d {
            writeln!(out, "mean,{i},,{},{}", self.mean[i], self.mean_stderr[i]).unwrap();
        }
        for i in 0..d {
            for j in 0..d {
                writeln!(out, "cov,{i},{j},{},{}", self.cov.get(i, j), self.cov_stderr.get(i, j)).unwrap();
            }
        }
        out
    }
}

struct ChainStats {
    mean: DenseVector,
    second: DenseMatrix,
    halves: [DenseVector; 2],
}

fn run_chain(
    p: &Problem,
    opt: &DenseVector,
    gamma: f64,
    h_local: usize,
    burn_in: usize,
    samples: usize,
    streams: ChainStreams,
) -> Result<ChainStats> {
    let d = p.dim();
    let mut theta = opt.clone();
    let mut buf = RoundBuffers::new(d);
    for t in 0..burn_in {
        round_sto_in_place(p, &mut theta, gamma, h_local, &streams, t as u64, &mut buf)?;
    }
    let mut sum = DenseVector::zeros(d);
    let mut first_half = DenseVector::zeros(d);
    let mut second = DenseMatrix::zeros(d);
    let mut e = DenseVector::zeros(d);
    let split = samples / 2;
    for k in 0..samples {
        round_sto_in_place(p, &mut theta, gamma, h_local, &streams, (burn_in + k) as u64, &mut buf)?;
        sum.axpy(1.0, &theta);
        if k + 1 == split {
            first_half = sum.clone();
        }
        for i in 0..d {
            e[i] = theta[i] - opt[i];
        }
        for i in 0..d {
            for j in 0..d {
                second.set(i, j, second.get(i, j) + e[i] * e[j]);
            }
        }
    }
    let rest = &sum - &first_half;
    Ok(ChainStats {
        mean: sum.scale(1.0 / samples as f64),
        second: second.scale(1.0 / samples as f64),
        halves: [
            first_half.scale(1.0 / split.max(1) as f64),
            rest.scale(1.0 / (samples - split) as f64),
        ],
    })
}

/// Mean and standard error over chains, coordinate-wise.
fn vec_mean_stderr(xs: &[&DenseVector]) -> (DenseVector, DenseVector) {
    let k = xs.len() as f64;
    let mean = DenseVector::mean(xs.iter().copied());
    let d = mean.len();
    let se = DenseVector::from_fn(d, |i| {
        if xs.len() < 2 {
            return 0.0;
        }
        let ss: f64 = xs.iter().map(|x| (x[i] - mean[i]).powi(2)).sum();
        (ss / (k - 1.0) / k).sqrt()
    });
    (mean, se)
}

/// Runs `n_chains` independent chains from `θ*`, discards `burn_in` rounds
/// and averages the next `samples_per_chain` iterates of each.
pub fn estimate_stationary(
    p: &Problem,
    gamma: f64,
    h_local: usize,
    n_chains: usize,
    burn_in: usize,
    samples_per_chain: usize,
    seed: u64,
) -> Result<StationaryEstimate> {
    if n_chains == 0 || samples_per_chain < 2 || h_local == 0 {
        return Err(Error::invalid(
            "need at least one chain, two samples per chain and H ≥ 1",
        ));
    }
    check_step_size(p, gamma, false)?;
    let opt = p.global_optimum()?;
    let floor = burn_in_floor(p, gamma, h_local);
    let mut warnings = Vec::new();
    if burn_in < floor {
        let msg = format!("burn_in {burn_in} is below the mixing floor {floor}");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let chains: Vec<ChainStats> = (0..n_chains as u64)
        .into_par_iter()
        .map(|k| {
            let streams = ChainStreams::new(seed, stream_chain(STATIONARY_TAG, k));
            run_chain(p, &opt, gamma, h_local, burn_in, samples_per_chain, streams)
        })
        .collect::<Result<_>>()?;

    let (mean, mean_stderr) = vec_mean_stderr(&chains.iter().map(|c| &c.mean).collect::<Vec<_>>());
    let h0 = vec_mean_stderr(&chains.iter().map(|c| &c.halves[0]).collect::<Vec<_>>());
    let h1 = vec_mean_stderr(&chains.iter().map(|c| &c.halves[1]).collect::<Vec<_>>());
    let d = p.dim();
    let k = n_chains as f64;
    let cov = DenseMatrix::mean(chains.iter().map(|c| &c.second)).symmetrize();
    let cov_stderr = DenseMatrix::from_fn(d, |i, j| {
        if n_chains < 2 {
            return 0.0;
        }
        let ss: f64 = chains
            .iter()
            .map(|c| (c.second.get(i, j) - cov.get(i, j)).powi(2))
            .sum();
        (ss / (k - 1.0) / k).sqrt()
    });
    let bias = &mean - &opt;
    let pointwise_var = cov.trace() - bias.norm_sq();
    let se_sq = mean_stderr.norm_sq();
    let n_samples = n_chains * samples_per_chain;
    let n_effective = if se_sq > 0.0 {
        pointwise_var / se_sq
    } else {
        n_samples as f64
    };
    Ok(StationaryEstimate {
        mean,
        cov,
        mean_stderr,
        cov_stderr,
        half_means: [h0.0, h1.0],
        half_stderr: [h0.1, h1.1],
        n_effective,
        burn_in,
        burn_in_floor: floor,
        n_samples,
        n_chains,
        theta_star: opt,
        warnings,
    })
}

/// Mean squared distance between synchronously coupled chains.
///
/// This second moment upper-bounds the squared Wasserstein distance between
/// the two laws; the distance itself is not computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingTrace {
    /// `(t, E‖θ_t − ϑ_t‖²)` for `t = 0..=rounds`.
    pub rows: Vec<(usize, f64)>,
    /// Contraction factor per round, `(1 − γμ)^H`.
    pub rate_bound: f64,
}

impl CouplingTrace {
    /// Ratios `msd_{t+1}/msd_t`.
    pub fn ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[1].1 / w[0].1).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,msd\n");
        for (t, m) in &self.rows {
            writeln!(out, "{t},{m}").unwrap();
        }
        out
    }
}

/// Pairs of chains sharing every noise draw, started at `θ*` and
/// `θ* + start_offset·e₁`.
pub fn coupling_decay_from(
    p: &Problem,
    gamma: f64,
    h_local: usize,
    n_pairs: usize,
    rounds: usize,
    seed: u64,
    start_offset: f64,
) -> Result<CouplingTrace> {
    if n_pairs == 0 {
        return Err(Error::invalid("need at least one pair"));
    }
    check_step_size(p, gamma, false)?;
    let opt = p.global_optimum()?;
    let mut other = opt.clone();
    other.axpy(start_offset, &DenseVector::basis(p.dim(), 0));
    let per_pair: Vec<Vec<f64>> = (0..n_pairs as u64)
        .into_par_iter()
        .map(|k| {
            let streams = ChainStreams::new(seed, stream_chain(COUPLING_TAG, k));
            let (mut a, mut b) = (opt.clone(), other.clone());
            let mut out = Vec::with_capacity(rounds + 1);
            out.push(a.dist_sq(&b));
            let mut buf = RoundBuffers::new(p.dim());
            for t in 0..rounds {
                round_sto_in_place(p, &mut a, gamma, h_local, &streams, t as u64, &mut buf)?;
                round_sto_in_place(p, &mut b, gamma, h_local, &streams, t as u64, &mut buf)?;
                out.push(a.dist_sq(&b));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let rows = (0..=rounds)
        .map(|t| (t, per_pair.iter().map(|v| v[t]).sum::<f64>() / n_pairs as f64))
        .collect();
    Ok(CouplingTrace {
        rows,
        rate_bound: (1.0 - gamma * p.mu()).powi(h_local as i32),
    })
}

pub fn coupling_decay(
    p: &Problem,
    gamma: f64,
    h_local: usize,
    n_pairs: usize,
    rounds: usize,
    seed: u64,
) -> Result<CouplingTrace> {
    coupling_decay_from(p, gamma, h_local, n_pairs, rounds, seed, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub t: usize,
    pub mse: f64,
    pub mse_std: f64,
    /// MSE of the running average of `θ_s` over `⌊T/10⌋ ≤ s ≤ t`; equals the
    /// plain MSE before the window opens.
    pub mse_avg: f64,
    pub mse_avg_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseTrace {
    pub algorithm: String,
    pub rows: Vec<MseRow>,
    /// Final tail-averaged squared error of each replica.
    pub final_avg_sq_errors: Vec<f64>,
    pub n_replicas: usize,
}

impl MseTrace {
    /// Mean of the final tail-averaged squared errors and its standard error.
    pub fn final_avg_mse(&self) -> (f64, f64) {
        let n = self.final_avg_sq_errors.len() as f64;
        let m = self.final_avg_sq_errors.iter().sum::<f64>() / n;
        if n < 2.0 {
            return (m, 0.0);
        }
        let var = self
            .final_avg_sq_errors
            .iter()
            .map(|x| (x - m).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (m, (var / n).sqrt())
    }

    pub const CSV_HEADER: &'static str = "t,mse,mse_std,mse_avg,mse_avg_std,algorithm";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.t, r.mse, r.mse_std, r.mse_avg, r.mse_avg_std, self.algorithm
            )
            .unwrap();
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Per-round squared error `‖θ_t − θ*‖²` and running tail-averaged squared
/// error of one replica.
fn replica_errors(p: &Problem, cfg: &RunConfig, opt: &DenseVector) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut full = cfg.clone();
    full.record_every = 1;
    let tr = run(p, &full)?;
    let start = tail_start(cfg.rounds);
    let mut plain = Vec::with_capacity(tr.points.len());
    let mut avg = Vec::with_capacity(tr.points.len());
    let mut sum = DenseVector::zeros(p.dim());
    for pt in &tr.points {
        let e = pt.theta.dist_sq(opt);
        plain.push(e);
        if pt.t < start {
            avg.push(e);
        } else {
            sum.axpy(1.0, &pt.theta);
            let n = (pt.t - start + 1) as f64;
            avg.push(sum.scale(1.0 / n).dist_sq(opt));
        }
    }
    Ok((plain, avg))
}

/// MSE curves over `n_replicas` independent runs of `cfg`, replica `r`
/// using chain `r` of master seed `seed`. Rows follow `cfg.record_every`.
pub fn mse_trace(p: &Problem, cfg: &RunConfig, n_replicas: usize, seed: u64) -> Result<MseTrace> {
    if n_replicas == 0 {
        return Err(Error::invalid("need at least one replica"));
    }
    let opt = p.global_optimum()?;
    let per: Vec<(Vec<f64>, Vec<f64>)> = (0..n_replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut c = cfg.clone();
            c.seed = seed;
            c.chain = r;
            replica_errors(p, &c, &opt)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for t in 0..=cfg.rounds {
        if t % cfg.record_every != 0 && t != cfg.rounds {
            continue;
        }
        let plain: Vec<f64> = per.iter().map(|(a, _)| a[t]).collect();
        let avg: Vec<f64> = per.iter().map(|(_, b)| b[t]).collect();
        let (mse, mse_std) = mean_std(&plain);
        let (mse_avg, mse_avg_std) = mean_std(&avg);
        rows.push(MseRow {
            t,
            mse,
            mse_std,
            mse_avg,
            mse_avg_std,
        });
    }
    Ok(MseTrace {
        algorithm: cfg.algorithm.name().to_string(),
        rows,
        final_avg_sq_errors: per.iter().map(|(_, b)| *b.last().unwrap()).collect(),
        n_replicas,
    })
}
