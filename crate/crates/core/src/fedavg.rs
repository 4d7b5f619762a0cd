//! Execution engines: deterministic and stochastic FedAvg, SCAFFOLD and the
//! two Richardson-Romberg drivers.
//!
//! Every stochastic gradient of a run is drawn from the substream addressed
//! by `(seed, chain, round, client, local step)`, so results do not depend on
//! the order in which clients or chains are evaluated.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseVector;
use crate::problems::Problem;
use crate::rng::ChainStreams;

/// Fraction of the rounds discarded before tail averaging.
pub const TAIL_SKIP_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedavg,
    FedavgDet,
    Scaffold,
    RrGamma,
    RrH,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Fedavg => "fedavg",
            Algorithm::FedavgDet => "fedavg_det",
            Algorithm::Scaffold => "scaffold",
            Algorithm::RrGamma => "rr_gamma",
            Algorithm::RrH => "rr_h",
        }
    }

    /// Tag folded into the chain id so that different algorithms never share
    /// noise unless explicitly coupled.
    fn stream_tag(&self) -> u64 {
        match self {
            Algorithm::Fedavg | Algorithm::FedavgDet => 0,
            Algorithm::Scaffold => 1,
            Algorithm::RrGamma => 2,
            Algorithm::RrH => 4,
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Algorithm::Fedavg),
            "fedavg_det" => Ok(Algorithm::FedavgDet),
            "scaffold" => Ok(Algorithm::Scaffold),
            "rr_gamma" => Ok(Algorithm::RrGamma),
            "rr_h" => Ok(Algorithm::RrH),
            other => Err(Error::invalid(format!("unknown algorithm '{other}'"))),
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub gamma: f64,
    pub h_local: usize,
    pub rounds: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    #[serde(default = "one")]
    pub record_every: usize,
    /// Replica index; selects an independent family of substreams.
    #[serde(default)]
    pub chain: u64,
    /// Starting point, zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<DenseVector>,
    /// Run even if `γ` exceeds the contraction gate `1/(2L)`.
    #[serde(default)]
    pub allow_large_step: bool,
    /// Richardson-Romberg only: share noise between the two runs.
    #[serde(default)]
    pub coupled: bool,
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, gamma: f64, h_local: usize, rounds: usize, seed: u64) -> Self {
        RunConfig {
            gamma,
            h_local,
            rounds,
            seed,
            algorithm,
            record_every: 1,
            chain: 0,
            init: None,
            allow_large_step: false,
            coupled: false,
        }
    }

    pub fn with_chain(mut self, chain: u64) -> Self {
        self.chain = chain;
        self
    }

    pub fn with_init(mut self, init: DenseVector) -> Self {
        self.init = Some(init);
        self
    }

    pub fn with_record_every(mut self, every: usize) -> Self {
        self.record_every = every;
        self
    }

    fn validate(&self, p: &Problem) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("step size must be positive and finite"));
        }
        if self.h_local == 0 {
            return Err(Error::invalid("number of local steps must be positive"));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every must be positive"));
        }
        if let Some(init) = &self.init {
            if init.len() != p.dim() {
                return Err(Error::DimensionMismatch {
                    expected: p.dim(),
                    found: init.len(),
                });
            }
        }
        Ok(())
    }

    fn start(&self, p: &Problem) -> DenseVector {
        self.init.clone().unwrap_or_else(|| DenseVector::zeros(p.dim()))
    }
}

/// Largest step size for which local updates are contractive, `1/(2L)`.
pub fn contraction_gate(p: &Problem) -> f64 {
    1.0 / (2.0 * p.lip())
}

/// Rejects `gamma > 1/(2L)` unless `allow` is set, in which case it only warns.
pub fn check_step_size(p: &Problem, gamma: f64, allow: bool) -> Result<()> {
    let limit = contraction_gate(p);
    if gamma > limit * (1.0 + 1e-12) {
        if allow {
            log::warn!("step size {gamma} exceeds contraction gate {limit}");
        } else {
            return Err(Error::StepSizeGate { gamma, limit });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub theta: DenseVector,
}

/// Recorded global iterates of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub config: RunConfig,
    pub problem_digest: String,
    /// Average of every iterate `θ_t` with `⌊T/10⌋ ≤ t ≤ T`.
    pub tail_average: DenseVector,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Trajectory {
    pub fn last(&self) -> &DenseVector {
        &self.points.last().expect("trajectory holds θ_0").theta
    }

    pub fn rounds(&self) -> usize {
        self.config.rounds
    }

    /// CSV with header `t,theta_0,...,theta_{d-1}`.
    pub fn to_csv(&self) -> String {
        let d = self.points[0].theta.len();
        let mut out = String::from("t");
        for k in 0..d {
            write!(out, ",theta_{k}").unwrap();
        }
        out.push('\n');
        for p in &self.points {
            write!(out, "{}", p.t).unwrap();
            for x in p.theta.iter() {
                write!(out, ",{x}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// JSON sidecar holding everything but the iterates.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "problem_digest": self.problem_digest,
            "algorithm": self.config.algorithm.name(),
            "n_points": self.points.len(),
            "tail_average": self.tail_average,
            "tail_skip_fraction": TAIL_SKIP_FRACTION,
            "notes": self.notes,
        })
    }
}

/// Index of the first round included in tail averages.
pub fn tail_start(rounds: usize) -> usize {
    (rounds as f64 * TAIL_SKIP_FRACTION).floor() as usize
}

/// Accumulates the recorded points and the tail average of a run.
struct Recorder {
    rounds: usize,
    every: usize,
    tail_from: usize,
    tail_sum: DenseVector,
    tail_count: usize,
    points: Vec<TrajectoryPoint>,
}

impl Recorder {
    fn new(rounds: usize, every: usize, dim: usize) -> Self {
        Recorder {
            rounds,
            every,
            tail_from: tail_start(rounds),
            tail_sum: DenseVector::zeros(dim),
            tail_count: 0,
            points: Vec::new(),
        }
    }

    fn observe(&mut self, t: usize, theta: &DenseVector) {
        if t.is_multiple_of(self.every) || t == self.rounds {
            self.points.push(TrajectoryPoint {
                t,
                theta: theta.clone(),
            });
        }
        if t >= self.tail_from {
            self.tail_sum.axpy(1.0, theta);
            self.tail_count += 1;
        }
    }

    fn finish(self, config: RunConfig, p: &Problem, notes: Vec<String>) -> Trajectory {
        Trajectory {
            points: self.points,
            config,
            problem_digest: p.digest(),
            tail_average: self.tail_sum.scale(1.0 / self.tail_count as f64),
            notes,
        }
    }
}

/// `H` exact gradient steps `θ ← θ − γ∇f_c(θ)` from `theta`.
pub fn local_pass_det(
    p: &Problem,
    c: usize,
    theta: &DenseVector,
    gamma: f64,
    h_local: usize,
) -> Result<DenseVector> {
    let mut x = theta.clone();
    let mut g = DenseVector::zeros(p.dim());
    for _ in 0..h_local {
        p.grad_into(c, &x, &mut g)?;
        x.axpy(-gamma, &g);
    }
    Ok(x)
}

/// One FedAvg-D round: the average of the clients' local passes.
pub fn round_det(p: &Problem, theta: &DenseVector, gamma: f64, h_local: usize) -> Result<DenseVector> {
    let mut acc = DenseVector::zeros(p.dim());
    for c in 0..p.n_clients() {
        acc.axpy(1.0, &local_pass_det(p, c, theta, gamma, h_local)?);
    }
    Ok(acc.scale(1.0 / p.n_clients() as f64))
}

/// `H` stochastic gradient steps of client `c` during round `round`.
pub fn local_pass_sto(
    p: &Problem,
    c: usize,
    theta: &DenseVector,
    gamma: f64,
    h_local: usize,
    streams: &ChainStreams,
    round: u64,
) -> Result<DenseVector> {
    let mut x = theta.clone();
    let mut g = DenseVector::zeros(p.dim());
    for h in 0..h_local {
        let mut rng = streams.step(round, c, h);
        p.sample_grad_into(c, &x, &mut rng, &mut g)?;
        x.axpy(-gamma, &g);
    }
    Ok(x)
}

/// One stochastic FedAvg round (local passes, then server average).
pub fn round_sto(
    p: &Problem,
    theta: &DenseVector,
    gamma: f64,
    h_local: usize,
    streams: &ChainStreams,
    round: u64,
) -> Result<DenseVector> {
    let mut out = theta.clone();
    round_sto_in_place(p, &mut out, gamma, h_local, streams, round, &mut RoundBuffers::new(p.dim()))?;
    Ok(out)
}

/// Scratch vectors reused across rounds by the hot loops.
#[derive(Clone, Debug)]
pub struct RoundBuffers {
    x: DenseVector,
    g: DenseVector,
    acc: DenseVector,
}

impl RoundBuffers {
    pub fn new(dim: usize) -> Self {
        RoundBuffers {
            x: DenseVector::zeros(dim),
            g: DenseVector::zeros(dim),
            acc: DenseVector::zeros(dim),
        }
    }
}

/// [`round_sto`] without allocation; `theta` is replaced by the next iterate.
pub fn round_sto_in_place(
    p: &Problem,
    theta: &mut DenseVector,
    gamma: f64,
    h_local: usize,
    streams: &ChainStreams,
    round: u64,
    buf: &mut RoundBuffers,
) -> Result<()> {
    let n = p.n_clients();
    buf.acc.as_mut_slice().fill(0.0);
    for c in 0..n {
        buf.x.as_mut_slice().copy_from_slice(theta.as_slice());
        for h in 0..h_local {
            let mut rng = streams.step(round, c, h);
            p.sample_grad_into(c, &buf.x, &mut rng, &mut buf.g)?;
            buf.x.axpy(-gamma, &buf.g);
        }
        buf.acc.axpy(1.0, &buf.x);
    }
    let inv = 1.0 / n as f64;
    for (t, a) in theta.as_mut_slice().iter_mut().zip(buf.acc.iter()) {
        *t = a * inv;
    }
    Ok(())
}

pub(crate) fn stream_chain(tag: u64, chain: u64) -> u64 {
    chain.wrapping_mul(8).wrapping_add(tag)
}

fn run_fedavg(p: &Problem, cfg: &RunConfig, stochastic: bool, chain_id: u64) -> Result<Trajectory> {
    let streams = ChainStreams::new(cfg.seed, chain_id);
    let mut rec = Recorder::new(cfg.rounds, cfg.record_every, p.dim());
    let mut theta = cfg.start(p);
    let mut buf = RoundBuffers::new(p.dim());
    rec.observe(0, &theta);
    for t in 0..cfg.rounds {
        if stochastic {
            round_sto_in_place(p, &mut theta, cfg.gamma, cfg.h_local, &streams, t as u64, &mut buf)?;
        } else {
            theta = round_det(p, &theta, cfg.gamma, cfg.h_local)?;
        }
        rec.observe(t + 1, &theta);
    }
    Ok(rec.finish(cfg.clone(), p, Vec::new()))
}

/// Runs the algorithm selected by `cfg`. Richardson-Romberg configurations
/// return the extrapolated trajectory.
pub fn run(p: &Problem, cfg: &RunConfig) -> Result<Trajectory> {
    cfg.validate(p)?;
    match cfg.algorithm {
        Algorithm::Fedavg => {
            check_step_size(p, cfg.gamma, cfg.allow_large_step)?;
            run_fedavg(p, cfg, true, stream_chain(0, cfg.chain))
        }
        Algorithm::FedavgDet => {
            check_step_size(p, cfg.gamma, cfg.allow_large_step)?;
            run_fedavg(p, cfg, false, 0)
        }
        Algorithm::Scaffold => run_scaffold(p, cfg),
        Algorithm::RrGamma => Ok(run_rr_gamma(p, cfg)?.extrapolated),
        Algorithm::RrH => Ok(run_rr_h(p, cfg)?.extrapolated),
    }
}

/// SCAFFOLD with stochastic local gradients.
///
/// Local step `θ ← θ − γ(∇F_c(θ, Z) − c_c + c̄)`; after the round
/// `c_c ← c_c − c̄ + (θ_t − θ_{c,t}^H)/(γH)` (control-variate option II, no
/// extra gradient evaluations) and `c̄` is the mean of the `c_c`. Control
/// variates start at zero; the server step size is one.
pub fn run_scaffold(p: &Problem, cfg: &RunConfig) -> Result<Trajectory> {
    cfg.validate(p)?;
    check_step_size(p, cfg.gamma, cfg.allow_large_step)?;
    let streams = ChainStreams::new(cfg.seed, stream_chain(Algorithm::Scaffold.stream_tag(), cfg.chain));
    let (n, d) = (p.n_clients(), p.dim());
    let gamma = cfg.gamma;
    let mut controls = vec![DenseVector::zeros(d); n];
    let mut control_mean = DenseVector::zeros(d);
    let mut rec = Recorder::new(cfg.rounds, cfg.record_every, d);
    let mut theta = cfg.start(p);
    rec.observe(0, &theta);
    let mut g = DenseVector::zeros(d);
    for t in 0..cfg.rounds {
        let mut acc = DenseVector::zeros(d);
        let mut next_controls = Vec::with_capacity(n);
        for c in 0..n {
            let correction = &control_mean - &controls[c];
            let mut x = theta.clone();
            for h in 0..cfg.h_local {
                let mut rng = streams.step(t as u64, c, h);
                p.sample_grad_into(c, &x, &mut rng, &mut g)?;
                x.axpy(-gamma, &g);
                x.axpy(-gamma, &correction);
            }
            let mut ci = &controls[c] - &control_mean;
            ci.axpy(1.0 / (gamma * cfg.h_local as f64), &(&theta - &x));
            next_controls.push(ci);
            acc.axpy(1.0, &x);
        }
        controls = next_controls;
        control_mean = DenseVector::mean(&controls);
        theta = acc.scale(1.0 / n as f64);
        rec.observe(t + 1, &theta);
    }
    Ok(rec.finish(
        cfg.clone(),
        p,
        vec!["scaffold control variates: option II, zero initialization, server step 1".into()],
    ))
}

/// Output of a Richardson-Romberg driver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RrRun {
    /// Run at the base parameters `(γ, H)`.
    pub fine: Trajectory,
    /// Run at `(2γ, H)` or `(γ, 2H)`.
    pub coarse: Trajectory,
    pub extrapolated: Trajectory,
    pub weight_fine: f64,
    pub weight_coarse: f64,
}

impl RrRun {
    pub fn tail_average(&self) -> &DenseVector {
        &self.extrapolated.tail_average
    }
}

/// Pointwise combination `wa·a_t + wb·b_t` of two trajectories recorded at
/// the same rounds. Tail averages combine the same way.
pub fn extrapolate(a: &Trajectory, wa: f64, b: &Trajectory, wb: f64) -> Result<Trajectory> {
    if a.points.len() != b.points.len() {
        return Err(Error::invalid("trajectories recorded at different rounds"));
    }
    let combine = |x: &DenseVector, y: &DenseVector| {
        let mut z = x.scale(wa);
        z.axpy(wb, y);
        z
    };
    let points = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(pa, pb)| {
            if pa.t != pb.t {
                return Err(Error::invalid("trajectories recorded at different rounds"));
            }
            Ok(TrajectoryPoint {
                t: pa.t,
                theta: combine(&pa.theta, &pb.theta),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        points,
        config: a.config.clone(),
        problem_digest: a.problem_digest.clone(),
        tail_average: combine(&a.tail_average, &b.tail_average),
        notes: vec![format!(
            "extrapolated: {wa}·({}, gamma={}, H={}) + {wb}·(gamma={}, H={})",
            a.config.algorithm.name(),
            a.config.gamma,
            a.config.h_local,
            b.config.gamma,
            b.config.h_local
        )],
    })
}

fn rr_pair(
    p: &Problem,
    cfg: &RunConfig,
    coarse_gamma: f64,
    coarse_h: usize,
    weights: (f64, f64),
) -> Result<RrRun> {
    let tag = cfg.algorithm.stream_tag();
    let fine_chain = stream_chain(tag, cfg.chain);
    let coarse_chain = if cfg.coupled {
        fine_chain
    } else {
        stream_chain(tag + 1, cfg.chain)
    };
    let fine_cfg = cfg.clone();
    let mut coarse_cfg = cfg.clone();
    coarse_cfg.gamma = coarse_gamma;
    coarse_cfg.h_local = coarse_h;
    let fine = run_fedavg(p, &fine_cfg, true, fine_chain)?;
    let coarse = run_fedavg(p, &coarse_cfg, true, coarse_chain)?;
    let mut extrapolated = extrapolate(&fine, weights.0, &coarse, weights.1)?;
    if cfg.coupled {
        extrapolated
            .notes
            .push("coupled: both runs share noise streams".into());
    }
    Ok(RrRun {
        fine,
        coarse,
        extrapolated,
        weight_fine: weights.0,
        weight_coarse: weights.1,
    })
}

/// Step-size extrapolation `ϑ_t = 2θ_t^{(γ,H)} − θ_t^{(2γ,H)}`.
///
/// The two runs use independent noise unless `cfg.coupled` is set. The gate
/// applies to the larger step `2γ`.
pub fn run_rr_gamma(p: &Problem, cfg: &RunConfig) -> Result<RrRun> {
    cfg.validate(p)?;
    check_step_size(p, 2.0 * cfg.gamma, cfg.allow_large_step)?;
    rr_pair(p, cfg, 2.0 * cfg.gamma, cfg.h_local, (2.0, -1.0))
}

/// Weights of the local-step extrapolation between `H` and `2H` local steps.
///
/// They sum to one and cancel the `(H − 1)` heterogeneity term:
/// `ω = ((2H − 1)·θ^{(γ,H)} − (H − 1)·θ^{(γ,2H)}) / H`.
pub fn rr_h_weights(h_local: usize) -> Result<(f64, f64)> {
    if h_local <= 1 {
        return Err(Error::invalid(
            "local-step extrapolation needs H > 1 (coefficient is singular at H = 1)",
        ));
    }
    let h = h_local as f64;
    Ok(((2.0 * h - 1.0) / h, -(h - 1.0) / h))
}

/// Local-step extrapolation combining runs with `H` and `2H` local steps.
pub fn run_rr_h(p: &Problem, cfg: &RunConfig) -> Result<RrRun> {
    cfg.validate(p)?;
    let weights = rr_h_weights(cfg.h_local)?;
    check_step_size(p, cfg.gamma, cfg.allow_large_step)?;
    rr_pair(p, cfg, cfg.gamma, 2 * cfg.h_local, weights)
}
