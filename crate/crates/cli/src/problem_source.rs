//! Where a command's problem comes from: a JSON file, an inline value in an
//! experiment config, or one of the built-in generators.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use fedbias::datasets::{
    gen_synthetic_heterogeneous, gen_synthetic_noisy, random_quadratic, softplus_1d, QuadraticConfig,
    DEFAULT_RECORDS_PER_CLIENT,
};
use fedbias::{Error, Problem, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenFamily {
    /// Random heterogeneous quadratics with additive Gaussian noise.
    Quadratic,
    /// Two wide blobs split uniformly over ten clients.
    Noisy,
    /// Two tight blobs, half the clients with shuffled labels.
    Heterogeneous,
    /// One-dimensional softplus plus ridge on every client.
    Softplus,
}

/// Parameters of a built-in generator.
#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct GenSpec {
    #[arg(long, value_enum)]
    pub family: GenFamily,
    /// Dimension (quadratic only).
    #[arg(long, default_value_t = 2)]
    #[serde(default = "default_d")]
    pub d: usize,
    /// Number of clients (quadratic and softplus).
    #[arg(long, default_value_t = 4)]
    #[serde(default = "default_n")]
    pub n: usize,
    /// Generator seed, independent of the simulation seed.
    #[arg(long = "problem-seed", default_value_t = 0)]
    #[serde(default)]
    pub seed: u64,
    /// Records per client (logistic datasets).
    #[arg(long, default_value_t = DEFAULT_RECORDS_PER_CLIENT)]
    #[serde(default = "default_records")]
    pub records: usize,
    /// Additive noise standard deviation (quadratic and softplus).
    #[arg(long, default_value_t = 1.0)]
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Ridge coefficient (softplus).
    #[arg(long, default_value_t = 0.1)]
    #[serde(default = "default_reg")]
    pub reg: f64,
}

fn default_d() -> usize {
    2
}
fn default_n() -> usize {
    4
}
fn default_records() -> usize {
    DEFAULT_RECORDS_PER_CLIENT
}
fn default_sigma() -> f64 {
    1.0
}
fn default_reg() -> f64 {
    0.1
}

impl GenSpec {
    pub fn generate(&self) -> Result<Problem> {
        if self.n == 0 || self.d == 0 || self.records == 0 {
            return Err(Error::invalid("d, n and records must be positive"));
        }
        Ok(match self.family {
            GenFamily::Quadratic => {
                let cfg = QuadraticConfig {
                    noise_sigma: self.sigma,
                    ..QuadraticConfig::default()
                };
                random_quadratic(self.seed, self.d, self.n, &cfg)
            }
            GenFamily::Noisy => gen_synthetic_noisy(self.seed, self.records),
            GenFamily::Heterogeneous => gen_synthetic_heterogeneous(self.seed, self.records),
            GenFamily::Softplus => softplus_1d(self.n, self.reg, self.sigma),
        })
    }
}

/// Problem reference inside an experiment config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ProblemSpec {
    File { path: PathBuf },
    Inline { problem: serde_json::Value },
    Generate(GenSpec),
}

impl ProblemSpec {
    /// Resolves relative paths against `base` and checks that files exist.
    pub fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        if let ProblemSpec::File { path } = self {
            if path.is_relative() {
                *path = base.join(&*path);
            }
            if !path.is_file() {
                return Err(Error::invalid(format!("problem file {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Problem> {
        match self {
            ProblemSpec::File { path } => read_problem(path),
            ProblemSpec::Inline { problem } => Problem::from_json(&problem.to_string()),
            ProblemSpec::Generate(g) => g.generate(),
        }
    }
}

pub fn read_problem(path: &Path) -> Result<Problem> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read problem file {}: {e}", path.display())))?;
    Problem::from_json(&text)
}

/// Problem selection shared by the simulation subcommands.
#[derive(Clone, Debug, Args)]
pub struct ProblemArgs {
    /// Problem JSON as written by `gen-problem`.
    #[arg(long, conflicts_with = "dataset")]
    pub problem: Option<PathBuf>,
    /// Built-in logistic dataset.
    #[arg(long, value_enum)]
    pub dataset: Option<Dataset>,
    /// Records per client for `--dataset`.
    #[arg(long, default_value_t = DEFAULT_RECORDS_PER_CLIENT)]
    pub records: usize,
    /// Generator seed for `--dataset`.
    #[arg(long = "problem-seed", default_value_t = 0)]
    pub problem_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Noisy,
    Heterogeneous,
}

impl ProblemArgs {
    pub fn spec(&self) -> Result<ProblemSpec> {
        match (&self.problem, self.dataset) {
            (Some(path), None) => {
                let mut spec = ProblemSpec::File { path: path.clone() };
                spec.resolve_paths(Path::new("."))?;
                Ok(spec)
            }
            (None, Some(ds)) => Ok(ProblemSpec::Generate(GenSpec {
                family: match ds {
                    Dataset::Noisy => GenFamily::Noisy,
                    Dataset::Heterogeneous => GenFamily::Heterogeneous,
                },
                d: 2,
                n: 10,
                seed: self.problem_seed,
                records: self.records,
                sigma: 0.0,
                reg: 0.1,
            })),
            _ => Err(Error::invalid("exactly one of --problem or --dataset is required")),
        }
    }
}
