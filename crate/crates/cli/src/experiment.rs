//! JSON experiment configs: one problem, a grid of run settings and the
//! analyses to apply to every grid cell.

use std::path::{Path, PathBuf};

use fedbias::fedavg::{Algorithm, RunConfig};
use fedbias::{DenseVector, Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyses::{run_analysis, AnalysisKind, AnalysisOptions, Ctx};
use crate::output::Outputs;
use crate::problem_source::ProblemSpec;

fn default_algorithm() -> Algorithm {
    Algorithm::Fedavg
}
fn default_rounds() -> usize {
    1000
}
fn default_every() -> usize {
    1
}

/// One grid cell; the seed falls back to the master seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub gamma: f64,
    pub h_local: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "default_every")]
    pub record_every: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub init: Option<DenseVector>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    /// Master seed; required so that no run depends on the clock.
    pub seed: u64,
    pub grid: Vec<CellSpec>,
    pub analyses: Vec<AnalysisKind>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub options: AnalysisOptions,
}

impl ExperimentConfig {
    /// Parses and validates a config file; relative problem paths are taken
    /// relative to the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.problem.resolve_paths(base)?;
        if cfg.grid.is_empty() {
            return Err(Error::invalid("experiment grid is empty"));
        }
        if cfg.analyses.is_empty() {
            return Err(Error::invalid("no analyses requested"));
        }
        Ok(cfg)
    }

    fn run_config(&self, cell: &CellSpec) -> RunConfig {
        let mut cfg = RunConfig::new(
            cell.algorithm,
            cell.gamma,
            cell.h_local,
            cell.rounds,
            cell.seed.unwrap_or(self.seed),
        )
        .with_record_every(cell.record_every);
        cfg.init = cell.init.clone();
        cfg
    }
}

fn analysis_dir(kind: AnalysisKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Runs every analysis on every cell; cell `i` writes to `cell_{i:03}/`.
pub fn run_experiment(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<Outputs> {
    let p = cfg.problem.load()?;
    let results: Vec<Outputs> = cfg
        .grid
        .par_iter()
        .map(|cell| {
            let rc = cfg.run_config(cell);
            let mut cell_out = Outputs::default();
            for &kind in &cfg.analyses {
                let o = run_analysis(kind, &p, &rc, &cfg.options, ctx)?;
                cell_out.nest(&analysis_dir(kind), o);
            }
            cell_out.summary("cell", cell)?;
            Ok(cell_out)
        })
        .collect::<Result<_>>()?;
    let mut out = Outputs::default();
    out.digest(p.digest());
    for (i, o) in results.into_iter().enumerate() {
        out.nest(&format!("cell_{i:03}"), o);
    }
    Ok(out)
}
