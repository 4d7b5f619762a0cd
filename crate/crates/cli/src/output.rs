//! Output artifacts and the run manifest.

use std::collections::BTreeMap;
use std::path::Path;

use fedbias::Result;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;

/// Versioned CSV layout.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Schema {
    pub name: &'static str,
    pub version: u32,
    pub columns: &'static str,
}

pub const MSE_SCHEMA: Schema = Schema {
    name: "mse",
    version: 1,
    columns: "t,mse,mse_std,mse_avg,mse_avg_std,algorithm",
};
pub const TRAJECTORY_SCHEMA: Schema = Schema {
    name: "trajectory",
    version: 1,
    columns: "t,theta_0,...,theta_{d-1}",
};
pub const STATIONARY_SCHEMA: Schema = Schema {
    name: "stationary",
    version: 1,
    columns: "quantity,i,j,estimate,stderr",
};
pub const COUPLING_SCHEMA: Schema = Schema {
    name: "coupling",
    version: 1,
    columns: "t,msd",
};
pub const SLOPE_SCHEMA: Schema = Schema {
    name: "slope",
    version: 1,
    columns: "gamma,residual_norm",
};

pub struct Artifact {
    pub path: String,
    pub contents: String,
    pub schema: Option<Schema>,
}

/// Files and summary produced by one analysis.
#[derive(Default)]
pub struct Outputs {
    pub files: Vec<Artifact>,
    pub summary: BTreeMap<String, Value>,
    pub problem_digests: Vec<String>,
    pub warnings: Vec<String>,
}

impl Outputs {
    pub fn csv(&mut self, path: &str, contents: String, schema: Schema) {
        self.files.push(Artifact {
            path: path.to_string(),
            contents,
            schema: Some(schema),
        });
    }

    pub fn json(&mut self, path: &str, value: &impl Serialize) -> Result<()> {
        let mut contents = serde_json::to_string_pretty(value)?;
        contents.push('\n');
        self.files.push(Artifact {
            path: path.to_string(),
            contents,
            schema: None,
        });
        Ok(())
    }

    pub fn summary(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.summary.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn digest(&mut self, digest: String) {
        if !self.problem_digests.contains(&digest) {
            self.problem_digests.push(digest);
        }
    }

    pub fn warn(&mut self, msgs: impl IntoIterator<Item = String>) {
        for m in msgs {
            log::warn!("{m}");
            if !self.warnings.contains(&m) {
                self.warnings.push(m);
            }
        }
    }

    /// Moves `other` under the subdirectory `prefix`.
    pub fn nest(&mut self, prefix: &str, other: Outputs) {
        for mut f in other.files {
            f.path = format!("{prefix}/{}", f.path);
            self.files.push(f);
        }
        self.summary
            .insert(prefix.to_string(), Value::Object(other.summary.into_iter().collect()));
        for d in other.problem_digests {
            self.digest(d);
        }
        for w in other.warnings {
            if !self.warnings.contains(&w) {
                self.warnings.push(w);
            }
        }
    }

    pub fn summary_value(&self) -> Value {
        Value::Object(self.summary.clone().into_iter().collect())
    }
}

/// SHA-256 of the canonical (key-sorted, compact) JSON form.
pub fn config_hash(config: &Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

pub fn manifest(command: &str, config: &Value, outputs: &Outputs) -> Value {
    let schemas: BTreeMap<&str, Schema> = outputs
        .files
        .iter()
        .filter_map(|f| f.schema.map(|s| (f.path.as_str(), s)))
        .collect();
    let files: Vec<&str> = outputs.files.iter().map(|f| f.path.as_str()).collect();
    json!({
        "manifest_version": MANIFEST_VERSION,
        "tool": "fedbias",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "problem_digests": outputs.problem_digests,
        "schemas": schemas,
        "files": files,
        "warnings": outputs.warnings,
    })
}

/// Writes every artifact under `dir` together with `manifest.json`.
pub fn write_all(dir: &Path, command: &str, config: &Value, outputs: &Outputs) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for f in &outputs.files {
        let path = dir.join(&f.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, &f.contents)?;
    }
    let mut text = serde_json::to_string_pretty(&manifest(command, config, outputs))?;
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}
