//! Everything needed to re-run a training command.

use mpfn::model::ModelConfig;
use mpfn::training::TrainConfig;
use mpfn::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::args::TrainCmd;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// `git describe` of the working tree at run time, when available.
    pub build: String,
    /// The command as given, with defaults filled in.
    pub train: TrainCmd,
    /// Configurations derived from the command.
    pub model: ModelConfig,
    pub optimizer: TrainConfig,
    pub corpus_sizes: [usize; 3],
    /// `MPFN_THREADS` at run time. Results do not depend on it.
    pub threads: Option<usize>,
}

fn build_id() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn new(
        train: TrainCmd,
        model: ModelConfig,
        optimizer: TrainConfig,
        corpus_sizes: [usize; 3],
        threads: Option<usize>,
    ) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            build: build_id(),
            train,
            model,
            optimizer,
            corpus_sizes,
            threads,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("encoding manifest: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            location: "manifest".into(),
            message: e.to_string(),
        })
    }
}
