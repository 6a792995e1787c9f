//! Run configuration: one JSON document driving every command.

use crate::commands::Failure;
use hamflow::domains::{builtin_benchmark, SyntheticDomain};
use hamflow::gan::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Top-level configuration document. Schema-checked up front: unknown keys
/// are rejected, and exactly one of `benchmark` / (`domain_a` + `domain_b`)
/// must name the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in benchmark name (alternative to explicit domain files).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<String>,
    /// Source-domain JSON file (paths resolve relative to the config file).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_a: Option<PathBuf>,
    /// Target-domain JSON file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_b: Option<PathBuf>,
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Checkpoint every this many epochs (0 = final checkpoint only).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_checkpoint_every() -> usize {
    1
}

/// Settings for evaluation metrics (shared by train, sweep, verify).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Projections per sliced-Wasserstein evaluation.
    pub n_projections: usize,
    /// Held-out sample count per domain for evaluation metrics.
    pub eval_samples: usize,
    /// Sweep horizon as a multiple of the trained horizon.
    pub sweep_factor: f64,
    /// Seed for projection directions (and the sweep).
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            n_projections: 128,
            eval_samples: 4096,
            sweep_factor: 2.5,
            seed: 0,
        }
    }
}

/// Thresholds and sizes for `verify`. Values compare as
/// `observed <= threshold`; non-finite observations always fail.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// States drawn from the source domain for the checks.
    pub samples: usize,
    /// Batch size for the gradient-consistency comparison.
    pub gradient_samples: usize,
    /// Parameter coordinates probed by finite differences.
    pub fd_probes: usize,
    /// Central finite-difference step.
    pub fd_eps: f64,
    /// Max allowed `|grad H . f| / (1 + |grad H||f|)`.
    pub max_conservation: f64,
    /// Max allowed `|div f|`.
    pub max_divergence: f64,
    /// Max allowed round-trip error relative to `mean(1 + |x|)`.
    pub max_relative_round_trip: f64,
    /// Max allowed mean Hamiltonian drift along transport paths.
    pub max_ham_drift: f64,
    pub max_adjoint_vs_unrolled: f64,
    pub max_adjoint_vs_fd: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            samples: 256,
            gradient_samples: 64,
            fd_probes: 8,
            fd_eps: 1e-5,
            max_conservation: 1e-12,
            max_divergence: 1e-10,
            max_relative_round_trip: 1e-6,
            max_ham_drift: 1e-3,
            max_adjoint_vs_unrolled: 1e-6,
            max_adjoint_vs_fd: 1e-3,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Failure> {
        match (&self.benchmark, &self.domain_a, &self.domain_b) {
            (Some(_), None, None) | (None, Some(_), Some(_)) => Ok(()),
            _ => Err(Failure::config(
                "config must name either a benchmark or both domain_a and domain_b",
            )),
        }
    }

    /// Resolve the configured data into concrete (source, target) domains.
    /// `base` is the directory the config file lives in; relative domain
    /// paths resolve against it.
    pub fn load_domains(&self, base: &Path) -> Result<(SyntheticDomain, SyntheticDomain), Failure> {
        if let Some(name) = &self.benchmark {
            return builtin_benchmark(name).map_err(Failure::from);
        }
        let load = |p: &PathBuf| -> Result<SyntheticDomain, Failure> {
            let path = if p.is_absolute() { p.clone() } else { base.join(p) };
            let text = std::fs::read_to_string(&path).map_err(|e| {
                Failure::config(format!("cannot read domain file {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                Failure::config(format!("invalid domain file {}: {e}", path.display()))
            })
        };
        let a = load(self.domain_a.as_ref().expect("validated"))?;
        let b = load(self.domain_b.as_ref().expect("validated"))?;
        Ok((a, b))
    }
}

/// Read, parse, and validate a run config, applying command-line overrides.
pub fn load_run_config(
    path: &Path,
    seed_override: Option<u64>,
    out_override: Option<&Path>,
) -> Result<(RunConfig, PathBuf), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))?;
    cfg.validate()?;
    if let Some(seed) = seed_override {
        cfg.train.seed = seed;
        cfg.metrics.seed = seed;
    }
    if let Some(out) = out_override {
        cfg.out_dir = out.to_path_buf();
    }
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((cfg, base))
}
