use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use srsm::{BoundMode, SynthesisConfig, SystemModel};

/// Settings for one run: defaults, then the JSON file, then flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env: Option<String>,
    pub env_spec: Option<PathBuf>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub synthesis: SynthesisConfig,
}

/// Flags shared by `synthesize` and `verify`.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct RunFlags {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Benchmark id: lds2d or pendulum.
    #[arg(long)]
    pub env: Option<String>,
    /// JSON description of a linear system.
    #[arg(long)]
    pub env_spec: Option<PathBuf>,
    /// Initial grid mesh.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long, env = "SRSM_WORKERS")]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train with the `K·τ` margin instead of `ε_train`.
    #[arg(long)]
    pub use_lprime_cond2: bool,
    /// mass or maxvol.
    #[arg(long)]
    pub bound_mode: Option<String>,
    /// Noise cells per dimension for the expectation bound.
    #[arg(long)]
    pub cells_per_dim: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Starts from `base` (or the config file, if given) and applies the flags.
    pub fn resolve(flags: &RunFlags, base: Option<RunConfig>) -> Result<Self> {
        let mut cfg = match &flags.config {
            Some(p) => Self::load(p)?,
            None => base.unwrap_or_default(),
        };
        if let Some(e) = &flags.env {
            cfg.env = Some(e.clone());
        }
        if let Some(p) = &flags.env_spec {
            cfg.env_spec = Some(p.clone());
        }
        let s = &mut cfg.synthesis;
        if let Some(t) = flags.tau {
            s.tau = t;
        }
        if let Some(seed) = flags.seed {
            s.train.seed = seed;
        }
        if let Some(t) = flags.timeout {
            s.timeout_secs = t;
        }
        if flags.use_lprime_cond2 {
            s.train.use_lprime_cond2 = true;
        }
        if let Some(m) = &flags.bound_mode {
            s.bound_mode = m.parse::<BoundMode>()?;
        }
        if let Some(c) = flags.cells_per_dim {
            s.noise_cells_per_dim = c;
        }
        if let Some(n) = flags.max_iterations {
            s.max_iterations = n;
        }
        if flags.workers.is_some() {
            cfg.workers = flags.workers;
        }
        if flags.out.is_some() {
            cfg.out = flags.out.clone();
        }
        cfg.synthesis.validate()?;
        if cfg.workers == Some(0) {
            bail!("--workers must be at least 1");
        }
        Ok(cfg)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("srsm-out"))
    }

    pub fn system(&self) -> Result<SystemModel> {
        load_system(self.env.as_deref(), self.env_spec.as_deref())
    }
}

/// The system named by `env` or described by the file at `spec`.
pub fn load_system(env: Option<&str>, spec: Option<&Path>) -> Result<SystemModel> {
    match (env, spec) {
        (Some(_), Some(_)) => bail!("give either --env or --env-spec, not both"),
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(SystemModel::from_affine_spec_json(&text)?)
        }
        (Some(id), None) => Ok(SystemModel::by_id(id)?),
        (None, None) => bail!("an environment is required (--env or --env-spec)"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"env": "pendulum", "tau": 0.01, "train": {"lr": 0.002}, "max_iterations": 7}"#,
        )
        .unwrap();
        let flags = RunFlags {
            config: Some(path),
            tau: Some(0.05),
            ..RunFlags::default()
        };
        let cfg = RunConfig::resolve(&flags, None).unwrap();
        assert_eq!(cfg.env.as_deref(), Some("pendulum"));
        assert_eq!(cfg.synthesis.tau, 0.05);
        assert_eq!(cfg.synthesis.train.lr, 0.002);
        assert_eq!(cfg.synthesis.train.alpha, 10.0);
        assert_eq!(cfg.synthesis.max_iterations, 7);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let flags = RunFlags {
            tau: Some(0.0),
            ..RunFlags::default()
        };
        assert!(RunConfig::resolve(&flags, None).is_err());
        let flags = RunFlags {
            bound_mode: Some("median".into()),
            ..RunFlags::default()
        };
        assert!(RunConfig::resolve(&flags, None).is_err());
    }

    #[test]
    fn system_selection() {
        assert!(load_system(Some("lds2d"), None).is_ok());
        assert!(load_system(Some("cartpole"), None).is_err());
        assert!(load_system(None, None).is_err());
    }
}
