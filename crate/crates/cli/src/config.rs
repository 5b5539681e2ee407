//! JSON experiment configuration.

use anyhow::{bail, ensure, Context, Result};
use scoregeom::densities::{rank3_gaussian, DensitySpec};
use scoregeom::diffusion::{path_seed, NoiseSchedule, SNAPSHOT_TIMES};
use scoregeom::scoremodel::{ModelSpec, TrainConfig};
use scoregeom::vae::{VaeSpec, VaeTrainConfig, DEFAULT_THRESHOLD};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub density: DensitySpec,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub vae: VaeSection,
    #[serde(default)]
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub n_samples: usize,
    /// std of extra Gaussian noise added to the generated data
    pub noise_std: f64,
    /// rows held out of training for VAE evaluation
    pub n_heldout: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            noise_std: 0.0,
            n_heldout: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub spec: VaeSpec,
    pub train: VaeTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSpec {
    pub n_paths: usize,
    pub n_steps: usize,
    pub snapshot_times: Vec<f64>,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            n_paths: 128,
            n_steps: 1000,
            snapshot_times: SNAPSHOT_TIMES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSpec {
    pub kappa: f64,
    pub n_max: Option<usize>,
    /// posterior-variance threshold for the VAE dimensionality count
    pub threshold: f64,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            kappa: scoregeom::geometry::DEFAULT_KAPPA,
            n_max: None,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub model_init: u64,
    pub sampling: u64,
    pub vae_init: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_master(0)
    }
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        Self {
            data: path_seed(master, 0),
            model_init: path_seed(master, 1),
            sampling: path_seed(master, 2),
            vae_init: path_seed(master, 3),
        }
    }
}

impl ExperimentConfig {
    /// Rank-3 Gaussian in `dim` coordinates with the default everything else.
    pub fn rank3(dim: usize) -> Result<Self> {
        let g = rank3_gaussian(dim, 7)?;
        Ok(Self::with_density(DensitySpec::Gaussian(g)))
    }

    pub fn with_density(density: DensitySpec) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            density,
            data: DataSpec::default(),
            schedule: NoiseSchedule::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            vae: VaeSection::default(),
            sampling: SamplingSpec::default(),
            analysis: AnalysisSpec::default(),
            seeds: Seeds::default(),
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            schema_version: u32,
        }
        let header: Header = serde_json::from_str(text).context("config has no schema_version")?;
        ensure!(
            header.schema_version == CONFIG_SCHEMA_VERSION,
            "config schema version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
            header.schema_version
        );
        let config: Self = serde_json::from_str(text).context("malformed config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Replaces every named seed with one derived from `master`.
    pub fn reseed(&mut self, master: u64) {
        self.seeds = Seeds::from_master(master);
        self.train.seed = path_seed(master, 4);
        self.vae.train.seed = path_seed(master, 5);
    }

    pub fn dim(&self) -> usize {
        self.density.dim()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.schema_version == CONFIG_SCHEMA_VERSION, "unsupported schema version");
        self.density.prepare().context("density")?;
        self.schedule.validate().context("schedule")?;
        ensure!(self.data.n_samples >= 1, "data.n_samples must be at least 1");
        ensure!(
            self.data.noise_std.is_finite() && self.data.noise_std >= 0.0,
            "data.noise_std must be finite and non-negative"
        );
        ensure!(self.data.n_heldout >= 1, "data.n_heldout must be at least 1");
        self.model.validate().context("model")?;
        self.train.validate().context("train")?;
        ensure!(self.vae.spec.latent_dim >= 1, "vae.spec.latent_dim must be at least 1");
        ensure!(self.vae.spec.hidden.iter().all(|&w| w > 0), "vae.spec.hidden widths must be positive");
        self.vae.train.validate().context("vae.train")?;
        ensure!(self.sampling.n_paths >= 1, "sampling.n_paths must be at least 1");
        ensure!(self.sampling.n_steps >= 1, "sampling.n_steps must be at least 1");
        ensure!(!self.sampling.snapshot_times.is_empty(), "sampling.snapshot_times is empty");
        for &t in &self.sampling.snapshot_times {
            if !(t >= self.schedule.eps_t && t <= 1.0) {
                bail!("snapshot time {t} outside [{}, 1]", self.schedule.eps_t);
            }
        }
        ensure!(
            self.analysis.kappa.is_finite() && self.analysis.kappa >= 0.0,
            "analysis.kappa must be finite and non-negative"
        );
        if let Some(n) = self.analysis.n_max {
            ensure!(n >= 1 && n <= self.dim(), "analysis.n_max must lie in 1..={}", self.dim());
        }
        ensure!(self.analysis.threshold > 0.0, "analysis.threshold must be positive");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let base = ExperimentConfig::rank3(5).unwrap();
        let density = serde_json::to_value(&base.density).unwrap();
        let text = serde_json::json!({ "schema_version": 1, "density": density }).to_string();
        let c = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(c.sampling.n_paths, 128);
        assert_eq!(c.sampling.snapshot_times, SNAPSHOT_TIMES.to_vec());
        assert_eq!(c.analysis.kappa, 0.1);
        assert_eq!(c, base);
    }

    #[test]
    fn json_round_trip() {
        let mut c = ExperimentConfig::rank3(4).unwrap();
        c.reseed(99);
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_configs() {
        let c = ExperimentConfig::rank3(4).unwrap();
        let text = c.to_json().unwrap().replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
        assert!(ExperimentConfig::from_json(&text).is_err());

        let mut bad = c.clone();
        bad.sampling.snapshot_times = vec![1.5];
        assert!(bad.validate().is_err());
        let mut bad = c.clone();
        bad.analysis.n_max = Some(5);
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.sampling.n_paths = 0;
        assert!(bad.validate().is_err());
    }
}
