//! Layered run configuration: one TOML file with a section per pipeline
//! stage, overridden by command-line flags. The effective (post-override)
//! config is echoed into every command manifest, so each artifact records
//! exactly the settings that produced it.

use std::path::{Path, PathBuf};

use crowdveil_core::surrogate::{Paradigm, SurrogateTrainConfig};
use crowdveil_core::training::TrainConfig;
use crowdveil_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable consulted for the output root when neither the
/// `--out` flag nor the config file sets one.
pub const OUT_ENV: &str = "CROWDVEIL_OUT";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output root. Resolution order: `--out` flag, this field,
    /// `$CROWDVEIL_OUT`, then `./runs`.
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub surrogate: SurrogateSection,
    pub generator: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; defaults to `<out>/data`.
    pub dir: Option<PathBuf>,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub height: usize,
    pub width: usize,
    pub blob_sigma: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            train_scenes: 200,
            test_scenes: 50,
            count_min: 5,
            count_max: 220,
            height: 128,
            width: 128,
            blob_sigma: 3.0,
            seed: 300,
        }
    }
}

/// Surrogate training section: the core hyperparameters plus which counting
/// paradigm to train.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSection {
    pub paradigm: Paradigm,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub kernel_sigma: f64,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        let c = SurrogateTrainConfig::default();
        SurrogateSection {
            paradigm: Paradigm::DensityMap,
            epochs: c.epochs,
            lr: c.lr,
            batch_size: c.batch_size,
            seed: c.seed,
            kernel_sigma: c.kernel_sigma,
        }
    }
}

impl SurrogateSection {
    pub fn core(&self) -> SurrogateTrainConfig {
        SurrogateTrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            kernel_sigma: self.kernel_sigma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Detection threshold for counting point-model detections.
    pub tau: f64,
    /// How many scenes get clean/adversarial overlay panels.
    pub viz_scenes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { tau: 0.5, viz_scenes: 4 }
    }
}

impl RunConfig {
    /// Load from a TOML file, or return defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("in {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.train_scenes == 0 && self.data.test_scenes == 0 {
            return Err(Error::Config("data: at least one split must be non-empty".into()));
        }
        if self.data.count_max < self.data.count_min {
            return Err(Error::Config(format!(
                "data: count range inverted: {}..{}",
                self.data.count_min, self.data.count_max
            )));
        }
        if self.surrogate.epochs == 0 || self.surrogate.batch_size == 0 {
            return Err(Error::Config("surrogate: epochs and batch_size must be positive".into()));
        }
        if !(self.surrogate.lr > 0.0) || !(self.surrogate.kernel_sigma > 0.0) {
            return Err(Error::Config("surrogate: lr and kernel_sigma must be positive".into()));
        }
        if !(self.eval.tau > 0.0 && self.eval.tau < 1.0) {
            return Err(Error::Config(format!("eval: tau must be in (0, 1), got {}", self.eval.tau)));
        }
        self.generator.validate()
    }
}

/// Resolved output layout. Every artifact a command writes lives under `out`.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub out: PathBuf,
}

impl Workspace {
    pub fn resolve(flag: Option<PathBuf>, cfg: &RunConfig) -> Workspace {
        let out = flag
            .or_else(|| cfg.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        Workspace { out }
    }

    pub fn data_dir(&self, cfg: &RunConfig) -> PathBuf {
        cfg.data.dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn surrogate_ckpt(&self, paradigm: Paradigm) -> PathBuf {
        self.out.join("surrogates").join(format!("{}.ckpt", paradigm.as_str()))
    }

    pub fn surrogate_log(&self, paradigm: Paradigm) -> PathBuf {
        self.out.join("surrogates").join(format!("{}_train_log.jsonl", paradigm.as_str()))
    }

    pub fn generator_dir(&self, tag: &str) -> PathBuf {
        self.out.join("generators").join(tag)
    }

    pub fn attack_dir(&self, tag: &str, split: &str) -> PathBuf {
        self.out.join("attacks").join(format!("{tag}-{split}"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    pub fn viz_dir(&self, name: &str) -> PathBuf {
        self.out.join("viz").join(name)
    }

    pub fn manifest_path(&self, name: &str) -> PathBuf {
        self.out.join("manifests").join(format!("{name}.json"))
    }
}

/// Default tag for a generator trained against a given surrogate paradigm.
pub fn generator_tag(paradigm: Paradigm) -> String {
    format!("gen-{}", paradigm.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.data.train_scenes, cfg.data.train_scenes);
    }

    #[test]
    fn unknown_keys_are_rejected_in_every_section() {
        for bad in [
            "mystery = 1",
            "[data]\nmystery = 1",
            "[surrogate]\nmystery = 1",
            "[generator]\nmystery = 1",
            "[generator.weights]\nmystery = 1",
            "[eval]\nmystery = 1",
        ] {
            assert!(
                toml::from_str::<RunConfig>(bad).is_err(),
                "accepted unknown key in: {bad}"
            );
        }
    }

    #[test]
    fn out_dir_resolution_prefers_the_flag() {
        let mut cfg = RunConfig::default();
        cfg.out_dir = Some(PathBuf::from("from-file"));
        let ws = Workspace::resolve(Some(PathBuf::from("from-flag")), &cfg);
        assert_eq!(ws.out, PathBuf::from("from-flag"));
        let ws = Workspace::resolve(None, &cfg);
        assert_eq!(ws.out, PathBuf::from("from-file"));
    }
}
