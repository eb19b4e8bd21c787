//! Run configuration: presets, validation, TOML persistence and hashing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::CurriculumKind;
use crate::nnet::{config_hash, ModelConfig};
use crate::scenegen::{Dimension, GenConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    Desk,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailurePolicy {
    Abort,
    Continue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MamlConfig {
    pub enabled: bool,
    pub inner_lr: f64,
    pub outer_lr: f64,
    /// Run one inner step on a held-in batch before every holdout evaluation.
    pub adapt_at_test: bool,
}

impl Default for MamlConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            inner_lr: 0.001,
            outer_lr: 0.001,
            adapt_at_test: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub enabled: bool,
    /// Batches between evaluations.
    pub interval: usize,
    /// Probe length in batches; defaults to one epoch.
    pub duration: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            interval: 1,
            duration: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanKind {
    Homogeneous,
    Heterogeneous,
}

/// Which runs `plan` generates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub kind: PlanKind,
    /// Latin blocks (homogeneous) or blocks of six permutations (heterogeneous).
    pub n_blocks: usize,
    /// Restrict a homogeneous plan to one dimension.
    #[serde(default)]
    pub dimension: Option<Dimension>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scale: Scale,
    pub generator: GenConfig,
    pub model: ModelConfig,
    pub curriculum: CurriculumKind,
    pub criterion: f64,
    pub epoch_size: u64,
    pub n_batches: usize,
    pub batch_size: u64,
    pub holdout_size: usize,
    pub n_episodes: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub bn_momentum: f64,
    /// Score each task on a holdout subset with equal positives and negatives.
    pub balanced_eval: bool,
    /// Within-episode trials at which `accuracy_at_budget` is read.
    pub trial_budget: u64,
    pub on_failure: FailurePolicy,
    pub maml: MamlConfig,
    pub probes: ProbeConfig,
    pub simultaneous: bool,
    pub plan: PlanConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub parallelism: usize,
}

impl RunConfig {
    pub fn paper() -> Self {
        let generator = GenConfig::paper();
        Self {
            scale: Scale::Paper,
            model: ModelConfig::paper(3 * generator.values_per_dimension),
            generator,
            curriculum: CurriculumKind::Balanced,
            criterion: 0.95,
            epoch_size: 45_000,
            n_batches: 30,
            batch_size: 1500,
            holdout_size: 5000,
            n_episodes: 10,
            max_epochs: 200,
            learning_rate: 0.0005,
            weight_decay: 0.0001,
            bn_momentum: 0.1,
            balanced_eval: false,
            trial_budget: 22_500,
            on_failure: FailurePolicy::Abort,
            maml: MamlConfig::default(),
            probes: ProbeConfig::default(),
            simultaneous: false,
            plan: PlanConfig {
                kind: PlanKind::Homogeneous,
                n_blocks: 6,
                dimension: None,
            },
            seed: 0,
            output_dir: PathBuf::from("out"),
            parallelism: 1,
        }
    }

    pub fn desk() -> Self {
        let generator = GenConfig {
            width: 32,
            height: 24,
            values_per_dimension: 3,
            min_objects: 2,
            max_objects: 3,
            radius_min_frac: 0.22,
            radius_max_frac: 0.27,
            strict_positive_band: false,
            stratify: false,
            ..GenConfig::paper()
        };
        Self {
            scale: Scale::Desk,
            model: ModelConfig {
                conv_filters: vec![4, 8, 12, 16],
                fc_widths: vec![64],
                input_dims: [3, 24, 32],
                ..ModelConfig::paper(9)
            },
            generator,
            epoch_size: 3000,
            n_batches: 20,
            batch_size: 150,
            holdout_size: 1000,
            n_episodes: 3,
            criterion: 0.90,
            max_epochs: 100,
            learning_rate: 0.002,
            balanced_eval: true,
            trial_budget: 1500,
            plan: PlanConfig {
                kind: PlanKind::Heterogeneous,
                n_blocks: 1,
                dimension: None,
            },
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected paper or desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.curriculum.validate()?;
        let g = &self.generator;
        let n_tasks = 3 * g.values_per_dimension;
        if self.model.n_tasks != n_tasks {
            return Err(Error::Config(format!(
                "model.n_tasks is {}, the catalog has {n_tasks} tasks",
                self.model.n_tasks
            )));
        }
        if self.model.input_dims != [3, g.height, g.width] {
            return Err(Error::Config(format!(
                "model.input_dims {:?} do not match {}x{} RGB images",
                self.model.input_dims, g.width, g.height
            )));
        }
        if self.n_batches as u64 * self.batch_size != self.epoch_size {
            return Err(Error::Config(format!(
                "n_batches x batch_size = {} x {} does not equal epoch_size {}",
                self.n_batches, self.batch_size, self.epoch_size
            )));
        }
        if self.epoch_size == 0 || self.holdout_size == 0 {
            return Err(Error::Config("epoch_size and holdout_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.criterion) {
            return Err(Error::Config(format!("criterion {} outside [0, 1]", self.criterion)));
        }
        if self.n_episodes == 0 || self.n_episodes > n_tasks {
            return Err(Error::Config(format!(
                "n_episodes must be in 1..={n_tasks}, got {}",
                self.n_episodes
            )));
        }
        if self.plan.kind == PlanKind::Homogeneous && self.n_episodes > g.values_per_dimension {
            return Err(Error::Config(format!(
                "homogeneous runs have at most {} episodes",
                g.values_per_dimension
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.learning_rate) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be > 0 and weight_decay >= 0".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("bn_momentum must be in (0, 1]".into()));
        }
        if self.maml.enabled {
            if !(self.maml.inner_lr >= 0.0) || !positive(self.maml.outer_lr) {
                return Err(Error::Config("maml needs inner_lr >= 0 and outer_lr > 0".into()));
            }
            if self.batch_size < 2 {
                return Err(Error::Config("maml needs batches of at least two examples".into()));
            }
        }
        if self.probes.interval == 0 || self.probes.duration == Some(0) {
            return Err(Error::Config("probe interval and duration must be positive".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }

    pub fn probe_duration(&self) -> usize {
        self.probes.duration.unwrap_or(self.n_batches)
    }

    /// Digest of every field that can change results; `output_dir` and
    /// `parallelism` are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.parallelism = 1;
        config_hash(&c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Self::from_toml(&std::fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Inventory of an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub seeds: BTreeMap<String, u64>,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST: &str = "manifest.json";

impl RunManifest {
    /// Lists every file under `dir` except the manifest itself, in path order.
    pub fn build(dir: &Path, config: &RunConfig, seeds: BTreeMap<String, u64>) -> Result<Self> {
        let mut files = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d)? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                    continue;
                }
                let rel = path.strip_prefix(dir).expect("walked from dir");
                let name = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                if name == MANIFEST {
                    continue;
                }
                let data = std::fs::read(&path)?;
                files.push(FileEntry {
                    path: name,
                    bytes: data.len() as u64,
                    sha256: hex::encode(Sha256::digest(&data)),
                });
            }
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Self {
            config_hash: config.hash(),
            version: env!("CARGO_PKG_VERSION").into(),
            seeds,
            files,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::paper().validate().unwrap();
        RunConfig::desk().validate().unwrap();
        assert!(RunConfig::preset("laptop").is_err());
    }

    #[test]
    fn batch_arithmetic_is_checked() {
        let c = RunConfig {
            batch_size: 149,
            ..RunConfig::desk()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("epoch_size"), "{msg}");
    }

    #[test]
    fn hash_ignores_location_and_parallelism() {
        let a = RunConfig::desk();
        let b = RunConfig {
            output_dir: "elsewhere".into(),
            parallelism: 4,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig {
            learning_rate: 0.001,
            ..a.clone()
        };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn toml_round_trip() {
        for c in [RunConfig::paper(), RunConfig::desk()] {
            let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = RunConfig::desk().to_toml().unwrap().replace("criterion =", "criterium =");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn manifest_lists_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/a.txt"), "abc").unwrap();
        std::fs::write(dir.path().join("b.txt"), "").unwrap();
        let m = RunManifest::build(dir.path(), &RunConfig::desk(), BTreeMap::new()).unwrap();
        m.write(dir.path()).unwrap();
        let again = RunManifest::build(dir.path(), &RunConfig::desk(), BTreeMap::new()).unwrap();
        assert_eq!(m, again);
        let paths: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(paths, ["b.txt", "sub/a.txt"]);
        assert_eq!(m.files[1].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
