//! Experiment manifests: one TOML file per experiment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use osrkd::data::synthetic::{known_class_names, SyntheticConfig};
use osrkd::pseudo_open::MixConfig;
use osrkd::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Overrides `dataset.root` for real (non-synthetic) datasets.
pub const DATA_ROOT_ENV: &str = "OSRKD_DATA_ROOT";

/// Points per cloud under `--desk-scale`.
pub const DESK_POINTS: usize = 32;

pub const MODELNET10_CLASSES: [&str; 10] = [
    "bathtub",
    "bed",
    "chair",
    "desk",
    "dresser",
    "monitor",
    "night_stand",
    "sofa",
    "table",
    "toilet",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub output_dir: PathBuf,
    /// Run directory (under `output_dir/runs`) holding the teacher checkpoint,
    /// used when `train.teacher_checkpoint` is unset.
    #[serde(default)]
    pub teacher_run: Option<String>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub mix: MixSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Cache key under `output_dir/cache`.
    pub name: String,
    /// ModelNet-style tree (`class/{train,test}/*.off`).
    pub root: Option<PathBuf>,
    pub known_classes: Vec<String>,
    pub n_points: usize,
    pub seed: u64,
    /// Generate the synthetic-shapes tree instead of reading `root`.
    pub synthetic: Option<SyntheticConfig>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            name: "modelnet40".into(),
            root: None,
            known_classes: MODELNET10_CLASSES.iter().map(|s| s.to_string()).collect(),
            n_points: osrkd::data::DEFAULT_POINTS,
            seed: 0,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSection {
    pub enabled: bool,
    pub orders: Vec<usize>,
    /// Samples per order; `ceil(closed_train / 9)` when unset.
    pub per_order: Option<usize>,
    pub rng_seed: u64,
    pub renormalize: bool,
}

impl Default for MixSection {
    fn default() -> Self {
        Self {
            enabled: true,
            orders: vec![2, 3, 4],
            per_order: None,
            rng_seed: 0,
            renormalize: true,
        }
    }
}

impl MixSection {
    pub fn to_config(&self, closed_train_size: usize) -> MixConfig {
        let mut cfg = MixConfig::default_for(closed_train_size, self.rng_seed);
        let per_order = self.per_order.unwrap_or_else(|| closed_train_size.div_ceil(9));
        cfg.counts_per_order = self.orders.iter().map(|&n| (n, per_order)).collect();
        cfg.renormalize = self.renormalize;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
    /// Extra thresholds reported by `eval` (closed-accuracy drop analysis).
    pub sweep_thresholds: Vec<f64>,
    /// Write a 2-D embedding of penultimate features for the latent plot.
    pub latent: bool,
    /// Cap on embedded samples; exact t-SNE is quadratic.
    pub latent_max_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: osrkd::osr::DEFAULT_THRESHOLD,
            sweep_thresholds: Vec::new(),
            latent: false,
            latent_max_samples: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: String,
    pub values: Vec<f64>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
        let m: Manifest = toml::from_str(&text).with_context(|| format!("invalid manifest {}", path.display()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c));
        if !ok(&self.name) {
            bail!("manifest name {:?} must be non-empty and use only [A-Za-z0-9_.-]", self.name);
        }
        if !ok(&self.dataset.name) {
            bail!("dataset name {:?} must be non-empty and use only [A-Za-z0-9_.-]", self.dataset.name);
        }
        Ok(())
    }

    /// Synthetic shapes, 32-point clouds and the short CPU training schedule.
    pub fn apply_desk_scale(&mut self) {
        let d = &mut self.dataset;
        d.name = "synthetic".into();
        d.synthetic = Some(d.synthetic.unwrap_or_default());
        d.known_classes = known_class_names();
        d.n_points = DESK_POINTS;
        d.root = None;
        let desk = TrainConfig::desk_scale(self.train.regime, self.train.rng_seed);
        self.train.epochs = desk.epochs;
        self.train.augmentation = desk.augmentation;
        self.train.bn_recalibration = desk.bn_recalibration;
        self.train.loss.n_negatives = desk.loss.n_negatives;
        self.train.loss.alpha = desk.loss.alpha;
        self.train.loss.beta = desk.loss.beta;
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.output_dir.join("cache").join(&self.dataset.name)
    }

    pub fn split_cache(&self) -> PathBuf {
        self.cache_dir().join("split.osrkd")
    }

    pub fn pseudo_open_cache(&self) -> PathBuf {
        self.cache_dir().join("pseudo_open.osrkd")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.output_dir.join("runs")
    }

    pub fn run_name(&self) -> String {
        format!("{}_seed{}", self.name, self.train.rng_seed)
    }

    /// Real dataset root: the environment override, then `dataset.root`.
    pub fn dataset_root(&self) -> Result<PathBuf> {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            return Ok(PathBuf::from(root));
        }
        self.dataset.root.clone().with_context(|| {
            format!("manifest {:?} has no dataset.root; set it or export {DATA_ROOT_ENV}", self.name)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_manifest_gets_defaults() {
        let m: Manifest = toml::from_str("name = \"x\"\noutput_dir = \"out\"\n[train]\nregime = \"student_kd\"\n").unwrap();
        assert_eq!(m.dataset.known_classes.len(), 10);
        assert_eq!(m.train.epochs, 100);
        assert_eq!(m.train.loss.tau_kd, 10.0);
        assert_eq!(m.run_name(), "x_seed0");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Manifest>("name = \"x\"\noutput_dir = \"o\"\ncolour = 1\n").is_err());
    }

    #[test]
    fn desk_scale_switches_to_synthetic() {
        let mut m: Manifest = toml::from_str("name = \"x\"\noutput_dir = \"o\"\n").unwrap();
        m.apply_desk_scale();
        assert_eq!(m.dataset.known_classes, known_class_names());
        assert_eq!((m.dataset.n_points, m.train.epochs), (DESK_POINTS, 10));
        assert!(!m.train.augmentation);
    }

    #[test]
    fn mix_counts_default_to_a_ninth() {
        let cfg = MixSection::default().to_config(3991);
        assert_eq!(cfg.total(), 3 * 444);
    }
}
