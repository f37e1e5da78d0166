//! Experiment configuration, read from a TOML file with one table per concern.
//! Unknown keys are rejected so a typo never silently falls back to a default.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};

use scotopic::{AnnealConfig, NoiseConfig, Regime, TrainConfig, ANCHOR_PPPS, REFERENCE_PPP};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub noise: NoiseConfig,
    pub train: TrainConfig,
    pub anneal: AnnealConfig,
    pub sweep: SweepConfig,
    pub light: LightConfig,
    pub run: RunConfig,
}

/// IDX files and split sizes. A size of zero means "everything available".
/// The validation split is taken from the training file, right after the
/// training images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub train_subset: usize,
    pub validation_subset: usize,
    pub test_subset: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_images: "data/train-images-idx3-ubyte.gz".into(),
            train_labels: "data/train-labels-idx1-ubyte.gz".into(),
            test_images: "data/t10k-images-idx3-ubyte.gz".into(),
            test_labels: "data/t10k-labels-idx1-ubyte.gz".into(),
            train_subset: 10_000,
            validation_subset: 2_000,
            test_subset: 2_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Waldnet,
    Rate,
    Photopic,
    Ensemble,
    WaldnetEstimatedLight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Load this model container instead of training.
    pub path: Option<PathBuf>,
    /// Learning rate of the rate, photopic and ensemble baselines.
    pub baseline_learning_rate: f64,
    /// Exposures of the ensemble's specialists.
    pub anchors: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Waldnet,
            path: None,
            baseline_learning_rate: TrainConfig::baseline().learning_rate,
            anchors: ANCHOR_PPPS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub regime: Regime,
    /// Interrogation exposures.
    pub ppps: Vec<f64>,
    /// Constant free-response thresholds.
    pub thresholds: Vec<f64>,
    /// Costs of time per PPP for threshold tuning.
    pub etas: Vec<f64>,
    /// Free-response cutoff.
    pub max_ppp: f64,
    pub query_points: usize,
    pub bootstrap: usize,
    pub noise_parameter: String,
    pub noise_values: Vec<f64>,
    /// Discretization thresholds of the spiking benchmark.
    pub taus: Vec<f64>,
    /// Threshold schedule CSV for the spiking benchmark; a constant
    /// `spiking_threshold` is used when absent.
    pub schedule: Option<PathBuf>,
    pub spiking_threshold: f64,
    /// Streams evaluated by the spiking benchmark (zero means the test split).
    pub spiking_streams: usize,
    pub exposure_lux: Vec<f64>,
    pub exposure_seconds: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Int,
            ppps: ANCHOR_PPPS.to_vec(),
            thresholds: (0..=28).map(|i| f64::from(i) * 0.5).collect(),
            etas: vec![1e-4, 1e-3],
            max_ppp: REFERENCE_PPP,
            query_points: scotopic::sprt::DEFAULT_GRID_POINTS,
            bootstrap: scotopic::sprt::DEFAULT_BOOTSTRAP,
            noise_parameter: "read_noise_std".into(),
            noise_values: vec![0.0, 0.15, 0.22, 0.5],
            taus: vec![0.05, 0.1, 0.2, 0.5, 1.0],
            schedule: None,
            spiking_threshold: 6.0,
            spiking_streams: 500,
            exposure_lux: vec![1e-3, 1.0, 250.0, 1e3, 1e5],
            exposure_seconds: vec![1.0 / 500.0, 1.0 / 128.0, 1.0 / 8.0, 1.0, 8.0, 60.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LightConfig {
    pub box_sizes: Vec<usize>,
    pub top_k: Vec<usize>,
    /// Exposures per training image, drawn log-uniform over `ppp_range`.
    pub exposures_per_image: usize,
    pub ppp_range: [f64; 2],
    /// Training images used for fitting (zero means the whole split).
    pub images: usize,
}

impl Default for LightConfig {
    fn default() -> Self {
        Self {
            box_sizes: scotopic::light::DEFAULT_BOX_SIZES.to_vec(),
            top_k: scotopic::light::DEFAULT_TOP_K.to_vec(),
            exposures_per_image: 2,
            ppp_range: [0.22, REFERENCE_PPP],
            images: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 0, out: "out".into() }
    }
}

fn positive(name: &str, values: &[f64]) -> Result<()> {
    for v in values {
        ensure!(*v > 0.0 && v.is_finite(), "{name}: {v} must be finite and > 0");
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Parses and validates a config file and checks the files it references.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.train.validate()?;
        self.anneal.validate()?;
        let s = &self.sweep;
        positive("sweep.ppps", &s.ppps)?;
        positive("sweep.max_ppp", &[s.max_ppp])?;
        positive("sweep.taus", &s.taus)?;
        positive("sweep.exposure_lux", &s.exposure_lux)?;
        positive("sweep.exposure_seconds", &s.exposure_seconds)?;
        positive("model.baseline_learning_rate", &[self.model.baseline_learning_rate])?;
        positive("model.anchors", &self.model.anchors)?;
        positive("light.ppp_range", &self.light.ppp_range)?;
        ensure!(
            s.etas.iter().all(|e| *e >= 0.0 && e.is_finite()),
            "sweep.etas must be finite and >= 0"
        );
        ensure!(
            s.thresholds.iter().all(|t| t.is_finite()),
            "sweep.thresholds must be finite"
        );
        // TOML integers are signed.
        ensure!(
            self.run.seed <= i64::MAX as u64 && self.train.seed <= i64::MAX as u64,
            "seeds must be below 2^63"
        );
        ensure!(s.query_points >= 2, "sweep.query_points must be >= 2");
        ensure!(s.max_ppp >= 0.22, "sweep.max_ppp must be >= 0.22");
        ensure!(s.bootstrap >= 1, "sweep.bootstrap must be >= 1");
        ensure!(
            self.light.ppp_range[0] < self.light.ppp_range[1],
            "light.ppp_range must be increasing"
        );
        ensure!(self.light.exposures_per_image >= 1, "light.exposures_per_image must be >= 1");
        ensure!(!self.light.box_sizes.is_empty(), "light.box_sizes must not be empty");
        ensure!(!self.light.top_k.is_empty(), "light.top_k must not be empty");
        ensure!(!self.model.anchors.is_empty(), "model.anchors must not be empty");
        Ok(())
    }

    pub fn check_files(&self) -> Result<()> {
        let d = &self.data;
        let mut paths = vec![&d.train_images, &d.train_labels, &d.test_images, &d.test_labels];
        paths.extend(self.model.path.as_ref());
        paths.extend(self.sweep.schedule.as_ref());
        for p in paths {
            ensure!(p.exists(), "referenced file {} does not exist", p.display());
        }
        Ok(())
    }

    /// Caps every data split at `n` images.
    pub fn apply_subset(&mut self, n: usize) {
        let cap = |v: &mut usize| *v = if *v == 0 { n } else { (*v).min(n) };
        cap(&mut self.data.train_subset);
        cap(&mut self.data.validation_subset);
        cap(&mut self.data.test_subset);
        cap(&mut self.light.images);
        cap(&mut self.sweep.spiking_streams);
    }

    /// Sets the run seed and the training seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.run.seed = seed;
        self.train.seed = seed;
    }
}
