//! Run configuration, read from TOML or JSON.

use std::path::{Path, PathBuf};

use ncconv::gradcheck::GradCheckConfig;
use ncconv::network::{ArchConfig, TrainConfig};
use ncconv::DType;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default dataset directory.
pub const DATA_DIR_ENV: &str = "NCCONV_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dtype: DType,
    /// Intra-op worker threads; 0 lets rayon decide.
    pub threads: usize,
    /// Report zero wall time so metrics files are byte-reproducible.
    pub deterministic: bool,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub resume: Option<ResumeConfig>,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
    pub theory: TheoryConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dtype: DType::F32,
            threads: 0,
            deterministic: true,
            model: ArchConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            resume: None,
            eval: EvalConfig::default(),
            gradcheck: GradCheckConfig::default(),
            theory: TheoryConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Binary batches; `dir` defaults to `$NCCONV_DATA_DIR/cifar-10-batches-bin`.
    Cifar10 {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default = "cifar_records")]
        records_per_file: usize,
    },
    /// IDX files; `dir` defaults to `$NCCONV_DATA_DIR/mnist`.
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    Synthetic {
        train: usize,
        val: usize,
        #[serde(default = "ten")]
        classes: usize,
        #[serde(default = "cifar_shape")]
        shape: [usize; 3],
        #[serde(default = "synth_noise")]
        noise: f64,
    },
}

fn cifar_records() -> usize {
    ncconv::data::CIFAR_RECORDS_PER_FILE
}

fn ten() -> usize {
    10
}

fn cifar_shape() -> [usize; 3] {
    [3, 32, 32]
}

fn synth_noise() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Class-balanced training subset size per class; `None` uses all.
    pub train_per_class: Option<usize>,
    /// Class-balanced validation subset size per class; `None` uses all.
    pub val_per_class: Option<usize>,
    pub subset_seed: u64,
    /// Per-channel standardization with training-set statistics.
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Cifar10 {
                dir: None,
                records_per_file: cifar_records(),
            },
            train_per_class: None,
            val_per_class: None,
            subset_seed: 0,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResumeConfig {
    pub checkpoint: PathBuf,
    /// Epochs finished when the checkpoint was written; training resumes at
    /// this epoch index.
    pub completed_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub patch_lens: Vec<usize>,
    pub instances: usize,
    pub normality_samples: usize,
    /// Training steps for the gradient-norm trace; 0 skips it.
    pub trace_steps: usize,
    pub trace_batch: usize,
    pub trace_lr: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            patch_lens: vec![4, 9, 27],
            instances: 100,
            normality_samples: 100_000,
            trace_steps: 200,
            trace_batch: 2,
            trace_lr: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    pub size: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub repeats: usize,
    pub batch: usize,
    pub geometries: Vec<BenchGeometry>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let g = |in_channels, out_channels, kernel, stride, size| BenchGeometry {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            size,
        };
        Self {
            repeats: 5,
            batch: 2,
            geometries: vec![g(3, 16, 3, 1, 32), g(16, 32, 3, 2, 32), g(32, 64, 3, 2, 16), g(64, 64, 1, 1, 8)],
        }
    }
}

impl RunConfig {
    /// Apply command-line overrides. The top-level seed is the single source
    /// of randomness: it is copied into the training and gradcheck sections so
    /// the resolved config states exactly what ran.
    pub fn resolve(mut self, seed: Option<u64>, out_dir: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(d) = out_dir {
            self.out_dir = d;
        }
        self.train.seed = self.seed;
        self.gradcheck.seed = self.seed;
        self
    }
}

/// Parse by extension: `.json` is JSON, anything else TOML.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig, String> {
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(text).map_err(|e| e.to_string())
    } else {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    parse_config(&text, path).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn default_data_dir(sub: &str) -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(|d| PathBuf::from(d).join(sub))
}
