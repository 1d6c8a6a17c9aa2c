//! Dataset assembly from the `[data]` config section.

use std::path::PathBuf;

use ncconv::data::{load_cifar10_with, load_mnist_idx, subset, synth_classification, Dataset, SynthOptions};
use ncconv::Rng;

use crate::config::{default_data_dir, DataConfig, DataSource, DATA_DIR_ENV};
use crate::{CliError, CliResult};

/// RNG stream for synthetic data, distinct from init and training streams.
const SYNTH_STREAM: u64 = 3;

fn resolve_dir(dir: &Option<PathBuf>, sub: &str) -> CliResult<PathBuf> {
    let dir = dir
        .clone()
        .or_else(|| default_data_dir(sub))
        .ok_or_else(|| CliError::Usage(format!("no dataset directory: set data.source.dir or {DATA_DIR_ENV}")))?;
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("dataset directory {} does not exist", dir.display())));
    }
    Ok(dir)
}

/// Training and validation sets after subsetting and normalization.
pub fn load_datasets(cfg: &DataConfig, seed: u64) -> CliResult<(Dataset, Dataset)> {
    let (train, val) = match &cfg.source {
        DataSource::Cifar10 { dir, records_per_file } => {
            load_cifar10_with(resolve_dir(dir, "cifar-10-batches-bin")?, *records_per_file)?
        }
        DataSource::Mnist { dir } => load_mnist_idx(resolve_dir(dir, "mnist")?)?,
        DataSource::Synthetic {
            train,
            val,
            classes,
            shape,
            noise,
        } => {
            if *classes == 0 || shape.contains(&0) {
                return Err(CliError::Usage("synthetic data needs classes > 0 and a non-empty shape".into()));
            }
            let mut rng = Rng::with_stream(seed, SYNTH_STREAM);
            let opts = SynthOptions {
                noise: *noise,
                separable: false,
            };
            let all = synth_classification(train + val, *classes, (shape[0], shape[1], shape[2]), &mut rng, opts)?;
            let idx: Vec<usize> = (0..train + val).collect();
            (all.select(&idx[..*train]), all.select(&idx[*train..]))
        }
    };
    let train = match cfg.train_per_class {
        Some(n) => subset(&train, n, cfg.subset_seed)?,
        None => train,
    };
    let val = match cfg.val_per_class {
        Some(n) => subset(&val, n, cfg.subset_seed)?,
        None => val,
    };
    if train.is_empty() {
        return Err(CliError::Usage("training set is empty".into()));
    }
    let stats = cfg.normalize.then(|| train.channel_stats());
    Ok((train.with_normalization(stats.clone()), val.with_normalization(stats)))
}
