//! Experiment configuration and dataset resolution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use permweld_core::align::AlignConfig;
use permweld_core::condense::CondenseConfig;
use permweld_core::data;
use permweld_core::landscape::PopulationConfig;
use permweld_core::{Data, MlpSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{at_path, CliError, CliResult};

pub const DATA_DIR_ENV: &str = "PERMWELD_DATA_DIR";

/// Where a named dataset comes from. Every variant yields a train and a
/// test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Pmds {
        train: PathBuf,
        test: PathBuf,
    },
    Blobs {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    },
    /// Every image of `base` rotated counterclockwise.
    Rotated {
        base: String,
        degrees: f64,
        #[serde(default)]
        height: Option<usize>,
        #[serde(default)]
        width: Option<usize>,
    },
    /// The rows of `base` whose label is in `labels`.
    Subset { base: String, labels: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths; input and output sizes come from the data.
    pub hidden: Vec<usize>,
    pub use_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![128, 128],
            use_bias: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub grid_size: usize,
    /// Weight of dataset B in every mixture.
    pub alpha: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            grid_size: 11,
            alpha: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FisherConfig {
    pub max_samples: usize,
    pub damping: f64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        FisherConfig {
            max_samples: 2000,
            damping: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Table1Config {
    pub base: String,
    pub angles: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for Table1Config {
    fn default() -> Self {
        Table1Config {
            base: "mnist".into(),
            angles: vec![0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0],
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Table2Config {
    pub pair: [String; 2],
    pub seeds: Vec<u64>,
    /// Training recipe for the model fitted on the condensed union.
    pub condensed_train: TrainConfig,
    /// STE settings when only condensed data is available.
    pub condensed_ste_epochs: usize,
}

impl Default for Table2Config {
    fn default() -> Self {
        Table2Config {
            pair: ["a".into(), "b".into()],
            seeds: vec![0],
            condensed_train: TrainConfig {
                epochs: 200,
                batch_size: 32,
                ..TrainConfig::default()
            },
            condensed_ste_epochs: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Overrides the seeds of training, alignment and condensation.
    pub seed: Option<u64>,
    /// Root for relative dataset paths, itself relative to the config file.
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub datasets: BTreeMap<String, DatasetSpec>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub align: AlignConfig,
    pub sweep: SweepConfig,
    pub condense: CondenseConfig,
    pub fisher: FisherConfig,
    pub table1: Table1Config,
    pub table2: Table2Config,
    pub population: PopulationConfig,
}

/// A parsed config plus the directory its relative paths hang off.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub data_root: PathBuf,
    /// `out_dir` from the config, resolved against the config file.
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        self.align.validate()?;
        self.condense.validate()?;
        self.table2.condensed_train.validate()?;
        if self.sweep.grid_size < 2 {
            return Err(CliError::usage("sweep.grid_size must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.sweep.alpha) {
            return Err(CliError::usage("sweep.alpha must lie in [0, 1]"));
        }
        if self.model.hidden.contains(&0) {
            return Err(CliError::usage("hidden widths must be positive"));
        }
        if self.fisher.max_samples == 0 {
            return Err(CliError::usage("fisher.max_samples must be at least 1"));
        }
        for (name, spec) in &self.datasets {
            if let DatasetSpec::Rotated { base, .. } | DatasetSpec::Subset { base, .. } = spec {
                if !self.datasets.contains_key(base) {
                    return Err(CliError::usage(format!("dataset {name} derives from unknown dataset {base}")));
                }
            }
        }
        Ok(())
    }

    /// Applies a global seed to every component seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.train.seed = s;
            self.align.seed = s;
            self.condense.seed = s;
        }
        self
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn spec_for(&self, data: &Data) -> CliResult<MlpSpec> {
        let mut sizes = vec![data.dim()];
        sizes.extend(&self.model.hidden);
        sizes.push(data.num_classes);
        Ok(MlpSpec::new(sizes, self.model.use_bias)?)
    }
}

impl Loaded {
    /// Reads `path`; with no path the defaults apply and relative paths
    /// resolve against `PERMWELD_DATA_DIR` or the working directory.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> CliResult<Self> {
        let (config, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (ExperimentConfig::from_json(&text)?, base)
            }
            None => (ExperimentConfig::default(), PathBuf::from(".")),
        };
        let data_root = match (&config.data_dir, std::env::var_os(DATA_DIR_ENV)) {
            (Some(d), _) => base.join(d),
            (None, Some(env)) => PathBuf::from(env),
            (None, None) => base.clone(),
        };
        let out_dir = config.out_dir.as_ref().map(|d| base.join(d));
        Ok(Loaded {
            config: config.with_seed(seed),
            data_root,
            out_dir,
        })
    }

    pub fn from_config(config: ExperimentConfig, data_root: impl Into<PathBuf>) -> CliResult<Self> {
        config.validate()?;
        Ok(Loaded {
            out_dir: config.out_dir.clone(),
            config,
            data_root: data_root.into(),
        })
    }

    fn path(&self, p: &Path) -> CliResult<PathBuf> {
        let full = self.data_root.join(p);
        if !full.is_file() {
            return Err(CliError::usage(format!("dataset file {} does not exist", full.display())));
        }
        Ok(full)
    }

    /// Materialises a named dataset as `(train, test)`. Train splits carry
    /// the dataset name, test splits `<name>-test`.
    pub fn dataset(&self, name: &str) -> CliResult<Split> {
        let spec = self
            .config
            .datasets
            .get(name)
            .ok_or_else(|| CliError::usage(format!("unknown dataset {name:?}")))?;
        let (train, test) = match spec {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let (ti, tl) = (self.path(train_images)?, self.path(train_labels)?);
                let (vi, vl) = (self.path(test_images)?, self.path(test_labels)?);
                let train = at_path(data::load_idx(&ti, &tl), &ti)?;
                let test = at_path(data::load_idx(&vi, &vl), &vi)?;
                let cut = |d: Data, n: &Option<usize>| match n {
                    Some(n) => d.head(*n),
                    None => d,
                };
                (cut(train, train_limit), cut(test, test_limit))
            }
            DatasetSpec::Pmds { train, test } => {
                let (t, v) = (self.path(train)?, self.path(test)?);
                (at_path(data::load_dataset(&t), &t)?, at_path(data::load_dataset(&v), &v)?)
            }
            DatasetSpec::Blobs {
                classes,
                per_class,
                test_per_class,
                dim,
                spread,
                seed,
            } => {
                let all = data::gen_blobs(*classes, per_class + test_per_class, *dim, *spread, *seed)?;
                // Rows interleave classes, so a prefix holds `per_class` of each.
                let cut = classes * per_class;
                let train: Vec<usize> = (0..cut).collect();
                let test: Vec<usize> = (cut..all.len()).collect();
                if test.is_empty() {
                    return Err(CliError::usage(format!("dataset {name}: test_per_class must be at least 1")));
                }
                (all.select(&train), all.select(&test))
            }
            DatasetSpec::Rotated {
                base,
                degrees,
                height,
                width,
            } => {
                let src = self.dataset(base)?;
                let dim = src.train.dim();
                let (h, w) = match (height, width) {
                    (Some(h), Some(w)) => (*h, *w),
                    _ => {
                        let side = (dim as f64).sqrt().round() as usize;
                        if side * side != dim {
                            return Err(CliError::usage(format!(
                                "dataset {name}: dimension {dim} is not square, set height and width"
                            )));
                        }
                        (side, side)
                    }
                };
                (
                    data::rotate(&src.train, *degrees, h, w)?,
                    data::rotate(&src.test, *degrees, h, w)?,
                )
            }
            DatasetSpec::Subset { base, labels } => {
                let src = self.dataset(base)?;
                let keep = |d: &Data| -> CliResult<Data> {
                    let idx: Vec<usize> = (0..d.len()).filter(|&i| labels.contains(&d.labels[i])).collect();
                    if idx.is_empty() {
                        return Err(CliError::usage(format!("dataset {name}: no rows carry labels {labels:?}")));
                    }
                    Ok(d.select(&idx))
                };
                (keep(&src.train)?, keep(&src.test)?)
            }
        };
        Ok(Split {
            train: train.renamed(name),
            test: test.renamed(format!("{name}-test")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Data,
    pub test: Data,
}
