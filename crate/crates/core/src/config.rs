//! Experiment configuration: data source, model shape, schedule, loss and
//! run settings. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_gaussian_blobs_shift, gen_two_moons_shift, load_csv, merge_sources, BlobsShift, Dataset, Standardizer, TwoMoonsShift};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::objectives::LossConfig;
use crate::schedule::ScheduleConfig;
use crate::trainer::{DomainTask, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvTask {
    /// One or more labelled source files; several are merged into one
    /// source domain.
    pub sources: Vec<PathBuf>,
    pub target: PathBuf,
    #[serde(default)]
    pub target_test: Option<PathBuf>,
    /// Overrides the class count inferred from the labels.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    TwoMoons(TwoMoonsShift),
    Blobs(BlobsShift),
    Csv(CsvTask),
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::TwoMoons(TwoMoonsShift::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task: TaskSpec,
    /// Standardise all domains with statistics of the (merged) source.
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            task: TaskSpec::default(),
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub extractor_dims: Vec<usize>,
    /// Width of the classifier's hidden layer; `null` for one layer.
    pub classifier_hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            extractor_dims: vec![32, 32],
            classifier_hidden: Some(16),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub trials: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            trials: 3,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub run: RunConfig,
}

/// A loaded task together with the standardiser applied to it.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTask {
    pub task: DomainTask,
    pub standardizer: Standardizer,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a JSON config. A missing file is a config error
    /// naming the path.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks everything that can be checked without reading data files.
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        if self.run.trials == 0 {
            return Err(Error::Config("run.trials must be at least 1".into()));
        }
        if self.model.extractor_dims.is_empty() || self.model.extractor_dims.contains(&0) {
            return Err(Error::Config("model.extractor_dims must be non-empty and positive".into()));
        }
        if self.model.classifier_hidden == Some(0) {
            return Err(Error::Config("model.classifier_hidden must be positive".into()));
        }
        match &self.data.task {
            TaskSpec::TwoMoons(p) => {
                if p.n < 2 || !(p.noise_sd >= 0.0) {
                    return Err(Error::Config("two_moons needs n >= 2 and noise_sd >= 0".into()));
                }
            }
            TaskSpec::Blobs(p) => {
                if p.num_classes < 2 || p.n_per_class == 0 || p.dim == 0 || !(p.cov_scale > 0.0) {
                    return Err(Error::Config(
                        "blobs needs num_classes >= 2, n_per_class >= 1, dim >= 1, cov_scale > 0".into(),
                    ));
                }
            }
            TaskSpec::Csv(c) => {
                if c.sources.is_empty() {
                    return Err(Error::Config("csv task needs at least one source file".into()));
                }
            }
        }
        Ok(())
    }

    /// Generates or loads the datasets and standardises them.
    pub fn build_task(&self) -> Result<PreparedTask> {
        self.validate()?;
        let task = match &self.data.task {
            TaskSpec::TwoMoons(p) => {
                let (s, t) = gen_two_moons_shift(p)?;
                DomainTask::new(s, t)
            }
            TaskSpec::Blobs(p) => {
                let (s, t) = gen_gaussian_blobs_shift(p)?;
                DomainTask::new(s, t)
            }
            TaskSpec::Csv(c) => load_csv_task(c)?,
        };
        let standardizer = if self.data.standardize {
            Standardizer::fit(task.source.features())
        } else {
            Standardizer::identity(task.source.dim())
        };
        let apply = |ds: Dataset| -> Result<Dataset> {
            let x = standardizer.apply(ds.features())?;
            ds.with_features(x)
        };
        let task = DomainTask {
            source: apply(task.source)?,
            target: apply(task.target)?,
            target_test: task.target_test.map(apply).transpose()?,
        };
        Ok(PreparedTask { task, standardizer })
    }

    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> Architecture {
        Architecture {
            input_dim,
            extractor_dims: self.model.extractor_dims.clone(),
            classifier_hidden: self.model.classifier_hidden,
            num_classes,
        }
    }

    /// Training settings for a loaded task.
    pub fn train_config(&self, task: &DomainTask) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            arch: self.architecture(task.source.dim(), task.source.num_classes()),
            schedule: self.schedule.clone(),
            loss: self.loss.clone(),
            seed: self.run.seed,
        };
        cfg.validate()?;
        task.validate(&cfg.arch)?;
        Ok(cfg)
    }
}

fn load_csv_task(c: &CsvTask) -> Result<DomainTask> {
    let sources: Vec<Dataset> = c.sources.iter().map(load_csv).collect::<Result<_>>()?;
    let mut source = merge_sources(&sources)?;
    if !source.is_labeled() {
        return Err(Error::Config("source files must be labelled".into()));
    }
    let k = c.num_classes.unwrap_or(source.num_classes());
    if k < source.num_classes() {
        return Err(Error::Config(format!(
            "num_classes {k} is smaller than the source label range {}",
            source.num_classes()
        )));
    }
    source = source.with_num_classes(k)?;
    let fit = |ds: Dataset| -> Result<Dataset> {
        if ds.dim() != source.dim() {
            return Err(Error::Config(format!(
                "{} has {} features, source has {}",
                ds.domain_tag(),
                ds.dim(),
                source.dim()
            )));
        }
        if ds.is_labeled() && ds.num_classes() > k {
            return Err(Error::Config(format!(
                "{} has labels up to {}, but K = {k}",
                ds.domain_tag(),
                ds.num_classes() - 1
            )));
        }
        ds.with_num_classes(k)
    };
    let target = fit(load_csv(&c.target)?)?;
    let target_test = c.target_test.as_ref().map(|p| load_csv(p).and_then(fit)).transpose()?;
    Ok(DomainTask {
        source,
        target,
        target_test,
    })
}
