//! TOML experiment files and their resolution into concrete settings.

use std::fs;
use std::path::{Path, PathBuf};

use dekws_core::dataset::{ScheduleLayout, SyntheticSpec, DEFAULT_TRAIN_FRACTION};
use dekws_core::dsp::MfccConfig;
use dekws_core::engine::{Precision, Strategy, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub mfcc: MfccConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub gsc: Option<GscSection>,
    pub synthetic: Option<SyntheticSpec>,
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GscSection {
    pub root: PathBuf,
    /// Keyword directories to use; the 30 v1 words when absent.
    pub words: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub layout: ScheduleLayout,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { layout: ScheduleLayout::SixTask }
    }
}

/// Every field optional so contradictions with the strategy can be told
/// apart from defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub strategy: Option<Strategy>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs_per_task: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub buffer_capacity: Option<usize>,
    pub precision: Option<Precision>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Gsc(GscSection),
    Synthetic(SyntheticSpec),
}

/// Fully resolved experiment; echoed verbatim into every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Experiment {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub train_fraction: f64,
    pub layout: ScheduleLayout,
    pub mfcc: MfccConfig,
    pub train: TrainConfig,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

pub const DEFAULT_OUTPUT_DIR: &str = "dekws-out";

impl ExperimentFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let file: Self = toml::from_str(text)
            .map_err(|e| CliError::Config(format!("{}: {}", origin.display(), e.to_string().trim_end())))?;
        let raw: toml::Table = toml::from_str(text).expect("already parsed as TOML");
        let synth_seed = raw.get("dataset").and_then(|d| d.get("synthetic")).and_then(|s| s.get("seed"));
        if synth_seed.is_some() {
            return Err(CliError::Config(format!(
                "{}: dataset.synthetic.seed is not accepted here; the top-level seed drives every random stream",
                origin.display()
            )));
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Applies defaults and overrides and checks consistency. Relative
    /// paths in the file are taken relative to `base`.
    pub fn resolve(&self, base: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Experiment, CliError> {
        let seed = seed.or(self.seed).unwrap_or(0);
        let dataset = match (&self.dataset.gsc, &self.dataset.synthetic) {
            (Some(g), None) => {
                let root = base.join(&g.root);
                if !root.is_dir() {
                    return Err(CliError::Config(format!("dataset.gsc.root: {} is not a directory", root.display())));
                }
                DatasetSource::Gsc(GscSection { root, words: g.words.clone() })
            }
            (None, Some(s)) => {
                let spec = SyntheticSpec { seed, ..s.clone() };
                spec.validate().map_err(|e| CliError::Config(format!("dataset.synthetic: {e}")))?;
                DatasetSource::Synthetic(spec)
            }
            _ => {
                return Err(CliError::Config("exactly one of [dataset.gsc] and [dataset.synthetic] is required".into()))
            }
        };
        let train_fraction = self.dataset.train_fraction.unwrap_or(DEFAULT_TRAIN_FRACTION);
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(CliError::Config(format!("dataset.train_fraction must lie in (0, 1), got {train_fraction}")));
        }
        self.mfcc.validate().map_err(|e| CliError::Config(format!("mfcc: {e}")))?;
        let num_classes = match &dataset {
            DatasetSource::Synthetic(s) => s.num_classes,
            DatasetSource::Gsc(g) => g.words.as_ref().map_or(30, Vec::len),
        };
        self.schedule.layout.sizes(num_classes).map_err(|e| CliError::Config(format!("schedule.layout: {e}")))?;

        let train = self.train.resolve(seed)?;
        let output_dir = match (out, &self.output_dir) {
            (Some(o), _) => o.to_path_buf(),
            (None, Some(o)) => base.join(o),
            (None, None) => PathBuf::from(DEFAULT_OUTPUT_DIR),
        };
        Ok(Experiment {
            seed,
            dataset,
            train_fraction,
            layout: self.schedule.layout,
            mfcc: self.mfcc.clone(),
            train,
            output_dir,
        })
    }
}

impl TrainSection {
    pub fn resolve(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let strategy = self.strategy.unwrap_or(d.strategy);
        let nonzero = |v: Option<f64>| v.is_some_and(|x| x != 0.0);
        let contradiction = |field: &str| {
            CliError::Config(format!(
                "train.{field} is set but strategy '{strategy}' does not use it; remove it or set it to 0"
            ))
        };
        match strategy {
            Strategy::DeKws => {}
            Strategy::Finetune | Strategy::Joint | Strategy::NaiveRehearsal => {
                if nonzero(self.alpha) {
                    return Err(contradiction("alpha"));
                }
                if nonzero(self.beta) {
                    return Err(contradiction("beta"));
                }
                if strategy != Strategy::NaiveRehearsal && self.buffer_capacity.is_some_and(|c| c != 0) {
                    return Err(contradiction("buffer_capacity"));
                }
            }
        }
        let uses_weights = strategy == Strategy::DeKws;
        let uses_buffer = matches!(strategy, Strategy::DeKws | Strategy::NaiveRehearsal);
        let cfg = TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs_per_task: self.epochs_per_task.unwrap_or(d.epochs_per_task),
            alpha: if uses_weights { self.alpha.unwrap_or(d.alpha) } else { 0.0 },
            beta: if uses_weights { self.beta.unwrap_or(d.beta) } else { 0.0 },
            buffer_capacity: if uses_buffer { self.buffer_capacity.unwrap_or(d.buffer_capacity) } else { 0 },
            seed,
            strategy,
            precision: self.precision.unwrap_or(d.precision),
        };
        cfg.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        Ok(cfg)
    }
}

impl Experiment {
    /// Settings that differ from the reference defaults, in words.
    pub fn deviations(&self) -> Vec<String> {
        let d = TrainConfig::default();
        let t = &self.train;
        let mut out = Vec::new();
        if let DatasetSource::Synthetic(s) = &self.dataset {
            out.push(format!(
                "synthetic tone-pair surrogate ({} classes x {} examples) instead of Speech Commands v1",
                s.num_classes, s.examples_per_class
            ));
        }
        if t.lr != d.lr {
            out.push(format!("lr {} instead of {}", t.lr, d.lr));
        }
        if t.batch_size != d.batch_size {
            out.push(format!("batch_size {} instead of {}", t.batch_size, d.batch_size));
        }
        if t.epochs_per_task != d.epochs_per_task {
            out.push(format!("epochs_per_task {} instead of {}", t.epochs_per_task, d.epochs_per_task));
        }
        if t.strategy == Strategy::DeKws {
            if t.alpha != d.alpha || t.beta != d.beta {
                out.push(format!("alpha {} / beta {} instead of {} / {}", t.alpha, t.beta, d.alpha, d.beta));
            }
            if t.buffer_capacity != d.buffer_capacity {
                out.push(format!("buffer_capacity {} instead of {}", t.buffer_capacity, d.buffer_capacity));
            }
        }
        if self.layout != ScheduleLayout::SixTask {
            out.push(format!("schedule {} instead of 6task", self.layout));
        }
        out
    }
}
