//! Experiment driver behind the `dekws` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dekws_core::autodiff::gradcheck::GradCheckReport;
use dekws_core::autodiff::OpKind;
use dekws_core::checkpoint;
use dekws_core::dataset::{
    build_task_schedule, deterministic_split, scan_gsc_layout, synthesize_dataset, write_synthetic_layout, Dataset,
    SyntheticSpec, TaskSpec,
};
use dekws_core::dsp::MfccExtractor;
use dekws_core::engine::{run_schedule, Precision, StepRecord};
use dekws_core::metrics::{count_correct, MetricsReport};
use dekws_core::model::TcResNet8;
use dekws_core::scalar::Scalar;
use dekws_core::verify::gradcheck_suite;
use serde::Serialize;

use crate::config::{DatasetSource, Experiment, ExperimentFile};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING_FAULT: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),
    #[error(transparent)]
    Core(#[from] dekws_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use dekws_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::GradCheck(_) => EXIT_FAILURE,
            CliError::Core(E::TrainingFault(_)) => EXIT_TRAINING_FAULT,
            CliError::Core(
                E::InvalidConfig(_)
                | E::InvalidSchedule(_)
                | E::InvalidDataset(_)
                | E::UnsupportedFormat { .. }
                | E::Io { .. },
            ) => EXIT_CONFIG,
            CliError::Core(_) => EXIT_FAILURE,
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Core(dekws_core::Error::Io { path: path.to_path_buf(), source: e }))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Core(dekws_core::Error::Io { path: dir.to_path_buf(), source: e }))
}

fn to_json<S: Serialize>(value: &S) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct BufferSummary {
    pub capacity: usize,
    pub len: usize,
    pub num_seen: u64,
    pub seen_after_task: Vec<u64>,
}

/// Everything a run reports except wall-clock time, so that repeated runs
/// produce identical bytes.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: Experiment,
    pub deviations: Vec<String>,
    pub classes: Vec<String>,
    pub tasks: Vec<TaskSpec>,
    /// Row `t`: accuracy on each task after training through task `t`.
    pub accuracy_matrix: Vec<Vec<Option<f64>>>,
    pub metrics: MetricsReport,
    pub buffer: BufferSummary,
    pub losses: Vec<StepRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub data_seconds: f64,
    pub train_seconds: f64,
    pub total_seconds: f64,
}

pub struct RunArtifacts {
    pub report: RunReport,
    pub matrix_csv: String,
    pub checkpoint: Vec<u8>,
    pub timing: Timing,
}

pub fn load_dataset<T: Scalar>(exp: &Experiment) -> Result<Dataset<T>, CliError> {
    let extractor = MfccExtractor::<T>::new(exp.mfcc.clone())?;
    Ok(match &exp.dataset {
        DatasetSource::Gsc(g) => {
            let manifest = scan_gsc_layout(&g.root, g.words.as_deref())?;
            Dataset::load_wavs(&deterministic_split(&manifest, exp.train_fraction, exp.seed)?, &extractor)?
        }
        DatasetSource::Synthetic(spec) => {
            Dataset::from_synthetic(&synthesize_dataset(spec)?, exp.train_fraction, exp.seed, &extractor)?
        }
    })
}

fn execute_typed<T: Scalar>(exp: &Experiment) -> Result<RunArtifacts, CliError> {
    let start = Instant::now();
    let data = load_dataset::<T>(exp)?;
    let schedule = build_task_schedule(data.num_classes(), exp.layout, exp.seed)?;
    let data_seconds = start.elapsed().as_secs_f64();
    let out = run_schedule(&schedule, &data, &exp.train)?;
    let total_seconds = start.elapsed().as_secs_f64();

    let tasks = out.matrix.tasks();
    let report = RunReport {
        config: exp.clone(),
        deviations: exp.deviations(),
        classes: data.class_names.clone(),
        tasks: schedule,
        accuracy_matrix: (0..tasks).map(|t| out.matrix.row(t).to_vec()).collect(),
        metrics: out.metrics.clone(),
        buffer: BufferSummary {
            capacity: out.buffer.capacity(),
            len: out.buffer.len(),
            num_seen: out.buffer.num_seen(),
            seen_after_task: out.seen_after_task.clone(),
        },
        losses: out.steps.clone(),
    };
    let echo = serde_json::to_value(exp).expect("config serializes");
    let keep_buffer = out.buffer.capacity() > 0;
    let checkpoint = checkpoint::to_bytes(&out.model, keep_buffer.then_some(&out.buffer), &echo)?;
    Ok(RunArtifacts {
        matrix_csv: out.matrix.to_csv(),
        report,
        checkpoint,
        timing: Timing { data_seconds, train_seconds: total_seconds - data_seconds, total_seconds },
    })
}

/// Runs one experiment in memory.
pub fn execute(exp: &Experiment) -> Result<RunArtifacts, CliError> {
    match exp.train.precision {
        Precision::F32 => execute_typed::<f32>(exp),
        Precision::F64 => execute_typed::<f64>(exp),
    }
}

pub const REPORT_FILE: &str = "report.json";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TIMING_FILE: &str = "timing.json";

pub fn write_artifacts(a: &RunArtifacts, dir: &Path) -> Result<(), CliError> {
    create_dir(dir)?;
    write(&dir.join(REPORT_FILE), to_json(&a.report))?;
    write(&dir.join(MATRIX_FILE), &a.matrix_csv)?;
    write(&dir.join(CHECKPOINT_FILE), &a.checkpoint)?;
    write(&dir.join(TIMING_FILE), to_json(&a.timing))
}

fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_experiment(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Experiment, CliError> {
    ExperimentFile::read(config)?.resolve(&config_base(config), seed, out)
}

pub fn cmd_run(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<RunReport, CliError> {
    let exp = load_experiment(config, seed, out)?;
    let artifacts = execute(&exp)?;
    write_artifacts(&artifacts, &exp.output_dir)?;
    Ok(artifacts.report)
}

/// Runs the gradient suite; `Err(GradCheck)` names every failing check.
pub fn cmd_gradcheck(seed: u64, inject_fault: Option<&str>) -> Result<Vec<GradCheckReport>, CliError> {
    let fault = inject_fault
        .map(|name| {
            OpKind::from_name(name).ok_or_else(|| {
                let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                CliError::Config(format!("unknown op '{name}' (known: {})", known.join(", ")))
            })
        })
        .transpose()?;
    let reports = gradcheck_suite(seed, fault)?;
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::GradCheck(failed))
    }
}

pub fn format_gradcheck(reports: &[GradCheckReport]) -> String {
    reports
        .iter()
        .map(|r| {
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            format!(
                "{:<16} max_rel_err {:.3e}  tol {:.0e}  probes {:>4}  {verdict}\n",
                r.name, r.max_rel_err, r.tolerance, r.probes
            )
        })
        .collect()
}

pub fn read_synthetic_spec(path: &Path, seed: Option<u64>) -> Result<SyntheticSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut spec: SyntheticSpec = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.to_string().trim_end())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec)
}

/// Writes a synthetic dataset as one WAV folder per class plus
/// `manifest.csv`; returns the number of files.
pub fn cmd_synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<usize, CliError> {
    let spec = read_synthetic_spec(spec_path, seed)?;
    let data = synthesize_dataset(&spec)?;
    create_dir(out)?;
    Ok(write_synthetic_layout(&data, out)?.len())
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub tasks: Vec<TaskSpec>,
    pub per_task: Vec<f64>,
    pub acc: f64,
    pub class_weighted_acc: f64,
}

fn eval_typed<T: Scalar>(exp: &Experiment, ckpt: &Path, bytes: &[u8]) -> Result<EvalReport, CliError> {
    let model: TcResNet8<T> = checkpoint::from_bytes(bytes)?.model;
    let data = load_dataset::<T>(exp)?;
    if model.config().num_classes != data.num_classes() {
        return Err(CliError::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            model.config().num_classes,
            data.num_classes()
        )));
    }
    let tasks = build_task_schedule(data.num_classes(), exp.layout, exp.seed)?;
    let (mut per_task, mut correct, mut total) = (Vec::new(), 0, 0);
    for t in &tasks {
        let pairs: Vec<_> = data
            .validation
            .iter()
            .filter(|e| t.class_ids.contains(&e.label))
            .map(|e| (e.features.as_ref(), e.label))
            .collect();
        let c = count_correct(&model, &pairs)?;
        per_task.push(c as f64 / pairs.len().max(1) as f64);
        correct += c;
        total += pairs.len();
    }
    let acc = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(EvalReport {
        checkpoint: ckpt.to_path_buf(),
        tasks,
        per_task,
        acc,
        class_weighted_acc: correct as f64 / total.max(1) as f64,
    })
}

/// Re-evaluates a checkpoint over the schedule a config describes.
pub fn cmd_eval(config: &Path, ckpt: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<EvalReport, CliError> {
    let exp = load_experiment(config, seed, out)?;
    let bytes =
        fs::read(ckpt).map_err(|e| CliError::Core(dekws_core::Error::Io { path: ckpt.to_path_buf(), source: e }))?;
    let report = match checkpoint::stored_dtype(&bytes)? {
        "f32" => eval_typed::<f32>(&exp, ckpt, &bytes)?,
        _ => eval_typed::<f64>(&exp, ckpt, &bytes)?,
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("eval.json"), to_json(&report))?;
    }
    Ok(report)
}
