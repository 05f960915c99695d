//! Speech Commands ingestion, deterministic splits, task schedules and the
//! synthetic tone-pair surrogate.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{FeatureMatrix, MfccExtractor, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::{stable_hash, stream, Stream};
use crate::scalar::Scalar;

/// The 30 command words of Speech Commands v1, sorted.
pub const GSC_V1_WORDS: [&str; 30] = [
    "bed", "bird", "cat", "dog", "down", "eight", "five", "four", "go", "happy", "house", "left", "marvin", "nine",
    "no", "off", "on", "one", "right", "seven", "sheila", "six", "stop", "three", "tree", "two", "up", "wow", "yes",
    "zero",
];

pub const BACKGROUND_NOISE_DIR: &str = "_background_noise_";

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

// ---------------------------------------------------------------- WAV I/O

fn unsupported(field: &'static str, detail: impl Into<String>) -> Error {
    Error::UnsupportedFormat { field, detail: detail.into() }
}

fn hound_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => unsupported("header", msg),
        hound::Error::Unsupported => unsupported("format", "not a PCM WAVE file"),
        other => unsupported("format", other.to_string()),
    }
}

/// Reads a mono 16-bit PCM file at 16 kHz; sample `v` maps to `v / 32768`.
pub fn read_wav_pcm16(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| hound_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(unsupported("format", "floating-point samples"));
    }
    if spec.channels != 1 {
        return Err(unsupported("channels", format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(unsupported("sample rate", format!("{} Hz, expected {SAMPLE_RATE}", spec.sample_rate)));
    }
    if spec.bits_per_sample != 16 {
        return Err(unsupported("bit depth", format!("{} bits, expected 16", spec.bits_per_sample)));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f32::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| hound_err(path, e))?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Maps `[-1, 1)` onto the 16-bit grid, saturating at the ends.
pub fn quantize_sample(x: f32) -> i16 {
    (f64::from(x) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav_pcm16(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| hound_err(path, e))?;
    for &s in &w.samples {
        writer.write_sample(quantize_sample(s)).map_err(|e| hound_err(path, e))?;
    }
    writer.finalize().map_err(|e| hound_err(path, e))
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Stable identifier: the path relative to the dataset root, or a
    /// synthetic id.
    pub id: String,
    pub path: Option<PathBuf>,
    pub class_id: usize,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, class_id: usize, split: Option<Split>) -> usize {
        self.records.iter().filter(|r| r.class_id == class_id && r.split == split).count()
    }

    /// CSV with columns `id,path,class_id,class_name,split`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,path,class_id,class_name,split\n");
        for r in &self.records {
            let path = r.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            let split = r.split.map(Split::as_str).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&r.id),
                csv_field(&path),
                r.class_id,
                csv_field(&self.class_names[r.class_id]),
                split
            ));
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Enumerates WAV files under one directory per keyword.
///
/// `words` defaults to the 30 Speech Commands v1 words; class ids follow
/// sorted word order. Other directories are ignored.
pub fn scan_gsc_layout(root: &Path, words: Option<&[String]>) -> Result<Manifest> {
    let mut names: Vec<String> = match words {
        Some(w) => w.to_vec(),
        None => GSC_V1_WORDS.iter().map(|s| s.to_string()).collect(),
    };
    names.sort();
    names.dedup();
    if names.is_empty() {
        return Err(Error::InvalidDataset("empty keyword list".into()));
    }
    if !root.is_dir() {
        return Err(Error::InvalidDataset(format!("{} is not a directory", root.display())));
    }
    let missing: Vec<&str> = names.iter().filter(|w| !root.join(w.as_str()).is_dir()).map(String::as_str).collect();
    if !missing.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "{} is missing keyword directories: {}",
            root.display(),
            missing.join(", ")
        )));
    }
    let mut records = Vec::new();
    for (class_id, word) in names.iter().enumerate() {
        let dir = root.join(word);
        let mut files = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let is_wav = path.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav"));
            if is_wav && path.is_file() {
                files.push(path);
            }
        }
        files.sort();
        for path in files {
            let file = path.file_name().expect("read_dir yields named entries").to_string_lossy();
            records.push(Record { id: format!("{word}/{file}"), path: Some(path), class_id, split: None });
        }
    }
    Ok(Manifest { class_names: names, records })
}

/// Per-class split: records ordered by `stable_hash(seed, id)`, the first
/// `floor(fraction · n)` (at least one, at most `n − 1`) go to training.
pub fn deterministic_split(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<Manifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidDataset(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(r.class_id).or_default().push(i);
    }
    let mut out = manifest.clone();
    for c in 0..manifest.num_classes() {
        let idx = by_class.get(&c).map(Vec::as_slice).unwrap_or_default();
        let n = idx.len();
        if n < 2 {
            return Err(Error::InvalidDataset(format!(
                "class '{}' has {n} records, need at least 2 to split",
                manifest.class_names[c]
            )));
        }
        let mut keyed: Vec<(u64, &str, usize)> = idx
            .iter()
            .map(|&i| {
                let id = manifest.records[i].id.as_str();
                (stable_hash(seed, id.as_bytes()), id, i)
            })
            .collect();
        keyed.sort_unstable();
        let n_train = ((train_fraction * n as f64).floor() as usize).clamp(1, n - 1);
        for (rank, &(_, _, i)) in keyed.iter().enumerate() {
            out.records[i].split = Some(if rank < n_train { Split::Train } else { Split::Validation });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- schedules

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
}

/// Partition of classes into tasks: a first task of `first` classes, then
/// tasks of `per_task` classes each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub enum ScheduleLayout {
    SixTask,
    ElevenTask,
    TwentyOneTask,
    Custom { first: usize, per_task: usize },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LayoutRepr {
    Named(String),
    Custom { first: usize, per_task: usize },
}

impl TryFrom<LayoutRepr> for ScheduleLayout {
    type Error = Error;

    fn try_from(r: LayoutRepr) -> Result<Self> {
        match r {
            LayoutRepr::Named(s) => s.parse(),
            LayoutRepr::Custom { first, per_task } => Ok(ScheduleLayout::Custom { first, per_task }),
        }
    }
}

impl From<ScheduleLayout> for LayoutRepr {
    fn from(l: ScheduleLayout) -> Self {
        match l {
            ScheduleLayout::Custom { first, per_task } => LayoutRepr::Custom { first, per_task },
            named => LayoutRepr::Named(named.to_string()),
        }
    }
}

impl FromStr for ScheduleLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "6task" => Ok(Self::SixTask),
            "11task" => Ok(Self::ElevenTask),
            "21task" => Ok(Self::TwentyOneTask),
            other => {
                Err(Error::InvalidSchedule(format!("unknown layout '{other}' (expected 6task, 11task or 21task)")))
            }
        }
    }
}

impl fmt::Display for ScheduleLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SixTask => f.write_str("6task"),
            Self::ElevenTask => f.write_str("11task"),
            Self::TwentyOneTask => f.write_str("21task"),
            Self::Custom { first, per_task } => write!(f, "custom({first}, {per_task})"),
        }
    }
}

impl ScheduleLayout {
    /// Task sizes for `num_classes` classes.
    pub fn sizes(self, num_classes: usize) -> Result<Vec<usize>> {
        let (first, per_task, fixed_total) = match self {
            Self::SixTask => (15, 3, Some(30)),
            Self::ElevenTask => (10, 2, Some(30)),
            Self::TwentyOneTask => (10, 1, Some(30)),
            Self::Custom { first, per_task } => (first, per_task, None),
        };
        if let Some(total) = fixed_total.filter(|&t| t != num_classes) {
            return Err(Error::InvalidSchedule(format!("{self} needs {total} classes, got {num_classes}")));
        }
        if first == 0 || per_task == 0 || first > num_classes || !(num_classes - first).is_multiple_of(per_task) {
            return Err(Error::InvalidSchedule(format!(
                "{num_classes} classes cannot be split into a first task of {first} and tasks of {per_task}"
            )));
        }
        let mut sizes = vec![first];
        sizes.extend(std::iter::repeat_n(per_task, (num_classes - first) / per_task));
        Ok(sizes)
    }
}

/// Shuffles classes under the schedule stream of `seed`, then partitions
/// them by `layout`.
pub fn build_task_schedule(num_classes: usize, layout: ScheduleLayout, seed: u64) -> Result<Vec<TaskSpec>> {
    let sizes = layout.sizes(num_classes)?;
    let mut classes: Vec<usize> = (0..num_classes).collect();
    classes.shuffle(&mut stream(seed, Stream::Schedule));
    let mut tasks = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for (task_id, n) in sizes.into_iter().enumerate() {
        tasks.push(TaskSpec { task_id, class_ids: classes[start..start + n].to_vec() });
        start += n;
    }
    Ok(tasks)
}

/// Checks tasks are non-empty, disjoint and cover `0..num_classes`.
pub fn validate_schedule(tasks: &[TaskSpec], num_classes: usize) -> Result<()> {
    let mut seen = vec![false; num_classes];
    for t in tasks {
        if t.class_ids.is_empty() {
            return Err(Error::InvalidSchedule(format!("task {} has no classes", t.task_id)));
        }
        for &c in &t.class_ids {
            match seen.get_mut(c) {
                None => return Err(Error::InvalidSchedule(format!("class {c} out of range 0..{num_classes}"))),
                Some(true) => return Err(Error::InvalidSchedule(format!("class {c} appears in two tasks"))),
                Some(s) => *s = true,
            }
        }
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidSchedule(format!("class {c} is not assigned to any task")));
    }
    Ok(())
}

// ---------------------------------------------------------------- synthetic

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub examples_per_class: usize,
    /// Two tone frequencies (Hz) per class; generated when empty.
    pub frequencies: Vec<[f64; 2]>,
    /// Standard deviation of additive white Gaussian noise.
    pub noise_amplitude: f64,
    /// Peak amplitude of each tone before jitter.
    pub tone_amplitude: f64,
    /// Relative amplitude jitter; each tone is scaled by U(1 − j, 1 + j).
    pub amplitude_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 12,
            examples_per_class: 60,
            frequencies: Vec::new(),
            noise_amplitude: 0.3,
            tone_amplitude: 0.2,
            amplitude_jitter: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Tone pairs used for generation: explicit ones, or a default ladder
    /// with a low tone from 300 Hz and a high tone from 3.5 kHz.
    pub fn tone_pairs(&self) -> Vec<[f64; 2]> {
        if !self.frequencies.is_empty() {
            return self.frequencies.clone();
        }
        (0..self.num_classes).map(|c| [300.0 + 100.0 * c as f64, 3500.0 + 150.0 * c as f64]).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        let width = self.num_classes.saturating_sub(1).to_string().len().max(2);
        (0..self.num_classes).map(|c| format!("class_{c:0width$}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.examples_per_class < 2 {
            return Err(Error::InvalidConfig("synthetic data needs ≥ 1 class and ≥ 2 examples per class".into()));
        }
        let pairs = self.tone_pairs();
        if pairs.len() != self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "{} frequency pairs for {} classes",
                pairs.len(),
                self.num_classes
            )));
        }
        let nyquist = f64::from(SAMPLE_RATE) / 2.0;
        if let Some(p) = pairs.iter().flatten().find(|f| !(**f > 0.0 && **f < nyquist)) {
            return Err(Error::InvalidConfig(format!("tone frequency {p} Hz outside (0, {nyquist})")));
        }
        for (i, a) in pairs.iter().enumerate() {
            if pairs[..i].contains(a) {
                return Err(Error::InvalidConfig(format!("class {i} repeats an earlier frequency pair")));
            }
        }
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.noise_amplitude) || !finite_nonneg(self.tone_amplitude) {
            return Err(Error::InvalidConfig("amplitudes must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.amplitude_jitter) {
            return Err(Error::InvalidConfig("amplitude_jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: Manifest,
    /// Aligned with `manifest.records`.
    pub waveforms: Vec<Waveform>,
}

/// One-second clips of two jittered tones plus white noise, already on the
/// 16-bit grid so they survive a WAV round trip unchanged.
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Synth);
    let noise = Normal::new(0.0, spec.noise_amplitude).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let names = spec.class_names();
    let n = SAMPLE_RATE as usize;
    let mut records = Vec::with_capacity(spec.num_classes * spec.examples_per_class);
    let mut waveforms = Vec::with_capacity(records.capacity());
    let tau = std::f64::consts::TAU;
    for (class_id, pair) in spec.tone_pairs().into_iter().enumerate() {
        for k in 0..spec.examples_per_class {
            let tones: Vec<(f64, f64, f64)> = pair
                .iter()
                .map(|&f| {
                    let phase = rng.random_range(0.0..tau);
                    let jitter = if spec.amplitude_jitter > 0.0 {
                        rng.random_range(1.0 - spec.amplitude_jitter..1.0 + spec.amplitude_jitter)
                    } else {
                        1.0
                    };
                    (f, phase, spec.tone_amplitude * jitter)
                })
                .collect();
            let samples = (0..n)
                .map(|i| {
                    let t = i as f64 / f64::from(SAMPLE_RATE);
                    let clean: f64 = tones.iter().map(|&(f, ph, a)| a * (tau * f * t + ph).sin()).sum();
                    let x = clean + if spec.noise_amplitude > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    f32::from(quantize_sample(x as f32)) / 32768.0
                })
                .collect();
            let id = format!("{}/{:04}.wav", names[class_id], k);
            records.push(Record { id, path: None, class_id, split: None });
            waveforms.push(Waveform::new(samples, SAMPLE_RATE));
        }
    }
    Ok(SyntheticDataset { manifest: Manifest { class_names: names, records }, waveforms })
}

/// Writes a synthetic set in folder-per-class layout plus `manifest.csv`,
/// returning the manifest with file paths filled in.
pub fn write_synthetic_layout(data: &SyntheticDataset, out: &Path) -> Result<Manifest> {
    let mut manifest = data.manifest.clone();
    for name in &manifest.class_names {
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (r, w) in manifest.records.iter_mut().zip(&data.waveforms) {
        let path = out.join(&r.id);
        write_wav_pcm16(&path, w)?;
        r.path = Some(path);
    }
    let csv = out.join("manifest.csv");
    fs::write(&csv, manifest.to_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok(manifest)
}

// ---------------------------------------------------------------- features

#[derive(Debug, Clone)]
pub struct Example<T> {
    pub features: Arc<FeatureMatrix<T>>,
    pub label: usize,
}

/// Featurized, split data ready for training.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub class_names: Vec<String>,
    pub train: Vec<Example<T>>,
    pub validation: Vec<Example<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Featurizes a split manifest. `load` supplies the waveform of each
    /// record, by index.
    pub fn from_manifest<F>(manifest: &Manifest, extractor: &MfccExtractor<T>, mut load: F) -> Result<Self>
    where
        F: FnMut(usize, &Record) -> Result<Waveform>,
    {
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for (i, r) in manifest.records.iter().enumerate() {
            let split =
                r.split.ok_or_else(|| Error::InvalidDataset(format!("record {} has no split assignment", r.id)))?;
            let features = Arc::new(extractor.extract(&load(i, r)?)?);
            let ex = Example { features, label: r.class_id };
            match split {
                Split::Train => train.push(ex),
                Split::Validation => validation.push(ex),
            }
        }
        Ok(Self { class_names: manifest.class_names.clone(), train, validation })
    }

    /// Reads every record's WAV file.
    pub fn load_wavs(manifest: &Manifest, extractor: &MfccExtractor<T>) -> Result<Self> {
        Self::from_manifest(manifest, extractor, |_, r| {
            let path = r.path.as_ref().ok_or_else(|| Error::InvalidDataset(format!("record {} has no path", r.id)))?;
            read_wav_pcm16(path)
        })
    }

    /// Featurizes an in-memory synthetic set after splitting it.
    pub fn from_synthetic(
        data: &SyntheticDataset,
        train_fraction: f64,
        split_seed: u64,
        extractor: &MfccExtractor<T>,
    ) -> Result<Self> {
        let manifest = deterministic_split(&data.manifest, train_fraction, split_seed)?;
        Self::from_manifest(&manifest, extractor, |i, _| Ok(data.waveforms[i].clone()))
    }
}
