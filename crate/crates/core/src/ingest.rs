//! Raw vibration series, segmentation into fixed-length samples, min-max
//! normalization, stratified fold plans and a synthetic fault-signal
//! generator for desk-scale runs.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Name of the label column in every dataset CSV.
pub const LABEL_COLUMN: &str = "label";

/// Sampling rate of the drive-end accelerometer recordings.
pub const CWRU_SAMPLING_RATE_HZ: f64 = 12_000.0;

/// A quarter revolution at 1797 rpm and 12 kHz (about 400 samples per revolution).
pub const DEFAULT_SEGMENT_LEN: usize = 100;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SignalMetadata {
    #[serde(default)]
    pub machine: String,
    /// Free-form load, e.g. `"0hp"` or `"26.6kN"`.
    #[serde(default)]
    pub load: String,
    pub fault_class: String,
    #[serde(default)]
    pub fault_diameter_mils: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawSignal {
    samples: Vec<f64>,
    sampling_rate_hz: f64,
    pub metadata: SignalMetadata,
}

impl RawSignal {
    pub fn new(samples: Vec<f64>, sampling_rate_hz: f64, metadata: SignalMetadata) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("signal has no samples".into()));
        }
        if !(sampling_rate_hz > 0.0 && sampling_rate_hz.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sampling rate must be positive, got {sampling_rate_hz}"
            )));
        }
        Ok(Self {
            samples,
            sampling_rate_hz,
            metadata,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sampling_rate_hz(&self) -> f64 {
        self.sampling_rate_hz
    }
}

/// Labeled sample matrix. Labels are stored as `1..=k`; `class_names[l - 1]`
/// names label `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    matrix: Array2<f64>,
    labels: Vec<usize>,
    feature_names: Vec<String>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        matrix: Array2<f64>,
        labels: Vec<usize>,
        feature_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let (n, d) = matrix.dim();
        if n == 0 || d == 0 {
            return Err(Error::Empty(format!("dataset must be at least 1x1, got {n}x{d}")));
        }
        if labels.len() != n {
            return Err(Error::Dimension(format!("{} labels for {n} rows", labels.len())));
        }
        if feature_names.len() != d {
            return Err(Error::Dimension(format!(
                "{} feature names for {d} columns",
                feature_names.len()
            )));
        }
        let k = class_names.len();
        if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > k) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 1..={k}")));
        }
        Ok(Self {
            matrix,
            labels,
            feature_names,
            class_names,
        })
    }

    /// Dataset with default feature names `s0, s1, ...`.
    pub fn from_matrix(matrix: Array2<f64>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let names = default_feature_names(matrix.ncols());
        Self::new(matrix, labels, names, class_names)
    }

    pub fn n_samples(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Number of rows carrying each label, indexed by `label - 1`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l - 1] += 1;
        }
        counts
    }

    pub fn with_matrix(&self, matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() != self.n_samples() || matrix.ncols() != self.n_features() {
            return Err(Error::Dimension(format!(
                "replacement matrix is {:?}, dataset is {}x{}",
                matrix.dim(),
                self.n_samples(),
                self.n_features()
            )));
        }
        Ok(Self {
            matrix,
            ..self.clone()
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("row selection is empty".into()));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= self.n_samples()) {
            return Err(Error::InvalidArgument(format!("row {r} out of range")));
        }
        Ok(Self {
            matrix: self.matrix.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            feature_names: self.feature_names.clone(),
            class_names: self.class_names.clone(),
        })
    }

    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Empty("column selection is empty".into()));
        }
        if let Some(&c) = columns.iter().find(|&&c| c >= self.n_features()) {
            return Err(Error::InvalidArgument(format!("column {c} out of range")));
        }
        Ok(Self {
            matrix: self.matrix.select(Axis(1), columns),
            labels: self.labels.clone(),
            feature_names: columns.iter().map(|&c| self.feature_names[c].clone()).collect(),
            class_names: self.class_names.clone(),
        })
    }

    /// Re-expresses the labels against `class_names`. Fails when this dataset
    /// contains a class that `class_names` lacks.
    pub fn remap_classes(&self, class_names: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = class_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i + 1))
            .collect();
        let mut translate = Vec::with_capacity(self.n_classes());
        for name in &self.class_names {
            let to = index.get(name.as_str()).copied().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "class '{name}' is not among the expected classes {class_names:?}"
                ))
            })?;
            translate.push(to);
        }
        Ok(Self {
            matrix: self.matrix.clone(),
            labels: self.labels.iter().map(|&l| translate[l - 1]).collect(),
            feature_names: self.feature_names.clone(),
            class_names: class_names.to_vec(),
        })
    }

    /// Stacks datasets with identical columns. Classes are merged by name in
    /// order of first appearance.
    pub fn concat(parts: &[Dataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("nothing to concatenate".into()))?;
        let mut class_names: Vec<String> = Vec::new();
        for part in parts {
            if part.feature_names != first.feature_names {
                return Err(Error::Dimension("datasets have different columns".into()));
            }
            for name in &part.class_names {
                if !class_names.contains(name) {
                    class_names.push(name.clone());
                }
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.matrix.view()).collect();
        let matrix = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let mut labels = Vec::with_capacity(matrix.nrows());
        for part in parts {
            labels.extend(part.remap_classes(&class_names)?.labels);
        }
        Self::new(matrix, labels, first.feature_names.clone(), class_names)
    }

    /// Writes the dataset as CSV: feature columns then a final `label` column
    /// holding class names.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<&str> = self
            .feature_names
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(LABEL_COLUMN))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        let mut line = String::new();
        for (row, &label) in self.matrix.outer_iter().zip(&self.labels) {
            line.clear();
            for v in row {
                line.push_str(&format!("{v},"));
            }
            line.push_str(&self.class_names[label - 1]);
            writeln!(out, "{line}")?;
        }
        out.flush()
    }
}

pub fn default_feature_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("s{j}")).collect()
}

/// Loads a dataset CSV. Every non-label column must parse as a real number.
/// Label values are mapped onto `1..=k`: numerically when every label is an
/// integer, otherwise in order of first appearance.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(BufReader::new(file), label_column, path)
}

pub fn read_csv<R: std::io::Read>(reader: R, label_column: &str, path: &Path) -> Result<Dataset> {
    let parse_err = |row: usize, column: &str, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, "-", e.to_string()))?
        .clone();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| parse_err(1, label_column, "label column not found in header".into()))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    if feature_names.is_empty() {
        return Err(parse_err(1, "-", "no feature columns".into()));
    }

    let d = feature_names.len();
    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => parse_err(
                row,
                "-",
                format!("ragged row: {len} fields, header has {expected_len}"),
            ),
            _ => parse_err(row, "-", e.to_string()),
        })?;
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                if cell.is_empty() {
                    return Err(parse_err(row, &header[j], "empty label".into()));
                }
                raw_labels.push(cell.to_string());
                continue;
            }
            if cell.is_empty() {
                return Err(parse_err(row, &header[j], "empty cell".into()));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, &header[j], format!("'{cell}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(row, &header[j], format!("'{cell}' is not finite")));
            }
            values.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::Empty(format!("{}: no data rows", path.display())));
    }

    let class_names = class_order(&raw_labels);
    let index: HashMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i + 1))
        .collect();
    let labels = raw_labels.iter().map(|l| index[l.as_str()]).collect();
    let matrix = Array2::from_shape_vec((raw_labels.len(), d), values)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    Dataset::new(matrix, labels, feature_names, class_names)
}

fn class_order(raw: &[String]) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for l in raw {
        if !seen.contains(l) {
            seen.push(l.clone());
        }
    }
    let numeric: Option<Vec<i64>> = seen.iter().map(|s| s.parse().ok()).collect();
    if let Some(nums) = numeric {
        let mut paired: Vec<(i64, String)> = nums.into_iter().zip(seen).collect();
        paired.sort();
        return paired.into_iter().map(|(_, s)| s).collect();
    }
    seen
}

/// Sidecar written next to a converted signal file (`foo.csv` -> `foo.json`).
#[derive(Clone, Debug, Deserialize)]
struct SignalSidecar {
    #[serde(flatten)]
    metadata: SignalMetadata,
    #[serde(default)]
    sampling_rate_hz: Option<f64>,
}

/// Path of the metadata sidecar for a converted signal CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Loads a single-channel signal CSV with header `sample_index,value` (or a
/// single value column). Metadata comes from the JSON sidecar when present;
/// otherwise the file stem is used as the fault class and the rate defaults
/// to [`CWRU_SAMPLING_RATE_HZ`].
pub fn load_signal_csv(path: impl AsRef<Path>) -> Result<RawSignal> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            column: "-".into(),
            message: e.to_string(),
        })?
        .clone();
    let col = header
        .iter()
        .position(|h| h == "value")
        .unwrap_or(header.len().saturating_sub(1));
    let mut samples = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row,
            column: "-".into(),
            message: e.to_string(),
        })?;
        let cell = record.get(col).unwrap_or("");
        let v: f64 = cell.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            row,
            column: header.get(col).unwrap_or("value").to_string(),
            message: format!("'{cell}' is not a number"),
        })?;
        samples.push(v);
    }

    let sidecar = sidecar_path(path);
    let (metadata, rate) = if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: SignalSidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: sidecar.clone(),
            row: e.line(),
            column: e.column().to_string(),
            message: e.to_string(),
        })?;
        let rate = meta.sampling_rate_hz.unwrap_or(CWRU_SAMPLING_RATE_HZ);
        (meta.metadata, rate)
    } else {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        (
            SignalMetadata {
                fault_class: stem,
                ..Default::default()
            },
            CWRU_SAMPLING_RATE_HZ,
        )
    };
    if samples.is_empty() {
        return Err(Error::Empty(format!("{}: no samples", path.display())));
    }
    RawSignal::new(samples, rate, metadata)
}

/// Number of windows `segment` produces.
pub fn segment_count(len: usize, segment_len: usize, stride: usize) -> usize {
    if segment_len == 0 || stride == 0 || segment_len > len {
        0
    } else {
        (len - segment_len) / stride + 1
    }
}

/// Cuts `signal` into windows `[i*stride, i*stride + segment_len)`. All rows
/// carry the signal's fault class.
pub fn segment(signal: &RawSignal, segment_len: usize, stride: usize) -> Result<Dataset> {
    if segment_len == 0 || stride == 0 {
        return Err(Error::InvalidArgument("segment length and stride must be positive".into()));
    }
    let count = segment_count(signal.len(), segment_len, stride);
    if count == 0 {
        return Err(Error::Empty(format!(
            "segment length {segment_len} exceeds signal length {}",
            signal.len()
        )));
    }
    let s = signal.samples();
    let matrix = Array2::from_shape_fn((count, segment_len), |(i, j)| s[i * stride + j]);
    Dataset::from_matrix(matrix, vec![1; count], vec![signal.metadata.fault_class.clone()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationParams {
    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Maps every cell to `(x - min) / (max - min)`, clamped to `[0, 1]`.
    /// Constant columns map to 0.
    pub fn apply_matrix(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "normalizer fitted on {} columns, data has {}",
                self.dim(),
                data.ncols()
            )));
        }
        let mut out = data.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (lo, hi) = (self.min[j], self.max[j]);
            let range = hi - lo;
            col.mapv_inplace(|x| {
                if range > 0.0 {
                    ((x - lo) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            });
        }
        Ok(out)
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        data.with_matrix(self.apply_matrix(data.matrix())?)
    }

    /// Affine inverse of [`apply_matrix`](Self::apply_matrix) (constant
    /// columns come back as their constant).
    pub fn denormalize_matrix(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "normalizer fitted on {} columns, data has {}",
                self.dim(),
                data.ncols()
            )));
        }
        let mut out = data.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (lo, hi) = (self.min[j], self.max[j]);
            col.mapv_inplace(|v| lo + v * (hi - lo));
        }
        Ok(out)
    }
}

/// Per-column min/max over the given (training) rows.
pub fn fit_normalizer(train: &Dataset) -> NormalizationParams {
    fit_normalizer_matrix(train.matrix())
}

pub fn fit_normalizer_matrix(train: &Array2<f64>) -> NormalizationParams {
    let (min, max) = train
        .axis_iter(Axis(1))
        .map(|col| {
            col.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
        })
        .unzip();
    NormalizationParams { min, max }
}

pub fn apply_normalizer(params: &NormalizationParams, data: &Dataset) -> Result<Dataset> {
    params.apply(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn n(&self) -> usize {
        self.assignments.len()
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignments[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified k-fold assignment. Rows of each class are shuffled with `seed`
/// and dealt round-robin, continuing the deal across classes, so both the
/// overall and the per-class fold sizes differ by at most one.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    let n = labels.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("{k} folds for {n} samples")));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let mut rng = rng::seeded(rng::derive(seed, "kfold"));
    let mut assignments = vec![0; n];
    let mut dealt = 0usize;
    for class in classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            assignments[i] = dealt % k;
            dealt += 1;
        }
    }
    Ok(FoldPlan {
        k,
        assignments,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub segment_len: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Multiplies the shaft, defect and resonance frequencies; values other
    /// than 1 give a shifted operating condition of the same fault classes.
    pub freq_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 400,
            segment_len: DEFAULT_SEGMENT_LEN,
            noise_std: 0.05,
            seed: 0,
            freq_scale: 1.0,
        }
    }
}

const SYNTH_RATE_HZ: f64 = 12_000.0;
const SHAFT_HZ: f64 = 29.95;

/// Deterministic noise-free waveform of one synthetic class.
///
/// Every class shares the shaft harmonics. Class 0 is the healthy condition;
/// class `c > 0` adds a tone on harmonic `c + 2` of the segment rate
/// (`rate / segment_len`), so it repeats with the same phase in every
/// window, and a train of decaying resonance bursts whose repetition rate
/// plays the part of a bearing defect frequency and drifts freely against
/// the window grid.
#[derive(Clone, Debug)]
pub struct ClassWaveform {
    shaft_hz: f64,
    tone_hz: f64,
    tone_amp: f64,
    impulse_period: Option<f64>,
    resonance_hz: f64,
    decay: f64,
    impulse_amp: f64,
}

impl ClassWaveform {
    pub fn new(class: usize, segment_len: usize, freq_scale: f64) -> Self {
        // defect-to-shaft ratios in the range of inner race, rolling element and outer race faults
        const RATIOS: [f64; 3] = [5.415, 4.714, 3.585];
        let shaft_hz = SHAFT_HZ * freq_scale;
        if class == 0 {
            return Self {
                shaft_hz,
                tone_hz: 0.0,
                tone_amp: 0.0,
                impulse_period: None,
                resonance_hz: 0.0,
                decay: 1.0,
                impulse_amp: 0.0,
            };
        }
        let ratio = RATIOS
            .get(class - 1)
            .copied()
            .unwrap_or(2.0 + 1.3 * class as f64);
        let defect_hz = shaft_hz * ratio;
        Self {
            shaft_hz,
            tone_hz: (class + 2) as f64 * SYNTH_RATE_HZ / segment_len as f64,
            tone_amp: 0.25 + 0.1 * class as f64,
            impulse_period: Some(SYNTH_RATE_HZ / defect_hz),
            resonance_hz: (1800.0 + 650.0 * class as f64) * freq_scale,
            decay: 9.0 + 3.0 * class as f64,
            impulse_amp: 0.8 + 0.35 * class as f64,
        }
    }

    /// Waveform value at sample index `t`.
    pub fn value(&self, t: f64) -> f64 {
        let w = 2.0 * PI / SYNTH_RATE_HZ;
        let mut v = 0.3 * (w * self.shaft_hz * t).sin() + 0.1 * (w * 2.0 * self.shaft_hz * t + 0.7).sin();
        v += self.tone_amp * (w * self.tone_hz * t).sin();
        if let Some(period) = self.impulse_period {
            // contributions of the current and the previous two bursts
            let last = (t / period).floor();
            for back in 0..3 {
                let start = (last - back as f64) * period;
                if start < 0.0 {
                    break;
                }
                let age = t - start;
                v += self.impulse_amp
                    * (-age / self.decay).exp()
                    * (w * self.resonance_hz * age).sin();
            }
        }
        v
    }
}

/// Per-class sample offsets used by [`generate_synthetic_with`] for `seed`.
pub fn synthetic_offsets(classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::seeded(rng::derive(seed, "synthetic-offset"));
    (0..classes).map(|_| rng.gen_range(0..100_000)).collect()
}

pub fn synthetic_class_names(classes: usize) -> Vec<String> {
    const NAMES: [&str; 4] = ["normal", "inner", "ball", "outer"];
    (0..classes)
        .map(|c| NAMES.get(c).map_or_else(|| format!("fault{c}"), |s| s.to_string()))
        .collect()
}

/// Balanced synthetic dataset of `classes * per_class` segments.
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    segment_len: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    generate_synthetic_with(&SyntheticConfig {
        classes,
        per_class,
        segment_len,
        noise_std,
        seed,
        freq_scale: 1.0,
    })
}

/// Each class is one continuous waveform starting at a seeded offset, plus
/// Gaussian noise, cut into non-overlapping segments.
pub fn generate_synthetic_with(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if cfg.per_class == 0 {
        return Err(Error::InvalidArgument("need at least 1 sample per class".into()));
    }
    if cfg.segment_len < 2 {
        return Err(Error::InvalidArgument("segment length must be at least 2".into()));
    }
    if !(cfg.noise_std >= 0.0 && cfg.noise_std.is_finite()) {
        return Err(Error::InvalidArgument("noise_std must be finite and non-negative".into()));
    }
    if !(cfg.freq_scale > 0.0 && cfg.freq_scale.is_finite()) {
        return Err(Error::InvalidArgument("freq_scale must be positive".into()));
    }
    let offsets = synthetic_offsets(cfg.classes, cfg.seed);
    let names = synthetic_class_names(cfg.classes);
    let len = cfg.per_class * cfg.segment_len;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let parts: Vec<Dataset> = (0..cfg.classes)
        .map(|c| {
            let wave = ClassWaveform::new(c, cfg.segment_len, cfg.freq_scale);
            let mut rng = rng::seeded(rng::derive_indexed(cfg.seed, "synthetic-noise", c));
            let samples: Vec<f64> = (0..len)
                .map(|t| {
                    let clean = wave.value((offsets[c] + t) as f64);
                    if cfg.noise_std > 0.0 {
                        clean + noise.sample(&mut rng)
                    } else {
                        clean
                    }
                })
                .collect();
            let signal = RawSignal::new(
                samples,
                SYNTH_RATE_HZ,
                SignalMetadata {
                    machine: "synthetic".into(),
                    load: String::new(),
                    fault_class: names[c].clone(),
                    fault_diameter_mils: None,
                },
            )?;
            segment(&signal, cfg.segment_len, cfg.segment_len)
        })
        .collect::<Result<_>>()?;
    Dataset::concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn signal(n: usize) -> RawSignal {
        RawSignal::new(
            (0..n).map(|i| i as f64).collect(),
            12_000.0,
            SignalMetadata {
                fault_class: "normal".into(),
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn parse(text: &str) -> Result<Dataset> {
        read_csv(text.as_bytes(), LABEL_COLUMN, Path::new("mem.csv"))
    }

    #[test]
    fn csv_four_rows_two_classes() {
        let ds = parse("f1,f2,label\n1,2,a\n3,4,b\n5,6,a\n7,8,b\n").unwrap();
        assert_eq!((ds.n_samples(), ds.n_features(), ds.n_classes()), (4, 2, 2));
        assert_eq!(ds.labels(), &[1, 2, 1, 2]);
        assert_eq!(ds.class_names(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn csv_numeric_labels_sort_numerically() {
        let ds = parse("x,label\n1,10\n2,2\n3,1\n").unwrap();
        assert_eq!(ds.class_names(), &["1", "2", "10"]);
        assert_eq!(ds.labels(), &[3, 2, 1]);
    }

    #[test]
    fn csv_empty_cell_names_row_and_column() {
        let err = parse("f1,f2,label\n1,2,a\n3,,b\n").unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "f2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(parse("f1,label\n1,a,3\n"), Err(Error::Parse { row: 2, .. })));
        assert!(matches!(parse("f1,label\nx,a\n"), Err(Error::Parse { row: 2, .. })));
        assert!(matches!(
            read_csv("f1,cls\n1,a\n".as_bytes(), "label", Path::new("m")),
            Err(Error::Parse { row: 1, .. })
        ));
        assert!(matches!(load_csv("/nonexistent/file.csv", "label"), Err(Error::Io { .. })));
    }

    #[test]
    fn csv_write_read_round_trip() {
        let ds = generate_synthetic(3, 4, 5, 0.1, 9).unwrap();
        let mut buf = Vec::new();
        ds.write_csv_to(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), LABEL_COLUMN, Path::new("m")).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn segment_counts_follow_table_one() {
        let ds = segment(&signal(121_000), 100, 100).unwrap();
        assert_eq!((ds.n_samples(), ds.n_features()), (1210, 100));
        assert_eq!(segment(&signal(40_000), 100, 100).unwrap().n_samples(), 400);
    }

    #[test]
    fn segment_boundary_and_error() {
        let sig = signal(100);
        let ds = segment(&sig, 100, 100).unwrap();
        assert_eq!(ds.n_samples(), 1);
        assert_eq!(ds.matrix().row(0).to_vec(), sig.samples().to_vec());
        assert!(matches!(segment(&sig, 101, 1), Err(Error::Empty(_))));
    }

    proptest! {
        #[test]
        fn segment_count_matches_naive_loop(len in 1usize..400, seg in 1usize..60, stride in 1usize..60) {
            prop_assume!(stride <= seg && seg <= len);
            let mut naive = 0;
            let mut start = 0;
            while start + seg <= len {
                naive += 1;
                start += stride;
            }
            prop_assert_eq!(segment_count(len, seg, stride), naive);
            let ds = segment(&signal(len), seg, stride).unwrap();
            prop_assert_eq!(ds.n_samples(), naive);
            for i in 0..naive {
                prop_assert_eq!(ds.matrix()[[i, 0]], (i * stride) as f64);
            }
        }

        #[test]
        fn normalizer_maps_training_data_into_unit_interval(
            rows in 1usize..12, cols in 1usize..6, seed in any::<u64>()
        ) {
            let mut rng = rng::seeded(seed);
            let m = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-50.0..50.0));
            let p = fit_normalizer_matrix(&m);
            let z = p.apply_matrix(&m).unwrap();
            prop_assert!(z.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let back = p.denormalize_matrix(&z).unwrap();
            for j in 0..cols {
                if p.max[j] > p.min[j] {
                    for i in 0..rows {
                        prop_assert!((back[[i, j]] - m[[i, j]]).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn kfold_partitions_and_balances(n in 2usize..120, classes in 1usize..5, k in 2usize..8, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let labels: Vec<usize> = (0..n).map(|i| i % classes + 1).collect();
            let plan = kfold_split(&labels, k, seed).unwrap();
            prop_assert_eq!(plan.assignments.len(), n);
            let sizes = plan.fold_sizes();
            let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            for c in 1..=classes {
                let mut per = vec![0usize; k];
                for i in 0..n {
                    if labels[i] == c { per[plan.assignments[i]] += 1; }
                }
                prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            }
            let mut all: Vec<usize> = (0..k).flat_map(|f| plan.test_indices(f)).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn normalizer_examples() {
        let m = array![[2.0, 5.0], [4.0, 5.0], [6.0, 5.0]];
        let p = fit_normalizer_matrix(&m);
        assert_eq!(p.min, vec![2.0, 5.0]);
        assert_eq!(p.max, vec![6.0, 5.0]);
        let z = p.apply_matrix(&m).unwrap();
        assert_eq!(z.column(0).to_vec(), vec![0.0, 0.5, 1.0]);
        assert_eq!(z.column(1).to_vec(), vec![0.0, 0.0, 0.0]);

        let single = fit_normalizer_matrix(&array![[3.0, -1.0]]);
        assert_eq!(single.min, single.max);

        // held-out values outside the training range are clamped
        let held = p.apply_matrix(&array![[10.0, 7.0], [0.0, 1.0]]).unwrap();
        assert_eq!(held, array![[1.0, 0.0], [0.0, 0.0]]);
        assert!(matches!(p.apply_matrix(&array![[1.0]]), Err(Error::Dimension(_))));
    }

    #[test]
    fn kfold_examples() {
        let labels = vec![1; 400];
        let plan = kfold_split(&labels, 5, 3).unwrap();
        assert_eq!(plan.fold_sizes(), vec![80; 5]);

        let loo = kfold_split(&[1; 10], 10, 0).unwrap();
        assert_eq!(loo.fold_sizes(), vec![1; 10]);

        assert_eq!(kfold_split(&labels, 5, 3).unwrap(), plan);
        assert_ne!(kfold_split(&labels, 5, 4).unwrap().assignments, plan.assignments);
        assert!(kfold_split(&[1, 2], 3, 0).is_err());
        assert!(kfold_split(&[1, 2], 1, 0).is_err());
    }

    #[test]
    fn synthetic_shape_and_balance() {
        let ds = generate_synthetic(4, 400, 100, 0.05, 11).unwrap();
        assert_eq!((ds.n_samples(), ds.n_features()), (1600, 100));
        assert_eq!(ds.class_counts(), vec![400; 4]);
        let again = generate_synthetic(4, 400, 100, 0.05, 11).unwrap();
        assert!(ds
            .matrix()
            .iter()
            .zip(again.matrix().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn synthetic_without_noise_is_windowed_template() {
        let (k, n, d, seed) = (3, 6, 20, 5);
        let ds = generate_synthetic(k, n, d, 0.0, seed).unwrap();
        let offsets = synthetic_offsets(k, seed);
        for (i, row) in ds.matrix().outer_iter().enumerate() {
            let c = ds.labels()[i] - 1;
            let wave = ClassWaveform::new(c, d, 1.0);
            let start = offsets[c] + (i % n) * d;
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, wave.value((start + j) as f64));
            }
        }
    }

    #[test]
    fn synthetic_rejects_bad_arguments() {
        assert!(generate_synthetic(1, 10, 10, 0.0, 0).is_err());
        assert!(generate_synthetic(2, 0, 10, 0.0, 0).is_err());
        assert!(generate_synthetic(2, 10, 1, 0.0, 0).is_err());
        assert!(generate_synthetic(2, 10, 10, -1.0, 0).is_err());
    }

    #[test]
    fn concat_and_remap() {
        let a = Dataset::from_matrix(array![[1.0], [2.0]], vec![1, 1], vec!["x".into()]).unwrap();
        let b = Dataset::from_matrix(array![[3.0]], vec![1], vec!["y".into()]).unwrap();
        let ab = Dataset::concat(&[a.clone(), b]).unwrap();
        assert_eq!(ab.labels(), &[1, 1, 2]);
        let re = ab.remap_classes(&["y".into(), "x".into()]).unwrap();
        assert_eq!(re.labels(), &[2, 2, 1]);
        assert!(a.remap_classes(&["z".into()]).is_err());
    }
}
