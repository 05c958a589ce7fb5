//! Confusion matrices, evaluation reports, k-fold orchestration and
//! per-phase timing tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dnn::{self, DnnModel, FitOutcome, PipelineConfig};
use crate::error::{Error, Result};
use crate::ingest::{self, Dataset, FoldPlan};
use crate::{par, rng};

/// Phase names used in timing tables.
pub mod phase {
    pub const FEATURE_SELECTION: &str = "feature_selection";
    pub const PRETRAIN: &str = "pretrain";
    pub const SOFTMAX: &str = "softmax";
    pub const FINETUNE: &str = "finetune";
    pub const INFERENCE: &str = "inference";
}

/// Wall-clock seconds per phase, from a monotonic clock.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timings(BTreeMap<String, f64>);

impl Timings {
    /// Adds to the phase total.
    pub fn add(&mut self, phase: &str, seconds: f64) {
        *self.0.entry(phase.to_string()).or_insert(0.0) += seconds;
    }

    pub fn set(&mut self, phase: &str, seconds: f64) {
        self.0.insert(phase.to_string(), seconds);
    }

    pub fn get(&self, phase: &str) -> Option<f64> {
        self.0.get(phase).copied()
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }

    pub fn merge(&mut self, other: &Timings) {
        for (k, v) in &other.0 {
            self.add(k, *v);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Counts with rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// `trace / total`; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::Dimension(format!(
                "cannot add a {}-class confusion matrix to a {}-class one",
                other.classes(),
                self.classes()
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Header row of predicted-class names, then one row per true class.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("true_class");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in class_names.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    /// Right-aligned text grid.
    pub fn to_grid(&self, class_names: &[String]) -> String {
        let width = class_names
            .iter()
            .map(String::len)
            .chain(self.counts.iter().flatten().map(|c| c.to_string().len()))
            .chain(std::iter::once("true\\pred".len()))
            .max()
            .unwrap_or(1);
        let mut out = format!("{:>width$}", "true\\pred");
        for name in class_names {
            let _ = write!(out, " {name:>width$}");
        }
        out.push('\n');
        for (name, row) in class_names.iter().zip(&self.counts) {
            let _ = write!(out, "{name:>width$}");
            for c in row {
                let _ = write!(out, " {c:>width$}");
            }
            out.push('\n');
        }
        out
    }
}

/// `counts[i][j] = #{t : y_true[t] = i + 1, y_pred[t] = j + 1}`.
pub fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Dimension(format!(
            "{} true labels, {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(k);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == 0 || t > k || p == 0 || p > k {
            return Err(Error::InvalidArgument(format!("label pair ({t}, {p}) outside 1..={k}")));
        }
        m.counts[t - 1][p - 1] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// `trace(confusion) / total` of the (pooled) confusion matrix.
    pub accuracy: f64,
    /// Unweighted mean of per-fold accuracies; equals `accuracy` for a
    /// single split.
    pub mean_fold_accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub per_fold: Vec<FoldReport>,
    /// Left out of the serialized report so repeated runs stay
    /// byte-identical; see [`timing_report`].
    #[serde(skip)]
    pub timings: Timings,
}

impl EvalReport {
    /// Report for one train/test split.
    pub fn single(method: &str, cm: ConfusionMatrix, class_names: Vec<String>, timings: Timings) -> Self {
        let accuracy = cm.accuracy();
        Self {
            method: method.to_string(),
            accuracy,
            mean_fold_accuracy: accuracy,
            confusion: cm.counts,
            class_names,
            per_fold: Vec::new(),
            timings,
        }
    }

    pub fn confusion_matrix(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: self.confusion.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Numerical(e.to_string()))
    }

    pub fn confusion_csv(&self) -> String {
        self.confusion_matrix().to_csv(&self.class_names)
    }
}

/// Scores `model` on raw `test` rows; inference time goes to `timings`.
pub fn evaluate_model(model: &DnnModel, test: &Dataset, method: &str, mut timings: Timings) -> Result<EvalReport> {
    let truth = model.labels_for(test)?;
    let start = Instant::now();
    let pred = dnn::predict(model, test.matrix())?;
    timings.add(phase::INFERENCE, start.elapsed().as_secs_f64());
    let cm = confusion(&truth, &pred.labels, model.class_mapping.len())?;
    Ok(EvalReport::single(method, cm, model.class_mapping.clone(), timings))
}

/// Everything one fold produced, kept for audits such as the leakage guard.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub fit: FitOutcome,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub plan: FoldPlan,
    pub folds: Vec<FoldOutcome>,
    pub report: EvalReport,
}

/// Stratified k-fold evaluation with a caller-supplied fitting procedure.
/// `fit` sees only the training rows of a fold; folds run concurrently.
pub fn cross_validate_with<F>(data: &Dataset, k: usize, seed: u64, method: &str, fit: F) -> Result<CrossValidation>
where
    F: Fn(usize, &Dataset) -> Result<FitOutcome> + Sync,
{
    let plan = ingest::kfold_split(data.labels(), k, seed)?;
    let folds = par::map_range(k, |f| -> Result<FoldOutcome> {
        let train_indices = plan.train_indices(f);
        let test_indices = plan.test_indices(f);
        let train = data.select_rows(&train_indices)?;
        let test = data.select_rows(&test_indices)?;
        let fit = fit(f, &train)?;
        let report = evaluate_model(&fit.model, &test, method, fit.timings.clone())?;
        Ok(FoldOutcome {
            fold: f,
            train_indices,
            test_indices,
            fit,
            report,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let class_names = folds[0].report.class_names.clone();
    let mut pooled = ConfusionMatrix::zeros(class_names.len());
    let mut timings = Timings::default();
    let mut per_fold = Vec::with_capacity(k);
    for f in &folds {
        if f.report.class_names != class_names {
            return Err(Error::Dimension("folds disagree on class names".into()));
        }
        pooled.add(&f.report.confusion_matrix())?;
        timings.merge(&f.report.timings);
        per_fold.push(FoldReport {
            fold: f.fold,
            n_train: f.train_indices.len(),
            n_test: f.test_indices.len(),
            accuracy: f.report.accuracy,
            confusion: f.report.confusion.clone(),
        });
    }
    let mean_fold_accuracy = per_fold.iter().map(|f| f.accuracy).sum::<f64>() / k as f64;
    let report = EvalReport {
        method: method.to_string(),
        accuracy: pooled.accuracy(),
        mean_fold_accuracy,
        confusion: pooled.counts,
        class_names,
        per_fold,
        timings,
    };
    Ok(CrossValidation { plan, folds, report })
}

/// k-fold evaluation of the from-scratch pipeline. Each fold trains with a
/// seed derived from the configured one and the fold index.
pub fn cross_validate(data: &Dataset, cfg: &PipelineConfig, k: usize, seed: u64) -> Result<CrossValidation> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    cfg.validate(data.n_features())?;
    let method = if cfg.mrmr.is_some() { "dnn-mrmr" } else { "dnn" };
    cross_validate_with(data, k, seed, method, |f, train| {
        dnn::fit_pipeline(train, &fold_config(cfg, f))
    })
}

/// Pipeline config with the fold's own training seed.
pub fn fold_config(cfg: &PipelineConfig, fold: usize) -> PipelineConfig {
    let mut c = cfg.clone();
    c.arch.trainer.seed = rng::derive_indexed(cfg.arch.trainer.seed, "fold", fold);
    c
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRow {
    pub method: String,
    pub phase: String,
    pub seconds: f64,
}

/// One row per phase. Pretraining is always listed; a transfer run carries
/// it as 0.
pub fn timing_report(report: &EvalReport) -> Vec<TimingRow> {
    let mut timings = report.timings.clone();
    if timings.is_empty() {
        return Vec::new();
    }
    if timings.get(phase::PRETRAIN).is_none() {
        timings.set(phase::PRETRAIN, 0.0);
    }
    timings
        .iter()
        .map(|(p, s)| TimingRow {
            method: report.method.clone(),
            phase: p.to_string(),
            seconds: s,
        })
        .collect()
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("method,phase,seconds\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.method, r.phase, r.seconds);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dnn::Architecture;
    use crate::mrmr::MrmrConfig;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        let y = vec![1, 2, 3, 4, 1, 2, 3, 4];
        let cm = confusion(&y, &y, 4).unwrap();
        assert_eq!(cm.accuracy(), 1.0);
        assert_eq!(cm.trace(), 8);

        let ones = vec![1; 8];
        let cm = confusion(&y, &ones, 4).unwrap();
        assert_eq!(cm.accuracy(), 0.25);
        assert!(cm.counts.iter().all(|r| r[0] == 2 && r[1..].iter().all(|&c| c == 0)));

        let cm = confusion(&[1, 2], &[2, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![vec![0, 1], vec![1, 0]]);
        assert_eq!(cm.accuracy(), 0.0);

        assert!(confusion(&[1, 3], &[1, 1], 2).is_err());
        assert!(confusion(&[1], &[1, 1], 2).is_err());
        assert!(confusion(&[0], &[1], 2).is_err());
    }

    proptest! {
        #[test]
        fn confusion_identities(pairs in prop::collection::vec((1usize..=5, 1usize..=5), 1..200)) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let cm = confusion(&t, &p, 5).unwrap();
            let mut counts = vec![0u64; 5];
            for &l in &t { counts[l - 1] += 1; }
            prop_assert_eq!(cm.row_sums(), counts);
            prop_assert_eq!(cm.total(), t.len() as u64);
            let hits = t.iter().zip(&p).filter(|(a, b)| a == b).count();
            prop_assert_eq!(cm.accuracy(), hits as f64 / t.len() as f64);
        }
    }

    #[test]
    fn csv_and_grid_layout() {
        let names = vec!["normal".to_string(), "outer".to_string()];
        let cm = confusion(&[1, 1, 2], &[1, 2, 2], 2).unwrap();
        assert_eq!(cm.to_csv(&names), "true_class,normal,outer\nnormal,1,1\nouter,0,1\n");
        let grid = cm.to_grid(&names);
        assert_eq!(grid.lines().count(), 3);
        let widths: Vec<usize> = grid.lines().map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn timing_rows() {
        let mut report = EvalReport::single("dtl", ConfusionMatrix::zeros(2), vec!["a".into(), "b".into()], Timings::default());
        assert!(timing_report(&report).is_empty());
        report.timings.add(phase::FINETUNE, 1.5);
        report.timings.add(phase::SOFTMAX, 0.25);
        let rows = timing_report(&report);
        let pre = rows.iter().find(|r| r.phase == phase::PRETRAIN).unwrap();
        assert_eq!(pre.seconds, 0.0);
        let csv = timing_csv(&rows);
        assert!(csv.starts_with("method,phase,seconds\n"));
        assert!(csv.contains("dtl,finetune,1.5\n"));
    }

    #[test]
    fn report_json_omits_timings() {
        let mut t = Timings::default();
        t.add(phase::FINETUNE, 3.0);
        let report = EvalReport::single("dnn", confusion(&[1, 2], &[1, 2], 2).unwrap(), vec!["a".into(), "b".into()], t);
        let json = report.to_json().unwrap();
        assert!(!json.contains("finetune"));
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["accuracy", "confusion", "class_names", "per_fold"] {
            assert!(value.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn small_cross_validation_is_deterministic_and_partitions() {
        let data = ingest::generate_synthetic(3, 20, 12, 0.05, 5).unwrap();
        let mut arch = Architecture::new(vec![8, 6, 4]);
        arch.trainer.epochs_pretrain = 3;
        arch.trainer.epochs_softmax = 3;
        arch.trainer.epochs_finetune = 3;
        let cfg = PipelineConfig::new(arch).with_mrmr(MrmrConfig { m: 8, ..Default::default() });
        let a = cross_validate(&data, &cfg, 5, 9).unwrap();
        let b = cross_validate(&data, &cfg, 5, 9).unwrap();
        assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
        assert_eq!(a.report.confusion_matrix().total(), 60);
        assert_eq!(a.report.per_fold.iter().map(|f| f.n_test).sum::<usize>(), 60);
        assert_eq!(a.report.confusion_matrix().row_sums(), vec![20, 20, 20]);
        assert!(cross_validate(&data, &cfg, 1, 9).is_err());
    }
}
