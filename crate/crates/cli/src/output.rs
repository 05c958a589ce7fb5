//! Artifacts under the output directory, all with fixed names.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use faultdiag::dnn::{self, DnnModel};
use faultdiag::eval::{self, EvalReport, TimingRow};
use faultdiag::mrmr::FeatureRanking;

use crate::failure::Failure;

pub const MODEL_FILE: &str = "model.json";
pub const SOURCE_MODEL_FILE: &str = "source_model.json";
pub const REPORT_FILE: &str = "report.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const RANKING_FILE: &str = "ranking.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const LOG_FILE: &str = "run.log";

pub struct OutDir {
    root: PathBuf,
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

impl OutDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, Failure> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| write_err(&root, e))?;
        Ok(Self { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf, Failure> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| write_err(&path, e))?;
        Ok(path)
    }

    pub fn model(&self, name: &str, model: &DnnModel) -> Result<PathBuf, Failure> {
        let path = self.path(name);
        dnn::save_model(model, &path)?;
        Ok(path)
    }

    /// report.json plus confusion.csv.
    pub fn report(&self, report: &EvalReport) -> Result<(), Failure> {
        let mut json = report.to_json()?;
        json.push('\n');
        self.write(REPORT_FILE, &json)?;
        self.write(CONFUSION_FILE, &report.confusion_csv())?;
        Ok(())
    }

    pub fn ranking(&self, ranking: &FeatureRanking, names: &[String]) -> Result<(), Failure> {
        self.write(RANKING_FILE, &ranking.to_csv(names))?;
        Ok(())
    }

    pub fn timings(&self, rows: &[TimingRow]) -> Result<(), Failure> {
        self.write(TIMINGS_FILE, &eval::timing_csv(rows))?;
        Ok(())
    }
}

/// Human-readable run log: seeds, resolved settings, timings, results.
#[derive(Default)]
pub struct RunLog {
    text: String,
}

impl RunLog {
    pub fn line(&mut self, s: impl AsRef<str>) {
        self.text.push_str(s.as_ref());
        self.text.push('\n');
    }

    pub fn section(&mut self, title: &str, body: &str) {
        let _ = writeln!(self.text, "[{title}]");
        self.text.push_str(body);
        if !body.ends_with('\n') {
            self.text.push('\n');
        }
    }

    pub fn timings(&mut self, rows: &[TimingRow]) {
        let mut body = String::new();
        for r in rows {
            let _ = writeln!(body, "{:<16} {:<18} {:>10.4} s", r.method, r.phase, r.seconds);
        }
        self.section("timings", &body);
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

/// Accuracy lines and the aligned confusion grid.
pub fn summary(report: &EvalReport) -> String {
    let mut out = format!(
        "{}: accuracy {:.4} (mean over folds {:.4})\n",
        report.method, report.accuracy, report.mean_fold_accuracy
    );
    for f in &report.per_fold {
        let _ = writeln!(out, "  fold {}: {:.4} on {} rows", f.fold, f.accuracy, f.n_test);
    }
    out.push_str(&report.confusion_matrix().to_grid(&report.class_names));
    out
}
