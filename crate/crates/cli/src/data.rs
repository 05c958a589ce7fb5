//! Loading table or signal inputs named in a config or on the command line.

use std::path::{Path, PathBuf};

use faultdiag::ingest::{self, Dataset};

use crate::config::DataSource;
use crate::failure::Failure;

/// Resolves `path` against `base` unless it is absolute.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Segments each signal file and stacks the results; classes are merged by
/// name in order of first appearance.
pub fn segment_signals(paths: &[PathBuf], segment_len: usize, stride: usize) -> Result<Dataset, Failure> {
    if paths.is_empty() {
        return Err(Failure::config("no signal files given"));
    }
    let parts = paths
        .iter()
        .map(|p| {
            let signal = ingest::load_signal_csv(p)?;
            ingest::segment(&signal, segment_len, stride)
        })
        .collect::<faultdiag::Result<Vec<_>>>()?;
    Ok(Dataset::concat(&parts)?)
}

pub fn load(
    source: &DataSource,
    base: &Path,
    label_column: &str,
    segment_len: usize,
    stride: usize,
    field: &str,
) -> Result<Dataset, Failure> {
    let data = match source {
        DataSource::Table(path) => ingest::load_csv(resolve(base, path), label_column)?,
        DataSource::Signals { signals } => {
            let paths: Vec<PathBuf> = signals.iter().map(|p| resolve(base, p)).collect();
            segment_signals(&paths, segment_len, stride)?
        }
    };
    if data.n_features() != segment_len {
        return Err(Failure::config(format!(
            "`{field}` has {} feature columns but `segment_len` is {segment_len}",
            data.n_features()
        )));
    }
    if data.n_classes() < 2 {
        return Err(Failure::data(format!("`{field}` holds a single class")));
    }
    Ok(data)
}
