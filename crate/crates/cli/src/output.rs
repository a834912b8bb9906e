//! File output and across-seed aggregation.

use std::path::Path;

use serde::Serialize;

/// Writes through a temporary sibling and renames it into place, so readers
/// never see a half-written file.
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

/// Mean and standard error of the mean (sample standard deviation over
/// `sqrt(n)`; zero for a single value).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Aggregate { mean, stderr, n }
}
