//! Per-parameter importance estimates for the quadratic regularizers.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{backward, cross_entropy, forward, ArchSpec};
use crate::tasks::{HeadPolicy, TaskDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImportanceSource {
    /// Diagonal empirical Fisher information.
    Fisher,
    /// Memory-aware-synapses output sensitivity.
    Mas,
}

/// Nonnegative per-parameter importance aligned with a weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub values: Vec<f64>,
    pub source: ImportanceSource,
    pub tasks_covered: usize,
}

impl ImportanceMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Sums per-sample vectors by recursive halving so the rounding pattern does
/// not depend on how samples are grouped.
fn pairwise_mean<F>(n: usize, len: usize, per_sample: &F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut [f64]) -> Result<()>,
{
    fn sum<F>(lo: usize, hi: usize, len: usize, f: &F) -> Result<Vec<f64>>
    where
        F: Fn(usize, &mut [f64]) -> Result<()>,
    {
        if hi - lo <= 4 {
            let mut acc = vec![0.0; len];
            for i in lo..hi {
                f(i, &mut acc)?;
            }
            return Ok(acc);
        }
        let mid = lo + (hi - lo) / 2;
        let mut left = sum(lo, mid, len, f)?;
        let right = sum(mid, hi, len, f)?;
        left.iter_mut().zip(right).for_each(|(a, b)| *a += b);
        Ok(left)
    }
    let mut total = sum(0, n, len, per_sample)?;
    total.iter_mut().for_each(|v| *v /= n as f64);
    Ok(total)
}

/// Empirical diagonal Fisher: mean of squared per-sample cross-entropy
/// gradients at the true labels.
pub fn fisher_diag(arch: &ArchSpec, w: &[f64], data: &TaskDataset, policy: HeadPolicy) -> Result<ImportanceMap> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p = arch.param_count();
    let values = pairwise_mean(data.len(), p, &|i, acc: &mut [f64]| {
        let (head, label) = policy.resolve(arch, data.labels[i], data.tasks[i])?;
        let trace = forward(arch, w, data.row(i), head)?;
        let (_, d) = cross_entropy(&trace.logits, label)?;
        let mut g = vec![0.0; p];
        backward(arch, w, &trace, &d, None, &mut g)?;
        acc.iter_mut().zip(g).for_each(|(a, g)| *a += g * g);
        Ok(())
    })?;
    Ok(ImportanceMap { values, source: ImportanceSource::Fisher, tasks_covered: 1 })
}

/// MAS importance: mean of `|d ||o(x)||^2 / dθ|` over samples.
pub fn mas_importance(arch: &ArchSpec, w: &[f64], data: &TaskDataset, policy: HeadPolicy) -> Result<ImportanceMap> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p = arch.param_count();
    let values = pairwise_mean(data.len(), p, &|i, acc: &mut [f64]| {
        let (head, _) = policy.resolve(arch, data.labels[i], data.tasks[i])?;
        let trace = forward(arch, w, data.row(i), head)?;
        let d: Vec<f64> = trace.logits.iter().map(|o| 2.0 * o).collect();
        let mut g = vec![0.0; p];
        backward(arch, w, &trace, &d, None, &mut g)?;
        acc.iter_mut().zip(g).for_each(|(a, g)| *a += g.abs());
        Ok(())
    })?;
    Ok(ImportanceMap { values, source: ImportanceSource::Mas, tasks_covered: 1 })
}

/// Running mean over tasks: `((t-1) * prev + new) / t`, with `t` the 1-based
/// index of the task that produced `new`.
pub fn accumulate(prev: &ImportanceMap, new: &ImportanceMap, t: usize) -> Result<ImportanceMap> {
    if prev.source != new.source {
        return Err(Error::SourceMismatch(format!("{:?} vs {:?}", prev.source, new.source)));
    }
    if t < 2 {
        return Err(Error::InvalidArgument(format!("accumulation starts at the second task, got t = {t}")));
    }
    check_len("importance accumulate", prev.len(), new.len())?;
    let k = t as f64;
    Ok(ImportanceMap {
        values: prev.values.iter().zip(&new.values).map(|(p, n)| ((k - 1.0) * p + n) / k).collect(),
        source: prev.source,
        tasks_covered: prev.tasks_covered + 1,
    })
}
