//! Synthetic task streams and evaluation metrics.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{forward, ArchSpec, Head, HeadMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Inclusive class interval `[first, last]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRange {
    pub first: usize,
    pub last: usize,
}

impl ClassRange {
    pub fn contains(&self, c: usize) -> bool {
        (self.first..=self.last).contains(&c)
    }

    pub fn len(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Labelled samples of one task split.
///
/// Labels are global class indices. `tasks` records, per row, the task that
/// owns the row's class; it differs from `task_id` only for merged sets such
/// as replay-augmented or multitask data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub dim: usize,
    /// Row-major `N x dim` inputs.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub tasks: Vec<usize>,
    pub class_range: ClassRange,
    pub task_id: usize,
    pub split: Split,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows with the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> TaskDataset {
        let mut inputs = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
        }
        TaskDataset {
            dim: self.dim,
            inputs,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            tasks: idx.iter().map(|&i| self.tasks[i]).collect(),
            class_range: self.class_range,
            task_id: self.task_id,
            split: self.split,
        }
    }

    /// Concatenates datasets; the class range spans all parts and the task id
    /// is taken from the last part.
    pub fn concat(parts: &[&TaskDataset]) -> Result<TaskDataset> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let mut out = TaskDataset {
            dim: first.dim,
            inputs: Vec::new(),
            labels: Vec::new(),
            tasks: Vec::new(),
            class_range: first.class_range,
            task_id: first.task_id,
            split: first.split,
        };
        for p in parts {
            check_len("dataset concat dim", out.dim, p.dim)?;
            out.inputs.extend_from_slice(&p.inputs);
            out.labels.extend_from_slice(&p.labels);
            out.tasks.extend_from_slice(&p.tasks);
            out.class_range.first = out.class_range.first.min(p.class_range.first);
            out.class_range.last = out.class_range.last.max(p.class_range.last);
            out.task_id = p.task_id;
        }
        Ok(out)
    }

    /// Writes the `x0..x{d-1},label` CSV format.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV format written by [`TaskDataset::write_csv`].
    pub fn read_csv<R: Read>(reader: R, task_id: usize, split: Split) -> Result<TaskDataset> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        let dim = header
            .len()
            .checked_sub(1)
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Csv("header needs at least one feature column and a label".into()))?;
        for (j, name) in header.iter().take(dim).enumerate() {
            if name != format!("x{j}") {
                return Err(Error::Csv(format!("column {j} should be x{j}, found {name:?}")));
            }
        }
        if &header[dim] != "label" {
            return Err(Error::Csv("last column must be `label`".into()));
        }
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != dim + 1 {
                return Err(Error::Csv(format!("row {}: expected {} fields", line + 1, dim + 1)));
            }
            for field in rec.iter().take(dim) {
                let v: f64 =
                    field.trim().parse().map_err(|_| Error::Csv(format!("row {}: bad number {field:?}", line + 1)))?;
                inputs.push(v);
            }
            labels.push(rec[dim].trim().parse().map_err(|_| Error::Csv(format!("row {}: bad label", line + 1)))?);
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let first = *labels.iter().min().unwrap();
        let last = *labels.iter().max().unwrap();
        Ok(TaskDataset {
            dim,
            inputs,
            tasks: vec![task_id; labels.len()],
            labels,
            class_range: ClassRange { first, last },
            task_id,
            split,
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: &Path, task_id: usize, split: Split) -> Result<TaskDataset> {
        Self::read_csv(std::fs::File::open(path)?, task_id, split)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplits {
    pub train: TaskDataset,
    pub val: TaskDataset,
    pub test: TaskDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub tasks: Vec<TaskSplits>,
    pub classes_per_task: usize,
    pub dim: usize,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.train.class_range.len()).sum()
    }

    /// Classes seen after learning tasks `0..=t`.
    pub fn seen_classes(&self, t: usize) -> usize {
        self.tasks[t].train.class_range.last + 1
    }

    /// Union of one split over tasks `0..=t`.
    pub fn joint(&self, t: usize, split: Split) -> Result<TaskDataset> {
        let parts: Vec<&TaskDataset> = self.tasks[..=t]
            .iter()
            .map(|s| match split {
                Split::Train => &s.train,
                Split::Val => &s.val,
                Split::Test => &s.test,
            })
            .collect();
        TaskDataset::concat(&parts)
    }
}

/// Parameters of a synthetic Gaussian-blob stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

/// Gaussian class clusters sharing one input space.
///
/// Class means are standard-normal draws; samples add isotropic noise with
/// standard deviation `spread`. Each class is split 70/10/20 into
/// train/val/test. Task `t` owns classes `t*C .. (t+1)*C`.
pub fn make_blob_sequence(p: &BlobParams) -> Result<TaskSequence> {
    if p.tasks == 0 || p.classes_per_task == 0 || p.dim == 0 {
        return Err(Error::InvalidArgument("task, class and dim counts must be >= 1".into()));
    }
    if p.per_class < 3 {
        return Err(Error::InvalidArgument("need at least 3 samples per class to fill train/val/test".into()));
    }
    if !(p.spread >= 0.0) {
        return Err(Error::InvalidArgument("spread must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let n_val = ((p.per_class as f64 * 0.1).round() as usize).max(1);
    let n_test = ((p.per_class as f64 * 0.2).round() as usize).max(1);
    let n_train = p.per_class - n_val - n_test;

    let total = p.tasks * p.classes_per_task;
    let means: Vec<Vec<f64>> =
        (0..total).map(|_| (0..p.dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();

    let mut tasks = Vec::with_capacity(p.tasks);
    for t in 0..p.tasks {
        let range = ClassRange { first: t * p.classes_per_task, last: (t + 1) * p.classes_per_task - 1 };
        let empty = |split| TaskDataset {
            dim: p.dim,
            inputs: Vec::new(),
            labels: Vec::new(),
            tasks: Vec::new(),
            class_range: range,
            task_id: t,
            split,
        };
        let mut train = empty(Split::Train);
        let mut val = empty(Split::Val);
        let mut test = empty(Split::Test);
        for (c, class_mean) in means.iter().enumerate().take(range.last + 1).skip(range.first) {
            for k in 0..p.per_class {
                let target = if k < n_train {
                    &mut train
                } else if k < n_train + n_val {
                    &mut val
                } else {
                    &mut test
                };
                for mu in class_mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    target.inputs.push(mu + p.spread * z);
                }
                target.labels.push(c);
                target.tasks.push(t);
            }
        }
        for ds in [&mut train, &mut val, &mut test] {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut rng);
            *ds = ds.subset(&order);
        }
        tasks.push(TaskSplits { train, val, test });
    }
    Ok(TaskSequence { tasks, classes_per_task: p.classes_per_task, dim: p.dim })
}

/// How logits are read out at evaluation and training time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadPolicy {
    /// Task identity is known: each row uses its own task head.
    TaskAware,
    /// One head over the first `seen` classes.
    SingleHead { seen: usize },
}

impl HeadPolicy {
    /// Output selection and label index (relative to that selection) for a row.
    pub fn resolve(&self, arch: &ArchSpec, label: usize, task: usize) -> Result<(Head, usize)> {
        match *self {
            HeadPolicy::TaskAware => {
                if arch.head_mode != HeadMode::MultiHead {
                    return Err(Error::InvalidHead("task-aware readout needs a multi-head architecture".into()));
                }
                if task >= arch.head_sizes.len() {
                    return Err(Error::InvalidHead(format!("no head for task {task}")));
                }
                let range = arch.head_range(task);
                if !range.contains(&label) {
                    return Err(Error::LabelOutOfRange { label, classes: range.end });
                }
                Ok((Head::Task(task), label - range.start))
            }
            HeadPolicy::SingleHead { seen } => {
                if label >= seen {
                    return Err(Error::LabelOutOfRange { label, classes: seen });
                }
                Ok((Head::Prefix(seen), label))
            }
        }
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn evaluate(arch: &ArchSpec, w: &[f64], data: &TaskDataset, policy: HeadPolicy) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for i in 0..data.len() {
        let (head, label) = policy.resolve(arch, data.labels[i], data.tasks[i])?;
        let trace = forward(arch, w, data.row(i), head)?;
        if argmax(&trace.logits) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// `A[j][k]`: test accuracy on task `k` after training task `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub values: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix { values: vec![vec![None; tasks]; tasks] }
    }

    pub fn tasks(&self) -> usize {
        self.values.len()
    }

    pub fn set(&mut self, after: usize, task: usize, acc: f64) {
        self.values[after][task] = Some(acc);
    }

    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        self.values[after][task]
    }

    /// CSV with header `after_task,task_0,...`; unevaluated cells are empty.
    pub fn to_csv(&self) -> String {
        let n = self.tasks();
        let mut s = String::from("after_task");
        for k in 0..n {
            s.push_str(&format!(",task_{k}"));
        }
        s.push('\n');
        for (j, row) in self.values.iter().enumerate() {
            s.push_str(&j.to_string());
            for v in row {
                s.push(',');
                if let Some(v) = v {
                    s.push_str(&format!("{v:.6}"));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Average accuracy over all tasks after the final task.
pub fn aac(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.tasks();
    if t == 0 {
        return Err(Error::IncompleteMatrix("no tasks".into()));
    }
    let last = &a.values[t - 1];
    let mut sum = 0.0;
    for (k, v) in last.iter().enumerate() {
        sum += v.ok_or_else(|| Error::IncompleteMatrix(format!("A[{}][{k}] missing", t - 1)))?;
    }
    Ok(sum / t as f64)
}

/// Average over phases of the accuracy on all classes seen so far.
pub fn aiac(per_phase: &[f64]) -> Result<f64> {
    if per_phase.is_empty() {
        return Err(Error::IncompleteMatrix("no phases".into()));
    }
    Ok(per_phase.iter().sum::<f64>() / per_phase.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_weights;

    fn params(seed: u64) -> BlobParams {
        BlobParams { tasks: 3, classes_per_task: 2, per_class: 20, dim: 4, spread: 0.5, seed }
    }

    #[test]
    fn blobs_are_deterministic_and_partition_classes() {
        let a = make_blob_sequence(&params(4)).unwrap();
        assert_eq!(a, make_blob_sequence(&params(4)).unwrap());
        assert_ne!(a, make_blob_sequence(&params(5)).unwrap());
        let mut next = 0;
        for (t, s) in a.tasks.iter().enumerate() {
            assert_eq!(s.train.class_range.first, next);
            next = s.train.class_range.last + 1;
            assert_eq!(s.train.len(), 28);
            assert_eq!(s.val.len(), 4);
            assert_eq!(s.test.len(), 8);
            for ds in [&s.train, &s.val, &s.test] {
                assert!(ds.labels.iter().all(|&c| ds.class_range.contains(c)));
                assert!(ds.tasks.iter().all(|&k| k == t));
            }
        }
        assert_eq!(next, 6);
    }

    #[test]
    fn zero_spread_collapses_each_class_to_its_mean() {
        let mut p = params(1);
        p.spread = 0.0;
        let s = make_blob_sequence(&p).unwrap();
        let d = &s.tasks[0].train;
        for i in 0..d.len() {
            for k in 0..d.len() {
                if d.labels[i] == d.labels[k] {
                    assert_eq!(d.row(i), d.row(k));
                }
            }
        }
    }

    #[test]
    fn evaluate_ties_pick_class_zero() {
        let arch = ArchSpec::multi_head(4, vec![3], vec![2, 2, 2]);
        let s = make_blob_sequence(&params(2)).unwrap();
        let w = vec![0.0; arch.param_count()];
        let d = &s.tasks[1].test;
        let acc = evaluate(&arch, &w, d, HeadPolicy::TaskAware).unwrap();
        let zeros = d.labels.iter().filter(|&&c| c == d.class_range.first).count();
        assert_eq!(acc, zeros as f64 / d.len() as f64);
    }

    #[test]
    fn evaluate_matches_recount_and_ignores_order() {
        let arch = ArchSpec::single_head(4, vec![6], 6);
        let s = make_blob_sequence(&params(3)).unwrap();
        let w = init_weights(&arch, 9);
        let d = s.joint(1, Split::Test).unwrap();
        let policy = HeadPolicy::SingleHead { seen: 4 };
        let acc = evaluate(&arch, &w, &d, policy).unwrap();
        let mut hits = 0;
        for i in 0..d.len() {
            let o = forward(&arch, &w, d.row(i), Head::All).unwrap().logits;
            let seen = &o[..4];
            let mut best = 0;
            for c in 1..4 {
                if seen[c] > seen[best] {
                    best = c;
                }
            }
            hits += (best == d.labels[i]) as usize;
        }
        assert_eq!(acc, hits as f64 / d.len() as f64);
        let rev: Vec<usize> = (0..d.len()).rev().collect();
        assert_eq!(acc, evaluate(&arch, &w, &d.subset(&rev), policy).unwrap());
        let empty = d.subset(&[]);
        assert!(matches!(evaluate(&arch, &w, &empty, policy), Err(Error::EmptyDataset)));
    }

    #[test]
    fn metric_arithmetic() {
        let mut a = AccuracyMatrix::new(2);
        a.set(0, 0, 0.9);
        assert!(aac(&a).is_err());
        a.set(1, 0, 1.0);
        a.set(1, 1, 0.0);
        assert_eq!(aac(&a).unwrap(), 0.5);
        let mut b = AccuracyMatrix::new(3);
        for k in 0..3 {
            b.set(2, k, 0.5);
        }
        assert_eq!(aac(&b).unwrap(), 0.5);
        assert!((aiac(&[0.9, 0.6, 0.3]).unwrap() - 0.6).abs() < 1e-15);
        assert!(aiac(&[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = make_blob_sequence(&params(7)).unwrap();
        let d = &s.tasks[2].train;
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x0,x1,x2,x3,label\n"));
        let back = TaskDataset::read_csv(buf.as_slice(), 2, Split::Train).unwrap();
        assert_eq!(&back, d);
        assert!(TaskDataset::read_csv("a,b\n1,2\n".as_bytes(), 0, Split::Train).is_err());
    }
}
