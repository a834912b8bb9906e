//! Exemplar memory for the replay family: herding selection and
//! nearest-mean-of-exemplars classification.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{center_normalize, forward, ArchSpec, Head};
use crate::tasks::{ClassRange, TaskDataset};

/// Result of [`herding_select`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Herding {
    /// Selected indices in pick order.
    pub indices: Vec<usize>,
    /// Fewer than `m` candidates were available.
    pub short: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut mu = vec![0.0; rows[0].len()];
    for r in rows {
        mu.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= rows.len() as f64);
    mu
}

/// Greedy herding: step `k` adds the candidate that brings the running
/// exemplar mean closest to the class mean. Ties go to the lowest index.
pub fn herding_select(features: &[Vec<f64>], m: usize) -> Result<Herding> {
    if m == 0 {
        return Err(Error::InvalidArgument("herding needs m >= 1".into()));
    }
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = features[0].len();
    for f in features {
        check_len("herding feature", dim, f.len())?;
    }
    let mu = mean_of(features);
    let take = m.min(features.len());
    let mut chosen = vec![false; features.len()];
    let mut running = vec![0.0; dim];
    let mut indices = Vec::with_capacity(take);
    let mut candidate = vec![0.0; dim];
    for k in 1..=take {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            for ((c, r), v) in candidate.iter_mut().zip(&running).zip(f) {
                *c = (r + v) / k as f64;
            }
            let d = sq_dist(&mu, &candidate);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("a candidate remains while k <= take");
        chosen[i] = true;
        running.iter_mut().zip(&features[i]).for_each(|(r, v)| *r += v);
        indices.push(i);
    }
    Ok(Herding { indices, short: take < m })
}

/// Index of the nearest class mean in Euclidean distance; ties go to the
/// lowest index.
pub fn nme_classify(feature: &[f64], class_means: &[Vec<f64>]) -> Result<usize> {
    if class_means.is_empty() {
        return Err(Error::InvalidArgument("no class means".into()));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, mu) in class_means.iter().enumerate() {
        check_len("class mean", feature.len(), mu.len())?;
        let d = sq_dist(feature, mu);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    Ok(best)
}

/// Stored exemplars of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassExemplars {
    pub class: usize,
    pub task: usize,
    /// Row-major exemplar inputs.
    pub inputs: Vec<f64>,
    /// Normalised penultimate features at selection time.
    #[serde(default)]
    pub features: Option<Vec<Vec<f64>>>,
}

impl ClassExemplars {
    pub fn count(&self, dim: usize) -> usize {
        self.inputs.len() / dim
    }
}

/// Fixed-size-per-class exemplar memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    pub per_class: usize,
    pub dim: usize,
    /// Sorted by class.
    pub classes: Vec<ClassExemplars>,
}

/// Centered, normalised penultimate features of every row.
pub fn normalized_features(arch: &ArchSpec, w: &[f64], data: &TaskDataset) -> Result<Vec<Vec<f64>>> {
    (0..data.len())
        .map(|i| {
            let t = forward(arch, w, data.row(i), Head::Prefix(1))?;
            Ok(center_normalize(t.features())?.values)
        })
        .collect()
}

impl MemoryBuffer {
    pub fn new(per_class: usize, dim: usize) -> Result<Self> {
        if per_class == 0 {
            return Err(Error::InvalidArgument("exemplars per class must be >= 1".into()));
        }
        Ok(MemoryBuffer { per_class, dim, classes: Vec::new() })
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(|c| c.count(self.dim)).sum()
    }

    /// Runs herding on every class of `data` that is not yet stored, using
    /// the network `w` as feature extractor. Returns classes that had fewer
    /// than `per_class` samples.
    pub fn add_classes(&mut self, arch: &ArchSpec, w: &[f64], data: &TaskDataset) -> Result<Vec<usize>> {
        check_len("buffer dim", self.dim, data.dim)?;
        let feats = normalized_features(arch, w, data)?;
        let mut short = Vec::new();
        for class in data.class_range.first..=data.class_range.last {
            if self.classes.iter().any(|c| c.class == class) {
                continue;
            }
            let rows: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
            if rows.is_empty() {
                continue;
            }
            let class_feats: Vec<Vec<f64>> = rows.iter().map(|&i| feats[i].clone()).collect();
            let pick = herding_select(&class_feats, self.per_class)?;
            if pick.short {
                short.push(class);
            }
            let mut inputs = Vec::with_capacity(pick.indices.len() * self.dim);
            for &k in &pick.indices {
                inputs.extend_from_slice(data.row(rows[k]));
            }
            self.classes.push(ClassExemplars {
                class,
                task: data.tasks[rows[0]],
                inputs,
                features: Some(pick.indices.iter().map(|&k| class_feats[k].clone()).collect()),
            });
        }
        self.classes.sort_by_key(|c| c.class);
        Ok(short)
    }

    /// Buffer contents as a dataset (empty when the buffer is).
    pub fn as_dataset(&self, split_of: &TaskDataset) -> TaskDataset {
        let mut out = TaskDataset {
            dim: self.dim,
            inputs: Vec::new(),
            labels: Vec::new(),
            tasks: Vec::new(),
            class_range: split_of.class_range,
            task_id: split_of.task_id,
            split: split_of.split,
        };
        for c in &self.classes {
            let n = c.count(self.dim);
            out.inputs.extend_from_slice(&c.inputs);
            out.labels.extend(std::iter::repeat_n(c.class, n));
            out.tasks.extend(std::iter::repeat_n(c.task, n));
        }
        out
    }

    /// Normalised mean exemplar feature per stored class, recomputed with
    /// the network `w`. Returned in class order with the class ids.
    pub fn class_means(&self, arch: &ArchSpec, w: &[f64]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let mut ids = Vec::with_capacity(self.classes.len());
        let mut means = Vec::with_capacity(self.classes.len());
        for c in &self.classes {
            let mut feats = Vec::new();
            for row in c.inputs.chunks(self.dim) {
                let t = forward(arch, w, row, Head::Prefix(1))?;
                feats.push(center_normalize(t.features())?.values);
            }
            let mu = mean_of(&feats);
            let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
            ids.push(c.class);
            means.push(if norm > 0.0 { mu.iter().map(|v| v / norm).collect() } else { mu });
        }
        Ok((ids, means))
    }
}

/// `D_t^+`: the current data followed by every stored exemplar. The class
/// range widens to start at class 0.
pub fn combine(current: &TaskDataset, buffer: &MemoryBuffer) -> Result<TaskDataset> {
    if buffer.is_empty() {
        return Ok(current.clone());
    }
    check_len("combine dim", current.dim, buffer.dim)?;
    let mut out = TaskDataset::concat(&[current, &buffer.as_dataset(current)])?;
    out.class_range = ClassRange { first: 0, last: current.class_range.last };
    out.task_id = current.task_id;
    Ok(out)
}

/// Nearest-mean-of-exemplars accuracy on `data`.
pub fn evaluate_nme(arch: &ArchSpec, w: &[f64], buffer: &MemoryBuffer, data: &TaskDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (ids, means) = buffer.class_means(arch, w)?;
    let feats = normalized_features(arch, w, data)?;
    let mut correct = 0;
    for (f, &label) in feats.iter().zip(&data.labels) {
        if ids[nme_classify(f, &means)?] == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_weights;
    use crate::tasks::{make_blob_sequence, BlobParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Recomputes every candidate mean from scratch at each step.
    fn brute_herding(features: &[Vec<f64>], m: usize) -> Vec<usize> {
        let n = features.len();
        let dim = features[0].len();
        let mu: Vec<f64> = (0..dim).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < m.min(n) {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for c in 0..n {
                if picked.contains(&c) {
                    continue;
                }
                let members: Vec<usize> = picked.iter().copied().chain([c]).collect();
                let d: f64 = (0..dim)
                    .map(|j| {
                        let m = members.iter().map(|&i| features[i][j]).sum::<f64>() / members.len() as f64;
                        (mu[j] - m).powi(2)
                    })
                    .sum();
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            picked.push(best);
        }
        picked
    }

    #[test]
    fn herding_first_pick_is_the_mean() {
        let f = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert_eq!(herding_select(&f, 1).unwrap().indices, vec![1]);
        let all = herding_select(&f, 3).unwrap();
        assert_eq!(all.indices, brute_herding(&f, 3));
        assert!(!all.short);
        let over = herding_select(&f, 5).unwrap();
        assert!(over.short);
        assert_eq!(over.indices.len(), 3);
    }

    #[test]
    fn herding_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        assert_eq!(herding_select(&f, 3).unwrap().indices, brute_herding(&f, 3));
    }

    #[test]
    fn herding_rejects_bad_arguments() {
        assert!(herding_select(&[vec![1.0]], 0).is_err());
        assert!(herding_select(&[], 2).is_err());
    }

    #[test]
    fn nme_examples() {
        let means = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 3.0]];
        assert_eq!(nme_classify(&[2.0, 0.0], &means).unwrap(), 1);
        assert_eq!(nme_classify(&[1.0, 0.0], &means).unwrap(), 0);
        assert!(nme_classify(&[1.0, 0.0], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let means: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random()).collect()).collect();
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            let scan = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(&means[a]).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = x.iter().zip(&means[b]).map(|(p, q)| (p - q).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(nme_classify(&x, &means).unwrap(), scan);
        }
    }

    fn stream() -> crate::tasks::TaskSequence {
        make_blob_sequence(&BlobParams { tasks: 2, classes_per_task: 2, per_class: 10, dim: 3, spread: 0.5, seed: 5 })
            .unwrap()
    }

    #[test]
    fn combine_counts_and_conserves_labels() {
        let seq = stream();
        let arch = ArchSpec::single_head(3, vec![4], 4);
        let w = init_weights(&arch, 1);
        let mut buf = MemoryBuffer::new(2, 3).unwrap();
        let cur = seq.tasks[1].train.subset(&(0..10).collect::<Vec<_>>());
        assert_eq!(combine(&cur, &buf).unwrap(), cur);
        buf.add_classes(&arch, &w, &seq.tasks[0].train).unwrap();
        assert_eq!(buf.len(), 4);
        let merged = combine(&cur, &buf).unwrap();
        assert_eq!(merged.len(), 14);
        assert_eq!(merged.class_range, ClassRange { first: 0, last: 3 });
        let mut want: Vec<usize> = cur.labels.clone();
        want.extend([0, 0, 1, 1]);
        want.sort();
        let mut got = merged.labels.clone();
        got.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn buffer_is_deterministic_and_nme_beats_chance() {
        let seq = stream();
        let arch = ArchSpec::single_head(3, vec![8], 4);
        let w = init_weights(&arch, 2);
        let build = || {
            let mut b = MemoryBuffer::new(3, 3).unwrap();
            b.add_classes(&arch, &w, &seq.tasks[0].train).unwrap();
            b.add_classes(&arch, &w, &seq.tasks[1].train).unwrap();
            b
        };
        let b = build();
        assert_eq!(b, build());
        assert!(b.classes.iter().all(|c| c.count(3) == 3));
        let acc = evaluate_nme(&arch, &w, &b, &seq.joint(1, crate::tasks::Split::Test).unwrap()).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
