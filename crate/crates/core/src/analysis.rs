//! Stability/plasticity diagnostics: weight distances, linear CKA between
//! layer activations, and a 2-D accuracy/loss landscape spanned by three
//! anchor networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{cross_entropy, forward, ArchSpec, Head};
use crate::tasks::{argmax, HeadPolicy, TaskDataset};
use crate::trainer::AnalysisWeights;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean distance between two weight vectors.
pub fn weight_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("weight distance", a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Indices of the parameters an old network trained on the first
/// `old_outputs` classes actually owns: every hidden layer plus the weight
/// rows and biases of those output units. Output units of later classes
/// are untouched initial values in the old network.
pub fn old_parameter_indices(arch: &ArchSpec, old_outputs: usize) -> Vec<usize> {
    let (hidden, heads) = arch.layout();
    let mut idx: Vec<usize> = hidden.iter().flat_map(|s| s.weight_offset..s.end()).collect();
    let mut first_output = 0;
    for slot in &heads {
        for r in 0..slot.fan_out {
            if first_output + r < old_outputs {
                let row = slot.weight_offset + r * slot.fan_in;
                idx.extend(row..row + slot.fan_in);
                idx.push(slot.bias_offset + r);
            }
        }
        first_output += slot.fan_out;
    }
    idx.sort_unstable();
    idx
}

/// [`weight_distance`] restricted to `idx`.
pub fn weight_distance_on(a: &[f64], b: &[f64], idx: &[usize]) -> Result<f64> {
    check_len("weight distance", a.len(), b.len())?;
    if let Some(&i) = idx.iter().find(|&&i| i >= a.len()) {
        return Err(Error::InvalidArgument(format!("parameter index {i} outside 0..{}", a.len())));
    }
    Ok(idx.iter().map(|&i| (a[i] - b[i]) * (a[i] - b[i])).sum::<f64>().sqrt())
}

/// Second-order forgetting bound `λ_max/2 · ||a - b||^2`.
pub fn forgetting_bound(a: &[f64], b: &[f64], lambda_max: f64) -> Result<f64> {
    if !(lambda_max >= 0.0) {
        return Err(Error::InvalidArgument(format!("curvature must be >= 0, got {lambda_max}")));
    }
    let d = weight_distance(a, b)?;
    Ok(0.5 * lambda_max * d * d)
}

/// Largest Hessian eigenvalue of a loss at `w`, by power iteration on
/// finite-difference Hessian-vector products of its gradient.
pub fn max_hessian_eigenvalue<G>(grad: G, w: &[f64], iters: usize, seed: u64) -> Result<f64>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let eps = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..w.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut eig = 0.0;
    for _ in 0..iters.max(1) {
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let shifted = |s: f64| -> Vec<f64> { w.iter().zip(&v).map(|(a, b)| a + s * b).collect() };
        let gp = grad(&shifted(eps))?;
        let gm = grad(&shifted(-eps))?;
        check_len("hessian probe", w.len(), gp.len())?;
        let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        eig = dot(&v, &hv);
        v = hv;
    }
    Ok(eig)
}

/// Subtracts each column's mean over rows.
fn center_columns(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len() as f64;
    let cols = m[0].len();
    let means: Vec<f64> = (0..cols).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    m.iter().map(|r| r.iter().zip(&means).map(|(x, mu)| x - mu).collect()).collect()
}

/// Squared Frobenius norm of `AᵀB` for row-major `A` (N×p) and `B` (N×q).
fn cross_frobenius_sq(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (p, q) = (a[0].len(), b[0].len());
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..q {
            let s: f64 = a.iter().zip(b).map(|(ra, rb)| ra[i] * rb[j]).sum();
            total += s * s;
        }
    }
    total
}

/// Linear CKA `||R2ᵀR1||_F^2 / (||R1ᵀR1||_F ||R2ᵀR2||_F)` on column-centered
/// activations (rows are samples).
pub fn cka_linear(r1: &[Vec<f64>], r2: &[Vec<f64>]) -> Result<f64> {
    check_len("cka samples", r1.len(), r2.len())?;
    if r1.len() < 2 {
        return Err(Error::InvalidArgument("CKA needs at least two samples".into()));
    }
    for (m, what) in [(r1, "first"), (r2, "second")] {
        let width = m[0].len();
        if width == 0 || m.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidArgument(format!("{what} activation matrix is ragged or empty")));
        }
    }
    let (a, b) = (center_columns(r1), center_columns(r2));
    let aa = cross_frobenius_sq(&a, &a).sqrt();
    let bb = cross_frobenius_sq(&b, &b).sqrt();
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Degenerate("activations are constant across samples".into()));
    }
    Ok(cross_frobenius_sq(&b, &a) / (aa * bb))
}

/// Post-activation outputs of every hidden layer, one row per sample:
/// `out[layer][sample]`.
pub fn hidden_activations(arch: &ArchSpec, w: &[f64], data: &TaskDataset) -> Result<Vec<Vec<Vec<f64>>>> {
    let layers = arch.hidden_dims.len();
    let mut out = vec![Vec::with_capacity(data.len()); layers];
    for i in 0..data.len() {
        let t = forward(arch, w, data.row(i), Head::Prefix(1))?;
        for (l, acts) in t.post.into_iter().enumerate().take(layers) {
            out[l].push(acts);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CkaScores {
    pub old: f64,
    pub aux: f64,
    pub multi: f64,
}

/// Layer-averaged CKA between the network under study and each of the old,
/// auxiliary and multitask networks. `layers` defaults to all hidden layers.
pub fn cka_suite(
    arch: &ArchSpec,
    w: &[f64],
    w_old: &[f64],
    w_aux: &[f64],
    w_multi: &[f64],
    probe: &TaskDataset,
    layers: Option<&[usize]>,
) -> Result<CkaScores> {
    if probe.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let all: Vec<usize> = (0..arch.hidden_dims.len()).collect();
    let layers = layers.unwrap_or(&all);
    if layers.is_empty() || layers.iter().any(|&l| l >= all.len()) {
        return Err(Error::InvalidArgument(format!("layer set {layers:?} outside 0..{}", all.len())));
    }
    let base = hidden_activations(arch, w, probe)?;
    let mean_cka = |other: &[f64]| -> Result<f64> {
        let acts = hidden_activations(arch, other, probe)?;
        let mut sum = 0.0;
        for &l in layers {
            sum += cka_linear(&base[l], &acts[l])?;
        }
        Ok(sum / layers.len() as f64)
    };
    Ok(CkaScores { old: mean_cka(w_old)?, aux: mean_cka(w_aux)?, multi: mean_cka(w_multi)? })
}

/// Plane through `w1` spanned by `u = w2 - w1` and the component of
/// `w3 - w1` orthogonal to `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeBasis {
    pub origin: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub u_norm: f64,
    pub v_norm: f64,
}

pub fn landscape_basis(w1: &[f64], w2: &[f64], w3: &[f64]) -> Result<LandscapeBasis> {
    check_len("landscape anchor", w1.len(), w2.len())?;
    check_len("landscape anchor", w1.len(), w3.len())?;
    let u: Vec<f64> = w2.iter().zip(w1).map(|(a, b)| a - b).collect();
    let d: Vec<f64> = w3.iter().zip(w1).map(|(a, b)| a - b).collect();
    let uu = dot(&u, &u);
    let dd = dot(&d, &d);
    if uu == 0.0 {
        return Err(Error::Degenerate("second anchor coincides with the origin".into()));
    }
    if dd == 0.0 {
        return Err(Error::Degenerate("third anchor coincides with the origin".into()));
    }
    let c = dot(&u, &d) / uu;
    let v: Vec<f64> = d.iter().zip(&u).map(|(x, y)| x - c * y).collect();
    let vv = dot(&v, &v);
    if vv <= 1e-20 * dd {
        return Err(Error::Degenerate(format!(
            "anchors are collinear (orthogonal part {:.3e} of {:.3e})",
            vv.sqrt(),
            dd.sqrt()
        )));
    }
    Ok(LandscapeBasis { origin: w1.to_vec(), u, v, u_norm: uu.sqrt(), v_norm: vv.sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    /// `w - (origin + x u + y v)`.
    pub residual: Vec<f64>,
    pub residual_norm: f64,
}

impl LandscapeBasis {
    /// `origin + x u + y v`.
    pub fn point(&self, x: f64, y: f64) -> Vec<f64> {
        self.origin.iter().zip(self.u.iter().zip(&self.v)).map(|(o, (a, b))| o + x * a + y * b).collect()
    }
}

pub fn project(w: &[f64], basis: &LandscapeBasis) -> Result<Projection> {
    check_len("projection", basis.origin.len(), w.len())?;
    let d: Vec<f64> = w.iter().zip(&basis.origin).map(|(a, b)| a - b).collect();
    // dividing by the same dot product as the numerator puts the second
    // anchor at x = 1 exactly
    let x = dot(&d, &basis.u) / dot(&basis.u, &basis.u);
    let y = dot(&d, &basis.v) / dot(&basis.v, &basis.v);
    let residual: Vec<f64> = d.iter().zip(basis.u.iter().zip(&basis.v)).map(|(r, (a, b))| r - x * a - y * b).collect();
    let residual_norm = dot(&residual, &residual).sqrt();
    Ok(Projection { x, y, residual, residual_norm })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridExtents {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: usize,
}

impl Default for GridExtents {
    fn default() -> Self {
        GridExtents { x_min: -0.5, x_max: 1.5, y_min: -0.5, y_max: 1.5, resolution: 25 }
    }
}

impl GridExtents {
    fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    pub fn xs(&self) -> Vec<f64> {
        Self::axis(self.x_min, self.x_max, self.resolution)
    }

    pub fn ys(&self) -> Vec<f64> {
        Self::axis(self.y_min, self.y_max, self.resolution)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapeCell {
    pub x: f64,
    pub y: f64,
    pub mean_accuracy: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub extents: GridExtents,
    /// Row-major over y, then x.
    pub cells: Vec<LandscapeCell>,
}

/// Accuracy and mean cross-entropy of `w` on `data`.
pub fn accuracy_and_loss(arch: &ArchSpec, w: &[f64], data: &TaskDataset, policy: HeadPolicy) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut correct, mut loss) = (0usize, 0.0);
    for i in 0..data.len() {
        let (head, label) = policy.resolve(arch, data.labels[i], data.tasks[i])?;
        let t = forward(arch, w, data.row(i), head)?;
        if argmax(&t.logits) == label {
            correct += 1;
        }
        loss += cross_entropy(&t.logits, label)?.0;
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Mean over tasks of per-task accuracy and per-task mean loss.
pub fn mean_over_tasks(arch: &ArchSpec, w: &[f64], tasks: &[TaskDataset], policy: HeadPolicy) -> Result<(f64, f64)> {
    if tasks.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut acc, mut loss) = (0.0, 0.0);
    for d in tasks {
        let (a, l) = accuracy_and_loss(arch, w, d, policy)?;
        acc += a;
        loss += l;
    }
    let n = tasks.len() as f64;
    Ok((acc / n, loss / n))
}

/// Evaluates the reconstructed network at every grid point.
pub fn grid_eval(
    arch: &ArchSpec,
    basis: &LandscapeBasis,
    extents: GridExtents,
    tasks: &[TaskDataset],
    policy: HeadPolicy,
) -> Result<LandscapeGrid> {
    if extents.resolution < 2 {
        return Err(Error::InvalidArgument("grid resolution must be >= 2".into()));
    }
    check_len("landscape weights", arch.param_count(), basis.origin.len())?;
    let (xs, ys) = (extents.xs(), extents.ys());
    let points: Vec<(f64, f64)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let cells = points
        .par_iter()
        .map(|&(x, y)| {
            let (mean_accuracy, mean_loss) = mean_over_tasks(arch, &basis.point(x, y), tasks, policy)?;
            if !mean_loss.is_finite() {
                return Err(Error::NonFinite(format!("landscape loss at ({x}, {y})")));
            }
            Ok(LandscapeCell { x, y, mean_accuracy, mean_loss })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandscapeGrid { extents, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub residual_norm: f64,
}

/// One row of the λ_a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub lambda_a: f64,
    pub wd_old: f64,
    pub wd_aux: f64,
    pub cka_old: f64,
    pub cka_aux: f64,
    pub cka_multi: f64,
}

/// Distances and CKA scores of every auxiliary-objective branch against the
/// old (multitask-initialized), auxiliary and multitask networks.
/// Distances cover the parameters the old network owns, i.e. the trunk and
/// the output units of its `old_outputs` classes.
pub fn tradeoff_rows(
    arch: &ArchSpec,
    weights: &AnalysisWeights,
    probe: &TaskDataset,
    old_outputs: usize,
) -> Result<Vec<TradeoffRow>> {
    let idx = old_parameter_indices(arch, old_outputs);
    weights
        .ancl
        .iter()
        .map(|(lambda_a, w)| {
            let cka = cka_suite(arch, w, &weights.multi_prev, &weights.aux, &weights.multi, probe, None)?;
            Ok(TradeoffRow {
                lambda_a: *lambda_a,
                wd_old: weight_distance_on(w, &weights.multi_prev, &idx)?,
                wd_aux: weight_distance_on(w, &weights.aux, &idx)?,
                cka_old: cka.old,
                cka_aux: cka.aux,
                cka_multi: cka.multi,
            })
        })
        .collect()
}

/// Projections of every analysis network onto the old/aux/multitask plane.
pub fn projection_rows(weights: &AnalysisWeights, basis: &LandscapeBasis) -> Result<Vec<ProjectionRow>> {
    let mut named: Vec<(String, &[f64])> = vec![
        ("old".into(), &weights.multi_prev),
        ("aux".into(), &weights.aux),
        ("multi".into(), &weights.multi),
        ("cl".into(), &weights.cl),
    ];
    for (la, w) in &weights.ancl {
        named.push((format!("ancl_{la}"), w));
    }
    named
        .into_iter()
        .map(|(label, w)| {
            let p = project(w, basis)?;
            Ok(ProjectionRow { label, x: p.x, y: p.y, residual_norm: p.residual_norm })
        })
        .collect()
}

/// Serializes rows to CSV with a header taken from the field names.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("spearman", a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::InvalidArgument("rank correlation needs two points".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}
