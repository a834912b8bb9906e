//! Minimal fully-connected ReLU network with manual backpropagation.
//!
//! All parameters live in one flat [`WeightVector`]. Layers are stored in
//! order (hidden layers first, then the output heads); within a layer the
//! weight matrix comes first in row-major `[out][in]` order, followed by the
//! bias vector.

use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Activation {
    #[default]
    ReLU,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    /// One output head per task; task identity selects the head.
    MultiHead,
    /// A single output layer covering every class of the stream.
    SingleHead,
}

/// Network architecture.
///
/// In `SingleHead` mode `head_sizes` holds exactly one entry, the total class
/// count of the stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub head_mode: HeadMode,
    pub head_sizes: Vec<usize>,
}

/// Offsets of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSlot {
    pub fn end(&self) -> usize {
        self.bias_offset + self.fan_out
    }

    pub fn len(&self) -> usize {
        self.fan_out * (self.fan_in + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ArchSpec {
    pub fn multi_head(input_dim: usize, hidden_dims: Vec<usize>, head_sizes: Vec<usize>) -> Self {
        ArchSpec { input_dim, hidden_dims, activation: Activation::ReLU, head_mode: HeadMode::MultiHead, head_sizes }
    }

    pub fn single_head(input_dim: usize, hidden_dims: Vec<usize>, classes: usize) -> Self {
        ArchSpec {
            input_dim,
            hidden_dims,
            activation: Activation::ReLU,
            head_mode: HeadMode::SingleHead,
            head_sizes: vec![classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("all layer widths must be >= 1".into()));
        }
        if self.head_sizes.is_empty() || self.head_sizes.contains(&0) {
            return Err(Error::InvalidArgument("head_sizes must be nonempty with every head >= 1".into()));
        }
        if self.head_mode == HeadMode::SingleHead && self.head_sizes.len() != 1 {
            return Err(Error::InvalidArgument("single-head architectures take one head size (total classes)".into()));
        }
        Ok(())
    }

    /// Width of the penultimate representation fed to the heads.
    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    pub fn total_classes(&self) -> usize {
        self.head_sizes.iter().sum()
    }

    /// Hidden layer slots, then one slot per head.
    pub fn layout(&self) -> (Vec<LayerSlot>, Vec<LayerSlot>) {
        let mut offset = 0;
        let mut slot = |fan_in: usize, fan_out: usize| {
            let s = LayerSlot { fan_in, fan_out, weight_offset: offset, bias_offset: offset + fan_in * fan_out };
            offset = s.end();
            s
        };
        let mut fan_in = self.input_dim;
        let hidden = self
            .hidden_dims
            .iter()
            .map(|&h| {
                let s = slot(fan_in, h);
                fan_in = h;
                s
            })
            .collect();
        let heads = self.head_sizes.iter().map(|&c| slot(fan_in, c)).collect();
        (hidden, heads)
    }

    /// Total parameter count `P`.
    pub fn param_count(&self) -> usize {
        let mut fan_in = self.input_dim;
        let mut total = 0;
        for &h in &self.hidden_dims {
            total += h * (fan_in + 1);
            fan_in = h;
        }
        total + self.head_sizes.iter().map(|&c| c * (fan_in + 1)).sum::<usize>()
    }

    /// Range of concatenated output positions belonging to head `k`.
    pub fn head_range(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = self.head_sizes[..k].iter().sum();
        start..start + self.head_sizes[k]
    }
}

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn zeros(len: usize) -> Self {
        WeightVector(vec![0.0; len])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for WeightVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for WeightVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for WeightVector {
    fn from(v: Vec<f64>) -> Self {
        WeightVector(v)
    }
}

/// Which output logits a forward pass produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// A single task head (multi-head architectures only).
    Task(usize),
    /// Every output, heads concatenated in task order.
    All,
    /// The first `n` concatenated outputs: the classes seen so far.
    Prefix(usize),
}

/// A contiguous run of output rows from one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct HeadSegment {
    head: usize,
    rows: usize,
}

fn resolve_head(arch: &ArchSpec, head: Head) -> Result<Vec<HeadSegment>> {
    match head {
        Head::Task(k) => {
            if arch.head_mode != HeadMode::MultiHead {
                return Err(Error::InvalidHead("task heads exist only in multi-head mode".into()));
            }
            if k >= arch.head_sizes.len() {
                return Err(Error::InvalidHead(format!("head {k} of {}", arch.head_sizes.len())));
            }
            Ok(vec![HeadSegment { head: k, rows: arch.head_sizes[k] }])
        }
        Head::All => Ok(arch.head_sizes.iter().enumerate().map(|(head, &rows)| HeadSegment { head, rows }).collect()),
        Head::Prefix(n) => {
            if n == 0 || n > arch.total_classes() {
                return Err(Error::InvalidHead(format!("prefix {n} of {} outputs", arch.total_classes())));
            }
            let mut left = n;
            let mut segs = Vec::new();
            for (head, &size) in arch.head_sizes.iter().enumerate() {
                if left == 0 {
                    break;
                }
                let rows = size.min(left);
                segs.push(HeadSegment { head, rows });
                left -= rows;
            }
            Ok(segs)
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Pre-activations of each hidden layer.
    pub pre: Vec<Vec<f64>>,
    /// Post-activations of each hidden layer.
    pub post: Vec<Vec<f64>>,
    /// Logits of the selected outputs.
    pub logits: Vec<f64>,
    segments: Vec<HeadSegment>,
}

impl ForwardTrace {
    /// Penultimate features `f(x; θ)`, the input to the heads.
    pub fn features(&self) -> &[f64] {
        self.post.last().unwrap_or(&self.input)
    }
}

/// Seeded uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_weights(arch: &ArchSpec, seed: u64) -> WeightVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hidden, heads) = arch.layout();
    let mut w = vec![0.0; arch.param_count()];
    for slot in hidden.iter().chain(heads.iter()) {
        let bound = 1.0 / (slot.fan_in as f64).sqrt();
        for v in &mut w[slot.weight_offset..slot.end()] {
            *v = rng.random_range(-bound..bound);
        }
    }
    WeightVector(w)
}

fn affine(w: &[f64], slot: &LayerSlot, rows: usize, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for r in 0..rows {
        let row = &w[slot.weight_offset + r * slot.fan_in..][..slot.fan_in];
        let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        out.push(dot + w[slot.bias_offset + r]);
    }
}

pub fn forward(arch: &ArchSpec, w: &[f64], x: &[f64], head: Head) -> Result<ForwardTrace> {
    check_len("forward input", arch.input_dim, x.len())?;
    check_len("forward weights", arch.param_count(), w.len())?;
    let segments = resolve_head(arch, head)?;
    let (hidden, heads) = arch.layout();

    let mut pre = Vec::with_capacity(hidden.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(hidden.len());
    for slot in &hidden {
        let input = post.last().map(Vec::as_slice).unwrap_or(x);
        let mut z = Vec::with_capacity(slot.fan_out);
        affine(w, slot, slot.fan_out, input, &mut z);
        let a = z.iter().map(|&v| v.max(0.0)).collect();
        pre.push(z);
        post.push(a);
    }

    let features = post.last().map(Vec::as_slice).unwrap_or(x);
    let mut logits = Vec::new();
    let mut buf = Vec::new();
    for seg in &segments {
        affine(w, &heads[seg.head], seg.rows, features, &mut buf);
        logits.extend_from_slice(&buf);
    }

    Ok(ForwardTrace { input: x.to_vec(), pre, post, logits, segments })
}

/// Back-propagates an upstream gradient on the trace's logits, plus an
/// optional gradient on the penultimate features, and adds the resulting
/// parameter gradient into `grad`.
pub fn backward(
    arch: &ArchSpec,
    w: &[f64],
    trace: &ForwardTrace,
    dlogits: &[f64],
    dfeatures: Option<&[f64]>,
    grad: &mut [f64],
) -> Result<()> {
    check_len("backward logits", trace.logits.len(), dlogits.len())?;
    check_len("backward gradient", arch.param_count(), grad.len())?;
    let (hidden, heads) = arch.layout();
    let features = trace.features();
    let mut delta = match dfeatures {
        Some(df) => {
            check_len("backward features", features.len(), df.len())?;
            df.to_vec()
        }
        None => vec![0.0; features.len()],
    };

    let mut pos = 0;
    for seg in &trace.segments {
        let slot = &heads[seg.head];
        for r in 0..seg.rows {
            let g = dlogits[pos + r];
            if g == 0.0 {
                continue;
            }
            let row = slot.weight_offset + r * slot.fan_in;
            for (j, &f) in features.iter().enumerate() {
                grad[row + j] += g * f;
                delta[j] += g * w[row + j];
            }
            grad[slot.bias_offset + r] += g;
        }
        pos += seg.rows;
    }

    for (l, slot) in hidden.iter().enumerate().rev() {
        for (d, &z) in delta.iter_mut().zip(&trace.pre[l]) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        let input = if l == 0 { &trace.input } else { &trace.post[l - 1] };
        let mut next = vec![0.0; slot.fan_in];
        for (r, &g) in delta.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = slot.weight_offset + r * slot.fan_in;
            for j in 0..slot.fan_in {
                grad[row + j] += g * input[j];
                next[j] += g * w[row + j];
            }
            grad[slot.bias_offset + r] += g;
        }
        delta = next;
    }
    Ok(())
}

/// Softmax cross-entropy of `logits` against `label`: loss and logit gradient.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&o| (o - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[label];
    let mut d: Vec<f64> = logits.iter().map(|&o| (o - log_z).exp()).collect();
    d[label] -= 1.0;
    Ok((loss, d))
}

/// Gradient of the softmax cross-entropy with respect to all parameters.
///
/// `label` indexes the trace's logits.
pub fn backward_ce(arch: &ArchSpec, w: &[f64], trace: &ForwardTrace, label: usize) -> Result<WeightVector> {
    let (_, d) = cross_entropy(&trace.logits, label)?;
    let mut grad = vec![0.0; arch.param_count()];
    backward(arch, w, trace, &d, None, &mut grad)?;
    Ok(WeightVector(grad))
}

/// Temperature softmax `exp(o/τ) / Σ exp(o/τ)`.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&o| ((o - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// Output of [`center_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    /// Set when the input was constant; `values` is then all zeros.
    pub degenerate: bool,
    norm: f64,
}

/// Subtracts the mean over the feature dimension and scales to unit L2 norm.
pub fn center_normalize(features: &[f64]) -> Result<Normalized> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("cannot normalise an empty vector".into()));
    }
    let mean = features.iter().sum::<f64>() / features.len() as f64;
    let centered: Vec<f64> = features.iter().map(|v| v - mean).collect();
    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = features.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if norm <= 1e-12 * (1.0 + scale) {
        return Ok(Normalized { values: vec![0.0; features.len()], degenerate: true, norm: 0.0 });
    }
    Ok(Normalized { values: centered.iter().map(|v| v / norm).collect(), degenerate: false, norm })
}

impl Normalized {
    /// Pulls a gradient on the normalised vector back to the raw features.
    pub fn backward(&self, grad_out: &[f64]) -> Vec<f64> {
        if self.degenerate {
            return vec![0.0; grad_out.len()];
        }
        let f = &self.values;
        let proj: f64 = f.iter().zip(grad_out).map(|(a, b)| a * b).sum();
        let g: Vec<f64> = grad_out.iter().zip(f).map(|(g, f)| (g - f * proj) / self.norm).collect();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        g.into_iter().map(|v| v - mean).collect()
    }
}

/// SGD state with classical momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub velocity: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
}

impl OptimState {
    pub fn new(len: usize, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(OptimState { velocity: vec![0.0; len], lr, momentum })
    }
}

/// `v <- momentum * v + grad; w <- w - lr * v`.
pub fn sgd_step(w: &mut [f64], grad: &[f64], state: &mut OptimState) -> Result<()> {
    check_len("sgd gradient", w.len(), grad.len())?;
    check_len("sgd velocity", w.len(), state.velocity.len())?;
    for ((wi, &g), v) in w.iter_mut().zip(grad).zip(state.velocity.iter_mut()) {
        *v = state.momentum * *v + g;
        *wi -= state.lr * *v;
    }
    Ok(())
}
