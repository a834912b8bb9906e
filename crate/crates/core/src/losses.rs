//! Continual-learning objectives.
//!
//! The classic objective adds one regularizer `Ω(θ; θ_old, λ)` to the task
//! loss. The auxiliary-network objective adds a second regularizer of the
//! same kind, `Ω(θ; θ_aux, λ_a)`, anchored at a network trained only on the
//! current task.

use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointStore;
use crate::error::{check_len, Error, Result};
use crate::importance::{ImportanceMap, ImportanceSource};
use crate::mutation;
use crate::nn::{backward, center_normalize, cross_entropy, forward, softmax_temp, ArchSpec, Head, WeightVector};
use crate::tasks::{HeadPolicy, TaskDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodId {
    #[serde(alias = "ewc")]
    Ewc,
    #[serde(alias = "mas")]
    Mas,
    #[serde(alias = "lwf")]
    Lwf,
    #[serde(alias = "lfl")]
    Lfl,
    #[serde(alias = "icarl")]
    Icarl,
}

impl MethodId {
    pub const ALL: [MethodId; 5] = [MethodId::Ewc, MethodId::Mas, MethodId::Lwf, MethodId::Lfl, MethodId::Icarl];

    /// Importance estimator for the weight-regularization methods.
    pub fn importance_source(self) -> Option<ImportanceSource> {
        match self {
            MethodId::Ewc => Some(ImportanceSource::Fisher),
            MethodId::Mas => Some(ImportanceSource::Mas),
            _ => None,
        }
    }

    /// Whether training runs on the current data merged with exemplars.
    pub fn uses_replay(self) -> bool {
        self == MethodId::Icarl
    }

    fn distills_logits(self) -> bool {
        matches!(self, MethodId::Lwf | MethodId::Icarl)
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Ewc => "ewc",
            MethodId::Mas => "mas",
            MethodId::Lwf => "lwf",
            MethodId::Lfl => "lfl",
            MethodId::Icarl => "icarl",
        }
    }
}

impl std::str::FromStr for MethodId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(alias = "finetune")]
    Finetune,
    #[serde(alias = "cl")]
    Cl,
    #[serde(alias = "ancl")]
    Ancl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub method: MethodId,
    pub mode: Mode,
    pub lambda: f64,
    pub lambda_a: f64,
    /// Distillation temperature.
    pub tau: f64,
}

pub const DEFAULT_TAU: f64 = 2.0;

impl LossSpec {
    pub fn finetune(method: MethodId) -> Self {
        LossSpec { method, mode: Mode::Finetune, lambda: 0.0, lambda_a: 0.0, tau: DEFAULT_TAU }
    }

    pub fn cl(method: MethodId, lambda: f64) -> Self {
        LossSpec { mode: Mode::Cl, lambda, ..Self::finetune(method) }
    }

    pub fn ancl(method: MethodId, lambda: f64, lambda_a: f64) -> Self {
        LossSpec { mode: Mode::Ancl, lambda, lambda_a, ..Self::finetune(method) }
    }

    /// λ after the mode is applied (zero when fine-tuning).
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            Mode::Finetune => 0.0,
            _ => self.lambda,
        }
    }

    /// λ_a after the mode is applied (nonzero only for the auxiliary objective).
    pub fn effective_lambda_a(&self) -> f64 {
        match self.mode {
            Mode::Ancl => self.lambda_a,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.lambda_a >= 0.0) {
            return Err(Error::InvalidArgument("regularization strengths must be >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// `(λ/2) Σ imp_i (w_i - ref_i)^2` and its gradient `λ imp ⊙ (w - ref)`.
pub fn quad_penalty(w: &[f64], w_ref: &[f64], imp: &ImportanceMap, lambda: f64) -> Result<(f64, Vec<f64>)> {
    check_len("quad penalty reference", w.len(), w_ref.len())?;
    check_len("quad penalty importance", w.len(), imp.len())?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let sign = mutation::quad_penalty_sign();
    let mut loss = 0.0;
    let grad = w
        .iter()
        .zip(w_ref)
        .zip(&imp.values)
        .map(|((&a, &b), &f)| {
            let d = a - b;
            loss += f * d * d;
            sign * lambda * f * d
        })
        .collect();
    Ok((0.5 * lambda * loss, grad))
}

/// Temperature-scaled distillation `weight * Σ_c -y_teacher log y_main` and
/// its gradient at the main logits, `(weight/τ) (y_main - y_teacher)`.
pub fn lwf_kd(main_logits: &[f64], teacher_logits: &[f64], tau: f64, weight: f64) -> Result<(f64, Vec<f64>)> {
    check_len("distillation logits", main_logits.len(), teacher_logits.len())?;
    let y_main = softmax_temp(main_logits, tau)?;
    let y_teacher = softmax_temp(teacher_logits, tau)?;
    // log-softmax directly, so confident students do not hit log(0)
    let max = main_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = main_logits.iter().map(|o| ((o - max) / tau).exp()).sum::<f64>().ln();
    let loss: f64 = y_teacher.iter().zip(main_logits).map(|(t, o)| -t * ((o - max) / tau - log_z)).sum();
    let grad = y_main.iter().zip(&y_teacher).map(|(m, t)| weight / tau * (m - t)).collect();
    Ok((weight * loss, grad))
}

/// `weight * ||f_main - f_ref||^2` and its gradient at `f_main`.
pub fn lfl_penalty(f_main: &[f64], f_ref: &[f64], weight: f64) -> Result<(f64, Vec<f64>)> {
    check_len("feature distillation", f_main.len(), f_ref.len())?;
    let mut loss = 0.0;
    let grad = f_main
        .iter()
        .zip(f_ref)
        .map(|(a, b)| {
            let d = a - b;
            loss += d * d;
            2.0 * weight * d
        })
        .collect();
    Ok((weight * loss, grad))
}

/// Readout used while training: how cross-entropy picks its logits, and how
/// many leading outputs (classes seen so far) the distillation terms cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossContext {
    pub policy: HeadPolicy,
    pub seen: usize,
}

/// Objective value with its parts and the full parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub task_loss: f64,
    pub old_term: f64,
    pub aux_term: f64,
    pub grad: WeightVector,
}

enum Reference<'a> {
    Weights { w: &'a [f64], imp: &'a ImportanceMap },
    Network(&'a [f64]),
}

fn reference<'a>(
    spec: &LossSpec,
    w: Option<&'a WeightVector>,
    imp: Option<&'a ImportanceMap>,
    which: &'static str,
) -> Result<Reference<'a>> {
    let w = w.ok_or(Error::MissingCheckpoint(which))?;
    match spec.method.importance_source() {
        Some(source) => {
            let imp = imp.ok_or(Error::MissingImportance(which))?;
            if imp.source != source {
                return Err(Error::SourceMismatch(format!(
                    "{} needs {source:?} importance, store holds {:?}",
                    spec.method.name(),
                    imp.source
                )));
            }
            Ok(Reference::Weights { w, imp })
        }
        None => Ok(Reference::Network(w)),
    }
}

/// Full objective on `batch`: mean task cross-entropy plus the old-network
/// regularizer (λ) plus, for the auxiliary mode, the auxiliary regularizer
/// (λ_a). Distillation terms are batch means; quadratic penalties are not.
///
/// A regularizer whose effective strength is zero is skipped outright, so
/// the reduced objectives match the smaller ones exactly.
pub fn total_loss(
    spec: &LossSpec,
    arch: &ArchSpec,
    w: &[f64],
    batch: &TaskDataset,
    store: &CheckpointStore,
    ctx: LossContext,
) -> Result<LossOutput> {
    objective(spec, arch, w, batch, store, ctx, true)
}

/// [`total_loss`] without the gradient.
pub fn loss_value(
    spec: &LossSpec,
    arch: &ArchSpec,
    w: &[f64],
    batch: &TaskDataset,
    store: &CheckpointStore,
    ctx: LossContext,
) -> Result<f64> {
    Ok(objective(spec, arch, w, batch, store, ctx, false)?.loss)
}

fn objective(
    spec: &LossSpec,
    arch: &ArchSpec,
    w: &[f64],
    batch: &TaskDataset,
    store: &CheckpointStore,
    ctx: LossContext,
    want_grad: bool,
) -> Result<LossOutput> {
    spec.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_len("objective weights", arch.param_count(), w.len())?;
    let lam = spec.effective_lambda();
    let lam_a = spec.effective_lambda_a();
    let old = if lam > 0.0 {
        Some(reference(spec, store.old_weights(), store.old_importance(), "old network")?)
    } else {
        None
    };
    let aux = if lam_a > 0.0 {
        Some(reference(spec, store.aux_weights(), store.aux_importance(), "auxiliary network")?)
    } else {
        None
    };

    let n = batch.len() as f64;
    let p = arch.param_count();
    let mut grad = vec![0.0; if want_grad { p } else { 0 }];
    let (mut task_loss, mut old_term, mut aux_term) = (0.0, 0.0, 0.0);
    let readout = Head::Prefix(ctx.seen);

    for i in 0..batch.len() {
        let (head, label) = ctx.policy.resolve(arch, batch.labels[i], batch.tasks[i])?;
        let ce_range = match head {
            Head::Task(k) => arch.head_range(k),
            Head::Prefix(s) => 0..s,
            Head::All => 0..arch.total_classes(),
        };
        if ce_range.end > ctx.seen {
            return Err(Error::InvalidHead(format!(
                "row {i} needs outputs up to {}, only {} are active",
                ce_range.end, ctx.seen
            )));
        }
        let x = batch.row(i);
        let trace = forward(arch, w, x, readout)?;
        let (ce, d_ce) = cross_entropy(&trace.logits[ce_range.clone()], label)?;
        task_loss += ce / n;
        let mut dlogits = vec![0.0; trace.logits.len()];
        for (d, g) in dlogits[ce_range].iter_mut().zip(&d_ce) {
            *d = g / n;
        }
        let mut dfeat: Option<Vec<f64>> = None;

        if spec.method.distills_logits() {
            for (r, lam_r, term) in [(&old, lam, &mut old_term), (&aux, lam_a, &mut aux_term)] {
                if let Some(Reference::Network(wr)) = r {
                    let teacher = forward(arch, wr, x, readout)?;
                    let (l, g) = lwf_kd(&trace.logits, &teacher.logits, spec.tau, lam_r)?;
                    *term += l / n;
                    dlogits.iter_mut().zip(g).for_each(|(d, g)| *d += g / n);
                }
            }
        } else if spec.method == MethodId::Lfl && (old.is_some() || aux.is_some()) {
            let f = center_normalize(trace.features())?;
            let mut df = vec![0.0; f.values.len()];
            for (r, lam_r, term) in [(&old, lam, &mut old_term), (&aux, lam_a, &mut aux_term)] {
                if let Some(Reference::Network(wr)) = r {
                    let teacher = forward(arch, wr, x, Head::Prefix(1))?;
                    let f_ref = center_normalize(teacher.features())?;
                    let (l, g) = lfl_penalty(&f.values, &f_ref.values, lam_r)?;
                    *term += l / n;
                    df.iter_mut().zip(g).for_each(|(d, g)| *d += g / n);
                }
            }
            dfeat = Some(f.backward(&df));
        }

        if want_grad {
            backward(arch, w, &trace, &dlogits, dfeat.as_deref(), &mut grad)?;
        }
    }

    for (r, lam_r, term) in [(&old, lam, &mut old_term), (&aux, lam_a, &mut aux_term)] {
        if let Some(Reference::Weights { w: wr, imp }) = r {
            let (l, g) = quad_penalty(w, wr, imp, lam_r)?;
            *term += l;
            if want_grad {
                grad.iter_mut().zip(g).for_each(|(a, g)| *a += g);
            }
        }
    }

    let loss = task_loss + old_term + aux_term;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("objective value {loss}")));
    }
    Ok(LossOutput { loss, task_loss, old_term, aux_term, grad: WeightVector(grad) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::fisher_diag;
    use crate::nn::init_weights;
    use crate::tasks::{make_blob_sequence, BlobParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn imp(values: Vec<f64>) -> ImportanceMap {
        ImportanceMap { values, source: ImportanceSource::Fisher, tasks_covered: 1 }
    }

    #[test]
    fn quad_penalty_examples() {
        let (l, g) = quad_penalty(&[1.0, 2.0], &[1.0, 2.0], &imp(vec![3.0, 4.0]), 5.0).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0, 0.0]));
        let (l, g) = quad_penalty(&[2.0], &[0.0], &imp(vec![1.0]), 2.0).unwrap();
        assert_eq!((l, g), (4.0, vec![4.0]));
        assert!(quad_penalty(&[2.0], &[0.0, 1.0], &imp(vec![1.0]), 2.0).is_err());
    }

    #[test]
    fn quad_penalty_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = imp((0..6).map(|_| rng.random_range(0.0..2.0)).collect());
        let (_, g) = quad_penalty(&w, &r, &m, 0.7).unwrap();
        for i in 0..6 {
            let mut wp = w.clone();
            wp[i] += 1e-5;
            let mut wm = w.clone();
            wm[i] -= 1e-5;
            let fd = (quad_penalty(&wp, &r, &m, 0.7).unwrap().0 - quad_penalty(&wm, &r, &m, 0.7).unwrap().0) / 2e-5;
            assert!((fd - g[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn kd_gradient_is_zero_for_matching_teacher() {
        let o = [0.3, -1.2, 2.0];
        let (_, g) = lwf_kd(&o, &o, 2.0, 1.5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(lwf_kd(&o, &o[..2], 2.0, 1.0).is_err());
    }

    #[test]
    fn kd_gradient_matches_differences() {
        let o = [0.3, -1.2, 2.0, 0.1];
        let t = [1.0, 0.5, -0.7, 0.2];
        for tau in [0.5, 1.0, 2.0, 7.0] {
            let (_, g) = lwf_kd(&o, &t, tau, 1.3).unwrap();
            for h in 0..4 {
                let eps = 1e-5;
                let mut op = o;
                op[h] += eps;
                let mut om = o;
                om[h] -= eps;
                let fd = (lwf_kd(&op, &t, tau, 1.3).unwrap().0 - lwf_kd(&om, &t, tau, 1.3).unwrap().0) / (2.0 * eps);
                assert!((fd - g[h]).abs() <= 1e-6 * fd.abs().max(g[h].abs()).max(1e-8) + 1e-10);
            }
        }
    }

    #[test]
    fn kd_limiting_case() {
        let (_, g) = lwf_kd(&[0.0, 0.0], &[60.0, 0.0], 1.0, 1.0).unwrap();
        assert!((g[0] - (0.5 - 1.0)).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lfl_examples() {
        assert_eq!(lfl_penalty(&[1.0, 2.0], &[1.0, 2.0], 3.0).unwrap(), (0.0, vec![0.0, 0.0]));
        assert_eq!(lfl_penalty(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap().0, 2.0);
        let a = [0.4, -0.2, 0.9];
        let b = [0.1, 0.3, -0.5];
        let (_, g) = lfl_penalty(&a, &b, 0.8).unwrap();
        for i in 0..3 {
            let mut ap = a;
            ap[i] += 1e-5;
            let mut am = a;
            am[i] -= 1e-5;
            let fd = (lfl_penalty(&ap, &b, 0.8).unwrap().0 - lfl_penalty(&am, &b, 0.8).unwrap().0) / 2e-5;
            assert!((fd - g[i]).abs() < 1e-9);
        }
        assert!(lfl_penalty(&a, &b[..2], 1.0).is_err());
    }

    fn fixture(method: MethodId) -> (ArchSpec, WeightVector, TaskDataset, CheckpointStore, LossContext) {
        let seq = make_blob_sequence(&BlobParams {
            tasks: 2,
            classes_per_task: 2,
            per_class: 10,
            dim: 3,
            spread: 0.8,
            seed: 3,
        })
        .unwrap();
        let arch = ArchSpec::multi_head(3, vec![5, 4], vec![2, 2]);
        let old = init_weights(&arch, 1);
        let aux = init_weights(&arch, 2);
        let mut store = CheckpointStore::new();
        store.freeze_old(&old);
        let ctx = LossContext { policy: HeadPolicy::TaskAware, seen: 4 };
        let data = seq.tasks[1].train.clone();
        let imp_of = |w: &WeightVector| match method {
            MethodId::Mas => Some(crate::importance::mas_importance(&arch, w, &data, ctx.policy).unwrap()),
            MethodId::Ewc => Some(fisher_diag(&arch, w, &data, ctx.policy).unwrap()),
            _ => None,
        };
        if let Some(m) = imp_of(&old) {
            store.set_old_importance(m);
        }
        store.freeze_aux(&aux, imp_of(&aux));
        let w = init_weights(&arch, 3);
        (arch, w, data, store, ctx)
    }

    #[test]
    fn reductions_are_exact_for_every_method() {
        for method in MethodId::ALL {
            let (arch, w, data, store, ctx) = fixture(method);
            let ancl0 = total_loss(&LossSpec::ancl(method, 0.7, 0.0), &arch, &w, &data, &store, ctx).unwrap();
            let cl = total_loss(&LossSpec::cl(method, 0.7), &arch, &w, &data, &store, ctx).unwrap();
            assert_eq!(ancl0, cl, "{method:?}");
            let cl0 = total_loss(&LossSpec::cl(method, 0.0), &arch, &w, &data, &store, ctx).unwrap();
            let ft = total_loss(&LossSpec::finetune(method), &arch, &w, &data, &store, ctx).unwrap();
            assert_eq!(cl0, ft, "{method:?}");
            let both0 = total_loss(&LossSpec::ancl(method, 0.0, 0.0), &arch, &w, &data, &store, ctx).unwrap();
            assert_eq!(both0.loss, both0.task_loss);
            assert_eq!(both0, ft);
        }
    }

    #[test]
    fn missing_state_is_reported() {
        let (arch, w, data, _, ctx) = fixture(MethodId::Ewc);
        let empty = CheckpointStore::new();
        assert!(matches!(
            total_loss(&LossSpec::cl(MethodId::Ewc, 1.0), &arch, &w, &data, &empty, ctx),
            Err(Error::MissingCheckpoint(_))
        ));
        let mut only_w = CheckpointStore::new();
        only_w.freeze_old(&w);
        assert!(matches!(
            total_loss(&LossSpec::cl(MethodId::Ewc, 1.0), &arch, &w, &data, &only_w, ctx),
            Err(Error::MissingImportance(_))
        ));
        assert!(total_loss(&LossSpec::finetune(MethodId::Ewc), &arch, &w, &data, &empty, ctx).is_ok());
    }

    #[test]
    fn composite_gradients_match_differences() {
        for method in MethodId::ALL {
            let (arch, w, data, store, ctx) = fixture(method);
            let batch = data.subset(&[0, 1, 2, 3, 4, 5]);
            let spec = LossSpec::ancl(method, 0.9, 0.6);
            let out = total_loss(&spec, &arch, &w, &batch, &store, ctx).unwrap();
            let f = |w: &[f64]| loss_value(&spec, &arch, w, &batch, &store, ctx).unwrap();
            let err = crate::oracle::fd_gradcheck(f, &w, &out.grad, 1e-5);
            assert!(err < 1e-4, "{method:?}: {err}");
        }
    }

    #[test]
    fn loss_value_matches_total_loss() {
        let (arch, w, data, store, ctx) = fixture(MethodId::Lfl);
        let spec = LossSpec::ancl(MethodId::Lfl, 0.4, 0.3);
        let full = total_loss(&spec, &arch, &w, &data, &store, ctx).unwrap();
        assert_eq!(full.loss, loss_value(&spec, &arch, &w, &data, &store, ctx).unwrap());
    }
}
