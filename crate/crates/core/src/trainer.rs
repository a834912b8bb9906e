//! Task-sequence training: plain and regularized SGD with a validation
//! plateau schedule, the auxiliary-network loop, the multitask-initialized
//! analysis regime and a two-phase hyperparameter search.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{CheckpointFile, CheckpointStore};
use crate::error::{check_len, Error, Result};
use crate::importance::{accumulate, fisher_diag, mas_importance, ImportanceMap, ImportanceSource};
use crate::losses::{loss_value, total_loss, LossContext, LossSpec, Mode};
use crate::nn::{init_weights, sgd_step, ArchSpec, HeadMode, OptimState, WeightVector};
use crate::replay::{combine, evaluate_nme, MemoryBuffer};
use crate::tasks::{aac, aiac, evaluate, AccuracyMatrix, HeadPolicy, Split, TaskDataset, TaskSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub spec: LossSpec,
    /// Initial learning rate.
    pub lr: f64,
    /// Divisor applied to the learning rate on a validation plateau.
    pub lr_factor: f64,
    /// Epochs without validation-loss improvement before a decay.
    pub patience: usize,
    /// Training stops once the learning rate falls below this.
    pub min_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Exemplars kept per class (replay methods only).
    pub replay: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            spec: LossSpec::finetune(crate::losses::MethodId::Ewc),
            lr: 0.05,
            lr_factor: 3.0,
            patience: 5,
            min_lr: 1e-4,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 200,
            seed: 0,
            replay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if !(self.lr > self.min_lr) || !(self.min_lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need lr > min_lr > 0, got lr {} and min_lr {}",
                self.lr, self.min_lr
            )));
        }
        self.validate_loop()?;
        if self.spec.method.uses_replay() && self.replay.is_none() {
            return Err(Error::InvalidArgument(format!(
                "{} needs an exemplar count per class",
                self.spec.method.name()
            )));
        }
        Ok(())
    }

    fn validate_loop(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be >= 1".into()));
        }
        if !(self.lr_factor > 1.0) {
            return Err(Error::InvalidArgument("lr decay factor must be > 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self, arch: &ArchSpec) -> String {
        let json = serde_json::to_string(&(arch, self)).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Something the training loop can descend.
pub trait Objective {
    fn value_and_grad(&self, w: &[f64], batch: &TaskDataset) -> Result<(f64, WeightVector)>;
    fn value(&self, w: &[f64], data: &TaskDataset) -> Result<f64>;
}

/// Task loss plus the regularizers selected by a [`LossSpec`].
pub struct Regularized<'a> {
    pub spec: LossSpec,
    pub arch: &'a ArchSpec,
    pub store: &'a CheckpointStore,
    pub ctx: LossContext,
}

impl Objective for Regularized<'_> {
    fn value_and_grad(&self, w: &[f64], batch: &TaskDataset) -> Result<(f64, WeightVector)> {
        let out = total_loss(&self.spec, self.arch, w, batch, self.store, self.ctx)?;
        Ok((out.loss, out.grad))
    }

    fn value(&self, w: &[f64], data: &TaskDataset) -> Result<f64> {
        loss_value(&self.spec, self.arch, w, data, self.store, self.ctx)
    }
}

/// Result of one training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub weights: WeightVector,
    pub epochs: usize,
    /// Validation loss of the returned weights.
    pub best_val_loss: f64,
    pub val_losses: Vec<f64>,
    pub val_accuracies: Vec<f64>,
    /// Learning rate used in each epoch.
    pub lr_trace: Vec<f64>,
}

/// Which independent random stream a training loop draws from. The
/// auxiliary network draws from the main stream, so it sees the same
/// minibatch order as the main network on its task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Main = 0,
    Multitask = 2,
}

fn stream_rng(seed: u64, task: usize, role: Role) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64 * 8 + role as u64);
    rng
}

/// Accuracy of a weight vector, used to log validation curves.
pub type AccuracyFn<'a> = &'a dyn Fn(&[f64]) -> Result<f64>;

/// Minibatch SGD with momentum. After every epoch the objective is
/// evaluated on `val`; after `patience` epochs without improvement the
/// learning rate is divided by `lr_factor`, the best weights so far are
/// restored and the velocity is cleared. Training stops when the learning
/// rate drops below `min_lr` or after `max_epochs`; the best weights are
/// returned.
pub fn train_loop(
    objective: &dyn Objective,
    w_init: &WeightVector,
    train: &TaskDataset,
    val: &TaskDataset,
    cfg: &TrainConfig,
    mut rng: ChaCha8Rng,
    accuracy: Option<AccuracyFn>,
) -> Result<TrainOutcome> {
    cfg.validate_loop()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut w = w_init.clone();
    let mut best = w.clone();
    let mut best_loss = objective.value(&w, val)?;
    let mut lr = cfg.lr;
    let mut state = OptimState::new(w.len(), lr.max(f64::MIN_POSITIVE), cfg.momentum)?;
    let mut stale = 0;
    let mut out = TrainOutcome {
        weights: w.clone(),
        epochs: 0,
        best_val_loss: best_loss,
        val_losses: Vec::new(),
        val_accuracies: Vec::new(),
        lr_trace: Vec::new(),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        if lr < cfg.min_lr {
            break;
        }
        state.lr = lr;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.subset(chunk);
            let (loss, grad) = objective.value_and_grad(&w, &batch)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFinite(format!("training loss {loss} in epoch {epoch}")));
            }
            sgd_step(&mut w, &grad, &mut state)?;
        }
        if !w.is_finite() {
            return Err(Error::NonFinite(format!("weights diverged in epoch {epoch} at lr {lr}")));
        }
        let val_loss = objective.value(&w, val)?;
        out.epochs += 1;
        out.lr_trace.push(lr);
        out.val_losses.push(val_loss);
        if let Some(acc) = accuracy {
            out.val_accuracies.push(acc(&w)?);
        }
        if val_loss < best_loss {
            best_loss = val_loss;
            best = w.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                lr /= cfg.lr_factor;
                stale = 0;
                w = best.clone();
                state.velocity.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    out.weights = best;
    out.best_val_loss = best_loss;
    Ok(out)
}

/// Readout policy for an architecture after task `t` (0-based).
pub fn policy_for(arch: &ArchSpec, seq: &TaskSequence, t: usize) -> HeadPolicy {
    match arch.head_mode {
        HeadMode::MultiHead => HeadPolicy::TaskAware,
        HeadMode::SingleHead => HeadPolicy::SingleHead { seen: seq.seen_classes(t) },
    }
}

fn context(arch: &ArchSpec, seq: &TaskSequence, t: usize) -> LossContext {
    LossContext { policy: policy_for(arch, seq, t), seen: seq.seen_classes(t) }
}

/// Cross-entropy-only training (`L_t` alone).
#[allow(clippy::too_many_arguments)]
pub fn train_plain(
    arch: &ArchSpec,
    w_init: &WeightVector,
    train: &TaskDataset,
    val: &TaskDataset,
    ctx: LossContext,
    cfg: &TrainConfig,
    rng: ChaCha8Rng,
) -> Result<TrainOutcome> {
    let store = CheckpointStore::new();
    let objective = Regularized { spec: LossSpec::finetune(cfg.spec.method), arch, store: &store, ctx };
    let acc = |w: &[f64]| evaluate(arch, w, val, ctx.policy);
    train_loop(&objective, w_init, train, val, cfg, rng, Some(&acc))
}

fn importance(
    source: ImportanceSource,
    arch: &ArchSpec,
    w: &[f64],
    data: &TaskDataset,
    policy: HeadPolicy,
) -> Result<ImportanceMap> {
    match source {
        ImportanceSource::Fisher => fisher_diag(arch, w, data, policy),
        ImportanceSource::Mas => mas_importance(arch, w, data, policy),
    }
}

/// Parameters violating `0 <= 1 - η(λF_old + λ_a F_aux) < 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub offending: Vec<usize>,
    /// Largest `η(λF_old + λ_a F_aux)` over all parameters.
    pub max_coefficient: f64,
}

impl StabilityReport {
    pub fn is_clean(&self) -> bool {
        self.offending.is_empty()
    }
}

/// Scans the effective step coefficients of the quadratic penalties.
/// Parameters with zero total importance sit exactly at the boundary and
/// are not reported.
pub fn stability_guard(
    eta: f64,
    lambda: f64,
    lambda_a: f64,
    imp_old: &ImportanceMap,
    imp_aux: Option<&ImportanceMap>,
) -> Result<StabilityReport> {
    if let Some(aux) = imp_aux {
        check_len("stability importance", imp_old.len(), aux.len())?;
    }
    let mut offending = Vec::new();
    let mut max_coefficient = 0.0f64;
    for i in 0..imp_old.len() {
        let aux = imp_aux.map_or(0.0, |m| m.values[i]);
        let c = eta * (lambda * imp_old.values[i] + lambda_a * aux);
        max_coefficient = max_coefficient.max(c);
        let r = 1.0 - c;
        if !(r >= 0.0 && (r < 1.0 || c == 0.0)) {
            offending.push(i);
        }
    }
    Ok(StabilityReport { offending, max_coefficient })
}

/// Everything recorded for one pass over a task sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    /// Test accuracy `A[j][k]`.
    pub matrix: AccuracyMatrix,
    /// Validation accuracy with the same layout, used for model selection.
    pub val_matrix: AccuracyMatrix,
    pub aac: f64,
    pub val_aac: f64,
    /// Test accuracy on all classes seen so far, after each task.
    pub phase_accuracies: Vec<f64>,
    pub aiac: f64,
    /// Validation loss of the kept main weights, per task.
    pub task_losses: Vec<f64>,
    /// Per-epoch validation accuracy of the main network, per task.
    pub val_accuracies: Vec<Vec<f64>>,
    pub epochs: Vec<usize>,
    pub aux_epochs: Vec<usize>,
    /// Stability warnings from the quadratic penalties, `(task, report)`.
    pub stability: Vec<(usize, StabilityReport)>,
}

/// Final state of a sequence run besides its record.
#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub record: RunRecord,
    pub weights: WeightVector,
    pub store: CheckpointStore,
}

pub fn run_sequence(arch: &ArchSpec, seq: &TaskSequence, cfg: &TrainConfig) -> Result<RunRecord> {
    Ok(run_sequence_full(arch, seq, cfg)?.record)
}

/// Trains task by task. The first task uses the task loss alone. Every
/// later task regularizes toward the frozen old network; in auxiliary mode
/// a copy of the old network is first trained on the current task alone,
/// frozen, and used as a second reference.
pub fn run_sequence_full(arch: &ArchSpec, seq: &TaskSequence, cfg: &TrainConfig) -> Result<SequenceRun> {
    cfg.validate()?;
    arch.validate()?;
    if seq.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if arch.input_dim != seq.dim || arch.total_classes() < seq.total_classes() {
        return Err(Error::InvalidArgument(format!(
            "architecture ({} inputs, {} outputs) does not fit the sequence ({} inputs, {} classes)",
            arch.input_dim,
            arch.total_classes(),
            seq.dim,
            seq.total_classes()
        )));
    }
    let method = cfg.spec.method;
    let source = method.importance_source();
    let n = seq.len();
    let mut w = init_weights(arch, cfg.seed);
    let mut store = CheckpointStore::new();
    let mut buffer = match (method.uses_replay(), cfg.replay) {
        (true, Some(m)) => Some(MemoryBuffer::new(m, seq.dim)?),
        _ => None,
    };
    let mut record = RunRecord {
        config_hash: cfg.hash(arch),
        seed: cfg.seed,
        matrix: AccuracyMatrix::new(n),
        val_matrix: AccuracyMatrix::new(n),
        aac: 0.0,
        val_aac: 0.0,
        phase_accuracies: Vec::new(),
        aiac: 0.0,
        task_losses: Vec::new(),
        val_accuracies: Vec::new(),
        epochs: Vec::new(),
        aux_epochs: Vec::new(),
        stability: Vec::new(),
    };

    for t in 0..n {
        let ctx = context(arch, seq, t);
        let task = &seq.tasks[t];
        let train = match &buffer {
            Some(b) => combine(&task.train, b)?,
            None => task.train.clone(),
        };

        let outcome = if t == 0 {
            train_plain(arch, &w, &train, &task.val, ctx, cfg, stream_rng(cfg.seed, t, Role::Main))?
        } else {
            if cfg.spec.mode == Mode::Ancl {
                let aux = train_plain(arch, &w, &task.train, &task.val, ctx, cfg, stream_rng(cfg.seed, t, Role::Main))?;
                let aux_imp = match source {
                    Some(s) => Some(importance(s, arch, &aux.weights, &task.train, ctx.policy)?),
                    None => None,
                };
                store.freeze_aux(&aux.weights, aux_imp);
                record.aux_epochs.push(aux.epochs);
            }
            if let (Some(old_imp), true) = (store.old_importance(), cfg.spec.effective_lambda() > 0.0) {
                let lambda_a = cfg.spec.effective_lambda_a();
                let rep = stability_guard(
                    cfg.lr,
                    cfg.spec.effective_lambda(),
                    lambda_a,
                    old_imp,
                    store.aux_importance().filter(|_| lambda_a > 0.0),
                )?;
                if !rep.is_clean() {
                    record.stability.push((t, rep));
                }
            }
            let objective = Regularized { spec: cfg.spec, arch, store: &store, ctx };
            let acc = |w: &[f64]| evaluate(arch, w, &task.val, ctx.policy);
            train_loop(&objective, &w, &train, &task.val, cfg, stream_rng(cfg.seed, t, Role::Main), Some(&acc))?
        };
        w = outcome.weights;
        record.task_losses.push(outcome.best_val_loss);
        record.val_accuracies.push(outcome.val_accuracies);
        record.epochs.push(outcome.epochs);

        if let Some(s) = source {
            let fresh = importance(s, arch, &w, &task.train, ctx.policy)?;
            let merged = match store.old_importance() {
                Some(prev) => accumulate(prev, &fresh, t + 1)?,
                None => fresh,
            };
            store.set_old_importance(merged);
        }
        store.freeze_old(&w);
        store.clear_aux();
        if let Some(b) = buffer.as_mut() {
            b.add_classes(arch, &w, &task.train)?;
            store.set_buffer(b.clone());
        }

        let policy = ctx.policy;
        let score = |data: &TaskDataset| match &buffer {
            Some(b) => evaluate_nme(arch, &w, b, data),
            None => evaluate(arch, &w, data, policy),
        };
        for k in 0..=t {
            record.matrix.set(t, k, score(&seq.tasks[k].test)?);
            record.val_matrix.set(t, k, score(&seq.tasks[k].val)?);
        }
        record.phase_accuracies.push(score(&seq.joint(t, Split::Test)?)?);
    }
    record.aac = aac(&record.matrix)?;
    record.val_aac = aac(&record.val_matrix)?;
    record.aiac = aiac(&record.phase_accuracies)?;
    Ok(SequenceRun { record, weights: w, store })
}

/// Weight sets for the stability/plasticity analyses at task `t` (0-based,
/// `t >= 1`). Every branch starts from the multitask solution of tasks
/// `0..t`, which also plays the role of the old network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisWeights {
    pub t: usize,
    pub multi_prev: WeightVector,
    pub aux: WeightVector,
    pub cl: WeightVector,
    /// `(λ_a, weights)` in grid order.
    pub ancl: Vec<(f64, WeightVector)>,
    pub multi: WeightVector,
    pub old_importance: Option<ImportanceMap>,
    pub aux_importance: Option<ImportanceMap>,
}

impl AnalysisWeights {
    /// Packs the networks as `old`, `aux`, `cl`, `multi` and `ancl_<i>`
    /// weights, with `t` and the λ_a grid stored as values.
    pub fn to_checkpoint(&self, arch: &ArchSpec) -> CheckpointFile {
        let mut f = CheckpointFile::new(arch.clone());
        for (name, w) in [("old", &self.multi_prev), ("aux", &self.aux), ("cl", &self.cl), ("multi", &self.multi)] {
            f.weights.insert(name.into(), w.clone());
        }
        for (i, (_, w)) in self.ancl.iter().enumerate() {
            f.weights.insert(format!("ancl_{i}"), w.clone());
        }
        if let Some(m) = &self.old_importance {
            f.importances.insert("old".into(), m.clone());
        }
        if let Some(m) = &self.aux_importance {
            f.importances.insert("aux".into(), m.clone());
        }
        f.values.insert("t".into(), vec![self.t as f64]);
        f.values.insert("lambda_a".into(), self.ancl.iter().map(|(la, _)| *la).collect());
        f
    }

    pub fn from_checkpoint(f: &CheckpointFile) -> Result<Self> {
        f.validate()?;
        let value = |name: &str| {
            f.values.get(name).ok_or_else(|| Error::Format(format!("analysis checkpoint has no value {name:?}")))
        };
        let t = match value("t")?.as_slice() {
            [t] if *t >= 1.0 && t.fract() == 0.0 => *t as usize,
            other => return Err(Error::Format(format!("bad analysis task {other:?}"))),
        };
        let ancl = value("lambda_a")?
            .iter()
            .enumerate()
            .map(|(i, &la)| Ok((la, f.weight(&format!("ancl_{i}"))?.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(AnalysisWeights {
            t,
            multi_prev: f.weight("old")?.clone(),
            aux: f.weight("aux")?.clone(),
            cl: f.weight("cl")?.clone(),
            ancl,
            multi: f.weight("multi")?.clone(),
            old_importance: f.importances.get("old").cloned(),
            aux_importance: f.importances.get("aux").cloned(),
        })
    }
}

pub fn analysis_regime(
    arch: &ArchSpec,
    seq: &TaskSequence,
    t: usize,
    cfg: &TrainConfig,
    lambda_a_grid: &[f64],
) -> Result<AnalysisWeights> {
    cfg.validate()?;
    if t == 0 || t >= seq.len() {
        return Err(Error::InvalidArgument(format!("analysis task must lie in 1..{}, got {t}", seq.len())));
    }
    let source = cfg.spec.method.importance_source();
    let prev_ctx = context(arch, seq, t - 1);
    let ctx = context(arch, seq, t);
    let task = &seq.tasks[t];

    let init = init_weights(arch, cfg.seed);
    let multi_prev = train_plain(
        arch,
        &init,
        &seq.joint(t - 1, Split::Train)?,
        &seq.joint(t - 1, Split::Val)?,
        prev_ctx,
        cfg,
        stream_rng(cfg.seed, t - 1, Role::Multitask),
    )?
    .weights;

    let mut store = CheckpointStore::new();
    store.freeze_old(&multi_prev);
    let old_importance = match source {
        Some(s) => Some(importance(s, arch, &multi_prev, &seq.joint(t - 1, Split::Train)?, prev_ctx.policy)?),
        None => None,
    };
    if let Some(m) = &old_importance {
        store.set_old_importance(m.clone());
    }

    let aux =
        train_plain(arch, &multi_prev, &task.train, &task.val, ctx, cfg, stream_rng(cfg.seed, t, Role::Main))?.weights;
    let aux_importance = match source {
        Some(s) => Some(importance(s, arch, &aux, &task.train, ctx.policy)?),
        None => None,
    };
    store.freeze_aux(&aux, aux_importance.clone());

    let branch = |spec: LossSpec| -> Result<WeightVector> {
        let objective = Regularized { spec, arch, store: &store, ctx };
        let out = train_loop(
            &objective,
            &multi_prev,
            &task.train,
            &task.val,
            cfg,
            stream_rng(cfg.seed, t, Role::Main),
            None,
        )?;
        Ok(out.weights)
    };
    let method = cfg.spec.method;
    let lambda = cfg.spec.lambda;
    let cl = branch(LossSpec { tau: cfg.spec.tau, ..LossSpec::cl(method, lambda) })?;
    let ancl = lambda_a_grid
        .par_iter()
        .map(|&la| {
            let w = branch(LossSpec { tau: cfg.spec.tau, ..LossSpec::ancl(method, lambda, la) })?;
            Ok((la, w))
        })
        .collect::<Result<Vec<_>>>()?;

    let multi = train_plain(
        arch,
        &multi_prev,
        &seq.joint(t, Split::Train)?,
        &seq.joint(t, Split::Val)?,
        ctx,
        cfg,
        stream_rng(cfg.seed, t, Role::Multitask),
    )?
    .weights;

    Ok(AnalysisWeights { t, multi_prev, aux, cl, ancl, multi, old_importance, aux_importance })
}

/// Outcome of the two-phase search: λ under the classic objective, then
/// λ_a under the auxiliary objective with λ fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub lambda: f64,
    pub lambda_a: f64,
    /// `(λ, mean validation AAC)`; NaN marks a diverged cell.
    pub cl_scores: Vec<(f64, f64)>,
    /// `(λ_a, mean validation AAC)`.
    pub ancl_scores: Vec<(f64, f64)>,
}

/// Mean validation AAC over `seeds`.
pub fn validation_score(
    arch: &ArchSpec,
    seq_for: &(dyn Fn(u64) -> Result<TaskSequence> + Sync),
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<f64> {
    let scores = seeds
        .par_iter()
        .map(|&s| {
            let seq = seq_for(s)?;
            let cfg = TrainConfig { seed: s, ..cfg.clone() };
            Ok(run_sequence(arch, &seq, &cfg)?.val_aac)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Maps a diverged run to a NaN score so a search can skip the cell.
fn diverged_as_nan(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::NonFinite(_)) => Ok(f64::NAN),
        other => other,
    }
}

/// Picks the best value of a grid; ties go to the smaller value and NaN
/// (diverged) scores never win.
pub fn select_best(scores: &[(f64, f64)]) -> Option<(f64, f64)> {
    let mut sorted: Vec<(f64, f64)> = scores.iter().copied().filter(|(_, s)| !s.is_nan()).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(f64, f64)> = None;
    for (v, s) in sorted {
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((v, s));
        }
    }
    best
}

fn all_diverged() -> Error {
    Error::NonFinite("every grid point diverged".into())
}

/// Two-phase search. `seq_for(seed)` builds the sequence for a seed so the
/// data can vary with it.
pub fn grid_search(
    arch: &ArchSpec,
    seq_for: &(dyn Fn(u64) -> Result<TaskSequence> + Sync),
    cfg: &TrainConfig,
    lambdas: &[f64],
    lambda_as: &[f64],
    seeds: &[u64],
) -> Result<GridResult> {
    if lambdas.is_empty() || lambda_as.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("grid search needs nonempty grids and seeds".into()));
    }
    let method = cfg.spec.method;
    let tau = cfg.spec.tau;
    let cl_scores = lambdas
        .iter()
        .map(|&l| {
            let cfg = TrainConfig { spec: LossSpec { tau, ..LossSpec::cl(method, l) }, ..cfg.clone() };
            Ok((l, diverged_as_nan(validation_score(arch, seq_for, &cfg, seeds))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (lambda, _) = select_best(&cl_scores).ok_or_else(all_diverged)?;
    let ancl_scores = lambda_as
        .iter()
        .map(|&la| {
            let cfg = TrainConfig { spec: LossSpec { tau, ..LossSpec::ancl(method, lambda, la) }, ..cfg.clone() };
            Ok((la, diverged_as_nan(validation_score(arch, seq_for, &cfg, seeds))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (lambda_a, _) = select_best(&ancl_scores).ok_or_else(all_diverged)?;
    Ok(GridResult { lambda, lambda_a, cl_scores, ancl_scores })
}

/// Picks λ for an analysis at task `t` by the classic objective alone:
/// the CL branch of [`analysis_regime`] is scored by its mean validation
/// accuracy over tasks `0..=t`, averaged over `seeds`. Returns the chosen
/// λ and every `(λ, score)`.
pub fn analysis_lambda_search(
    arch: &ArchSpec,
    seq_for: &(dyn Fn(u64) -> Result<TaskSequence> + Sync),
    t: usize,
    cfg: &TrainConfig,
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("lambda search needs a nonempty grid and seeds".into()));
    }
    let tau = cfg.spec.tau;
    let scores = lambdas
        .iter()
        .map(|&l| {
            let per_seed = || {
                seeds
                    .par_iter()
                    .map(|&s| {
                        let seq = seq_for(s)?;
                        let cfg = TrainConfig {
                            spec: LossSpec { tau, ..LossSpec::cl(cfg.spec.method, l) },
                            seed: s,
                            ..cfg.clone()
                        };
                        let aw = analysis_regime(arch, &seq, t, &cfg, &[])?;
                        let policy = policy_for(arch, &seq, t);
                        let mut acc = 0.0;
                        for k in 0..=t {
                            acc += evaluate(arch, &aw.cl, &seq.tasks[k].val, policy)?;
                        }
                        Ok(acc / (t + 1) as f64)
                    })
                    .collect::<Result<Vec<f64>>>()
                    .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            };
            Ok((l, diverged_as_nan(per_seed())?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (lambda, _) = select_best(&scores).ok_or_else(all_diverged)?;
    Ok((lambda, scores))
}

/// How the λ_a sweep of an analysis is laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisPlan {
    /// Task under study, `>= 1`.
    pub t: usize,
    /// Candidate λ values; empty keeps the configured λ.
    pub lambdas: Vec<f64>,
    pub lambda_a_grid: Vec<f64>,
    /// Read `lambda_a_grid` as multiples of the chosen λ.
    pub relative: bool,
}

/// Chosen λ, the resulting λ_a grid and the `(λ, score)` pairs searched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedAnalysis {
    pub lambda: f64,
    pub lambda_a_grid: Vec<f64>,
    /// Candidates that kept the whole sweep inside the stability condition.
    pub admissible: Vec<f64>,
    pub scores: Vec<(f64, f64)>,
}

impl AnalysisPlan {
    fn grid_for(&self, lambda: f64) -> Vec<f64> {
        let scale = if self.relative { lambda } else { 1.0 };
        self.lambda_a_grid.iter().map(|r| r * scale).collect()
    }
}

/// Resolves λ for an analysis. For the quadratic penalties a candidate λ
/// is admissible only if its largest λ_a keeps
/// `η(λF_old + λ_a F_aux) <= 1` on every seed; the importances do not
/// depend on λ, so they are computed once per seed. The admissible
/// candidates are then ranked by [`analysis_lambda_search`].
pub fn plan_analysis(
    arch: &ArchSpec,
    seq_for: &(dyn Fn(u64) -> Result<TaskSequence> + Sync),
    cfg: &TrainConfig,
    plan: &AnalysisPlan,
    seeds: &[u64],
) -> Result<PlannedAnalysis> {
    if plan.lambda_a_grid.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("analysis needs a nonempty λ_a grid and seeds".into()));
    }
    if plan.lambdas.is_empty() {
        return Ok(PlannedAnalysis {
            lambda: cfg.spec.lambda,
            lambda_a_grid: plan.grid_for(cfg.spec.lambda),
            admissible: vec![cfg.spec.lambda],
            scores: vec![],
        });
    }
    let mut admissible = plan.lambdas.clone();
    if cfg.spec.method.importance_source().is_some() {
        let maps = seeds
            .par_iter()
            .map(|&s| {
                let cfg = TrainConfig { seed: s, ..cfg.clone() };
                let aw = analysis_regime(arch, &seq_for(s)?, plan.t, &cfg, &[])?;
                Ok((aw.old_importance.expect("penalty method"), aw.aux_importance.expect("penalty method")))
            })
            .collect::<Result<Vec<_>>>()?;
        admissible.retain(|&l| {
            let top = plan.grid_for(l).into_iter().fold(0.0, f64::max);
            maps.iter()
                .all(|(o, a)| stability_guard(cfg.lr, l, top, o, Some(a)).is_ok_and(|r| r.max_coefficient <= 1.0))
        });
        if admissible.is_empty() {
            return Err(Error::InvalidArgument(
                "no candidate λ keeps the λ_a sweep inside the stability condition".into(),
            ));
        }
    }
    let (lambda, scores) = analysis_lambda_search(arch, seq_for, plan.t, cfg, &admissible, seeds)?;
    Ok(PlannedAnalysis { lambda, lambda_a_grid: plan.grid_for(lambda), admissible, scores })
}
