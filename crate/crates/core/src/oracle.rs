//! Closed-form checks for quadratic-regularizer dynamics and the
//! distillation gradient identities.
//!
//! With `α = ηλF_old` and `β = ηλ_a F_aux` per coordinate, one gradient step
//! on two quadratic penalties is the affine map
//! `θ ← (1-α-β)θ + αθ_old + βθ_aux - ηg`, so its iterates, its fixed point and
//! its stability condition all have explicit forms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::CheckpointStore;
use crate::error::{check_len, Error, Result};
use crate::importance::{ImportanceMap, ImportanceSource};
use crate::losses::{lfl_penalty, lwf_kd, quad_penalty, total_loss, LossContext, LossSpec, MethodId};
use crate::nn::{backward, center_normalize, cross_entropy, forward, init_weights, softmax_temp, ArchSpec, Head};
use crate::tasks::{make_blob_sequence, BlobParams, HeadPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadDynSpec {
    pub theta0: Vec<f64>,
    pub theta_old: Vec<f64>,
    pub theta_aux: Vec<f64>,
    pub f_old: Vec<f64>,
    pub f_aux: Vec<f64>,
    pub lambda: f64,
    pub lambda_a: f64,
    pub eta: f64,
    /// Task gradient per iteration; empty means zero throughout.
    pub g_seq: Vec<Vec<f64>>,
    pub k: usize,
}

impl QuadDynSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.theta0.len();
        check_len("theta_old", n, self.theta_old.len())?;
        check_len("theta_aux", n, self.theta_aux.len())?;
        check_len("F_old", n, self.f_old.len())?;
        check_len("F_aux", n, self.f_aux.len())?;
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.f_old.iter().chain(&self.f_aux).any(|&f| !(f >= 0.0)) {
            return Err(Error::InvalidArgument("importances must be >= 0".into()));
        }
        if !self.g_seq.is_empty() {
            if self.g_seq.len() < self.k {
                return Err(Error::InvalidArgument(format!(
                    "{} task gradients for {} iterations",
                    self.g_seq.len(),
                    self.k
                )));
            }
            for g in &self.g_seq {
                check_len("task gradient", n, g.len())?;
            }
        }
        Ok(())
    }

    fn g(&self, l: usize, i: usize) -> f64 {
        self.g_seq.get(l).map_or(0.0, |g| g[i])
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.f_old.iter().map(|f| self.eta * self.lambda * f).collect()
    }

    pub fn beta(&self) -> Vec<f64> {
        self.f_aux.iter().map(|f| self.eta * self.lambda_a * f).collect()
    }

    /// Random spec whose per-coordinate contraction `1-α-β` lies in `[0, 1)`.
    pub fn random(rng: &mut impl Rng, dim: usize, k: usize, with_task_grad: bool) -> Self {
        let mut v = |lo: f64, hi: f64| (0..dim).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let theta_old = v(-2.0, 2.0);
        let theta_aux = v(-2.0, 2.0);
        let f_old = v(0.0, 1.0);
        let f_aux = v(0.0, 1.0);
        let g_seq = if with_task_grad { (0..k).map(|_| v(-1.0, 1.0)).collect() } else { Vec::new() };
        let lambda = rng.random_range(0.0..4.5);
        let lambda_a = rng.random_range(0.0..4.5);
        QuadDynSpec {
            theta0: theta_old.clone(),
            theta_old,
            theta_aux,
            f_old,
            f_aux,
            lambda,
            lambda_a,
            eta: 0.1,
            g_seq,
            k,
        }
    }
}

/// Applies the update rule `k` times, using the library's quadratic-penalty
/// gradient for both regularizers.
pub fn simulate_updates(spec: &QuadDynSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let imp =
        |values: &[f64]| ImportanceMap { values: values.to_vec(), source: ImportanceSource::Fisher, tasks_covered: 1 };
    let (imp_old, imp_aux) = (imp(&spec.f_old), imp(&spec.f_aux));
    let mut theta = spec.theta0.clone();
    for l in 0..spec.k {
        let (_, g_old) = quad_penalty(&theta, &spec.theta_old, &imp_old, spec.lambda)?;
        let (_, g_aux) = quad_penalty(&theta, &spec.theta_aux, &imp_aux, spec.lambda_a)?;
        for i in 0..theta.len() {
            theta[i] -= spec.eta * (spec.g(l, i) + g_old[i] + g_aux[i]);
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("iterate {} diverged", l + 1)));
        }
    }
    Ok(theta)
}

/// Evaluates the unrolled recursion
/// `r^k θ0 + Σ_l r^l (αθ_old + βθ_aux) - Σ_l r^(k-l-1) η g^(l)` with `r = 1-α-β`.
pub fn closed_form_iterate(spec: &QuadDynSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let (alpha, beta) = (spec.alpha(), spec.beta());
    let k = spec.k as i32;
    Ok((0..spec.theta0.len())
        .map(|i| {
            let r = 1.0 - alpha[i] - beta[i];
            let pull = alpha[i] * spec.theta_old[i] + beta[i] * spec.theta_aux[i];
            let geometric: f64 = (0..k).map(|l| r.powi(l)).sum();
            let task: f64 = (0..k).map(|l| r.powi(k - l - 1) * spec.eta * spec.g(l as usize, i)).sum();
            r.powi(k) * spec.theta0[i] + geometric * pull - task
        })
        .collect())
}

/// Limit of the zero-task-gradient dynamics: `(αθ_old + βθ_aux)/(α+β)`.
/// Coordinates with `α+β = 0` never move and stay at `θ_old`.
pub fn fixed_point(spec: &QuadDynSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.g_seq.iter().flatten().any(|&g| g != 0.0) {
        return Err(Error::InvalidArgument("fixed point requires a zero task gradient".into()));
    }
    let (alpha, beta) = (spec.alpha(), spec.beta());
    let unstable: Vec<usize> = (0..alpha.len())
        .filter(|&i| {
            let s = alpha[i] + beta[i];
            let r = 1.0 - s;
            !(r >= 0.0 && (r < 1.0 || s == 0.0))
        })
        .collect();
    if !unstable.is_empty() {
        return Err(Error::Unstable { count: unstable.len(), first: unstable.into_iter().take(8).collect() });
    }
    Ok((0..alpha.len())
        .map(|i| {
            let s = alpha[i] + beta[i];
            if s == 0.0 {
                spec.theta_old[i]
            } else {
                (alpha[i] * spec.theta_old[i] + beta[i] * spec.theta_aux[i]) / s
            }
        })
        .collect())
}

/// Largest per-coordinate relative error between `analytic` and central
/// differences of `f`, with denominator `max(|a|, |n|, 1e-8)`.
pub fn fd_gradcheck<F: FnMut(&[f64]) -> f64>(mut f: F, w: &[f64], analytic: &[f64], eps: f64) -> f64 {
    assert!(eps > 0.0, "step must be positive");
    assert_eq!(w.len(), analytic.len(), "gradient length");
    let mut probe = w.to_vec();
    let mut worst = 0.0f64;
    for i in 0..w.len() {
        probe[i] = w[i] + eps;
        let up = f(&probe);
        probe[i] = w[i] - eps;
        let down = f(&probe);
        probe[i] = w[i];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn within(name: &str, dev: f64, tol: f64) -> Self {
        CheckResult {
            name: name.into(),
            max_deviation: dev,
            tolerance: tol,
            passed: dev.is_finite() && dev <= tol,
            detail: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<40} {:>12} {:>10}  result\n", "check", "max dev", "tol");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<40} {:>12.3e} {:>10.1e}  {}{}\n",
                c.name,
                c.max_deviation,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" },
                if c.detail.is_empty() { String::new() } else { format!(" ({})", c.detail) }
            ));
        }
        out
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// KD logit gradient through the explicit softmax Jacobian:
/// `∂L/∂o_h = Σ_c (-y_t^c / y^c) · (1/τ) y^c (δ_ch - y^h)`.
fn kd_grad_by_jacobian(main: &[f64], teacher: &[f64], tau: f64) -> Vec<f64> {
    let y = softmax_temp(main, tau).expect("tau > 0");
    let yt = softmax_temp(teacher, tau).expect("tau > 0");
    (0..main.len())
        .map(|h| {
            (0..main.len())
                .map(|c| {
                    let delta = if c == h { 1.0 } else { 0.0 };
                    let dy = y[c] * (delta - y[h]) / tau;
                    -yt[c] / y[c] * dy
                })
                .sum()
        })
        .collect()
}

fn centered(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

/// Discrepancy between the two-teacher LwF logit gradient and its
/// large-temperature form `(λ+λ_a)/(Cτ²) (o - (λo_old + λ_a o_aux)/(λ+λ_a))`,
/// all logits made zero-mean first.
pub fn large_tau_discrepancy(o: &[f64], o_old: &[f64], o_aux: &[f64], lambda: f64, lambda_a: f64, tau: f64) -> f64 {
    let (o, o_old, o_aux) = (centered(o), centered(o_old), centered(o_aux));
    let (_, g_old) = lwf_kd(&o, &o_old, tau, lambda).expect("lengths match");
    let (_, g_aux) = lwf_kd(&o, &o_aux, tau, lambda_a).expect("lengths match");
    let c = o.len() as f64;
    let s = lambda + lambda_a;
    let scale = s / (c * tau * tau);
    (0..o.len())
        .map(|h| {
            let target = (lambda * o_old[h] + lambda_a * o_aux[h]) / s;
            let d = g_old[h] + g_aux[h] - scale * (o[h] - target);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub const TAU_GRID: [f64; 4] = [5.0, 10.0, 20.0, 50.0];

/// Checks the distillation gradient identities on random logits and small
/// networks: the KD logit gradient against an explicit Jacobian route, the
/// two-target feature-distillation gradient against its single interpolated
/// target, and the large-temperature limit of two-teacher distillation.
pub fn verify_gradient_identities(seed: u64) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let mut kd_dev = 0.0f64;
    for _ in 0..50 {
        let c = rng.random_range(2..8);
        let tau = rng.random_range(0.5..8.0);
        let main = random_vec(&mut rng, c, 3.0);
        let teacher = random_vec(&mut rng, c, 3.0);
        let (_, g) = lwf_kd(&main, &teacher, tau, 1.0).expect("lengths match");
        kd_dev = kd_dev.max(max_abs_diff(&g, &kd_grad_by_jacobian(&main, &teacher, tau)));
        let (_, g_same) = lwf_kd(&main, &main, tau, 1.0).expect("lengths match");
        kd_dev = kd_dev.max(g_same.iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    checks.push(CheckResult::within("kd logit gradient identity", kd_dev, 1e-10));

    let mut lfl_dev = 0.0f64;
    for net in 0..10 {
        lfl_dev = lfl_dev.max(interpolated_feature_target_dev(seed.wrapping_add(net), &mut rng));
    }
    checks.push(CheckResult::within("feature distillation interpolated target", lfl_dev, 1e-12));

    let mut worst_ratio = 0.0f64;
    let mut monotone = true;
    for _ in 0..20 {
        let c = rng.random_range(2..10);
        let o = random_vec(&mut rng, c, 2.0);
        let o_old = random_vec(&mut rng, c, 2.0);
        let o_aux = random_vec(&mut rng, c, 2.0);
        let lambda = rng.random_range(0.1..3.0);
        let lambda_a = rng.random_range(0.1..3.0);
        let d: Vec<f64> =
            TAU_GRID.iter().map(|&t| large_tau_discrepancy(&o, &o_old, &o_aux, lambda, lambda_a, t)).collect();
        for w in d.windows(2) {
            if !(w[1] < w[0]) {
                monotone = false;
            }
            worst_ratio = worst_ratio.max(w[1] / w[0]);
        }
    }
    let mut large_tau = CheckResult::within("large-temperature distillation limit", worst_ratio, 1.0);
    large_tau.passed = monotone && worst_ratio < 1.0;
    large_tau.detail = "max ratio of consecutive discrepancies".into();
    checks.push(large_tau);

    VerifyReport { checks }
}

/// Max deviation between the two-teacher feature-distillation weight
/// gradient and CE plus backprop of `2(λ+λ_a)(f - (λf_old + λ_a f_aux)/(λ+λ_a))`.
fn interpolated_feature_target_dev(net_seed: u64, rng: &mut ChaCha8Rng) -> f64 {
    let arch = ArchSpec::multi_head(4, vec![6, 5], vec![2, 2]);
    let w = init_weights(&arch, net_seed);
    let mut store = CheckpointStore::new();
    store.freeze_old(&init_weights(&arch, net_seed + 1000));
    store.freeze_aux(&init_weights(&arch, net_seed + 2000), None);
    let lambda = rng.random_range(0.1..2.0);
    let lambda_a = if net_seed.is_multiple_of(5) { 0.0 } else { rng.random_range(0.1..2.0) };
    let seq = make_blob_sequence(&BlobParams {
        tasks: 2,
        classes_per_task: 2,
        per_class: 4,
        dim: 4,
        spread: 1.0,
        seed: net_seed,
    })
    .expect("valid blob parameters");
    let data = seq.tasks[1].train.clone();
    let ctx = LossContext { policy: HeadPolicy::TaskAware, seen: 4 };
    let spec = LossSpec::ancl(MethodId::Lfl, lambda, lambda_a);
    let composite = match total_loss(&spec, &arch, &w, &data, &store, ctx) {
        Ok(out) => out.grad,
        Err(_) => return f64::INFINITY,
    };

    let n = data.len() as f64;
    let s = lambda + lambda_a;
    let mut grad = vec![0.0; arch.param_count()];
    for i in 0..data.len() {
        let x = data.row(i);
        let (head, label) = ctx.policy.resolve(&arch, data.labels[i], data.tasks[i]).expect("label in range");
        let Head::Task(k) = head else { unreachable!() };
        let range = arch.head_range(k);
        let trace = forward(&arch, &w, x, Head::Prefix(4)).expect("shapes match");
        let (_, d_ce) = cross_entropy(&trace.logits[range.clone()], label).expect("label in range");
        let mut dlogits = vec![0.0; trace.logits.len()];
        for (d, g) in dlogits[range].iter_mut().zip(&d_ce) {
            *d = g / n;
        }
        let f = center_normalize(trace.features()).expect("finite features");
        let teacher = |wr: &[f64]| {
            let t = forward(&arch, wr, x, Head::Prefix(1)).expect("shapes match");
            center_normalize(t.features()).expect("finite features").values
        };
        let f_old = teacher(store.old_weights().expect("frozen"));
        let f_aux = teacher(store.aux_weights().expect("frozen"));
        let target: Vec<f64> = f_old.iter().zip(&f_aux).map(|(a, b)| (lambda * a + lambda_a * b) / s).collect();
        let (_, df) = lfl_penalty(&f.values, &target, s).expect("lengths match");
        let df: Vec<f64> = df.iter().map(|g| g / n).collect();
        backward(&arch, &w, &trace, &dlogits, Some(&f.backward(&df)), &mut grad).expect("shapes match");
    }
    max_abs_diff(&composite, &grad)
}

/// Every check the `verify` front-end reports: iterate equivalence, the
/// fixed point, finite-difference validation of each loss, and the
/// gradient identities.
pub fn full_report(seed: u64) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let mut dev = 0.0f64;
    for s in 0..100 {
        let k = rng.random_range(0..=200);
        let spec = QuadDynSpec::random(&mut rng, 5, k, s % 2 == 0);
        dev = dev.max(match (simulate_updates(&spec), closed_form_iterate(&spec)) {
            (Ok(a), Ok(b)) => max_abs_diff(&a, &b),
            _ => f64::INFINITY,
        });
    }
    checks.push(CheckResult::within("iterates: simulation vs closed form", dev, 1e-9));

    let mut dev = 0.0f64;
    for _ in 0..20 {
        let mut spec = QuadDynSpec::random(&mut rng, 5, 5000, false);
        // keep contraction away from 1 so 5000 steps converge
        spec.f_old.iter_mut().chain(spec.f_aux.iter_mut()).for_each(|f| *f = 0.2 + 0.8 * *f);
        spec.lambda = spec.lambda.max(0.5);
        dev = dev.max(match (simulate_updates(&spec), fixed_point(&spec)) {
            (Ok(a), Ok(b)) => max_abs_diff(&a, &b),
            _ => f64::INFINITY,
        });
    }
    checks.push(CheckResult::within("fixed point: 5000-step limit", dev, 1e-6));

    let mut dev = 0.0f64;
    for _ in 0..20 {
        let mut spec = QuadDynSpec::random(&mut rng, 5, 0, false);
        spec.f_aux = spec.f_old.clone();
        spec.lambda_a = spec.lambda;
        let mid: Vec<f64> = spec.theta_old.iter().zip(&spec.theta_aux).map(|(a, b)| (a + b) / 2.0).collect();
        dev = dev.max(fixed_point(&spec).map_or(f64::INFINITY, |p| max_abs_diff(&p, &mid)));
    }
    checks.push(CheckResult::within("fixed point: equal pulls give midpoint", dev, 1e-9));

    checks.extend(loss_gradchecks(seed));
    checks.extend(verify_gradient_identities(seed).checks);
    VerifyReport { checks }
}

/// Finite-difference validation of every objective on random small nets.
pub fn loss_gradchecks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut worst = std::collections::BTreeMap::<String, f64>::new();
    let mut record = |name: String, err: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(err);
    };

    for net in 0..10u64 {
        let s = seed.wrapping_mul(31).wrapping_add(net);
        let hidden = vec![rng.random_range(3..7), rng.random_range(3..6)];
        let arch = ArchSpec::multi_head(3, hidden, vec![2, 2]);
        let w = init_weights(&arch, s);
        let seq = make_blob_sequence(&BlobParams {
            tasks: 2,
            classes_per_task: 2,
            per_class: 4,
            dim: 3,
            spread: 1.0,
            seed: s,
        })
        .expect("valid blob parameters");
        let data = seq.tasks[1].train.subset(&[0, 1, 2, 3]);
        let ctx = LossContext { policy: HeadPolicy::TaskAware, seen: 4 };

        let row = data.row(0);
        let (head, label) = ctx.policy.resolve(&arch, data.labels[0], data.tasks[0]).expect("label in range");
        let ce = |w: &[f64]| {
            let t = forward(&arch, w, row, head).expect("shapes match");
            cross_entropy(&t.logits, label).expect("label in range").0
        };
        let g = crate::nn::backward_ce(&arch, &w, &forward(&arch, &w, row, head).expect("shapes match"), label)
            .expect("shapes match");
        record("fd: cross-entropy".into(), fd_gradcheck(ce, &w, &g, 1e-5));

        let w_ref = random_vec(&mut rng, w.len(), 1.0);
        let imp = ImportanceMap {
            values: (0..w.len()).map(|_| rng.random_range(0.0..2.0)).collect(),
            source: ImportanceSource::Fisher,
            tasks_covered: 1,
        };
        let lambda = rng.random_range(0.1..3.0);
        let (_, g) = quad_penalty(&w, &w_ref, &imp, lambda).expect("lengths match");
        let q = |w: &[f64]| quad_penalty(w, &w_ref, &imp, lambda).expect("lengths match").0;
        record("fd: quadratic penalty".into(), fd_gradcheck(q, &w, &g, 1e-5));

        let c = 5;
        let o = random_vec(&mut rng, c, 2.0);
        let t = random_vec(&mut rng, c, 2.0);
        let tau = rng.random_range(0.5..5.0);
        let (_, g) = lwf_kd(&o, &t, tau, lambda).expect("lengths match");
        let kd = |o: &[f64]| lwf_kd(o, &t, tau, lambda).expect("lengths match").0;
        record("fd: distillation (logits)".into(), fd_gradcheck(kd, &o, &g, 1e-5));

        let f_ref = random_vec(&mut rng, c, 1.0);
        let (_, g) = lfl_penalty(&o, &f_ref, lambda).expect("lengths match");
        let lf = |f: &[f64]| lfl_penalty(f, &f_ref, lambda).expect("lengths match").0;
        record("fd: feature penalty".into(), fd_gradcheck(lf, &o, &g, 1e-5));

        for method in MethodId::ALL {
            let mut store = CheckpointStore::new();
            let old = init_weights(&arch, s + 100);
            let aux = init_weights(&arch, s + 200);
            store.freeze_old(&old);
            let source = method.importance_source();
            let make_imp = |rng: &mut ChaCha8Rng| {
                source.map(|source| ImportanceMap {
                    values: (0..w.len()).map(|_| rng.random_range(0.0..1.0)).collect(),
                    source,
                    tasks_covered: 1,
                })
            };
            if let Some(m) = make_imp(&mut rng) {
                store.set_old_importance(m);
            }
            let aux_imp = make_imp(&mut rng);
            store.freeze_aux(&aux, aux_imp);
            let lambda_a = rng.random_range(0.1..3.0);
            for spec in [LossSpec::cl(method, lambda), LossSpec::ancl(method, lambda, lambda_a)] {
                let name = format!("fd: {:?} {}", spec.mode, method.name()).to_lowercase();
                let err = match total_loss(&spec, &arch, &w, &data, &store, ctx) {
                    Ok(out) => fd_gradcheck(
                        |w| crate::losses::loss_value(&spec, &arch, w, &data, &store, ctx).unwrap_or(f64::NAN),
                        &w,
                        &out.grad,
                        1e-5,
                    ),
                    Err(_) => f64::INFINITY,
                };
                record(name, err);
            }
        }
    }
    worst.into_iter().map(|(name, err)| CheckResult::within(&name, err, 1e-4)).collect()
}
