use ancl_core::analysis::{mean_over_tasks, tradeoff_rows};
use ancl_core::losses::quad_penalty;
use ancl_core::oracle::{fixed_point, QuadDynSpec};
use ancl_core::tasks::{make_blob_sequence, BlobParams, Split};
use ancl_core::trainer::{
    analysis_regime, grid_search, policy_for, run_sequence, run_sequence_full, select_best, train_loop, Objective,
};
use ancl_core::{
    ArchSpec, CheckpointFile, ImportanceMap, ImportanceSource, LossSpec, MethodId, Result, TaskDataset, TaskSequence,
    TrainConfig, WeightVector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs(tasks: usize, seed: u64) -> TaskSequence {
    make_blob_sequence(&BlobParams { tasks, classes_per_task: 2, per_class: 40, dim: 4, spread: 0.8, seed }).unwrap()
}

fn fast(spec: LossSpec) -> TrainConfig {
    TrainConfig { spec, max_epochs: 40, ..TrainConfig::default() }
}

/// Only the two quadratic penalties; the task gradient is zero.
struct PenaltiesOnly {
    old: Vec<f64>,
    aux: Vec<f64>,
    f_old: ImportanceMap,
    f_aux: ImportanceMap,
    lambda: f64,
    lambda_a: f64,
}

impl Objective for PenaltiesOnly {
    fn value_and_grad(&self, w: &[f64], _batch: &TaskDataset) -> Result<(f64, WeightVector)> {
        let (l1, g1) = quad_penalty(w, &self.old, &self.f_old, self.lambda)?;
        let (l2, g2) = quad_penalty(w, &self.aux, &self.f_aux, self.lambda_a)?;
        Ok((l1 + l2, g1.iter().zip(&g2).map(|(a, b)| a + b).collect::<Vec<_>>().into()))
    }

    fn value(&self, w: &[f64], _data: &TaskDataset) -> Result<f64> {
        Ok(quad_penalty(w, &self.old, &self.f_old, self.lambda)?.0
            + quad_penalty(w, &self.aux, &self.f_aux, self.lambda_a)?.0)
    }
}

fn fisher(values: Vec<f64>) -> ImportanceMap {
    ImportanceMap { values, source: ImportanceSource::Fisher, tasks_covered: 1 }
}

#[test]
fn penalty_descent_lands_on_the_interpolation_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 12;
    let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    let obj = PenaltiesOnly {
        old: draw(-2.0, 2.0),
        aux: draw(-2.0, 2.0),
        f_old: fisher(draw(0.1, 1.0)),
        f_aux: fisher(draw(0.1, 1.0)),
        lambda: 2.0,
        lambda_a: 3.0,
    };
    let spec = QuadDynSpec {
        theta0: obj.old.clone(),
        theta_old: obj.old.clone(),
        theta_aux: obj.aux.clone(),
        f_old: obj.f_old.values.clone(),
        f_aux: obj.f_aux.values.clone(),
        lambda: obj.lambda,
        lambda_a: obj.lambda_a,
        eta: 0.1,
        g_seq: vec![],
        k: 0,
    };
    let target = fixed_point(&spec).unwrap();

    // plain gradient descent through the training-side penalty
    let dummy = blobs(1, 0).tasks[0].train.clone();
    let mut w = obj.old.clone();
    for _ in 0..5000 {
        let (_, g) = obj.value_and_grad(&w, &dummy).unwrap();
        w.iter_mut().zip(g.iter()).for_each(|(x, d)| *x -= spec.eta * d);
    }
    let dev = w.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dev < 1e-6, "descent deviates from the fixed point by {dev}");

    // the full training loop (momentum, plateau schedule) reaches the same point
    let cfg = TrainConfig { lr: 0.02, min_lr: 1e-6, max_epochs: 400, ..TrainConfig::default() };
    let out =
        train_loop(&obj, &obj.old.clone().into(), &dummy, &dummy, &cfg, ChaCha8Rng::seed_from_u64(0), None).unwrap();
    let dev = out.weights.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dev < 1e-6, "training loop deviates from the fixed point by {dev}");
}

#[test]
fn analysis_branches_relate_as_expected() {
    let seq = blobs(2, 3);
    let arch = ArchSpec::multi_head(4, vec![16, 8], vec![2, 2]);
    let cfg = fast(LossSpec::cl(MethodId::Ewc, 10.0));
    let aw = analysis_regime(&arch, &seq, 1, &cfg, &[0.0, 10.0, 1000.0]).unwrap();

    assert_eq!(aw.ancl[0].1, aw.cl, "λ_a = 0 branch must equal the classic branch");
    assert_eq!(aw.ancl.len(), 3);

    let tests: Vec<TaskDataset> = seq.tasks.iter().map(|t| t.test.clone()).collect();
    let policy = policy_for(&arch, &seq, 1);
    let (multi, _) = mean_over_tasks(&arch, &aw.multi, &tests, policy).unwrap();
    for (label, w) in [("aux", &aw.aux), ("cl", &aw.cl)] {
        let (acc, _) = mean_over_tasks(&arch, w, &tests, policy).unwrap();
        assert!(multi + 0.02 >= acc, "multitask {multi} below {label} {acc}");
    }

    let rows = tradeoff_rows(&arch, &aw, &seq.tasks[1].test, seq.seen_classes(0)).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].wd_aux < rows[0].wd_aux, "strong auxiliary pull should shrink the auxiliary distance");
}

#[test]
fn sequence_state_round_trips_through_a_checkpoint_file() {
    let seq = blobs(3, 1);
    let arch = ArchSpec::multi_head(4, vec![8], vec![2; 3]);
    let cfg = fast(LossSpec::ancl(MethodId::Mas, 1.0, 0.5));
    let run = run_sequence_full(&arch, &seq, &cfg).unwrap();
    assert_eq!(run.store.snapshots().len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    CheckpointFile::from_store(arch.clone(), &run.store).save(&path).unwrap();
    let back = CheckpointFile::load(&path).unwrap();
    assert_eq!(back.weight("task_2").unwrap(), &run.weights);
    assert_eq!(back.importances["old"].source, ImportanceSource::Mas);

    // rerunning reproduces every weight bit
    let again = run_sequence_full(&arch, &seq, &cfg).unwrap();
    assert_eq!(again.weights, run.weights);
    assert_eq!(again.record, run.record);
}

#[test]
fn replay_run_keeps_a_balanced_memory() {
    let seq = blobs(3, 2);
    let arch = ArchSpec::single_head(4, vec![8], 6);
    let mut cfg = fast(LossSpec::cl(MethodId::Icarl, 1.0));
    cfg.replay = Some(4);
    let run = run_sequence_full(&arch, &seq, &cfg).unwrap();
    let buffer = run.store.buffer().expect("replay keeps a buffer");
    assert_eq!(buffer.classes.len(), 6);
    assert!(buffer.classes.iter().all(|c| c.count(4) == 4));
    assert!(run.record.aac > 1.0 / 6.0, "NME accuracy {} at chance", run.record.aac);
}

#[test]
fn grid_choice_matches_exhaustive_reevaluation() {
    let arch = ArchSpec::multi_head(4, vec![8], vec![2; 3]);
    let seq_for = |s: u64| -> Result<TaskSequence> { Ok(blobs(3, s)) };
    let cfg = fast(LossSpec::cl(MethodId::Ewc, 1.0));
    let (lambdas, lambda_as, seeds) = ([0.1, 1.0, 10.0], [0.0, 0.5, 5.0], [0u64, 1]);
    let g = grid_search(&arch, &seq_for, &cfg, &lambdas, &lambda_as, &seeds).unwrap();

    let score = |spec: LossSpec| -> f64 {
        seeds
            .iter()
            .map(|&s| {
                let cfg = TrainConfig { spec, seed: s, ..cfg.clone() };
                run_sequence(&arch, &blobs(3, s), &cfg).unwrap().val_aac
            })
            .sum::<f64>()
            / seeds.len() as f64
    };
    let cl: Vec<(f64, f64)> = lambdas.iter().map(|&l| (l, score(LossSpec::cl(MethodId::Ewc, l)))).collect();
    let (lambda, _) = select_best(&cl).unwrap();
    let ancl: Vec<(f64, f64)> =
        lambda_as.iter().map(|&la| (la, score(LossSpec::ancl(MethodId::Ewc, lambda, la)))).collect();
    let (lambda_a, _) = select_best(&ancl).unwrap();
    assert_eq!((g.lambda, g.lambda_a), (lambda, lambda_a));
    assert_eq!(g.cl_scores, cl);
    assert_eq!(g.ancl_scores, ancl);
    // λ_a = 0 reproduces the classic score at the chosen λ
    let at_lambda = cl.iter().find(|(l, _)| *l == lambda).unwrap().1;
    assert_eq!(ancl[0].1, at_lambda);
}

#[test]
fn single_point_grid_returns_that_point() {
    let arch = ArchSpec::multi_head(4, vec![8], vec![2; 2]);
    let seq_for = |s: u64| -> Result<TaskSequence> { Ok(blobs(2, s)) };
    let cfg = fast(LossSpec::cl(MethodId::Lwf, 1.0));
    let g = grid_search(&arch, &seq_for, &cfg, &[2.0], &[0.25], &[0]).unwrap();
    assert_eq!((g.lambda, g.lambda_a), (2.0, 0.25));
}

#[test]
fn importance_maps_track_the_parameter_count() {
    let seq = blobs(2, 5);
    let arch = ArchSpec::multi_head(4, vec![6], vec![2, 2]);
    let run = run_sequence_full(&arch, &seq, &fast(LossSpec::cl(MethodId::Ewc, 1.0))).unwrap();
    let imp: &ImportanceMap = run.store.old_importance().unwrap();
    assert_eq!(imp.len(), arch.param_count());
    assert_eq!(imp.tasks_covered, 2);
    assert!(imp.values.iter().all(|v| *v >= 0.0));
    assert!(seq.joint(1, Split::Train).unwrap().len() > seq.tasks[0].train.len());
}
