//! The four subcommands. Each seed writes its own files under
//! `seed_<s>/`; aggregates are computed afterwards in seed order.

use std::path::{Path, PathBuf};

use ancl_core::analysis::{
    cka_suite, grid_eval, landscape_basis, old_parameter_indices, projection_rows, spearman, to_csv, weight_distance_on,
};
use ancl_core::oracle::full_report;
use ancl_core::tasks::make_blob_sequence;
use ancl_core::trainer::{analysis_regime, grid_search, plan_analysis, policy_for, run_sequence_full, AnalysisWeights};
use ancl_core::{CheckpointFile, LossSpec, RunRecord, TaskDataset, TaskSequence};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::{aggregate, to_json, write_atomic, Aggregate};

/// Failure classes, one exit code each.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Training(String),
    MissingInput(String),
    Verification(String),
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Output(_) => 1,
            CliError::Config(_) => 2,
            CliError::Training(_) => 3,
            CliError::MissingInput(_) => 4,
            CliError::Verification(_) => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Training(m) => write!(f, "training failed: {m}"),
            CliError::MissingInput(m) => write!(f, "missing input: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
            CliError::Output(m) => write!(f, "cannot write output: {m}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn training(e: ancl_core::Error) -> CliError {
    CliError::Training(e.to_string())
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub quiet: bool,
}

impl Context {
    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn write(&self, rel: impl AsRef<Path>, contents: &str) -> CliResult<()> {
        let path = self.out.join(rel);
        write_atomic(&path, contents).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
    }

    fn sequence(&self, seed: u64) -> CliResult<TaskSequence> {
        make_blob_sequence(&self.cfg.blob_params(seed)).map_err(|e| CliError::Config(e.to_string()))
    }

    fn echo_config(&self) -> CliResult<()> {
        self.write("config.toml", &self.cfg.to_toml())
    }
}

fn seed_dir(seed: u64) -> PathBuf {
    PathBuf::from(format!("seed_{seed}"))
}

#[derive(Serialize)]
struct Summary {
    seeds: Vec<u64>,
    aac: Aggregate,
    aiac: Aggregate,
    val_aac: Aggregate,
    per_seed_aac: Vec<f64>,
}

#[derive(Serialize)]
struct MetricRow<'a> {
    metric: &'a str,
    mean: f64,
    stderr: f64,
    n: usize,
}

/// Trains every seed, then the analysis networks if requested.
pub fn run(ctx: &Context, save_checkpoints: bool) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let arch = cfg.arch_spec();
    ctx.echo_config()?;
    let records = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            let seq = ctx.sequence(s)?;
            let run = run_sequence_full(&arch, &seq, &cfg.train_config(s)).map_err(training)?;
            let dir = seed_dir(s);
            ctx.write(dir.join("record.json"), &to_json(&run.record))?;
            ctx.write(dir.join("accuracy.csv"), &run.record.matrix.to_csv())?;
            if save_checkpoints {
                let f = CheckpointFile::from_store(arch.clone(), &run.store);
                ctx.write(dir.join("checkpoint.json"), &f.to_json().map_err(training)?)?;
            }
            ctx.log(format!("seed {s}: AAC {:.4}", run.record.aac));
            Ok(run.record)
        })
        .collect::<CliResult<Vec<RunRecord>>>()?;

    let pick = |f: fn(&RunRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let summary = Summary {
        seeds: cfg.seeds.clone(),
        aac: aggregate(&pick(|r| r.aac)),
        aiac: aggregate(&pick(|r| r.aiac)),
        val_aac: aggregate(&pick(|r| r.val_aac)),
        per_seed_aac: pick(|r| r.aac),
    };
    ctx.write("summary.json", &to_json(&summary))?;
    let rows = [("aac", &summary.aac), ("aiac", &summary.aiac), ("val_aac", &summary.val_aac)]
        .map(|(metric, a)| MetricRow { metric, mean: a.mean, stderr: a.stderr, n: a.n });
    ctx.write("summary.csv", &to_csv(&rows).map_err(training)?)?;
    println!("AAC {:.4} ± {:.4} over {} seed(s)", summary.aac.mean, summary.aac.stderr, summary.aac.n);

    if cfg.analysis.train {
        train_analysis(ctx)?;
    }
    Ok(())
}

fn train_analysis(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let arch = cfg.arch_spec();
    let seq_for = |s: u64| make_blob_sequence(&cfg.blob_params(s));
    let base = cfg.train_config(cfg.seeds[0]);
    let plan = plan_analysis(&arch, &seq_for, &base, &cfg.analysis_plan(), &cfg.seeds).map_err(training)?;
    ctx.write("analysis_plan.json", &to_json(&plan))?;
    ctx.log(format!("analysis: λ = {} with λ_a grid {:?}", plan.lambda, plan.lambda_a_grid));
    cfg.seeds.par_iter().try_for_each(|&s| {
        let seq = ctx.sequence(s)?;
        let mut train = cfg.train_config(s);
        train.spec = LossSpec { tau: cfg.loss.tau, ..LossSpec::cl(cfg.loss.method, plan.lambda) };
        let aw = analysis_regime(&arch, &seq, cfg.analysis.task, &train, &plan.lambda_a_grid).map_err(training)?;
        let f = aw.to_checkpoint(&arch);
        ctx.write(seed_dir(s).join("analysis.json"), &f.to_json().map_err(training)?)
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
struct WdRow {
    lambda_a: f64,
    wd_old: f64,
    wd_aux: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct CkaRow {
    lambda_a: f64,
    cka_old: f64,
    cka_aux: f64,
    cka_multi: f64,
}

struct SeedAnalysis {
    lambda_as: Vec<f64>,
    wd: Vec<WdRow>,
    cka: Vec<CkaRow>,
}

fn load_analysis(ctx: &Context, checkpoints: &Path, seed: u64) -> CliResult<AnalysisWeights> {
    let path = checkpoints.join(seed_dir(seed)).join("analysis.json");
    if !path.is_file() {
        return Err(CliError::MissingInput(format!("analysis checkpoint {} not found", path.display())));
    }
    let f = CheckpointFile::load(&path).map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
    if f.arch != ctx.cfg.arch_spec() {
        return Err(CliError::Config(format!("{} was trained with a different architecture", path.display())));
    }
    AnalysisWeights::from_checkpoint(&f).map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))
}

fn analyze_seed(ctx: &Context, checkpoints: &Path, seed: u64) -> CliResult<SeedAnalysis> {
    let cfg = &ctx.cfg;
    let arch = cfg.arch_spec();
    let aw = load_analysis(ctx, checkpoints, seed)?;
    let seq = ctx.sequence(seed)?;
    let t = aw.t;
    if t >= seq.len() {
        return Err(CliError::Config(format!("checkpoint studies task {t} but the config has {} tasks", seq.len())));
    }
    let dir = seed_dir(seed);
    let probe = &seq.tasks[t].test;
    let mut out = SeedAnalysis { lambda_as: aw.ancl.iter().map(|(la, _)| *la).collect(), wd: vec![], cka: vec![] };

    if cfg.analysis.wd {
        let idx = old_parameter_indices(&arch, seq.seen_classes(t - 1));
        for (la, w) in &aw.ancl {
            out.wd.push(WdRow {
                lambda_a: *la,
                wd_old: weight_distance_on(w, &aw.multi_prev, &idx).map_err(training)?,
                wd_aux: weight_distance_on(w, &aw.aux, &idx).map_err(training)?,
            });
        }
        ctx.write(dir.join("wd.csv"), &to_csv(&out.wd).map_err(training)?)?;
    }
    if cfg.analysis.cka {
        for (la, w) in &aw.ancl {
            let c = cka_suite(&arch, w, &aw.multi_prev, &aw.aux, &aw.multi, probe, None).map_err(training)?;
            out.cka.push(CkaRow { lambda_a: *la, cka_old: c.old, cka_aux: c.aux, cka_multi: c.multi });
        }
        ctx.write(dir.join("cka.csv"), &to_csv(&out.cka).map_err(training)?)?;
    }
    if cfg.analysis.landscape {
        let basis = landscape_basis(&aw.multi_prev, &aw.aux, &aw.multi).map_err(training)?;
        let tests: Vec<TaskDataset> = seq.tasks[..=t].iter().map(|k| k.test.clone()).collect();
        let grid = grid_eval(&arch, &basis, cfg.extents(), &tests, policy_for(&arch, &seq, t)).map_err(training)?;
        ctx.write(dir.join("landscape.csv"), &to_csv(&grid.cells).map_err(training)?)?;
        let rows = projection_rows(&aw, &basis).map_err(training)?;
        ctx.write(dir.join("projection.csv"), &to_csv(&rows).map_err(training)?)?;
    }
    ctx.log(format!("seed {seed}: analysis written"));
    Ok(out)
}

#[derive(Serialize)]
struct Trend {
    per_seed: Vec<f64>,
    mean: f64,
}

/// A named column of a per-λ_a table.
type Column<R> = (&'static str, fn(&R) -> f64);

/// Mean and standard error per λ_a for each named column.
fn sweep_summary<R>(lambda_as: &[f64], per_seed: &[Vec<R>], columns: &[Column<R>]) -> String {
    let mut s = String::from("lambda_a");
    for (name, _) in columns {
        s.push_str(&format!(",{name}_mean,{name}_stderr"));
    }
    s.push('\n');
    for (i, la) in lambda_as.iter().enumerate() {
        s.push_str(&la.to_string());
        for (_, get) in columns {
            let a = aggregate(&per_seed.iter().map(|rows| get(&rows[i])).collect::<Vec<_>>());
            s.push_str(&format!(",{},{}", a.mean, a.stderr));
        }
        s.push('\n');
    }
    s
}

fn trends<R>(lambda_as: &[f64], per_seed: &[Vec<R>], columns: &[Column<R>]) -> CliResult<Vec<(String, Trend)>> {
    columns
        .iter()
        .map(|(name, get)| {
            let rhos = per_seed
                .iter()
                .map(|rows| spearman(lambda_as, &rows.iter().map(get).collect::<Vec<_>>()))
                .collect::<ancl_core::Result<Vec<f64>>>()
                .map_err(training)?;
            let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
            Ok((name.to_string(), Trend { per_seed: rhos, mean }))
        })
        .collect()
}

/// Reads the analysis checkpoints and writes WD, CKA, landscape and
/// projection tables per seed, plus across-seed summaries.
pub fn analyze(ctx: &Context, checkpoints: &Path) -> CliResult<()> {
    let cfg = &ctx.cfg;
    ctx.echo_config()?;
    let results = cfg.seeds.par_iter().map(|&s| analyze_seed(ctx, checkpoints, s)).collect::<CliResult<Vec<_>>>()?;
    let lambda_as = results[0].lambda_as.clone();
    if results.iter().any(|r| r.lambda_as != lambda_as) {
        return Err(CliError::Config("seeds were trained on different λ_a grids".into()));
    }
    if lambda_as.len() < 2 {
        return Ok(());
    }
    let mut trend_list = Vec::new();
    if cfg.analysis.wd {
        let rows: Vec<Vec<WdRow>> = results.iter().map(|r| r.wd.clone()).collect();
        let cols: [Column<WdRow>; 2] = [("wd_old", |r| r.wd_old), ("wd_aux", |r| r.wd_aux)];
        ctx.write("wd_summary.csv", &sweep_summary(&lambda_as, &rows, &cols))?;
        trend_list.extend(trends(&lambda_as, &rows, &cols)?);
    }
    if cfg.analysis.cka {
        let rows: Vec<Vec<CkaRow>> = results.iter().map(|r| r.cka.clone()).collect();
        let cols: [Column<CkaRow>; 3] =
            [("cka_old", |r| r.cka_old), ("cka_aux", |r| r.cka_aux), ("cka_multi", |r| r.cka_multi)];
        ctx.write("cka_summary.csv", &sweep_summary(&lambda_as, &rows, &cols))?;
        trend_list.extend(trends(&lambda_as, &rows, &cols)?);
    }
    if !trend_list.is_empty() {
        let map: serde_json::Map<String, serde_json::Value> =
            trend_list.into_iter().map(|(k, v)| (k, serde_json::to_value(v).expect("trend serializes"))).collect();
        for (k, v) in &map {
            println!("spearman rho vs lambda_a  {k:<10} {:+.3}", v["mean"].as_f64().unwrap_or(f64::NAN));
        }
        ctx.write("trends.json", &to_json(&map))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GridRow {
    value: f64,
    val_aac: f64,
}

/// Two-phase search over `[grid]`; writes the scores and the chosen pair.
pub fn gridsearch(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.cfg;
    if cfg.grid.lambdas.is_empty() || cfg.grid.lambda_as.is_empty() {
        return Err(CliError::Config("grid.lambdas and grid.lambda_as must both be nonempty".into()));
    }
    ctx.echo_config()?;
    let arch = cfg.arch_spec();
    let seq_for = |s: u64| make_blob_sequence(&cfg.blob_params(s));
    let res = grid_search(
        &arch,
        &seq_for,
        &cfg.train_config(cfg.seeds[0]),
        &cfg.grid.lambdas,
        &cfg.grid.lambda_as,
        &cfg.seeds,
    )
    .map_err(training)?;
    let rows = |v: &[(f64, f64)]| v.iter().map(|&(value, val_aac)| GridRow { value, val_aac }).collect::<Vec<_>>();
    ctx.write("grid_lambda.csv", &to_csv(&rows(&res.cl_scores)).map_err(training)?)?;
    ctx.write("grid_lambda_a.csv", &to_csv(&rows(&res.ancl_scores)).map_err(training)?)?;
    ctx.write("grid.json", &to_json(&res))?;
    println!("best lambda {} lambda_a {}", res.lambda, res.lambda_a);
    Ok(())
}

/// Runs every numerical oracle and prints the table.
pub fn verify(seed: u64) -> CliResult<()> {
    let report = full_report(seed);
    print!("{}", report.table());
    if report.passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(CliError::Verification(format!("{failed} check(s) failed")))
    }
}
