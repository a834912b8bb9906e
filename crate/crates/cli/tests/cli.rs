use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ancl-lab"));
    c.env_remove("ANCL_LAB_MUTATION").env_remove("ANCL_LAB_THREADS");
    c
}

fn exec(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = "seeds = [0, 1]\n[tasks]\ntasks = 3\nper_class = 30\n[train]\nmax_epochs = 20\n";

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn missing_config_is_a_config_error_naming_the_path() {
    let o = exec(bin().args(["run", "--config", "/nonexistent/exp.toml"]));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/exp.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nlearnig_rate = 0.1\n");
    let o = exec(bin().args(["run", "--config"]).arg(&cfg));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learnig_rate"), "{}", stderr(&o));
}

#[test]
fn finetune_run_writes_square_accuracy_tables_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = exec(bin().args(["run", "--quiet", "--config"]).arg(&cfg).arg("--out").arg(out));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let csv = read(a.join("seed_0/accuracy.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.split(',').count() == 4));
    for f in ["seed_0/accuracy.csv", "seed_1/accuracy.csv", "seed_1/record.json", "summary.csv", "summary.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f} differs between reruns");
    }
}

#[test]
fn echoed_config_reproduces_the_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[loss]\nmethod = \"mas\"\nmode = \"ancl\"\nlambda = 1.0\nlambda_a = 0.5\n[tasks]\ntasks = 2\nper_class = 30\n[train]\nmax_epochs = 15\n");
    let first = dir.path().join("first");
    assert_eq!(
        code(&exec(bin().args(["run", "--quiet", "--seeds", "3", "--config"]).arg(&cfg).arg("--out").arg(&first))),
        0
    );
    let echoed = first.join("config.toml");
    let text = read(&echoed);
    assert!(text.contains("seeds = [3]") && text.contains("[analysis]"), "{text}");

    // the echo names `first` as its output; redirect and compare
    let second = dir.path().join("second");
    assert_eq!(code(&exec(bin().args(["run", "--quiet", "--config"]).arg(&echoed).arg("--out").arg(&second))), 0);
    assert_eq!(read(first.join("seed_3/record.json")), read(second.join("seed_3/record.json")));
}

#[test]
fn diverging_training_exits_with_training_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[loss]\nmethod = \"ewc\"\nmode = \"cl\"\nlambda = 1e9\n[tasks]\ntasks = 2\n");
    let o = exec(bin().args(["run", "--quiet", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn analyze_without_checkpoints_reports_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let o = exec(bin().args(["analyze", "--quiet", "--out"]).arg(dir.path()));
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("analysis.json"), "{}", stderr(&o));
}

fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    (header, lines.map(|l| l.split(',').map(String::from).collect()).collect())
}

#[test]
fn analysis_tables_cover_the_whole_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "seeds = [0, 1]\n[tasks]\ntasks = 2\nper_class = 40\nspread = 2.0\n[loss]\nmethod = \"ewc\"\nlambda = 5.0\n\
         [train]\nlr = 0.01\nmax_epochs = 30\n[analysis]\ntrain = true\nresolution = 4\n",
    );
    let out = dir.path().join("o");
    let o = exec(bin().args(["run", "--quiet", "--config"]).arg(&cfg).arg("--out").arg(&out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = exec(bin().args(["analyze", "--quiet", "--config"]).arg(&cfg).arg("--out").arg(&out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let (header, rows) = parse_csv(&read(out.join("seed_0/wd.csv")));
    assert_eq!(header, ["lambda_a", "wd_old", "wd_aux"]);
    assert_eq!(rows.len(), 6);
    let (header, rows) = parse_csv(&read(out.join("seed_1/cka.csv")));
    assert_eq!(header, ["lambda_a", "cka_old", "cka_aux", "cka_multi"]);
    assert_eq!(rows.len(), 6);
    let (_, cells) = parse_csv(&read(out.join("seed_0/landscape.csv")));
    assert_eq!(cells.len(), 16);

    let (header, rows) = parse_csv(&read(out.join("seed_0/projection.csv")));
    assert_eq!(header, ["label", "x", "y", "residual_norm"]);
    let labels: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(&labels[..4], ["old", "aux", "multi", "cl"]);
    assert_eq!(labels.len(), 4 + 6);
    assert!(labels[4..].iter().all(|l| l.starts_with("ancl_")));
    let num = |r: &Vec<String>, i: usize| r[i].parse::<f64>().unwrap();
    assert_eq!((num(&rows[0], 1), num(&rows[0], 2)), (0.0, 0.0));
    assert_eq!(num(&rows[1], 1), 1.0);
    assert!(num(&rows[1], 2).abs() < 1e-12);
    assert!(num(&rows[2], 3) < 1e-10, "multitask anchor lies in its own plane");

    let trends = read(out.join("trends.json"));
    for k in ["wd_old", "wd_aux", "cka_old", "cka_aux", "cka_multi"] {
        assert!(trends.contains(k));
    }
    let plan = read(out.join("analysis_plan.json"));
    assert!(plan.contains("\"lambda\": 5.0"), "{plan}");
}

#[test]
fn verify_passes_clean_and_fails_under_mutation() {
    let o = exec(bin().arg("verify"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let table = String::from_utf8_lossy(&o.stdout);
    for name in [
        "simulation vs closed form",
        "5000-step limit",
        "midpoint",
        "kd logit gradient identity",
        "interpolated target",
        "large-temperature",
        "fd: ancl ewc",
        "fd: cl lfl",
    ] {
        assert!(table.contains(name), "table lacks {name}");
    }
    let o = exec(bin().arg("verify").env("ANCL_LAB_MUTATION", "quad-penalty-sign"));
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn unknown_mutation_and_bad_thread_count_are_config_errors() {
    assert_eq!(code(&exec(bin().arg("verify").env("ANCL_LAB_MUTATION", "nope"))), 2);
    assert_eq!(code(&exec(bin().arg("verify").env("ANCL_LAB_THREADS", "zero"))), 2);
    assert_eq!(code(&exec(bin().arg("verify").env("ANCL_LAB_THREADS", "1"))), 0);
}

#[test]
fn gridsearch_single_point_and_zero_lambda_a() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{SMALL}[loss]\nmethod = \"lfl\"\n[grid]\nlambdas = [0.5]\nlambda_as = [0.0, 0.2]\n"),
    );
    let out = dir.path().join("g");
    let o = exec(bin().args(["gridsearch", "--quiet", "--config"]).arg(&cfg).arg("--out").arg(&out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("best lambda 0.5"));
    let (_, cl) = parse_csv(&read(out.join("grid_lambda.csv")));
    let (_, ancl) = parse_csv(&read(out.join("grid_lambda_a.csv")));
    assert_eq!(cl.len(), 1);
    assert_eq!(ancl[0][0], "0.0");
    assert_eq!(ancl[0][1], cl[0][1], "λ_a = 0 must score exactly like the classic objective");

    let empty = write_config(dir.path(), "[grid]\nlambdas = [1.0]\n");
    assert_eq!(code(&exec(bin().args(["gridsearch", "--quiet", "--config"]).arg(&empty))), 2);
}
