use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advshift::evaluator::{ErrorProfile, ShiftCurve};
use advshift::ModelParams;

fn advshift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advshift")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = advshift(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

/// Small three-class dataset written into `dir`.
fn dataset(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let p = dir.join(name);
    let seed = seed.to_string();
    ok(&[
        "generate",
        "--preset",
        "uniform",
        "--classes",
        "3",
        "--dim",
        "2",
        "--n",
        "240",
        "--seed",
        &seed,
        "--out",
        s(&p),
    ]);
    p
}

const ERM: &str = "method = erm\nbatch = 16\nepochs = 3\n";

#[test]
fn train_writes_checkpoint_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train.csv", 1);
    let cfg = write(dir.path(), "erm.cfg", ERM);
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let params = ModelParams::load(out.join("model.ckpt")).unwrap();
    assert_eq!(params.num_classes(), 3);
    let (header, rows) = read_csv(&out.join("history.csv"));
    assert_eq!(&header[..4], ["epoch", "mean_loss", "kl_pi_pemp", "min_pi"]);
    assert_eq!(header.len(), 4 + 3 + 3);
    assert_eq!(rows.len(), 3);
}

#[test]
fn advshift_history_stays_near_radius() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train.csv", 2);
    let cfg = write(dir.path(), "adv.cfg", "method = advshift\nr = 0.1\nbatch = 16\nepochs = 10\n");
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let (_, rows) = read_csv(&out.join("history.csv"));
    for row in &rows[2..] {
        let kl: f64 = row[2].parse().unwrap();
        assert!(kl <= 0.1 + 0.05, "kl {kl}");
    }
}

#[test]
fn input_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train.csv", 3);
    let bad = write(dir.path(), "bad.cfg", "method = dro\n");
    let out = advshift(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("method") && msg.contains("dro"), "{msg}");

    let typo = write(dir.path(), "typo.cfg", "radius = 0.1\n");
    let out = advshift(&["train", "--config", s(&typo), "--data", s(&data), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("radius"));

    let missing = dir.path().join("nope.ckpt");
    let out = advshift(&["eval", "--checkpoint", s(&missing), "--data", s(&data), "--out", s(&dir.path().join("e"))]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(advshift(&["train"]).status.code(), Some(1));
    assert_eq!(advshift(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn eval_curves() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train.csv", 4);
    let cfg = write(dir.path(), "erm.cfg", ERM);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let ckpt = run.join("model.ckpt");

    let single = dir.path().join("single");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--taus", "0", "--out", s(&single)]);
    let profile = ErrorProfile::load_csv(single.join("profile.csv")).unwrap();
    let curve = ShiftCurve::load_dir(&single).unwrap();
    assert_eq!(curve.points.len(), 1);
    assert_eq!(curve.points[0].value, profile.mean());

    let five = dir.path().join("five");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--taus", "0,0.5,1,2,3", "--out", s(&five)]);
    let curve = ShiftCurve::load_dir(&five).unwrap();
    assert_eq!(curve.points.len(), 5);
    assert!(curve.points.windows(2).all(|w| w[1].value >= w[0].value));
    let (header, _) = read_csv(&five.join("curve.csv"));
    assert_eq!(header, ["tau", "worst_value", "witness_file"]);

    let loss = dir.path().join("loss");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--metric", "loss", "--clip", "2", "--out", s(&loss)]);
    let lp = ErrorProfile::load_csv(loss.join("profile.csv")).unwrap();
    assert!(lp.values.iter().all(|&v| (0.0..=2.0).contains(&v)));
}

#[test]
fn witness_resampling_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train.csv", 5);
    let cfg = write(dir.path(), "erm.cfg", ERM);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let ev = dir.path().join("eval");
    ok(&["eval", "--checkpoint", s(&run.join("model.ckpt")), "--data", s(&data), "--taus", "1", "--out", s(&ev)]);
    let shifted = dir.path().join("shifted.csv");
    ok(&[
        "resample",
        "--data",
        s(&data),
        "--target",
        s(&ev.join("witness_0.csv")),
        "--n",
        "500",
        "--seed",
        "3",
        "--out",
        s(&shifted),
    ]);
    let loaded = advshift::data::load_csv(&shifted).unwrap();
    assert_eq!(loaded.len(), 500);
}

#[test]
fn sweep_grid_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train.csv", 6);
    let val = dataset(dir.path(), "val.csv", 7);
    let base = write(dir.path(), "base.cfg", "batch = 32\nepochs = 2\n");
    let spec = write(dir.path(), "grid.spec", "methods = erm; advshift(r=0.1)\nseeds = 1,2,3,4,5\ntaus = 0,1,2\n");
    let one = dir.path().join("one.csv");
    let four = dir.path().join("four.csv");
    for (out, jobs) in [(&one, "1"), (&four, "4")] {
        ok(&[
            "sweep",
            "--config",
            s(&base),
            "--data",
            s(&data),
            "--val",
            s(&val),
            "--spec",
            s(&spec),
            "--jobs",
            jobs,
            "--out",
            s(out),
        ]);
    }
    let (header, rows) = read_csv(&one);
    assert_eq!(header, ["method", "r", "clip", "eps", "seed", "tau", "worst_value", "min_pi", "status"]);
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|r| r[8] == "ok"));
    assert_eq!(rows[0][0], "erm");
    assert_eq!(rows[29][0], "advshift");
    assert_eq!(std::fs::read(&one).unwrap(), std::fs::read(&four).unwrap());

    // Rerunning overwrites with identical content.
    ok(&["sweep", "--config", s(&base), "--data", s(&data), "--val", s(&val), "--spec", s(&spec), "--out", s(&one)]);
    assert_eq!(std::fs::read(&one).unwrap(), std::fs::read(&four).unwrap());
}

#[test]
fn failed_jobs_are_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train.csv", 8);
    let base = write(dir.path(), "base.cfg", "batch = 32\nepochs = 1\n");
    let spec = write(dir.path(), "grid.spec", "methods = erm; advshift(r=-1)\nseeds = 1\ntaus = 0,1\n");
    let out = dir.path().join("grid.csv");
    let res = advshift(&["sweep", "--config", s(&base), "--data", s(&data), "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    let (_, rows) = read_csv(&out);
    assert_eq!(rows.len(), 3);
    assert!(rows[..2].iter().all(|r| r[8] == "ok"));
    assert!(rows[2][8].starts_with("failed"), "{:?}", rows[2]);
}

#[test]
fn ablation_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train.csv", 9);
    let base = write(dir.path(), "adv.cfg", "method = advshift\nbatch = 32\nepochs = 2\n");
    let out = dir.path().join("clip.csv");
    ok(&[
        "ablate",
        "--config",
        s(&base),
        "--data",
        s(&data),
        "--param",
        "clip",
        "--values",
        "0.5,2,8",
        "--seeds",
        "1",
        "--taus",
        "0,1",
        "--out",
        s(&out),
    ]);
    let (_, rows) = read_csv(&out);
    assert_eq!(rows.len(), 6);
    let clips: Vec<&str> = rows.iter().map(|r| r[2].as_str()).collect();
    assert_eq!(clips, ["0.5", "0.5", "2.0", "2.0", "8.0", "8.0"]);

    let eps = dir.path().join("eps.csv");
    ok(&[
        "ablate",
        "--config",
        s(&base),
        "--data",
        s(&data),
        "--param",
        "epsilon",
        "--values",
        "0,0.001,0.1",
        "--seeds",
        "1",
        "--taus",
        "1",
        "--out",
        s(&eps),
    ]);
    let (_, rows) = read_csv(&eps);
    assert_eq!(rows.len(), 3);
    for r in &rows[1..] {
        let eps: f64 = r[3].parse().unwrap();
        let min_pi: f64 = r[7].parse().unwrap();
        assert!(min_pi >= eps / 3.0 - 1e-15);
    }

    let bad = advshift(&[
        "ablate",
        "--config",
        s(&base),
        "--data",
        s(&data),
        "--param",
        "seed",
        "--values",
        "1",
        "--out",
        s(&eps),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn project_bench_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    ok(&["project-bench", "--classes", "10", "--trials", "3", "--out", s(&out)]);
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["L", "trials", "median_projection_ms", "median_mirror_ms", "ratio"]);
    assert_eq!(rows.len(), 1);
    assert!(rows[0][4].parse::<f64>().unwrap() > 0.0);

    ok(&["project-bench", "--classes", "10", "--trials", "0", "--out", s(&out)]);
    let (_, rows) = read_csv(&out);
    assert_eq!(rows[0][1], "0");
    assert!(rows[0][2].is_empty() && rows[0][4].is_empty());
}

#[test]
fn diag_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train.csv", 10);
    let cfg = write(dir.path(), "adv.cfg", "method = advshift\nbatch = 60\nepochs = 4\nmomentum = 0\n");
    let out = dir.path().join("diag");
    ok(&["diag", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--every", "2", "--jobs", "2"]);
    let report = advshift::config::KvFile::load(out.join("report.txt")).unwrap();
    for key in ["sigma_hat", "g_hat", "g_bound", "lipschitz_hat", "smoothness_hat", "r_hat", "r_bound", "stationarity"]
    {
        assert!(report.get(key).is_some(), "{key}");
    }
    let g_hat: f64 = report.get("g_hat").unwrap().parse().unwrap();
    let g_bound: f64 = report.get("g_bound").unwrap().parse().unwrap();
    assert!(g_hat <= g_bound);
    let (_, rows) = read_csv(&out.join("stationarity.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["2", "4"]);

    let theory = dir.path().join("theory");
    ok(&["diag", "--config", s(&cfg), "--data", s(&data), "--out", s(&theory), "--every", "4", "--theory-schedule"]);
}
