use std::path::Path;
use std::process::Command as Process;

use marketgan_cli::{run, Command, RunConfig};

fn cfg(command: Command, pairs: &[(&str, String)]) -> RunConfig {
    let o: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    RunConfig::resolve(command, None, &o).unwrap()
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

fn fixture(dir: &Path, extra: &[(&str, String)]) {
    let mut pairs = vec![("out", p(dir)), ("assets", "3".into()), ("dates", "600".into()), ("seed", "1".into())];
    pairs.extend_from_slice(extra);
    assert!(run(&cfg(Command::Fixture, &pairs)).unwrap().success());
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn tiny_train(data: &Path, out: &Path, extra: &[(&str, String)]) -> RunConfig {
    let mut pairs = vec![
        ("data", p(data)),
        ("out", p(out)),
        ("coefficient_window", "60".into()),
        ("epochs", "2".into()),
        ("batch_size", "8".into()),
        ("window_len", "24".into()),
        ("max_batches_per_epoch", "2".into()),
        ("fine_tune_epochs", "1".into()),
        ("validation_paths", "2".into()),
        ("hidden", "4".into()),
        ("residual_hidden", "4".into()),
        ("num_blocks", "2".into()),
        ("residual_blocks", "1".into()),
        ("latent_dim", "2".into()),
        ("critic_hidden", "6".into()),
        ("critic_blocks", "2".into()),
    ];
    pairs.extend_from_slice(extra);
    cfg(Command::Train, &pairs)
}

#[test]
fn fixture_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fixture(&a, &[("assets", "5".into()), ("dates", "3000".into())]);
    fixture(&b, &[("assets", "5".into()), ("dates", "3000".into())]);
    for f in ["returns.csv", "factors.csv", "covariates.csv", "truth.csv"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let text = String::from_utf8(read(&a.join("returns.csv"))).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3001);
    assert!(lines.iter().all(|l| l.split(',').count() == 6));
    assert!(a.join("config.resolved").exists());
}

#[test]
fn noiseless_fixture_satisfies_the_factor_identity() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), &[("sigma", "0".into()), ("factors", "3".into())]);
    let returns = marketgan::dataio::read_panel(&dir.path().join("returns.csv")).unwrap();
    let factors = marketgan::dataio::read_panel(&dir.path().join("factors.csv")).unwrap();
    let mut truth = csv::Reader::from_path(dir.path().join("truth.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = truth.records().map(Result::unwrap).collect();
    let n = 3;
    for t in 0..returns.rows() - 1 {
        for i in 0..n {
            let rec = &rows[t * n + i];
            let num = |j: usize| rec[j].parse::<f64>().unwrap();
            let fit = num(2) + (0..3).map(|j| num(3 + j) * factors.get(t + 1, j)).sum::<f64>();
            assert!((returns.get(t + 1, i) - fit).abs() < 1e-15, "row {t} asset {i}");
        }
    }
}

#[test]
fn training_logs_resume_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("fx");
    fixture(&data, &[]);
    let one = tiny_train(&data, &dir.path().join("one"), &[("epochs", "1".into()), ("fine_tune_epochs", "0".into())]);
    run(&one).unwrap();
    let log = String::from_utf8(read(&dir.path().join("one/batch_log.csv"))).unwrap();
    assert_eq!(log.lines().count(), 1 + 2);

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&tiny_train(&data, &a, &[])).unwrap();
    run(&tiny_train(&data, &b, &[])).unwrap();
    for f in ["checkpoint.json", "training_log.csv", "batch_log.csv", "summary.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }

    let resumed = dir.path().join("resumed");
    run(&tiny_train(&data, &resumed, &[("resume", p(&a.join("checkpoint.json")))])).unwrap();
    let ck = marketgan::train::Checkpoint::load(&resumed.join("checkpoint.json")).unwrap();
    let first = marketgan::train::Checkpoint::load(&a.join("checkpoint.json")).unwrap();
    assert_eq!(ck.state.epoch, first.state.epoch + 3);
    assert_eq!(ck.state.log.first().unwrap().epoch, 0);
}

#[test]
fn evaluate_reports_all_metrics_and_flags_low_samples() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("fx");
    fixture(&data, &[]);
    let out = dir.path().join("ev");
    let c = cfg(
        Command::Evaluate,
        &[
            ("data", p(&data)),
            ("out", p(&out)),
            ("coefficient_window", "60".into()),
            ("model", "bootstrap".into()),
            ("paths", "1".into()),
            ("max_lag", "10".into()),
        ],
    );
    run(&c).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&read(&out.join("report.json"))).unwrap();
    for key in ["fid", "swd", "md", "dtw", "acf", "vc", "lev", "xcorr", "xcorr_e"] {
        assert!(report[key].is_f64(), "{key}");
    }
    assert_eq!(report["low_sample"], serde_json::Value::Bool(true));
    for f in ["curves.csv", "xcorr_real.csv", "xcorr_synthetic.csv", "xcorr_e_real.csv", "histogram.csv", "sample_path.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(c.get::<usize>("paths").unwrap(), 1);
    assert_eq!(RunConfig::resolve(Command::Evaluate, None, &[]).unwrap().get::<usize>("paths").unwrap(), 100);

    let missing = cfg(Command::Evaluate, &[("data", p(&data)), ("out", p(&out)), ("coefficient_window", "60".into())]);
    assert!(run(&missing).is_err());
}

#[test]
fn bootstrap_self_comparison_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), &[]);
    let ds = marketgan::dataio::load_dataset(
        &dir.path().join("returns.csv"),
        &dir.path().join("factors.csv"),
        &dir.path().join("covariates.csv"),
        None,
    )
    .unwrap();
    let data = marketgan::train::TrainingData::prepare(&ds, 60, 500).unwrap();
    let a = marketgan::train::bootstrap_paths(&data, (500, 600), 1, 4).unwrap();
    let b = marketgan::train::bootstrap_paths(&data, (500, 600), 1, 4).unwrap();
    let settings = marketgan::metrics::ReportSettings { max_lag: 10, ..Default::default() };
    let r = marketgan::metrics::evaluate(&a[0], &b, 3, &settings).unwrap();
    for v in [r.fid, r.swd, r.dtw, r.acf, r.vc, r.lev, r.xcorr, r.xcorr_e] {
        assert!(v.abs() < 1e-6, "{r:?}");
    }
}

fn backtest_cfg(data: &Path, out: &Path, extra: &[(&str, String)]) -> RunConfig {
    let mut pairs = vec![
        ("data", p(data)),
        ("out", p(out)),
        ("coefficient_window", "60".into()),
        ("benchmark_window", "200".into()),
        ("synthetic_samples", "100".into()),
        ("forecast_window", "100".into()),
        ("r2", "1,0.1".into()),
    ];
    pairs.extend_from_slice(extra);
    cfg(Command::Backtest, &pairs)
}

#[test]
fn benchmark_grid_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("fx");
    fixture(&data, &[]);
    let out = dir.path().join("bt");
    let o = run(&backtest_cfg(&data, &out, &[("models", "sample,ledoit_wolf,factor".into())])).unwrap();
    assert!(o.success());
    assert_eq!(o.cells, 3);
    for c in ["sample", "ledoit_wolf", "factor"] {
        assert!(out.join("cells").join(c).join("summary.json").exists());
    }
    let default = RunConfig::resolve(Command::Backtest, None, &[]).unwrap();
    assert_eq!(default.get_list::<f64>("r2").unwrap(), vec![1.0, 0.5, 0.1, 0.01, 0.001]);
}

#[test]
fn failing_cells_are_recorded_and_the_rest_complete() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("fx");
    fixture(&data, &[]);
    let out = dir.path().join("bt");
    let o = run(&backtest_cfg(&data, &out, &[("models", "sample,marketgan".into()), ("forecasts", "var".into())])).unwrap();
    assert!(!o.success());
    assert_eq!(o.failed.len(), 1);
    assert!(out.join("cells/sample/summary.json").exists());
    assert!(out.join("cells/marketgan-var/error.txt").exists());
    let grid = String::from_utf8(read(&out.join("grid.csv"))).unwrap();
    assert!(grid.contains("marketgan-var,error"));

    let status = Process::new(env!("CARGO_BIN_EXE_marketgan"))
        .args(["backtest", "--data", &p(&data), "--out", &p(&dir.path().join("bin"))])
        .args(["--set", "coefficient_window=60", "--set", "benchmark_window=200", "--set", "models=sample,marketgan"])
        .args(["--set", "forecasts=var"])
        .env("RUST_LOG", "off")
        .status()
        .unwrap();
    assert!(!status.success());
    let status = Process::new(env!("CARGO_BIN_EXE_marketgan"))
        .args(["backtest", "--data", &p(&data), "--out", &p(&dir.path().join("bin2"))])
        .args(["--set", "coefficient_window=60", "--set", "benchmark_window=200", "--set", "models=sample"])
        .args(["--cost-bps", "10", "--seed", "3"])
        .env("RUST_LOG", "off")
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn backtest_is_deterministic_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("fx");
    fixture(&data, &[]);
    let train = dir.path().join("tr");
    run(&tiny_train(&data, &train, &[])).unwrap();
    let extra = [
        ("models", "factor,bootstrap,marketgan".to_string()),
        ("checkpoint", p(&train)),
        ("forecasts", "rolling_average,perturbed".into()),
        ("cost_bps", "5".into()),
    ];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&backtest_cfg(&data, &a, &extra)).unwrap().success());
    std::env::set_var(marketgan_cli::WORKERS_ENV, "3");
    let ob = run(&backtest_cfg(&data, &b, &extra)).unwrap();
    std::env::remove_var(marketgan_cli::WORKERS_ENV);
    assert!(ob.success());
    assert_eq!(ob.cells, 1 + 2 * 3);
    assert_eq!(read(&a.join("grid.csv")), read(&b.join("grid.csv")));
    for cell in ["factor", "bootstrap-perturbed-r2_0.1", "marketgan-rolling_average"] {
        for f in ["summary.json", "daily.csv"] {
            let path = Path::new("cells").join(cell).join(f);
            assert_eq!(read(&a.join(&path)), read(&b.join(&path)), "{}", path.display());
        }
    }
}
