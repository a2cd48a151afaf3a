//! The four subcommands.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use marketgan::dataio::{self, FixtureSpec, MarketDataset, SplitSpec};
use marketgan::metrics::{self, CurveKind, MetricReport, ReportSettings};
use marketgan::netgen::{CriticConfig, GeneratorConfig, GeneratorModel};
use marketgan::portfolio::{
    self, BacktestResult, CovarianceKind, ForecastMethod, ForecastSpec, Perturber, SyntheticSource,
};
use marketgan::train::{
    self, stream_rng, Checkpoint, MarketGan, RollingConfig, RollingSchedule, TrainConfig, Trainer, TrainingData,
};
use nalgebra::DMatrix;
use rand::RngCore;
use serde::Serialize;

use crate::config::{Command, RunConfig, STREAM_PERTURBATION, STREAM_SYNTHETIC};
use crate::{CliError, Result};

/// Environment variable holding the number of worker threads for grid cells.
pub const WORKERS_ENV: &str = "MARKETGAN_WORKERS";

/// Cells that ran and those that failed, with their error text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub cells: usize,
    pub failed: Vec<(String, String)>,
}

impl Outcome {
    pub fn success(&self) -> bool {
        self.failed.is_empty()
    }
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let out = PathBuf::from(cfg.raw("out"));
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    cfg.write_snapshot(&out)?;
    match cfg.command {
        Command::Fixture => cmd_fixture(cfg, &out),
        Command::Train => cmd_train(cfg, &out),
        Command::Evaluate => cmd_evaluate(cfg, &out),
        Command::Backtest => cmd_backtest(cfg, &out),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io { path: path.display().to_string(), detail: e.to_string() }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, s + "\n").map_err(|e| io_err(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| io_err(path, e))
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn factor_count(cfg: &RunConfig) -> Result<usize> {
    let k: usize = cfg.get("factors")?;
    if ![1, 3, 5].contains(&k) {
        return Err(CliError::Config(format!("factors must be 1, 3 or 5, got {k}")));
    }
    Ok(k)
}

fn cmd_fixture(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let spec = FixtureSpec {
        num_assets: cfg.get("assets")?,
        num_factors: factor_count(cfg)?,
        num_dates: cfg.get("dates")?,
        seed: cfg.get("seed")?,
        alpha: cfg.get("alpha")?,
        sigma: cfg.get("sigma")?,
        residual_corr: cfg.get("residual_corr")?,
        covariate_persistence: cfg.get("covariate_persistence")?,
        factor_mean: cfg.get("factor_mean")?,
        factor_vol: cfg.get("factor_vol")?,
        beta_low: cfg.get("beta_low")?,
        beta_high: cfg.get("beta_high")?,
        leverage: cfg.get("leverage")?,
        ..FixtureSpec::default()
    };
    let fixture = dataio::simulate_market(&spec)?;
    dataio::write_fixture(out, &fixture)?;
    info!("wrote {} dates of {} assets to {}", spec.num_dates, spec.num_assets, out.display());
    Ok(Outcome { cells: 1, failed: Vec::new() })
}

/// Dataset from `data`, imputed when returns are missing and cut to the configured factor count.
pub fn load_data(cfg: &RunConfig) -> Result<MarketDataset> {
    let dir = cfg.raw("data");
    if dir.is_empty() {
        return Err(CliError::Config("data directory is required".into()));
    }
    let dir = Path::new(dir);
    let rf = dir.join("risk_free.csv");
    let mut ds = dataio::load_dataset(
        &dir.join("returns.csv"),
        &dir.join("factors.csv"),
        &dir.join("covariates.csv"),
        rf.exists().then_some(rf.as_path()),
    )?;
    if ds.returns.has_missing() {
        let imp = dataio::impute_missing_returns(&ds, cfg.get("impute_neighbors")?)?;
        if !imp.excluded.is_empty() {
            warn!("{} assets have no observations and stay missing", imp.excluded.len());
        }
        ds = MarketDataset::new(imp.returns, ds.factors.clone(), ds.covariates.clone())?;
    }
    Ok(ds.with_factor_count(factor_count(cfg)?)?)
}

/// Coefficient window and first out-of-sample row.
fn layout(cfg: &RunConfig, ds: &MarketDataset) -> Result<(usize, usize)> {
    let cw: usize = cfg.get("coefficient_window")?;
    let t_len = ds.len();
    let test_start = cfg.get_opt("test_start")?.unwrap_or(t_len - t_len / 8);
    if cw == 0 || test_start <= cw + 2 || test_start > t_len {
        return Err(CliError::Config(format!(
            "test_start {test_start} must lie in ({}, {t_len}] for a coefficient window of {cw}",
            cw + 2
        )));
    }
    Ok((cw, test_start))
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: cfg.get("epochs")?,
        batch_size: cfg.get("batch_size")?,
        learning_rate: cfg.get("learning_rate")?,
        beta1: cfg.get("beta1")?,
        beta2: cfg.get("beta2")?,
        adam_eps: cfg.get("adam_eps")?,
        n_critic: cfg.get("n_critic")?,
        n_generator: cfg.get("n_generator")?,
        lambda: cfg.get("lambda")?,
        window_len: cfg.get_opt("window_len")?,
        fine_tune_epochs: cfg.get("fine_tune_epochs")?,
        fine_tune_lr_scale: cfg.get("fine_tune_lr_scale")?,
        patience: cfg.get_opt("patience")?,
        max_batches_per_epoch: cfg.get_opt("max_batches_per_epoch")?,
        validation_paths: cfg.get("validation_paths")?,
        coefficient_window: cfg.get("coefficient_window")?,
        seed: cfg.get("seed")?,
        rolling: RollingConfig {
            epochs: cfg.get("rolling_epochs")?,
            patience: cfg.get("rolling_patience")?,
            step: cfg.get("rolling_step")?,
        },
    })
}

fn model_configs(cfg: &RunConfig, ds: &MarketDataset) -> Result<(GeneratorConfig, CriticConfig)> {
    let (n, k, c) = (ds.num_assets(), ds.num_factors(), ds.covariate_dim());
    let g = GeneratorConfig {
        hidden: cfg.get("hidden")?,
        kernel_size: cfg.get("kernel_size")?,
        dilation_base: cfg.get("dilation_base")?,
        num_blocks: cfg.get("num_blocks")?,
        residual_hidden: cfg.get("residual_hidden")?,
        residual_blocks: cfg.get("residual_blocks")?,
        latent_dim: cfg.get("latent_dim")?,
        dropout: cfg.get("dropout")?,
        init_std: cfg.get("init_std")?,
        output_init_std: cfg.get("output_init_std")?,
        ..GeneratorConfig::full(n, k, c)
    };
    let cr = CriticConfig {
        hidden: cfg.get("critic_hidden")?,
        kernel_size: g.kernel_size,
        dilation_base: g.dilation_base,
        num_blocks: cfg.get("critic_blocks")?,
        dropout: cfg.get("critic_dropout")?,
        init_std: cfg.get("critic_init_std")?,
        output_init_std: cfg.get("critic_output_init_std")?,
        ..CriticConfig::full(n, c)
    };
    Ok((g, cr))
}

fn quarter_file(end: usize) -> String {
    format!("quarter-{end:06}.json")
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let ds = load_data(cfg)?;
    let (cw, test_start) = layout(cfg, &ds)?;
    let split = SplitSpec::seven_to_one(cw + 1, test_start);
    let tcfg = train_config(cfg)?;
    let (mut trainer, data) = match cfg.get_opt::<PathBuf>("resume")? {
        Some(path) => {
            let ck = Checkpoint::load(&path)?;
            let mut t = Trainer::from_checkpoint(&ck)?;
            tcfg.validate()?;
            t.config = tcfg;
            info!("resuming from {} at epoch {}", path.display(), t.state.epoch);
            (t, ck.training_data(&ds)?)
        }
        None => {
            let (g, c) = model_configs(cfg, &ds)?;
            let seed = tcfg.seed;
            let t = Trainer::new(MarketGan::new(g, c, seed)?, tcfg)?;
            (t, TrainingData::prepare(&ds, cw, split.train.1)?)
        }
    };
    info!("{} trainable parameters", train::parameter_count(&trainer.model));
    let summary = trainer.fit(&data, &split)?;
    trainer.checkpoint(&data).save(&out.join("checkpoint.json"))?;
    write_json(&out.join("summary.json"), &summary)?;
    if cfg.get::<bool>("rolling")? {
        let step = trainer.config.rolling.step;
        let train_len = cfg.get_opt("rolling_train_len")?.unwrap_or(test_start - cw - 1);
        let schedule = RollingSchedule::quarterly(test_start + step, ds.len() - 1, step, train_len);
        let quarters = train::rolling_retrain(&mut trainer, &data, &schedule)?;
        let dir = out.join("quarters");
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let mut rows = Vec::new();
        for q in &quarters {
            q.checkpoint.save(&dir.join(quarter_file(q.end)))?;
            rows.push(vec![
                q.end.to_string(),
                format!("{:?}", q.initial_score),
                q.summary.best_score.map_or_else(String::new, |s| format!("{s:?}")),
                q.summary.epochs_run.to_string(),
            ]);
        }
        let header = ["end", "initial_score", "best_score", "epochs_run"].map(String::from);
        write_rows(&out.join("quarters.csv"), &header, &rows)?;
    }
    // logs cover the initial fit and every retraining quarter
    train::write_epoch_log(&out.join("training_log.csv"), &trainer.state.log)?;
    train::write_batch_log(&out.join("batch_log.csv"), &trainer.state.batch_log)?;
    Ok(Outcome { cells: 1, failed: Vec::new() })
}

fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("checkpoint.json")
    } else {
        path.to_path_buf()
    }
}

fn report_settings(cfg: &RunConfig) -> Result<ReportSettings> {
    Ok(ReportSettings {
        max_lag: cfg.get("max_lag")?,
        tail_level: cfg.get("tail_level")?,
        num_projections: cfg.get("projections")?,
        projection_seed: cfg.get("seed")?,
        dtw_max_len: cfg.get("dtw_max_len")?,
    })
}

fn matrix_rows(m: &DMatrix<f64>, names: &[String]) -> Vec<Vec<String>> {
    (0..m.nrows())
        .map(|i| {
            let mut row = vec![names[i].clone()];
            row.extend((0..m.ncols()).map(|j| format!("{:?}", m[(i, j)])));
            row
        })
        .collect()
}

fn mean_matrix<F>(paths: &[Vec<f64>], f: F) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> metrics::Result<DMatrix<f64>>,
{
    let mut acc: Option<DMatrix<f64>> = None;
    for p in paths {
        let m = f(p)?;
        acc = Some(match acc {
            Some(a) => a + m,
            None => m,
        });
    }
    Ok(acc.expect("at least one path") / paths.len() as f64)
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let ds = load_data(cfg)?;
    let (cw, test_start) = layout(cfg, &ds)?;
    let range = (test_start, ds.len());
    let num_paths: usize = cfg.get("paths")?;
    let seed: u64 = cfg.get("seed")?;
    if num_paths == 0 {
        return Err(CliError::Config("paths must be positive".into()));
    }
    let (data, paths) = match cfg.raw("model") {
        "bootstrap" => {
            let data = TrainingData::prepare(&ds, cw, test_start)?;
            let paths = train::bootstrap_paths(&data, range, num_paths, seed)?;
            (data, paths)
        }
        "marketgan" => {
            let path = cfg
                .get_opt::<PathBuf>("checkpoint")?
                .ok_or_else(|| CliError::Config("model = marketgan needs a checkpoint".into()))?;
            let ck = Checkpoint::load(&checkpoint_file(&path))?;
            let data = ck.training_data(&ds)?;
            let paths = train::generate_paths(&ck.generator()?, &data, range, num_paths, seed)?;
            (data, paths)
        }
        other => return Err(CliError::Config(format!("unknown model {other:?}; use marketgan or bootstrap"))),
    };
    let n = data.num_assets;
    let names = &data.asset_names;
    let real = data.returns_range(range);
    let settings = report_settings(cfg)?;
    for h in cfg.get_list::<usize>("horizons")? {
        let report = if h <= 1 {
            metrics::evaluate(&real, &paths, n, &settings)?
        } else {
            let agg = metrics::aggregate_returns(&real, n, h)?;
            let agg_paths = paths.iter().map(|p| metrics::aggregate_returns(p, n, h)).collect::<metrics::Result<Vec<_>>>()?;
            let rows = agg.len() / n;
            let s = ReportSettings { max_lag: settings.max_lag.min((rows / 4).max(1)), ..settings };
            metrics::evaluate(&agg, &agg_paths, n, &s)?
        };
        if report.low_sample {
            warn!("only {} paths; averages are noisy", report.num_paths);
        }
        let file = if h <= 1 { "report.json".to_string() } else { format!("report_h{h}.json") };
        write_json::<MetricReport>(&out.join(file), &report)?;
    }
    // stylized-fact curves, real against the path average
    let mut rows = Vec::new();
    for kind in [CurveKind::Acf, CurveKind::Vc, CurveKind::Lev] {
        for i in 0..n {
            let col = |p: &[f64]| p.iter().skip(i).step_by(n).copied().collect::<Vec<f64>>();
            let rc = metrics::stylized_curve(&col(&real), kind, settings.max_lag)?;
            let mut mean = vec![0.0; rc.values.len()];
            for p in &paths {
                let sc = metrics::stylized_curve(&col(p), kind, settings.max_lag)?;
                for (m, v) in mean.iter_mut().zip(&sc.values) {
                    *m += v / paths.len() as f64;
                }
            }
            for (lag, (r, s)) in rc.values.iter().zip(&mean).enumerate() {
                rows.push(vec![kind.name().into(), names[i].clone(), (lag + 1).to_string(), format!("{r:?}"), format!("{s:?}")]);
            }
        }
    }
    let header = ["kind", "asset", "lag", "real", "synthetic"].map(String::from);
    write_rows(&out.join("curves.csv"), &header, &rows)?;
    let mut header = vec![String::new()];
    header.extend(names.iter().cloned());
    let level = settings.tail_level;
    let xc = |d: &[f64]| metrics::cross_corr(d, n).map(|m| m.values);
    let xe = |d: &[f64]| metrics::extreme_cross_corr(d, n, level).map(|m| m.values);
    write_rows(&out.join("xcorr_real.csv"), &header, &matrix_rows(&xc(&real)?, names))?;
    write_rows(&out.join("xcorr_synthetic.csv"), &header, &matrix_rows(&mean_matrix(&paths, xc)?, names))?;
    write_rows(&out.join("xcorr_e_real.csv"), &header, &matrix_rows(&xe(&real)?, names))?;
    write_rows(&out.join("xcorr_e_synthetic.csv"), &header, &matrix_rows(&mean_matrix(&paths, xe)?, names))?;
    // equal-weight return distribution
    let ew_real = metrics::equal_weight_series(&real, n)?;
    let ew_syn: Vec<f64> =
        paths.iter().map(|p| metrics::equal_weight_series(p, n)).collect::<metrics::Result<Vec<_>>>()?.concat();
    let lo = ew_real.iter().chain(&ew_syn).copied().fold(f64::INFINITY, f64::min);
    let hi = ew_real.iter().chain(&ew_syn).copied().fold(f64::NEG_INFINITY, f64::max);
    let bins: usize = cfg.get("bins")?;
    let hr = metrics::histogram(&ew_real, lo, hi, bins)?;
    let hs = metrics::histogram(&ew_syn, lo, hi, bins)?;
    let rows: Vec<Vec<String>> = (0..bins)
        .map(|b| {
            vec![
                format!("{:?}", hr.edges[b]),
                format!("{:?}", hr.edges[b + 1]),
                (hr.counts[b] as f64 / ew_real.len() as f64).to_string(),
                (hs.counts[b] as f64 / ew_syn.len() as f64).to_string(),
            ]
        })
        .collect();
    let header = ["lower", "upper", "real", "synthetic"].map(String::from);
    write_rows(&out.join("histogram.csv"), &header, &rows)?;
    // first synthetic path as a dated panel
    let dates = &ds.calendar()[range.0..range.1];
    let rows: Vec<Vec<String>> = dates
        .iter()
        .zip(paths[0].chunks(n))
        .map(|(d, r)| std::iter::once(d.to_string()).chain(r.iter().map(|v| format!("{v:?}"))).collect())
        .collect();
    let mut header = vec!["date".to_string()];
    header.extend(names.iter().cloned());
    write_rows(&out.join("sample_path.csv"), &header, &rows)?;
    Ok(Outcome { cells: 1, failed: Vec::new() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Source {
    Bootstrap,
    MarketGan,
}

#[derive(Debug, Clone, PartialEq)]
enum CellKind {
    Benchmark(CovarianceKind),
    Synthetic { source: Source, forecast: ForecastSpec },
}

#[derive(Debug, Clone, PartialEq)]
struct Cell {
    name: String,
    kind: CellKind,
}

fn build_grid(cfg: &RunConfig, seed: u64) -> Result<Vec<Cell>> {
    let window: usize = cfg.get("forecast_window")?;
    let mut forecasts = Vec::new();
    for f in cfg.get_list::<String>("forecasts")? {
        match f.as_str() {
            "rolling_average" => forecasts.push(("rolling_average".to_string(), ForecastMethod::RollingAverage { window })),
            "var" => forecasts.push(("var".to_string(), ForecastMethod::Var1 { window })),
            "perturbed" => {
                for r2 in cfg.get_list::<f64>("r2")? {
                    forecasts.push((format!("perturbed-r2_{r2}"), ForecastMethod::Perturbed { r2 }));
                }
            }
            other => return Err(CliError::Config(format!("unknown forecast {other:?}"))),
        }
    }
    let mut cells = Vec::new();
    for m in cfg.get_list::<String>("models")? {
        let benchmark = match m.as_str() {
            "sample" => Some(CovarianceKind::Sample),
            "ledoit_wolf" => Some(CovarianceKind::LedoitWolf),
            "factor" => Some(CovarianceKind::Factor),
            _ => None,
        };
        if let Some(kind) = benchmark {
            cells.push(Cell { name: m.clone(), kind: CellKind::Benchmark(kind) });
            continue;
        }
        let source = match m.as_str() {
            "bootstrap" => Source::Bootstrap,
            "marketgan" => Source::MarketGan,
            other => return Err(CliError::Config(format!("unknown model {other:?}"))),
        };
        for (label, method) in &forecasts {
            let forecast = ForecastSpec { method: method.clone(), seed };
            forecast.validate()?;
            cells.push(Cell { name: format!("{m}-{label}"), kind: CellKind::Synthetic { source, forecast } });
        }
    }
    Ok(cells)
}

/// Generators with the data they were fitted on, keyed by the first row each may serve.
struct ModelBank {
    entries: Vec<(usize, GeneratorModel, TrainingData)>,
}

impl ModelBank {
    fn load(path: &Path, ds: &MarketDataset) -> Result<Self> {
        let mut files = vec![(0, checkpoint_file(path))];
        let qdir = path.join("quarters");
        if path.is_dir() && qdir.is_dir() {
            let mut q = Vec::new();
            for entry in std::fs::read_dir(&qdir).map_err(|e| io_err(&qdir, e))? {
                let p = entry.map_err(|e| io_err(&qdir, e))?.path();
                let end = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.strip_prefix("quarter-"))
                    .and_then(|s| s.parse::<usize>().ok());
                if let Some(end) = end {
                    q.push((end, p));
                }
            }
            q.sort();
            files.extend(q);
        }
        let mut entries = Vec::new();
        for (end, f) in files {
            let ck = Checkpoint::load(&f)?;
            entries.push((end, ck.generator()?, ck.training_data(ds)?));
        }
        Ok(Self { entries })
    }

    fn at(&self, t: usize) -> (&GeneratorModel, &TrainingData) {
        let e = self.entries.iter().rev().find(|e| e.0 <= t).unwrap_or(&self.entries[0]);
        (&e.1, &e.2)
    }
}

struct Grid<'a> {
    ds: &'a MarketDataset,
    range: (usize, usize),
    seed: u64,
    cost_bps: f64,
    samples: usize,
    benchmark_window: usize,
    bootstrap: &'a TrainingData,
    bank: Option<&'a std::result::Result<ModelBank, String>>,
}

impl Grid<'_> {
    fn run_cell(&self, cell: &Cell) -> std::result::Result<BacktestResult, String> {
        let ds = self.ds;
        let (n, k) = (ds.num_assets(), ds.num_factors());
        let returns = &ds.returns.values;
        let factors = &ds.factors.values;
        match &cell.kind {
            CellKind::Benchmark(kind) => portfolio::run_backtest(returns, n, self.range, self.cost_bps, |t| {
                portfolio::benchmark_weights(returns, factors, n, k, t, self.benchmark_window, *kind)
            })
            .map_err(|e| e.to_string()),
            CellKind::Synthetic { source, forecast } => {
                let bank = match source {
                    Source::MarketGan => match self.bank {
                        Some(Ok(b)) => Some(b),
                        Some(Err(e)) => return Err(e.clone()),
                        None => return Err("marketgan cells need a checkpoint".into()),
                    },
                    Source::Bootstrap => None,
                };
                let perturber = match forecast.method {
                    ForecastMethod::Perturbed { r2 } => {
                        Some(Perturber::from_history(factors, k, r2).map_err(|e| e.to_string())?)
                    }
                    _ => None,
                };
                portfolio::run_backtest(returns, n, self.range, self.cost_bps, |t| {
                    let mut rng = stream_rng(self.seed, STREAM_PERTURBATION, t as u64);
                    let f_next = portfolio::forecast_factors(factors, k, t, forecast, perturber.as_ref(), &mut rng)?;
                    let sample_seed = stream_rng(self.seed, STREAM_SYNTHETIC, t as u64).next_u64();
                    let (src, data) = match bank {
                        Some(b) => {
                            let (g, d) = b.at(t);
                            (SyntheticSource::MarketGan(g), d)
                        }
                        None => (SyntheticSource::Bootstrap, self.bootstrap),
                    };
                    let (mu, sigma) = portfolio::synthetic_moments(src, data, t - 1, &f_next, self.samples, sample_seed)?;
                    Ok(portfolio::tangency_long_only(&mu, &sigma)?.weights)
                })
                .map_err(|e| e.to_string())
            }
        }
    }
}

/// Worker count from the environment; at least one.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()).unwrap_or(1).max(1)
}

fn cmd_backtest(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let ds = load_data(cfg)?;
    let (cw, test_start) = layout(cfg, &ds)?;
    let start = cfg.get_opt("start")?.unwrap_or(test_start);
    let end = cfg.get_opt("end")?.unwrap_or(ds.len());
    if start == 0 || end <= start || end > ds.len() {
        return Err(CliError::Config(format!("backtest rows [{start}, {end}) are outside the data")));
    }
    let seed: u64 = cfg.get("seed")?;
    let cells = build_grid(cfg, seed)?;
    let needs_bank = cells.iter().any(|c| matches!(c.kind, CellKind::Synthetic { source: Source::MarketGan, .. }));
    let bank = if needs_bank {
        Some(match cfg.get_opt::<PathBuf>("checkpoint")? {
            Some(p) => ModelBank::load(&p, &ds).map_err(|e| e.to_string()),
            None => Err("marketgan cells need a checkpoint".to_string()),
        })
    } else {
        None
    };
    let bootstrap = TrainingData::prepare(&ds, cw, test_start)?;
    let grid = Grid {
        ds: &ds,
        range: (start, end),
        seed,
        cost_bps: cfg.get("cost_bps")?,
        samples: cfg.get("synthetic_samples")?,
        benchmark_window: cfg.get("benchmark_window")?,
        bootstrap: &bootstrap,
        bank: bank.as_ref(),
    };
    let dates: Vec<String> = ds.calendar()[start..end].iter().map(ToString::to_string).collect();
    let cells_dir = out.join("cells");
    let results: Vec<Mutex<Option<std::result::Result<BacktestResult, String>>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = worker_count().min(cells.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                info!("backtest cell {}", cell.name);
                let dir = cells_dir.join(&cell.name);
                let res = grid.run_cell(cell).and_then(|r| {
                    portfolio::write_backtest(&dir, &r, &dates, &ds.returns.columns).map_err(|e| e.to_string())?;
                    Ok(r)
                });
                if let Err(e) = &res {
                    warn!("cell {} failed: {e}", cell.name);
                    let _ = std::fs::create_dir_all(&dir);
                    let _ = std::fs::write(dir.join("error.txt"), format!("{e}\n"));
                }
                *results[i].lock().expect("unpoisoned") = Some(res);
            });
        }
    });
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (cell, slot) in cells.iter().zip(results) {
        let res = slot.into_inner().expect("unpoisoned").expect("every cell ran");
        rows.push(match res {
            Ok(r) => {
                let p = &r.report;
                vec![
                    cell.name.clone(),
                    "ok".into(),
                    p.sharpe.map_or_else(String::new, |s| format!("{s:?}")),
                    format!("{:?}", p.annual_return),
                    format!("{:?}", p.annual_std),
                    format!("{:?}", p.max_drawdown),
                    format!("{:?}", p.monthly_turnover),
                    String::new(),
                ]
            }
            Err(e) => {
                failed.push((cell.name.clone(), e.clone()));
                let mut row = vec![cell.name.clone(), "error".into()];
                row.extend(std::iter::repeat_n(String::new(), 5));
                row.push(e);
                row
            }
        });
    }
    let header = ["cell", "status", "sharpe", "annual_return", "annual_std", "max_drawdown", "monthly_turnover", "error"]
        .map(String::from);
    write_rows(&out.join("grid.csv"), &header, &rows)?;
    Ok(Outcome { cells: cells.len(), failed })
}
