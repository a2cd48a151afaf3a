//! `key = value` run configuration with per-command defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use marketgan::dataio::FixtureSpec;
use marketgan::metrics::ReportSettings;
use marketgan::netgen::{CriticConfig, GeneratorConfig};
use marketgan::portfolio::{DEFAULT_SYNTHETIC_SAMPLES, R2_GRID};
use marketgan::train::TrainConfig;

use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fixture,
    Train,
    Evaluate,
    Backtest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fixture => "fixture",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Backtest => "backtest",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named random streams; each is keyed off `seed` and recorded in the snapshot.
pub const STREAMS: [(&str, u64); 7] = [
    ("data", 1),
    ("latent", 2),
    ("dropout", 3),
    ("validation", 4),
    ("fine_tune", 5),
    ("perturbation", 6),
    ("synthetic", 7),
];

pub const STREAM_PERTURBATION: u64 = 6;
pub const STREAM_SYNTHETIC: u64 = 7;

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn defaults(command: Command) -> Vec<(&'static str, String)> {
    let mut d: Vec<(&'static str, String)> =
        vec![("seed", "0".into()), ("out", "out".into()), ("factors", "1".into())];
    if command != Command::Fixture {
        d.extend([
            ("data", String::new()),
            ("coefficient_window", TrainConfig::default().coefficient_window.to_string()),
            ("test_start", "auto".into()),
            ("impute_neighbors", "5".into()),
        ]);
    }
    match command {
        Command::Fixture => {
            let f = FixtureSpec::default();
            d.extend([
                ("assets", f.num_assets.to_string()),
                ("dates", f.num_dates.to_string()),
                ("alpha", f.alpha.to_string()),
                ("sigma", f.sigma.to_string()),
                ("residual_corr", f.residual_corr.to_string()),
                ("covariate_persistence", f.covariate_persistence.to_string()),
                ("factor_mean", f.factor_mean.to_string()),
                ("factor_vol", f.factor_vol.to_string()),
                ("beta_low", f.beta_low.to_string()),
                ("beta_high", f.beta_high.to_string()),
                ("leverage", f.leverage.to_string()),
            ]);
        }
        Command::Train => {
            let t = TrainConfig::default();
            let g = GeneratorConfig::full(1, 1, 1);
            let c = CriticConfig::full(1, 1);
            d.extend([
                ("epochs", t.epochs.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("learning_rate", t.learning_rate.to_string()),
                ("beta1", t.beta1.to_string()),
                ("beta2", t.beta2.to_string()),
                ("adam_eps", t.adam_eps.to_string()),
                ("n_critic", t.n_critic.to_string()),
                ("n_generator", t.n_generator.to_string()),
                ("lambda", t.lambda.to_string()),
                ("window_len", "auto".into()),
                ("fine_tune_epochs", t.fine_tune_epochs.to_string()),
                ("fine_tune_lr_scale", t.fine_tune_lr_scale.to_string()),
                ("patience", "none".into()),
                ("max_batches_per_epoch", "none".into()),
                ("validation_paths", t.validation_paths.to_string()),
                ("rolling", "false".into()),
                ("rolling_epochs", t.rolling.epochs.to_string()),
                ("rolling_patience", t.rolling.patience.to_string()),
                ("rolling_step", t.rolling.step.to_string()),
                ("rolling_train_len", "auto".into()),
                ("resume", "none".into()),
                ("hidden", g.hidden.to_string()),
                ("kernel_size", g.kernel_size.to_string()),
                ("dilation_base", g.dilation_base.to_string()),
                ("num_blocks", g.num_blocks.to_string()),
                ("residual_hidden", g.residual_hidden.to_string()),
                ("residual_blocks", g.residual_blocks.to_string()),
                ("latent_dim", g.latent_dim.to_string()),
                ("dropout", g.dropout.to_string()),
                ("init_std", g.init_std.to_string()),
                ("output_init_std", g.output_init_std.to_string()),
                ("critic_hidden", c.hidden.to_string()),
                ("critic_blocks", c.num_blocks.to_string()),
                ("critic_dropout", c.dropout.to_string()),
                ("critic_init_std", c.init_std.to_string()),
                ("critic_output_init_std", c.output_init_std.to_string()),
            ]);
        }
        Command::Evaluate => {
            let r = ReportSettings::default();
            d.extend([
                ("model", "marketgan".into()),
                ("checkpoint", "none".into()),
                ("paths", "100".into()),
                ("max_lag", r.max_lag.to_string()),
                ("tail_level", r.tail_level.to_string()),
                ("projections", r.num_projections.to_string()),
                ("dtw_max_len", r.dtw_max_len.to_string()),
                ("bins", "50".into()),
                ("horizons", "1".into()),
            ]);
        }
        Command::Backtest => {
            d.extend([
                ("models", "sample,ledoit_wolf,factor,bootstrap".into()),
                ("checkpoint", "none".into()),
                ("forecasts", "rolling_average,var,perturbed".into()),
                ("r2", list(&R2_GRID)),
                ("forecast_window", "252".into()),
                ("benchmark_window", marketgan::factor::BENCHMARK_WINDOW.to_string()),
                ("synthetic_samples", DEFAULT_SYNTHETIC_SAMPLES.to_string()),
                ("cost_bps", "0".into()),
                ("start", "auto".into()),
                ("end", "auto".into()),
            ]);
        }
    }
    d
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(CliError::Config(format!("{origin}:{}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Fully resolved settings for one command: defaults, then file, then flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn resolve(command: Command, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            defaults(command).into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let mut layers = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io { path: path.display().to_string(), detail: e.to_string() })?;
            layers.extend(parse_pairs(&text, &path.display().to_string())?);
        }
        layers.extend(overrides.iter().cloned());
        for (k, v) in layers {
            match values.get_mut(&k) {
                Some(slot) => *slot = v,
                None => return Err(CliError::Config(format!("unknown key {k:?} for {command}"))),
            }
        }
        Ok(Self { command, values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| CliError::Config(format!("{key} = {v:?} is not valid")))
    }

    /// `none`, `auto` and the empty string read as `None`.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            "" | "none" | "auto" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| CliError::Config(format!("{key}: {s:?} is not valid"))))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# marketgan {}\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str("# random streams, each derived from seed\n");
        for (name, id) in STREAMS {
            s.push_str(&format!("# stream.{name} = {id}\n"));
        }
        s
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.resolved");
        std::fs::write(&path, self.to_text())
            .map_err(|e| CliError::Io { path: path.display().to_string(), detail: e.to_string() })
    }
}
