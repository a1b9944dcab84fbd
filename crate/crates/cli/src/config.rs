//! Flat `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the preset's defaults (when
//! `preset` is set), the config file, then command-line `--set` pairs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dfm::data::Preset;
use dfm::flow::{Mode, OdeMethod, TrainConfig};

use crate::{CliError, Result};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "DFM_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub preset: Option<Preset>,
    /// Dataset CSV used instead of a preset.
    pub data: Option<PathBuf>,
    /// Paired evaluation split CSV.
    pub eval_data: Option<PathBuf>,
    /// Point-cloud surface (`x y z` rows).
    pub surface: Option<PathBuf>,
    pub out: PathBuf,
    pub eval_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            preset: None,
            data: None,
            eval_data: None,
            surface: None,
            out: PathBuf::from("run"),
            eval_size: 500,
        }
    }
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "preset",
    "data",
    "eval_data",
    "surface",
    "out",
    "eval_size",
    "mode",
    "seed",
    "interp_iters",
    "fm_iters",
    "batch_size",
    "lr_velocity",
    "lr_interp",
    "sigma_space",
    "sigma_time",
    "eta",
    "fd_step",
    "ode_steps",
    "ode_method",
    "hidden",
    "interp_hidden",
    "time_input",
    "interp_init_gain",
    "lambda",
    "lambda1",
    "lambda2",
    "land_sigma",
    "land_eps",
    "weight_decay",
    "ema_decay",
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::Config {
            line: Some(i + 1),
            msg: format!("expected `key = value`, found {raw:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` command-line override.
pub fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, found {s:?}"))
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| CliError::Config {
        line: None,
        msg: format!("{key}: cannot parse {v:?}: {e}"),
    })
}

fn parse_widths(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|w| parse(key, w.trim())).collect()
}

fn widths(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Resolves layered pairs (later pairs win) into a configuration.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        for (k, _) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(CliError::Config {
                    line: None,
                    msg: format!("unknown key {k:?}"),
                });
            }
        }
        let mut cfg = RunConfig::default();
        if let Some((_, p)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            let preset: Preset = parse("preset", p)?;
            cfg.preset = Some(preset);
            cfg.train = TrainConfig::for_preset(preset);
        }
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.train.validate()?;
        if cfg.preset.is_none() && cfg.data.is_none() {
            return Err(CliError::Config {
                line: None,
                msg: "set either `preset` or `data`".into(),
            });
        }
        Ok(cfg)
    }

    /// Reads a config file and applies overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "preset" => {}
            "data" => self.data = Some(PathBuf::from(v)),
            "eval_data" => self.eval_data = Some(PathBuf::from(v)),
            "surface" => self.surface = Some(PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "eval_size" => self.eval_size = parse(key, v)?,
            "mode" => t.mode = parse::<Mode>(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "interp_iters" => t.interp_iters = parse(key, v)?,
            "fm_iters" => t.fm_iters = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr_velocity" => t.lr_velocity = parse(key, v)?,
            "lr_interp" => t.lr_interp = parse(key, v)?,
            "sigma_space" => t.kernel.sigma_space = parse(key, v)?,
            "sigma_time" => t.kernel.sigma_time = parse(key, v)?,
            "eta" => t.kernel.eta = parse(key, v)?,
            "fd_step" => t.fd_step = parse(key, v)?,
            "ode_steps" => t.ode_steps = parse(key, v)?,
            "ode_method" => t.ode_method = parse::<OdeMethod>(key, v)?,
            "hidden" => t.hidden = parse_widths(key, v)?,
            "interp_hidden" => t.interp_hidden = parse_widths(key, v)?,
            "time_input" => t.time_input = parse(key, v)?,
            "interp_init_gain" => t.interp_init_gain = parse(key, v)?,
            "lambda" => t.lambda = parse(key, v)?,
            "lambda1" => t.lambda1 = parse(key, v)?,
            "lambda2" => t.lambda2 = parse(key, v)?,
            "land_sigma" => t.land.sigma = parse(key, v)?,
            "land_eps" => t.land.eps = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "ema_decay" => t.ema_decay = parse(key, v)?,
            _ => unreachable!("keys are checked up front"),
        }
        Ok(())
    }

    /// Every key with its resolved value; [`RunConfig::from_pairs`] on the
    /// parsed text reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut s = String::new();
        for key in KEYS {
            let value = match *key {
                "preset" => self.preset.map(|p| p.to_string()),
                "data" => path(&self.data),
                "eval_data" => path(&self.eval_data),
                "surface" => path(&self.surface),
                "out" => Some(self.out.display().to_string()),
                "eval_size" => Some(self.eval_size.to_string()),
                "mode" => Some(t.mode.to_string()),
                "seed" => Some(t.seed.to_string()),
                "interp_iters" => Some(t.interp_iters.to_string()),
                "fm_iters" => Some(t.fm_iters.to_string()),
                "batch_size" => Some(t.batch_size.to_string()),
                "lr_velocity" => Some(t.lr_velocity.to_string()),
                "lr_interp" => Some(t.lr_interp.to_string()),
                "sigma_space" => Some(t.kernel.sigma_space.to_string()),
                "sigma_time" => Some(t.kernel.sigma_time.to_string()),
                "eta" => Some(t.kernel.eta.to_string()),
                "fd_step" => Some(t.fd_step.to_string()),
                "ode_steps" => Some(t.ode_steps.to_string()),
                "ode_method" => Some(t.ode_method.to_string()),
                "hidden" => Some(widths(&t.hidden)),
                "interp_hidden" => Some(widths(&t.interp_hidden)),
                "time_input" => Some(t.time_input.to_string()),
                "interp_init_gain" => Some(t.interp_init_gain.to_string()),
                "lambda" => Some(t.lambda.to_string()),
                "lambda1" => Some(t.lambda1.to_string()),
                "lambda2" => Some(t.lambda2.to_string()),
                "land_sigma" => Some(t.land.sigma.to_string()),
                "land_eps" => Some(t.land.eps.to_string()),
                "weight_decay" => Some(t.weight_decay.to_string()),
                "ema_decay" => Some(t.ema_decay.to_string()),
                _ => unreachable!(),
            };
            if let Some(v) = value {
                let _ = writeln!(s, "{key} = {v}");
            }
        }
        s
    }

    /// Checks that every input path exists.
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.data, &self.eval_data, &self.surface].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        Ok(())
    }
}

/// `dir` unchanged when absolute, otherwise below `$DFM_OUTPUT_ROOT` if set.
pub fn output_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}
