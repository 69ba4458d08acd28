//! Run configuration: flat `section.key = value` text over profile defaults.

use std::fmt::Write as _;
use std::path::PathBuf;

use chanest::eval::SweepSpec;
use chanest::mambanet::{ScanMode, TokenOrder};
use chanest::training::{DataSpec, TrainConfig};
use chanest::{BasebandConfig, Error, MambaNetConfig, PowerDelayProfile, Result};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Profile {
    /// Reduced link and training budget for quick runs.
    #[default]
    Desk,
    /// Full-size link, dataset and schedule.
    Paper,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

/// Architecture knobs that do not follow from the baseband numerology.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    /// `None` uses one head per pilot symbol.
    pub n_heads: Option<usize>,
    pub c_spread: usize,
    pub n_res_blocks: usize,
    pub cnn_channels: usize,
    pub head_kernel: (usize, usize),
    pub body_kernel: (usize, usize),
    pub eps: f64,
    pub token_order: TokenOrder,
    pub scan_mode: ScanMode,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let base = MambaNetConfig::for_baseband(&BasebandConfig::default());
        Self {
            n_heads: None,
            c_spread: base.c_spread,
            n_res_blocks: base.n_res_blocks,
            cnn_channels: base.cnn_channels,
            head_kernel: base.head_kernel,
            body_kernel: base.body_kernel,
            eps: base.eps,
            token_order: base.token_order,
            scan_mode: base.scan_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub baseband: BasebandConfig,
    pub pdp: String,
    pub model: ModelSettings,
    pub data: DataSpec,
    pub train: TrainConfig,
    pub eval: SweepSpec,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_owned(),
        reason: reason.into(),
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err(key, format!("cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_kernel(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v
        .split_once('x')
        .ok_or_else(|| config_err(key, format!("expected HxW, got `{v}`")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut c = Self {
            profile,
            baseband: BasebandConfig::default(),
            pdp: "etu".into(),
            model: ModelSettings::default(),
            data: DataSpec::default(),
            train: TrainConfig::default(),
            eval: SweepSpec::default(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            workers: 0,
        };
        if profile == Profile::Desk {
            c.baseband.n_f = 48;
            c.data.count = 10_000;
            c.train.max_epochs = 20;
            c.train.minibatch = 8;
            c.train.initial_lr = 1e-3;
            c.train.lr_drop_period = 5;
            c.eval.n_trials = 1_000;
        }
        c
    }

    /// Apply `section.key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(&format!("line {}", n + 1), "expected `key = value`"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let bb = &mut self.baseband;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "baseband.n_f" => bb.n_f = parse(key, v)?,
            "baseband.n_s" => bb.n_s = parse(key, v)?,
            "baseband.l_cp" => bb.l_cp = parse(key, v)?,
            "baseband.l_s" => bb.l_s = parse(key, v)?,
            "baseband.pilot_symbols" => bb.pilot_symbols = parse_list(key, v)?,
            "baseband.pilot_offset" => bb.pilot_offset = parse(key, v)?,
            "baseband.f_space" => bb.f_space = parse(key, v)?,
            "baseband.f_r" => bb.f_r = parse(key, v)?,
            "channel.pdp" => self.pdp = v.to_owned(),
            "model.n_heads" => {
                m.n_heads = match v {
                    "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "model.c_spread" => m.c_spread = parse(key, v)?,
            "model.n_res_blocks" => m.n_res_blocks = parse(key, v)?,
            "model.cnn_channels" => m.cnn_channels = parse(key, v)?,
            "model.head_kernel" => m.head_kernel = parse_kernel(key, v)?,
            "model.body_kernel" => m.body_kernel = parse_kernel(key, v)?,
            "model.eps" => m.eps = parse(key, v)?,
            "model.token_order" => {
                m.token_order = match v {
                    "pilot-symbol-major" => TokenOrder::PilotSymbolMajor,
                    "subcarrier-major" => TokenOrder::SubcarrierMajor,
                    _ => return Err(config_err(key, "expected pilot-symbol-major or subcarrier-major")),
                }
            }
            "model.scan_mode" => {
                m.scan_mode = match v {
                    "sequential" => ScanMode::Sequential,
                    "parallel" => ScanMode::Parallel,
                    _ => return Err(config_err(key, "expected sequential or parallel")),
                }
            }
            "data.count" => self.data.count = parse(key, v)?,
            "data.snr_min" => self.data.snr_range.0 = parse(key, v)?,
            "data.snr_max" => self.data.snr_range.1 = parse(key, v)?,
            "data.fd_min" => self.data.fd_range.0 = parse(key, v)?,
            "data.fd_max" => self.data.fd_range.1 = parse(key, v)?,
            "train.initial_lr" => t.initial_lr = parse(key, v)?,
            "train.lr_drop_period" => t.lr_drop_period = parse(key, v)?,
            "train.lr_drop_factor" => t.lr_drop_factor = parse(key, v)?,
            "train.max_epochs" => t.max_epochs = parse(key, v)?,
            "train.minibatch" => t.minibatch = parse(key, v)?,
            "train.l2" => t.l2 = parse(key, v)?,
            "train.huber_delta" => t.huber_delta = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam_eps = parse(key, v)?,
            "eval.snr_db" => self.eval.snr_db = parse_list(key, v)?,
            "eval.n_trials" => self.eval.n_trials = parse(key, v)?,
            "eval.fd_min" => self.eval.fd_range.0 = parse(key, v)?,
            "eval.fd_max" => self.eval.fd_range.1 = parse(key, v)?,
            "run.seed" => self.seed = parse(key, v)?,
            "run.workers" => self.workers = parse(key, v)?,
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(config_err(key, "unknown key")),
        }
        Ok(())
    }

    pub fn model_config(&self) -> MambaNetConfig {
        let base = MambaNetConfig::for_baseband(&self.baseband);
        let m = &self.model;
        MambaNetConfig {
            n_heads: m.n_heads.unwrap_or(base.n_heads),
            c_spread: m.c_spread,
            n_res_blocks: m.n_res_blocks,
            cnn_channels: m.cnn_channels,
            head_kernel: m.head_kernel,
            body_kernel: m.body_kernel,
            eps: m.eps,
            token_order: m.token_order,
            scan_mode: m.scan_mode,
            ..base
        }
    }

    pub fn power_delay_profile(&self) -> Result<PowerDelayProfile> {
        PowerDelayProfile::builtin(&self.pdp).ok_or_else(|| config_err("channel.pdp", "expected etu or flat"))
    }

    /// Check every section; the error names the first offending key.
    pub fn validate(&self) -> Result<()> {
        self.baseband.validate()?;
        if self.baseband.pilot_symbols.len() < 2 {
            return Err(config_err("baseband.pilot_symbols", "interpolation needs at least two pilot symbols"));
        }
        self.power_delay_profile()?;
        self.model_config().validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.eval.n_trials == 0 {
            return Err(config_err("eval.n_trials", "must be at least 1"));
        }
        if self.eval.snr_db.is_empty() || self.eval.snr_db.iter().any(|s| s.is_nan()) {
            return Err(config_err("eval.snr_db", "needs at least one SNR value"));
        }
        let (lo, hi) = self.eval.fd_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(config_err("eval.fd_min", "needs 0 <= fd_min <= fd_max < inf"));
        }
        Ok(())
    }

    /// Every setting that influences results, one `key = value` per line in a
    /// fixed order. The output directory and worker count are excluded.
    pub fn canonical_text(&self) -> String {
        let bb = &self.baseband;
        let m = self.model_config();
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("baseband.n_f", bb.n_f.to_string());
        put("baseband.n_s", bb.n_s.to_string());
        put("baseband.l_cp", bb.l_cp.to_string());
        put("baseband.l_s", bb.l_s.to_string());
        put("baseband.pilot_symbols", join(&bb.pilot_symbols));
        put("baseband.pilot_offset", bb.pilot_offset.to_string());
        put("baseband.f_space", bb.f_space.to_string());
        put("baseband.f_r", bb.f_r.to_string());
        put("channel.pdp", self.pdp.clone());
        let derived = ["model.n_f", "model.n_s", "model.pilots_per_symbol", "model.n_pilot"];
        for (k, v) in m.to_header() {
            if !derived.contains(&k.as_str()) {
                put(&k, v);
            }
        }
        put("data.count", self.data.count.to_string());
        put("data.snr_min", self.data.snr_range.0.to_string());
        put("data.snr_max", self.data.snr_range.1.to_string());
        put("data.fd_min", self.data.fd_range.0.to_string());
        put("data.fd_max", self.data.fd_range.1.to_string());
        put("train.initial_lr", t.initial_lr.to_string());
        put("train.lr_drop_period", t.lr_drop_period.to_string());
        put("train.lr_drop_factor", t.lr_drop_factor.to_string());
        put("train.max_epochs", t.max_epochs.to_string());
        put("train.minibatch", t.minibatch.to_string());
        put("train.l2", t.l2.to_string());
        put("train.huber_delta", t.huber_delta.to_string());
        put("train.beta1", t.beta1.to_string());
        put("train.beta2", t.beta2.to_string());
        put("train.adam_eps", t.adam_eps.to_string());
        put("eval.snr_db", join(&self.eval.snr_db));
        put("eval.n_trials", self.eval.n_trials.to_string());
        put("eval.fd_min", self.eval.fd_range.0.to_string());
        put("eval.fd_max", self.eval.fd_range.1.to_string());
        put("run.seed", self.seed.to_string());
        s
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::canonical_text`].
    pub fn hash(&self) -> String {
        short_hash(self.canonical_text().as_bytes())
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}
