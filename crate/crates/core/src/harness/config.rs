use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::Strategy;
use crate::error::{Error, Result};
use crate::models::{
    DEFAULT_BATCH_SIZE, DEFAULT_LATENT_DIM, SEG_DEFAULT_EPOCHS, SEG_DEFAULT_LR, VAE_DEFAULT_EPOCHS, VAE_DEFAULT_LR,
};
use crate::sampling::{Method, DEFAULT_ALPHA, DEFAULT_THETA_MAX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    /// Both sites mixed; the segmenter starts from random weights.
    Scratch,
    /// Pretrain on site A, then suggest and fine-tune on site B.
    Transfer,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Scratch => "scratch",
            Scenario::Transfer => "transfer",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Scenario::Scratch),
            "transfer" => Ok(Scenario::Transfer),
            _ => Err(Error::Config(format!(
                "unknown scenario `{s}` (expected scratch or transfer)"
            ))),
        }
    }
}

/// One experiment: every method at every budget, repeated over seeds.
///
/// Budgets count patients in the patient strategy and slices in the image
/// strategy. Half of each budget is drawn at random for the initial model,
/// the other half is suggested.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub strategy: Strategy,
    pub budgets: Vec<usize>,
    pub epochs_initial: usize,
    pub epochs_after: usize,
    pub repeats: usize,
    /// Round `r` uses seed `seed + r`.
    pub seed: u64,
    pub alpha: f64,
    pub theta_max: f64,
    /// Suggestion rounds; values above 1 are experimental.
    pub rounds: usize,
    pub threshold: f64,
    pub seg_lr: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub vae_epochs: usize,
    pub vae_lr: f64,
    pub latent_dim: usize,
    /// Existing dataset directory; when absent a phantom set is generated.
    pub data: Option<PathBuf>,
    pub data_seed: u64,
    pub height: usize,
    pub width: usize,
    pub slices: usize,
    pub train_patients: usize,
    pub test_patients: usize,
    /// Record wall-clock times in the report. Off by default so that reports
    /// are byte-identical across runs.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::Scratch,
            methods: Method::ALL.to_vec(),
            strategy: Strategy::Patient,
            budgets: vec![8, 12, 16, 20],
            epochs_initial: SEG_DEFAULT_EPOCHS,
            epochs_after: SEG_DEFAULT_EPOCHS,
            repeats: 10,
            seed: 1,
            alpha: DEFAULT_ALPHA,
            theta_max: DEFAULT_THETA_MAX,
            rounds: 1,
            threshold: 0.5,
            seg_lr: SEG_DEFAULT_LR,
            batch_size: DEFAULT_BATCH_SIZE,
            pretrain_epochs: SEG_DEFAULT_EPOCHS,
            vae_epochs: VAE_DEFAULT_EPOCHS,
            vae_lr: VAE_DEFAULT_LR,
            latent_dim: DEFAULT_LATENT_DIM,
            data: None,
            data_seed: 1,
            height: 32,
            width: 32,
            slices: 8,
            train_patients: 60,
            test_patients: 20,
            timing: false,
        }
    }
}

pub const CONFIG_KEYS: [&str; 26] = [
    "scenario",
    "method",
    "strategy",
    "budget",
    "epochs_initial",
    "epochs_after",
    "repeats",
    "seed",
    "alpha",
    "theta_max",
    "rounds",
    "threshold",
    "seg_lr",
    "batch_size",
    "pretrain_epochs",
    "vae_epochs",
    "vae_lr",
    "latent_dim",
    "data",
    "data_seed",
    "height",
    "width",
    "slices",
    "train_patients",
    "test_patients",
    "timing",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one key from its textual value. Lists are comma separated.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "scenario" => self.scenario = v.parse()?,
            "method" => {
                self.methods = v
                    .split(',')
                    .map(str::trim)
                    .filter(|m| !m.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "strategy" => self.strategy = v.parse()?,
            "budget" => self.budgets = parse_list(key, v)?,
            "epochs_initial" => self.epochs_initial = parse(key, v)?,
            "epochs_after" => self.epochs_after = parse(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "theta_max" => self.theta_max = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "seg_lr" => self.seg_lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "vae_epochs" => self.vae_epochs = parse(key, v)?,
            "vae_lr" => self.vae_lr = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data_seed" => self.data_seed = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "slices" => self.slices = parse(key, v)?,
            "train_patients" => self.train_patients = parse(key, v)?,
            "test_patients" => self.test_patients = parse(key, v)?,
            "timing" => self.timing = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a TOML document of flat keys on top of `self`.
    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config file: {}", e.message())))?;
        for (key, value) in table {
            let text = match value {
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                toml::Value::Array(items) => items
                    .iter()
                    .map(|i| match i {
                        toml::Value::String(s) => Ok(s.clone()),
                        toml::Value::Integer(n) => Ok(n.to_string()),
                        toml::Value::Float(f) => Ok(f.to_string()),
                        _ => Err(Error::Config(format!("`{key}`: unsupported list item"))),
                    })
                    .collect::<Result<Vec<_>>>()?
                    .join(","),
                _ => return Err(Error::Config(format!("`{key}` must be a scalar or a list"))),
            };
            self.set(&key, &text)?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.merge_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.methods.is_empty() {
            return fail("at least one method is required".into());
        }
        if self.budgets.is_empty() {
            return fail("at least one budget is required".into());
        }
        if let Some(b) = self.budgets.iter().find(|&&b| b == 0 || b % 2 != 0) {
            return fail(format!("budget {b} must be even and positive"));
        }
        if self.repeats == 0 || self.rounds == 0 {
            return fail("repeats and rounds must be at least 1".into());
        }
        if self.budgets.iter().any(|&b| b / 2 < self.rounds) {
            return fail("every round needs at least one suggestion".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.theta_max > 0.0 && self.theta_max <= 180.0) {
            return fail(format!("theta_max must lie in (0, 180], got {}", self.theta_max));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if !(self.seg_lr > 0.0 && self.vae_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if self.batch_size == 0 || self.latent_dim == 0 || self.slices == 0 {
            return fail("batch_size, latent_dim and slices must be positive".into());
        }
        if self.data.is_none() && (self.train_patients == 0 || self.test_patients == 0) {
            return fail("train_patients and test_patients must be positive".into());
        }
        Ok(())
    }
}

/// The resolved configuration as a TOML document that parses back to itself.
impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let quoted = |items: &[String]| {
            items
                .iter()
                .map(|s| format!("\"{s}\""))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let methods: Vec<String> = self.methods.iter().map(Method::to_string).collect();
        writeln!(f, "scenario = \"{}\"", self.scenario)?;
        writeln!(f, "method = [{}]", quoted(&methods))?;
        writeln!(f, "strategy = \"{}\"", self.strategy)?;
        writeln!(f, "budget = [{}]", join(&self.budgets).replace(',', ", "))?;
        writeln!(f, "epochs_initial = {}", self.epochs_initial)?;
        writeln!(f, "epochs_after = {}", self.epochs_after)?;
        writeln!(f, "repeats = {}", self.repeats)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "alpha = {:?}", self.alpha)?;
        writeln!(f, "theta_max = {:?}", self.theta_max)?;
        writeln!(f, "rounds = {}", self.rounds)?;
        writeln!(f, "threshold = {:?}", self.threshold)?;
        writeln!(f, "seg_lr = {:?}", self.seg_lr)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "pretrain_epochs = {}", self.pretrain_epochs)?;
        writeln!(f, "vae_epochs = {}", self.vae_epochs)?;
        writeln!(f, "vae_lr = {:?}", self.vae_lr)?;
        writeln!(f, "latent_dim = {}", self.latent_dim)?;
        match &self.data {
            Some(p) => writeln!(f, "data = {:?}", p.display().to_string())?,
            None => writeln!(f, "data = \"\"")?,
        }
        writeln!(f, "data_seed = {}", self.data_seed)?;
        writeln!(f, "height = {}", self.height)?;
        writeln!(f, "width = {}", self.width)?;
        writeln!(f, "slices = {}", self.slices)?;
        writeln!(f, "train_patients = {}", self.train_patients)?;
        writeln!(f, "test_patients = {}", self.test_patients)?;
        writeln!(f, "timing = {}", self.timing)
    }
}
