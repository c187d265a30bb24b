//! Flat `key = value` run configuration: diff-friendly, typed, and strict
//! about unknown keys. The canonical rendering (every field, sorted) feeds
//! the config hash, so the hash changes exactly when a field does.

use crate::error::{Error, Result};
use crate::train::{NoRegCadence, TrainConfig};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

/// Which dataset a run trains on, parsed from the `dataset` key.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    /// MNIST-layout IDX directory, pixels scaled to [0, 1].
    IdxScale01 { dir: String },
    /// MNIST-layout IDX directory, per-channel standardized.
    IdxMeanStd { dir: String },
    /// Linearly separable blobs: blobs:<classes>:<per_class>:<size>.
    Blobs { classes: usize, per_class: usize, size: usize },
    /// Procedural digit glyphs: glyphs:<n_train>:<n_test>.
    Glyphs { n_train: usize, n_test: usize },
    /// Procedural garment silhouettes: shapes:<n_train>:<n_test>.
    Shapes { n_train: usize, n_test: usize },
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    /// Optional cap on train/test split sizes, applied after loading.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            dataset: DatasetSpec::Blobs { classes: 4, per_class: 64, size: 16 },
            train_limit: None,
            test_limit: None,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got `{v}`")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected a number, got `{v}`")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    if let Ok(n) = v.parse::<u64>() {
        return Ok(n);
    }
    // Budgets are often written in scientific notation.
    match v.parse::<f64>() {
        Ok(f) if f >= 0.0 && f.fract() == 0.0 && f <= u64::MAX as f64 => Ok(f as u64),
        _ => Err(Error::Config(format!("{key}: expected a whole number, got `{v}`"))),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got `{v}`"))),
    }
}

fn parse_dataset(v: &str) -> Result<DatasetSpec> {
    let parts: Vec<&str> = v.split(':').collect();
    match parts.as_slice() {
        ["idx", dir] => Ok(DatasetSpec::IdxScale01 { dir: (*dir).to_string() }),
        ["idx-meanstd", dir] => Ok(DatasetSpec::IdxMeanStd { dir: (*dir).to_string() }),
        ["blobs", c, p, s] => Ok(DatasetSpec::Blobs {
            classes: parse_usize("dataset", c)?,
            per_class: parse_usize("dataset", p)?,
            size: parse_usize("dataset", s)?,
        }),
        ["glyphs", tr, te] => Ok(DatasetSpec::Glyphs {
            n_train: parse_usize("dataset", tr)?,
            n_test: parse_usize("dataset", te)?,
        }),
        ["shapes", tr, te] => Ok(DatasetSpec::Shapes {
            n_train: parse_usize("dataset", tr)?,
            n_test: parse_usize("dataset", te)?,
        }),
        _ => Err(Error::Config(format!(
            "dataset: `{v}` is not idx:<dir>, idx-meanstd:<dir>, blobs:<c>:<n>:<size>, glyphs:<train>:<test> or shapes:<train>:<test>"
        ))),
    }
}

fn dataset_string(d: &DatasetSpec) -> String {
    match d {
        DatasetSpec::IdxScale01 { dir } => format!("idx:{dir}"),
        DatasetSpec::IdxMeanStd { dir } => format!("idx-meanstd:{dir}"),
        DatasetSpec::Blobs { classes, per_class, size } => format!("blobs:{classes}:{per_class}:{size}"),
        DatasetSpec::Glyphs { n_train, n_test } => format!("glyphs:{n_train}:{n_test}"),
        DatasetSpec::Shapes { n_train, n_test } => format!("shapes:{n_train}:{n_test}"),
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{origin}:{}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(Error::Config(format!("{origin}: duplicate key `{key}`")));
            }
            let t = &mut cfg.train;
            match key {
                "lambda_morph" => t.lambda_morph = parse_f64(key, value)?,
                "lambda_lasso" => t.lambda_lasso = parse_f64(key, value)?,
                "lambda_l2" => t.lambda_l2 = parse_f64(key, value)?,
                "tau_morph" => t.tau_morph = parse_f64(key, value)?,
                "tau_lasso" => t.tau_lasso = parse_f64(key, value)?,
                "budget" => t.budget = parse_u64(key, value)?,
                "inserts_per_routine" => t.inserts_per_routine = parse_usize(key, value)?,
                "n_routines" => t.n_routines = parse_usize(key, value)?,
                "theta_init" => t.theta_init = parse_f64(key, value)?,
                "epochs_per_phase" => t.epochs_per_phase = parse_usize(key, value)?,
                "morph_train_epochs" => {
                    t.morph_train_epochs =
                        if value == "default" { None } else { Some(parse_usize(key, value)?) }
                }
                "batch_size" => t.batch_size = parse_usize(key, value)?,
                "learning_rate" => t.learning_rate = parse_f64(key, value)?,
                "augment" => t.augment = parse_bool(key, value)?,
                "rng_seed" => t.rng_seed = parse_u64(key, value)?,
                "noreg_cadence" => {
                    t.noreg_cadence = match value {
                        "every_edit" => NoRegCadence::EveryEdit,
                        "after_morph" => NoRegCadence::AfterMorph,
                        _ => {
                            return Err(Error::Config(format!(
                                "noreg_cadence: `{value}` is not every_edit or after_morph"
                            )))
                        }
                    }
                }
                "save_weights" => t.save_weights = parse_bool(key, value)?,
                "lasso_normalized" => t.lasso_normalized = parse_bool(key, value)?,
                "dataset" => cfg.dataset = parse_dataset(value)?,
                "train_limit" => {
                    cfg.train_limit =
                        if value == "none" { None } else { Some(parse_usize(key, value)?) }
                }
                "test_limit" => {
                    cfg.test_limit =
                        if value == "none" { None } else { Some(parse_usize(key, value)?) }
                }
                _ => return Err(Error::Config(format!("{origin}: unknown key `{key}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        for (name, v) in [
            ("lambda_morph", t.lambda_morph),
            ("lambda_lasso", t.lambda_lasso),
            ("lambda_l2", t.lambda_l2),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if t.tau_morph <= 0.0 || t.tau_lasso <= 0.0 {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        if t.theta_init < 0.0 {
            return Err(Error::Config("theta_init must be >= 0".into()));
        }
        if t.budget == 0 || t.batch_size == 0 || t.n_routines == 0 || t.inserts_per_routine == 0 {
            return Err(Error::Config("budget, batch_size and loop counts must be positive".into()));
        }
        if t.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Canonical rendering: every field, fixed order.
    pub fn canonical(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("augment", t.augment.to_string());
        put("batch_size", t.batch_size.to_string());
        put("budget", t.budget.to_string());
        put("dataset", dataset_string(&self.dataset));
        put("epochs_per_phase", t.epochs_per_phase.to_string());
        put("inserts_per_routine", t.inserts_per_routine.to_string());
        put("lambda_l2", format!("{:e}", t.lambda_l2));
        put("lambda_lasso", format!("{:e}", t.lambda_lasso));
        put("lambda_morph", format!("{:e}", t.lambda_morph));
        put("lasso_normalized", t.lasso_normalized.to_string());
        put("learning_rate", format!("{:e}", t.learning_rate));
        put(
            "morph_train_epochs",
            t.morph_train_epochs.map(|v| v.to_string()).unwrap_or_else(|| "default".into()),
        );
        put("n_routines", t.n_routines.to_string());
        put(
            "noreg_cadence",
            match t.noreg_cadence {
                NoRegCadence::EveryEdit => "every_edit".into(),
                NoRegCadence::AfterMorph => "after_morph".into(),
            },
        );
        put("rng_seed", t.rng_seed.to_string());
        put("save_weights", t.save_weights.to_string());
        put("tau_lasso", format!("{:e}", t.tau_lasso));
        put("tau_morph", format!("{:e}", t.tau_morph));
        put("test_limit", self.test_limit.map(|v| v.to_string()).unwrap_or_else(|| "none".into()));
        put("theta_init", format!("{:e}", t.theta_init));
        put("train_limit", self.train_limit.map(|v| v.to_string()).unwrap_or_else(|| "none".into()));
        s
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        hex_string(&digest)
    }

    pub fn dataset_id(&self) -> String {
        dataset_string(&self.dataset)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
