//! Run configuration and its flat `key = value` text format.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::mixture::CategoricalMode;
use crate::optim::OptimizerKind;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Nll,
    Sgem,
    Ngem,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nll" => Ok(Self::Nll),
            "sgem" => Ok(Self::Sgem),
            "ngem" => Ok(Self::Ngem),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (expected nll, sgem or ngem)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Nll => "nll",
            Self::Sgem => "sgem",
            Self::Ngem => "ngem",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    TwoGaussians {
        n_per_mode: usize,
        seed: Option<u64>,
    },
    TwoSinusoids {
        n_per_mode: usize,
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        targets: Vec<String>,
        normalize: bool,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub loss: LossKind,
    pub categorical_mode: CategoricalMode,
    pub optimizer: OptimizerKind,
    /// Learning rate β.
    pub lr: f64,
    pub components: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub hidden_layers: Vec<usize>,
    pub eval_every: usize,
    /// Fit one set of mixture parameters shared by every input, with no network.
    pub direct_gmm: bool,
    pub train_frac: f64,
    /// When false, `wall_ms` is written as 0 so metrics files are reproducible.
    pub record_time: bool,
    pub record_means: bool,
}

impl RunConfig {
    /// Two-Gaussians with directly fitted mixture parameters: K=2, SGD,
    /// batch 1, 50 epochs over 200 points.
    pub fn two_gaussians(loss: LossKind, lr: f64, seed: u64) -> Self {
        Self {
            loss,
            categorical_mode: CategoricalMode::Reference,
            optimizer: OptimizerKind::Sgd,
            lr,
            components: 2,
            epochs: 50,
            batch_size: 1,
            seed,
            dataset: DatasetSpec::TwoGaussians {
                n_per_mode: 100,
                seed: None,
            },
            hidden_layers: Vec::new(),
            eval_every: 50,
            direct_gmm: true,
            train_frac: 1.0,
            record_time: true,
            record_means: true,
        }
    }

    /// Two-Sinusoids MDN: K=2, four GELU layers of 128, Adam, batch 128,
    /// 1000 epochs over 2000 points with a 10% held-out split.
    pub fn two_sinusoids(loss: LossKind, lr: f64, seed: u64) -> Self {
        Self {
            loss,
            categorical_mode: CategoricalMode::Reference,
            optimizer: OptimizerKind::Adam,
            lr,
            components: 2,
            epochs: 1000,
            batch_size: 128,
            seed,
            dataset: DatasetSpec::TwoSinusoids {
                n_per_mode: 1000,
                seed: None,
            },
            hidden_layers: vec![128; 4],
            eval_every: 1500,
            direct_gmm: false,
            train_frac: 0.9,
            record_time: true,
            record_means: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.components == 0 {
            return fail("components must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        if !(self.train_frac > 0.0 && self.train_frac <= 1.0) {
            return fail(format!(
                "train_frac must be in (0, 1], got {}",
                self.train_frac
            ));
        }
        if self.hidden_layers.contains(&0) {
            return fail("hidden layer sizes must be positive".into());
        }
        match &self.dataset {
            DatasetSpec::TwoGaussians { n_per_mode, .. }
            | DatasetSpec::TwoSinusoids { n_per_mode, .. }
                if *n_per_mode == 0 =>
            {
                fail("n_per_mode must be at least 1".into())
            }
            DatasetSpec::Csv { targets, .. } if targets.is_empty() => {
                fail("csv datasets need target_columns".into())
            }
            _ => Ok(()),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text)?;
        // relative CSV paths are resolved against the config file's directory
        if let DatasetSpec::Csv { path: csv, .. } = &mut config.dataset {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(config)
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are ignored;
    /// unknown or repeated keys are errors. `dataset` is required.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "line {}: unknown key `{key}`",
                    lineno + 1
                )));
            }
            if entries.iter().any(|(k, _, _)| *k == key) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
            entries.push((key, value.trim().to_string(), lineno + 1));
        }
        let get = |key: &str| {
            entries
                .iter()
                .find(|(k, _, _)| k == key)
                .map(|(_, v, l)| (v.as_str(), *l))
        };
        fn parse_value<T: FromStr>(key: &str, raw: (&str, usize)) -> Result<T> {
            raw.0.parse().map_err(|_| {
                Error::Config(format!(
                    "line {}: invalid value `{}` for `{key}`",
                    raw.1, raw.0
                ))
            })
        }
        fn parse_enum<T: FromStr<Err = Error>>(raw: (&str, usize)) -> Result<T> {
            raw.0
                .parse()
                .map_err(|e| Error::Config(format!("line {}: {e}", raw.1)))
        }
        let list = |raw: (&str, usize)| -> Result<Vec<usize>> {
            if raw.0.is_empty() {
                return Ok(Vec::new());
            }
            raw.0
                .split(',')
                .map(|s| parse_value("hidden_layers", (s.trim(), raw.1)))
                .collect()
        };

        let dataset_name =
            get("dataset").ok_or_else(|| Error::Config("missing required key `dataset`".into()))?;
        let n_per_mode = get("n_per_mode")
            .map(|v| parse_value("n_per_mode", v))
            .transpose()?;
        let data_seed = get("data_seed")
            .map(|v| parse_value("data_seed", v))
            .transpose()?;
        let dataset = match dataset_name.0 {
            "two_gaussians" => DatasetSpec::TwoGaussians {
                n_per_mode: n_per_mode.unwrap_or(100),
                seed: data_seed,
            },
            "two_sinusoids" => DatasetSpec::TwoSinusoids {
                n_per_mode: n_per_mode.unwrap_or(1000),
                seed: data_seed,
            },
            "csv" => DatasetSpec::Csv {
                path: get("csv_path")
                    .map(|v| PathBuf::from(v.0))
                    .ok_or_else(|| Error::Config("dataset = csv needs `csv_path`".into()))?,
                targets: get("target_columns")
                    .map(|v| {
                        v.0.split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect()
                    })
                    .unwrap_or_default(),
                normalize: get("normalize")
                    .map(|v| parse_value("normalize", v))
                    .transpose()?
                    .unwrap_or(true),
            },
            other => {
                return Err(Error::Config(format!(
                "line {}: unknown dataset `{other}` (expected two_gaussians, two_sinusoids or csv)",
                dataset_name.1
            )))
            }
        };

        let direct_gmm: bool = get("direct_gmm")
            .map(|v| parse_value("direct_gmm", v))
            .transpose()?
            .unwrap_or(false);
        let config = Self {
            loss: get("loss")
                .map(parse_enum)
                .transpose()?
                .unwrap_or(LossKind::Ngem),
            categorical_mode: get("categorical_mode")
                .map(parse_enum)
                .transpose()?
                .unwrap_or_default(),
            optimizer: get("optimizer")
                .map(parse_enum)
                .transpose()?
                .unwrap_or(OptimizerKind::Adam),
            lr: get("lr")
                .map(|v| parse_value("lr", v))
                .transpose()?
                .unwrap_or(1e-3),
            components: get("components")
                .map(|v| parse_value("components", v))
                .transpose()?
                .unwrap_or(2),
            epochs: get("epochs")
                .map(|v| parse_value("epochs", v))
                .transpose()?
                .unwrap_or(100),
            batch_size: get("batch_size")
                .map(|v| parse_value("batch_size", v))
                .transpose()?
                .unwrap_or(128),
            seed: get("seed")
                .map(|v| parse_value("seed", v))
                .transpose()?
                .unwrap_or(1),
            dataset,
            hidden_layers: get("hidden_layers")
                .map(list)
                .transpose()?
                .unwrap_or_else(|| vec![128; 4]),
            eval_every: get("eval_every")
                .map(|v| parse_value("eval_every", v))
                .transpose()?
                .unwrap_or(100),
            direct_gmm,
            train_frac: get("train_frac")
                .map(|v| parse_value("train_frac", v))
                .transpose()?
                .unwrap_or(1.0),
            record_time: get("record_time")
                .map(|v| parse_value("record_time", v))
                .transpose()?
                .unwrap_or(true),
            record_means: get("record_means")
                .map(|v| parse_value("record_means", v))
                .transpose()?
                .unwrap_or(direct_gmm),
        };
        config.validate()?;
        Ok(config)
    }

    /// Renders the configuration in the format accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("loss = {}", self.loss),
            format!("categorical_mode = {}", self.categorical_mode),
            format!("optimizer = {}", self.optimizer),
            format!("lr = {:?}", self.lr),
            format!("components = {}", self.components),
            format!("epochs = {}", self.epochs),
            format!("batch_size = {}", self.batch_size),
            format!("seed = {}", self.seed),
        ];
        match &self.dataset {
            DatasetSpec::TwoGaussians { n_per_mode, seed }
            | DatasetSpec::TwoSinusoids { n_per_mode, seed } => {
                let name = if matches!(self.dataset, DatasetSpec::TwoGaussians { .. }) {
                    "two_gaussians"
                } else {
                    "two_sinusoids"
                };
                lines.push(format!("dataset = {name}"));
                lines.push(format!("n_per_mode = {n_per_mode}"));
                if let Some(s) = seed {
                    lines.push(format!("data_seed = {s}"));
                }
            }
            DatasetSpec::Csv {
                path,
                targets,
                normalize,
            } => {
                lines.push("dataset = csv".into());
                lines.push(format!("csv_path = {}", path.display()));
                lines.push(format!("target_columns = {}", targets.join(",")));
                lines.push(format!("normalize = {normalize}"));
            }
        }
        let hidden: Vec<String> = self.hidden_layers.iter().map(usize::to_string).collect();
        lines.push(format!("hidden_layers = {}", hidden.join(",")));
        lines.push(format!("eval_every = {}", self.eval_every));
        lines.push(format!("direct_gmm = {}", self.direct_gmm));
        lines.push(format!("train_frac = {:?}", self.train_frac));
        lines.push(format!("record_time = {}", self.record_time));
        lines.push(format!("record_means = {}", self.record_means));
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}

const KNOWN_KEYS: &[&str] = &[
    "loss",
    "categorical_mode",
    "optimizer",
    "lr",
    "components",
    "epochs",
    "batch_size",
    "seed",
    "dataset",
    "n_per_mode",
    "data_seed",
    "csv_path",
    "target_columns",
    "normalize",
    "hidden_layers",
    "eval_every",
    "direct_gmm",
    "train_frac",
    "record_time",
    "record_means",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let text = "\
# two sinusoids
loss = sgem
categorical_mode = analytic
optimizer = sgd
lr = 0.01
components = 3
epochs = 2
batch_size = 16
seed = 4
dataset = two_sinusoids
n_per_mode = 50
data_seed = 9
hidden_layers = 8, 8
eval_every = 5
train_frac = 0.8
record_time = false
";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.loss, LossKind::Sgem);
        assert_eq!(c.categorical_mode, CategoricalMode::Analytic);
        assert_eq!(c.optimizer, OptimizerKind::Sgd);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.components, 3);
        assert_eq!(c.hidden_layers, vec![8, 8]);
        assert_eq!(
            c.dataset,
            DatasetSpec::TwoSinusoids {
                n_per_mode: 50,
                seed: Some(9)
            }
        );
        assert!(!c.record_time);
        assert!(!c.record_means);
    }

    #[test]
    fn rejects_unknown_keys_and_values() {
        assert!(
            matches!(RunConfig::parse("dataset = two_gaussians\nmomentum = 0.9\n"), Err(Error::Config(m)) if m.contains("momentum"))
        );
        assert!(RunConfig::parse("loss = ngem\n").is_err());
        assert!(RunConfig::parse("dataset = mnist\n").is_err());
        assert!(RunConfig::parse("dataset = two_gaussians\nloss = mse\n").is_err());
        assert!(RunConfig::parse("dataset = two_gaussians\ncategorical_mode = svd\n").is_err());
        assert!(RunConfig::parse("dataset = two_gaussians\nlr = 0\n").is_err());
        assert!(RunConfig::parse("dataset = two_gaussians\nepochs = 0\n").is_err());
        assert!(RunConfig::parse("dataset = two_gaussians\ncomponents = 0\n").is_err());
        assert!(RunConfig::parse("dataset = two_gaussians\nlr = 1\nlr = 2\n").is_err());
        assert!(RunConfig::parse("dataset = two_gaussians\njunk\n").is_err());
        assert!(RunConfig::parse("dataset = csv\ncsv_path = a.csv\n").is_err());
    }

    #[test]
    fn text_round_trips() {
        for c in [
            RunConfig::two_gaussians(LossKind::Ngem, 1e-2, 3),
            RunConfig::two_sinusoids(LossKind::Nll, 1e-4, 5),
        ] {
            assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
        let mut c = RunConfig::two_sinusoids(LossKind::Nll, 1e-4, 5);
        c.dataset = DatasetSpec::Csv {
            path: "data/x.csv".into(),
            targets: vec!["a".into(), "b".into()],
            normalize: false,
        };
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
