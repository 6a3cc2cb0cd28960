//! Run configuration: a TOML file, then `PUDDING_*` environment overrides,
//! then command-line flags.
//!
//! An override such as `PUDDING_TRAIN__LEARNING_RATE=0.01` sets
//! `train.learning_rate`; `__` separates nesting levels. Values are parsed as
//! TOML literals when possible and taken as strings otherwise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::Criterion;
use crate::model::tokenizer::Tokenizer;
use crate::router::{EncoderKind, LossMode, TrainConfig, DEFAULT_MAX_PROMPT_LEN};
use crate::search::DEFAULT_CALIBRATION_SAMPLES;

pub const ENV_PREFIX: &str = "PUDDING_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    #[default]
    Byte,
    Whitespace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterSection {
    pub embed_dim: usize,
    pub encoder: EncoderKind,
    pub loss_mode: LossMode,
    pub max_prompt_len: usize,
    /// Criterion behind the label vectors.
    pub label_criterion: Criterion,
    pub validation_fraction: f64,
}

impl Default for RouterSection {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            encoder: EncoderKind::MeanPool,
            loss_mode: LossMode::Mse,
            max_prompt_len: DEFAULT_MAX_PROMPT_LEN,
            label_criterion: Criterion::Tl,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub prompts: Option<PathBuf>,
    pub max_new: usize,
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            prompts: None,
            max_new: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Evaluation tasks; the calibration datasets when empty.
    pub eval: Vec<DatasetRef>,
    pub heatmap: bool,
    pub compare: bool,
    pub pool_sizes: Vec<usize>,
    pub loss_modes: Vec<LossMode>,
    pub speedup: bool,
    pub gen_lengths: Vec<usize>,
    pub repetitions: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            eval: Vec::new(),
            heatmap: true,
            compare: true,
            pool_sizes: Vec::new(),
            loss_modes: Vec::new(),
            speedup: false,
            gen_lengths: vec![16],
            repetitions: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: PathBuf,
    pub tokenizer: TokenizerKind,
    /// One word per line; required by the whitespace tokenizer.
    pub vocab: Option<PathBuf>,
    pub datasets: Vec<DatasetRef>,
    /// Pairs used to build router labels; the calibration datasets when empty.
    pub train_datasets: Vec<DatasetRef>,
    pub criteria: Vec<Criterion>,
    pub k: usize,
    pub calibration_samples: usize,
    pub two_pass: bool,
    pub seed: u64,
    pub out: PathBuf,
    pub pool: Option<PathBuf>,
    pub router_dataset: Option<PathBuf>,
    pub router_checkpoint: Option<PathBuf>,
    pub router: RouterSection,
    pub train: TrainConfig,
    pub infer: InferSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::from("model.pudw"),
            tokenizer: TokenizerKind::Byte,
            vocab: None,
            datasets: Vec::new(),
            train_datasets: Vec::new(),
            criteria: vec![Criterion::Tl, Criterion::Tld],
            k: 1,
            calibration_samples: DEFAULT_CALIBRATION_SAMPLES,
            two_pass: false,
            seed: 0,
            out: PathBuf::from("out"),
            pool: None,
            router_dataset: None,
            router_checkpoint: None,
            router: RouterSection::default(),
            train: TrainConfig::default(),
            infer: InferSection::default(),
            bench: BenchSection::default(),
        }
    }
}

fn parse_override(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {} crosses a non-table key", path.join("."))))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Parses `text`, applying overrides given as `(NAME, value)` pairs with
    /// the prefix already present in `NAME`. Relative paths resolve against `base`.
    pub fn from_toml(text: &str, overrides: &[(String, String)], base: &Path) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut overrides: Vec<&(String, String)> =
            overrides.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (key, raw) in overrides {
            let path: Vec<String> = key[ENV_PREFIX.len()..]
                .split("__")
                .map(|s| s.to_ascii_lowercase())
                .collect();
            if path.iter().any(String::is_empty) {
                return Err(Error::Config(format!("malformed override {key}")));
            }
            apply_override(&mut table, &path, parse_override(raw))?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.resolve(base);
        Ok(cfg)
    }

    /// Reads a config file with overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let env: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        Self::from_toml(&text, &env, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.model);
        fix(&mut self.out);
        for p in [
            &mut self.vocab,
            &mut self.pool,
            &mut self.router_dataset,
            &mut self.router_checkpoint,
            &mut self.infer.prompts,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for d in self
            .datasets
            .iter_mut()
            .chain(&mut self.train_datasets)
            .chain(&mut self.bench.eval)
        {
            fix(&mut d.path);
        }
    }

    pub fn pool_path(&self) -> PathBuf {
        self.pool.clone().unwrap_or_else(|| self.out.join("pool.json"))
    }

    pub fn router_dataset_path(&self) -> PathBuf {
        self.router_dataset
            .clone()
            .unwrap_or_else(|| self.out.join("router_dataset.jsonl"))
    }

    pub fn router_checkpoint_path(&self) -> PathBuf {
        self.router_checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("router.pudr"))
    }

    pub fn train_sets(&self) -> &[DatasetRef] {
        if self.train_datasets.is_empty() {
            &self.datasets
        } else {
            &self.train_datasets
        }
    }

    pub fn eval_sets(&self) -> &[DatasetRef] {
        if self.bench.eval.is_empty() {
            &self.datasets
        } else {
            &self.bench.eval
        }
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        match self.tokenizer {
            TokenizerKind::Byte => Ok(Tokenizer::Byte),
            TokenizerKind::Whitespace => {
                let path = self
                    .vocab
                    .as_ref()
                    .ok_or_else(|| Error::Config("whitespace tokenizer needs `vocab`".into()))?;
                require_file(path)?;
                Tokenizer::whitespace_from_file(path)
            }
        }
    }

    /// Seed of the named sub-stream, e.g. `"search"`, `"train"` or `"split"`.
    pub fn stream_seed(&self, name: &str) -> u64 {
        stream_seed(self.seed, name)
    }
}

/// First eight bytes of SHA-256 over the root seed and the stream name.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Missing inputs are configuration errors.
pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
model = "m.pudw"
k = 2
criteria = ["tl", "sl"]

[[datasets]]
name = "a"
path = "data/a.jsonl"

[train]
epochs = 3
"#;

    #[test]
    fn parses_and_resolves_paths() {
        let c = RunConfig::from_toml(TEXT, &[], Path::new("/cfg")).unwrap();
        assert_eq!(c.model, PathBuf::from("/cfg/m.pudw"));
        assert_eq!(c.datasets[0].path, PathBuf::from("/cfg/data/a.jsonl"));
        assert_eq!(c.criteria, vec![Criterion::Tl, Criterion::Sl]);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.learning_rate, 1e-5);
        assert_eq!(c.pool_path(), PathBuf::from("/cfg/out/pool.json"));
    }

    #[test]
    fn environment_overrides() {
        let env = vec![
            ("PUDDING_K".to_string(), "5".to_string()),
            ("PUDDING_TRAIN__LEARNING_RATE".to_string(), "0.5".to_string()),
            ("PUDDING_ROUTER__ENCODER".to_string(), "attention".to_string()),
            ("OTHER_K".to_string(), "9".to_string()),
        ];
        let c = RunConfig::from_toml(TEXT, &env, Path::new("/")).unwrap();
        assert_eq!(c.k, 5);
        assert_eq!(c.train.learning_rate, 0.5);
        assert_eq!(c.router.encoder, EncoderKind::Attention);
    }

    #[test]
    fn unknown_keys_and_bad_types_are_config_errors() {
        for text in ["bogus = 1", "k = \"two\"", "[train]\nlr = 1"] {
            assert!(
                matches!(RunConfig::from_toml(text, &[], Path::new("/")), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn named_streams_are_independent() {
        assert_ne!(stream_seed(1, "search"), stream_seed(1, "train"));
        assert_ne!(stream_seed(1, "train"), stream_seed(2, "train"));
        assert_eq!(stream_seed(7, "split"), stream_seed(7, "split"));
    }
}
