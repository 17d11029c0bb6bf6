//! Run configuration: a TOML file with `[corpus]`, `[model]`, `[train]`,
//! `[eval]` and `[fbank]` sections, merged over the desk defaults.
//!
//! Precedence, lowest first: defaults, config file, `CAT_SEED`, command-line
//! `--section.key value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{FbankConfig, SynthCorpusConfig};
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_BETAS, DEFAULT_TOPN};
use crate::model::ModelConfig;
use crate::train::{RunSpec, TrainConfig};

/// Environment variable overriding the corpus and training seeds.
pub const SEED_ENV: &str = "CAT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// TopN list.
    pub topn: Vec<usize>,
    /// Sliding-window length in frames; 0 uses the model's input length.
    pub window: usize,
    /// β grid of the sweep.
    pub betas: Vec<f64>,
    /// Seeds per β cell.
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            topn: DEFAULT_TOPN.to_vec(),
            window: 0,
            betas: DEFAULT_BETAS.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: SynthCorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub fbank: FbankConfig,
}

impl Default for RunConfig {
    /// The desk preset.
    fn default() -> Self {
        RunConfig {
            corpus: SynthCorpusConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
            fbank: FbankConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Recursively overlays `top` onto `base`. Keys absent from `base` are kept
/// so that strict deserialization can report them.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value: TOML syntax when it parses (numbers, booleans,
/// arrays, quoted strings), a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
        Self::default().overlay(file)
    }

    fn to_table(&self) -> Table {
        Table::try_from(self).expect("config serializes")
    }

    fn overlay(&self, top: Table) -> Result<Self> {
        let mut base = self.to_table();
        merge(&mut base, top);
        let cfg: RunConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `section.key = value` overrides in order.
    pub fn with_overrides<'a>(
        &self,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut top = Table::new();
        for (key, raw) in overrides {
            let (section, field) = key.split_once('.').ok_or_else(|| {
                config_err(format!("override `{key}` must look like section.key"))
            })?;
            let entry = top
                .entry(section.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            let Value::Table(t) = entry else {
                unreachable!()
            };
            t.insert(field.to_string(), parse_value(raw));
        }
        self.overlay(top)
    }

    /// Sets the corpus and training seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Defaults, then the file, then `env_seed`, then `overrides`.
    pub fn resolve<'a>(
        path: Option<&Path>,
        env_seed: Option<&str>,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_str(&text)
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if let Some(raw) = env_seed {
            let seed = raw.trim().parse().map_err(|_| {
                config_err(format!("{SEED_ENV}={raw:?} is not an unsigned integer"))
            })?;
            cfg = cfg.with_seed(seed);
        }
        cfg.with_overrides(overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.topn.contains(&0) {
            return Err(config_err("eval.topn entries must be >= 1"));
        }
        if self
            .eval
            .betas
            .iter()
            .any(|b| !(b.is_finite() && *b >= 0.0))
        {
            return Err(config_err("eval.betas must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }

    /// Evaluation window for a model of `frames` input frames.
    pub fn window(&self, frames: usize) -> usize {
        if self.eval.window == 0 {
            frames
        } else {
            self.eval.window
        }
    }
}
