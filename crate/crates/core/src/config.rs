//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by command-line flags. The merged result is echoed into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptMode;
use crate::error::{Error, Result};
use crate::evaluation::bench::{BenchShape, Block};
use crate::model::ModelConfig;
use crate::sampling::synth::SynthSpec;
use crate::tracker::TrackerConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    #[serde(flatten)]
    pub spec: SynthSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 20,
            spec: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub blocks: Vec<Block>,
    /// Concatenated input widths `2C` tried for the filtration blocks.
    pub widths: Vec<usize>,
    #[serde(flatten)]
    pub shape: BenchShape,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            blocks: vec![Block::Fmf, Block::Psa, Block::Full],
            widths: vec![64, 128, 256],
            shape: BenchShape::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Add the per-frame score column to result files.
    pub with_scores: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { with_scores: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    /// Sequences evaluated concurrently.
    pub jobs: usize,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub bench: BenchConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            dataset: PathBuf::from("data"),
            out: PathBuf::from("out"),
            checkpoint: PathBuf::from("out/model.ckpt"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tracker: TrackerConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub dtta: Option<AdaptMode>,
    pub lambda_bn: Option<f64>,
    pub update_n: Option<usize>,
    pub lambda_d: Option<f64>,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// is replaced.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl AppConfig {
    /// Parses a TOML document on top of the defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let top: toml::Value = toml::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        let mut base = toml::Value::try_from(AppConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, top);
        let cfg: AppConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.dtta {
            self.tracker.adapt.mode = m;
        }
        if let Some(v) = o.lambda_bn {
            self.tracker.adapt.lambda_bn = v;
        }
        if let Some(v) = o.update_n {
            self.tracker.update.interval = v;
        }
        if let Some(v) = o.lambda_d {
            self.tracker.update.lambda_d = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.checkpoint {
            self.checkpoint = v.clone();
        }
        if let Some(v) = &o.dataset {
            self.dataset = v.clone();
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.jobs {
            self.jobs = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.tracker.validate()?;
        self.synth.spec.validate()
    }

    /// Canonical TOML text of the configuration.
    pub fn echo(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = AppConfig::default();
        let back = AppConfig::from_toml(&c.echo().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(AppConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = AppConfig::from_toml("seed = 5\n[train]\nbatch_size = 8\n[tracker.update]\ninterval = 3\n").unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.lr, TrainConfig::default().lr);
        assert_eq!(c.tracker.update.interval, 3);
        assert_eq!(c.tracker.update.lambda_d, 0.25);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(matches!(AppConfig::from_toml("sede = 1"), Err(Error::Config(_))));
        assert!(matches!(
            AppConfig::from_toml("[train]\nlr = \"fast\""),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            AppConfig::from_toml("[tracker.adapt]\nmode = \"tent\""),
            Err(Error::Config(_))
        ));
        assert!(matches!(AppConfig::from_toml("seed = "), Err(Error::Config(_))));
        assert!(matches!(
            AppConfig::from_toml("[synth]\nbogus = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            AppConfig::from_toml("[bench]\nbogus = 1"),
            Err(Error::Config(_))
        ));
        assert_eq!(
            AppConfig::from_toml("[synth]\ncount = 3\nlength = 9")
                .unwrap()
                .synth
                .spec
                .length,
            9
        );
    }

    #[test]
    fn flags_override_file() {
        let mut c = AppConfig::from_toml("[tracker.adapt]\nmode = \"momentum\"\nlambda_bn = 0.3").unwrap();
        c.apply(&Overrides {
            dtta: Some(AdaptMode::Dtta),
            lambda_bn: Some(0.0),
            update_n: Some(7),
            ..Default::default()
        });
        assert_eq!(c.tracker.adapt.mode, AdaptMode::Dtta);
        assert_eq!(c.tracker.adapt.lambda_bn, 0.0);
        assert_eq!(c.tracker.update.interval, 7);
        assert!(c.echo().unwrap().contains("mode = \"dtta\""));
    }
}
