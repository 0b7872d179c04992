//! Experiment configuration file with dotted-key overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Bag, Dims, GenConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::Model;
use crate::train::{train_run, RunDir, TrainConfig, TrainOutcome, CONFIG_FILE};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub gen: GenConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside `table`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{key}`: `{p}` is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses `text` (TOML), applies `key=value` overrides, then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_dotted(&mut table, k.trim(), parse_value(v))?;
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` if given, else starts from defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.encoder.validate()?;
        self.fusion.validate()?;
        self.train.validate()
    }

    pub fn raw_dims(&self) -> Dims {
        Dims {
            rgb: self.gen.rgb_dim,
            audio: self.gen.audio_dim,
            flow: self.gen.flow_dim,
        }
    }

    /// A freshly initialized model for raw feature dims `raw`.
    pub fn build_model(&self, raw: Dims) -> Result<Model> {
        Model::new(&self.encoder, &self.fusion, raw, self.train.seed)
    }

    /// Builds the model, writes the resolved config into `run` and trains.
    pub fn run(&self, raw: Dims, bags: &[Bag], run: Option<&RunDir>) -> Result<TrainOutcome> {
        let model = self.build_model(raw)?;
        if let Some(r) = run {
            r.write(CONFIG_FILE, &self.to_toml())?;
        }
        train_run(model, &self.train, bags, run)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Term;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(
            ExperimentConfig::from_toml("", &[]).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.train.loss.ablate = vec![Term::Ma];
        c.train.loss.k_search = Some(100);
        let back = ExperimentConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn dotted_overrides_apply() {
        let c = ExperimentConfig::from_toml(
            "[train]\niterations = 5\n",
            &[
                "train.iterations=9".into(),
                "train.adam.lr=0.01".into(),
                "train.loss.ablate=[\"ma\", \"umil\"]".into(),
                "gen.seed = 3".into(),
                "train.precision=f32".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.iterations, 9);
        assert_eq!(c.train.adam.lr, 0.01);
        assert_eq!(c.train.loss.ablate, vec![Term::Ma, Term::Umil]);
        assert_eq!(c.gen.seed, 3);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_toml("[train]\nbogus_key = 1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let err = ExperimentConfig::from_toml("", &["encoder.nope=2".into()]).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
        assert!(ExperimentConfig::from_toml("", &["train".into()]).is_err());
        assert!(ExperimentConfig::from_toml("", &["train.iterations.x=1".into()]).is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(ExperimentConfig::from_toml("", &["encoder.heads=3".into()]).is_err());
        assert!(ExperimentConfig::from_toml("", &["train.batch_size=1".into()]).is_err());
    }
}
