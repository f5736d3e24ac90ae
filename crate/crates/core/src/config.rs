//! Run configuration: one TOML document with a section per component.
//!
//! Every field has a default, unknown keys are rejected, and the canonical
//! form (all defaults written out, fixed key order) is what gets hashed and
//! stored alongside checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentConfig;
use crate::analysis::AnalysisConfig;
use crate::backbone::ModelConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::trainer::checkpoint::config_hash;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub alignment: AlignmentConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
}

fn parse_error(e: toml::de::Error) -> Error {
    Error::Config(e.to_string().trim_end().to_string())
}

impl RunConfig {
    /// Parse, apply `key.path=value` overrides, and validate.
    pub fn parse_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(parse_error)?;
        let config: RunConfig = if overrides.is_empty() {
            // Straight from the text so errors keep their line numbers.
            toml::from_str(text).map_err(parse_error)?
        } else {
            for o in overrides {
                apply_override(&mut doc, o)?;
            }
            toml::Value::Table(doc).try_into().map_err(parse_error)?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.alignment.validate()?;
        self.sampler.validate()?;
        self.analysis.validate()?;
        if self.data.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "data.image_size {} differs from model.image_size {}",
                self.data.image_size, self.model.image_size
            )));
        }
        if self.data.dir.is_empty() && self.data.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "data.num_classes {} differs from model.num_classes {}",
                self.data.num_classes, self.model.num_classes
            )));
        }
        if let Some(d) = self.sampler.ema_decay()? {
            if !self.train.ema_decays.contains(&d) {
                return Err(Error::Config(format!(
                    "sampler.ema {d} is not one of train.ema_decays {:?} (or \"none\")",
                    self.train.ema_decays
                )));
            }
        }
        if self.model.channels != 3 {
            return Err(Error::Config("the synthetic datasets are RGB: model.channels must be 3".into()));
        }
        Ok(())
    }

    /// All fields written out in declaration order.
    pub fn canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn hash(&self) -> Result<[u8; 32]> {
        Ok(config_hash(&self.canonical()?))
    }

    pub fn hash_hex(&self) -> Result<String> {
        Ok(hex::encode(self.hash()?))
    }
}

/// Set `a.b.c=value` in a parsed document. The value is read as a TOML
/// literal when it parses as one and as a bare string otherwise, so
/// `alignment.variant=mta` and `train.lr=1e-3` both work.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override key {key:?}: {p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::AlignmentVariant;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn canonical_round_trip() {
        let c = RunConfig::parse("[train]\nlr = 0.001\nsteps = 7\n[alignment]\nvariant = \"mlp\"\n").unwrap();
        let text = c.canonical().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical().unwrap(), text);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::parse("[train]\nlr = 0.001\nseed = 3\n[model]\ndepth = 4\n").unwrap();
        let b = RunConfig::parse("[model]\ndepth = 4\n[train]\nseed = 3\nlr = 0.001\n").unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = RunConfig::parse("[train]\nlr = 0.002\n").unwrap();
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("[train]\nlearning_rate = 1.0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[bogus]\nx = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn error_mentions_line() {
        let e = RunConfig::parse("[train]\nlr = 0.1\nsteps = \"many\"\n").unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
    }

    #[test]
    fn overrides() {
        let c = RunConfig::parse_with(
            "[alignment]\nvariant = \"none\"\n",
            &["alignment.variant=mta".into(), "train.lr=1e-3".into(), "train.betas=[0.8, 0.9]".into()],
        )
        .unwrap();
        assert_eq!(c.alignment.variant, AlignmentVariant::Mta);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.betas, [0.8, 0.9]);
        assert!(RunConfig::parse_with("", &["train.nope=1".into()]).is_err());
        assert!(matches!(RunConfig::parse_with("", &["train.lr".into()]), Err(Error::Usage(_))));
    }

    #[test]
    fn cross_section_checks() {
        assert!(RunConfig::parse("[data]\nimage_size = 16\n").is_err());
        assert!(RunConfig::parse("[alignment]\nlambda = 0.0\n").is_err());
        assert!(RunConfig::parse("[train]\nema_decays = [0.9]\n").is_err());
        assert!(RunConfig::parse("[train]\nema_decays = [0.9]\n[sampler]\nema = \"0.9\"\n").is_ok());
        assert!(RunConfig::parse("[train]\nema_decays = []\n[sampler]\nema = \"none\"\n").is_ok());
    }
}
