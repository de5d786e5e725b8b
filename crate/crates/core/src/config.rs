//! Flat `key = value` run configuration.
//!
//! Keys are dotted paths into [`RunConfig`], e.g. `train.rho = 8` or
//! `train.view_a.jitter_scale = 0.4`. Lists are comma separated
//! (`arch.encoder_hidden_dims = 256,128`). Blank lines and `#` comments are
//! ignored. Unknown keys and unparsable values are errors.
//!
//! [`RunConfig::render`] prints every key with its current value and is a
//! valid config file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::model::ArchitectureConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        if self.arch.input_dim != self.dataset.dim {
            return Err(Error::Config(format!(
                "arch.input_dim ({}) must equal dataset.dim ({})",
                self.arch.input_dim, self.dataset.dim
            )));
        }
        Ok(())
    }

    /// Every key, sorted, with its current value.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn keys() -> Vec<String> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let slot = key
            .split('.')
            .try_fold(&mut tree, |node, part| match node {
                Value::Object(map) => map.get_mut(part),
                _ => None,
            })
            .filter(|v| !v.is_object())
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        *slot = parse_like(slot, value.trim())
            .ok_or_else(|| Error::Config(format!("invalid value `{value}` for `{key}`")))?;
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("invalid value `{value}` for `{key}`: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                msg: format!("line {}: {msg}", lineno + 1),
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key = value, got `{line}`")))?;
            cfg.set(k.trim(), v).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(Error::file(path))?, path)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), render_scalar(other))),
    }
}

fn render_scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render_scalar).collect::<Vec<_>>().join(","),
        Value::Number(n) => match n.as_f64() {
            Some(f) if !n.is_u64() && !n.is_i64() => format!("{f:?}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

fn parse_like(template: &Value, text: &str) -> Option<Value> {
    Some(match template {
        Value::Bool(_) => Value::Bool(text.parse().ok()?),
        Value::String(_) => Value::String(text.to_string()),
        Value::Number(n) if n.is_u64() => Value::Number(text.parse::<u64>().ok()?.into()),
        Value::Number(_) => {
            let f: f64 = text.parse().ok()?;
            Value::Number(Number::from_f64(f)?)
        }
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::Number(0u64.into()));
            if text.is_empty() {
                return Some(Value::Array(Vec::new()));
            }
            Value::Array(
                text.split(',')
                    .map(|t| parse_like(&elem, t.trim()))
                    .collect::<Option<_>>()?,
            )
        }
        Value::Null | Value::Object(_) => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;
    use crate::trainer::CovarianceSource;

    #[test]
    fn render_parses_back_to_same_config() {
        let mut cfg = RunConfig::default();
        cfg.train.rho = 2.5;
        cfg.arch.encoder_hidden_dims = vec![32, 16, 8];
        let back = RunConfig::parse(&cfg.render(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sets_every_kind_of_value() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "train.rho=0",
            "train.epochs = 3",
            "train.loss_kind=barlow",
            "train.covariance_source=momentum",
            "train.symmetrize=true",
            "train.view_b.reflect_prob=0.5",
            "train.lars.momentum=0.8",
            "arch.encoder_hidden_dims=10,20",
        ])
        .unwrap();
        assert_eq!(cfg.train.rho, 0.0);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.loss_kind, LossKind::Barlow);
        assert_eq!(cfg.train.covariance_source, CovarianceSource::Momentum);
        assert!(cfg.train.symmetrize);
        assert_eq!(cfg.train.view_b.reflect_prob, 0.5);
        assert_eq!(cfg.train.lars.momentum, 0.8);
        assert_eq!(cfg.arch.encoder_hidden_dims, vec![10, 20]);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        let mut cfg = RunConfig::default();
        for bad in ["train.rhoo=1", "train=1", "train.view_a=1", "nope=2"] {
            assert!(matches!(cfg.apply_overrides(&[bad]), Err(Error::Config(_))), "{bad}");
        }
        for bad in ["train.epochs=1.5", "train.epochs=-1", "train.symmetrize=yes", "train.loss_kind=vicreg"] {
            assert!(cfg.apply_overrides(&[bad]).is_err(), "{bad}");
        }
        assert_eq!(cfg, RunConfig::default());
        let err = RunConfig::parse("train.rho = 1\n\n# c\nbogus = 3\n", Path::new("f.cfg")).unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
    }

    #[test]
    fn input_dim_must_match_dataset() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.set("dataset.dim", "32").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn keys_are_unique_and_dotted() {
        let keys = RunConfig::keys();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), keys.len());
        assert!(keys.iter().any(|k| k == "train.lars.trust_coefficient"));
    }
}
