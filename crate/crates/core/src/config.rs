//! `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Keys are case-sensitive and may
//! appear once.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::simplex::LabelDistribution;
use crate::trainer::{Method, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: idx as u64 + 1, message };
            let (key, value) =
                line.split_once('=').ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(parse_err("empty key".into()));
            }
            if entries.iter().any(|(k, _)| k == key) {
                return Err(parse_err(format!("duplicate key `{key}`")));
            }
            entries.push((key.to_string(), value.to_string()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn insert(&mut self, key: &str, value: &str) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
    }

    /// Errors on the first key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            Some((k, _)) => Err(Error::config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::config(format!("invalid value `{value}` for key `{key}`")))
}

/// Comma-separated list; empty items are rejected.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|item| parse_value(key, item)).collect()
}

pub const TRAIN_KEYS: &[&str] = &[
    "method",
    "r",
    "gamma_c",
    "lambda",
    "eta_pi",
    "epsilon",
    "clip",
    "beta",
    "theta_lr",
    "momentum",
    "batch",
    "epochs",
    "seed",
    "arch",
    "agnostic_lr",
    "fixed_pi",
    "lr_decay_every",
    "lr_decay_factor",
];

pub fn parse_method(name: &str, fixed_pi: Option<&str>) -> Result<Method> {
    Ok(match name.trim() {
        "advshift" => Method::AdvShift,
        "erm" => Method::Erm,
        "balanced" => Method::Balanced,
        "agnostic" => Method::Agnostic,
        "fixed" => {
            let raw = fixed_pi.ok_or_else(|| Error::config("method `fixed` needs key `fixed_pi`"))?;
            let probs = parse_list("fixed_pi", raw)?;
            Method::Fixed(LabelDistribution::new(probs).map_err(|e| Error::config(format!("fixed_pi: {e}")))?)
        }
        other => return Err(Error::config(format!("unknown method `{other}` for key `method`"))),
    })
}

impl TrainConfig {
    /// Overrides defaults with the keys present in `kv`.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv(kv)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, kv: &KvFile) -> Result<()> {
        kv.check_keys(TRAIN_KEYS)?;
        if let Some(m) = kv.get("method") {
            self.method = parse_method(m, kv.get("fixed_pi"))?;
        } else if kv.get("fixed_pi").is_some() {
            if let Method::Fixed(_) = self.method {
                self.method = parse_method("fixed", kv.get("fixed_pi"))?;
            }
        }
        let adv = &mut self.adversary;
        for (key, value) in kv.entries() {
            match key {
                "r" => adv.r = parse_value(key, value)?,
                "gamma_c" => adv.gamma_c = parse_value(key, value)?,
                "lambda" => adv.lambda = parse_value(key, value)?,
                "eta_pi" => adv.eta_pi = Some(parse_value(key, value)?),
                "epsilon" => adv.epsilon = parse_value(key, value)?,
                "clip" => adv.clip = parse_value(key, value)?,
                "beta" => adv.beta = parse_value(key, value)?,
                "theta_lr" => self.theta_lr = parse_value(key, value)?,
                "momentum" => self.momentum = parse_value(key, value)?,
                "batch" => self.batch_size = parse_value(key, value)?,
                "epochs" => self.epochs = parse_value(key, value)?,
                "seed" => self.seed = parse_value(key, value)?,
                "arch" => self.arch = Architecture::parse(value)?,
                "agnostic_lr" => self.agnostic_lr = parse_value(key, value)?,
                _ => {}
            }
        }
        match (kv.get("lr_decay_every"), kv.get("lr_decay_factor")) {
            (None, None) => {}
            (Some(every), factor) => {
                let factor = factor.map_or(Ok(0.1), |f| parse_value("lr_decay_factor", f))?;
                self.lr_decay = Some((parse_value("lr_decay_every", every)?, factor));
            }
            (None, Some(_)) => return Err(Error::config("key `lr_decay_factor` needs `lr_decay_every`")),
        }
        self.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let text = "# demo\nmethod = advshift\nr = 0.2 # radius\ngamma_c=4\nlambda = 0.125\n\nbatch = 32\narch = mlp:8\nlr_decay_every = 5\n";
        let cfg = TrainConfig::from_kv(&KvFile::parse(text).unwrap()).unwrap();
        assert_eq!(cfg.method, Method::AdvShift);
        assert_eq!(cfg.adversary.r, 0.2);
        assert_eq!(cfg.adversary.gamma_c, 4.0);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.arch, Architecture::Mlp { hidden: 8 });
        assert_eq!(cfg.lr_decay, Some((5, 0.1)));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_kv(&KvFile::parse("radius = 1").unwrap()).unwrap_err();
        assert!(err.is_input_error());
        assert!(err.to_string().contains("radius"));
    }

    #[test]
    fn unknown_method_and_bad_values() {
        let err = TrainConfig::from_kv(&KvFile::parse("method = dro").unwrap()).unwrap_err();
        assert!(err.to_string().contains("dro"));
        assert!(TrainConfig::from_kv(&KvFile::parse("r = abc").unwrap()).is_err());
        assert!(TrainConfig::from_kv(&KvFile::parse("method = fixed").unwrap()).is_err());
        assert!(TrainConfig::from_kv(&KvFile::parse("r = -1").unwrap()).is_err());
    }

    #[test]
    fn syntax_errors_carry_lines() {
        match KvFile::parse("a = 1\nnot a pair\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(KvFile::parse("a = 1\na = 2").is_err());
    }

    #[test]
    fn fixed_method() {
        let kv = KvFile::parse("method = fixed\nfixed_pi = 0.25,0.75").unwrap();
        match TrainConfig::from_kv(&kv).unwrap().method {
            Method::Fixed(p) => assert_eq!(p.probs(), &[0.25, 0.75]),
            m => panic!("{m:?}"),
        }
    }
}
