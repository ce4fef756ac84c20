//! `key = value` text files shared by model/training configs and synthetic
//! dataset specs. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::embedder::{ModeFlags, ModelConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.into(),
                    line: i + 1,
                    msg: format!("expected key = value, got {line:?}"),
                });
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Parse {
                    path: origin.into(),
                    line: i + 1,
                    msg: format!("duplicate key {key}"),
                });
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.entries
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Fails on keys outside `known`, which catches typos in config files.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Everything `train`, `eval` and `ablate` need besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop when the epoch loss has not improved for this many epochs.
    pub patience: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            lr: 1e-4,
            batch: 16,
            epochs: 200,
            seed: 0,
            patience: 20,
        }
    }
}

pub const RUN_KEYS: [&str; 13] = [
    "d_raw",
    "d",
    "d_h",
    "tau",
    "margin",
    "lr",
    "batch",
    "epochs",
    "seed",
    "patience",
    "no_coattn",
    "no_hierarchy",
    "explicit_hierarchy",
];

impl RunConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&RUN_KEYS)?;
        let def = RunConfig::default();
        let model = ModelConfig {
            d_raw: kv.get_or("d_raw", def.model.d_raw)?,
            d: kv.get_or("d", def.model.d)?,
            d_h: kv.get_or("d_h", def.model.d_h)?,
            tau: kv.get_or("tau", def.model.tau)?,
            margin: kv.get_or("margin", def.model.margin)?,
            modes: ModeFlags {
                no_coattn: kv.get_or("no_coattn", false)?,
                no_hierarchy: kv.get_or("no_hierarchy", false)?,
                explicit_hierarchy: kv.get_or("explicit_hierarchy", false)?,
            },
        };
        let cfg = RunConfig {
            model,
            lr: kv.get_or("lr", def.lr)?,
            batch: kv.get_or("batch", def.batch)?,
            epochs: kv.get_or("epochs", def.epochs)?,
            seed: kv.get_or("seed", def.seed)?,
            patience: kv.get_or("patience", def.patience)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text, "<config>")?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        format!(
            "d_raw = {}\nd = {}\nd_h = {}\ntau = {:?}\nmargin = {:?}\nlr = {:?}\nbatch = {}\n\
             epochs = {}\nseed = {}\npatience = {}\nno_coattn = {}\nno_hierarchy = {}\n\
             explicit_hierarchy = {}\n",
            m.d_raw,
            m.d,
            m.d_h,
            m.tau,
            m.margin,
            self.lr,
            self.batch,
            self.epochs,
            self.seed,
            self.patience,
            m.modes.no_coattn,
            m.modes.no_hierarchy,
            m.modes.explicit_hierarchy,
        )
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::to_text`].
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_roundtrip() {
        let cfg = RunConfig::parse("d = 16\nd_h=4 # small\n\nlr = 0.01\nno_coattn = true\n").unwrap();
        assert_eq!(cfg.model.d, 16);
        assert_eq!(cfg.model.d_h, 4);
        assert!(cfg.model.modes.no_coattn);
        assert_eq!(cfg.epochs, 200);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.fingerprint().len(), 16);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(RunConfig::parse("dd = 3\n").is_err());
        assert!(RunConfig::parse("d = x\n").is_err());
        assert!(RunConfig::parse("tau = 0\n").is_err());
        assert!(RunConfig::parse("margin = -1\n").is_err());
        assert!(RunConfig::parse("no_hierarchy = true\nexplicit_hierarchy = true\n").is_err());
        let err = RunConfig::parse("d = 3\nd = 4\n").unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        assert!(RunConfig::parse("just words\n").is_err());
    }
}
