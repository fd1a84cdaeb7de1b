//! Flat `key = value` configuration files.
//!
//! Every key has a command-line flag of the same name with `_` written as
//! `-`. A value given as a flag wins over the file, and the file wins over
//! the built-in default. Keys a command does not use are ignored by it, so
//! one file can serve a whole pipeline; keys outside [`KEYS`] are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Every recognized key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "global seed; subsystem seeds are derived from it by label"),
    ("n", "number of scenes to generate"),
    ("data", "dataset directory"),
    ("out", "output file or directory"),
    ("teacher", "teacher checkpoint"),
    ("checkpoint", "outline-then-fill checkpoint"),
    ("filler", "checkpoint used as the filler in mask-exp"),
    ("log", "training log path"),
    ("resume", "continue training from the output checkpoint"),
    ("split", "dataset split to decode or evaluate"),
    ("input", "decode records or split file to evaluate"),
    ("layers", "transformer layers"),
    ("d_model", "model width"),
    ("d_ff", "feed-forward width"),
    ("heads", "attention heads"),
    ("rpr_window", "relative-position clipping window"),
    ("epochs", "maximum training epochs"),
    ("curriculum_epochs", "epochs over which p_g ramps to 1"),
    ("batch_size", "caption pairs per step"),
    ("lr", "learning rate"),
    ("lr_decay", "learning-rate decay factor"),
    ("decay_every", "epochs between decays"),
    ("clip_norm", "gradient norm clip, or none"),
    ("patience", "epochs without validation gain before stopping"),
    ("target_exact", "validation exact match that stops training, or none"),
    ("p_hybr", "probability of the distilled target"),
    ("lambda", "curriculum exponent"),
    ("strategy", "aic, naic, ir-naic or saic"),
    ("k", "group size"),
    ("m_out", "outliner beam"),
    ("m_fill", "outliner candidates passed to the filler"),
    ("iters", "refinement iterations"),
    ("max_len", "length limit"),
    ("length", "target length for parallel decoders: oracle or a number"),
    ("timing", "record per-sentence latency"),
    ("beam", "teacher beam for distillation"),
    ("grid", "comma-separated masking rates"),
    ("strategies", "comma-separated masking strategies"),
    ("random_runs", "random-masking repetitions"),
    ("filler_k", "group size the filler was trained with"),
    ("runs", "timing runs"),
    ("cost_model", "constant or linear"),
    ("analytic", "print the analytical cost grid instead of timing"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(name, _)| *name == k) {
                bail!("line {}: unknown key {k:?}", i + 1);
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                bail!("line {}: key {k:?} given twice", i + 1);
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    fn raw(&self, key: &str) -> Option<&str> {
        debug_assert!(KEYS.iter().any(|(k, _)| *k == key), "undocumented key {key}");
        self.values.get(key).map(String::as_str)
    }

    /// Flag value, else file value, else `default`.
    pub fn get<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get_opt(key, flag)?.unwrap_or(default))
    }

    /// Flag value, else file value.
    pub fn get_opt<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("config key {key}: {e}")))
            .transpose()
    }

    /// Like [`ConfigFile::get`] for keys that also accept `none`.
    pub fn get_maybe<T>(&self, key: &str, flag: Option<String>, default: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.get_opt::<String>(key, flag)? {
            None => Ok(default),
            Some(v) if v == "none" => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| anyhow!("{key}: {e}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        let f = ConfigFile::parse("k = 3\n# comment\nlr=0.01  # trailing\n").unwrap();
        assert_eq!(f.get("k", Some(5usize), 4).unwrap(), 5);
        assert_eq!(f.get("k", None, 4usize).unwrap(), 3);
        assert_eq!(f.get("m_out", None, 1usize).unwrap(), 1);
        assert_eq!(f.get("lr", None, 1.0f64).unwrap(), 0.01);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(ConfigFile::parse("bogus = 1").is_err());
        assert!(ConfigFile::parse("k = 1\nk = 2").is_err());
        assert!(ConfigFile::parse("just text").is_err());
    }

    #[test]
    fn none_clears_optional_values() {
        let f = ConfigFile::parse("clip_norm = none").unwrap();
        assert_eq!(f.get_maybe::<f64>("clip_norm", None, Some(1.0)).unwrap(), None);
        assert_eq!(
            f.get_maybe::<f64>("clip_norm", Some("2".into()), Some(1.0)).unwrap(),
            Some(2.0)
        );
        assert_eq!(f.get_maybe::<f64>("target_exact", None, None).unwrap(), None);
    }

    #[test]
    fn bad_values_name_the_key() {
        let f = ConfigFile::parse("k = four").unwrap();
        let err = f.get("k", None, 4usize).unwrap_err().to_string();
        assert!(err.contains("k"));
    }
}
