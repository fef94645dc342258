//! Line-oriented `key = value` configuration with `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key = value` lines. Blank lines and text after `#` are ignored;
/// repeated keys are an error.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
        }
    }
    Ok(map)
}

/// Input features for the lip-reading model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LipInput {
    Bottleneck,
    /// mean-normalized video spliced with the bottleneck context
    Raw,
}

impl FromStr for LipInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottleneck" => Ok(LipInput::Bottleneck),
            "raw" => Ok(LipInput::Raw),
            _ => Err(Error::Config(format!("lip_input must be `bottleneck` or `raw`, got `{s}`"))),
        }
    }
}

/// Settings for one recurrent training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSettings {
    pub layers: usize,
    pub learning_rate: f64,
    pub min_epochs: usize,
    pub max_epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub work_dir: PathBuf,
    pub seed: u64,
    pub hidden: usize,
    pub am: StageSettings,
    pub lip: StageSettings,
    pub fusion: StageSettings,
    pub halving_threshold: f64,
    pub stop_threshold: f64,
    pub clip_norm: f64,
    pub fill_value: f64,
    pub bn_hidden: Vec<usize>,
    pub bn_context: usize,
    pub bn_learning_rate: f64,
    pub bn_batch: usize,
    pub bn_min_epochs: usize,
    pub bn_max_epochs: usize,
    pub lip_input: LipInput,
    pub snr_levels: Vec<f64>,
    /// audio conditions used for bias tuning; `None` is clean audio
    pub tune_conditions: Vec<Option<f64>>,
    pub bias_grid: Vec<f64>,
    pub fusion_bias: Option<f64>,
    pub babble_talkers: usize,
}

const REQUIRED: [&str; 2] = ["data_dir", "work_dir"];

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "1"),
    ("hidden", "32"),
    ("am_layers", "2"),
    ("am_lr", "0.02"),
    ("am_min_epochs", "15"),
    ("am_max_epochs", "40"),
    ("lip_layers", "2"),
    ("lip_lr", "0.02"),
    ("lip_min_epochs", "15"),
    ("lip_max_epochs", "40"),
    ("fusion_layers", "3"),
    ("fusion_lr", "0.02"),
    ("fusion_min_epochs", "10"),
    ("fusion_max_epochs", "30"),
    ("halving_threshold", "0.5"),
    ("stop_threshold", "0.1"),
    ("clip_norm", "5.0"),
    ("fill_value", "0.0"),
    ("bn_hidden", "64,64,8,64"),
    ("bn_context", "5"),
    ("bn_lr", "0.008"),
    ("bn_batch", "256"),
    ("bn_min_epochs", "30"),
    ("bn_max_epochs", "60"),
    ("lip_input", "bottleneck"),
    ("snr_levels", "10,0"),
    ("tune_conditions", "clean,10,0"),
    ("bias_grid", "-4:12:0.5"),
    ("fusion_bias", ""),
    ("babble_talkers", "4"),
];

/// Every key a run configuration accepts.
pub fn known_keys() -> impl Iterator<Item = &'static str> {
    REQUIRED.iter().copied().chain(DEFAULTS.iter().map(|(k, _)| *k))
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

/// `clean` or an SNR in dB (an optional `dB` suffix is accepted).
pub fn parse_condition(s: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("clean") {
        return Ok(None);
    }
    let num = s.strip_suffix("dB").or_else(|| s.strip_suffix("db")).unwrap_or(s);
    let v: f64 = parse_value("audio condition", num.trim())?;
    if !v.is_finite() {
        return Err(Error::Config(format!("SNR must be finite, got {s}")));
    }
    Ok(Some(v))
}

/// Either a comma list or an inclusive `lo:hi:step` range.
pub fn parse_grid(value: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = value.split(':').map(str::trim).collect();
    match parts.as_slice() {
        [lo, hi, step] => {
            let (lo, hi, step): (f64, f64, f64) = (
                parse_value("bias_grid", lo)?,
                parse_value("bias_grid", hi)?,
                parse_value("bias_grid", step)?,
            );
            if !(step > 0.0) || hi < lo {
                return Err(Error::Config(format!("bad bias grid range {value:?}")));
            }
            let n = ((hi - lo) / step + 1e-9).floor() as usize;
            Ok((0..=n).map(|i| lo + i as f64 * step).collect())
        }
        [_] => parse_list("bias_grid", value),
        _ => Err(Error::Config(format!("bad bias grid {value:?}"))),
    }
}

impl RunConfig {
    /// Builds a configuration from file text plus `key=value` overrides,
    /// which replace file values.
    pub fn from_text(text: &str, overrides: &[(String, String)], base_dir: &Path) -> Result<Self> {
        let mut map = parse_key_values(text)?;
        for (k, v) in overrides {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        if let Some(k) = map.keys().find(|k| !known_keys().any(|known| known == k.as_str())) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        for k in REQUIRED {
            if !map.contains_key(k) {
                return Err(Error::Config(format!("missing required key `{k}`")));
            }
        }
        for (k, v) in DEFAULTS {
            map.entry(k.to_string()).or_insert_with(|| v.to_string());
        }
        let get = |k: &str| map[k].as_str();
        let path = |k: &str| {
            let p = PathBuf::from(get(k));
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        let stage = |prefix: &str| -> Result<StageSettings> {
            Ok(StageSettings {
                layers: parse_value(prefix, get(&format!("{prefix}_layers")))?,
                learning_rate: parse_value(prefix, get(&format!("{prefix}_lr")))?,
                min_epochs: parse_value(prefix, get(&format!("{prefix}_min_epochs")))?,
                max_epochs: parse_value(prefix, get(&format!("{prefix}_max_epochs")))?,
            })
        };
        let config = RunConfig {
            data_dir: path("data_dir"),
            work_dir: path("work_dir"),
            seed: parse_value("seed", get("seed"))?,
            hidden: parse_value("hidden", get("hidden"))?,
            am: stage("am")?,
            lip: stage("lip")?,
            fusion: stage("fusion")?,
            halving_threshold: parse_value("halving_threshold", get("halving_threshold"))?,
            stop_threshold: parse_value("stop_threshold", get("stop_threshold"))?,
            clip_norm: parse_value("clip_norm", get("clip_norm"))?,
            fill_value: parse_value("fill_value", get("fill_value"))?,
            bn_hidden: parse_list("bn_hidden", get("bn_hidden"))?,
            bn_context: parse_value("bn_context", get("bn_context"))?,
            bn_learning_rate: parse_value("bn_lr", get("bn_lr"))?,
            bn_batch: parse_value("bn_batch", get("bn_batch"))?,
            bn_min_epochs: parse_value("bn_min_epochs", get("bn_min_epochs"))?,
            bn_max_epochs: parse_value("bn_max_epochs", get("bn_max_epochs"))?,
            lip_input: get("lip_input").parse()?,
            snr_levels: parse_list("snr_levels", get("snr_levels"))?,
            tune_conditions: get("tune_conditions")
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(parse_condition)
                .collect::<Result<_>>()?,
            bias_grid: parse_grid(get("bias_grid"))?,
            fusion_bias: match get("fusion_bias") {
                "" => None,
                v => Some(parse_value("fusion_bias", v)?),
            },
            babble_talkers: parse_value("babble_talkers", get("babble_talkers"))?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, overrides, path.parent().unwrap_or(Path::new("")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be positive".into()));
        }
        for (name, s) in [("am", &self.am), ("lip", &self.lip), ("fusion", &self.fusion)] {
            if s.layers == 0 || !(s.learning_rate > 0.0) || s.max_epochs == 0 {
                return Err(Error::Config(format!("{name}: layers, learning rate and max epochs must be positive")));
            }
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold <= self.halving_threshold) {
            return Err(Error::Config("thresholds must satisfy 0 < stop <= halving".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.bn_hidden.len() < 2 || self.bn_hidden.contains(&0) {
            return Err(Error::Config("bn_hidden needs at least two positive widths".into()));
        }
        if self.bn_batch == 0 || !(self.bn_learning_rate > 0.0) || self.bn_max_epochs == 0 {
            return Err(Error::Config("bottleneck batch, learning rate and max epochs must be positive".into()));
        }
        if self.bias_grid.is_empty() {
            return Err(Error::Config("bias_grid is empty".into()));
        }
        if self.tune_conditions.is_empty() {
            return Err(Error::Config("tune_conditions is empty".into()));
        }
        if self.babble_talkers == 0 {
            return Err(Error::Config("babble_talkers must be positive".into()));
        }
        if !self.fill_value.is_finite() {
            return Err(Error::Config("fill_value must be finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<RunConfig> {
        RunConfig::from_text(text, &[], Path::new("/base"))
    }

    #[test]
    fn comments_and_blanks() {
        let m = parse_key_values("# header\n\na = 1 # trailing\n b=two \n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "two");
        assert!(parse_key_values("novalue\n").is_err());
        assert!(parse_key_values("a=1\na=2\n").is_err());
    }

    #[test]
    fn defaults_and_paths() {
        let c = load("data_dir = data\nwork_dir = /abs/work\n").unwrap();
        assert_eq!(c.data_dir, PathBuf::from("/base/data"));
        assert_eq!(c.work_dir, PathBuf::from("/abs/work"));
        assert_eq!(c.fusion.layers, 3);
        assert_eq!(c.bn_hidden, vec![64, 64, 8, 64]);
        assert_eq!(c.bn_batch, 256);
        assert_eq!(c.tune_conditions, vec![None, Some(10.0), Some(0.0)]);
        assert_eq!(c.bias_grid.len(), 33);
        assert_eq!(c.fusion_bias, None);
    }

    #[test]
    fn rejects_unknown_and_missing() {
        assert!(load("data_dir = d\nwork_dir = w\ncolour = red\n").is_err());
        assert!(load("data_dir = d\n").is_err());
        assert!(load("data_dir = d\nwork_dir = w\nstop_threshold = 2\n").is_err());
    }

    #[test]
    fn overrides_win() {
        let o = vec![("seed".to_string(), "9".to_string()), ("lip_input".to_string(), "raw".to_string())];
        let c = RunConfig::from_text("data_dir = d\nwork_dir = w\nseed = 3\n", &o, Path::new("")).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.lip_input, LipInput::Raw);
    }

    #[test]
    fn grids_and_conditions() {
        assert_eq!(parse_grid("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_grid("3, -1").unwrap(), vec![3.0, -1.0]);
        assert!(parse_grid("1:0:0.5").is_err());
        assert_eq!(parse_condition("clean").unwrap(), None);
        assert_eq!(parse_condition("10dB").unwrap(), Some(10.0));
        assert!(parse_condition("loud").is_err());
    }
}
