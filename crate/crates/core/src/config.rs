//! Run configuration files.
//!
//! One `key = value` per line, `#` starts a comment, blank lines are ignored.
//! Keys are flat with a dotted prefix:
//!
//! ```text
//! # architecture
//! net.base_width = 8
//! net.depth = 3
//! train.lr = 1e-4
//! train.focal_alpha = auto      # or a comma list, one weight per class
//! data.ratio = 0.8
//! ```
//!
//! Missing keys keep their defaults. Unknown keys, repeated keys and
//! malformed values are all reported together.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::NetConfig;
use crate::training::{TrainConfig, WeightDecay};

pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;

/// How a dataset directory is split into train and test ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Fraction of each class assigned to training.
    pub ratio: f64,
    /// Split shuffle seed; `None` reuses the training seed.
    pub split_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { ratio: DEFAULT_SPLIT_RATIO, split_seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl FromStr for WeightDecay {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "decoupled" => Ok(WeightDecay::Decoupled),
            "l2" => Ok(WeightDecay::L2),
            other => Err(format!("unknown weight decay mode '{other}' (expected decoupled or l2)")),
        }
    }
}

impl std::fmt::Display for WeightDecay {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeightDecay::Decoupled => "decoupled",
            WeightDecay::L2 => "l2",
        })
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("{key}: cannot parse '{value}': {e}"))
}

fn parse_alpha(value: &str) -> std::result::Result<Option<Vec<f64>>, String> {
    if value == "auto" {
        return Ok(None);
    }
    value
        .split(',')
        .map(|v| parse_value::<f64>("train.focal_alpha", v.trim()))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(Some)
}

impl RunConfig {
    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut errs = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errs.push(format!("line {}: expected 'key = value', got '{line}'", lineno + 1));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                errs.push(format!("line {}: '{key}' is set more than once", lineno + 1));
                continue;
            }
            if let Err(e) = cfg.set(key, value) {
                errs.push(format!("line {}: {e}", lineno + 1));
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assigns one key. Does not validate ranges.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let (n, t, d) = (&mut self.net, &mut self.train, &mut self.data);
        match key {
            "net.in_channels" => n.in_channels = parse_value(key, value)?,
            "net.base_width" => n.base_width = parse_value(key, value)?,
            "net.depth" => n.depth = parse_value(key, value)?,
            "net.num_classes" => n.num_classes = parse_value(key, value)?,
            "net.seg_channels" => n.seg_channels = parse_value(key, value)?,
            "net.dropout" => n.dropout_p = parse_value(key, value)?,
            "net.input_size" => n.input_size = parse_value(key, value)?,
            "net.norm_groups" => n.norm_groups = parse_value(key, value)?,
            "train.epochs" => t.epochs = parse_value(key, value)?,
            "train.batch_size" => t.batch_size = parse_value(key, value)?,
            "train.lr" => t.lr = parse_value(key, value)?,
            "train.weight_decay" => t.weight_decay = parse_value(key, value)?,
            "train.weight_decay_mode" => t.weight_decay_mode = parse_value(key, value)?,
            "train.lambda" => t.lambda = parse_value(key, value)?,
            "train.seed" => t.seed = parse_value(key, value)?,
            "train.eval_every" => t.eval_every = parse_value(key, value)?,
            "train.focal_gamma" => t.focal_gamma = parse_value(key, value)?,
            "train.focal_alpha" => t.focal_alpha = parse_alpha(value)?,
            "train.dice_eps" => t.dice_eps = parse_value(key, value)?,
            "train.dice_mode" => t.dice_mode = parse_value(key, value)?,
            "train.threshold" => t.threshold = parse_value(key, value)?,
            "data.ratio" => d.ratio = parse_value(key, value)?,
            "data.split_seed" => d.split_seed = if value == "auto" { None } else { Some(parse_value(key, value)?) },
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Validates all three sections, reporting every violation.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for r in [self.net.validate(), self.train.validate()] {
            match r {
                Err(Error::Config(v)) => errs.extend(v),
                Err(e) => errs.push(e.to_string()),
                Ok(()) => {}
            }
        }
        if !(self.data.ratio > 0.0 && self.data.ratio < 1.0) {
            errs.push(format!("data.ratio must be in (0, 1), got {}", self.data.ratio));
        }
        if let Some(alpha) = &self.train.focal_alpha {
            if alpha.len() != self.net.num_classes {
                errs.push(format!(
                    "train.focal_alpha has {} weights for {} classes",
                    alpha.len(),
                    self.net.num_classes
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.data.split_seed.unwrap_or(self.train.seed)
    }

    /// Every key with its current value, in a form `parse` reads back to an
    /// equal config.
    pub fn to_text(&self) -> String {
        let (n, t, d) = (&self.net, &self.train, &self.data);
        let alpha = match &t.focal_alpha {
            None => "auto".to_string(),
            Some(a) => a.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        };
        let split_seed = d.split_seed.map_or("auto".to_string(), |s| s.to_string());
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(out, "{k} = {v}").expect("string write");
        kv("net.in_channels", &n.in_channels);
        kv("net.base_width", &n.base_width);
        kv("net.depth", &n.depth);
        kv("net.num_classes", &n.num_classes);
        kv("net.seg_channels", &n.seg_channels);
        kv("net.dropout", &n.dropout_p);
        kv("net.input_size", &n.input_size);
        kv("net.norm_groups", &n.norm_groups);
        kv("train.epochs", &t.epochs);
        kv("train.batch_size", &t.batch_size);
        kv("train.lr", &t.lr);
        kv("train.weight_decay", &t.weight_decay);
        kv("train.weight_decay_mode", &t.weight_decay_mode);
        kv("train.lambda", &t.lambda);
        kv("train.seed", &t.seed);
        kv("train.eval_every", &t.eval_every);
        kv("train.focal_gamma", &t.focal_gamma);
        kv("train.focal_alpha", &alpha);
        kv("train.dice_eps", &t.dice_eps);
        kv("train.dice_mode", &t.dice_mode);
        kv("train.threshold", &t.threshold);
        kv("data.ratio", &d.ratio);
        kv("data.split_seed", &split_seed);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::DiceMode;

    #[test]
    fn empty_text_gives_defaults() {
        let c = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.train.epochs, c.train.batch_size, c.train.lambda), (50, 8, 0.7));
    }

    #[test]
    fn reads_keys_and_comments() {
        let c = RunConfig::parse(
            "net.base_width = 8 # narrow\ntrain.lr=0.001\ntrain.focal_alpha = 1, 2, 3\ndata.split_seed = 9\n",
        )
        .unwrap();
        assert_eq!(c.net.base_width, 8);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.focal_alpha, Some(vec![1.0, 2.0, 3.0]));
        assert_eq!(c.split_seed(), 9);
    }

    #[test]
    fn collects_every_problem() {
        let err = RunConfig::parse("net.depth = x\nbogus = 1\nno equals\ntrain.lr = 1\ntrain.lr = 2\n").unwrap_err();
        match err {
            Error::Config(v) => assert_eq!(v.len(), 4, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn range_violations_surface() {
        match RunConfig::parse("train.lambda = 1.5\ndata.ratio = 1\n") {
            Err(Error::Config(v)) => assert_eq!(v.len(), 2, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.net.base_width = 8;
        c.train.lr = 3.3e-4;
        c.train.focal_alpha = Some(vec![0.5, 1.0 / 3.0, 2.0]);
        c.train.dice_mode = DiceMode::PerImage;
        c.train.weight_decay_mode = WeightDecay::L2;
        c.data.split_seed = Some(11);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
