//! Run configuration: a preset plus flat `key = value` overrides.

use std::fmt;
use std::str::FromStr;

use crate::data::{GeneratorConfig, Window};
use crate::error::{Error, Result};
use crate::model::{parse, ModelConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Toy,
    PaperScale,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Toy => "toy",
            Preset::PaperScale => "paper-scale",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "toy" => Ok(Preset::Toy),
            "paper-scale" | "paper_scale" => Ok(Preset::PaperScale),
            other => Err(Error::Config(format!("unknown preset {other:?} (toy | paper-scale)"))),
        }
    }
}

/// Everything a run needs, fully concrete.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub window: Window,
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => Self {
                preset,
                model: ModelConfig::toy(),
                train: TrainConfig::toy(),
                window: Window::default(),
            },
            Preset::PaperScale => Self {
                preset,
                model: ModelConfig::paper_scale(),
                train: TrainConfig::paper_scale(),
                window: Window::default(),
            },
        }
    }

    /// Generator settings matching the model's volume shape.
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig::with_shape(self.model.num_slices, self.model.slice_height, self.model.slice_width)
    }

    /// Applies one override. `preset` resets every field to that preset.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "preset" => *self = Self::from_preset(value.parse()?),
            "window_low" => self.window.low = parse(key, value)?,
            "window_high" => self.window.high = parse(key, value)?,
            _ => {
                if !self.model.set(key, value)? && !self.train.set(key, value)? {
                    return Err(Error::Config(format!("unknown configuration key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Parses a config file. A `preset` line, if present, is applied first
    /// wherever it appears; every other line overrides it in file order.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_preset(text, None)
    }

    /// [`RunConfig::parse`] with `preset`, when given, replacing any
    /// `preset` line of the file.
    pub fn parse_with_preset(text: &str, preset: Option<Preset>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            pairs.push((no + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let base = match (preset, pairs.iter().rev().find(|(_, k, _)| k == "preset")) {
            (Some(p), _) => p,
            (None, Some((_, _, v))) => v.parse()?,
            (None, None) => Preset::default(),
        };
        let mut cfg = Self::from_preset(base);
        for (no, k, v) in pairs.iter().filter(|(_, k, _)| k != "preset") {
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {no}: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.window.low < self.window.high) {
            return Err(Error::Config("window_low must be below window_high".into()));
        }
        Ok(())
    }

    /// Round-trippable `key = value` text.
    pub fn to_text(&self) -> String {
        let mut s = format!("preset = {}\n", self.preset);
        for (k, v) in self.model.to_pairs().into_iter().chain(self.train.to_pairs()) {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str(&format!("window_low = {}\nwindow_high = {}\n", self.window.low, self.window.high));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_then_overrides() {
        let cfg = RunConfig::parse("batch_size = 3\n# comment\npreset = paper-scale\nembed_dim = 32 # inline\n").unwrap();
        assert_eq!(cfg.preset, Preset::PaperScale);
        assert_eq!(cfg.train.batch_size, 3);
        assert_eq!(cfg.model.embed_dim, 32);
        assert_eq!(cfg.model.num_slices, 26);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::from_preset(Preset::Toy);
        cfg.set("learning_rate", "0.001").unwrap();
        cfg.set("validation_fraction", "none").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_names_line() {
        let err = RunConfig::parse("preset = toy\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
    }
}
