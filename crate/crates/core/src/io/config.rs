//! Flat `key = value` run configuration with `#` comments.
//!
//! ```text
//! # tiny overfit run
//! input_extents = 16, 16, 16
//! patch = 2, 2, 2
//! stage_channels = 8, 16, 32, 64
//! epochs = 300
//! ```
//!
//! Absent keys keep their defaults; unknown or repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Synthetic training volumes to generate.
    pub num_samples: usize,
    pub data_seed: u64,
    /// Worker threads for kernel parallelism.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelConfig::default(), train: TrainConfig::default(), num_samples: 8, data_seed: 0, threads: 1 }
    }
}

fn err(line: usize, detail: impl std::fmt::Display) -> Error {
    Error::format("config", format!("line {line}: {detail}"))
}

fn scalar<V: FromStr>(line: usize, key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| err(line, format!("`{key}`: cannot parse `{value}`")))
}

fn list<const N: usize>(line: usize, key: &str, value: &str) -> Result<[usize; N]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(err(line, format!("`{key}` needs {N} comma-separated values, got {}", parts.len())));
    }
    let mut out = [0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = scalar(line, key, p)?;
    }
    Ok(out)
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
}

/// Splits text into `(line number, key, value)`, rejecting malformed and
/// repeated keys.
pub fn key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(err(line, format!("expected `key = value`, got `{content}`")));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err(line, "empty key"));
        }
        if !seen.insert(k.to_string()) {
            return Err(err(line, format!("duplicate key `{k}`")));
        }
        out.push((line, k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Applies one model key. Returns `false` if the key is not a model key.
pub(crate) fn set_model_key(m: &mut ModelConfig, line: usize, key: &str, value: &str) -> Result<bool> {
    match key {
        "input_extents" => m.input_extents = list(line, key, value)?,
        "in_channels" => m.in_channels = scalar(line, key, value)?,
        "num_classes" => m.num_classes = scalar(line, key, value)?,
        "patch" => m.patch = list(line, key, value)?,
        "stage_channels" => m.stage_channels = list(line, key, value)?,
        "blocks_per_stage" => m.blocks_per_stage = scalar(line, key, value)?,
        "heads" => m.heads = scalar(line, key, value)?,
        "proj_dim" => m.proj_dim = scalar(line, key, value)?,
        "stem_channels" => m.stem_channels = scalar(line, key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub(crate) fn model_to_text(m: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "input_extents = {}", join(&m.input_extents));
    let _ = writeln!(s, "in_channels = {}", m.in_channels);
    let _ = writeln!(s, "num_classes = {}", m.num_classes);
    let _ = writeln!(s, "patch = {}", join(&m.patch));
    let _ = writeln!(s, "stage_channels = {}", join(&m.stage_channels));
    let _ = writeln!(s, "blocks_per_stage = {}", m.blocks_per_stage);
    let _ = writeln!(s, "heads = {}", m.heads);
    let _ = writeln!(s, "proj_dim = {}", m.proj_dim);
    let _ = writeln!(s, "stem_channels = {}", m.stem_channels);
    s
}

/// Parses a model description consisting of model keys only.
pub fn parse_model(text: &str) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    for (line, k, v) in key_values(text)? {
        if !set_model_key(&mut m, line, &k, &v)? {
            return Err(err(line, format!("unknown key `{k}`")));
        }
    }
    m.validate()?;
    Ok(m)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (line, k, v) in key_values(text)? {
            if set_model_key(&mut c.model, line, &k, &v)? {
                continue;
            }
            let t = &mut c.train;
            match k.as_str() {
                "epochs" => t.epochs = scalar(line, &k, &v)?,
                "batch_size" => t.batch_size = scalar(line, &k, &v)?,
                "learning_rate" => t.learning_rate = scalar(line, &k, &v)?,
                "weight_decay" => t.weight_decay = scalar(line, &k, &v)?,
                "momentum" => t.momentum = scalar(line, &k, &v)?,
                "seed" => t.seed = scalar(line, &k, &v)?,
                "target_dsc" => t.target_dsc = if v == "none" { None } else { Some(scalar(line, &k, &v)?) },
                "num_samples" => c.num_samples = scalar(line, &k, &v)?,
                "data_seed" => c.data_seed = scalar(line, &k, &v)?,
                "threads" => c.threads = scalar(line, &k, &v)?,
                _ => return Err(err(line, format!("unknown key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.num_samples == 0 || self.threads == 0 {
            return Err(Error::Config("num_samples and threads must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = model_to_text(&self.model);
        let t = &self.train;
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "learning_rate = {:?}", t.learning_rate);
        let _ = writeln!(s, "weight_decay = {:?}", t.weight_decay);
        let _ = writeln!(s, "momentum = {:?}", t.momentum);
        let _ = writeln!(s, "seed = {}", t.seed);
        let target = t.target_dsc.map_or_else(|| "none".to_string(), |d| format!("{d:?}"));
        let _ = writeln!(s, "target_dsc = {target}");
        let _ = writeln!(s, "num_samples = {}", self.num_samples);
        let _ = writeln!(s, "data_seed = {}", self.data_seed);
        let _ = writeln!(s, "threads = {}", self.threads);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_comments() {
        let c = RunConfig::parse(
            "# toy\ninput_extents = 16,16,16\npatch = 2, 2, 2  # embed\nstage_channels=8,16,32,64\n\
             blocks_per_stage = 1\nheads = 2\nproj_dim = 16\nnum_classes = 3\nepochs = 4\ntarget_dsc = 0.9\n",
        )
        .unwrap();
        assert_eq!(c.model.input_extents, [16; 3]);
        assert_eq!(c.model.stage_channels, [8, 16, 32, 64]);
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.train.target_dsc, Some(0.9));
        assert_eq!(c.train.learning_rate, 0.01);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::parse("epochs = 2\nlearnign_rate = 0.1\n").unwrap_err().to_string();
        assert!(e.contains("learnign_rate") && e.contains("line 2"), "{e}");
    }

    #[test]
    fn malformed_lines_rejected() {
        for bad in ["epochs 3", "= 3", "epochs = x", "patch = 1,2", "epochs = 1\nepochs = 2", "epochs = 0"] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig { model: ModelConfig::toy(), ..Default::default() };
        c.train.learning_rate = 0.1 + 0.2;
        c.train.target_dsc = Some(0.95);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
