//! Line-oriented run configuration: `key = value`, `#` starts a comment.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{self, DatasetKind, Sample};
use crate::error::{Error, Result};
use crate::graph::RelationVariant;
use crate::model::{SegmenterConfig, StageConfig};
use crate::ops::GeluKind;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synthetic(DatasetKind),
    /// Directory of `*.ppm` images with `*.pgm` labels.
    Directory(PathBuf),
}

/// Everything a `train`/`eval`/`ablate` run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub model: SegmenterConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSource,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Boundary band width in pixels.
    pub band: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            model: SegmenterConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetSource::Synthetic(DatasetKind::Stripes),
            train_samples: 8,
            eval_samples: 8,
            band: 1,
        }
    }
}

pub const KEYS: &[&str] = &[
    "channels",
    "stages",
    "num_classes",
    "height",
    "width",
    "fusion",
    "r_gr",
    "r_lr",
    "r_ba",
    "theta_coefficient",
    "graph_depth",
    "relation",
    "gelu",
    "enable_gt",
    "enable_ba",
    "seed",
    "dataset",
    "train_samples",
    "eval_samples",
    "steps",
    "lr",
    "batch_size",
    "two_phase",
    "band",
];

fn bad_value(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!("`{key}`: cannot parse `{value}` as {expected}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad_value(key, value, "a number"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(bad_value(key, value, "a boolean")),
    }
}

/// Parses `BLOCKSxMxN` stage specs separated by commas, e.g. `1x2x2,1x2x2`.
pub fn parse_stages(value: &str) -> Result<Vec<StageConfig>> {
    value
        .split(',')
        .map(|stage| {
            let parts: Vec<usize> = stage
                .trim()
                .split('x')
                .map(|p| {
                    p.parse()
                        .map_err(|_| bad_value("stages", value, "BLOCKSxMxN[,…]"))
                })
                .collect::<Result<_>>()?;
            match parts[..] {
                [blocks, rows, cols] => Ok(StageConfig { blocks, rows, cols }),
                _ => Err(bad_value("stages", value, "BLOCKSxMxN[,…]")),
            }
        })
        .collect()
}

fn format_stages(stages: &[StageConfig]) -> String {
    stages
        .iter()
        .map(|s| format!("{}x{}x{}", s.blocks, s.rows, s.cols))
        .collect::<Vec<_>>()
        .join(",")
}

impl RunSettings {
    /// Sets one key; unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "channels" => m.channels = parse_num(key, value)?,
            "stages" => m.stages = parse_stages(value)?,
            "num_classes" => m.num_classes = parse_num(key, value)?,
            "height" => m.height = parse_num(key, value)?,
            "width" => m.width = parse_num(key, value)?,
            "fusion" => m.fusion = value.parse()?,
            "r_gr" => m.r_gr = parse_num(key, value)?,
            "r_lr" => m.r_lr = parse_num(key, value)?,
            "r_ba" => m.r_ba = parse_num(key, value)?,
            "theta_coefficient" => m.theta_coefficient = parse_num(key, value)?,
            "graph_depth" => m.graph_depth = parse_num(key, value)?,
            "relation" => {
                m.relation = match value {
                    "softmax" => RelationVariant::Softmax,
                    "cosine" => RelationVariant::Cosine,
                    _ => return Err(bad_value(key, value, "softmax or cosine")),
                }
            }
            "gelu" => {
                m.gelu = match value {
                    "tanh" => GeluKind::Tanh,
                    "erf" => GeluKind::Erf,
                    _ => return Err(bad_value(key, value, "tanh or erf")),
                }
            }
            "enable_gt" => m.enable_gt = parse_bool(key, value)?,
            "enable_ba" => m.enable_ba = parse_bool(key, value)?,
            "seed" => m.seed = parse_num(key, value)?,
            "dataset" => {
                self.dataset = match value.parse::<DatasetKind>() {
                    Ok(kind) => DatasetSource::Synthetic(kind),
                    Err(_) => DatasetSource::Directory(PathBuf::from(value)),
                }
            }
            "train_samples" => self.train_samples = parse_num(key, value)?,
            "eval_samples" => self.eval_samples = parse_num(key, value)?,
            "steps" => self.train.steps = parse_num(key, value)?,
            "lr" => self.train.lr = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "two_phase" => self.train.two_phase = parse_bool(key, value)?,
            "band" => self.band = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a `KEY=VALUE` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not KEY=VALUE")))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies every assignment of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        s.apply_text(text)?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train_samples == 0 || self.eval_samples == 0 {
            return Err(Error::Config(
                "train_samples and eval_samples must be positive".into(),
            ));
        }
        if self.band == 0 {
            return Err(Error::Config("band must be at least 1".into()));
        }
        if self.train.batch_size == 0 || !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(Error::Config(
                "batch_size must be positive and lr positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// Resolved settings in config-file syntax; parsing it gives `self` back.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("channels", m.channels.to_string());
        kv("stages", format_stages(&m.stages));
        kv("num_classes", m.num_classes.to_string());
        kv("height", m.height.to_string());
        kv("width", m.width.to_string());
        kv("fusion", m.fusion.to_string());
        kv("r_gr", m.r_gr.to_string());
        kv("r_lr", m.r_lr.to_string());
        kv("r_ba", m.r_ba.to_string());
        kv("theta_coefficient", m.theta_coefficient.to_string());
        kv("graph_depth", m.graph_depth.to_string());
        let relation = match m.relation {
            RelationVariant::Softmax => "softmax",
            RelationVariant::Cosine => "cosine",
        };
        kv("relation", relation.into());
        let gelu = match m.gelu {
            GeluKind::Tanh => "tanh",
            GeluKind::Erf => "erf",
        };
        kv("gelu", gelu.into());
        kv("enable_gt", m.enable_gt.to_string());
        kv("enable_ba", m.enable_ba.to_string());
        kv("seed", m.seed.to_string());
        let dataset = match &self.dataset {
            DatasetSource::Synthetic(k) => k.to_string(),
            DatasetSource::Directory(p) => p.display().to_string(),
        };
        kv("dataset", dataset);
        kv("train_samples", self.train_samples.to_string());
        kv("eval_samples", self.eval_samples.to_string());
        kv("steps", self.train.steps.to_string());
        kv("lr", self.train.lr.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("two_phase", self.train.two_phase.to_string());
        kv("band", self.band.to_string());
        out
    }

    /// Training and held-out samples. Synthetic sets draw both from one
    /// seeded stream (training first); directories are split the same way.
    pub fn datasets(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let n = self.train_samples + self.eval_samples;
        let m = &self.model;
        let mut all = match &self.dataset {
            DatasetSource::Synthetic(kind) => {
                data::synth_dataset(*kind, n, m.height, m.width, m.num_classes, m.seed)?
            }
            DatasetSource::Directory(dir) => {
                let all = data::import_dataset(dir)?;
                if all.len() < n {
                    return Err(Error::Config(format!(
                        "{} holds {} samples, {n} requested",
                        dir.display(),
                        all.len()
                    )));
                }
                all
            }
        };
        all.truncate(n);
        for s in &all {
            s.labels.check_classes(m.num_classes)?;
        }
        let eval = all.split_off(self.train_samples);
        Ok((all, eval))
    }
}
