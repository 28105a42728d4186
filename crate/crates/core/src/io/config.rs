//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::trainer::{Clamp, Method, TrainConfig};

/// Training configuration plus the file-system side of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub output: PathBuf,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { train: TrainConfig::default(), dataset: None, output: PathBuf::from("run"), checkpoint_every: 100 }
    }
}

const KEYS: &[&str] = &[
    "method",
    "batch_size",
    "iterations",
    "learning_rate",
    "decay_every",
    "langevin_steps",
    "single_grid_steps",
    "match_budget",
    "step_size",
    "scale_factor",
    "grids",
    "image_size",
    "channels",
    "channel_scale",
    "reference",
    "clamp",
    "pixel_range",
    "sampling_norm",
    "histogram_bins",
    "seed",
    "mask",
    "architecture",
    "dataset",
    "output",
    "checkpoint_every",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{v}' for {key}"))),
    }
}

fn parse_pair(key: &str, v: &str, sep: char) -> Result<(String, String)> {
    v.split_once(sep)
        .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("{key} expects two values separated by '{sep}', got '{v}'")))
}

impl RunConfig {
    /// Sets one key. `image_size` is checked against `scale_factor^grids`
    /// by [`RunConfig::validate`] and otherwise only documents the run.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key.trim() {
            "method" => t.method = Method::parse(v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "iterations" => t.iterations = parse_num(key, v)?,
            "learning_rate" => t.learning_rate = parse_num(key, v)?,
            "decay_every" => t.decay_every = parse_num(key, v)?,
            "langevin_steps" => t.langevin_steps = parse_num(key, v)?,
            "single_grid_steps" => t.single_grid_steps = parse_num(key, v)?,
            "match_budget" => t.match_budget = parse_bool(key, v)?,
            "step_size" => t.step_size = parse_num(key, v)?,
            "scale_factor" => t.scale_factor = parse_num(key, v)?,
            "grids" => t.grids = parse_num(key, v)?,
            "image_size" => {
                let side: usize = parse_num(key, v)?;
                if side != t.image_side() {
                    return Err(Error::Config(format!(
                        "image_size {side} != scale_factor^grids = {} (set those first)",
                        t.image_side()
                    )));
                }
            }
            "channels" => t.channels = parse_num(key, v)?,
            "channel_scale" => t.channel_scale = parse_num(key, v)?,
            "reference" => t.reference = v.parse()?,
            "clamp" => t.clamp = Clamp::parse(v)?,
            "pixel_range" => {
                let (a, b) = parse_pair(key, v, ',')?;
                t.pixel_range = (parse_num(key, &a)?, parse_num(key, &b)?);
            }
            "sampling_norm" => t.sampling_norm = v.parse()?,
            "histogram_bins" => t.histogram_bins = parse_num(key, v)?,
            "seed" => t.seed = parse_num(key, v)?,
            "mask" => {
                t.mask = if v == "none" {
                    None
                } else {
                    let (h, w) = parse_pair(key, v, 'x')?;
                    Some((parse_num(key, &h)?, parse_num(key, &w)?))
                }
            }
            "architecture" => {
                t.architectures = if v.is_empty() || v == "preset" {
                    Vec::new()
                } else {
                    v.split(';').map(|s| s.trim().parse::<NetworkSpec>()).collect::<Result<_>>()?
                }
            }
            "dataset" => self.dataset = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "output" => self.output = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}' (known: {})", KEYS.join(", ")))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys are applied
    /// in order on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", i + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }

    /// Serializes every key; parsing the result reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("method", t.method.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("iterations", t.iterations.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("decay_every", t.decay_every.to_string());
        kv("langevin_steps", t.langevin_steps.to_string());
        kv("single_grid_steps", t.single_grid_steps.to_string());
        kv("match_budget", t.match_budget.to_string());
        kv("step_size", t.step_size.to_string());
        kv("scale_factor", t.scale_factor.to_string());
        kv("grids", t.grids.to_string());
        kv("channels", t.channels.to_string());
        kv("channel_scale", t.channel_scale.to_string());
        kv("reference", t.reference.to_string());
        kv("clamp", t.clamp.name().to_string());
        kv("pixel_range", format!("{},{}", t.pixel_range.0, t.pixel_range.1));
        kv("sampling_norm", t.sampling_norm.to_string());
        kv("histogram_bins", t.histogram_bins.to_string());
        kv("seed", t.seed.to_string());
        kv("mask", t.mask.map_or("none".to_string(), |(h, w)| format!("{h}x{w}")));
        kv(
            "architecture",
            if t.architectures.is_empty() {
                "preset".to_string()
            } else {
                t.architectures.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";")
            },
        );
        kv("dataset", self.dataset.as_ref().map_or(String::new(), |p| p.display().to_string()));
        kv("output", self.output.display().to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        out
    }
}
