//! Experiment configuration.
//!
//! Configuration files are TOML with dotted key paths (`window.H`,
//! `train.lr`, ...). Any key can be overridden from the environment by its
//! upper-cased path with dots replaced by underscores (`WINDOW_H`,
//! `TRAIN_LR`). List-valued keys accept TOML arrays or comma-separated
//! strings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::LabelConfig;
use crate::netsim::{ChannelConfig, SimConfig};
use crate::predictor::{CnnArch, TrainConfig};
use crate::probing::ProbeConfig;
use crate::selector::{PolicyKind, StreamSetup};
use crate::videostream::{EncoderProfile, PsnrModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub video: EncoderProfile,
    pub probe: ProbeConfig,
    pub label: LabelConfig,
    /// Classifier shape; `arch.history_len` is the feature history H.
    pub arch: CnnArch,
    pub train: TrainConfig,
    pub psnr: PsnrModel,
    pub policy: PolicyKind,
    pub num_gops: u64,
    /// Deadline reduction reserved for inference, seconds.
    pub deadline_allowance: f64,
    /// GoPs between video channel changes while collecting datasets.
    pub rotation_period: u64,
    /// Future GoPs the oracle looks at.
    pub oracle_window: usize,
    /// Channel used during warm-up and by the fixed and ABR baselines.
    pub initial_channel: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sim: SimConfig::default(),
            video: EncoderProfile::default(),
            probe: ProbeConfig::default(),
            label: LabelConfig::default(),
            arch: CnnArch::default(),
            train: TrainConfig::default(),
            psnr: PsnrModel::default(),
            policy: PolicyKind::Predictive,
            num_gops: 5000,
            deadline_allowance: 5e-6,
            rotation_period: 50,
            oracle_window: 1,
            initial_channel: 1,
        }
    }
}

/// Every recognised key path, in documentation order.
pub const KEYS: &[&str] = &[
    "channels.count",
    "channels.rate_bps",
    "channels.base_latency_s",
    "gop.duration_s",
    "gop.frames",
    "video.ref_packets",
    "video.packet_bytes",
    "video.diff_min",
    "video.diff_max",
    "probe.count",
    "probe.bytes",
    "window.W",
    "window.H",
    "label.y_db",
    "label.k",
    "cnn.kernels",
    "cnn.kernel_len",
    "cnn.hidden",
    "cnn.shared_kernels",
    "train.lr",
    "train.epochs",
    "train.batch",
    "train.fraction",
    "sim.seed",
    "sim.mobility_variance",
    "sim.queue_cap_s",
    "run.num_gops",
    "run.policy",
    "run.deadline_allowance_s",
    "run.rotation_period",
    "run.oracle_window",
    "run.initial_channel",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse '{value}' for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl ExperimentConfig {
    /// Environment variable name of a key path.
    pub fn env_name(key: &str) -> String {
        key.replace('.', "_").to_uppercase()
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "channels.count" => {
                let n: usize = parse(key, value)?;
                self.sim.num_channels = n;
                self.sim.channels.resize(n, ChannelConfig::default());
            }
            "channels.rate_bps" => {
                let rates: Vec<f64> = parse_list(key, value)?;
                match rates.as_slice() {
                    [r] => self.sim.channels.iter_mut().for_each(|c| c.nominal_rate = *r),
                    rs if rs.len() == self.sim.channels.len() => {
                        for (c, r) in self.sim.channels.iter_mut().zip(rs) {
                            c.nominal_rate = *r;
                        }
                    }
                    rs => {
                        return Err(Error::Config(format!(
                            "channels.rate_bps has {} entries for {} channels",
                            rs.len(),
                            self.sim.channels.len()
                        )))
                    }
                }
            }
            "channels.base_latency_s" => {
                let v: f64 = parse(key, value)?;
                self.sim.channels.iter_mut().for_each(|c| c.base_latency = v);
            }
            "gop.duration_s" => self.sim.gop_duration = parse(key, value)?,
            "gop.frames" => {
                let f: u32 = parse(key, value)?;
                self.sim.frames_per_gop = f;
                self.video.frames_per_gop = f;
            }
            "video.ref_packets" => self.video.ref_frame_packets = parse(key, value)?,
            "video.packet_bytes" => self.video.packet_size = parse(key, value)?,
            "video.diff_min" => self.video.diff_frame_packets_min = parse(key, value)?,
            "video.diff_max" => self.video.diff_frame_packets_max = parse(key, value)?,
            "probe.count" => self.probe.burst_size = parse(key, value)?,
            "probe.bytes" => self.probe.packet_size = parse(key, value)?,
            "window.W" => self.label.window = parse(key, value)?,
            "window.H" => self.arch.history_len = parse(key, value)?,
            "label.y_db" => self.label.threshold_db = parse(key, value)?,
            "label.k" => self.label.k = parse(key, value)?,
            "cnn.kernels" => self.arch.num_kernels = parse(key, value)?,
            "cnn.kernel_len" => self.arch.kernel_len = parse(key, value)?,
            "cnn.hidden" => self.arch.hidden = parse_list(key, value)?,
            "cnn.shared_kernels" => self.arch.shared_kernels = parse(key, value)?,
            "train.lr" => self.train.learning_rate = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch" => self.train.batch_size = parse(key, value)?,
            "train.fraction" => self.train.train_fraction = parse(key, value)?,
            "sim.seed" => {
                let seed: u64 = parse(key, value)?;
                self.sim.seed = seed;
                self.train.seed = seed;
            }
            "sim.mobility_variance" => self.sim.mobility_variance = parse(key, value)?,
            "sim.queue_cap_s" => self.sim.queue_cap_seconds = parse(key, value)?,
            "run.num_gops" => self.num_gops = parse(key, value)?,
            "run.policy" => self.policy = value.parse()?,
            "run.deadline_allowance_s" => self.deadline_allowance = parse(key, value)?,
            "run.rotation_period" => self.rotation_period = parse(key, value)?,
            "run.oracle_window" => self.oracle_window = parse(key, value)?,
            "run.initial_channel" => self.initial_channel = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Applies every key found in a TOML document.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let doc: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut pairs = Vec::new();
        flatten("", &toml::Value::Table(doc), &mut pairs)?;
        // channels.count resizes the channel list, so it goes first
        pairs.sort_by_key(|(k, _)| k != "channels.count");
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies overrides from `(name, value)` pairs such as the process
    /// environment. Unrelated names are ignored.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let vars: Vec<(String, String)> = vars.into_iter().collect();
        for key in KEYS {
            let name = Self::env_name(key);
            if let Some((_, v)) = vars.iter().find(|(n, _)| *n == name) {
                self.set(key, v)?;
            }
        }
        Ok(())
    }

    /// Defaults, then the optional file, then the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = path {
            cfg.apply_toml(&std::fs::read_to_string(p)?)?;
        }
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.video.validate()?;
        self.probe.validate()?;
        self.label.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.psnr.validate()?;
        if self.video.frames_per_gop != self.sim.frames_per_gop {
            return Err(Error::Config("video and simulator disagree on frames per GoP".into()));
        }
        let min_gops = (self.label.window + self.arch.history_len + 1) as u64;
        if self.num_gops < min_gops {
            return Err(Error::Config(format!(
                "num_gops {} is below W + H + 1 = {min_gops}",
                self.num_gops
            )));
        }
        if !(self.deadline_allowance >= 0.0 && self.deadline_allowance < self.sim.gop_duration) {
            return Err(Error::Config("deadline allowance must lie in [0, gop duration)".into()));
        }
        if self.rotation_period == 0 || self.oracle_window == 0 {
            return Err(Error::Config("rotation_period and oracle_window must be positive".into()));
        }
        if self.initial_channel == 0 || self.initial_channel > self.sim.num_channels {
            return Err(Error::Config(format!(
                "initial_channel {} outside 1..={}",
                self.initial_channel, self.sim.num_channels
            )));
        }
        Ok(())
    }

    pub fn history_len(&self) -> usize {
        self.arch.history_len
    }

    pub fn stream_setup(&self) -> StreamSetup {
        StreamSetup {
            profile: self.video.clone(),
            probe: self.probe.clone(),
            psnr: self.psnr.clone(),
            deadline_allowance: self.deadline_allowance,
            seed: self.sim.seed,
        }
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) -> Result<()> {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out)?;
            }
        }
        toml::Value::Array(items) => {
            let parts: Result<Vec<String>> = items.iter().map(scalar).collect();
            out.push((prefix.to_string(), parts?.join(",")));
        }
        v => out.push((prefix.to_string(), scalar(v)?)),
    }
    Ok(())
}

fn scalar(value: &toml::Value) -> Result<String> {
    Ok(match value {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        other => return Err(Error::Parse(format!("unsupported configuration value {other}"))),
    })
}
