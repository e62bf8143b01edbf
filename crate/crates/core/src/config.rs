//! Flat `key=value` configuration shared by the model, trainer and CLI.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{MvsError, Result};
use crate::hypothesis::IntervalScheme;
use crate::sampling::PointScheme;

/// Architecture and cascade settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Hypothesis planes per stage, coarse to fine.
    pub planes: [usize; 3],
    /// Feature channels per stage, coarse to fine.
    pub channels: [usize; 3],
    pub eta: f64,
    pub points: usize,
    pub point_scheme: PointScheme,
    pub clamp_px: f64,
    /// |δz| bound as a multiple of the local plane spacing.
    pub clamp_z_factor: f64,
    pub pss: bool,
    pub pss_3d: bool,
    pub pss_2d: bool,
    pub dhd_range: bool,
    /// `ud` disables the deformable interval.
    pub dhd_interval: IntervalScheme,
    /// Fixed-range plane spacing per stage as a fraction of the stage-1 spacing.
    pub interval_ratios: [f64; 3],
    pub reg_channels: usize,
    pub reg_layers: usize,
    pub reg_bypass: bool,
    pub bypass_gain: f64,
    /// σ floor as a fraction of the previous stage's mean plane spacing.
    pub sigma_min_factor: f64,
    pub depth_floor: f64,
    pub empty_cost: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            planes: [48, 32, 8],
            channels: [32, 16, 8],
            eta: 3.0,
            points: 9,
            point_scheme: PointScheme::Random,
            clamp_px: 4.0,
            clamp_z_factor: 2.0,
            pss: true,
            pss_3d: true,
            pss_2d: true,
            dhd_range: true,
            dhd_interval: IntervalScheme::Clid,
            interval_ratios: [1.0, 0.5, 0.25],
            reg_channels: 8,
            reg_layers: 3,
            reg_bypass: false,
            bypass_gain: 1.0,
            sigma_min_factor: 0.5,
            depth_floor: 0.01,
            empty_cost: 10.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Every deformable component disabled.
    pub fn baseline() -> Self {
        ModelConfig {
            pss: false,
            dhd_range: false,
            dhd_interval: IntervalScheme::Ud,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MvsError::Config(m));
        if self.planes.iter().any(|&d| d < 2) {
            return bad(format!("planes must all be >= 2, got {:?}", self.planes));
        }
        if self.dhd_interval == IntervalScheme::Clid && self.planes[1..].iter().any(|d| d % 2 != 0) {
            return bad(format!("clid needs even plane counts for stages 2-3, got {:?}", self.planes));
        }
        if self.channels.contains(&0) || self.reg_channels == 0 || self.reg_layers == 0 || self.points == 0 {
            return bad("channel, layer and point counts must be positive".into());
        }
        for (name, v) in [
            ("eta", self.eta),
            ("clamp_px", self.clamp_px),
            ("clamp_z_factor", self.clamp_z_factor),
            ("bypass_gain", self.bypass_gain),
            ("sigma_min_factor", self.sigma_min_factor),
            ("depth_floor", self.depth_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.interval_ratios.iter().any(|&r| !(r > 0.0)) {
            return bad(format!("interval_ratios must be positive, got {:?}", self.interval_ratios));
        }
        if self.point_scheme == PointScheme::Kernel {
            crate::sampling::point_pattern(PointScheme::Kernel, self.points, 0).map_err(|e| MvsError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Optimiser and loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub stage_weights: [f64; 3],
    /// Fraction of scenes held out for per-epoch evaluation.
    pub holdout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 24,
            stage_weights: [0.5, 1.0, 2.0],
            holdout: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(MvsError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(MvsError::Config("betas must lie in [0, 1)".into()));
        }
        if self.stage_weights.iter().any(|&l| !(l > 0.0)) {
            return Err(MvsError::Config(format!("stage_weights must be positive, got {:?}", self.stage_weights)));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(MvsError::Config(format!("holdout must lie in [0, 1), got {}", self.holdout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| MvsError::Config(format!("invalid value '{v}' for {key}")))
}

fn parse_triple<T: FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = v.split(',').map(|p| parse_one(key, p)).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| MvsError::Config(format!("{key} needs exactly 3 comma-separated values, got '{v}'")))
}

impl Config {
    /// Canonical text: one `key=value` per line, keys sorted.
    pub fn to_text(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    fn entries(&self) -> BTreeMap<&'static str, String> {
        let m = &self.model;
        let t = &self.train;
        BTreeMap::from([
            ("planes", list(&m.planes)),
            ("channels", list(&m.channels)),
            ("eta", m.eta.to_string()),
            ("points", m.points.to_string()),
            ("point_scheme", m.point_scheme.to_string()),
            ("clamp_px", m.clamp_px.to_string()),
            ("clamp_z_factor", m.clamp_z_factor.to_string()),
            ("pss", m.pss.to_string()),
            ("pss_3d", m.pss_3d.to_string()),
            ("pss_2d", m.pss_2d.to_string()),
            ("dhd_range", m.dhd_range.to_string()),
            ("dhd_interval", m.dhd_interval.to_string()),
            ("interval_ratios", list(&m.interval_ratios)),
            ("reg_channels", m.reg_channels.to_string()),
            ("reg_layers", m.reg_layers.to_string()),
            ("reg_bypass", m.reg_bypass.to_string()),
            ("bypass_gain", m.bypass_gain.to_string()),
            ("sigma_min_factor", m.sigma_min_factor.to_string()),
            ("depth_floor", m.depth_floor.to_string()),
            ("empty_cost", m.empty_cost.to_string()),
            ("seed", m.seed.to_string()),
            ("lr", t.lr.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("epochs", t.epochs.to_string()),
            ("stage_weights", list(&t.stage_weights)),
            ("holdout", t.holdout.to_string()),
        ])
    }

    /// Applies one `key=value` override. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let v = value.trim();
        match key.trim() {
            "planes" => m.planes = parse_triple(key, v)?,
            "channels" => m.channels = parse_triple(key, v)?,
            "eta" => m.eta = parse_one(key, v)?,
            "points" => m.points = parse_one(key, v)?,
            "point_scheme" => m.point_scheme = v.parse().map_err(|e: MvsError| MvsError::Config(e.to_string()))?,
            "clamp_px" => m.clamp_px = parse_one(key, v)?,
            "clamp_z_factor" => m.clamp_z_factor = parse_one(key, v)?,
            "pss" => m.pss = parse_one(key, v)?,
            "pss_3d" => m.pss_3d = parse_one(key, v)?,
            "pss_2d" => m.pss_2d = parse_one(key, v)?,
            "dhd_range" => m.dhd_range = parse_one(key, v)?,
            "dhd_interval" => m.dhd_interval = v.parse().map_err(|e: MvsError| MvsError::Config(e.to_string()))?,
            "interval_ratios" => m.interval_ratios = parse_triple(key, v)?,
            "reg_channels" => m.reg_channels = parse_one(key, v)?,
            "reg_layers" => m.reg_layers = parse_one(key, v)?,
            "reg_bypass" => m.reg_bypass = parse_one(key, v)?,
            "bypass_gain" => m.bypass_gain = parse_one(key, v)?,
            "sigma_min_factor" => m.sigma_min_factor = parse_one(key, v)?,
            "depth_floor" => m.depth_floor = parse_one(key, v)?,
            "empty_cost" => m.empty_cost = parse_one(key, v)?,
            "seed" => m.seed = parse_one(key, v)?,
            "lr" => t.lr = parse_one(key, v)?,
            "beta1" => t.beta1 = parse_one(key, v)?,
            "beta2" => t.beta2 = parse_one(key, v)?,
            "adam_eps" => t.adam_eps = parse_one(key, v)?,
            "epochs" => t.epochs = parse_one(key, v)?,
            "stage_weights" => t.stage_weights = parse_triple(key, v)?,
            "holdout" => t.holdout = parse_one(key, v)?,
            other => return Err(MvsError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MvsError::Config(format!("line {}: expected key=value, got '{raw}'", n + 1)))?;
            cfg.set(k, v)
                .map_err(|e| MvsError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
