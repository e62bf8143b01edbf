//! Controlled variant sweeps: same data, seed and schedule, one factor changed.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::config::{Config, ModelConfig};
use crate::error::{MvsError, Result};
use crate::hypothesis::IntervalScheme;
use crate::model::ModelParams;
use crate::sampling::PointScheme;
use crate::synth::SceneBundle;
use crate::training::{evaluate_scenes, split_indices, train, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// `pss`, `dhd-range` and `dhd-interval` all select the 7-row module grid.
    Pss,
    DhdRange,
    DhdInterval,
    /// Random vs kernel sampling points.
    Points,
    /// 3D, 2D or both offset spaces.
    Spaces,
    /// UD, SID, CLID interval discretization.
    Scheme,
}

impl FromStr for AblationAxis {
    type Err = MvsError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pss" => AblationAxis::Pss,
            "dhd-range" => AblationAxis::DhdRange,
            "dhd-interval" => AblationAxis::DhdInterval,
            "points" => AblationAxis::Points,
            "spaces" => AblationAxis::Spaces,
            "scheme" => AblationAxis::Scheme,
            other => {
                return Err(MvsError::invalid(format!(
                    "unknown ablation axis '{other}' (expected pss, dhd-range, dhd-interval, points, spaces or scheme)"
                )))
            }
        })
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Pss => "pss",
            AblationAxis::DhdRange => "dhd-range",
            AblationAxis::DhdInterval => "dhd-interval",
            AblationAxis::Points => "points",
            AblationAxis::Spaces => "spaces",
            AblationAxis::Scheme => "scheme",
        })
    }
}

fn flag(on: bool) -> &'static str {
    if on {
        "on"
    } else {
        "off"
    }
}

/// Module grid rows: baseline, each module alone, PSS with each DHD part, all.
const MODULE_ROWS: [(bool, bool, bool); 7] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (true, true, false),
    (true, false, true),
    (true, true, true),
];

/// Named variants of `base` for `axis`, in table order.
pub fn variants(axis: AblationAxis, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    match axis {
        AblationAxis::Pss | AblationAxis::DhdRange | AblationAxis::DhdInterval => MODULE_ROWS
            .iter()
            .map(|&(pss, range, interval)| {
                let cfg = ModelConfig {
                    pss,
                    dhd_range: range,
                    dhd_interval: if interval { IntervalScheme::Clid } else { IntervalScheme::Ud },
                    ..base.clone()
                };
                (format!("pss={} range={} interval={}", flag(pss), flag(range), flag(interval)), cfg)
            })
            .collect(),
        AblationAxis::Points => [PointScheme::Random, PointScheme::Kernel]
            .into_iter()
            .map(|s| {
                let points = if s == PointScheme::Kernel && !is_odd_square(base.points) { 9 } else { base.points };
                (s.to_string(), ModelConfig { point_scheme: s, points, ..base.clone() })
            })
            .collect(),
        AblationAxis::Spaces => [("3d", true, false), ("2d", false, true), ("both", true, true)]
            .into_iter()
            .map(|(n, a, b)| {
                let cfg = ModelConfig {
                    pss: true,
                    pss_3d: a,
                    pss_2d: b,
                    ..base.clone()
                };
                (n.to_string(), cfg)
            })
            .collect(),
        AblationAxis::Scheme => [IntervalScheme::Ud, IntervalScheme::Sid, IntervalScheme::Clid]
            .into_iter()
            .map(|s| (s.to_string(), ModelConfig { dhd_interval: s, ..base.clone() }))
            .collect(),
    }
}

fn is_odd_square(n: usize) -> bool {
    let r = (n as f64).sqrt().round() as usize;
    r * r == n && r % 2 == 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub mae: f64,
    pub acc3i: f64,
    pub acc06: f64,
}

pub const ABLATION_HEADER: &str = "variant,mae,acc3i,acc06";

/// Trains every variant from its own seeded init on the same split and
/// evaluates the held-out scenes (training scenes when none are held out).
pub fn run_ablation(
    scenes: &[SceneBundle],
    cfg: &Config,
    axis: AblationAxis,
    log: &mut dyn Write,
) -> Result<Vec<AblationRow>> {
    let (train_idx, held_idx) = split_indices(scenes.len(), cfg.train.holdout);
    let eval_idx = if held_idx.is_empty() { train_idx } else { held_idx };
    let eval_set: Vec<&SceneBundle> = eval_idx.iter().map(|&i| &scenes[i]).collect();
    let mut rows = Vec::new();
    for (name, model) in variants(axis, &cfg.model) {
        writeln!(log, "variant {name}").map_err(|e| MvsError::io("<ablation log>", e))?;
        let run_cfg = Config {
            model,
            train: cfg.train.clone(),
        };
        let mut state = TrainState::new(ModelParams::init(&run_cfg.model)?);
        train(scenes, &run_cfg, &mut state, log)?;
        let r = evaluate_scenes(&state.params, &eval_set)?;
        rows.push(AblationRow {
            variant: name,
            mae: r.mae,
            acc3i: r.acc_3interval,
            acc06: r.acc_06m,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| MvsError::invalid(format!("csv: {e}"));
    w.write_record(ABLATION_HEADER.split(',')).map_err(err)?;
    for r in rows {
        w.write_record([r.variant.clone(), r.mae.to_string(), r.acc3i.to_string(), r.acc06.to_string()])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| MvsError::invalid(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| MvsError::invalid(format!("csv: {e}")))
}
