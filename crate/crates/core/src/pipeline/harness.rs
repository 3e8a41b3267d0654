use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Source, Toggles};
use super::frame::{run_frame, Episode, FrameMetrics};
use super::model::Model;
use crate::detection::{evaluate_ap_frames, Detection};
use crate::error::{Error, Result};
use crate::geometry::Box7;
use crate::gridcore::params::ParamStore;
use crate::iaf::FusionStrategy;
use crate::scenario::ScenarioConfig;

/// Seeded evaluation scenarios.
#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub scenarios: Vec<ScenarioConfig>,
}

impl Suite {
    /// `count` copies of `base` with seeds `base.seed, base.seed + 1, …`.
    pub fn seeded(base: &ScenarioConfig, count: usize) -> Self {
        Self {
            scenarios: (0..count as u64)
                .map(|i| ScenarioConfig {
                    seed: base.seed + i,
                    ..base.clone()
                })
                .collect(),
        }
    }

    pub fn episodes(&self) -> Result<Vec<Episode>> {
        self.scenarios.iter().map(Episode::simulate).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteMetrics {
    /// AP pooled over every evaluated frame.
    pub ap50: f64,
    pub ap70: f64,
    /// Mean bytes sent per frame.
    pub mean_bytes: f64,
    /// `log2(mean_bytes)`, 0 when nothing was sent.
    pub log2_bytes: f64,
    pub frames: usize,
    #[serde(skip)]
    pub per_frame: Vec<FrameMetrics>,
}

/// Run every evaluation frame of every episode and pool the results.
pub fn evaluate(cfg: &RunConfig, model: &Model, episodes: &[Episode]) -> Result<SuiteMetrics> {
    let mut dets: Vec<Vec<Detection>> = Vec::new();
    let mut gts: Vec<Vec<Box7>> = Vec::new();
    let mut per_frame = Vec::new();
    for ep in episodes {
        for t in cfg.eval_frames() {
            let r = run_frame(ep, t, cfg, model)?;
            dets.push(r.detections);
            gts.push(r.ground_truth);
            per_frame.push(r.metrics);
        }
    }
    let pairs: Vec<(&[Detection], &[Box7])> = dets.iter().zip(&gts).map(|(d, g)| (d.as_slice(), g.as_slice())).collect();
    let frames = per_frame.len();
    let mean_bytes = if frames == 0 {
        0.0
    } else {
        per_frame.iter().map(|m| m.bytes as f64).sum::<f64>() / frames as f64
    };
    Ok(SuiteMetrics {
        ap50: evaluate_ap_frames(&pairs, 0.5)?,
        ap70: evaluate_ap_frames(&pairs, 0.7)?,
        mean_bytes,
        log2_bytes: if mean_bytes > 0.0 { mean_bytes.log2() } else { 0.0 },
        frames,
        per_frame,
    })
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub toggles: Toggles,
    pub tau: usize,
    pub points: usize,
    pub strategy: FusionStrategy,
    pub remove: Vec<Source>,
}

impl Variant {
    pub fn of(label: impl Into<String>, cfg: &RunConfig) -> Self {
        Self {
            label: label.into(),
            toggles: cfg.run.toggles,
            tau: cfg.run.tau,
            points: cfg.run.points,
            strategy: cfg.run.strategy,
            remove: cfg.run.remove.clone(),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.run.toggles = self.toggles;
        cfg.run.tau = self.tau;
        cfg.run.points = self.points;
        cfg.run.strategy = self.strategy;
        cfg.run.remove = self.remove.clone();
        cfg
    }

    /// Components switched on one at a time.
    pub fn ladder(base: &RunConfig) -> Vec<Self> {
        (0..=5)
            .map(|n| {
                let mut v = Self::of("", base);
                v.toggles = Toggles::ladder(n);
                v.label = v.toggles.label();
                v
            })
            .collect()
    }

    pub fn frame_study(base: &RunConfig) -> Vec<Self> {
        (1..=3)
            .map(|tau| Self {
                tau,
                ..Self::of(format!("{tau} frame{}", if tau == 1 { "" } else { "s" }), base)
            })
            .collect()
    }

    pub fn keypoint_study(base: &RunConfig) -> Vec<Self> {
        [9, 15, 21]
            .into_iter()
            .map(|points| Self {
                points,
                ..Self::of(format!("{points} keypoints"), base)
            })
            .collect()
    }

    pub fn feature_study(base: &RunConfig) -> Vec<Self> {
        let mut rows = vec![Self::of("all features", base)];
        for (s, name) in [
            (Source::Ego, "w/o ego feature"),
            (Source::Context, "w/o context feature"),
            (Source::Collaboration, "w/o collaboration feature"),
        ] {
            let mut v = Self::of(name, base);
            v.remove.push(s);
            rows.push(v);
        }
        rows
    }

    pub fn fusion_study(base: &RunConfig) -> Vec<Self> {
        [
            (FusionStrategy::Summation, "summation fusion"),
            (FusionStrategy::Maximum, "maximum fusion"),
            (FusionStrategy::Average, "average fusion"),
            (FusionStrategy::Adaptive, "adaptive fusion"),
        ]
        .into_iter()
        .map(|(strategy, name)| Self {
            strategy,
            ..Self::of(name, base)
        })
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub pl: bool,
    pub sif: bool,
    pub dcm: bool,
    pub rpp: bool,
    pub iaf: bool,
    pub tau: usize,
    pub points: usize,
    pub strategy: FusionStrategy,
    pub removed: Vec<Source>,
    pub ap50: f64,
    pub ap70: f64,
    pub log2_bytes: f64,
}

/// Evaluate every variant on the same episodes. Weights matching by name and
/// shape are taken from `weights`; the rest come from the seeded initializer.
pub fn ablation_run(
    base: &RunConfig,
    variants: &[Variant],
    episodes: &[Episode],
    weights: Option<&ParamStore>,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| {
            let cfg = v.apply(base);
            cfg.validate()?;
            let mut model = Model::for_config(&cfg)?;
            if let Some(w) = weights {
                model.load_matching(w);
            }
            let m = evaluate(&cfg, &model, episodes)?;
            Ok(AblationRow {
                label: v.label.clone(),
                pl: v.toggles.pl,
                sif: v.toggles.sif,
                dcm: v.toggles.dcm,
                rpp: v.toggles.rpp,
                iaf: v.toggles.iaf,
                tau: v.tau,
                points: v.points,
                strategy: v.strategy,
                removed: v.remove.clone(),
                ap50: m.ap50,
                ap70: m.ap70,
                log2_bytes: m.log2_bytes,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    NoiseXyz,
    NoiseHeading,
    Bandwidth,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::NoiseXyz => "noise-xyz",
            Self::NoiseHeading => "noise-heading",
            Self::Bandwidth => "bandwidth",
        }
    }

    /// Admissible values: meters, degrees, or a selection threshold.
    pub fn range(self) -> (f64, f64) {
        match self {
            Self::NoiseXyz => (0.0, 0.5),
            Self::NoiseHeading => (0.0, 1.0),
            Self::Bandwidth => (0.0, 1.0),
        }
    }

    pub fn apply(self, base: &RunConfig, value: f64) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Self::NoiseXyz => cfg.run.noise.sigma_xyz = value,
            Self::NoiseHeading => cfg.run.noise.sigma_heading = value,
            Self::Bandwidth => cfg.run.selection.threshold = value,
        }
        cfg
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::NoiseXyz, Self::NoiseHeading, Self::Bandwidth]
            .into_iter()
            .find(|a| a.name() == s.replace('_', "-"))
            .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis: SweepAxis,
    pub value: f64,
    pub ap50: f64,
    pub ap70: f64,
    pub log2_bytes: f64,
}

pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[f64], model: &Model, episodes: &[Episode]) -> Result<Vec<SweepRecord>> {
    if values.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let (lo, hi) = axis.range();
    if let Some(v) = values.iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(Error::Config(format!("{axis} value {v} outside [{lo}, {hi}]")));
    }
    values
        .iter()
        .map(|&value| {
            let cfg = axis.apply(base, value);
            let m = evaluate(&cfg, model, episodes)?;
            Ok(SweepRecord {
                axis,
                value,
                ap50: m.ap50,
                ap70: m.ap70,
                log2_bytes: m.log2_bytes,
            })
        })
        .collect()
}
