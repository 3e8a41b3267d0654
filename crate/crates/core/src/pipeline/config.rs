use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ccc::SelectionPolicy;
use crate::error::{Error, Result};
use crate::geometry::NoiseModel;
use crate::iaf::FusionStrategy;
use crate::scenario::ScenarioConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Scope,
    NoFusion,
    LateFusion,
    EarlyFusion,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [Self::Scope, Self::NoFusion, Self::LateFusion, Self::EarlyFusion];

    pub fn name(self) -> &'static str {
        match self {
            Self::Scope => "scope",
            Self::NoFusion => "no_fusion",
            Self::LateFusion => "late_fusion",
            Self::EarlyFusion => "early_fusion",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Component switches: pyramid LSTM, selective filter, deformable attention,
/// reference-point proposal and adaptive fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub pl: bool,
    pub sif: bool,
    pub dcm: bool,
    pub rpp: bool,
    pub iaf: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ladder(5)
    }
}

impl Toggles {
    pub const NAMES: [&'static str; 5] = ["PL", "SIF", "DCM", "RPP", "IAF"];

    pub fn none() -> Self {
        Self::ladder(0)
    }

    /// The first `n` components switched on, in ablation order.
    pub fn ladder(n: usize) -> Self {
        Self {
            pl: n > 0,
            sif: n > 1,
            dcm: n > 2,
            rpp: n > 3,
            iaf: n > 4,
        }
    }

    pub fn as_array(&self) -> [bool; 5] {
        [self.pl, self.sif, self.dcm, self.rpp, self.iaf]
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = Self::NAMES
            .iter()
            .zip(self.as_array())
            .filter(|(_, b)| *b)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            "base".into()
        } else {
            on.join("+")
        }
    }
}

impl FromStr for Toggles {
    type Err = Error;

    /// `base`, `all`, or a `+`-separated list such as `PL+SIF+DCM`.
    fn from_str(s: &str) -> Result<Self> {
        let mut t = Self::none();
        match s.trim().to_ascii_lowercase().as_str() {
            "base" | "none" => return Ok(t),
            "all" | "full" => return Ok(Self::default()),
            _ => {}
        }
        for part in s.split('+').map(|p| p.trim().to_ascii_uppercase()) {
            match part.as_str() {
                "PL" => t.pl = true,
                "SIF" => t.sif = true,
                "DCM" => t.dcm = true,
                "RPP" => t.rpp = true,
                "IAF" => t.iaf = true,
                other => return Err(Error::Config(format!("unknown component {other:?}"))),
            }
        }
        Ok(t)
    }
}

/// Inputs to the final fusion stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Context,
    Collaboration,
    Ego,
}

impl Source {
    pub const ALL: [Source; 3] = [Self::Context, Self::Collaboration, Self::Ego];
}

/// Everything besides the scenario that controls a run. Read from the `[run]`
/// table of a scenario file; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub mode: FusionMode,
    pub toggles: Toggles,
    pub strategy: FusionStrategy,
    /// History frames for context aggregation.
    pub tau: usize,
    pub heads: usize,
    pub points: usize,
    pub selection: SelectionPolicy,
    /// Summed-confidence threshold for reference points.
    pub ref_threshold: f64,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub noise: NoiseModel,
    /// Sources dropped from the fusion stack.
    pub remove: Vec<Source>,
    /// Round shared features to 32 bits as on the wire.
    pub quantize: bool,
    /// Collaborators aggregate their own history before sharing.
    pub collaborator_context: bool,
    /// Share offset and weight predictors across collaborators.
    pub tied: bool,
    /// Fail instead of bypassing context aggregation when history is short.
    pub strict_history: bool,
    pub weight_seed: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            mode: FusionMode::Scope,
            toggles: Toggles::default(),
            strategy: FusionStrategy::Adaptive,
            tau: 2,
            heads: 8,
            points: 15,
            selection: SelectionPolicy::default(),
            ref_threshold: 0.1,
            score_threshold: 0.3,
            nms_threshold: 0.1,
            noise: NoiseModel {
                sigma_xyz: 0.2,
                sigma_heading: 0.2,
                seed: 0,
            },
            remove: Vec::new(),
            quantize: true,
            collaborator_context: false,
            tied: false,
            strict_history: false,
            weight_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub run: RunSettings,
}

impl RunConfig {
    pub fn new(scenario: ScenarioConfig, run: RunSettings) -> Result<Self> {
        let cfg = Self { scenario, run };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Scenario plus its `[run]` table, which moves into `run`.
    pub fn from_scenario(mut scenario: ScenarioConfig) -> Result<Self> {
        let run = match &scenario.run.take() {
            Some(t) => toml::Value::Table(t.clone())
                .try_into::<RunSettings>()
                .map_err(|e| Error::Config(format!("[run]: {e}")))?,
            None => RunSettings::default(),
        };
        Self::new(scenario, run)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_scenario(ScenarioConfig::from_toml(text)?)
    }

    /// Scenario file with the run settings as its `[run]` table.
    pub fn to_toml(&self) -> String {
        let mut scenario = self.scenario.clone();
        let run = toml::Table::try_from(&self.run).expect("run settings serialize");
        scenario.run = Some(run);
        scenario.to_toml()
    }

    pub fn desk(agents: usize, objects: usize, seed: u64) -> Self {
        Self {
            scenario: ScenarioConfig::desk(agents, objects, seed),
            run: RunSettings::default(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.scenario.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scenario.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        let r = &self.run;
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("selection.threshold", r.selection.threshold)?;
        unit("score_threshold", r.score_threshold)?;
        unit("nms_threshold", r.nms_threshold)?;
        if !(r.ref_threshold >= 0.0) {
            return Err(Error::Config(format!("ref_threshold = {} must be non-negative", r.ref_threshold)));
        }
        if r.heads == 0 || r.points == 0 {
            return Err(Error::Config("heads and points must be at least 1".into()));
        }
        if !(r.noise.sigma_xyz >= 0.0 && r.noise.sigma_heading >= 0.0) {
            return Err(Error::Config("noise deviations must be non-negative".into()));
        }
        if Source::ALL.iter().all(|s| r.remove.contains(s)) {
            return Err(Error::Config("every fusion source is removed".into()));
        }
        if self.scenario.agents.is_empty() {
            return Err(Error::Config("at least one agent is required".into()));
        }
        Ok(())
    }

    /// Frames scored in evaluation: those with a full history window.
    pub fn eval_frames(&self) -> std::ops::Range<usize> {
        self.run.tau.min(self.scenario.frames)..self.scenario.frames
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}
