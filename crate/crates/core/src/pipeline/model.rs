use serde::{Deserialize, Serialize};

use super::config::{FusionMode, RunConfig, Source, Toggles};
use crate::ccc::{CccConfig, CccParams};
use crate::cia::{CiaConfig, CiaParams};
use crate::detection::DetectionHead;
use crate::error::{Error, Result};
use crate::gridcore::params::{Conv, ParamStore};
use crate::gridcore::ConvGeom;
use crate::iaf::{FusionStrategy, IafConfig, IafParams};
use crate::rng::{domain, keyed};
use crate::scenario::Encoder;

/// Shape-determining choices; two configs with equal architecture share weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub channels: usize,
    pub tau: usize,
    pub collaborators: usize,
    pub heads: usize,
    pub points: usize,
    pub toggles: Toggles,
    pub strategy: FusionStrategy,
    pub tied: bool,
    pub ref_threshold: f64,
    /// Active fusion sources in stack order.
    pub sources: Vec<Source>,
}

impl Architecture {
    pub fn of(cfg: &RunConfig) -> Result<Self> {
        let r = &cfg.run;
        let collaborators = if r.mode == FusionMode::Scope {
            cfg.scenario.agents.len().saturating_sub(1)
        } else {
            0
        };
        let tau = if r.mode == FusionMode::Scope { r.tau } else { 0 };
        let sources: Vec<Source> = Source::ALL
            .into_iter()
            .filter(|s| match s {
                Source::Context => tau > 0,
                Source::Collaboration => collaborators > 0,
                Source::Ego => true,
            })
            .filter(|s| !r.remove.contains(s))
            .collect();
        if sources.is_empty() {
            return Err(Error::Config("no fusion source left after removals".into()));
        }
        Ok(Self {
            channels: cfg.scenario.grid.channels,
            tau,
            collaborators,
            heads: r.heads,
            points: r.points,
            toggles: r.toggles,
            strategy: r.strategy,
            tied: r.tied,
            ref_threshold: r.ref_threshold,
            sources,
        })
    }

    pub fn has(&self, s: Source) -> bool {
        self.sources.contains(&s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub cia: Option<CiaParams>,
    pub ccc: Option<CccParams>,
    pub iaf: Option<IafParams>,
    /// 1×1 conv over the stacked sources when adaptive fusion is off.
    pub mix: Option<Conv>,
    pub head: DetectionHead,
}

impl Model {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = keyed(seed, &[domain::WEIGHTS]);
        let mut store = ParamStore::new();
        let c = arch.channels;
        let encoder = Encoder::new(&mut store, c, &mut rng);
        // Collaborators may aggregate their own history, so context weights
        // exist whenever there is history, even if the ego context is removed.
        let cia = if arch.tau > 0 {
            let mut cfg = CiaConfig::new(c, arch.tau);
            cfg.pyramid_lstm = arch.toggles.pl;
            cfg.selective_filter = arch.toggles.sif;
            Some(CiaParams::new(&mut store, "cia", cfg, &mut rng)?)
        } else {
            None
        };
        let ccc = if arch.has(Source::Collaboration) {
            let mut cfg = CccConfig::new(c, arch.collaborators);
            cfg.heads = arch.heads;
            cfg.points = arch.points;
            cfg.tied = arch.tied;
            cfg.dcm = arch.toggles.dcm;
            cfg.rpp = arch.toggles.rpp;
            cfg.threshold = arch.ref_threshold;
            Some(CccParams::new(&mut store, "ccc", cfg, &mut rng)?)
        } else {
            None
        };
        let n = arch.sources.len();
        let (iaf, mix) = if n < 2 {
            (None, None)
        } else if arch.toggles.iaf {
            let mut cfg = IafConfig::new(c);
            cfg.strategy = arch.strategy;
            (Some(IafParams::new(&mut store, "iaf", cfg, &mut rng)?), None)
        } else {
            (None, Some(Conv::xavier(&mut store, "mix", ConvGeom::same(c, n * c, 1), &mut rng)))
        };
        let head = DetectionHead::new(&mut store, "head", c, &mut rng);
        Ok(Self {
            arch,
            store,
            encoder,
            cia,
            ccc,
            iaf,
            mix,
            head,
        })
    }

    pub fn for_config(cfg: &RunConfig) -> Result<Self> {
        Self::new(Architecture::of(cfg)?, cfg.run.weight_seed)
    }

    /// Copy every tensor whose name and dims match; returns how many were copied.
    pub fn load_matching(&mut self, snapshot: &ParamStore) -> usize {
        let mut copied = 0;
        for (id, t) in self.store.clone().iter() {
            if let Some(other) = snapshot.find(&t.name).map(|o| snapshot.get(o)) {
                if other.dims == t.dims {
                    self.store.get_mut(id).data.clone_from(&other.data);
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn weights_hash(&self) -> String {
        self.store.digest()
    }
}
