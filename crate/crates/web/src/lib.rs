//! Browser bindings for three small views: a rotated-box IoU explorer, a
//! pose-noise viewer and a bandwidth explorer.
//!
//! Each view has a plain Rust core (tested natively) and a thin
//! `wasm_bindgen` wrapper that maps errors to `JsError`.

use coperception::ccc::{select_and_pack, SelectionPolicy};
use coperception::geometry::{perturb_pose, rotated_iou_bev, to_ego_frame, Box7, NoiseModel, Pose2D};
use coperception::gridcore::params::ParamStore;
use coperception::gridcore::{FeatureGrid, SpatialMap};
use coperception::pipeline::{run_frame, Episode, Model, RunConfig};
use coperception::{Error, Result};
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[cx, cy, length, width, yaw_degrees]` as a ground-level box.
fn parse_box(v: &[f64]) -> Result<Box7> {
    let [cx, cy, l, w, yaw] = v else {
        return Err(Error::Config(format!("a box takes 5 numbers, got {}", v.len())));
    };
    Box7::new(*cx, *cy, 0.0, *l, *w, 1.0, yaw.to_radians())
}

pub fn iou_of(a: &[f64], b: &[f64]) -> Result<f64> {
    rotated_iou_bev(&parse_box(a)?, &parse_box(b)?)
}

pub fn corners_of(b: &[f64]) -> Result<Vec<f64>> {
    Ok(parse_box(b)?.corners_bev().iter().flat_map(|&(x, y)| [x, y]).collect())
}

#[wasm_bindgen]
pub fn iou(a: &[f64], b: &[f64]) -> std::result::Result<f64, JsError> {
    iou_of(a, b).map_err(js)
}

/// Four BEV corners as `[x0, y0, …, x3, y3]`.
#[wasm_bindgen]
pub fn corners(b: &[f64]) -> std::result::Result<Vec<f64>, JsError> {
    corners_of(b).map_err(js)
}

/// Ego's view of every object, once from its own pose and once as reported
/// by a collaborator whose pose carries Gaussian error.
#[wasm_bindgen]
pub struct NoiseView {
    episode: Episode,
}

impl NoiseView {
    pub fn build(seed: u64) -> Result<Self> {
        let cfg = RunConfig::desk(2, 8, seed);
        Ok(Self {
            episode: Episode::simulate(&cfg.scenario)?,
        })
    }

    /// `[x, y, x_noisy, y_noisy]` per object, in the ego frame at frame 0.
    pub fn project(&self, sigma_xyz: f64, sigma_heading_deg: f64, noise_seed: u64) -> Result<Vec<f64>> {
        if !(sigma_xyz >= 0.0 && sigma_heading_deg >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        let world = &self.episode.worlds[0];
        let ego = world.agents[0].pose;
        let collab = world.agents[1].pose;
        let noise = NoiseModel {
            sigma_xyz,
            sigma_heading: sigma_heading_deg,
            seed: noise_seed,
        };
        let believed = perturb_pose(&collab, &noise, world.agents[1].id, world.frame);
        let origin = Pose2D::origin();
        let mut out = Vec::with_capacity(4 * world.objects.len());
        for o in &world.objects {
            let p = (o.bbox.cx, o.bbox.cy);
            let truth = to_ego_frame(&p, &origin, &ego);
            let local = to_ego_frame(&p, &origin, &collab);
            let reported = to_ego_frame(&local, &believed, &ego);
            out.extend([truth.0, truth.1, reported.0, reported.1]);
        }
        Ok(out)
    }
}

#[wasm_bindgen]
impl NoiseView {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<NoiseView, JsError> {
        Self::build(seed as u64).map_err(js)
    }

    pub fn objects(&self, sigma_xyz: f64, sigma_heading_deg: f64, noise_seed: u32) -> std::result::Result<Vec<f64>, JsError> {
        self.project(sigma_xyz, sigma_heading_deg, noise_seed as u64).map_err(js)
    }
}

/// One collaborator's feature grid and confidence, thresholded on demand.
#[wasm_bindgen]
pub struct BandwidthView {
    features: FeatureGrid,
    confidence: SpatialMap,
}

/// Outcome of one threshold: cells kept and the exact message size.
#[wasm_bindgen]
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    kept: usize,
    bytes: usize,
    mask: Vec<u8>,
}

#[wasm_bindgen]
impl Selection {
    #[wasm_bindgen(getter)]
    pub fn kept(&self) -> usize {
        self.kept
    }

    /// 0 when nothing is sent.
    #[wasm_bindgen(getter)]
    pub fn bytes(&self) -> usize {
        self.bytes
    }

    #[wasm_bindgen(getter)]
    pub fn log2_bytes(&self) -> f64 {
        if self.bytes == 0 {
            0.0
        } else {
            (self.bytes as f64).log2()
        }
    }

    /// Row-major, 1 where the cell is sent.
    #[wasm_bindgen(getter)]
    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }
}

impl BandwidthView {
    /// Runs one frame of a two-agent scene; `weights` is a snapshot written by
    /// the `train` command, otherwise the seeded initial weights are used.
    pub fn build(seed: u64, weights: Option<&[u8]>) -> Result<Self> {
        let mut cfg = RunConfig::desk(2, 5, seed);
        cfg.run.selection = SelectionPolicy {
            threshold: 0.0,
            top_k: None,
        };
        let episode = Episode::simulate(&cfg.scenario)?;
        let mut model = Model::for_config(&cfg)?;
        if let Some(bytes) = weights {
            let snapshot = ParamStore::from_snapshot_bytes(bytes)?;
            if model.load_matching(&snapshot) == 0 {
                return Err(Error::Config("snapshot shares no parameters with this model".into()));
            }
        }
        let frame = run_frame(&episode, cfg.eval_frames().start, &cfg, &model)?;
        let agent = frame.agents.into_iter().nth(1).ok_or_else(|| Error::Config("no collaborator".into()))?;
        match (agent.features, agent.confidence) {
            (Some(features), Some(confidence)) => Ok(Self { features, confidence }),
            _ => Err(Error::Config("collaborator produced no features".into())),
        }
    }

    pub fn select(&self, threshold: f64) -> Result<Selection> {
        let policy = SelectionPolicy { threshold, top_k: None };
        let (mask, msg) = select_and_pack(&self.features, &self.confidence, &policy)?;
        Ok(Selection {
            kept: mask.count(),
            bytes: if msg.count() == 0 { 0 } else { msg.byte_len() },
            mask: mask.bits().iter().map(|&b| b as u8).collect(),
        })
    }
}

#[wasm_bindgen]
impl BandwidthView {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, weights: Option<Vec<u8>>) -> std::result::Result<BandwidthView, JsError> {
        Self::build(seed as u64, weights.as_deref()).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.confidence.height()
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.confidence.width()
    }

    /// Row-major confidence in [0, 1].
    pub fn confidence(&self) -> Vec<f64> {
        self.confidence.data().to_vec()
    }

    pub fn threshold(&self, threshold: f64) -> std::result::Result<Selection, JsError> {
        self.select(threshold).map_err(js)
    }
}
