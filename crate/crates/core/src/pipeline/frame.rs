use std::collections::BTreeSet;
#[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
use std::time::Instant;

/// The browser target has no monotonic clock in std; stage timings read 0 there.
#[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
#[derive(Clone, Copy)]
struct Instant;

#[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
impl Instant {
    fn now() -> Self {
        Instant
    }

    fn elapsed(&self) -> std::time::Duration {
        std::time::Duration::ZERO
    }
}

use serde::{Deserialize, Serialize};

use super::config::{FusionMode, RunConfig, Source};
use super::model::Model;
use crate::ccc::{
    collaborate_t, confidence_map, select_and_pack, CollaboratorInput, PackedMessage, SelectionMask,
    MESSAGE_HEADER_BYTES,
};
use crate::cia::aggregate_context_t;
use crate::detection::{evaluate_ap, extract_boxes, Detection, HeadOutput};
use crate::error::{Error, Result};
use crate::geometry::{nms_rotated, perturb_pose, Box7, NoiseModel, Pose2D, Rigid2, Transform};
use crate::gridcore::tape::{Tape, Var};
use crate::gridcore::{FeatureGrid, SpatialMap};
use crate::iaf::fuse_t;
use crate::scenario::{generate_world, observe_labeled, rasterize, step_world, ObservationCloud, ScenarioConfig, World};

/// Bytes per shared detection: seven box values and a score as f32.
pub const DETECTION_RECORD_BYTES: usize = 32;
/// Bytes per shared raw point: x, y, z as f32.
pub const POINT_RECORD_BYTES: usize = 12;

/// A simulated scenario with every agent's sweep at every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub config: ScenarioConfig,
    pub worlds: Vec<World>,
    /// `[frame][agent]`, in the agent's own frame.
    pub clouds: Vec<Vec<ObservationCloud>>,
    /// Object ids hit by each agent at each frame.
    pub seen: Vec<BTreeSet<u32>>,
}

impl Episode {
    pub fn simulate(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let mut world = generate_world(config, config.seed)?;
        let mut worlds = Vec::with_capacity(config.frames);
        let mut clouds = Vec::with_capacity(config.frames);
        let mut seen = Vec::with_capacity(config.frames);
        for f in 0..config.frames {
            if f > 0 {
                world = step_world(&world, config.dt)?;
            }
            let mut per_agent = Vec::with_capacity(world.agents.len());
            let mut ids = BTreeSet::new();
            for a in &world.agents {
                let (cloud, hit) = observe_labeled(&world, a.id, &config.sensor, config.seed)?;
                ids.extend(hit);
                per_agent.push(cloud);
            }
            clouds.push(per_agent);
            seen.push(ids);
            worlds.push(world.clone());
        }
        Ok(Self {
            config: config.clone(),
            worlds,
            clouds,
            seen,
        })
    }

    pub fn frames(&self) -> usize {
        self.worlds.len()
    }

    pub fn agents(&self) -> usize {
        self.worlds.first().map_or(0, |w| w.agents.len())
    }

    pub fn pose(&self, frame: usize, agent: usize) -> Pose2D {
        self.worlds[frame].agents[agent].pose
    }

    pub fn agent_id(&self, agent: usize) -> u32 {
        self.worlds[0].agents[agent].id
    }

    /// Pose of `agent` at `frame` as reported to the ego; the ego's current pose is exact.
    pub fn reported_pose(&self, frame: usize, agent: usize, now: usize, noise: &NoiseModel) -> Pose2D {
        let pose = self.pose(frame, agent);
        if agent == 0 && frame == now {
            pose
        } else {
            perturb_pose(&pose, noise, self.agent_id(agent), frame as u64)
        }
    }

    /// Sweep of `agent` at `frame` moved into the ego frame at `now` using reported poses.
    pub fn projected(&self, frame: usize, agent: usize, now: usize, noise: &NoiseModel) -> (Pose2D, ObservationCloud) {
        let reported = self.reported_pose(frame, agent, now, noise);
        let cloud = self.clouds[frame][agent].transformed(&Rigid2::source_to_ego(&reported, &self.pose(now, 0)));
        (reported, cloud)
    }

    /// Objects hit by at least one agent, in the ego frame, centred inside the grid.
    pub fn ground_truth(&self, frame: usize) -> Vec<Box7> {
        let to_ego = Rigid2::of_pose(&self.pose(frame, 0)).inverse();
        let spec = &self.config.grid;
        self.worlds[frame]
            .objects
            .iter()
            .filter(|o| self.seen[frame].contains(&o.id))
            .map(|o| o.bbox.transformed(&to_ego))
            .filter(|b| spec.contains(b.cx, b.cy))
            .collect()
    }
}

/// What one agent shared with the ego in a frame.
#[derive(Clone, Debug, PartialEq)]
pub enum Outgoing {
    Features(PackedMessage),
    Detections(Vec<Detection>),
    Points(usize),
}

impl Outgoing {
    /// Payload only, 32-bit values.
    pub fn payload_bytes(&self) -> usize {
        match self {
            Self::Features(m) => m.payload_bytes(),
            Self::Detections(d) => d.len() * DETECTION_RECORD_BYTES,
            Self::Points(n) => n * POINT_RECORD_BYTES,
        }
    }

    /// Exact transmitted size; nothing is sent when there is nothing to share.
    pub fn byte_len(&self) -> usize {
        match self {
            Self::Features(m) if m.count() > 0 => m.byte_len(),
            Self::Detections(d) if !d.is_empty() => MESSAGE_HEADER_BYTES + self.payload_bytes(),
            Self::Points(n) if *n > 0 => MESSAGE_HEADER_BYTES + self.payload_bytes(),
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentFrame {
    pub agent: u32,
    pub pose: Pose2D,
    pub perturbed: Pose2D,
    pub cloud: ObservationCloud,
    pub features: Option<FeatureGrid>,
    pub confidence: Option<SpatialMap>,
    pub mask: Option<SelectionMask>,
    pub message: Option<Outgoing>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub bytes: usize,
    /// `log2(bytes)`, or 0 when nothing was sent.
    pub log2_bytes: f64,
    /// Set when `bytes == 0` and `log2_bytes` is the sentinel.
    pub empty: bool,
    pub payload_bytes: usize,
    pub messages: usize,
}

impl Volume {
    pub fn from_bytes(bytes: usize, payload_bytes: usize, messages: usize) -> Self {
        Self {
            bytes,
            log2_bytes: if bytes == 0 { 0.0 } else { (bytes as f64).log2() },
            empty: bytes == 0,
            payload_bytes,
            messages,
        }
    }

    pub fn payload_log2(&self) -> f64 {
        if self.payload_bytes == 0 {
            0.0
        } else {
            (self.payload_bytes as f64).log2()
        }
    }
}

/// Total exact size of everything the collaborators sent.
pub fn message_volume(frames: &[AgentFrame]) -> Volume {
    let sent: Vec<&Outgoing> = frames
        .iter()
        .filter_map(|f| f.message.as_ref())
        .filter(|m| m.byte_len() > 0)
        .collect();
    Volume::from_bytes(
        sent.iter().map(|m| m.byte_len()).sum(),
        sent.iter().map(|m| m.payload_bytes()).sum(),
        sent.len(),
    )
}

/// Wall-clock milliseconds per stage; reported, never written to metric files.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    pub encode_ms: f64,
    pub context_ms: f64,
    pub collaboration_ms: f64,
    pub fusion_ms: f64,
    pub decode_ms: f64,
}

impl Timing {
    pub fn total_ms(&self) -> f64 {
        self.encode_ms + self.context_ms + self.collaboration_ms + self.fusion_ms + self.decode_ms
    }
}

fn lap(clock: &mut Instant) -> f64 {
    let ms = clock.elapsed().as_secs_f64() * 1e3;
    *clock = Instant::now();
    ms
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub ap50: f64,
    pub ap70: f64,
    pub bytes: usize,
    pub log2_bytes: f64,
    pub empty_volume: bool,
    pub detections: usize,
    pub ground_truth: usize,
    #[serde(skip)]
    pub timing: Timing,
}

/// A named map for offline inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct MapDump {
    pub name: String,
    pub grid: FeatureGrid,
}

pub struct FrameResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Box7>,
    pub metrics: FrameMetrics,
    pub agents: Vec<AgentFrame>,
    pub maps: Vec<MapDump>,
}

/// Differentiable part of a frame: head outputs plus bookkeeping.
pub struct Forward {
    pub reg: Var,
    pub cls: Var,
    pub agents: Vec<AgentFrame>,
    pub maps: Vec<(String, Var)>,
    pub timing: Timing,
}

fn encode(tape: &mut Tape, model: &Model, cloud: &ObservationCloud, cfg: &RunConfig) -> Result<Var> {
    let x = tape.constant(rasterize(cloud, &cfg.scenario.grid)?);
    model.encoder.forward(tape, &model.store, x)
}

/// Encoded history of `agent`, oldest first, or empty when the window is incomplete.
fn history(tape: &mut Tape, model: &Model, ep: &Episode, t: usize, agent: usize, cfg: &RunConfig) -> Result<Vec<Var>> {
    let tau = model.arch.tau;
    if tau == 0 {
        return Ok(Vec::new());
    }
    if t < tau {
        if cfg.run.strict_history {
            return Err(Error::Config(format!("frame {t} has fewer than {tau} history frames")));
        }
        return Ok(Vec::new());
    }
    (1..=tau)
        .rev()
        .map(|j| {
            let (_, cloud) = ep.projected(t - j, agent, t, &cfg.run.noise);
            encode(tape, model, &cloud, cfg)
        })
        .collect()
}

fn ego_frame(ep: &Episode, t: usize, cloud: ObservationCloud) -> AgentFrame {
    AgentFrame {
        agent: ep.agent_id(0),
        pose: ep.pose(t, 0),
        perturbed: ep.pose(t, 0),
        cloud,
        features: None,
        confidence: None,
        mask: None,
        message: None,
    }
}

/// Joint forward pass for every mode except late fusion.
pub fn forward(tape: &mut Tape, model: &Model, ep: &Episode, t: usize, cfg: &RunConfig, quantize: bool) -> Result<Forward> {
    if t >= ep.frames() {
        return Err(Error::Precondition(format!("frame {t} outside episode of {}", ep.frames())));
    }
    match cfg.run.mode {
        FusionMode::Scope => forward_scope(tape, model, ep, t, cfg, quantize),
        FusionMode::NoFusion => forward_ego_only(tape, model, ep, t, cfg, false),
        FusionMode::EarlyFusion => forward_ego_only(tape, model, ep, t, cfg, true),
        FusionMode::LateFusion => Err(Error::Precondition("late fusion has no joint forward pass".into())),
    }
}

fn forward_ego_only(tape: &mut Tape, model: &Model, ep: &Episode, t: usize, cfg: &RunConfig, early: bool) -> Result<Forward> {
    let mut clock = Instant::now();
    let mut timing = Timing::default();
    let mut agents = vec![ego_frame(ep, t, ep.clouds[t][0].clone())];
    let mut clouds = vec![ep.clouds[t][0].clone()];
    if early {
        for k in 1..ep.agents() {
            let (perturbed, cloud) = ep.projected(t, k, t, &cfg.run.noise);
            agents.push(AgentFrame {
                agent: ep.agent_id(k),
                pose: ep.pose(t, k),
                perturbed,
                message: Some(Outgoing::Points(cloud.len())),
                cloud: cloud.clone(),
                features: None,
                confidence: None,
                mask: None,
            });
            clouds.push(cloud);
        }
    }
    let f = encode(tape, model, &ObservationCloud::merge(&clouds), cfg)?;
    agents[0].features = Some(tape.value(f).clone());
    timing.encode_ms = lap(&mut clock);
    let (reg, cls) = model.head.forward_t(tape, &model.store, f)?;
    timing.decode_ms = lap(&mut clock);
    Ok(Forward {
        reg,
        cls,
        agents,
        maps: Vec::new(),
        timing,
    })
}

fn forward_scope(tape: &mut Tape, model: &Model, ep: &Episode, t: usize, cfg: &RunConfig, quantize: bool) -> Result<Forward> {
    let arch = &model.arch;
    let store = &model.store;
    let run = &cfg.run;
    if arch.has(Source::Collaboration) && ep.agents() != arch.collaborators + 1 {
        return Err(Error::Config(format!(
            "model built for {} collaborators, scenario has {}",
            arch.collaborators,
            ep.agents().saturating_sub(1)
        )));
    }
    let mut clock = Instant::now();
    let mut timing = Timing::default();

    let f_ego = encode(tape, model, &ep.clouds[t][0], cfg)?;
    let ego_hist = if arch.has(Source::Context) {
        history(tape, model, ep, t, 0, cfg)?
    } else {
        Vec::new()
    };
    timing.encode_ms = lap(&mut clock);

    let h = match (&model.cia, arch.has(Source::Context)) {
        (Some(cia), true) => Some(aggregate_context_t(tape, store, cia, f_ego, &ego_hist)?),
        _ => None,
    };
    timing.context_ms = lap(&mut clock);

    let gen = model.head.confidence_generator(store);
    let ego_conf = confidence_map(tape.value(f_ego), &gen)?;
    let mut ego = ego_frame(ep, t, ep.clouds[t][0].clone());
    ego.features = Some(tape.value(f_ego).clone());
    ego.confidence = Some(ego_conf.clone());
    let mut agents = vec![ego];
    let mut maps = vec![("confidence_ego".to_string(), tape.constant(ego_conf.to_grid()))];

    let mut received = Vec::new();
    if arch.has(Source::Collaboration) {
        for k in 1..ep.agents() {
            let (perturbed, cloud) = ep.projected(t, k, t, &run.noise);
            let mut fk = encode(tape, model, &cloud, cfg)?;
            if run.collaborator_context {
                if let Some(cia) = &model.cia {
                    let hist = history(tape, model, ep, t, k, cfg)?;
                    fk = aggregate_context_t(tape, store, cia, fk, &hist)?;
                }
            }
            let conf = confidence_map(tape.value(fk), &gen)?;
            let (mask, mut msg) = select_and_pack(tape.value(fk), &conf, &run.selection)?;
            msg.agent = ep.agent_id(k);
            msg.frame = t as u32;
            let m = tape.constant(mask.to_map().to_grid());
            let mut recv = tape.broadcast_mul(m, fk)?;
            if quantize {
                recv = tape.round_f32(recv);
            }
            maps.push((format!("mask_agent{}", ep.agent_id(k)), m));
            received.push(recv);
            agents.push(AgentFrame {
                agent: ep.agent_id(k),
                pose: ep.pose(t, k),
                perturbed,
                cloud,
                features: Some(tape.value(fk).clone()),
                confidence: Some(conf),
                mask: Some(mask),
                message: Some(Outgoing::Features(msg)),
            });
        }
    }
    let z = match &model.ccc {
        Some(ccc) if !received.is_empty() => {
            let inputs: Vec<CollaboratorInput> = received
                .iter()
                .zip(&agents[1..])
                .map(|(&features, a)| CollaboratorInput {
                    features,
                    mask: a.mask.as_ref().expect("collaborator mask"),
                    confidence: a.confidence.as_ref().expect("collaborator confidence"),
                })
                .collect();
            Some(collaborate_t(tape, store, ccc, f_ego, &ego_conf, &inputs)?.0)
        }
        _ => None,
    };
    timing.collaboration_ms = lap(&mut clock);

    let sources: Vec<(Source, Var)> = arch
        .sources
        .iter()
        .map(|&s| {
            let v = match s {
                Source::Context => h,
                Source::Collaboration => z,
                Source::Ego => Some(f_ego),
            };
            v.map(|v| (s, v)).ok_or_else(|| Error::Config(format!("fusion source {s:?} unavailable")))
        })
        .collect::<Result<_>>()?;
    let vars: Vec<Var> = sources.iter().map(|s| s.1).collect();
    let fused = if vars.len() == 1 {
        vars[0]
    } else if let Some(iaf) = &model.iaf {
        let tr = fuse_t(tape, store, iaf, &vars)?;
        for ((s, _), a) in sources.iter().zip(&tr.attention) {
            maps.push((format!("attention_{}", source_name(*s)), *a));
        }
        tr.output
    } else if let Some(mix) = &model.mix {
        let stacked = tape.concat(&vars)?;
        tape.conv(stacked, mix, store)?
    } else {
        return Err(Error::Config("several fusion sources but no fusion weights".into()));
    };
    timing.fusion_ms = lap(&mut clock);

    let (reg, cls) = model.head.forward_t(tape, store, fused)?;
    timing.decode_ms = lap(&mut clock);
    Ok(Forward {
        reg,
        cls,
        agents,
        maps,
        timing,
    })
}

fn source_name(s: Source) -> &'static str {
    match s {
        Source::Context => "context",
        Source::Collaboration => "collaboration",
        Source::Ego => "ego",
    }
}

fn score(ep: &Episode, t: usize, detections: Vec<Detection>, agents: Vec<AgentFrame>, maps: Vec<MapDump>, timing: Timing) -> Result<FrameResult> {
    let ground_truth = ep.ground_truth(t);
    let volume = message_volume(&agents);
    let metrics = FrameMetrics {
        frame: t,
        ap50: evaluate_ap(&detections, &ground_truth, 0.5)?,
        ap70: evaluate_ap(&detections, &ground_truth, 0.7)?,
        bytes: volume.bytes,
        log2_bytes: volume.log2_bytes,
        empty_volume: volume.empty,
        detections: detections.len(),
        ground_truth: ground_truth.len(),
        timing,
    };
    Ok(FrameResult {
        detections,
        ground_truth,
        metrics,
        agents,
        maps,
    })
}

/// Detect in the ego frame at `t` and score against the visible ground truth.
pub fn run_frame(ep: &Episode, t: usize, cfg: &RunConfig, model: &Model) -> Result<FrameResult> {
    if cfg.run.mode == FusionMode::LateFusion {
        return run_late(ep, t, cfg, model);
    }
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, model, ep, t, cfg, cfg.run.quantize)?;
    let mut clock = Instant::now();
    let out = HeadOutput {
        regression: tape.value(fwd.reg).clone(),
        classification: tape.value(fwd.cls).clone(),
    };
    let detections = extract_boxes(&out, &cfg.scenario.grid, cfg.run.score_threshold, cfg.run.nms_threshold)?;
    let mut timing = fwd.timing;
    timing.decode_ms += lap(&mut clock);
    let maps = fwd
        .maps
        .iter()
        .map(|(name, v)| MapDump {
            name: name.clone(),
            grid: tape.value(*v).clone(),
        })
        .collect();
    score(ep, t, detections, fwd.agents, maps, timing)
}

/// Every agent detects on its own sweep; boxes are moved to the ego frame and merged.
fn run_late(ep: &Episode, t: usize, cfg: &RunConfig, model: &Model) -> Result<FrameResult> {
    let mut clock = Instant::now();
    let mut timing = Timing::default();
    let ego_pose = ep.pose(t, 0);
    let mut agents = Vec::new();
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for k in 0..ep.agents() {
        let mut tape = Tape::new();
        let f = encode(&mut tape, model, &ep.clouds[t][k], cfg)?;
        let (reg, cls) = model.head.forward_t(&mut tape, &model.store, f)?;
        let out = HeadOutput {
            regression: tape.value(reg).clone(),
            classification: tape.value(cls).clone(),
        };
        let own = extract_boxes(&out, &cfg.scenario.grid, cfg.run.score_threshold, cfg.run.nms_threshold)?;
        let reported = ep.reported_pose(t, k, t, &cfg.run.noise);
        let to_ego = Rigid2::source_to_ego(&reported, &ego_pose);
        for d in &own {
            boxes.push(d.bbox.transformed(&to_ego));
            scores.push(d.score);
        }
        let mut a = ego_frame(ep, t, ep.clouds[t][k].clone());
        a.agent = ep.agent_id(k);
        a.pose = ep.pose(t, k);
        a.perturbed = reported;
        a.features = Some(tape.value(f).clone());
        if k > 0 {
            a.message = Some(Outgoing::Detections(own));
        }
        agents.push(a);
    }
    timing.decode_ms = lap(&mut clock);
    let keep = nms_rotated(&boxes, &scores, cfg.run.nms_threshold)?;
    let detections = keep
        .into_iter()
        .map(|i| Detection {
            bbox: boxes[i],
            score: scores[i],
        })
        .filter(|d| cfg.scenario.grid.contains(d.bbox.cx, d.bbox.cy))
        .collect();
    timing.fusion_ms = lap(&mut clock);
    score(ep, t, detections, agents, Vec::new(), timing)
}
