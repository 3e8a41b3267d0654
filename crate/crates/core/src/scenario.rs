//! Synthetic worlds, ray-cast pseudo-LiDAR and the BEV observation encoder.
//!
//! Objects are car-sized boxes moving at constant velocity. Each agent casts
//! azimuth rays in its own frame; a ray stops at the nearest box face, which
//! gives occlusion for free. The encoder rasterizes points into four
//! statistics per cell and lifts them to `C` channels with two 3×3 convs.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou_bev, Box7, Pose2D, Rigid2, Transform};
use crate::gridcore::params::{Conv, ParamStore};
use crate::gridcore::tape::{Tape, Var};
use crate::gridcore::{ConvGeom, FeatureGrid};
use crate::rng::{domain, keyed};

/// Channels produced by [`rasterize`].
pub const RASTER_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub voxel: f64,
    pub channels: usize,
}

impl GridSpec {
    /// 25.6 m square around the ego, 0.4 m cells (64×64), 16 channels.
    pub fn desk() -> Self {
        Self {
            x_range: [-12.8, 12.8],
            y_range: [-12.8, 12.8],
            voxel: 0.4,
            channels: 16,
        }
    }

    /// 100 × 384 cells with 64 channels.
    pub fn full_scale() -> Self {
        Self {
            x_range: [-76.8, 76.8],
            y_range: [-20.0, 20.0],
            voxel: 0.4,
            channels: 64,
        }
    }

    fn cells(lo: f64, hi: f64, voxel: f64) -> Option<usize> {
        let n = (hi - lo) / voxel;
        let r = n.round();
        ((n - r).abs() < 1e-6 && r >= 1.0).then_some(r as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel > 0.0) || !self.voxel.is_finite() {
            return Err(Error::Config(format!("voxel must be positive, got {}", self.voxel)));
        }
        if self.channels == 0 {
            return Err(Error::Config("grid needs at least one channel".into()));
        }
        for (name, [lo, hi]) in [("x_range", self.x_range), ("y_range", self.y_range)] {
            if !(hi > lo) || Self::cells(lo, hi, self.voxel).is_none() {
                return Err(Error::Config(format!(
                    "{name} [{lo}, {hi}] is not a positive multiple of voxel {}",
                    self.voxel
                )));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        Self::cells(self.y_range[0], self.y_range[1], self.voxel).unwrap_or(0)
    }

    pub fn width(&self) -> usize {
        Self::cells(self.x_range[0], self.x_range[1], self.voxel).unwrap_or(0)
    }

    /// `(row, col)` of the cell containing `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.x_range[0]) / self.voxel).floor();
        let r = ((y - self.y_range[0]) / self.voxel).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.width() && (r as usize) < self.height())
            .then(|| (r as usize, c as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_range[0] + (col as f64 + 0.5) * self.voxel,
            self.y_range[0] + (row as f64 + 0.5) * self.voxel,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_range[0] && x < self.x_range[1] && y >= self.y_range[0] && y < self.y_range[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectCount {
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub bounds: Bounds,
    pub objects: ObjectCount,
    pub speed: SpeedRange,
}

/// Pose as written in config files; heading in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseConfig {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub heading: f64,
}

impl PoseConfig {
    pub fn pose(&self) -> Pose2D {
        Pose2D::new(self.x, self.y, self.heading.to_radians())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub pose: PoseConfig,
    pub range: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorParams {
    /// Azimuth rays per sweep.
    pub rays: usize,
    /// Returns per ray, each at an independently sampled height on the hit face.
    pub beams: usize,
    /// Standard deviation of range noise in meters.
    pub jitter: f64,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self {
            rays: 1800,
            beams: 4,
            jitter: 0.02,
        }
    }
}

/// Scenario file contents. The optional `run` table is parsed by the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub world: WorldConfig,
    pub agents: Vec<AgentConfig>,
    pub grid: GridSpec,
    #[serde(default)]
    pub sensor: SensorParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<toml::Table>,
}

fn default_frames() -> usize {
    10
}

fn default_dt() -> f64 {
    0.1
}

impl ScenarioConfig {
    /// Desk-scale scene: objects inside the ego grid, collaborators spread around it.
    pub fn desk(agents: usize, objects: usize, seed: u64) -> Self {
        let spots = [
            (0.0, 0.0, 0.0),
            (9.0, 7.0, -140.0),
            (-9.0, 8.0, -45.0),
            (-8.0, -9.0, 40.0),
            (8.0, -9.0, 130.0),
        ];
        Self {
            seed,
            frames: default_frames(),
            dt: default_dt(),
            world: WorldConfig {
                bounds: Bounds {
                    x: [-12.0, 12.0],
                    y: [-12.0, 12.0],
                },
                objects: ObjectCount { count: objects },
                speed: SpeedRange { min: 0.0, max: 2.0 },
            },
            agents: spots
                .iter()
                .cycle()
                .take(agents)
                .map(|&(x, y, heading)| AgentConfig {
                    pose: PoseConfig { x, y, heading },
                    range: 30.0,
                })
                .collect(),
            grid: GridSpec::desk(),
            sensor: SensorParams::default(),
            run: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let b = &self.world.bounds;
        if !(b.x[1] > b.x[0]) || !(b.y[1] > b.y[0]) {
            return Err(Error::Config("world bounds must have positive extent".into()));
        }
        let s = &self.world.speed;
        if !(s.min >= 0.0) || !(s.max >= s.min) {
            return Err(Error::Config(format!("invalid speed range [{}, {}]", s.min, s.max)));
        }
        if self.agents.is_empty() {
            return Err(Error::Config("at least one agent is required".into()));
        }
        if self.agents.iter().any(|a| !(a.range > 0.0)) {
            return Err(Error::Config("sensor range must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.sensor.rays == 0 || self.sensor.beams == 0 || !(self.sensor.jitter >= 0.0) {
            return Err(Error::Config("sensor needs rays ≥ 1, beams ≥ 1, jitter ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: u32,
    pub bbox: Box7,
    pub velocity: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: u32,
    pub pose: Pose2D,
    pub range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub bounds: Bounds,
    pub objects: Vec<WorldObject>,
    pub agents: Vec<Agent>,
    pub time: f64,
    pub frame: u64,
}

impl World {
    pub fn agent(&self, id: u32) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn boxes(&self) -> Vec<Box7> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

const PLACEMENT_ATTEMPTS: usize = 1000;
/// Minimum clearance between an agent and any object surface.
const AGENT_CLEARANCE: f64 = 1.5;

/// Deterministic world: agents from the config, non-overlapping random objects.
pub fn generate_world(config: &ScenarioConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut rng = keyed(seed, &[domain::WORLD]);
    let agents: Vec<Agent> = config
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| Agent {
            id: i as u32,
            pose: a.pose.pose(),
            range: a.range,
        })
        .collect();
    let b = config.world.bounds;
    let speed = config.world.speed;
    let mut objects: Vec<WorldObject> = Vec::with_capacity(config.world.objects.count);
    for id in 0..config.world.objects.count {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let length = rng.random_range(3.6..4.8);
            let width = rng.random_range(1.6..2.0);
            let height = rng.random_range(1.4..1.8);
            let yaw = rng.random_range(-PI..PI);
            let cx = rng.random_range(b.x[0]..b.x[1]);
            let cy = rng.random_range(b.y[0]..b.y[1]);
            let bx = Box7::new(cx, cy, 0.5 * height, length, width, height, yaw)?;
            let inside = bx
                .corners_bev()
                .iter()
                .all(|&(x, y)| x >= b.x[0] && x <= b.x[1] && y >= b.y[0] && y <= b.y[1]);
            let half_diag = 0.5 * length.hypot(width);
            let clear = agents
                .iter()
                .all(|a| (a.pose.x - cx).hypot(a.pose.y - cy) >= half_diag + AGENT_CLEARANCE);
            if !inside || !clear {
                continue;
            }
            let mut free = true;
            for o in &objects {
                if rotated_iou_bev(&o.bbox, &bx)? > 0.0 {
                    free = false;
                    break;
                }
            }
            if free {
                placed = Some(bx);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place object {id} without overlap in {PLACEMENT_ATTEMPTS} attempts"
            ))
        })?;
        let v = if speed.max > speed.min {
            rng.random_range(speed.min..speed.max)
        } else {
            speed.min
        };
        objects.push(WorldObject {
            id: id as u32,
            bbox,
            velocity: [v * bbox.yaw.cos(), v * bbox.yaw.sin()],
        });
    }
    Ok(World {
        bounds: b,
        objects,
        agents,
        time: 0.0,
        frame: 0,
    })
}

/// Constant-velocity update; moving objects face their direction of travel.
pub fn step_world(world: &World, dt: f64) -> Result<World> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let mut next = world.clone();
    for o in &mut next.objects {
        let [vx, vy] = o.velocity;
        o.bbox.cx += vx * dt;
        o.bbox.cy += vy * dt;
        if vx != 0.0 || vy != 0.0 {
            o.bbox.yaw = vy.atan2(vx);
        }
    }
    next.time += dt;
    next.frame += 1;
    Ok(next)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationCloud {
    /// `(x, y, z)` in the frame the cloud is currently expressed in.
    pub points: Vec<[f64; 3]>,
    pub timestamp: f64,
}

impl ObservationCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &Rigid2) -> Self {
        Self {
            points: self.points.transformed(t),
            timestamp: self.timestamp,
        }
    }

    pub fn merge(clouds: &[ObservationCloud]) -> Self {
        Self {
            points: clouds.iter().flat_map(|c| c.points.iter().copied()).collect(),
            timestamp: clouds.first().map_or(0.0, |c| c.timestamp),
        }
    }
}

/// Entry distance of the ray `o + t·d` into a box, in the ray's frame.
pub fn ray_box_entry(ox: f64, oy: f64, dx: f64, dy: f64, b: &Box7) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let (rx, ry) = (ox - b.cx, oy - b.cy);
    let o = [c * rx + s * ry, -s * rx + c * ry];
    let d = [c * dx + s * dy, -s * dx + c * dy];
    let half = [0.5 * b.length, 0.5 * b.width];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..2 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half[k] {
                return None;
            }
        } else {
            let a = (-half[k] - o[k]) / d[k];
            let bb = (half[k] - o[k]) / d[k];
            t0 = t0.max(a.min(bb));
            t1 = t1.min(a.max(bb));
        }
    }
    (t1 >= t0 && t0 > 0.0).then_some(t0)
}

/// Point cloud and the object id behind every point.
pub fn observe_labeled(
    world: &World,
    agent_id: u32,
    sensor: &SensorParams,
    seed: u64,
) -> Result<(ObservationCloud, Vec<u32>)> {
    let agent = world
        .agent(agent_id)
        .ok_or_else(|| Error::Precondition(format!("no agent {agent_id}")))?;
    let to_local = Rigid2::of_pose(&agent.pose).inverse();
    let local: Vec<Box7> = world.objects.iter().map(|o| o.bbox.transformed(&to_local)).collect();
    let jitter = Normal::new(0.0, sensor.jitter.max(0.0)).map_err(|e| Error::Domain(e.to_string()))?;
    let mut points = Vec::new();
    let mut ids = Vec::new();
    for ray in 0..sensor.rays {
        let theta = 2.0 * PI * ray as f64 / sensor.rays as f64;
        let (dy, dx) = theta.sin_cos();
        let mut best: Option<(f64, usize)> = None;
        for (j, b) in local.iter().enumerate() {
            if let Some(t) = ray_box_entry(0.0, 0.0, dx, dy, b) {
                if t <= agent.range && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, j));
                }
            }
        }
        let Some((t, j)) = best else { continue };
        let b = &local[j];
        let mut rng = keyed(seed, &[domain::RAYS, agent_id as u64, world.frame, ray as u64]);
        for _ in 0..sensor.beams {
            let z = rng.random_range(b.cz - 0.5 * b.height..=b.cz + 0.5 * b.height);
            let r = (t + jitter.sample(&mut rng)).clamp(0.0, agent.range);
            points.push([r * dx, r * dy, z]);
            ids.push(world.objects[j].id);
        }
    }
    Ok((
        ObservationCloud {
            points,
            timestamp: world.time,
        },
        ids,
    ))
}

/// Simulated LiDAR sweep of `agent_id`, expressed in that agent's frame.
pub fn observe(world: &World, agent_id: u32, sensor: &SensorParams, seed: u64) -> Result<ObservationCloud> {
    observe_labeled(world, agent_id, sensor, seed).map(|(c, _)| c)
}

/// Stage 1: per-cell point count, mean z, max z and mean planar range.
pub fn rasterize(obs: &ObservationCloud, spec: &GridSpec) -> Result<FeatureGrid> {
    spec.validate()?;
    let (h, w) = (spec.height(), spec.width());
    let n = h * w;
    let mut count = vec![0.0; n];
    let mut zsum = vec![0.0; n];
    let mut zmax = vec![f64::NEG_INFINITY; n];
    let mut rsum = vec![0.0; n];
    for p in &obs.points {
        if let Some((r, c)) = spec.cell_of(p[0], p[1]) {
            let i = r * w + c;
            count[i] += 1.0;
            zsum[i] += p[2];
            zmax[i] = zmax[i].max(p[2]);
            rsum[i] += p[0].hypot(p[1]);
        }
    }
    let mut out = FeatureGrid::zeros(RASTER_CHANNELS, h, w);
    let d = out.data_mut();
    for i in 0..n {
        if count[i] > 0.0 {
            d[i] = count[i];
            d[n + i] = zsum[i] / count[i];
            d[2 * n + i] = zmax[i];
            d[3 * n + i] = rsum[i] / count[i];
        }
    }
    Ok(out)
}

/// Stage 2 of the observation encoder: conv3×3 → ReLU → conv3×3 → ReLU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Encoder {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv::xavier(store, "enc.conv1", ConvGeom::same(channels, RASTER_CHANNELS, 3), rng),
            conv2: Conv::xavier(store, "enc.conv2", ConvGeom::same(channels, channels, 3), rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv2.geom.out_channels
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, raster: Var) -> Result<Var> {
        let a = tape.conv(raster, &self.conv1, store)?;
        let a = tape.relu(a);
        let b = tape.conv(a, &self.conv2, store)?;
        Ok(tape.relu(b))
    }
}

/// `F = f_enc(X)` on a fresh tape.
pub fn encode_bev(obs: &ObservationCloud, spec: &GridSpec, enc: &Encoder, store: &ParamStore) -> Result<FeatureGrid> {
    let raster = rasterize(obs, spec)?;
    let mut tape = Tape::new();
    let x = tape.constant(raster);
    let y = enc.forward(&mut tape, store, x)?;
    Ok(tape.value(y).clone())
}
