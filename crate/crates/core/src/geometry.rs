//! Planar poses, inter-agent projection, pose noise and rotated boxes.
//!
//! IoU is computed on BEV rectangles only; box height and `cz` never enter
//! the overlap, which is the convention every AP number in this crate uses.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::{domain, keyed};

/// Wrap an angle to `(−π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid can return exactly 2π for tiny negative inputs
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn origin() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }
}

/// Rigid planar transform `p ↦ R(θ)·p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rigid2 {
    pub theta: f64,
    pub cos: f64,
    pub sin: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Rigid2 {
    /// Local-to-world transform of a pose.
    pub fn of_pose(p: &Pose2D) -> Self {
        Self {
            theta: p.heading,
            cos: p.heading.cos(),
            sin: p.heading.sin(),
            tx: p.x,
            ty: p.y,
        }
    }

    pub fn identity() -> Self {
        Self {
            theta: 0.0,
            cos: 1.0,
            sin: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn inverse(&self) -> Self {
        let (c, s) = (self.cos, self.sin);
        Self {
            theta: -self.theta,
            cos: c,
            sin: -s,
            tx: -(c * self.tx + s * self.ty),
            ty: s * self.tx - c * self.ty,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Rigid2) -> Self {
        let (x, y) = self.apply(other.tx, other.ty);
        Self {
            theta: self.theta + other.theta,
            cos: self.cos * other.cos - self.sin * other.sin,
            sin: self.sin * other.cos + self.cos * other.sin,
            tx: x,
            ty: y,
        }
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.cos * x - self.sin * y + self.tx, self.sin * x + self.cos * y + self.ty)
    }

    /// Maps coordinates from `source`'s frame into `ego`'s frame.
    pub fn source_to_ego(source: &Pose2D, ego: &Pose2D) -> Self {
        Self::of_pose(ego).inverse().compose(&Self::of_pose(source))
    }
}

/// Anything that can be moved by a rigid planar transform.
pub trait Transform: Sized {
    fn transformed(&self, t: &Rigid2) -> Self;
}

impl Transform for (f64, f64) {
    fn transformed(&self, t: &Rigid2) -> Self {
        t.apply(self.0, self.1)
    }
}

impl Transform for [f64; 3] {
    fn transformed(&self, t: &Rigid2) -> Self {
        let (x, y) = t.apply(self[0], self[1]);
        [x, y, self[2]]
    }
}

impl Transform for Pose2D {
    fn transformed(&self, t: &Rigid2) -> Self {
        let (x, y) = t.apply(self.x, self.y);
        Pose2D::new(x, y, self.heading + t.theta)
    }
}

impl Transform for Box7 {
    fn transformed(&self, t: &Rigid2) -> Self {
        let (cx, cy) = t.apply(self.cx, self.cy);
        Box7 {
            cx,
            cy,
            yaw: normalize_angle(self.yaw + t.theta),
            ..*self
        }
    }
}

impl<T: Transform> Transform for Vec<T> {
    fn transformed(&self, t: &Rigid2) -> Self {
        self.iter().map(|v| v.transformed(t)).collect()
    }
}

/// Express `item`, given in `source`'s frame, in `ego`'s frame.
pub fn to_ego_frame<T: Transform>(item: &T, source: &Pose2D, ego: &Pose2D) -> T {
    item.transformed(&Rigid2::source_to_ego(source, ego))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Position standard deviation in meters.
    pub sigma_xyz: f64,
    /// Heading standard deviation in degrees.
    pub sigma_heading: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            sigma_xyz: 0.0,
            sigma_heading: 0.0,
            seed: 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_xyz == 0.0 && self.sigma_heading == 0.0
    }
}

/// Pose with Gaussian localization error, reproducible per `(seed, agent, frame)`.
pub fn perturb_pose(pose: &Pose2D, noise: &NoiseModel, agent: u32, frame: u64) -> Pose2D {
    if noise.is_zero() {
        return *pose;
    }
    let mut rng = keyed(noise.seed, &[domain::POSE_NOISE, agent as u64, frame]);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let dx = unit.sample(&mut rng) * noise.sigma_xyz;
    let dy = unit.sample(&mut rng) * noise.sigma_xyz;
    let dh = unit.sample(&mut rng) * noise.sigma_heading.to_radians();
    Pose2D::new(pose.x + dx, pose.y + dy, pose.heading + dh)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box7 {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
}

impl Box7 {
    pub fn new(cx: f64, cy: f64, cz: f64, length: f64, width: f64, height: f64, yaw: f64) -> Result<Self> {
        let b = Self {
            cx,
            cy,
            cz,
            length,
            width,
            height,
            yaw,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.cx, self.cy, self.cz, self.length, self.width, self.height, self.yaw];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite box {self:?}")));
        }
        if self.length <= 0.0 || self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::Domain(format!("box extents must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.cx, self.cy, self.cz, self.length, self.width, self.height, self.yaw]
    }

    pub fn area_bev(&self) -> f64 {
        self.length * self.width
    }

    /// BEV corners, counter-clockwise.
    pub fn corners_bev(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (0.5 * self.length, 0.5 * self.width);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(u, v)| (self.cx + c * u - s * v, self.cy + s * u + c * v))
    }

    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= 0.5 * self.length && v.abs() <= 0.5 * self.width
    }

    fn bits(&self) -> [u64; 7] {
        self.to_array().map(f64::to_bits)
    }
}

fn shoelace(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    0.5 * s
}

/// Clip `subject` by the convex CCW polygon `clip`.
fn sutherland_hodgman(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (ax, ay) = clip[i];
        let (bx, by) = clip[(i + 1) % clip.len()];
        let side = |p: (f64, f64)| (bx - ax) * (p.1 - ay) - (by - ay) * (p.0 - ax);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: (f64, f64), q: (f64, f64), sp: f64, sq: f64) -> (f64, f64) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Intersection-over-union of the BEV rectangles of two boxes.
pub fn rotated_iou_bev(a: &Box7, b: &Box7) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.area_bev() > 0.0) || !bx.cx.is_finite() || !bx.cy.is_finite() || !bx.yaw.is_finite() {
            return Err(Error::Domain(format!("degenerate box {bx:?}")));
        }
    }
    // Fixed argument order makes the result bitwise symmetric.
    let (a, b) = if a.bits() <= b.bits() { (a, b) } else { (b, a) };
    let ra = 0.5 * a.length.hypot(a.width);
    let rb = 0.5 * b.length.hypot(b.width);
    if (a.cx - b.cx).hypot(a.cy - b.cy) >= ra + rb {
        return Ok(0.0);
    }
    let inter = shoelace(&sutherland_hodgman(&a.corners_bev(), &b.corners_bev()))
        .max(0.0)
        .min(a.area_bev().min(b.area_bev()));
    let union = a.area_bev() + b.area_bev() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Score order used by NMS and AP: descending, ties by lower index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    idx
}

/// Greedy rotated non-maximum suppression; returns kept indices by descending score.
pub fn nms_rotated(boxes: &[Box7], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(shape_err!("{} boxes but {} scores", boxes.len(), scores.len()));
    }
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        let mut keep = true;
        for &k in &kept {
            if rotated_iou_bev(&boxes[k], &boxes[i])? > iou_threshold {
                keep = false;
                break;
            }
        }
        if keep {
            kept.push(i);
        }
    }
    Ok(kept)
}
