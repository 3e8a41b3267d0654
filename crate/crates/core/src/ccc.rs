//! Confidence-guided cross-agent collaboration.
//!
//! Collaborators share only the feature columns whose confidence clears a
//! threshold. The ego builds three-level pyramids of its own and the received
//! features, proposes reference points where the summed confidence is high,
//! and at each reference point attends to a few learned offset locations in
//! every collaborator's map. Results are written back into the ego map and
//! the levels are fused by a 1×1 conv.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::gridcore::params::{Conv, ParamStore};
use crate::gridcore::tape::{Tape, Var};
use crate::gridcore::{
    conv2d, max_pool2x2, pool_channels, sigmoid, ConvGeom, ConvParams, FeatureGrid, PoolMode, SpatialMap,
};

pub type ConfidenceMap = SpatialMap;

/// `max_c σ(gen(grid))`.
pub fn confidence_map(grid: &FeatureGrid, gen: &ConvParams) -> Result<ConfidenceMap> {
    if gen.geom.out_channels == 0 {
        return Err(shape_err!("confidence generator has no output channels"));
    }
    let logits = conv2d(grid, gen)?;
    pool_channels(&logits.map(sigmoid), PoolMode::Max)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl SelectionMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(shape_err!("mask of {} bits for {}×{}", bits.len(), height, width));
        }
        Ok(Self { height, width, bits })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, h: usize, w: usize) -> bool {
        self.bits[h * self.width + w]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_map(&self) -> SpatialMap {
        SpatialMap::new(self.height, self.width, self.bits.iter().map(|&b| b as u8 as f64).collect())
            .expect("mask dims")
    }

    /// Zero every column outside the mask.
    pub fn apply(&self, grid: &FeatureGrid) -> Result<FeatureGrid> {
        if grid.height() != self.height || grid.width() != self.width {
            return Err(shape_err!("mask {}×{} vs grid {:?}", self.height, self.width, grid.shape()));
        }
        let n = grid.plane_len();
        let mut out = grid.clone();
        for c in 0..grid.channels() {
            for (v, &b) in out.data_mut()[c * n..(c + 1) * n].iter_mut().zip(&self.bits) {
                if !b {
                    *v = 0.0;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub threshold: f64,
    /// Keep at most this many cells, highest confidence first.
    pub top_k: Option<usize>,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            top_k: None,
        }
    }
}

pub const MESSAGE_MAGIC: &[u8; 4] = b"SCMG";
pub const MESSAGE_VERSION: u16 = 1;
/// magic + version + agent + frame + scale + count.
pub const MESSAGE_HEADER_BYTES: usize = 4 + 2 + 4 + 4 + 1 + 4;
/// `(h, w)` as two u16.
pub const ENTRY_INDEX_BYTES: usize = 4;

/// Sparse feature message as sent over the wire (32-bit payload).
#[derive(Clone, Debug, PartialEq)]
pub struct PackedMessage {
    pub agent: u32,
    pub frame: u32,
    pub scale: u8,
    pub channels: usize,
    pub entries: Vec<MessageEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MessageEntry {
    pub h: u16,
    pub w: u16,
    pub values: Vec<f32>,
}

impl PackedMessage {
    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn payload_bytes(&self) -> usize {
        self.entries.len() * self.channels * 4
    }

    pub fn index_bytes(&self) -> usize {
        self.entries.len() * ENTRY_INDEX_BYTES
    }

    /// Exact encoded size.
    pub fn byte_len(&self) -> usize {
        MESSAGE_HEADER_BYTES + self.index_bytes() + self.payload_bytes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MESSAGE_MAGIC);
        out.extend_from_slice(&MESSAGE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.agent.to_le_bytes());
        out.extend_from_slice(&self.frame.to_le_bytes());
        out.push(self.scale);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.h.to_le_bytes());
            out.extend_from_slice(&e.w.to_le_bytes());
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decode; the channel count is implied by the body length.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("message: {m}"));
        if bytes.len() < MESSAGE_HEADER_BYTES || &bytes[..4] != MESSAGE_MAGIC {
            return Err(bad("missing header"));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if u16_at(4) != MESSAGE_VERSION {
            return Err(bad("unsupported version"));
        }
        let agent = u32_at(6);
        let frame = u32_at(10);
        let scale = bytes[14];
        let count = u32_at(15) as usize;
        let body = bytes.len() - MESSAGE_HEADER_BYTES;
        let channels = if count == 0 {
            if body != 0 {
                return Err(bad("trailing bytes"));
            }
            0
        } else {
            if body % count != 0 || (body / count) < ENTRY_INDEX_BYTES || (body / count - ENTRY_INDEX_BYTES) % 4 != 0 {
                return Err(bad("body length does not match entry count"));
            }
            (body / count - ENTRY_INDEX_BYTES) / 4
        };
        let stride = ENTRY_INDEX_BYTES + 4 * channels;
        let entries = (0..count)
            .map(|i| {
                let at = MESSAGE_HEADER_BYTES + i * stride;
                MessageEntry {
                    h: u16_at(at),
                    w: u16_at(at + 2),
                    values: (0..channels)
                        .map(|c| f32::from_le_bytes(bytes[at + 4 + 4 * c..at + 8 + 4 * c].try_into().unwrap()))
                        .collect(),
                }
            })
            .collect();
        Ok(Self {
            agent,
            frame,
            scale,
            channels,
            entries,
        })
    }

    /// Dense grid on the receiver side; unsent columns are zero.
    pub fn unpack(&self, height: usize, width: usize) -> Result<FeatureGrid> {
        let mut g = FeatureGrid::zeros(self.channels, height, width);
        for e in &self.entries {
            let (h, w) = (e.h as usize, e.w as usize);
            if h >= height || w >= width {
                return Err(Error::Format(format!("entry ({h}, {w}) outside {height}×{width}")));
            }
            for (c, &v) in e.values.iter().enumerate() {
                g.set(c, h, w, v as f64);
            }
        }
        Ok(g)
    }
}

/// Threshold (then optionally top-k) the confidence and pack the kept columns.
pub fn select_and_pack(
    grid: &FeatureGrid,
    conf: &ConfidenceMap,
    policy: &SelectionPolicy,
) -> Result<(SelectionMask, PackedMessage)> {
    if !(0.0..=1.0).contains(&policy.threshold) {
        return Err(Error::Precondition(format!("threshold {} outside [0, 1]", policy.threshold)));
    }
    let (h, w) = (conf.height(), conf.width());
    if grid.height() != h || grid.width() != w {
        return Err(shape_err!("confidence {}×{} vs grid {:?}", h, w, grid.shape()));
    }
    if h > u16::MAX as usize + 1 || w > u16::MAX as usize + 1 {
        return Err(shape_err!("grid too large for 16-bit message indices"));
    }
    let mut keep: Vec<usize> = (0..h * w).filter(|&i| conf.data()[i] >= policy.threshold).collect();
    if let Some(k) = policy.top_k {
        if keep.len() > k {
            let d = conf.data();
            keep.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
            keep.truncate(k);
            keep.sort_unstable();
        }
    }
    let mut bits = vec![false; h * w];
    for &i in &keep {
        bits[i] = true;
    }
    let entries = keep
        .iter()
        .map(|&i| MessageEntry {
            h: (i / w) as u16,
            w: (i % w) as u16,
            values: (0..grid.channels()).map(|c| grid.get(c, i / w, i % w) as f32).collect(),
        })
        .collect();
    let msg = PackedMessage {
        agent: 0,
        frame: 0,
        scale: 0,
        channels: grid.channels(),
        entries,
    };
    Ok((SelectionMask::new(h, w, bits)?, msg))
}

/// Grid positions `(row, col)` at one pyramid level, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferencePointSet {
    pub height: usize,
    pub width: usize,
    pub positions: Vec<(usize, usize)>,
}

impl ReferencePointSet {
    pub fn all(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            positions: (0..height).flat_map(|h| (0..width).map(move |w| (h, w))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Positions where the summed confidence of all agents reaches `threshold`.
pub fn propose_reference_points(confs: &[ConfidenceMap], threshold: f64) -> Result<ReferencePointSet> {
    let first = confs.first().ok_or_else(|| shape_err!("no confidence maps"))?;
    let (h, w) = (first.height(), first.width());
    if confs.iter().any(|c| c.height() != h || c.width() != w) {
        return Err(shape_err!("confidence maps differ in shape"));
    }
    let positions = (0..h * w)
        .filter(|&i| confs.iter().map(|c| c.data()[i]).sum::<f64>() >= threshold)
        .map(|i| (i / w, i % w))
        .collect();
    Ok(ReferencePointSet {
        height: h,
        width: w,
        positions,
    })
}

/// Per-level features and confidences, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePyramid {
    pub features: Vec<FeatureGrid>,
    pub confidence: Vec<ConfidenceMap>,
}

/// Repeated 2×2 ceil-mode max pooling.
pub fn confidence_pyramid(conf: &ConfidenceMap, levels: usize) -> Vec<ConfidenceMap> {
    let mut out = vec![conf.clone()];
    for _ in 1..levels {
        let next = max_pool2x2(out.last().expect("non-empty"));
        out.push(next);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CccConfig {
    pub channels: usize,
    pub scales: usize,
    pub heads: usize,
    pub points: usize,
    /// Number of collaborator slots.
    pub agents: usize,
    pub threshold: f64,
    /// Share offsets and logits across collaborators.
    pub tied: bool,
    /// When false, a 1×1 conv over `[ego, mean(collaborators)]` replaces attention.
    pub dcm: bool,
    /// When false, every position is a reference point.
    pub rpp: bool,
}

impl CccConfig {
    pub fn new(channels: usize, agents: usize) -> Self {
        Self {
            channels,
            scales: 3,
            heads: 8,
            points: 15,
            agents,
            threshold: 0.1,
            tied: false,
            dcm: true,
            rpp: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcmParams {
    pub heads: usize,
    pub points: usize,
    pub agents: usize,
    pub tied: bool,
    pub pos_embed: Conv,
    pub offsets: Conv,
    pub logits: Conv,
    pub out_proj: Conv,
}

impl DcmParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        points: usize,
        agents: usize,
        tied: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || points == 0 {
            return Err(Error::Config("attention needs at least one head and one point".into()));
        }
        let slots = if tied { 1 } else { agents.max(1) };
        let c = channels;
        Ok(Self {
            heads,
            points,
            agents,
            tied,
            pos_embed: Conv::xavier(store, &format!("{name}.pos_embed"), ConvGeom::same(c, 2, 1), rng),
            offsets: Conv::zeros(store, &format!("{name}.offsets"), ConvGeom::same(heads * slots * points * 2, c, 1)),
            logits: Conv::xavier(store, &format!("{name}.logits"), ConvGeom::same(heads * slots * points, c, 1), rng),
            out_proj: Conv::xavier(store, &format!("{name}.out_proj"), ConvGeom::same(c, heads * c, 1), rng),
        })
    }

    /// Repeat per-head tied channels across collaborator slots.
    fn untie(&self, tape: &mut Tape, x: Var, per_sample: usize, k: usize) -> Result<Var> {
        if !self.tied {
            return Ok(x);
        }
        let block = self.points * per_sample;
        let mut parts = Vec::with_capacity(self.heads * k);
        for a in 0..self.heads {
            let s = tape.slice(x, a * block, block)?;
            parts.extend(std::iter::repeat_n(s, k));
        }
        tape.concat(&parts)
    }
}

/// Attention output and softmax weights `(A·K·M, N, 1)` at the reference points.
pub struct DcmTrace {
    pub output: Var,
    pub weights: Option<Var>,
}

/// Deformable cross-attention with the filling operation.
pub fn dcm_t(
    tape: &mut Tape,
    store: &ParamStore,
    p: &DcmParams,
    ego: Var,
    collabs: &[Var],
    refs: &ReferencePointSet,
) -> Result<DcmTrace> {
    let (c, h, w) = tape.shape(ego);
    for &k in collabs {
        if tape.shape(k) != (c, h, w) {
            return Err(shape_err!("collaborator {:?} vs ego {:?}", tape.shape(k), (c, h, w)));
        }
    }
    if refs.height != h || refs.width != w || refs.positions.iter().any(|&(r, q)| r >= h || q >= w) {
        return Err(shape_err!("reference points do not fit a {h}×{w} grid"));
    }
    if collabs.is_empty() || refs.is_empty() {
        return Ok(DcmTrace {
            output: ego,
            weights: None,
        });
    }
    let k = collabs.len();
    if !p.tied && k != p.agents {
        return Err(shape_err!("attention built for {} collaborators, got {k}", p.agents));
    }
    let pos: Rc<Vec<(usize, usize)>> = Rc::new(refs.positions.clone());
    let n = pos.len();
    let query = tape.gather(ego, pos.clone())?;
    let coords = FeatureGrid::from_fn(2, n, 1, |ch, i, _| {
        let (r, q) = pos[i];
        if ch == 0 {
            r as f64 / h as f64
        } else {
            q as f64 / w as f64
        }
    });
    let coords = tape.constant(coords);
    let pe = tape.conv(coords, &p.pos_embed, store)?;
    let query = tape.add(query, pe)?;
    let off = tape.conv(query, &p.offsets, store)?;
    let off = p.untie(tape, off, 2, k)?;
    let logits = tape.conv(query, &p.logits, store)?;
    let logits = p.untie(tape, logits, 1, k)?;
    let weights = tape.softmax_groups(logits, k * p.points)?;
    let agg = tape.deform_aggregate(collabs, off, weights, pos.clone(), p.heads, p.points)?;
    let out = tape.conv(agg, &p.out_proj, store)?;
    let output = tape.fill(ego, out, pos)?;
    Ok(DcmTrace {
        output,
        weights: Some(weights),
    })
}

pub fn deformable_cross_attention(
    ego: &FeatureGrid,
    collabs: &[FeatureGrid],
    refs: &ReferencePointSet,
    p: &DcmParams,
    store: &ParamStore,
) -> Result<FeatureGrid> {
    let mut t = Tape::new();
    let e = t.constant(ego.clone());
    let ks: Vec<Var> = collabs.iter().map(|g| t.constant(g.clone())).collect();
    let out = dcm_t(&mut t, store, p, e, &ks, refs)?.output;
    Ok(t.value(out).clone())
}

/// Softmax attention weights `(A·K·M, N, 1)`; `None` when attention is bypassed.
pub fn dcm_attention_weights(
    ego: &FeatureGrid,
    collabs: &[FeatureGrid],
    refs: &ReferencePointSet,
    p: &DcmParams,
    store: &ParamStore,
) -> Result<Option<FeatureGrid>> {
    let mut t = Tape::new();
    let e = t.constant(ego.clone());
    let ks: Vec<Var> = collabs.iter().map(|g| t.constant(g.clone())).collect();
    let tr = dcm_t(&mut t, store, p, e, &ks, refs)?;
    Ok(tr.weights.map(|v| t.value(v).clone()))
}

/// Upsample coarser levels to level 1, stack and mix with a 1×1 conv.
pub fn fuse_scales_t(tape: &mut Tape, store: &ParamStore, levels: &[Var], fuse: &Conv) -> Result<Var> {
    let first = *levels.first().ok_or_else(|| shape_err!("no levels to fuse"))?;
    let (_, h, w) = tape.shape(first);
    let mut ups = vec![first];
    for &l in &levels[1..] {
        ups.push(tape.resize(l, h, w)?);
    }
    let stacked = tape.concat(&ups)?;
    tape.conv(stacked, fuse, store)
}

pub fn fuse_scales(levels: &[FeatureGrid], fuse: &Conv, store: &ParamStore) -> Result<FeatureGrid> {
    let mut t = Tape::new();
    let vs: Vec<Var> = levels.iter().map(|g| t.constant(g.clone())).collect();
    let out = fuse_scales_t(&mut t, store, &vs, fuse)?;
    Ok(t.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub enum LevelFusion {
    Attention(DcmParams),
    /// `[ego, mean(collaborators)]` → C.
    Pointwise(Conv),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CccParams {
    pub config: CccConfig,
    /// Stride-2 convs producing levels 2..S.
    pub down: Vec<Conv>,
    pub levels: Vec<LevelFusion>,
    pub fuse: Conv,
}

impl CccParams {
    pub fn new(store: &mut ParamStore, name: &str, config: CccConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.scales == 0 || config.channels == 0 {
            return Err(Error::Config(format!("invalid collaboration config {config:?}")));
        }
        let c = config.channels;
        let down = (2..=config.scales)
            .map(|l| Conv::xavier(store, &format!("{name}.down{l}"), ConvGeom::new(c, c, 3, 2, 1), rng))
            .collect();
        let levels = (1..=config.scales)
            .map(|l| {
                let lname = format!("{name}.l{l}");
                Ok(if config.dcm {
                    LevelFusion::Attention(DcmParams::new(
                        store,
                        &format!("{lname}.dcm"),
                        c,
                        config.heads,
                        config.points,
                        config.agents,
                        config.tied,
                        rng,
                    )?)
                } else {
                    LevelFusion::Pointwise(Conv::xavier(store, &format!("{lname}.mix"), ConvGeom::same(c, 2 * c, 1), rng))
                })
            })
            .collect::<Result<_>>()?;
        let fuse = Conv::xavier(store, &format!("{name}.fuse"), ConvGeom::same(c, config.scales * c, 1), rng);
        Ok(Self {
            config,
            down,
            levels,
            fuse,
        })
    }
}

/// Feature pyramid on the tape; collaborator levels are re-masked so cells
/// that were never sent stay exactly zero.
pub fn feature_pyramid_t(
    tape: &mut Tape,
    store: &ParamStore,
    p: &CccParams,
    x: Var,
    masks: Option<&[SpatialMap]>,
) -> Result<Vec<Var>> {
    let (_, h, w) = tape.shape(x);
    if p.config.scales > 1 && (h < 4 || w < 4) {
        return Err(shape_err!("pyramid needs at least 4×4 cells, got {h}×{w}"));
    }
    let mut out = vec![x];
    for (l, conv) in p.down.iter().enumerate() {
        let prev = *out.last().expect("non-empty");
        let mut y = tape.conv(prev, conv, store)?;
        if let Some(ms) = masks {
            let m = tape.constant(ms[l + 1].to_grid());
            y = tape.broadcast_mul(m, y)?;
        }
        out.push(y);
    }
    Ok(out)
}

pub fn build_pyramid(
    grid: &FeatureGrid,
    conf: &ConfidenceMap,
    p: &CccParams,
    store: &ParamStore,
) -> Result<ScalePyramid> {
    let mut t = Tape::new();
    let x = t.constant(grid.clone());
    let levels = feature_pyramid_t(&mut t, store, p, x, None)?;
    Ok(ScalePyramid {
        features: levels.iter().map(|&v| t.value(v).clone()).collect(),
        confidence: confidence_pyramid(conf, p.config.scales),
    })
}

/// What the ego holds about one collaborator: masked features, mask, masked confidence.
#[derive(Clone, Copy)]
pub struct CollaboratorInput<'a> {
    pub features: Var,
    pub mask: &'a SelectionMask,
    pub confidence: &'a ConfidenceMap,
}

#[derive(Clone, Debug, Default)]
pub struct CccTrace {
    pub reference_points: Vec<ReferencePointSet>,
    /// Per level, the attention weights when attention ran.
    pub attention: Vec<Option<Var>>,
}

/// Collaboration feature `Z_i^(t)`; the ego feature passes through without collaborators.
pub fn collaborate_t(
    tape: &mut Tape,
    store: &ParamStore,
    p: &CccParams,
    ego: Var,
    ego_conf: &ConfidenceMap,
    collabs: &[CollaboratorInput<'_>],
) -> Result<(Var, CccTrace)> {
    if collabs.is_empty() {
        return Ok((ego, CccTrace::default()));
    }
    let s = p.config.scales;
    let ego_levels = feature_pyramid_t(tape, store, p, ego, None)?;
    let mut conf_levels = vec![confidence_pyramid(ego_conf, s)];
    let mut collab_levels = Vec::with_capacity(collabs.len());
    for c in collabs {
        let masks = confidence_pyramid(&c.mask.to_map(), s);
        collab_levels.push(feature_pyramid_t(tape, store, p, c.features, Some(&masks))?);
        let masked_conf = SpatialMap::new(
            c.confidence.height(),
            c.confidence.width(),
            c.confidence
                .data()
                .iter()
                .zip(c.mask.bits())
                .map(|(&v, &b)| if b { v } else { 0.0 })
                .collect(),
        )?;
        conf_levels.push(confidence_pyramid(&masked_conf, s));
    }
    let mut trace = CccTrace::default();
    let mut fused = Vec::with_capacity(s);
    for l in 0..s {
        let ks: Vec<Var> = collab_levels.iter().map(|lv| lv[l]).collect();
        let (_, h, w) = tape.shape(ego_levels[l]);
        let refs = if p.config.rpp {
            let maps: Vec<ConfidenceMap> = conf_levels.iter().map(|c| c[l].clone()).collect();
            propose_reference_points(&maps, p.config.threshold)?
        } else {
            ReferencePointSet::all(h, w)
        };
        let z = match &p.levels[l] {
            LevelFusion::Attention(d) => {
                let tr = dcm_t(tape, store, d, ego_levels[l], &ks, &refs)?;
                trace.attention.push(tr.weights);
                tr.output
            }
            LevelFusion::Pointwise(conv) => {
                let sum = tape.add_all(&ks)?;
                let mean = tape.affine(sum, 1.0 / ks.len() as f64, 0.0);
                let x = tape.concat(&[ego_levels[l], mean])?;
                trace.attention.push(None);
                tape.conv(x, conv, store)?
            }
        };
        trace.reference_points.push(refs);
        fused.push(z);
    }
    Ok((fuse_scales_t(tape, store, &fused, &p.fuse)?, trace))
}
