//! Temporal context aggregation over the ego agent's aligned history.
//!
//! A spatial selection map `U` decides, per cell, how much of each history
//! frame to keep versus the squashed current frame. The filtered frames and
//! the current frame then run oldest-first through a convolutional LSTM whose
//! gates are small feature pyramids; the last hidden state is the output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::gridcore::params::{ChannelNorm, Conv, ParamStore};
use crate::gridcore::tape::{Tape, Var};
use crate::gridcore::{ConvGeom, FeatureGrid, PoolMode, SpatialMap};

/// Previous frames, oldest first, already aligned to the current ego frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemporalBuffer {
    frames: Vec<FeatureGrid>,
}

impl TemporalBuffer {
    pub fn new(frames: Vec<FeatureGrid>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if frames.iter().any(|f| !f.same_shape(first)) {
                return Err(shape_err!("history frames differ in shape"));
            }
        }
        Ok(Self { frames })
    }

    pub fn tau(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[FeatureGrid] {
        &self.frames
    }

    /// `Σ_n F^(t−n)`.
    pub fn history_sum(&self) -> Option<FeatureGrid> {
        let mut it = self.frames.iter();
        let mut acc = it.next()?.clone();
        for f in it {
            for (a, b) in acc.data_mut().iter_mut().zip(f.data()) {
                *a += b;
            }
        }
        Some(acc)
    }
}

/// How the pooled current and history descriptors enter the selection conv.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionFusion {
    /// `ℵ(M_t + M_τ)` with a 2→1 conv.
    #[default]
    Sum,
    /// `ℵ(M_t ‖ M_τ)` with a 4→1 conv.
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiaConfig {
    pub channels: usize,
    /// Pyramid levels per gate; 1 gives a plain ConvLSTM.
    pub scales: usize,
    /// Kernel of the full-resolution gate conv.
    pub gate_kernel: usize,
    pub selection: SelectionFusion,
    /// When false, a 1×1 conv over all stacked frames replaces the LSTM.
    pub pyramid_lstm: bool,
    /// When false, raw history frames skip the selection filter.
    pub selective_filter: bool,
    pub tau: usize,
}

impl CiaConfig {
    pub fn new(channels: usize, tau: usize) -> Self {
        Self {
            channels,
            scales: 3,
            gate_kernel: 3,
            selection: SelectionFusion::Sum,
            pyramid_lstm: true,
            selective_filter: true,
            tau,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DownBlock {
    conv1: Conv,
    norm1: ChannelNorm,
    conv2: Conv,
    norm2: ChannelNorm,
}

/// One gate's multi-scale stack: a full-resolution conv, stride-2 blocks for
/// coarser levels and 1×1 laterals that carry coarse context back up.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidGate {
    base: Conv,
    down: Vec<DownBlock>,
    lateral: Vec<Conv>,
}

impl PyramidGate {
    fn new(store: &mut ParamStore, name: &str, cfg: &CiaConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let base = Conv::xavier(store, &format!("{name}.base"), ConvGeom::same(c, 2 * c, cfg.gate_kernel), rng);
        let down = (2..=cfg.scales)
            .map(|l| DownBlock {
                conv1: Conv::xavier(store, &format!("{name}.l{l}.conv1"), ConvGeom::new(c, c, 3, 2, 1), rng),
                norm1: ChannelNorm::identity(store, &format!("{name}.l{l}.norm1"), c),
                conv2: Conv::xavier(store, &format!("{name}.l{l}.conv2"), ConvGeom::same(c, c, 3), rng),
                norm2: ChannelNorm::identity(store, &format!("{name}.l{l}.norm2"), c),
            })
            .collect();
        let lateral = (1..cfg.scales)
            .map(|l| Conv::xavier(store, &format!("{name}.lateral{l}"), ConvGeom::same(c, c, 1), rng))
            .collect();
        Self { base, down, lateral }
    }

    /// Gate pre-activation at full resolution.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut levels = vec![tape.conv(x, &self.base, store)?];
        for b in &self.down {
            let prev = *levels.last().expect("non-empty");
            let a = tape.conv(prev, &b.conv1, store)?;
            let a = tape.norm(a, &b.norm1, store)?;
            let a = tape.relu(a);
            let a = tape.conv(a, &b.conv2, store)?;
            let a = tape.norm(a, &b.norm2, store)?;
            levels.push(tape.relu(a));
        }
        let mut p = *levels.last().expect("non-empty");
        for l in (0..levels.len() - 1).rev() {
            let (_, h, w) = tape.shape(levels[l]);
            let up = tape.resize(p, h, w)?;
            let lat = tape.conv(up, &self.lateral[l], store)?;
            p = tape.add(levels[l], lat)?;
        }
        Ok(p)
    }

    pub fn base(&self) -> &Conv {
        &self.base
    }
}

/// Gates in `[input, forget, output, candidate]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLstm {
    pub channels: usize,
    pub gates: [PyramidGate; 4],
}

pub const GATE_NAMES: [&str; 4] = ["input", "forget", "output", "candidate"];

impl PyramidLstm {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &CiaConfig, rng: &mut impl Rng) -> Self {
        let gates = GATE_NAMES.map(|g| PyramidGate::new(store, &format!("{name}.{g}"), cfg, rng));
        Self {
            channels: cfg.channels,
            gates,
        }
    }

    /// One recurrence step; returns `(h', c')`.
    pub fn cell(&self, tape: &mut Tape, store: &ParamStore, state: (Var, Var), input: Var) -> Result<(Var, Var)> {
        let (h, c) = state;
        if tape.shape(h) != tape.shape(input) || tape.shape(c) != tape.shape(input) {
            return Err(shape_err!(
                "lstm state {:?}/{:?} vs input {:?}",
                tape.shape(h),
                tape.shape(c),
                tape.shape(input)
            ));
        }
        let x = tape.concat(&[input, h])?;
        let pre: Vec<Var> = self
            .gates
            .iter()
            .map(|g| g.forward(tape, store, x))
            .collect::<Result<_>>()?;
        let i = tape.sigmoid(pre[0]);
        let f = tape.sigmoid(pre[1]);
        let o = tape.sigmoid(pre[2]);
        let g = tape.tanh(pre[3]);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c2 = tape.add(fc, ig)?;
        let tc = tape.tanh(c2);
        let h2 = tape.mul(o, tc)?;
        Ok((h2, c2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiaParams {
    pub config: CiaConfig,
    /// Selection fusion conv `ℵ`.
    pub aleph: Conv,
    pub lstm: PyramidLstm,
    /// Replacement for the LSTM when `pyramid_lstm` is off.
    pub flat: Option<Conv>,
}

impl CiaParams {
    pub fn new(store: &mut ParamStore, name: &str, config: CiaConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.scales == 0 || config.channels == 0 || config.gate_kernel % 2 == 0 {
            return Err(Error::Config(format!("invalid context aggregation config {config:?}")));
        }
        let sel_in = match config.selection {
            SelectionFusion::Sum => 2,
            SelectionFusion::Concat => 4,
        };
        let aleph = Conv::xavier(store, &format!("{name}.aleph"), ConvGeom::same(1, sel_in, 3), rng);
        let lstm = PyramidLstm::new(store, &format!("{name}.lstm"), &config, rng);
        let flat = (!config.pyramid_lstm).then(|| {
            let c = config.channels;
            Conv::xavier(store, &format!("{name}.flat"), ConvGeom::same(c, (config.tau + 1) * c, 1), rng)
        });
        Ok(Self {
            config,
            aleph,
            lstm,
            flat,
        })
    }
}

fn pooled_pair(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    Ok((tape.pool(x, PoolMode::Avg)?, tape.pool(x, PoolMode::Max)?))
}

/// `U = σ(ℵ(pool(F_t) + pool(Σ history)))` as a `(1, H, W)` value.
pub fn selection_map_t(tape: &mut Tape, store: &ParamStore, p: &CiaParams, current: Var, history: &[Var]) -> Result<Var> {
    if history.is_empty() {
        return Err(Error::Precondition("selection map needs at least one history frame".into()));
    }
    for &h in history {
        if tape.shape(h) != tape.shape(current) {
            return Err(shape_err!("history {:?} vs current {:?}", tape.shape(h), tape.shape(current)));
        }
    }
    let sum = tape.add_all(history)?;
    let (ca, cm) = pooled_pair(tape, current)?;
    let (ha, hm) = pooled_pair(tape, sum)?;
    let x = match p.config.selection {
        SelectionFusion::Sum => {
            let a = tape.concat(&[ca, cm])?;
            let b = tape.concat(&[ha, hm])?;
            tape.add(a, b)?
        }
        SelectionFusion::Concat => tape.concat(&[ca, cm, ha, hm])?,
    };
    let z = tape.conv(x, &p.aleph, store)?;
    Ok(tape.sigmoid(z))
}

/// `H_n = (1 − U) ⊙ tanh(F_t) + U ⊙ F_{t−n}` for every history frame.
pub fn filter_history_t(tape: &mut Tape, current: Var, history: &[Var], u: Var) -> Result<Vec<Var>> {
    let keep = tape.affine(u, -1.0, 1.0);
    let squashed = tape.tanh(current);
    let fresh = tape.broadcast_mul(keep, squashed)?;
    history
        .iter()
        .map(|&h| {
            let old = tape.broadcast_mul(u, h)?;
            tape.add(fresh, old)
        })
        .collect()
}

/// Context-aware feature `H_i^(t)`; the current frame passes through when there is no history.
pub fn aggregate_context_t(tape: &mut Tape, store: &ParamStore, p: &CiaParams, current: Var, history: &[Var]) -> Result<Var> {
    if history.is_empty() {
        return Ok(current);
    }
    let filtered = if p.config.selective_filter {
        let u = selection_map_t(tape, store, p, current, history)?;
        filter_history_t(tape, current, history, u)?
    } else {
        history.to_vec()
    };
    let mut seq = filtered;
    seq.push(current);
    if let Some(flat) = &p.flat {
        if seq.len() != p.config.tau + 1 {
            return Err(shape_err!("flat aggregation built for τ = {}, got {}", p.config.tau, seq.len() - 1));
        }
        let stacked = tape.concat(&seq)?;
        return tape.conv(stacked, flat, store);
    }
    let (c, h, w) = tape.shape(current);
    let zero = tape.constant(FeatureGrid::zeros(c, h, w));
    let mut state = (zero, zero);
    for x in seq {
        state = p.lstm.cell(tape, store, state, x)?;
    }
    Ok(state.0)
}

fn with_buffer<T>(
    current: &FeatureGrid,
    buffer: &TemporalBuffer,
    run: impl FnOnce(&mut Tape, Var, Vec<Var>) -> Result<T>,
) -> Result<T> {
    let mut tape = Tape::new();
    let cur = tape.constant(current.clone());
    let hist = buffer.frames().iter().map(|f| tape.constant(f.clone())).collect();
    run(&mut tape, cur, hist)
}

pub fn selection_map(current: &FeatureGrid, buffer: &TemporalBuffer, p: &CiaParams, store: &ParamStore) -> Result<SpatialMap> {
    with_buffer(current, buffer, |t, cur, hist| {
        let u = selection_map_t(t, store, p, cur, &hist)?;
        SpatialMap::from_grid(t.value(u).clone())
    })
}

pub fn filter_history(current: &FeatureGrid, buffer: &TemporalBuffer, u: &SpatialMap) -> Result<Vec<FeatureGrid>> {
    with_buffer(current, buffer, |t, cur, hist| {
        let uv = t.constant(u.to_grid());
        let out = filter_history_t(t, cur, &hist, uv)?;
        Ok(out.iter().map(|&v| t.value(v).clone()).collect())
    })
}

pub fn pyramid_lstm_cell(
    state: (&FeatureGrid, &FeatureGrid),
    input: &FeatureGrid,
    lstm: &PyramidLstm,
    store: &ParamStore,
) -> Result<(FeatureGrid, FeatureGrid)> {
    let mut t = Tape::new();
    let h = t.constant(state.0.clone());
    let c = t.constant(state.1.clone());
    let x = t.constant(input.clone());
    let (h2, c2) = lstm.cell(&mut t, store, (h, c), x)?;
    Ok((t.value(h2).clone(), t.value(c2).clone()))
}

pub fn aggregate_context(current: &FeatureGrid, buffer: &TemporalBuffer, p: &CiaParams, store: &ParamStore) -> Result<FeatureGrid> {
    with_buffer(current, buffer, |t, cur, hist| {
        let out = aggregate_context_t(t, store, p, cur, &hist)?;
        Ok(t.value(out).clone())
    })
}
