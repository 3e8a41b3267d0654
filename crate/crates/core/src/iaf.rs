//! Importance-aware fusion of the context, collaboration and current features.
//!
//! A generator scores every source, the scores are softmax-normalised across
//! sources at each cell, and the fused map is the per-cell weighted sum.
//! Summation, maximum and average fusion are available for comparison.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::gridcore::params::{Conv, ParamStore};
use crate::gridcore::tape::{Tape, Var};
use crate::gridcore::{softmax_stack, ConvGeom, ConvParams, FeatureGrid, PoolMode, SpatialMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    Adaptive,
    Summation,
    Maximum,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IafConfig {
    pub channels: usize,
    pub strategy: FusionStrategy,
    /// One generator per source instead of a shared one.
    pub per_source: bool,
    /// Generator kernel size.
    pub kernel: usize,
}

impl IafConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            strategy: FusionStrategy::Adaptive,
            per_source: false,
            kernel: 3,
        }
    }
}

pub const SOURCES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct IafParams {
    pub config: IafConfig,
    pub generators: Vec<Conv>,
}

impl IafParams {
    pub fn new(store: &mut ParamStore, name: &str, config: IafConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.channels == 0 || config.kernel % 2 == 0 {
            return Err(Error::Config(format!("invalid fusion config {config:?}")));
        }
        let geom = ConvGeom::same(2, config.channels, config.kernel);
        let generators = if config.strategy != FusionStrategy::Adaptive {
            Vec::new()
        } else if config.per_source {
            (0..SOURCES)
                .map(|s| Conv::xavier(store, &format!("{name}.gen{s}"), geom, rng))
                .collect()
        } else {
            vec![Conv::xavier(store, &format!("{name}.gen"), geom, rng)]
        };
        Ok(Self { config, generators })
    }

    fn generator(&self, source: usize) -> &Conv {
        &self.generators[if self.generators.len() == 1 { 0 } else { source }]
    }
}

/// `σ(max_c gen(x))`, shape `(1, H, W)`.
pub fn importance_t(tape: &mut Tape, store: &ParamStore, gen: &Conv, x: Var) -> Result<Var> {
    let z = tape.conv(x, gen, store)?;
    let m = tape.pool(z, PoolMode::Max)?;
    Ok(tape.sigmoid(m))
}

/// Fused feature and, for adaptive fusion, the normalised attention maps.
pub struct FusionTrace {
    pub output: Var,
    pub importance: Vec<Var>,
    pub attention: Vec<Var>,
}

/// Fuse any number of same-shaped sources; one source passes through.
pub fn fuse_t(tape: &mut Tape, store: &ParamStore, p: &IafParams, sources: &[Var]) -> Result<FusionTrace> {
    let first = *sources.first().ok_or_else(|| shape_err!("nothing to fuse"))?;
    let shape = tape.shape(first);
    if sources.iter().any(|&s| tape.shape(s) != shape) {
        return Err(shape_err!("fusion sources differ in shape"));
    }
    let done = |output| FusionTrace {
        output,
        importance: Vec::new(),
        attention: Vec::new(),
    };
    if sources.len() == 1 {
        return Ok(done(first));
    }
    match p.config.strategy {
        FusionStrategy::Summation => Ok(done(tape.add_all(sources)?)),
        FusionStrategy::Maximum => Ok(done(tape.max_of(sources)?)),
        FusionStrategy::Average => {
            let s = tape.add_all(sources)?;
            Ok(done(tape.affine(s, 1.0 / sources.len() as f64, 0.0)))
        }
        FusionStrategy::Adaptive => {
            if p.generators.len() != 1 && p.generators.len() < sources.len() {
                return Err(shape_err!("{} generators for {} sources", p.generators.len(), sources.len()));
            }
            let importance = sources
                .iter()
                .enumerate()
                .map(|(i, &s)| importance_t(tape, store, p.generator(i), s))
                .collect::<Result<Vec<_>>>()?;
            let stacked = tape.concat(&importance)?;
            let e = tape.softmax_groups(stacked, sources.len())?;
            let mut attention = Vec::with_capacity(sources.len());
            let mut parts = Vec::with_capacity(sources.len());
            for (i, &s) in sources.iter().enumerate() {
                let a = tape.slice(e, i, 1)?;
                parts.push(tape.broadcast_mul(a, s)?);
                attention.push(a);
            }
            Ok(FusionTrace {
                output: tape.add_all(&parts)?,
                importance,
                attention,
            })
        }
    }
}

/// Importance of `h`, `z` and `f` under one shared generator.
pub fn importance_maps(
    h: &FeatureGrid,
    z: &FeatureGrid,
    f: &FeatureGrid,
    gen: &ConvParams,
) -> Result<[SpatialMap; 3]> {
    if !h.same_shape(z) || !h.same_shape(f) {
        return Err(shape_err!("sources {:?}, {:?}, {:?}", h.shape(), z.shape(), f.shape()));
    }
    let mut store = ParamStore::new();
    let conv = Conv::with_values(&mut store, "gen", gen.geom, gen.weight.clone(), gen.bias.clone());
    let mut t = Tape::new();
    let mut out = Vec::with_capacity(3);
    for g in [h, z, f] {
        let x = t.constant(g.clone());
        let m = importance_t(&mut t, &store, &conv, x)?;
        out.push(SpatialMap::from_grid(t.value(m).clone())?);
    }
    Ok(out.try_into().expect("three maps"))
}

/// `Σ softmax(maps)_s ⊙ source_s`, attention broadcast over channels.
pub fn adaptive_fuse(
    h: &FeatureGrid,
    z: &FeatureGrid,
    f: &FeatureGrid,
    maps: &[SpatialMap; 3],
) -> Result<FeatureGrid> {
    if !h.same_shape(z) || !h.same_shape(f) {
        return Err(shape_err!("sources {:?}, {:?}, {:?}", h.shape(), z.shape(), f.shape()));
    }
    if maps.iter().any(|m| m.height() != h.height() || m.width() != h.width()) {
        return Err(shape_err!("importance maps do not match {:?}", h.shape()));
    }
    let e = softmax_stack(maps)?;
    let n = h.plane_len();
    let mut out = FeatureGrid::zeros(h.channels(), h.height(), h.width());
    for c in 0..h.channels() {
        let o = &mut out.data_mut()[c * n..(c + 1) * n];
        for (src, att) in [h, z, f].iter().zip(&e) {
            for ((v, &x), &a) in o.iter_mut().zip(src.channel(c)).zip(att.data()) {
                *v += a * x;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_inputs_give_half() {
        let g = FeatureGrid::zeros(3, 4, 5);
        let gen = ConvParams::zeros(ConvGeom::same(2, 3, 3));
        for m in importance_maps(&g, &g, &g, &gen).unwrap() {
            assert!(m.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let gen = ConvParams::zeros(ConvGeom::same(2, 3, 3));
        let a = FeatureGrid::zeros(3, 4, 5);
        let b = FeatureGrid::zeros(3, 4, 4);
        assert!(importance_maps(&a, &a, &b, &gen).is_err());
    }
}
