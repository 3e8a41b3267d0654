//! Seeded finite-difference checks of every differentiable op, shared by the
//! `gradcheck` command and the acceptance run.

use std::rc::Rc;

use crate::ccc::{dcm_t, DcmParams, ReferencePointSet};
use crate::cia::{CiaConfig, PyramidLstm};
use crate::error::Result;
use crate::gridcore::gradcheck::{CheckReport, GradCheck};
use crate::gridcore::params::{Conv, ParamStore};
use crate::gridcore::tape::{Tape, Var};
use crate::gridcore::{Activation, ConvGeom, FeatureGrid, PoolMode};
use crate::iaf::{fuse_t, IafConfig, IafParams};
use crate::rng::{domain, keyed};

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub report: CheckReport,
}

fn grid(seed: u64, c: usize, h: usize, w: usize, key: u64) -> FeatureGrid {
    FeatureGrid::random(c, h, w, -1.0, 1.0, &mut keyed(seed, &[domain::TEST, key]))
}

/// Random projection so outputs with a constant sum still carry gradient.
fn weighted(t: &mut Tape, y: Var, seed: u64, key: u64) -> Result<Var> {
    let (c, h, w) = t.shape(y);
    let k = t.constant(grid(seed, c, h, w, key));
    t.mul(y, k)
}

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    for (id, t) in store.clone().iter() {
        let mut rng = keyed(seed, &[domain::TEST, 1000 + id.0 as u64]);
        store.get_mut(id).data = FeatureGrid::random(t.data.len(), 1, 1, -scale, scale, &mut rng).into_data();
    }
}

fn randomize_biases(store: &mut ParamStore, seed: u64, scale: f64) {
    for (id, t) in store.clone().iter() {
        if t.name.ends_with(".bias") {
            let mut rng = keyed(seed, &[domain::TEST, 1000 + id.0 as u64]);
            store.get_mut(id).data = FeatureGrid::random(t.data.len(), 1, 1, -scale, scale, &mut rng).into_data();
        }
    }
}

/// Runs every check at step `eps`; the caller decides the tolerance.
pub fn gradient_suite(eps: f64, seed: u64) -> Result<Vec<OpCheck>> {
    let gc = GradCheck::new(eps);
    let mut out = Vec::new();
    let mut push = |name: &str, report: CheckReport| {
        out.push(OpCheck {
            name: name.to_string(),
            report,
        })
    };

    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
        let mut store = ParamStore::new();
        let conv = Conv::xavier(&mut store, "conv", ConvGeom::new(3, 2, k, s, p), &mut keyed(seed, &[domain::TEST, 1]));
        randomize(&mut store, seed, 0.5);
        let r = gc.with_params(&store, &[grid(seed, 2, 5, 6, 2)], |t, st, v| t.conv(v[0], &conv, st))?;
        push(&format!("conv2d k{k} s{s} p{p}"), r);
    }
    for (mode, name) in [(PoolMode::Avg, "pool avg"), (PoolMode::Max, "pool max")] {
        let r = gc.inputs(&[grid(seed, 4, 3, 3, 3)], |t, v| {
            let y = t.pool(v[0], mode)?;
            weighted(t, y, seed, 30)
        })?;
        push(name, r);
    }
    for (kind, name) in [
        (Activation::Sigmoid, "activate sigmoid"),
        (Activation::Tanh, "activate tanh"),
        (Activation::Relu, "activate relu"),
    ] {
        let r = gc.inputs(&[grid(seed, 2, 4, 4, 4)], |t, v| {
            let y = t.act(v[0], kind);
            weighted(t, y, seed, 31)
        })?;
        push(name, r);
    }
    for (h, w) in [(8, 6), (2, 3)] {
        let r = gc.inputs(&[grid(seed, 2, 4, 3, 5)], |t, v| {
            let y = t.resize(v[0], h, w)?;
            weighted(t, y, seed, 32)
        })?;
        push(&format!("resize to {h}x{w}"), r);
    }
    let r = gc.inputs(&[grid(seed, 6, 3, 3, 6)], |t, v| {
        let y = t.softmax_groups(v[0], 3)?;
        weighted(t, y, seed, 33)
    })?;
    push("softmax_stack", r);

    // Bilinear sampling through the deformable aggregation; offsets sit a
    // quarter cell off the integer grid where the interpolant has kinks.
    let (heads, points) = (2, 3);
    let pos = Rc::new(vec![(0, 0), (2, 3), (4, 1)]);
    let samples = heads * 2 * points;
    let offsets = FeatureGrid::from_fn(samples * 2, pos.len(), 1, |i, n, _| {
        ((i * 7 + n * 3) % 11) as f64 * 0.3 - 1.5 + 0.25
    });
    let weights = FeatureGrid::random(samples, pos.len(), 1, 0.0, 1.0, &mut keyed(seed, &[domain::TEST, 7]));
    let inputs = [grid(seed, 3, 5, 5, 8), grid(seed, 3, 5, 5, 9), offsets, weights];
    let r = gc.inputs(&inputs, |t, v| {
        let y = t.deform_aggregate(&[v[0], v[1]], v[2], v[3], pos.clone(), heads, points)?;
        weighted(t, y, seed, 34)
    })?;
    push("sample_bilinear", r);

    let mut store = ParamStore::new();
    let lstm = PyramidLstm::new(&mut store, "lstm", &CiaConfig::new(3, 2), &mut keyed(seed, &[domain::TEST, 10]));
    // Initialised weights and norms; random biases only. Shrinking every
    // tensor leaves the coarse levels with gradients near round-off.
    randomize_biases(&mut store, seed, 0.2);
    let inputs = [grid(seed, 3, 8, 8, 11), grid(seed, 3, 8, 8, 12), grid(seed, 3, 8, 8, 13)];
    let r = gc.with_params(&store, &inputs, |t, st, v| {
        let (h, c) = lstm.cell(t, st, (v[0], v[1]), v[2])?;
        t.add(h, c)
    })?;
    push("pyramid_lstm_cell", r);

    let mut store = ParamStore::new();
    let dcm = DcmParams::new(&mut store, "dcm", 3, 2, 2, 2, false, &mut keyed(seed, &[domain::TEST, 14]))?;
    randomize(&mut store, seed, 0.6);
    let w = &mut store.get_mut(dcm.offsets.weight).data;
    w.iter_mut().for_each(|v| *v *= 0.01);
    store.get_mut(dcm.offsets.bias).data.iter_mut().for_each(|v| *v = 0.25);
    let refs = ReferencePointSet {
        height: 5,
        width: 5,
        positions: vec![(0, 0), (1, 3), (4, 4), (2, 2)],
    };
    let inputs = [grid(seed, 3, 5, 5, 15), grid(seed, 3, 5, 5, 16), grid(seed, 3, 5, 5, 17)];
    let r = gc.with_params(&store, &inputs, |t, st, v| Ok(dcm_t(t, st, &dcm, v[0], &v[1..], &refs)?.output))?;
    push("deformable cross-attention", r);

    for per_source in [false, true] {
        let mut store = ParamStore::new();
        let mut cfg = IafConfig::new(3);
        cfg.per_source = per_source;
        let p = IafParams::new(&mut store, "iaf", cfg, &mut keyed(seed, &[domain::TEST, 18]))?;
        randomize(&mut store, seed, 0.5);
        let inputs = [grid(seed, 3, 6, 6, 19), grid(seed, 3, 6, 6, 20), grid(seed, 3, 6, 6, 21)];
        let r = gc.with_params(&store, &inputs, |t, st, v| Ok(fuse_t(t, st, &p, v)?.output))?;
        push(if per_source { "adaptive fusion (per-source)" } else { "adaptive fusion" }, r);
    }

    let target = Rc::new(grid(seed, 3, 4, 4, 22).map(|v| 2.0 * v));
    let mask = Rc::new((0..16).map(|i| i % 3 != 0).collect::<Vec<_>>());
    let r = gc.inputs(&[grid(seed, 3, 4, 4, 23)], |t, v| t.smooth_l1(v[0], target.clone(), mask.clone(), 1.0 / 9.0))?;
    push("smooth_l1", r);
    let labels = Rc::new((0..16).map(|i| i % 5 == 0).collect::<Vec<_>>());
    let r = gc.inputs(&[grid(seed, 2, 4, 4, 24).map(|v| 3.0 * v)], |t, v| t.focal(v[0], labels.clone(), 0.25, 2.0))?;
    push("focal", r);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let checks = gradient_suite(1e-5, 3).unwrap();
        assert!(checks.len() >= 15);
        for c in &checks {
            assert!(c.report.max_rel_error < 1e-4, "{}: {:?}", c.name, c.report);
            assert!(c.report.coordinates > 0, "{}", c.name);
        }
    }
}
