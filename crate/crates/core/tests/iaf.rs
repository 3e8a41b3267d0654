mod common;

use common::{grid, naive_conv, sigmoid};
use coperception::gridcore::gradcheck::GradCheck;
use coperception::gridcore::params::ParamStore;
use coperception::gridcore::tape::Tape;
use coperception::gridcore::{ConvGeom, ConvParams, FeatureGrid, SpatialMap};
use coperception::iaf::{adaptive_fuse, fuse_t, importance_maps, FusionStrategy, IafConfig, IafParams};
use coperception::rng::keyed;
use proptest::prelude::*;

fn map(h: usize, w: usize, key: u64, scale: f64) -> SpatialMap {
    SpatialMap::from_grid(grid(1, h, w, key).map(|v| v * scale)).unwrap()
}

fn params(cfg: IafConfig, seed: u64) -> (ParamStore, IafParams) {
    let mut store = ParamStore::new();
    let p = IafParams::new(&mut store, "iaf", cfg, &mut keyed(seed, &[0])).unwrap();
    for (id, t) in store.clone().iter() {
        if t.name.ends_with(".bias") {
            store.get_mut(id).data = vec![0.3, -0.2];
        }
    }
    (store, p)
}

#[test]
fn importance_matches_composition_oracle() {
    let gen = ConvParams::xavier(ConvGeom::same(2, 4, 3), &mut keyed(3, &[1]));
    let srcs = [grid(4, 5, 6, 1), grid(4, 5, 6, 2), grid(4, 5, 6, 3)];
    let maps = importance_maps(&srcs[0], &srcs[1], &srcs[2], &gen).unwrap();
    for (m, s) in maps.iter().zip(&srcs) {
        let z = naive_conv(s, &gen);
        for y in 0..5 {
            for x in 0..6 {
                let expect = sigmoid(z.get(0, y, x).max(z.get(1, y, x)));
                assert!((m.get(y, x) - expect).abs() < 1e-12);
            }
        }
    }
    let same = importance_maps(&srcs[0], &srcs[0], &srcs[0], &gen).unwrap();
    assert_eq!(same[0], same[1]);
    assert_eq!(same[1], same[2]);
}

#[test]
fn equal_maps_average_sources() {
    let (h, z, f) = (grid(3, 4, 4, 4), grid(3, 4, 4, 5), grid(3, 4, 4, 6));
    let m = map(4, 4, 7, 1.0);
    let out = adaptive_fuse(&h, &z, &f, &[m.clone(), m.clone(), m]).unwrap();
    let mean = FeatureGrid::from_fn(3, 4, 4, |c, y, x| (h.get(c, y, x) + z.get(c, y, x) + f.get(c, y, x)) / 3.0);
    assert!(out.max_abs_diff(&mean) < 1e-15);
}

#[test]
fn dominant_map_selects_its_source() {
    let (h, z, f) = (grid(3, 4, 4, 4), grid(3, 4, 4, 5), grid(3, 4, 4, 6));
    let m = map(4, 4, 7, 1.0);
    let big = m.map(|v| v + 100.0);
    let out = adaptive_fuse(&h, &z, &f, &[big, m.clone(), m]).unwrap();
    for (a, b) in out.data().iter().zip(h.data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs());
    }
}

#[test]
fn known_weights_for_one_two_three() {
    let maps = [SpatialMap::filled(1, 1, 1.0), SpatialMap::filled(1, 1, 2.0), SpatialMap::filled(1, 1, 3.0)];
    let (h, z, f) = (
        FeatureGrid::filled(1, 1, 1, 10.0),
        FeatureGrid::filled(1, 1, 1, -4.0),
        FeatureGrid::filled(1, 1, 1, 2.5),
    );
    let out = adaptive_fuse(&h, &z, &f, &maps).unwrap();
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).collect();
    for (got, want) in e.iter().zip([0.09003057, 0.24472847, 0.66524096]) {
        assert!((got - want).abs() < 1e-8);
    }
    let expect = e[0] * 10.0 - e[1] * 4.0 + e[2] * 2.5;
    assert!((out.get(0, 0, 0) - expect).abs() < 1e-12);
}

#[test]
fn adaptive_gradients_match_finite_differences() {
    for per_source in [false, true] {
        let mut cfg = IafConfig::new(3);
        cfg.per_source = per_source;
        let (store, p) = params(cfg, 9);
        let inputs = [grid(3, 6, 6, 10), grid(3, 6, 6, 11), grid(3, 6, 6, 12)];
        let r = GradCheck::new(1e-5)
            .with_params(&store, &inputs, |t, st, v| Ok(fuse_t(t, st, &p, v)?.output))
            .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

#[test]
fn fixed_strategies() {
    let srcs = [grid(2, 3, 3, 20), grid(2, 3, 3, 21), grid(2, 3, 3, 22)];
    for strategy in [FusionStrategy::Summation, FusionStrategy::Maximum, FusionStrategy::Average] {
        let mut cfg = IafConfig::new(2);
        cfg.strategy = strategy;
        let (store, p) = params(cfg, 1);
        assert_eq!(store.len(), 0);
        let mut t = Tape::new();
        let vs: Vec<_> = srcs.iter().map(|g| t.constant(g.clone())).collect();
        let o = fuse_t(&mut t, &store, &p, &vs).unwrap().output;
        let out = t.value(o).clone();
        for i in 0..out.len() {
            let xs = srcs.iter().map(|g| g.data()[i]);
            let expect = match strategy {
                FusionStrategy::Summation => xs.sum::<f64>(),
                FusionStrategy::Maximum => xs.fold(f64::MIN, f64::max),
                _ => xs.sum::<f64>() / 3.0,
            };
            assert!((out.data()[i] - expect).abs() < 1e-12);
        }
        let r = GradCheck::new(1e-6)
            .inputs(&srcs, |t, v| Ok(fuse_t(t, &store, &p, v)?.output))
            .unwrap();
        assert!(r.max_rel_error < 1e-4, "{strategy:?} {r:?}");
    }
}

#[test]
fn single_source_passes_through() {
    let (store, p) = params(IafConfig::new(2), 2);
    let mut t = Tape::new();
    let x = t.constant(grid(2, 3, 3, 1));
    assert_eq!(fuse_t(&mut t, &store, &p, &[x]).unwrap().output, x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn fused_within_convex_hull(seed in 0u64..2000, scale in 0.1..20.0f64) {
        let (h, z, f) = (grid(3, 4, 5, seed), grid(3, 4, 5, seed + 1), grid(3, 4, 5, seed + 2));
        let maps = [map(4, 5, seed + 3, scale), map(4, 5, seed + 4, scale), map(4, 5, seed + 5, scale)];
        let out = adaptive_fuse(&h, &z, &f, &maps).unwrap();
        for i in 0..out.len() {
            let xs = [h.data()[i], z.data()[i], f.data()[i]];
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn shifting_all_maps_changes_nothing(seed in 0u64..2000, shift in -50.0..50.0f64) {
        let (h, z, f) = (grid(3, 4, 5, seed), grid(3, 4, 5, seed + 1), grid(3, 4, 5, seed + 2));
        let maps = [map(4, 5, seed + 3, 2.0), map(4, 5, seed + 4, 2.0), map(4, 5, seed + 5, 2.0)];
        let shifted = maps.clone().map(|m| m.map(|v| v + shift));
        let a = adaptive_fuse(&h, &z, &f, &maps).unwrap();
        let b = adaptive_fuse(&h, &z, &f, &shifted).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn identical_sources_are_fixed_points(seed in 0u64..2000) {
        let h = grid(3, 4, 5, seed);
        let maps = [map(4, 5, seed + 3, 5.0), map(4, 5, seed + 4, 5.0), map(4, 5, seed + 5, 5.0)];
        let out = adaptive_fuse(&h, &h, &h, &maps).unwrap();
        prop_assert!(out.max_abs_diff(&h) < 1e-12);
    }
}
