//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use coperception::gridcore::{ConvParams, FeatureGrid};
use coperception::rng::keyed;

pub fn grid(c: usize, h: usize, w: usize, key: u64) -> FeatureGrid {
    FeatureGrid::random(c, h, w, -1.0, 1.0, &mut keyed(1234, &[key]))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Direct nested-loop cross-correlation with zero padding.
pub fn naive_conv(g: &FeatureGrid, p: &ConvParams) -> FeatureGrid {
    let geo = p.geom;
    let (h, w) = (g.height() as i64, g.width() as i64);
    let (s, pad) = (geo.stride as i64, geo.padding as i64);
    let oh = (h + 2 * pad - geo.kernel_h as i64) / s + 1;
    let ow = (w + 2 * pad - geo.kernel_w as i64) / s + 1;
    FeatureGrid::from_fn(geo.out_channels, oh as usize, ow as usize, |o, y, x| {
        let mut acc = p.bias[o];
        for i in 0..geo.in_channels {
            for ky in 0..geo.kernel_h {
                for kx in 0..geo.kernel_w {
                    let iy = y as i64 * s + ky as i64 - pad;
                    let ix = x as i64 * s + kx as i64 - pad;
                    if iy >= 0 && ix >= 0 && iy < h && ix < w {
                        acc += p.w(o, i, ky, kx) * g.get(i, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Channel mean and max planes.
pub fn avg_max(g: &FeatureGrid) -> (FeatureGrid, FeatureGrid) {
    let c = g.channels();
    let avg = FeatureGrid::from_fn(1, g.height(), g.width(), |_, y, x| {
        (0..c).map(|k| g.get(k, y, x)).sum::<f64>() / c as f64
    });
    let max = FeatureGrid::from_fn(1, g.height(), g.width(), |_, y, x| {
        (0..c).map(|k| g.get(k, y, x)).fold(f64::NEG_INFINITY, f64::max)
    });
    (avg, max)
}

/// Half-pixel bilinear resize, written per output pixel.
pub fn naive_resize(g: &FeatureGrid, nh: usize, nw: usize) -> FeatureGrid {
    let (h, w) = (g.height(), g.width());
    let src = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    FeatureGrid::from_fn(g.channels(), nh, nw, |c, y, x| {
        let (y0, y1, fy) = src(y, h, nh);
        let (x0, x1, fx) = src(x, w, nw);
        (1.0 - fy) * ((1.0 - fx) * g.get(c, y0, x0) + fx * g.get(c, y0, x1))
            + fy * ((1.0 - fx) * g.get(c, y1, x0) + fx * g.get(c, y1, x1))
    })
}
