//! Pure grid operations and the raw kernels the tape reuses for its adjoints.

use super::{Activation, ConvGeom, ConvParams, FeatureGrid, PoolMode, SpatialMap};
use crate::error::{shape_err, Result};

/// Channel-wise average or max pooling to an `H×W` map.
pub fn pool_channels(grid: &FeatureGrid, mode: PoolMode) -> Result<SpatialMap> {
    if grid.channels() == 0 || grid.plane_len() == 0 {
        return Err(shape_err!("pool_channels on empty grid {:?}", grid.shape()));
    }
    let (out, _) = pool_forward(grid, mode);
    SpatialMap::new(grid.height(), grid.width(), out)
}

/// Returns pooled values and, for max pooling, the winning channel per cell.
pub(crate) fn pool_forward(grid: &FeatureGrid, mode: PoolMode) -> (Vec<f64>, Vec<usize>) {
    let n = grid.plane_len();
    let c = grid.channels();
    match mode {
        PoolMode::Avg => {
            let mut out = vec![0.0; n];
            for ch in 0..c {
                for (o, &v) in out.iter_mut().zip(grid.channel(ch)) {
                    *o += v;
                }
            }
            let inv = 1.0 / c as f64;
            out.iter_mut().for_each(|o| *o *= inv);
            (out, Vec::new())
        }
        PoolMode::Max => {
            let mut out = grid.channel(0).to_vec();
            let mut arg = vec![0usize; n];
            for ch in 1..c {
                for (i, &v) in grid.channel(ch).iter().enumerate() {
                    if v > out[i] {
                        out[i] = v;
                        arg[i] = ch;
                    }
                }
            }
            (out, arg)
        }
    }
}

pub fn activate(grid: &FeatureGrid, kind: Activation) -> FeatureGrid {
    grid.map(|x| kind.apply(x))
}

pub fn activate_map(map: &SpatialMap, kind: Activation) -> SpatialMap {
    map.map(|x| kind.apply(x))
}

/// Cross-correlation with zero padding plus bias.
pub fn conv2d(grid: &FeatureGrid, p: &ConvParams) -> Result<FeatureGrid> {
    if grid.channels() != p.geom.in_channels {
        return Err(shape_err!(
            "conv2d expects {} input channels, got {}",
            p.geom.in_channels,
            grid.channels()
        ));
    }
    conv_forward(grid, &p.geom, &p.weight, &p.bias)
}

/// Valid output index range `[lo, hi)` along one axis for kernel tap `k`.
#[inline]
fn tap_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // in = o*stride + k - pad must satisfy 0 <= in < in_len
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv_forward(
    input: &FeatureGrid,
    g: &ConvGeom,
    weight: &[f64],
    bias: &[f64],
) -> Result<FeatureGrid> {
    if input.channels() != g.in_channels {
        return Err(shape_err!(
            "conv expects {} input channels, got {}",
            g.in_channels,
            input.channels()
        ));
    }
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = g.output_dims(h, w)?;
    let mut out = FeatureGrid::zeros(g.out_channels, oh, ow);
    let (s, pad) = (g.stride, g.padding);
    let inp = input.data();
    for oc in 0..g.out_channels {
        let plane = out.channel_mut(oc);
        plane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..g.in_channels {
            let in_plane = &inp[ic * h * w..(ic + 1) * h * w];
            for ky in 0..g.kernel_h {
                let (oy_lo, oy_hi) = tap_range(ky, pad, s, h, oh);
                for kx in 0..g.kernel_w {
                    let wv = weight[((oc * g.in_channels + ic) * g.kernel_h + ky) * g.kernel_w + kx];
                    let (ox_lo, ox_hi) = tap_range(kx, pad, s, w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - pad;
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        let out_row = &mut plane[oy * ow + ox_lo..oy * ow + ox_hi];
                        if s == 1 {
                            let ix0 = ox_lo + kx - pad;
                            for (o, &x) in out_row.iter_mut().zip(&in_row[ix0..ix0 + (ox_hi - ox_lo)]) {
                                *o += wv * x;
                            }
                        } else {
                            for (j, o) in out_row.iter_mut().enumerate() {
                                *o += wv * in_row[(ox_lo + j) * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution w.r.t. input, weight and bias.
pub(crate) fn conv_backward(
    input: &FeatureGrid,
    g: &ConvGeom,
    weight: &[f64],
    dout: &FeatureGrid,
) -> (FeatureGrid, Vec<f64>, Vec<f64>) {
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = (dout.height(), dout.width());
    let (s, pad) = (g.stride, g.padding);
    let mut din = FeatureGrid::zeros(g.in_channels, h, w);
    let mut dw = vec![0.0; g.weight_len()];
    let mut db = vec![0.0; g.out_channels];
    let inp = input.data();
    for oc in 0..g.out_channels {
        let dplane = dout.channel(oc);
        db[oc] = dplane.iter().sum();
        for ic in 0..g.in_channels {
            let in_plane = &inp[ic * h * w..(ic + 1) * h * w];
            let din_plane = &mut din.data_mut()[ic * h * w..(ic + 1) * h * w];
            for ky in 0..g.kernel_h {
                let (oy_lo, oy_hi) = tap_range(ky, pad, s, h, oh);
                for kx in 0..g.kernel_w {
                    let widx = ((oc * g.in_channels + ic) * g.kernel_h + ky) * g.kernel_w + kx;
                    let wv = weight[widx];
                    let (ox_lo, ox_hi) = tap_range(kx, pad, s, w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - pad;
                        let drow = &dplane[oy * ow + ox_lo..oy * ow + ox_hi];
                        if s == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let n = ox_hi - ox_lo;
                            let in_row = &in_plane[iy * w + ix0..iy * w + ix0 + n];
                            let din_row = &mut din_plane[iy * w + ix0..iy * w + ix0 + n];
                            for (d, di) in drow.iter().zip(din_row.iter_mut()) {
                                *di += wv * d;
                            }
                            acc += dot(drow, in_row);
                        } else {
                            for (j, &d) in drow.iter().enumerate() {
                                let ix = (ox_lo + j) * s + kx - pad;
                                acc += d * in_plane[iy * w + ix];
                                din_plane[iy * w + ix] += wv * d;
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (din, dw, db)
}

/// Dot product with four independent accumulators so it vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            lanes[k] += x[k] * y[k];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Per-output-index source taps for align-corners-false linear resampling.
pub(crate) fn resize_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Per-channel bilinear resampling (align-corners-false, edge clamped).
pub fn resize_bilinear(grid: &FeatureGrid, new_h: usize, new_w: usize) -> Result<FeatureGrid> {
    if new_h == 0 || new_w == 0 {
        return Err(shape_err!("resize to zero dims {}x{}", new_h, new_w));
    }
    if grid.plane_len() == 0 {
        return Err(shape_err!("resize of empty grid"));
    }
    Ok(resize_forward(grid, new_h, new_w))
}

pub(crate) fn resize_forward(grid: &FeatureGrid, new_h: usize, new_w: usize) -> FeatureGrid {
    let (c, h, w) = grid.shape();
    if (h, w) == (new_h, new_w) {
        return grid.clone();
    }
    let ty = resize_taps(h, new_h);
    let tx = resize_taps(w, new_w);
    let mut out = FeatureGrid::zeros(c, new_h, new_w);
    for ch in 0..c {
        let src = grid.channel(ch);
        let dst = out.channel_mut(ch);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let a = src[y0 * w + x0];
                let b = src[y0 * w + x1];
                let cc = src[y1 * w + x0];
                let d = src[y1 * w + x1];
                dst[oy * new_w + ox] =
                    (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * cc + fx * d);
            }
        }
    }
    out
}

pub(crate) fn resize_backward(dout: &FeatureGrid, in_h: usize, in_w: usize) -> FeatureGrid {
    let (c, oh, ow) = dout.shape();
    if (oh, ow) == (in_h, in_w) {
        return dout.clone();
    }
    let ty = resize_taps(in_h, oh);
    let tx = resize_taps(in_w, ow);
    let mut din = FeatureGrid::zeros(c, in_h, in_w);
    for ch in 0..c {
        let d = dout.channel(ch);
        let g = din.channel_mut(ch);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = d[oy * ow + ox];
                g[y0 * in_w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                g[y0 * in_w + x1] += (1.0 - fy) * fx * v;
                g[y1 * in_w + x0] += fy * (1.0 - fx) * v;
                g[y1 * in_w + x1] += fy * fx * v;
            }
        }
    }
    din
}

/// Four bilinear corners of `(x, y)` in cell-index space (x = column, y = row).
/// Corners outside the grid are `None` and read as zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearCorners {
    pub idx: [Option<usize>; 4],
    pub fx: f64,
    pub fy: f64,
}

impl BilinearCorners {
    #[inline]
    pub fn new(height: usize, width: usize, x: f64, y: f64) -> Self {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let at = |xx: f64, yy: f64| -> Option<usize> {
            if xx >= 0.0 && yy >= 0.0 && (xx as usize) < width && (yy as usize) < height {
                Some(yy as usize * width + xx as usize)
            } else {
                None
            }
        };
        // a = (x0, y0), b = (x1, y0), c = (x0, y1), d = (x1, y1)
        Self {
            idx: [
                at(x0, y0),
                at(x0 + 1.0, y0),
                at(x0, y0 + 1.0),
                at(x0 + 1.0, y0 + 1.0),
            ],
            fx,
            fy,
        }
    }

    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ]
    }

    /// Interpolated value from one channel plane.
    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        let wts = self.weights();
        let mut v = 0.0;
        for (i, w) in self.idx.iter().zip(wts) {
            if let Some(i) = i {
                v += w * plane[*i];
            }
        }
        v
    }

    /// Corner values `[a, b, c, d]` from one plane (zero outside).
    #[inline]
    pub fn values(&self, plane: &[f64]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, i) in out.iter_mut().zip(self.idx) {
            if let Some(i) = i {
                *o = plane[i];
            }
        }
        out
    }
}

/// Bilinear read of all channels at `(x, y)` = (column, row); zero outside.
pub fn sample_bilinear(grid: &FeatureGrid, x: f64, y: f64) -> Vec<f64> {
    let corners = BilinearCorners::new(grid.height(), grid.width(), x, y);
    (0..grid.channels())
        .map(|c| corners.sample(grid.channel(c)))
        .collect()
}

/// Softmax across a stack of maps at every position, max-shifted.
pub fn softmax_stack(maps: &[SpatialMap]) -> Result<Vec<SpatialMap>> {
    let first = maps
        .first()
        .ok_or_else(|| shape_err!("softmax over zero maps"))?;
    let (h, w) = (first.height(), first.width());
    if maps.iter().any(|m| m.height() != h || m.width() != w) {
        return Err(shape_err!("softmax_stack shape mismatch"));
    }
    let n = maps.len();
    let mut stacked = Vec::with_capacity(n * h * w);
    for m in maps {
        stacked.extend_from_slice(m.data());
    }
    let grid = FeatureGrid::new(n, h, w, stacked)?;
    let out = softmax_groups_forward(&grid, n);
    (0..n)
        .map(|i| SpatialMap::new(h, w, out.channel(i).to_vec()))
        .collect()
}

/// Softmax over consecutive channel groups of size `group` at every cell.
pub(crate) fn softmax_groups_forward(x: &FeatureGrid, group: usize) -> FeatureGrid {
    let (c, h, w) = x.shape();
    debug_assert!(group > 0 && c % group == 0);
    let n = h * w;
    let mut out = FeatureGrid::zeros(c, h, w);
    let src = x.data();
    let dst = out.data_mut();
    let mut buf = vec![0.0; group];
    for g0 in (0..c).step_by(group) {
        for p in 0..n {
            let mut m = f64::NEG_INFINITY;
            for j in 0..group {
                m = m.max(src[(g0 + j) * n + p]);
            }
            let mut sum = 0.0;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (src[(g0 + j) * n + p] - m).exp();
                sum += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                dst[(g0 + j) * n + p] = b / sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_groups_backward(y: &FeatureGrid, dy: &FeatureGrid, group: usize) -> FeatureGrid {
    let (c, h, w) = y.shape();
    let n = h * w;
    let mut dx = FeatureGrid::zeros(c, h, w);
    let (ys, ds) = (y.data(), dy.data());
    let out = dx.data_mut();
    for g0 in (0..c).step_by(group) {
        for p in 0..n {
            let mut dot = 0.0;
            for j in 0..group {
                let i = (g0 + j) * n + p;
                dot += ys[i] * ds[i];
            }
            for j in 0..group {
                let i = (g0 + j) * n + p;
                out[i] = ys[i] * (ds[i] - dot);
            }
        }
    }
    dx
}

/// 2×2 max pooling with ceil-mode borders (odd edges pool a partial window).
pub fn max_pool2x2(map: &SpatialMap) -> SpatialMap {
    let (h, w) = (map.height(), map.width());
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    SpatialMap::from_fn(oh, ow, |y, x| {
        let mut m = f64::NEG_INFINITY;
        for yy in 2 * y..(2 * y + 2).min(h) {
            for xx in 2 * x..(2 * x + 2).min(w) {
                m = m.max(map.get(yy, xx));
            }
        }
        m
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn pool_avg_and_max_constant_channels() {
        let g = FeatureGrid::from_fn(2, 2, 2, |c, _, _| if c == 0 { 1.0 } else { 3.0 });
        let avg = pool_channels(&g, PoolMode::Avg).unwrap();
        let max = pool_channels(&g, PoolMode::Max).unwrap();
        assert!(avg.data().iter().all(|&v| v == 2.0));
        assert!(max.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn pool_matches_triple_loop() {
        let g = FeatureGrid::random(8, 16, 16, -1.0, 1.0, &mut rng(3));
        let avg = pool_channels(&g, PoolMode::Avg).unwrap();
        let max = pool_channels(&g, PoolMode::Max).unwrap();
        for h in 0..16 {
            for w in 0..16 {
                let mut s = 0.0;
                let mut m = f64::NEG_INFINITY;
                for c in 0..8 {
                    s += g.get(c, h, w);
                    m = m.max(g.get(c, h, w));
                }
                assert!((avg.get(h, w) - s / 8.0).abs() < 1e-15);
                assert_eq!(max.get(h, w), m);
            }
        }
    }

    #[test]
    fn pool_empty_grid_is_shape_error() {
        let g = FeatureGrid::zeros(0, 2, 2);
        assert!(pool_channels(&g, PoolMode::Avg).is_err());
    }

    #[test]
    fn activation_values() {
        let g = FeatureGrid::new(1, 1, 3, vec![0.0, 1.0, -2.0]).unwrap();
        let s = activate(&g, Activation::Sigmoid);
        assert_eq!(s.get(0, 0, 0), 0.5);
        assert!((s.get(0, 0, 1) - 0.731_058_578_63).abs() < 1e-11);
        assert_eq!(activate(&g, Activation::Tanh).get(0, 0, 0), 0.0);
        assert_eq!(activate(&g, Activation::Relu).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn conv_identity_1x1() {
        let g = FeatureGrid::random(3, 5, 6, -2.0, 2.0, &mut rng(1));
        let out = conv2d(&g, &ConvParams::identity(3)).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn conv_impulse_plateau() {
        let mut g = FeatureGrid::zeros(1, 7, 7);
        g.set(0, 3, 3, 1.0);
        let geom = ConvGeom::same(1, 1, 3);
        let p = ConvParams::new(geom, vec![1.0; 9], vec![0.0]).unwrap();
        let out = conv2d(&g, &p).unwrap();
        for h in 0..7 {
            for w in 0..7 {
                let inside = (2..=4).contains(&h) && (2..=4).contains(&w);
                assert_eq!(out.get(0, h, w), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    fn naive_conv(g: &FeatureGrid, p: &ConvParams) -> FeatureGrid {
        let geom = p.geom;
        let (oh, ow) = geom.output_dims(g.height(), g.width()).unwrap();
        FeatureGrid::from_fn(geom.out_channels, oh, ow, |o, y, x| {
            let mut acc = p.bias[o];
            for i in 0..geom.in_channels {
                for ky in 0..geom.kernel_h {
                    for kx in 0..geom.kernel_w {
                        let iy = (y * geom.stride + ky) as isize - geom.padding as isize;
                        let ix = (x * geom.stride + kx) as isize - geom.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.height() && (ix as usize) < g.width() {
                            acc += p.w(o, i, ky, kx) * g.get(i, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut r = rng(11);
        for &(k, s, pad, h, w) in &[(3, 1, 1, 9, 7), (3, 2, 1, 9, 8), (1, 1, 0, 4, 5), (5, 2, 2, 11, 6), (3, 1, 0, 6, 6)] {
            let g = FeatureGrid::random(3, h, w, -1.0, 1.0, &mut r);
            let geom = ConvGeom::new(4, 3, k, s, pad);
            let mut p = ConvParams::xavier(geom, &mut r);
            p.bias = (0..4).map(|i| i as f64 * 0.1).collect();
            let fast = conv2d(&g, &p).unwrap();
            let slow = naive_conv(&g, &p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let g = FeatureGrid::zeros(2, 4, 4);
        assert!(conv2d(&g, &ConvParams::identity(3)).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let g = FeatureGrid::random(2, 5, 4, -1.0, 1.0, &mut rng(5));
        assert_eq!(resize_bilinear(&g, 5, 4).unwrap(), g);
        let c = FeatureGrid::filled(1, 3, 3, 2.5);
        let up = resize_bilinear(&c, 7, 11).unwrap();
        assert!(up.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        assert!(resize_bilinear(&c, 0, 3).is_err());
    }

    #[test]
    fn resize_2x2_to_4x4_closed_form() {
        let g = FeatureGrid::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = resize_bilinear(&g, 4, 4).unwrap();
        // source coordinate for output o: max(0, (o + 0.5) / 2 - 0.5), clamped to [0, 1]
        let src = |o: usize| ((o as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
        for y in 0..4 {
            for x in 0..4 {
                let (sy, sx) = (src(y), src(x));
                // f(x, y) = x + 2y is bilinear, so interpolation reproduces it exactly
                let expect = sx + 2.0 * sy;
                assert!((up.get(0, y, x) - expect).abs() < 1e-15, "({y},{x})");
            }
        }
        assert_eq!(up.get(0, 0, 0), 0.0);
        assert_eq!(up.get(0, 3, 3), 3.0);
        assert_eq!(up.get(0, 1, 1), 0.75);
    }

    #[test]
    fn sample_exact_at_integer_and_mean_at_midpoint() {
        let g = FeatureGrid::random(3, 6, 6, -1.0, 1.0, &mut rng(2));
        assert_eq!(sample_bilinear(&g, 2.0, 3.0), g.column(3, 2));
        let mid = sample_bilinear(&g, 1.5, 2.5);
        for c in 0..3 {
            let mean = (g.get(c, 2, 1) + g.get(c, 2, 2) + g.get(c, 3, 1) + g.get(c, 3, 2)) / 4.0;
            assert!((mid[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn sample_fractional_weight_formula() {
        let g = FeatureGrid::random(2, 4, 4, -1.0, 1.0, &mut rng(9));
        let v = sample_bilinear(&g, 1.25, 0.75);
        let (fx, fy) = (0.25, 0.75);
        for c in 0..2 {
            let a = g.get(c, 0, 1);
            let b = g.get(c, 0, 2);
            let cc = g.get(c, 1, 1);
            let d = g.get(c, 1, 2);
            let expect = (1.0 - fx) * (1.0 - fy) * a + fx * (1.0 - fy) * b + (1.0 - fx) * fy * cc + fx * fy * d;
            assert!((v[c] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn sample_outside_reads_zero() {
        let g = FeatureGrid::filled(1, 3, 3, 1.0);
        assert_eq!(sample_bilinear(&g, -5.0, 1.0), vec![0.0]);
        assert_eq!(sample_bilinear(&g, -0.5, 1.0), vec![0.5]);
        assert_eq!(sample_bilinear(&g, 2.5, 2.0), vec![0.5]);
    }

    #[test]
    fn softmax_stack_examples() {
        let m = SpatialMap::filled(2, 2, 0.3);
        let out = softmax_stack(&[m.clone(), m.clone(), m.clone()]).unwrap();
        for o in &out {
            assert!(o.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        let big = m.map(|v| v + 100.0);
        let out = softmax_stack(&[big, m.clone(), m.clone()]).unwrap();
        assert!(out[0].data().iter().all(|&v| (1.0 - v).abs() < 1e-20));
        assert!(out[1].data().iter().all(|&v| v < 1e-20));
        let maps: Vec<_> = [1.0, 2.0, 3.0].iter().map(|&v| SpatialMap::filled(1, 1, v)).collect();
        let out = softmax_stack(&maps).unwrap();
        let expect = [0.090_030_57, 0.244_728_47, 0.665_240_96];
        for (o, e) in out.iter().zip(expect) {
            assert!((o.get(0, 0) - e).abs() < 1e-8);
        }
        assert!(softmax_stack(&[SpatialMap::filled(1, 2, 0.0), SpatialMap::filled(2, 1, 0.0)]).is_err());
    }

    #[test]
    fn max_pool_ceil_mode() {
        let m = SpatialMap::from_fn(3, 5, |h, w| (h * 5 + w) as f64);
        let p = max_pool2x2(&m);
        assert_eq!((p.height(), p.width()), (2, 3));
        assert_eq!(p.data(), &[6.0, 8.0, 9.0, 11.0, 13.0, 14.0]);
    }
}
