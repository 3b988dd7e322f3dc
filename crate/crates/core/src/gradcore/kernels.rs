//! Raw forward/backward loops over flat channels-last buffers.
//!
//! Convolutions and pools operate on rank-4 `[A, B, C, channels]` volumes.
//! Lower-rank layers are expressed by setting unused extents to 1, so a
//! `[T, P, C]` map is a `[T, P, 1, C]` volume with kernel depth 1.

use crate::par;

/// Output extent of a "same"-padded, strided axis.
pub fn out_extent(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    pub fn new(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], cin: usize, cout: usize) -> Self {
        let output = [
            out_extent(input[0], stride[0]),
            out_extent(input[1], stride[1]),
            out_extent(input[2], stride[2]),
        ];
        ConvGeom {
            input,
            kernel,
            stride,
            output,
            cin,
            cout,
        }
    }

    fn pad(&self, axis: usize) -> usize {
        (self.kernel[axis] - 1) / 2
    }

    /// Input coordinate read by output `o` at kernel tap `k` along `axis`.
    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride[axis] + k) as isize - self.pad(axis) as isize;
        (i >= 0 && (i as usize) < self.input[axis]).then_some(i as usize)
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product::<usize>() * self.cout
    }
}

pub fn conv_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [_, ob, oc] = g.output;
    let [_, ib, ic] = g.input;
    let [ka, kb, kc] = g.kernel;
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![0.0; g.out_len()];
    par::for_each_chunk_mut(&mut out, ob * oc * cout, |oa, plane| {
        for kia in 0..ka {
            let Some(ia) = g.src(0, oa, kia) else { continue };
            for bo in 0..ob {
                for kib in 0..kb {
                    let Some(jb) = g.src(1, bo, kib) else { continue };
                    for co in 0..oc {
                        let dst = &mut plane[(bo * oc + co) * cout..][..cout];
                        for kic in 0..kc {
                            let Some(jc) = g.src(2, co, kic) else { continue };
                            let xrow = &x[((ia * ib + jb) * ic + jc) * cin..][..cin];
                            let wblock = &w[(((kia * kb + kib) * kc + kic) * cin) * cout..][..cin * cout];
                            for (ci, &xv) in xrow.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let wrow = &wblock[ci * cout..][..cout];
                                for (d, &wv) in dst.iter_mut().zip(wrow) {
                                    *d += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns `(grad_x, grad_w)`.
pub fn conv_backward(x: &[f64], w: &[f64], gout: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let [oa_n, ob, oc] = g.output;
    let [_, ib, ic] = g.input;
    let [_, kb, kc] = g.kernel;
    let (cin, cout) = (g.cin, g.cout);

    let mut gw = vec![0.0; w.len()];
    // one chunk per kernel tap; each tap sums over all outputs in a fixed order
    par::for_each_chunk_mut(&mut gw, cin * cout, |tap, block| {
        let kia = tap / (kb * kc);
        let kib = (tap / kc) % kb;
        let kic = tap % kc;
        for oa in 0..oa_n {
            let Some(ia) = g.src(0, oa, kia) else { continue };
            for bo in 0..ob {
                let Some(jb) = g.src(1, bo, kib) else { continue };
                for co in 0..oc {
                    let Some(jc) = g.src(2, co, kic) else { continue };
                    let grow = &gout[((oa * ob + bo) * oc + co) * cout..][..cout];
                    let xrow = &x[((ia * ib + jb) * ic + jc) * cin..][..cin];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let dst = &mut block[ci * cout..][..cout];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d += xv * gv;
                        }
                    }
                }
            }
        }
    });

    let mut gx = vec![0.0; x.len()];
    let [ka, _, _] = g.kernel;
    for oa in 0..oa_n {
        for kia in 0..ka {
            let Some(ia) = g.src(0, oa, kia) else { continue };
            for bo in 0..ob {
                for kib in 0..kb {
                    let Some(jb) = g.src(1, bo, kib) else { continue };
                    for co in 0..oc {
                        let grow = &gout[((oa * ob + bo) * oc + co) * cout..][..cout];
                        for kic in 0..kc {
                            let Some(jc) = g.src(2, co, kic) else { continue };
                            let xg = &mut gx[((ia * ib + jb) * ic + jc) * cin..][..cin];
                            let wblock = &w[(((kia * kb + kib) * kc + kic) * cin) * cout..][..cin * cout];
                            for (ci, xgv) in xg.iter_mut().enumerate() {
                                let wrow = &wblock[ci * cout..][..cout];
                                *xgv += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
    pub channels: usize,
}

impl PoolGeom {
    pub fn new(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], channels: usize) -> Self {
        let output = [
            out_extent(input[0], stride[0]),
            out_extent(input[1], stride[1]),
            out_extent(input[2], stride[2]),
        ];
        PoolGeom {
            input,
            kernel,
            stride,
            output,
            channels,
        }
    }

    /// Valid input range of window `o` along `axis`; windows are cut at the right edge.
    #[inline]
    fn window(&self, axis: usize, o: usize) -> std::ops::Range<usize> {
        let s = o * self.stride[axis];
        s..(s + self.kernel[axis]).min(self.input[axis])
    }
}

/// Returns the pooled values and, for max pooling, the flat input index
/// that won each output cell (first in scan order on ties).
pub fn pool_forward(x: &[f64], g: &PoolGeom, kind: PoolKind) -> (Vec<f64>, Vec<usize>) {
    let [oa_n, ob, oc] = g.output;
    let [_, ib, ic] = g.input;
    let ch = g.channels;
    let n = oa_n * ob * oc * ch;
    let mut out = vec![0.0; n];
    let mut arg = if kind == PoolKind::Max { vec![0; n] } else { Vec::new() };
    for oa in 0..oa_n {
        for bo in 0..ob {
            for co in 0..oc {
                let base = ((oa * ob + bo) * oc + co) * ch;
                for c in 0..ch {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for ia in g.window(0, oa) {
                        for jb in g.window(1, bo) {
                            for jc in g.window(2, co) {
                                let i = ((ia * ib + jb) * ic + jc) * ch + c;
                                let v = x[i];
                                if v > best {
                                    best = v;
                                    best_i = i;
                                }
                                sum += v;
                                count += 1;
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            out[base + c] = best;
                            arg[base + c] = best_i;
                        }
                        PoolKind::Avg => out[base + c] = sum / count as f64,
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn pool_backward(gout: &[f64], g: &PoolGeom, kind: PoolKind, argmax: &[usize], in_len: usize) -> Vec<f64> {
    let mut gx = vec![0.0; in_len];
    match kind {
        PoolKind::Max => {
            for (&i, &gv) in argmax.iter().zip(gout) {
                gx[i] += gv;
            }
        }
        PoolKind::Avg => {
            let [oa_n, ob, oc] = g.output;
            let [_, ib, ic] = g.input;
            let ch = g.channels;
            for oa in 0..oa_n {
                for bo in 0..ob {
                    for co in 0..oc {
                        let count = g.window(0, oa).len() * g.window(1, bo).len() * g.window(2, co).len();
                        let base = ((oa * ob + bo) * oc + co) * ch;
                        for ia in g.window(0, oa) {
                            for jb in g.window(1, bo) {
                                for jc in g.window(2, co) {
                                    let ibase = ((ia * ib + jb) * ic + jc) * ch;
                                    for c in 0..ch {
                                        gx[ibase + c] += gout[base + c] / count as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// `[m,k] x [k,n]`, rows computed in parallel.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 {
        return out;
    }
    par::for_each_chunk_mut(&mut out, n, |i, row| {
        let arow = &a[i * k..][..k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..][..n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a^T [k,m] ... ` helper: returns `a^T · g` for `a: [m,k]`, `g: [m,n]`.
pub fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let grow = &g[i * n..][..n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let dst = &mut out[p * n..][..n];
            for (d, &gv) in dst.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
    out
}

/// Returns `g · b^T` for `g: [m,n]`, `b: [k,n]`.
pub fn matmul_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    par::for_each_chunk_mut(&mut out, k, |i, row| {
        let grow = &g[i * n..][..n];
        for (p, o) in row.iter_mut().enumerate() {
            let brow = &b[p * n..][..n];
            *o = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// Geometry of a "same" convolution over a `[T, n_p, d]` input whose
/// channels are constant along time (the phonetic shortcut).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BroadcastGeom {
    pub frames: usize,
    pub rows: usize,
    pub d: usize,
    pub kt: usize,
    pub kp: usize,
    pub cout: usize,
}

impl BroadcastGeom {
    /// Frame range `[lo, hi)` of outputs for which kernel tap `dt` reads a valid frame.
    fn frames_for_tap(&self, dt: usize) -> std::ops::Range<usize> {
        let pad = (self.kt - 1) / 2;
        let lo = pad.saturating_sub(dt);
        let hi = (self.frames + pad).saturating_sub(dt).min(self.frames);
        lo..hi.max(lo)
    }

    fn row_src(&self, p: usize, dp: usize) -> Option<usize> {
        let i = (p + dp) as isize - ((self.kp - 1) / 2) as isize;
        (i >= 0 && (i as usize) < self.rows).then_some(i as usize)
    }
}

/// Per-tap partial sums `G[dt][p][o] = sum_{dp,c} w[dt,dp,c,o] * P[p+dp-pad, c]`.
fn broadcast_taps(p: &[f64], w: &[f64], g: &BroadcastGeom) -> Vec<f64> {
    let (d, cout) = (g.d, g.cout);
    let mut taps = vec![0.0; g.kt * g.rows * cout];
    for dt in 0..g.kt {
        for row in 0..g.rows {
            let dst = &mut taps[(dt * g.rows + row) * cout..][..cout];
            for dp in 0..g.kp {
                let Some(src) = g.row_src(row, dp) else { continue };
                let prow = &p[src * d..][..d];
                let wblock = &w[((dt * g.kp + dp) * d) * cout..][..d * cout];
                for (c, &pv) in prow.iter().enumerate() {
                    let wrow = &wblock[c * cout..][..cout];
                    for (o, &wv) in dst.iter_mut().zip(wrow) {
                        *o += pv * wv;
                    }
                }
            }
        }
    }
    taps
}

pub fn broadcast_conv_forward(p: &[f64], w: &[f64], g: &BroadcastGeom) -> Vec<f64> {
    let taps = broadcast_taps(p, w, g);
    let plane = g.rows * g.cout;
    let mut out = vec![0.0; g.frames * plane];
    for dt in 0..g.kt {
        let tap = &taps[dt * plane..][..plane];
        for t in g.frames_for_tap(dt) {
            for (o, &v) in out[t * plane..][..plane].iter_mut().zip(tap) {
                *o += v;
            }
        }
    }
    out
}

/// Returns `(grad_p, grad_w)`.
pub fn broadcast_conv_backward(p: &[f64], w: &[f64], gout: &[f64], g: &BroadcastGeom) -> (Vec<f64>, Vec<f64>) {
    let (d, cout) = (g.d, g.cout);
    let plane = g.rows * cout;
    let mut gtaps = vec![0.0; g.kt * plane];
    for dt in 0..g.kt {
        let dst = &mut gtaps[dt * plane..][..plane];
        for t in g.frames_for_tap(dt) {
            for (o, &v) in dst.iter_mut().zip(&gout[t * plane..][..plane]) {
                *o += v;
            }
        }
    }
    let mut gp = vec![0.0; p.len()];
    let mut gw = vec![0.0; w.len()];
    for dt in 0..g.kt {
        for row in 0..g.rows {
            let gt = &gtaps[(dt * g.rows + row) * cout..][..cout];
            for dp in 0..g.kp {
                let Some(src) = g.row_src(row, dp) else { continue };
                let prow = &p[src * d..][..d];
                let off = ((dt * g.kp + dp) * d) * cout;
                for c in 0..d {
                    let wrow = &w[off + c * cout..][..cout];
                    gp[src * d + c] += wrow.iter().zip(gt).map(|(a, b)| a * b).sum::<f64>();
                    let pv = prow[c];
                    for (gwv, &gv) in gw[off + c * cout..][..cout].iter_mut().zip(gt) {
                        *gwv += pv * gv;
                    }
                }
            }
        }
    }
    (gp, gw)
}
