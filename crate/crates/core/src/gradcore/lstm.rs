//! LSTM cell and a fused whole-sequence recurrence with manual BPTT.
//!
//! Gate layout along the `4H` axis is `[input, forget, candidate, output]`.

use crate::error::{KwsError, Result};

use super::Tensor;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weights of one LSTM direction.
#[derive(Clone, Debug)]
pub struct LstmWeights {
    /// `[d_in, 4H]`
    pub wx: Tensor,
    /// `[H, 4H]`
    pub wh: Tensor,
    /// `[4H]`
    pub b: Tensor,
}

impl LstmWeights {
    pub fn hidden(&self) -> usize {
        self.wh.shape()[0]
    }
}

/// One step of a standard LSTM cell. Returns `(h', c')`.
pub fn lstm_step(x: &[f64], h: &[f64], c: &[f64], w: &LstmWeights) -> Result<(Vec<f64>, Vec<f64>)> {
    let hid = w.hidden();
    let d_in = w.wx.shape()[0];
    if x.len() != d_in {
        return Err(KwsError::dim("lstm_step input", &[x.len()], w.wx.shape()));
    }
    if h.len() != hid || c.len() != hid {
        return Err(KwsError::dim("lstm_step state", &[h.len(), c.len()], &[hid, hid]));
    }
    if w.wx.shape()[1] != 4 * hid || w.wh.shape()[1] != 4 * hid || w.b.len() != 4 * hid {
        return Err(KwsError::dim("lstm_step weights", w.wx.shape(), w.wh.shape()));
    }
    let mut z = w.b.data().to_vec();
    accumulate_row(&mut z, x, w.wx.data());
    accumulate_row(&mut z, h, w.wh.data());
    let mut h_next = vec![0.0; hid];
    let mut c_next = vec![0.0; hid];
    for j in 0..hid {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[hid + j]);
        let g = z[2 * hid + j].tanh();
        let o = sigmoid(z[3 * hid + j]);
        c_next[j] = f * c[j] + i * g;
        h_next[j] = o * c_next[j].tanh();
    }
    Ok((h_next, c_next))
}

/// `z += v · W` for `W: [v.len(), z.len()]`.
#[inline]
fn accumulate_row(z: &mut [f64], v: &[f64], w: &[f64]) {
    let n = z.len();
    for (k, &vk) in v.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        for (zj, &wj) in z.iter_mut().zip(&w[k * n..][..n]) {
            *zj += vk * wj;
        }
    }
}

/// Saved activations of a sequence pass.
#[derive(Clone, Debug)]
pub struct LstmCache {
    /// post-nonlinearity gates per processed step, `[steps, 4H]`
    gates: Vec<f64>,
    /// cell states per processed step, `[steps, H]`
    cells: Vec<f64>,
    /// time index of each processed step
    order: Vec<usize>,
}

/// Runs the recurrence over `xproj: [T, 4H]` (input projection plus bias
/// already applied). Only the first `valid` frames are processed; the
/// reverse direction starts from a zero state at `valid - 1`. Rows at or
/// beyond `valid` are zero.
pub fn lstm_seq_forward(xproj: &[f64], wh: &[f64], frames: usize, hid: usize, reverse: bool, valid: usize) -> (Vec<f64>, LstmCache) {
    let g4 = 4 * hid;
    let valid = valid.min(frames);
    let order: Vec<usize> = if reverse {
        (0..valid).rev().collect()
    } else {
        (0..valid).collect()
    };
    let mut out = vec![0.0; frames * hid];
    let mut gates = vec![0.0; valid * g4];
    let mut cells = vec![0.0; valid * hid];
    let mut h = vec![0.0; hid];
    let mut c = vec![0.0; hid];
    for (s, &t) in order.iter().enumerate() {
        let z = &mut gates[s * g4..][..g4];
        z.copy_from_slice(&xproj[t * g4..][..g4]);
        accumulate_row(z, &h, wh);
        for j in 0..hid {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[hid + j]);
            let g = z[2 * hid + j].tanh();
            let o = sigmoid(z[3 * hid + j]);
            z[j] = i;
            z[hid + j] = f;
            z[2 * hid + j] = g;
            z[3 * hid + j] = o;
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        cells[s * hid..][..hid].copy_from_slice(&c);
        out[t * hid..][..hid].copy_from_slice(&h);
    }
    (out, LstmCache { gates, cells, order })
}

/// Returns `(grad_xproj, grad_wh)`.
pub fn lstm_seq_backward(out: &[f64], gout: &[f64], wh: &[f64], cache: &LstmCache, frames: usize, hid: usize) -> (Vec<f64>, Vec<f64>) {
    let g4 = 4 * hid;
    let mut gx = vec![0.0; frames * g4];
    let mut gwh = vec![0.0; wh.len()];
    let mut dh_next = vec![0.0; hid];
    let mut dc_next = vec![0.0; hid];
    let mut dz = vec![0.0; g4];
    let steps = cache.order.len();
    for s in (0..steps).rev() {
        let t = cache.order[s];
        let gate = &cache.gates[s * g4..][..g4];
        let cell = &cache.cells[s * hid..][..hid];
        let prev_c = (s > 0).then(|| &cache.cells[(s - 1) * hid..][..hid]);
        for j in 0..hid {
            let (i, f, g, o) = (gate[j], gate[hid + j], gate[2 * hid + j], gate[3 * hid + j]);
            let tc = cell[j].tanh();
            let dh = gout[t * hid + j] + dh_next[j];
            let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            let cp = prev_c.map_or(0.0, |p| p[j]);
            dz[j] = dc * g * i * (1.0 - i);
            dz[hid + j] = dc * cp * f * (1.0 - f);
            dz[2 * hid + j] = dc * i * (1.0 - g * g);
            dz[3 * hid + j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        gx[t * g4..][..g4].copy_from_slice(&dz);
        // h_prev is the output of the previous processed step
        if s > 0 {
            let tp = cache.order[s - 1];
            let h_prev = &out[tp * hid..][..hid];
            for (k, &hv) in h_prev.iter().enumerate() {
                if hv == 0.0 {
                    continue;
                }
                for (gw, &d) in gwh[k * g4..][..g4].iter_mut().zip(&dz) {
                    *gw += hv * d;
                }
            }
        }
        for (k, dh) in dh_next.iter_mut().enumerate() {
            *dh = wh[k * g4..][..g4].iter().zip(&dz).map(|(a, b)| a * b).sum();
        }
    }
    (gx, gwh)
}
