//! Wengert-list tape: every primitive records its inputs and whatever it
//! needs for the backward pass, then [`Tape::backward`] replays the list in
//! reverse, accumulating adjoints additively across fan-out.

use crate::error::{KwsError, Result};

use super::kernels::{self, BroadcastGeom, ConvGeom, PoolGeom, PoolKind};
use super::lstm::{self, sigmoid, LstmCache};
use super::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics produced by a train-mode batchnorm (unbiased variance).
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceLast { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Conv { x: Var, w: Var, geom: ConvGeom },
    BroadcastConv { p: Var, w: Var, geom: BroadcastGeom },
    Pool { x: Var, kind: PoolKind, geom: PoolGeom, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Gather { table: Var, ids: Vec<usize> },
    Lstm { xproj: Var, wh: Var, hid: usize, cache: Box<LstmCache> },
    MaxSelect { x: Var, winner: usize },
    SigmoidBce { x: Var, y: f64 },
    Sum(Var),
    AddN(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by tape position.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient or zeros when the variable did not influence the root.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients flow to it only if `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(KwsError::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(KwsError::dim("transpose", s, &[0, 0]));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(KwsError::dim("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b]))
    }

    /// Adds a bias along the last axis.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap();
        if self.shape(b) != [n] {
            return Err(KwsError::dim("add_bias", self.shape(a), self.shape(b)));
        }
        let bias = self.value(b).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(KwsError::dim("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(KwsError::dim("concat_last", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..][..w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Concatenates along axis 0; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(KwsError::dim("concat_rows", &first, s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = rows;
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().unwrap();
        if len == 0 || start + len > w {
            return Err(KwsError::dim("slice_last", &s, &[start, len]));
        }
        let out: Vec<f64> = self.value(x).data().chunks(w).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::SliceLast { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    /// "Same"-padded strided convolution over a rank-4 `[A, B, C, Cin]`
    /// volume with kernel `[ka, kb, kc, Cin, Cout]`.
    pub fn conv(&mut self, x: Var, w: Var, stride: [usize; 3]) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 5 {
            return Err(KwsError::dim("conv rank", sx, sw));
        }
        if sx[3] != sw[3] {
            return Err(KwsError::dim("conv channels", sx, sw));
        }
        if sw[..3].iter().any(|k| k % 2 == 0) || stride.iter().any(|&s| s == 0) {
            return Err(KwsError::dim("conv kernel must be odd, stride >= 1", sw, &stride));
        }
        let geom = ConvGeom::new([sx[0], sx[1], sx[2]], [sw[0], sw[1], sw[2]], stride, sw[3], sw[4]);
        let out = kernels::conv_forward(self.value(x).data(), self.value(w).data(), &geom);
        let shape = vec![geom.output[0], geom.output[1], geom.output[2], geom.cout];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv { x, w, geom }, &[x, w]))
    }

    /// Same-padded stride-1 2-D convolution of the `[frames, n_p, d]`
    /// tensor obtained by repeating `p: [n_p, d]` along time, with kernel
    /// `w: [kt, kp, d, Cout]`. Output `[frames, n_p, 1, Cout]`.
    pub fn broadcast_conv(&mut self, p: Var, w: Var, frames: usize) -> Result<Var> {
        let (sp, sw) = (self.shape(p), self.shape(w));
        if sp.len() != 2 || sw.len() != 4 || sp[1] != sw[2] {
            return Err(KwsError::dim("broadcast_conv", sp, sw));
        }
        if sw[0] % 2 == 0 || sw[1] % 2 == 0 || frames == 0 {
            return Err(KwsError::dim("broadcast_conv kernel", sw, &[frames]));
        }
        let geom = BroadcastGeom {
            frames,
            rows: sp[0],
            d: sp[1],
            kt: sw[0],
            kp: sw[1],
            cout: sw[3],
        };
        let out = kernels::broadcast_conv_forward(self.value(p).data(), self.value(w).data(), &geom);
        let shape = vec![frames, geom.rows, 1, geom.cout];
        Ok(self.push(Tensor::from_parts(shape, out), Op::BroadcastConv { p, w, geom }, &[p, w]))
    }

    /// Max or average pooling over a rank-4 volume. Windows start at
    /// multiples of the stride and are cut at the right edge; a window may
    /// overhang the input by at most half its extent.
    pub fn pool(&mut self, x: Var, kind: PoolKind, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(KwsError::dim("pool rank", &sx, &kernel));
        }
        for a in 0..3 {
            if kernel[a] == 0 || stride[a] == 0 || kernel[a] > sx[a] + kernel[a] / 2 {
                return Err(KwsError::dim("pool kernel exceeds padded input", &sx, &kernel));
            }
        }
        let geom = PoolGeom::new([sx[0], sx[1], sx[2]], kernel, stride, sx[3]);
        let (out, argmax) = kernels::pool_forward(self.value(x).data(), &geom, kind);
        let shape = vec![geom.output[0], geom.output[1], geom.output[2], sx[3]];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Pool { x, kind, geom, argmax }, &[x]))
    }

    /// Batch normalization over every axis but the last. In train mode the
    /// batch statistics are returned so the caller can update running
    /// averages.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let sx = self.shape(x).to_vec();
        let ch = *sx.last().unwrap();
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(KwsError::dim("batchnorm params", &sx, self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let n = xd.len() / ch;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; ch];
                for row in xd.chunks(ch) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; ch];
                for row in xd.chunks(ch) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let unbiased: Vec<f64> = var.iter().map(|s| if n > 1 { s / (n - 1) as f64 } else { 0.0 }).collect();
                var.iter_mut().for_each(|s| *s /= n as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(KwsError::dim("batchnorm running stats", &sx, &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(ch) {
            for c in 0..ch {
                let h = (row[c] - mean[c]) * inv_std[c];
                xhat.push(h);
                out.push(h * g[c] + b[c]);
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: stats.is_some(),
        };
        Ok((self.push(Tensor::from_parts(sx, out), op, &[x, gamma, beta]), stats))
    }

    /// Rows of `table: [V, E]` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(KwsError::dim("gather", &s, &[ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(KwsError::UnknownPhoneme(bad));
        }
        let e = s[1];
        let src = self.value(table).data();
        let out: Vec<f64> = ids.iter().flat_map(|&i| src[i * e..][..e].iter().copied()).collect();
        Ok(self.push(Tensor::from_parts(vec![ids.len(), e], out), Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Fused LSTM recurrence over `xproj: [T, 4H]` with recurrent weights
    /// `wh: [H, 4H]`; see [`lstm::lstm_seq_forward`].
    pub fn lstm(&mut self, xproj: Var, wh: Var, reverse: bool, valid: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(xproj).to_vec(), self.shape(wh).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sw[1] != 4 * sw[0] || sx[1] != sw[1] {
            return Err(KwsError::dim("lstm", &sx, &sw));
        }
        let (frames, hid) = (sx[0], sw[0]);
        let (out, cache) = lstm::lstm_seq_forward(self.value(xproj).data(), self.value(wh).data(), frames, hid, reverse, valid);
        let op = Op::Lstm {
            xproj,
            wh,
            hid,
            cache: Box::new(cache),
        };
        Ok(self.push(Tensor::from_parts(vec![frames, hid], out), op, &[xproj, wh]))
    }

    /// Maximum over the listed flat indices; the adjoint goes to the first maximizer.
    pub fn max_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let d = self.value(x).data();
        if indices.is_empty() || indices.iter().any(|&i| i >= d.len()) {
            return Err(KwsError::Length(format!("max_select over {indices:?} of {}", d.len())));
        }
        let mut winner = indices[0];
        for &i in &indices[1..] {
            if d[i] > d[winner] {
                winner = i;
            }
        }
        let v = d[winner];
        Ok(self.push(Tensor::scalar(v), Op::MaxSelect { x, winner }, &[x]))
    }

    /// Binary cross-entropy of `sigmoid(x)` against `y`, from the logit.
    pub fn sigmoid_bce(&mut self, x: Var, y: f64) -> Result<Var> {
        if self.value(x).len() != 1 {
            return Err(KwsError::dim("sigmoid_bce", self.shape(x), &[1]));
        }
        let l = self.value(x).item();
        Ok(self.push(Tensor::scalar(bce_with_logit(l, y)), Op::SigmoidBce { x, y }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum of same-shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let shape = self.shape(parts[0]).to_vec();
        let mut out = vec![0.0; self.value(parts[0]).len()];
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(KwsError::dim("add_n", &shape, self.shape(p)));
            }
            out.iter_mut().zip(self.value(p).data()).for_each(|(o, v)| *o += v);
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddN(parts.to_vec()), parts))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        let seed = Tensor::full(self.shape(root), 1.0);
        self.backward_seeded(&[(root, seed)])
    }

    /// Reverse pass from arbitrary seeds (adjoints of non-scalar outputs).
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Grads {
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (v, t) in seeds {
            assert_eq!(self.shape(*v), t.shape(), "seed shape");
            add_into(&mut g[v.0], t.data());
        }
        let last = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = g[i].take() else { continue };
            self.propagate(node, &gout, &mut g);
            g[i] = Some(gout);
        }
        Grads {
            grads: g,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let ga = kernels::matmul_nt(gout, self.value(*b).data(), m, k, n);
                    add_into(&mut g[a.0], &ga);
                }
                if self.wants(*b) {
                    let gb = kernels::matmul_tn(self.value(*a).data(), gout, m, k, n);
                    add_into(&mut g[b.0], &gb);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = gout[j * m + i];
                    }
                }
                add_into(&mut g[a.0], &ga);
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(&mut g[v.0], gout);
                    }
                }
            }
            Op::AddBias(a, b) => {
                if self.wants(*a) {
                    add_into(&mut g[a.0], gout);
                }
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut gb = vec![0.0; n];
                    for row in gout.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    add_into(&mut g[b.0], &gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga: Vec<f64> = gout.iter().zip(vb).map(|(x, y)| x * y).collect();
                    add_into(&mut g[a.0], &ga);
                }
                if self.wants(*b) {
                    let gb: Vec<f64> = gout.iter().zip(va).map(|(x, y)| x * y).collect();
                    add_into(&mut g[b.0], &gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = gout.iter().map(|x| x * c).collect();
                add_into(&mut g[a.0], &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = gout
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_into(&mut g[a.0], &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = gout.iter().zip(node.value.data()).map(|(gv, &s)| gv * s * (1.0 - s)).collect();
                add_into(&mut g[a.0], &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = gout.iter().zip(node.value.data()).map(|(gv, &t)| gv * (1.0 - t * t)).collect();
                add_into(&mut g[a.0], &ga);
            }
            Op::Reshape(a) => add_into(&mut g[a.0], gout),
            Op::ConcatLast(parts) => {
                let total = *node.value.shape().last().unwrap();
                let mut off = 0;
                for p in parts {
                    let w = *self.shape(*p).last().unwrap();
                    if self.wants(*p) {
                        let gp: Vec<f64> = gout.chunks(total).flat_map(|r| r[off..off + w].iter().copied()).collect();
                        add_into(&mut g[p.0], &gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.wants(*p) {
                        add_into(&mut g[p.0], &gout[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceLast { x, start } => {
                let w = *self.shape(*x).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; self.value(*x).len()];
                for (dst, src) in gx.chunks_mut(w).zip(gout.chunks(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                add_into(&mut g[x.0], &gx);
            }
            Op::SliceRows { x, start } => {
                let xs = self.shape(*x);
                let stride: usize = xs[1..].iter().product();
                let mut gx = vec![0.0; self.value(*x).len()];
                gx[start * stride..start * stride + gout.len()].copy_from_slice(gout);
                add_into(&mut g[x.0], &gx);
            }
            Op::Conv { x, w, geom } => {
                let (gx, gw) = kernels::conv_backward(self.value(*x).data(), self.value(*w).data(), gout, geom);
                if self.wants(*x) {
                    add_into(&mut g[x.0], &gx);
                }
                if self.wants(*w) {
                    add_into(&mut g[w.0], &gw);
                }
            }
            Op::BroadcastConv { p, w, geom } => {
                let (gp, gw) = kernels::broadcast_conv_backward(self.value(*p).data(), self.value(*w).data(), gout, geom);
                if self.wants(*p) {
                    add_into(&mut g[p.0], &gp);
                }
                if self.wants(*w) {
                    add_into(&mut g[w.0], &gw);
                }
            }
            Op::Pool { x, kind, geom, argmax } => {
                let gx = kernels::pool_backward(gout, geom, *kind, argmax, self.value(*x).len());
                add_into(&mut g[x.0], &gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let ch = inv_std.len();
                let n = xhat.len() / ch;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for (grow, hrow) in gout.chunks(ch).zip(xhat.chunks(ch)) {
                    for c in 0..ch {
                        sum_g[c] += grow[c];
                        sum_gx[c] += grow[c] * hrow[c];
                    }
                }
                if self.wants(*gamma) {
                    add_into(&mut g[gamma.0], &sum_gx);
                }
                if self.wants(*beta) {
                    add_into(&mut g[beta.0], &sum_g);
                }
                if self.wants(*x) {
                    let mut gx = Vec::with_capacity(xhat.len());
                    let nf = n as f64;
                    for (grow, hrow) in gout.chunks(ch).zip(xhat.chunks(ch)) {
                        for c in 0..ch {
                            let v = if *train {
                                gam[c] * inv_std[c] * (grow[c] - sum_g[c] / nf - hrow[c] * sum_gx[c] / nf)
                            } else {
                                gam[c] * inv_std[c] * grow[c]
                            };
                            gx.push(v);
                        }
                    }
                    add_into(&mut g[x.0], &gx);
                }
            }
            Op::Gather { table, ids } => {
                let e = self.shape(*table)[1];
                let mut gt = vec![0.0; self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * e..][..e].iter_mut().zip(&gout[r * e..][..e]).for_each(|(d, s)| *d += s);
                }
                add_into(&mut g[table.0], &gt);
            }
            Op::Lstm { xproj, wh, hid, cache } => {
                let frames = self.shape(*xproj)[0];
                let (gx, gw) = lstm::lstm_seq_backward(node.value.data(), gout, self.value(*wh).data(), cache, frames, *hid);
                if self.wants(*xproj) {
                    add_into(&mut g[xproj.0], &gx);
                }
                if self.wants(*wh) {
                    add_into(&mut g[wh.0], &gw);
                }
            }
            Op::MaxSelect { x, winner } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                gx[*winner] = gout[0];
                add_into(&mut g[x.0], &gx);
            }
            Op::SigmoidBce { x, y } => {
                let l = self.value(*x).item();
                add_into(&mut g[x.0], &[gout[0] * (sigmoid(l) - y)]);
            }
            Op::Sum(x) => {
                let gx = vec![gout[0]; self.value(*x).len()];
                add_into(&mut g[x.0], &gx);
            }
            Op::AddN(parts) => {
                for p in parts {
                    if self.wants(*p) {
                        add_into(&mut g[p.0], gout);
                    }
                }
            }
        }
    }
}

/// `-[y log s(l) + (1-y) log(1-s(l))]` without overflow for any finite `l`.
pub fn bce_with_logit(l: f64, y: f64) -> f64 {
    // log(1 + e^{-|l|}) + max(l, 0) - y*l
    l.max(0.0) - y * l + (-l.abs()).exp().ln_1p()
}
