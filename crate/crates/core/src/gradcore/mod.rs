//! Minimal reverse-mode differentiation engine: dense `f64` tensors, a
//! Wengert tape with the layer set the model needs, Adam, finite-difference
//! checking and the `KWT1` tensor container.

mod check;
pub mod container;
pub mod kernels;
mod lstm;
mod optim;
mod tape;
mod tensor;

use std::collections::{BTreeMap, HashMap};

pub use check::{gradcheck, param_gradcheck, reverse_grad};
pub use kernels::PoolKind;
pub use lstm::{lstm_seq_backward, lstm_seq_forward, lstm_step, sigmoid, LstmCache, LstmWeights};
pub use optim::{AdamConfig, AdamState, ParamStore};
pub use tape::{bce_with_logit, BatchStats, BnMode, Grads, Tape, Var, BN_EPS};
pub use tensor::Tensor;

use crate::error::Result;

/// A tape bound to a parameter store. Parameters enter the tape lazily, once
/// per name, so shared layers fan out and their gradients accumulate.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: HashMap<String, Var>,
    trainable: bool,
    /// Batch statistics recorded by train-mode batchnorm, keyed by layer prefix.
    pub bn_stats: Vec<(String, BatchStats)>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            vars: HashMap::new(),
            trainable,
            bn_stats: Vec::new(),
        }
    }

    /// Continues recording on an existing tape (used by gradient checks that
    /// hand a fresh tape to a closure).
    pub fn from_tape(tape: Tape, store: &'a ParamStore, trainable: bool) -> Self {
        Graph {
            tape,
            store,
            vars: HashMap::new(),
            trainable,
            bn_stats: Vec::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.trainable
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let mut t = self.store.get(name)?.clone();
        t.requires_grad = self.trainable;
        let v = self.tape.leaf(t);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every parameter that entered the tape, by name.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get_or_zero(v)))
            .collect()
    }

    /// `x · W + b` over the last axis of a rank-2 input.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bias(y, b)
    }

    /// Batchnorm with `{prefix}.gamma/.beta` parameters and
    /// `{prefix}.running_mean/.running_var` buffers. Train mode records the
    /// batch statistics in [`Graph::bn_stats`].
    pub fn batchnorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        if self.trainable {
            let (y, stats) = self.tape.batchnorm(x, gamma, beta, BnMode::Train)?;
            if let Some(s) = stats {
                self.bn_stats.push((prefix.to_string(), s));
            }
            Ok(y)
        } else {
            let mean = self.store.buffer(&format!("{prefix}.running_mean"))?.data();
            let var = self.store.buffer(&format!("{prefix}.running_var"))?.data();
            let (y, _) = self.tape.batchnorm(x, gamma, beta, BnMode::Eval { mean, var })?;
            Ok(y)
        }
    }

    /// Batchnorm with statistics pooled over several inputs that share a
    /// channel count. Each input is flattened to `[rows, C]`, the rows are
    /// stacked, normalized together and split back to the original shapes.
    pub fn batchnorm_joint(&mut self, xs: &[Var], prefix: &str) -> Result<Vec<Var>> {
        if xs.len() == 1 {
            return Ok(vec![self.batchnorm(xs[0], prefix)?]);
        }
        let mut flat = Vec::with_capacity(xs.len());
        let mut shapes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.tape.shape(x).to_vec();
            let ch = *s.last().unwrap();
            let rows = s.iter().product::<usize>() / ch;
            flat.push(self.tape.reshape(x, &[rows, ch])?);
            shapes.push((s, rows));
        }
        let stacked = self.tape.concat_rows(&flat)?;
        let y = self.batchnorm(stacked, prefix)?;
        let mut out = Vec::with_capacity(xs.len());
        let mut at = 0;
        for (s, rows) in shapes {
            let part = self.tape.slice_rows(y, at, rows)?;
            out.push(self.tape.reshape(part, &s)?);
            at += rows;
        }
        Ok(out)
    }

    /// One LSTM direction over `x: [T, d_in]` using `{prefix}.wx/.wh/.b`.
    pub fn lstm(&mut self, x: Var, prefix: &str, reverse: bool, valid: usize) -> Result<Var> {
        let wx = self.param(&format!("{prefix}.wx"))?;
        let wh = self.param(&format!("{prefix}.wh"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let proj = self.tape.matmul(x, wx)?;
        let proj = self.tape.add_bias(proj, b)?;
        self.tape.lstm(proj, wh, reverse, valid)
    }

    /// Forward and backward directions (`{prefix}.fwd`, `{prefix}.bwd`)
    /// concatenated per frame.
    pub fn bilstm(&mut self, x: Var, prefix: &str, valid: usize) -> Result<Var> {
        let f = self.lstm(x, &format!("{prefix}.fwd"), false, valid)?;
        let b = self.lstm(x, &format!("{prefix}.bwd"), true, valid)?;
        self.tape.concat_last(&[f, b])
    }
}

/// Registers one LSTM direction: uniform weights, zero bias except +1 on
/// the forget gate.
pub fn init_lstm(store: &mut ParamStore, prefix: &str, d_in: usize, hid: usize, rng: &mut impl rand::Rng) -> Result<()> {
    store.init_uniform(&format!("{prefix}.wx"), &[d_in, 4 * hid], d_in, rng)?;
    store.init_uniform(&format!("{prefix}.wh"), &[hid, 4 * hid], hid, rng)?;
    let mut b = Tensor::zeros(&[4 * hid]);
    b.data_mut()[hid..2 * hid].iter_mut().for_each(|v| *v = 1.0);
    store.insert(&format!("{prefix}.b"), b)
}

pub fn init_bilstm(store: &mut ParamStore, prefix: &str, d_in: usize, hid: usize, rng: &mut impl rand::Rng) -> Result<()> {
    init_lstm(store, &format!("{prefix}.fwd"), d_in, hid, rng)?;
    init_lstm(store, &format!("{prefix}.bwd"), d_in, hid, rng)
}

/// Registers `{prefix}.w: [d_in, d_out]` and a zero `{prefix}.b`.
pub fn init_linear(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl rand::Rng) -> Result<()> {
    store.init_uniform(&format!("{prefix}.w"), &[d_in, d_out], d_in, rng)?;
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[d_out]))
}

/// Exponential moving average update of batchnorm running statistics.
pub fn update_running_stats(store: &mut ParamStore, stats: &[(String, BatchStats)], momentum: f64) -> Result<()> {
    for (prefix, s) in stats {
        let mean = store.buffer_mut(&format!("{prefix}.running_mean"))?;
        for (r, b) in mean.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        let var = store.buffer_mut(&format!("{prefix}.running_var"))?;
        for (r, b) in var.data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
    Ok(())
}

/// Registers a batchnorm layer: unit scale, zero shift, running mean 0 / var 1.
pub fn init_batchnorm(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0))?;
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[channels]))?;
    store.insert_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[channels]))?;
    store.insert_buffer(&format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0))
}
