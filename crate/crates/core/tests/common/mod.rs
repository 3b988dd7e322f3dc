#![allow(dead_code)]

pub mod oracles;

use kwsnet_core::gradcore::{Tape, Tensor, Var};
use kwsnet_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(x * weights)` for a fixed random weight tensor: a scalar probe
/// that sees every output coordinate with a distinct coefficient.
pub fn probe(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = randn(t.shape(x), &mut rng(seed ^ 0x5eed));
    let w = t.constant(w);
    let m = t.mul(x, w)?;
    Ok(t.sum(m))
}
