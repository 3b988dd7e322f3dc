use std::collections::BTreeMap;

use crate::error::Result;

use super::{ParamStore, Tape, Tensor, Var};

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences. `f` receives a fresh tape and the input variable and
/// must return a scalar variable. Returns
/// `max_i |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (analytic, _) = reverse_grad(&f, x)?;
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let ad = analytic.data()[i];
        let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Value and reverse-mode gradient of `f` at `x`.
pub fn reverse_grad<F>(f: &F, x: &Tensor) -> Result<(Tensor, f64)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let y = f(&mut tape, xv)?;
    let value = tape.value(y).item();
    let grads = tape.backward(y);
    Ok((grads.get_or_zero(xv), value))
}

/// Finite-difference check of parameter gradients. `f` evaluates the loss
/// and its reverse-mode gradients for a store; up to `per_tensor` evenly
/// spaced coordinates of every parameter with a gradient are perturbed.
/// Same error measure as [`gradcheck`].
pub fn param_gradcheck<F>(store: &ParamStore, f: F, h: f64, per_tensor: usize) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)>,
{
    let (_, grads) = f(store)?;
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (name, g) in &grads {
        let n = g.len();
        let picks = per_tensor.min(n).max(1);
        for j in 0..picks {
            let i = j * n / picks;
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + h;
            let up = f(&probe)?.0;
            probe.get_mut(name)?.data_mut()[i] = orig - h;
            let down = f(&probe)?.0;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = g.data()[i];
            worst = worst.max((ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8));
        }
    }
    Ok(worst)
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, xv)?;
    Ok(tape.value(y).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new(&[5], vec![0.3, -1.2, 2.0, 0.01, -0.7]).unwrap();
        let err = gradcheck(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = |t: &mut Tape, v: Var| {
            let s = t.sum(v);
            Ok(t.scale(s, 0.0))
        };
        let (g, _) = reverse_grad(&f, &x).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert_eq!(gradcheck(f, &x, 1e-5).unwrap(), 0.0);
    }
}
