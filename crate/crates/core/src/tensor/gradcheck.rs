//! Finite-difference verification of the tape.

use super::{Elem, Graph, Tensor};
use crate::error::Result;

/// Compares analytic gradients against central finite differences
/// (f(x+h*e) - f(x-h*e)) / 2h, elementwise, and returns the max relative
/// error with denominator max(|analytic|, |numeric|, 1e-8).
///
/// `f` must be a deterministic map from `x` to a scalar tensor built on the
/// supplied graph.
pub fn grad_check<E: Elem>(
    f: impl Fn(&Graph<E>, &Tensor<E>) -> Result<Tensor<E>>,
    x: &Tensor<E>,
    h: E,
) -> Result<E> {
    let idx: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, h, &idx)
}

/// `grad_check` restricted to `max_elems` coordinates chosen by a seeded
/// stride; keeps end-to-end checks on larger models inside their time
/// budget while still probing every tensor.
pub fn grad_check_sampled<E: Elem>(
    f: impl Fn(&Graph<E>, &Tensor<E>) -> Result<Tensor<E>>,
    x: &Tensor<E>,
    h: E,
    max_elems: usize,
    seed: u64,
) -> Result<E> {
    let n = x.numel();
    let idx: Vec<usize> = if n <= max_elems {
        (0..n).collect()
    } else {
        // deterministic coprime stride walk over the coordinates
        let stride = (seed as usize % n).max(1) | 1;
        let stride = if gcd(stride, n) == 1 { stride } else { 1 };
        (0..max_elems).map(|i| (i * stride + seed as usize / 7) % n).collect()
    };
    grad_check_at(f, x, h, &idx)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Finite-difference check against a parameter that lives inside a model:
/// `loss` rebuilds the forward pass on a fresh graph each call, reading the
/// parameter in place. Coordinates are perturbed through the shared handle
/// and restored afterwards.
pub fn grad_check_param<E: Elem>(
    loss: impl Fn(&Graph<E>) -> Result<Tensor<E>>,
    param: &Tensor<E>,
    h: E,
    max_elems: usize,
    seed: u64,
) -> Result<E> {
    let n = param.numel();
    let coords: Vec<usize> = if n <= max_elems {
        (0..n).collect()
    } else {
        let stride = ((seed as usize % n).max(1)) | 1;
        let stride = if gcd(stride, n) == 1 { stride } else { 1 };
        (0..max_elems)
            .map(|i| (i * stride + seed as usize / 7) % n)
            .collect()
    };

    param.zero_grad();
    let g = Graph::new();
    let l = loss(&g)?;
    g.backward(&l)?;
    let analytic = param
        .grad()
        .unwrap_or_else(|| vec![E::zero(); param.numel()]);
    param.zero_grad();

    let floor = E::from_f64(1e-8);
    let two = E::from_f64(2.0);
    let mut worst = E::zero();
    for &i in &coords {
        let orig = param.data()[i];
        let eval = |v: E| -> Result<E> {
            param.with_data_mut(|d| d[i] = v);
            let g = Graph::no_grad();
            let out = loss(&g)?.item();
            out
        };
        let fp = eval(orig + h)?;
        let fm = eval(orig - h)?;
        param.with_data_mut(|d| d[i] = orig);
        let numeric = (fp - fm) / (two * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        let rel = (analytic[i] - numeric).abs() / denom;
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn grad_check_at<E: Elem>(
    f: impl Fn(&Graph<E>, &Tensor<E>) -> Result<Tensor<E>>,
    x: &Tensor<E>,
    h: E,
    coords: &[usize],
) -> Result<E> {
    let probe = Tensor::from_vec(x.to_vec(), x.shape())?.with_requires_grad();
    let g = Graph::new();
    let loss = f(&g, &probe)?;
    g.backward(&loss)?;
    let analytic = probe
        .grad()
        .unwrap_or_else(|| vec![E::zero(); probe.numel()]);

    let floor = E::from_f64(1e-8);
    let two = E::from_f64(2.0);
    let mut worst = E::zero();
    for &i in coords {
        let base = x.to_vec();
        let eval = |v: E| -> Result<E> {
            let mut d = base.clone();
            d[i] = v;
            let t = Tensor::from_vec(d, x.shape())?;
            let g = Graph::no_grad();
            f(&g, &t)?.item()
        };
        let fp = eval(base[i] + h)?;
        let fm = eval(base[i] - h)?;
        let numeric = (fp - fm) / (two * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        let rel = (analytic[i] - numeric).abs() / denom;
        worst = worst.max(rel);
    }
    Ok(worst)
}
