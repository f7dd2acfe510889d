//! AdamW with decoupled weight decay. State exists only for trainable
//! parameters; decay applies to matrix-shaped weights (rank >= 2), never to
//! biases or normalization affines.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct AdamW<E: Elem> {
    params: Vec<Tensor<E>>,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    step_count: u64,
    hyper: AdamHyper,
}

impl<E: Elem> AdamW<E> {
    /// Builds state over the trainable parameter list; a frozen tensor in
    /// the list is a contract violation.
    pub fn new(params: Vec<Tensor<E>>, hyper: AdamHyper) -> Result<Self> {
        if let Some(frozen) = params.iter().position(|p| !p.requires_grad()) {
            return Err(Error::contract(format!(
                "optimizer handed a frozen tensor at index {frozen}"
            )));
        }
        let m = params.iter().map(|p| vec![E::zero(); p.numel()]).collect();
        let v = params.iter().map(|p| vec![E::zero(); p.numel()]).collect();
        Ok(AdamW {
            params,
            m,
            v,
            step_count: 0,
            hyper,
        })
    }

    /// Restores state captured by a checkpoint.
    pub fn with_state(
        params: Vec<Tensor<E>>,
        m: Vec<Vec<E>>,
        v: Vec<Vec<E>>,
        step_count: u64,
        hyper: AdamHyper,
    ) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state for {} tensors given {} parameters",
                m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if m[i].len() != p.numel() || v[i].len() != p.numel() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment size mismatch at tensor {i}"
                )));
            }
        }
        Ok(AdamW {
            params,
            m,
            v,
            step_count,
            hyper,
        })
    }

    pub fn params(&self) -> &[Tensor<E>] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn hyper(&self) -> AdamHyper {
        self.hyper
    }

    pub fn moments(&self) -> (&[Vec<E>], &[Vec<E>]) {
        (&self.m, &self.v)
    }

    /// One update: decoupled decay p <- p - lr*wd*p (matrix weights only),
    /// then the bias-corrected Adam moment step. Every parameter must carry
    /// a gradient.
    pub fn step(&mut self, lr: f64, weight_decay: f64) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            if !p.has_grad() {
                return Err(Error::contract(format!(
                    "adamw_step: trainable parameter {i} (shape {:?}) has no gradient",
                    p.shape()
                )));
            }
            let _ = i;
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = E::from_f64(self.hyper.beta1);
        let b2 = E::from_f64(self.hyper.beta2);
        let eps = E::from_f64(self.hyper.eps);
        let lr_e = E::from_f64(lr);
        let bc1 = E::one() - b1.powi(t);
        let bc2 = E::one() - b2.powi(t);
        for (i, p) in self.params.iter().enumerate() {
            let grad = p.grad().expect("checked above");
            let decay = if p.rank() >= 2 && weight_decay > 0.0 {
                E::one() - lr_e * E::from_f64(weight_decay)
            } else {
                E::one()
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            p.with_data_mut(|data| {
                for (j, d) in data.iter_mut().enumerate() {
                    let g = grad[j];
                    m[j] = b1 * m[j] + (E::one() - b1) * g;
                    v[j] = b2 * v[j] + (E::one() - b2) * g * g;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    *d = *d * decay - lr_e * mhat / (vhat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
