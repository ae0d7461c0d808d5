//! Adam with bias correction, operating on `Tensor` grad buffers.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state: first/second moment buffers per parameter, in declaration
/// order, plus the shared step count.
#[derive(Debug, Clone)]
pub struct AdamState<T: Element> {
    step_count: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pub hyper: AdamHyper,
}

impl<T: Element> AdamState<T> {
    pub fn new(param_sizes: &[usize], hyper: AdamHyper) -> Self {
        AdamState {
            step_count: 0,
            m: param_sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
            v: param_sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
            hyper,
        }
    }

    /// Rebuilds state from checkpointed moment buffers.
    pub fn from_parts(m: Vec<Vec<T>>, v: Vec<Vec<T>>, step_count: u64, hyper: AdamHyper) -> Self {
        AdamState { step_count, m, v, hyper }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// One Adam update over all parameters. Every parameter must carry a
    /// gradient from a completed backward pass; grads are consumed (cleared).
    pub fn adam_step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dimension(
                "adam_step",
                format!("{} parameters", self.m.len()),
                params.len().to_string(),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if self.m[i].len() != p.numel() {
                return Err(Error::dimension(
                    format!("adam_step moment buffer {i}"),
                    self.m[i].len().to_string(),
                    p.numel().to_string(),
                ));
            }
            if p.grad().is_none() {
                return Err(Error::Argument(format!("adam_step: parameter {i} has no gradient")));
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let h = self.hyper;
        let (b1, b2) = (T::from_f64(h.beta1), T::from_f64(h.beta2));
        let (one_m_b1, one_m_b2) = (T::from_f64(1.0 - h.beta1), T::from_f64(1.0 - h.beta2));
        let bc1 = T::from_f64(1.0 - h.beta1.powi(t as i32));
        let bc2 = T::from_f64(1.0 - h.beta2.powi(t as i32));
        let (lr, eps) = (T::from_f64(h.lr), T::from_f64(h.eps));
        for (i, p) in params.iter_mut().enumerate() {
            let g: Vec<T> = p.grad().unwrap().to_vec();
            let data = p.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + one_m_b1 * gj;
                v[j] = b2 * v[j] + one_m_b2 * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] = data[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.clear_grad();
        }
        Ok(())
    }
}
