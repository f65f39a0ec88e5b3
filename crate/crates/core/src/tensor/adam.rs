use crate::error::{Error, Result};
use crate::tensor::Array;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for one parameter group. Moment arrays are allocated on the
/// first step and shape-match their parameters afterwards.
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Array>,
    v: Vec<Array>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, m: Vec::new(), v: Vec::new(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over a parameter group. `grads[i]`
    /// must be present and shape-match `params[i]`.
    pub fn step(&mut self, params: &mut [Array], grads: &[Option<Array>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "adam: {} params but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array::zeros(p.shape().to_vec())).collect();
            self.v = params.iter().map(|p| Array::zeros(p.shape().to_vec())).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i]
                .as_ref()
                .ok_or_else(|| Error::MissingGrad(format!("group index {}", i)))?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam-step",
                    details: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pj -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Scale gradients in place so their joint Euclidean norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<Array>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        sq += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
