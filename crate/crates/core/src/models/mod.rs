//! Learnable networks: type-conditioned GMM control policy, trajectory
//! encoder, latent prior, discriminator and InfoMGAIL posterior.
//!
//! Parameter sets are immutable snapshots between updates; every forward
//! pass first binds the parameters onto a tape (trainable or frozen), so
//! generator and discriminator updates can never leak gradients into each
//! other's weights.

mod checkpoint;
mod disc;
mod latent;
mod policy;
#[cfg(test)]
mod tests;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use disc::{DiscMode, Discriminator, Posterior};
pub use latent::{kl_divergence, log_prob_under, reference_dist, LatentDist, LatentPrior, TrajectoryEncoder};
pub use policy::{GmmPolicy, PolicyNoise};

use rand::Rng;

use crate::env::Trajectory;
use crate::error::Result;
use crate::tensor::{matmul_raw, Array, GradientMap, NodeId, Tape};

/// Latent type layout: a continuous vector or a concatenation of one-hot
/// blocks trained with straight-through gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSpec {
    Continuous { dim: usize },
    Discrete { blocks: usize, block_size: usize },
}

impl LatentSpec {
    pub fn total_dim(&self) -> usize {
        match *self {
            LatentSpec::Continuous { dim } => dim,
            LatentSpec::Discrete { blocks, block_size } => blocks * block_size,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, LatentSpec::Discrete { .. })
    }
}

/// One named parameter array.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Array,
}

/// Ordered collection of named parameters for one network.
#[derive(Clone, Debug, Default)]
pub struct ModelParams {
    pub entries: Vec<Param>,
}

impl ModelParams {
    fn push(&mut self, name: impl Into<String>, value: Array) -> usize {
        self.entries.push(Param { name: name.into(), value });
        self.entries.len() - 1
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Register every parameter on a tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Gradients aligned with `entries`; parameters the sweep never reached
    /// get explicit zeros so optimizer bookkeeping stays total.
    pub fn grads_or_zeros(&self, bound: &[NodeId], gmap: &GradientMap) -> Vec<Option<Array>> {
        self.entries
            .iter()
            .zip(bound)
            .map(|(p, &id)| {
                Some(
                    gmap.get(id)
                        .cloned()
                        .unwrap_or_else(|| Array::zeros(p.value.shape().to_vec())),
                )
            })
            .collect()
    }

    pub fn values(&self) -> Vec<&Array> {
        self.entries.iter().map(|p| &p.value).collect()
    }
}

/// Layout of one MLP inside a ModelParams: `hidden_layers` tanh layers
/// followed by a linear head. Xavier-uniform weights, zero biases.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub in_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub out_dim: usize,
    first: usize,
}

impl Mlp {
    pub fn init(
        params: &mut ModelParams,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Mlp {
        let first = params.entries.len();
        let mut fan_in = in_dim;
        for l in 0..hidden_layers {
            params.push(format!("{prefix}.w{l}"), xavier(fan_in, hidden, rng));
            params.push(format!("{prefix}.b{l}"), Array::matrix(1, hidden, vec![0.0; hidden]).unwrap());
            fan_in = hidden;
        }
        params.push(format!("{prefix}.head.w"), xavier(fan_in, out_dim, rng));
        params.push(format!("{prefix}.head.b"), Array::matrix(1, out_dim, vec![0.0; out_dim]).unwrap());
        Mlp { in_dim, hidden, hidden_layers, out_dim, first }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for l in 0..self.hidden_layers {
            let w = ids[self.first + 2 * l];
            let b = ids[self.first + 2 * l + 1];
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            h = tape.tanh(z);
        }
        let w = ids[self.first + 2 * self.hidden_layers];
        let b = ids[self.first + 2 * self.hidden_layers + 1];
        let z = tape.matmul(h, w)?;
        tape.add(z, b)
    }

    /// Value-only forward pass over raw parameter arrays; must agree with
    /// the taped path bit for bit (covered by tests).
    pub fn forward_plain(&self, params: &ModelParams, x: &Array) -> Array {
        let mut h = x.clone();
        for l in 0..self.hidden_layers {
            let w = &params.entries[self.first + 2 * l].value;
            let b = &params.entries[self.first + 2 * l + 1].value;
            h = dense(&h, w, b, true);
        }
        let w = &params.entries[self.first + 2 * self.hidden_layers].value;
        let b = &params.entries[self.first + 2 * self.hidden_layers + 1].value;
        dense(&h, w, b, false)
    }
}

fn dense(x: &Array, w: &Array, b: &Array, tanh: bool) -> Array {
    let (m, k, n) = (x.rows(), x.cols(), w.cols());
    let mut out = matmul_raw(x.data(), w.data(), m, k, n);
    for i in 0..m {
        for j in 0..n {
            let v = out[i * n + j] + b.data()[j];
            out[i * n + j] = if tanh { v.tanh() } else { v };
        }
    }
    Array::new(vec![m, n], out).unwrap()
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Array {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit).collect();
    Array::matrix(fan_in, fan_out, data).unwrap()
}

/// Per-step features of a batch of trajectories: rows are trajectory-major
/// `(b * T + t)`, each row `[obs_t (8), act_t (2)]`.
pub fn step_features(trajs: &[&Trajectory]) -> Array {
    let t_len = trajs[0].horizon();
    let mut data = Vec::with_capacity(trajs.len() * t_len * 10);
    for traj in trajs {
        for t in 0..t_len {
            data.extend_from_slice(&traj.observations[t]);
            data.push(traj.actions[t].x);
            data.push(traj.actions[t].y);
        }
    }
    Array::new(vec![trajs.len() * t_len, 10], data).unwrap()
}

/// Shared Gaussian-mixture log-density: logsumexp over modes of
/// log weight + diagonal Gaussian log-pdf. `x` is a (B, D) node, heads are
/// (B, M) and (B, M*D). Returns (B, 1).
pub fn gmm_log_prob(
    tape: &mut Tape,
    logits: NodeId,
    means: NodeId,
    logstds: NodeId,
    x: NodeId,
    n_modes: usize,
    dim: usize,
) -> Result<NodeId> {
    let lse = tape.logsumexp_axis(logits, 1)?;
    let log_w = tape.sub(logits, lse)?; // (B, M) column-broadcast
    let mut per_mode = Vec::with_capacity(n_modes);
    let half_ln_2pi = 0.5 * (std::f64::consts::TAU).ln() * dim as f64;
    for k in 0..n_modes {
        let mean_k = tape.slice_cols(means, k * dim, dim)?;
        let logstd_k = tape.slice_cols(logstds, k * dim, dim)?;
        let diff = tape.sub(x, mean_k)?;
        let inv_std = {
            let n = tape.neg(logstd_k);
            tape.exp(n)
        };
        let z = tape.mul(diff, inv_std)?;
        let z2 = tape.mul(z, z)?;
        let quad = tape.sum_axis(z2, 1)?;
        let logdet = tape.sum_axis(logstd_k, 1)?;
        let half_quad = tape.scale(quad, -0.5);
        let t1 = tape.sub(half_quad, logdet)?;
        let c = tape.constant(Array::scalar(half_ln_2pi));
        let lp = tape.sub(t1, c)?;
        per_mode.push(lp);
    }
    let lp_mat = tape.concat_cols(&per_mode)?;
    let total = tape.add(log_w, lp_mat)?;
    tape.logsumexp_axis(total, 1)
}

/// Value-only mixture log-density for one row.
pub fn gmm_log_prob_plain(
    weights_logits: &[f64],
    means: &[f64],
    logstds: &[f64],
    x: &[f64],
    n_modes: usize,
    dim: usize,
) -> f64 {
    let lse = crate::tensor::logsumexp(weights_logits);
    let mut terms = Vec::with_capacity(n_modes);
    for k in 0..n_modes {
        let mut lp = weights_logits[k] - lse;
        for d in 0..dim {
            let mu = means[k * dim + d];
            let ls = logstds[k * dim + d];
            let z = (x[d] - mu) * (-ls).exp();
            lp += -0.5 * z * z - ls - 0.5 * std::f64::consts::TAU.ln();
        }
        terms.push(lp);
    }
    crate::tensor::logsumexp(&terms)
}
