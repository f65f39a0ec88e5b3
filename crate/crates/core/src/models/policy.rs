use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::{gmm_log_prob, Mlp, ModelParams};
use crate::tensor::{logsumexp, Array, NodeId, Tape};

/// Clamp range for GMM log standard deviations.
pub const LOGSTD_RANGE: (f64, f64) = (-5.0, 2.0);

/// Fixed noise driving one reparameterized policy sample per batch row:
/// a uniform draw for the mixture mode and a standard normal 2-vector.
#[derive(Clone, Debug)]
pub struct PolicyNoise {
    pub uniform: Vec<f64>,
    pub normal: Array,
}

impl PolicyNoise {
    pub fn draw(b: usize, act_dim: usize, rng: &mut impl Rng) -> Self {
        let uniform = (0..b).map(|_| rng.random::<f64>()).collect();
        let normal = Array::new(
            vec![b, act_dim],
            (0..b * act_dim).map(|_| StandardNormal.sample(rng)).collect(),
        )
        .unwrap();
        PolicyNoise { uniform, normal }
    }
}

/// Type-conditioned control policy: a two-hidden-layer tanh MLP over
/// observation ⊕ latent emitting a bimodal diagonal-Gaussian mixture.
#[derive(Clone, Debug)]
pub struct GmmPolicy {
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub act_dim: usize,
    pub n_modes: usize,
    pub mlp: Mlp,
    pub params: ModelParams,
}

pub struct GmmHeads {
    pub logits: NodeId,
    pub means: NodeId,
    pub logstds: NodeId,
}

impl GmmPolicy {
    pub fn new(
        obs_dim: usize,
        latent_dim: usize,
        act_dim: usize,
        n_modes: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut params = ModelParams::default();
        let out = n_modes + 2 * n_modes * act_dim;
        let mlp = Mlp::init(&mut params, "policy", obs_dim + latent_dim, hidden, 2, out, rng);
        GmmPolicy { obs_dim, latent_dim, act_dim, n_modes, mlp, params }
    }

    pub fn heads(&self, tape: &mut Tape, ids: &[NodeId], obs_latent: NodeId) -> Result<GmmHeads> {
        let raw = self.mlp.forward(tape, ids, obs_latent)?;
        let m = self.n_modes;
        let d = self.act_dim;
        let logits = tape.slice_cols(raw, 0, m)?;
        let means = tape.slice_cols(raw, m, m * d)?;
        let logstds_raw = tape.slice_cols(raw, m + m * d, m * d)?;
        let logstds = tape.clamp(logstds_raw, LOGSTD_RANGE.0, LOGSTD_RANGE.1);
        Ok(GmmHeads { logits, means, logstds })
    }

    /// Reparameterized sample: the mixture mode is chosen from the mixture
    /// weights via the uniform noise (treated as non-differentiable), the
    /// action is mean + exp(logstd) * normal within the chosen mode.
    pub fn sample(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        obs: NodeId,
        latent: NodeId,
        noise: &PolicyNoise,
    ) -> Result<NodeId> {
        let x = tape.concat_cols(&[obs, latent])?;
        let heads = self.heads(tape, ids, x)?;
        if !tape.value(heads.logits).all_finite() {
            return Err(Error::Divergence { what: "policy heads".into(), step: 0 });
        }
        let b = tape.value(obs).rows();
        let (m, d) = (self.n_modes, self.act_dim);
        // mode choice from the weight values; gradient flows only through
        // the selected mode's mean and logstd
        let logit_vals = tape.value(heads.logits).clone();
        let mut mask = vec![0.0; b * m * d];
        for i in 0..b {
            let row = logit_vals.row(i);
            let lse = logsumexp(row);
            let mut acc = 0.0;
            let mut chosen = m - 1;
            for k in 0..m {
                acc += (row[k] - lse).exp();
                if noise.uniform[i] < acc {
                    chosen = k;
                    break;
                }
            }
            for j in 0..d {
                mask[i * m * d + chosen * d + j] = 1.0;
            }
        }
        let mask = tape.constant(Array::new(vec![b, m * d], mask)?);
        let sel_means = {
            let picked = tape.mul(heads.means, mask)?;
            sum_mode_blocks(tape, picked, m, d)?
        };
        let sel_logstds = {
            let picked = tape.mul(heads.logstds, mask)?;
            sum_mode_blocks(tape, picked, m, d)?
        };
        let std = tape.exp(sel_logstds);
        let eps = tape.constant(noise.normal.clone());
        let scaled = tape.mul(std, eps)?;
        tape.add(sel_means, scaled)
    }

    /// Mixture log-density of `actions` (constant node) under the policy.
    pub fn log_prob(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        obs: NodeId,
        latent: NodeId,
        actions: NodeId,
    ) -> Result<NodeId> {
        let x = tape.concat_cols(&[obs, latent])?;
        let heads = self.heads(tape, ids, x)?;
        gmm_log_prob(tape, heads.logits, heads.means, heads.logstds, actions, self.n_modes, self.act_dim)
    }

    /// Value-only batched sample for evaluation rollouts.
    pub fn sample_plain(&self, obs_latent: &Array, noise: &PolicyNoise) -> Array {
        let raw = self.mlp.forward_plain(&self.params, obs_latent);
        let b = obs_latent.rows();
        let (m, d) = (self.n_modes, self.act_dim);
        let mut out = Array::zeros(vec![b, d]);
        for i in 0..b {
            let row = raw.row(i);
            let logits = &row[0..m];
            let lse = logsumexp(logits);
            let mut acc = 0.0;
            let mut chosen = m - 1;
            for k in 0..m {
                acc += (logits[k] - lse).exp();
                if noise.uniform[i] < acc {
                    chosen = k;
                    break;
                }
            }
            for j in 0..d {
                let mean = row[m + chosen * d + j];
                let ls = row[m + m * d + chosen * d + j].clamp(LOGSTD_RANGE.0, LOGSTD_RANGE.1);
                out.set(i, j, mean + ls.exp() * noise.normal.at(i, j));
            }
        }
        out
    }

    /// Value-only mixture log-density for one (obs ⊕ latent, action) pair.
    pub fn log_prob_plain(&self, obs_latent: &Array, action: &[f64]) -> f64 {
        let raw = self.mlp.forward_plain(&self.params, obs_latent);
        let row = raw.row(0);
        let (m, d) = (self.n_modes, self.act_dim);
        let logstds: Vec<f64> = row[m + m * d..m + 2 * m * d]
            .iter()
            .map(|v| v.clamp(LOGSTD_RANGE.0, LOGSTD_RANGE.1))
            .collect();
        crate::models::gmm_log_prob_plain(&row[0..m], &row[m..m + m * d], &logstds, action, m, d)
    }
}

/// Fold a (B, M*D) masked block matrix into (B, D) by summing mode blocks.
fn sum_mode_blocks(tape: &mut Tape, x: NodeId, m: usize, d: usize) -> Result<NodeId> {
    let mut acc = tape.slice_cols(x, 0, d)?;
    for k in 1..m {
        let blk = tape.slice_cols(x, k * d, d)?;
        acc = tape.add(acc, blk)?;
    }
    Ok(acc)
}
