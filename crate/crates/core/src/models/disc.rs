use rand::Rng;

use crate::error::Result;
use crate::models::latent::LatentDist;
use crate::models::policy::LOGSTD_RANGE;
use crate::models::{LatentSpec, Mlp, ModelParams};
use crate::tensor::{NodeId, Tape};

/// Logit clamp keeping discriminator outputs strictly inside (0, 1).
pub const LOGIT_CLAMP: f64 = 20.0;

/// Whether the discriminator scores each step or whole trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscMode {
    /// One logit per (observation, action) step.
    PerStep,
    /// Per-step embeddings max-pooled over time, one logit per trajectory.
    Trajectory,
}

/// Discriminator D(s, a): per-timestep MLP embedding of width `embed`,
/// scored per step or per trajectory after max-pooling.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub mode: DiscMode,
    pub horizon: usize,
    pub(crate) embedder: Mlp,
    pub(crate) head: Mlp,
    pub params: ModelParams,
}

impl Discriminator {
    pub fn new(
        mode: DiscMode,
        horizon: usize,
        step_dim: usize,
        embed: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut params = ModelParams::default();
        let embedder = Mlp::init(&mut params, "disc.embed", step_dim, embed, 2, embed, rng);
        let head = Mlp::init(&mut params, "disc.head", embed, embed, 0, 1, rng);
        Discriminator { mode, horizon, embedder, head, params }
    }

    /// Raw logits for a (B*T, step_dim) feature node in trajectory-major
    /// order: (B*T, 1) per-step or (B, 1) per trajectory. Loss paths use
    /// these through softplus so extreme logits keep a live gradient.
    pub fn logits_raw(&self, tape: &mut Tape, ids: &[NodeId], feats: NodeId) -> Result<NodeId> {
        let emb = self.embedder.forward(tape, ids, feats)?;
        match self.mode {
            DiscMode::PerStep => self.head.forward(tape, ids, emb),
            DiscMode::Trajectory => {
                let pooled = tape.max_pool_rows(emb, self.horizon)?;
                self.head.forward(tape, ids, pooled)
            }
        }
    }

    /// Logits clamped to [-20, 20], the probability-score surface.
    pub fn logits(&self, tape: &mut Tape, ids: &[NodeId], feats: NodeId) -> Result<NodeId> {
        let raw = self.logits_raw(tape, ids, feats)?;
        Ok(tape.clamp(raw, -LOGIT_CLAMP, LOGIT_CLAMP))
    }

    /// Probabilities in (sigmoid(-20), sigmoid(20)).
    pub fn score(&self, tape: &mut Tape, ids: &[NodeId], feats: NodeId) -> Result<NodeId> {
        let l = self.logits(tape, ids, feats)?;
        Ok(tape.sigmoid(l))
    }
}

/// InfoMGAIL posterior q(g | rollout, s_0): discriminator-style per-step
/// embedding max-pooled over time, concatenated with the initial
/// observation, emitting a GMM over continuous latents or block logits.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub spec: LatentSpec,
    pub horizon: usize,
    pub n_modes: usize,
    embedder: Mlp,
    head: Mlp,
    pub params: ModelParams,
}

impl Posterior {
    pub fn new(
        spec: LatentSpec,
        horizon: usize,
        step_dim: usize,
        obs_dim: usize,
        embed: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut params = ModelParams::default();
        let embedder = Mlp::init(&mut params, "posterior.embed", step_dim, embed, 2, embed, rng);
        let n_modes = 2;
        let out_dim = match spec {
            LatentSpec::Continuous { dim } => n_modes + 2 * n_modes * dim,
            LatentSpec::Discrete { blocks, block_size } => blocks * block_size,
        };
        let head = Mlp::init(&mut params, "posterior.head", embed + obs_dim, embed, 0, out_dim, rng);
        Posterior { spec, horizon, n_modes, embedder, head, params }
    }

    /// Log-probability of the conditioning latents (constant (B, L) node)
    /// given rollout step features (B*T, step_dim) and initial
    /// observations (B, obs_dim).
    pub fn log_prob(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        feats: NodeId,
        obs0: NodeId,
        latents: NodeId,
    ) -> Result<NodeId> {
        let emb = self.embedder.forward(tape, ids, feats)?;
        let pooled = tape.max_pool_rows(emb, self.horizon)?;
        let x = tape.concat_cols(&[pooled, obs0])?;
        let raw = self.head.forward(tape, ids, x)?;
        match self.spec {
            LatentSpec::Continuous { dim } => {
                let m = self.n_modes;
                let logits = tape.slice_cols(raw, 0, m)?;
                let means = tape.slice_cols(raw, m, m * dim)?;
                let ls = tape.slice_cols(raw, m + m * dim, m * dim)?;
                let logstds = tape.clamp(ls, LOGSTD_RANGE.0, LOGSTD_RANGE.1);
                crate::models::gmm_log_prob(tape, logits, means, logstds, latents, m, dim)
            }
            LatentSpec::Discrete { blocks, block_size } => {
                let block_logits = (0..blocks)
                    .map(|k| tape.slice_cols(raw, k * block_size, block_size))
                    .collect::<Result<Vec<_>>>()?;
                let dist = LatentDist::Categorical { block_logits };
                crate::models::latent::log_prob_under(tape, &dist, latents)
            }
        }
    }
}
