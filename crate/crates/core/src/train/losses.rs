use crate::env::{DiffRollout, Trajectory};
use crate::error::{Error, Result};
use crate::models::{DiscMode, Discriminator, GmmPolicy, Posterior};
use crate::tensor::{Array, NodeId, Tape};

/// Discriminator features of a taped rollout: per-step [obs, action] rows
/// in trajectory-major order (B*T, 10), matching `step_features` on data.
pub fn rollout_features(tape: &mut Tape, roll: &DiffRollout, b: usize) -> Result<NodeId> {
    let horizon = roll.actions.len();
    let mut per_step = Vec::with_capacity(horizon);
    for t in 0..horizon {
        per_step.push(tape.concat_cols(&[roll.obs[t], roll.actions[t]])?);
    }
    // stacked time-major, then permuted to trajectory-major
    let stacked = tape.concat_rows(&per_step)?;
    let mut perm = Vec::with_capacity(b * horizon);
    for bi in 0..b {
        for t in 0..horizon {
            perm.push((t * b + bi) as u32);
        }
    }
    tape.gather_rows(stacked, &perm)
}

/// Behavioural-cloning loss: -mean log pi(a | s, 0) over all steps of the
/// batch, with a zero latent.
pub fn loss_bc(
    tape: &mut Tape,
    policy: &GmmPolicy,
    policy_ids: &[NodeId],
    batch: &[&Trajectory],
    latent_dim: usize,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::invalid("BC loss over an empty batch"));
    }
    let horizon = batch[0].horizon();
    let rows = batch.len() * horizon;
    let mut obs = Vec::with_capacity(rows * 8);
    let mut acts = Vec::with_capacity(rows * 2);
    for traj in batch {
        for t in 0..horizon {
            obs.extend_from_slice(&traj.observations[t]);
            acts.push(traj.actions[t].x);
            acts.push(traj.actions[t].y);
        }
    }
    let obs = tape.constant(Array::new(vec![rows, 8], obs)?);
    let acts = tape.constant(Array::new(vec![rows, 2], acts)?);
    let latent = tape.constant(Array::zeros(vec![rows, latent_dim]));
    let lp = policy.log_prob(tape, policy_ids, obs, latent, acts)?;
    let m = tape.mean(lp);
    Ok(tape.neg(m))
}

/// Reconstruction loss: -log pi(a_t | s_t, g_e) on the data states,
/// averaged over steps and trajectories. `latent` is the (B, L) encoder
/// sample; gradient flows through it into the encoder.
pub fn loss_rec(
    tape: &mut Tape,
    policy: &GmmPolicy,
    policy_ids: &[NodeId],
    batch: &[&Trajectory],
    latent: NodeId,
    latent_dim: usize,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::invalid("reconstruction loss over an empty batch"));
    }
    let horizon = batch[0].horizon();
    let rows = batch.len() * horizon;
    let mut obs = Vec::with_capacity(rows * 8);
    let mut acts = Vec::with_capacity(rows * 2);
    for traj in batch {
        for t in 0..horizon {
            obs.extend_from_slice(&traj.observations[t]);
            acts.push(traj.actions[t].x);
            acts.push(traj.actions[t].y);
        }
    }
    let obs = tape.constant(Array::new(vec![rows, 8], obs)?);
    let acts = tape.constant(Array::new(vec![rows, 2], acts)?);
    debug_assert_eq!(tape.value(latent).shape(), &[batch.len(), latent_dim]);
    // repeat each trajectory's latent across its steps
    let idx: Vec<u32> = (0..batch.len() as u32).flat_map(|b| std::iter::repeat(b).take(horizon)).collect();
    let latent_rows = tape.gather_rows(latent, &idx)?;
    let lp = policy.log_prob(tape, policy_ids, obs, latent_rows, acts)?;
    let m = tape.mean(lp);
    Ok(tape.neg(m))
}

/// Adversarial generator cost sum_t -log D on rollout features, averaged
/// over the batch. In trajectory mode the single score counts once per
/// step, -T log D. Computed as softplus(-logit), which equals -log
/// sigmoid(logit) exactly but keeps a live gradient at extreme logits.
/// The discriminator must be bound frozen by the caller.
pub fn loss_adv(
    tape: &mut Tape,
    disc: &Discriminator,
    disc_ids: &[NodeId],
    feats: NodeId,
    b: usize,
    horizon: usize,
) -> Result<NodeId> {
    let logits = disc.logits_raw(tape, disc_ids, feats)?;
    let neg = tape.neg(logits);
    let nll = tape.softplus(neg);
    let total = tape.sum(nll);
    let scale = match disc.mode {
        DiscMode::PerStep => 1.0 / b as f64,
        DiscMode::Trajectory => horizon as f64 / b as f64,
    };
    Ok(tape.scale(total, scale))
}

/// Discriminator log likelihood E_data[log D] + E_rollout[log(1 - D)],
/// the quantity the discriminator update maximizes. D reads as the
/// probability that a sample is data, so -log D prices unrealistic
/// rollouts for the generator. log D = -softplus(-logit) and
/// log(1 - D) = -softplus(logit), both saturation-free.
pub fn disc_log_likelihood(
    tape: &mut Tape,
    disc: &Discriminator,
    disc_ids: &[NodeId],
    real_feats: NodeId,
    fake_feats: NodeId,
) -> Result<NodeId> {
    let real_logits = disc.logits_raw(tape, disc_ids, real_feats)?;
    let fake_logits = disc.logits_raw(tape, disc_ids, fake_feats)?;
    let neg_real = tape.neg(real_logits);
    let nll_real = tape.softplus(neg_real);
    let nll_fake = tape.softplus(fake_logits);
    let a = tape.mean(nll_real);
    let a = tape.neg(a);
    let c = tape.mean(nll_fake);
    let c = tape.neg(c);
    tape.add(a, c)
}

/// InfoMGAIL bonus: -mean log q(g | rollout, s_0) for the latents each
/// rollout was conditioned on. Trains the posterior and rewards the policy
/// for keeping types recoverable.
pub fn loss_info(
    tape: &mut Tape,
    posterior: &Posterior,
    posterior_ids: &[NodeId],
    rollout_feats: NodeId,
    obs0: NodeId,
    latents: NodeId,
) -> Result<NodeId> {
    let lp = posterior.log_prob(tape, posterior_ids, rollout_feats, obs0, latents)?;
    let m = tape.mean(lp);
    Ok(tape.neg(m))
}
