//! Task-performance and distributional-realism measurement: test return,
//! goal-feature JSD, lower-goal frequency, and minADE.

use rayon::prelude::*;

use crate::env::{reset, rollout_plain, EnvState, EpisodeConfig, GoalSide, Trajectory, Vec2};
use crate::error::{Error, Result};
use crate::models::{GmmPolicy, LatentPrior, PolicyNoise};
use crate::rng::substream;
use crate::tensor::Array;

/// One evaluation record.
#[derive(Clone, Copy, Debug)]
pub struct MetricReport {
    /// Mean steps-within-delta count per episode.
    pub mean_return: f64,
    /// JSD between agent and expert goal-feature distributions, nats.
    pub jsd_goal: f64,
    /// Fraction of episodes ending in the lower half-plane.
    pub freq_lower: f64,
    /// Minimum average displacement error, if evaluated.
    pub min_ade: Option<f64>,
    pub n_episodes: usize,
    /// Rollouts per data trajectory in the minADE estimate.
    pub minade_k: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "# metrics schema v1 (jsd in nats)\nmean_return,jsd_goal,freq_lower,min_ade,n_episodes,minade_k";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.mean_return,
            self.jsd_goal,
            self.freq_lower,
            self.min_ade.map(|v| v.to_string()).unwrap_or_default(),
            self.n_episodes,
            self.minade_k
        )
    }
}

/// How a trained policy acts at test time: latent drawn once per episode
/// from the prior (hierarchical) or fixed at zero (flat).
pub struct PolicyRunner<'a> {
    pub policy: &'a GmmPolicy,
    pub prior: Option<&'a LatentPrior>,
}

impl PolicyRunner<'_> {
    /// Value-only batched rollouts from the given initial states. Episode i
    /// draws all its noise from `substream(seed, label, index0 + i)`, so
    /// results do not depend on batching or thread schedule.
    pub fn rollouts(
        &self,
        inits: &[EnvState],
        config: &EpisodeConfig,
        seed: u64,
        label: &str,
        index0: u64,
    ) -> Vec<Trajectory> {
        let b = inits.len();
        let latent_dim = self.policy.latent_dim;
        let mut rngs: Vec<_> =
            (0..b).map(|i| substream(seed, label, index0 + i as u64)).collect();
        let mut latents = Array::zeros(vec![b, latent_dim]);
        if let Some(prior) = self.prior {
            for (i, rng) in rngs.iter_mut().enumerate() {
                let z = prior.sample_plain(rng);
                latents.data_mut()[i * latent_dim..(i + 1) * latent_dim].copy_from_slice(&z);
            }
        }
        rollout_plain(inits, config, |obs, _t| {
            let mut noise = PolicyNoise {
                uniform: Vec::with_capacity(b),
                normal: Array::zeros(vec![b, 2]),
            };
            for (i, rng) in rngs.iter_mut().enumerate() {
                let pn = PolicyNoise::draw(1, 2, rng);
                noise.uniform.push(pn.uniform[0]);
                noise.normal.data_mut()[i * 2..i * 2 + 2].copy_from_slice(pn.normal.data());
            }
            let mut ol = Array::zeros(vec![b, 8 + latent_dim]);
            for i in 0..b {
                let row = obs.row(i);
                ol.data_mut()[i * (8 + latent_dim)..i * (8 + latent_dim) + 8]
                    .copy_from_slice(row);
                ol.data_mut()[i * (8 + latent_dim) + 8..(i + 1) * (8 + latent_dim)]
                    .copy_from_slice(&latents.row(i)[..latent_dim]);
            }
            self.policy.sample_plain(&ol, &noise)
        })
    }
}

/// Steps spent within `proximity` of either goal, averaged over fresh
/// episodes; also returns the per-episode goal features.
pub fn test_return(
    runner: &PolicyRunner,
    config: &EpisodeConfig,
    n_episodes: usize,
    seed: u64,
) -> (f64, Vec<f64>) {
    // chunked so one tape of rollouts never holds the full batch
    let chunk = 500usize;
    let n_chunks = n_episodes.div_ceil(chunk);
    let results: Vec<(f64, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * chunk;
            let hi = (lo + chunk).min(n_episodes);
            let inits: Vec<EnvState> = (lo..hi)
                .map(|i| reset(&mut substream(seed, "eval-env", i as u64), config))
                .collect();
            let trajs = runner.rollouts(&inits, config, seed, "eval-noise", lo as u64);
            let mut ret = 0.0;
            let mut feats = Vec::with_capacity(trajs.len());
            for traj in &trajs {
                ret += episode_return(traj, config);
                feats.push(goal_feature(traj));
            }
            (ret, feats)
        })
        .collect();
    let mut total = 0.0;
    let mut features = Vec::with_capacity(n_episodes);
    for (r, f) in results {
        total += r;
        features.extend(f);
    }
    (total / n_episodes as f64, features)
}

/// Steps of one trajectory within the proximity threshold of either goal,
/// counted over the T post-step states; always in [0, T].
pub fn episode_return(traj: &Trajectory, config: &EpisodeConfig) -> f64 {
    let mut count = 0usize;
    for o in traj.observations.iter().skip(1) {
        let agent = Vec2::new(o[0], o[1]);
        let dl = agent.dist(Vec2::new(o[2], o[3]));
        let du = agent.dist(Vec2::new(o[4], o[5]));
        if dl.min(du) < config.proximity {
            count += 1;
        }
    }
    count as f64
}

/// Scripted-expert return, the task-performance ceiling.
pub fn expert_return(config: &EpisodeConfig, n_episodes: usize, seed: u64) -> f64 {
    let mut total = 0.0;
    for i in 0..n_episodes {
        let mut rng = substream(seed, "expert-eval", i as u64);
        let traj = crate::env::expert_rollout(&mut rng, config);
        total += episode_return(&traj, config);
    }
    total / n_episodes as f64
}

/// Goal feature h = sign of the final y position; exact zero maps to +1.
pub fn goal_feature(traj: &Trajectory) -> f64 {
    if traj.final_pos().y < 0.0 {
        -1.0
    } else {
        1.0
    }
}

pub fn goal_feature_of_choice(side: GoalSide) -> f64 {
    match side {
        GoalSide::Lower => -1.0,
        GoalSide::Upper => 1.0,
    }
}

/// Jensen-Shannon divergence between the histograms of two sample sets,
/// natural log. `edges` are bin boundaries producing edges.len()+1 bins;
/// the binary goal feature uses the single edge 0.0.
pub fn jsd_hist(p_samples: &[f64], q_samples: &[f64], edges: &[f64]) -> Result<f64> {
    if p_samples.is_empty() || q_samples.is_empty() {
        return Err(Error::invalid("jsd over an empty sample set"));
    }
    let p = histogram(p_samples, edges);
    let q = histogram(q_samples, edges);
    Ok(jsd_from_probs(&p, &q))
}

fn histogram(samples: &[f64], edges: &[f64]) -> Vec<f64> {
    let mut counts = vec![0.0; edges.len() + 1];
    for &s in samples {
        let bin = edges.partition_point(|&e| e <= s);
        counts[bin] += 1.0;
    }
    let n = samples.len() as f64;
    counts.iter_mut().for_each(|c| *c /= n);
    counts
}

fn jsd_from_probs(p: &[f64], q: &[f64]) -> f64 {
    let kl_to_mid = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(&pa, &pb)| {
                let m = 0.5 * (pa + pb);
                if pa > 0.0 {
                    pa * (pa / m).ln()
                } else {
                    0.0
                }
            })
            .sum::<f64>()
    };
    0.5 * (kl_to_mid(p, q) + kl_to_mid(q, p))
}

/// Minimum average displacement error against one data trajectory: the
/// best of K rollouts replaying the episode's goal scenario, each with an
/// independently sampled type.
pub fn min_ade(
    data: &Trajectory,
    runner: &PolicyRunner,
    k: usize,
    config: &EpisodeConfig,
    seed: u64,
    index0: u64,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("minADE needs K >= 1"));
    }
    let inits = vec![data.init; k];
    let rollouts = runner.rollouts(&inits, config, seed, "minade", index0);
    let horizon = config.horizon;
    let mut best = f64::INFINITY;
    for r in &rollouts {
        let mut acc = 0.0;
        for t in 1..=horizon {
            acc += r.pos(t).dist(data.pos(t));
        }
        best = best.min(acc / horizon as f64);
    }
    Ok(best)
}

/// Mean minADE over a set of data trajectories.
pub fn mean_min_ade(
    data: &[Trajectory],
    runner: &PolicyRunner,
    k: usize,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("minADE over an empty dataset"));
    }
    let vals: Result<Vec<f64>> = data
        .par_iter()
        .enumerate()
        .map(|(i, traj)| min_ade(traj, runner, k, config, seed, (i * k) as u64))
        .collect();
    let vals = vals?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// One-sided sign test: probability of at least `wins` successes in
/// `n` fair coin flips. Ties must be excluded by the caller.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut total = 0.0f64;
    for k in wins..=n {
        total += binomial(n, k);
    }
    total / 2.0f64.powi(n as i32)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}
