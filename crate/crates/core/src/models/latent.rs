use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::models::policy::LOGSTD_RANGE;
use crate::models::{step_features, LatentSpec, Mlp, ModelParams};
use crate::tensor::{logsumexp, Array, NodeId, Tape};

/// A distribution over latent types on the tape: a diagonal Gaussian or
/// one categorical per one-hot block. Row counts are 1 (prior) or B.
pub enum LatentDist {
    Gaussian { mean: NodeId, logstd: NodeId },
    Categorical { block_logits: Vec<NodeId> },
}

/// Trajectory encoder e(g|tau): a per-timestep embedder over
/// (observation, action) ⊕ learned positional embedding, max-pooled over
/// time, with a head emitting Gaussian parameters or block logits.
#[derive(Clone, Debug)]
pub struct TrajectoryEncoder {
    pub spec: LatentSpec,
    pub horizon: usize,
    pub posemb_dim: usize,
    pub(crate) embedder: Mlp,
    pub(crate) head: Mlp,
    posemb_idx: usize,
    pub params: ModelParams,
}

impl TrajectoryEncoder {
    pub fn new(
        spec: LatentSpec,
        horizon: usize,
        step_dim: usize,
        posemb_dim: usize,
        hidden: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut params = ModelParams::default();
        let embedder = Mlp::init(
            &mut params,
            "encoder.embed",
            step_dim + posemb_dim,
            hidden,
            2,
            embed_dim,
            rng,
        );
        let out_dim = match spec {
            LatentSpec::Continuous { dim } => 2 * dim,
            LatentSpec::Discrete { blocks, block_size } => blocks * block_size,
        };
        let head = Mlp::init(&mut params, "encoder.head", embed_dim, hidden, 0, out_dim, rng);
        // positional embeddings initialised like weights so channels differ
        let posemb = super::xavier(horizon, posemb_dim, rng);
        let posemb_idx = params.push("encoder.posemb", posemb);
        TrajectoryEncoder { spec, horizon, posemb_dim, embedder, head, posemb_idx, params }
    }

    /// Pooled embedding (B, E) of a batch of trajectories given as a
    /// constant (B*T, step_dim) feature node in trajectory-major order.
    fn pooled(&self, tape: &mut Tape, ids: &[NodeId], feats: NodeId, b: usize) -> Result<NodeId> {
        let t = self.horizon;
        let idx: Vec<u32> = (0..b as u32)
            .flat_map(|_| 0..t as u32)
            .collect();
        let pos = tape.gather_rows(ids[self.posemb_idx], &idx)?;
        let x = tape.concat_cols(&[feats, pos])?;
        let emb = self.embedder.forward(tape, ids, x)?;
        tape.max_pool_rows(emb, t)
    }

    /// Encoder distribution for a batch of data trajectories.
    pub fn dist(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        trajs: &[&Trajectory],
    ) -> Result<LatentDist> {
        let feats = tape.constant(step_features(trajs));
        let pooled = self.pooled(tape, ids, feats, trajs.len())?;
        let raw = self.head.forward(tape, ids, pooled)?;
        Ok(match self.spec {
            LatentSpec::Continuous { dim } => {
                let mean = tape.slice_cols(raw, 0, dim)?;
                let ls = tape.slice_cols(raw, dim, dim)?;
                let logstd = tape.clamp(ls, LOGSTD_RANGE.0, LOGSTD_RANGE.1);
                LatentDist::Gaussian { mean, logstd }
            }
            LatentSpec::Discrete { blocks, block_size } => {
                let mut block_logits = Vec::with_capacity(blocks);
                for k in 0..blocks {
                    block_logits.push(tape.slice_cols(raw, k * block_size, block_size)?);
                }
                LatentDist::Categorical { block_logits }
            }
        })
    }

    /// Sample a latent from an encoder distribution: reparameterized for
    /// Gaussians, straight-through Gumbel argmax per block for discrete
    /// types. `noise` must hold one standard-normal (B, dim) array or one
    /// uniform (B, blocks*block_size) array.
    pub fn sample(
        &self,
        tape: &mut Tape,
        dist: &LatentDist,
        noise: &Array,
    ) -> Result<NodeId> {
        match dist {
            LatentDist::Gaussian { mean, logstd } => {
                let std = tape.exp(*logstd);
                let eps = tape.constant(noise.clone());
                let scaled = tape.mul(std, eps)?;
                tape.add(*mean, scaled)
            }
            LatentDist::Categorical { block_logits } => {
                let mut parts = Vec::with_capacity(block_logits.len());
                let mut col = 0;
                for &logits in block_logits {
                    let k = tape.value(logits).cols();
                    let b = tape.value(logits).rows();
                    let mut gumbel = Array::zeros(vec![b, k]);
                    for (i, g) in gumbel.data_mut().iter_mut().enumerate() {
                        let u = noise.data()[(i / k) * noise.cols() + col + (i % k)];
                        *g = -(-(u.max(1e-12)).ln()).ln();
                    }
                    col += k;
                    let gn = tape.constant(gumbel);
                    let z = tape.add(logits, gn)?;
                    parts.push(tape.straight_through_onehot(z)?);
                }
                tape.concat_cols(&parts)
            }
        }
    }
}

/// Learnable unconditional latent prior p(g).
#[derive(Clone, Debug)]
pub struct LatentPrior {
    pub spec: LatentSpec,
    pub params: ModelParams,
}

impl LatentPrior {
    pub fn new(spec: LatentSpec) -> Self {
        let mut params = ModelParams::default();
        match spec {
            LatentSpec::Continuous { dim } => {
                params.push("prior.mean", Array::matrix(1, dim, vec![0.0; dim]).unwrap());
                params.push("prior.logstd", Array::matrix(1, dim, vec![0.0; dim]).unwrap());
            }
            LatentSpec::Discrete { blocks, block_size } => {
                for k in 0..blocks {
                    params.push(
                        format!("prior.logits{k}"),
                        Array::matrix(1, block_size, vec![0.0; block_size]).unwrap(),
                    );
                }
            }
        }
        LatentPrior { spec, params }
    }

    pub fn dist(&self, tape: &mut Tape, ids: &[NodeId]) -> LatentDist {
        match self.spec {
            LatentSpec::Continuous { .. } => {
                let logstd = tape.clamp(ids[1], LOGSTD_RANGE.0, LOGSTD_RANGE.1);
                LatentDist::Gaussian { mean: ids[0], logstd }
            }
            LatentSpec::Discrete { .. } => {
                LatentDist::Categorical { block_logits: ids.to_vec() }
            }
        }
    }

    /// Draw one latent value (off-tape).
    pub fn sample_plain(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self.spec {
            LatentSpec::Continuous { dim } => {
                let mean = &self.params.entries[0].value;
                let logstd = &self.params.entries[1].value;
                (0..dim)
                    .map(|d| {
                        let eps: f64 = StandardNormal.sample(rng);
                        let ls = logstd.data()[d].clamp(LOGSTD_RANGE.0, LOGSTD_RANGE.1);
                        mean.data()[d] + ls.exp() * eps
                    })
                    .collect()
            }
            LatentSpec::Discrete { blocks, block_size } => {
                let mut out = vec![0.0; blocks * block_size];
                for k in 0..blocks {
                    let logits = self.params.entries[k].value.data();
                    let lse = logsumexp(logits);
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut chosen = block_size - 1;
                    for j in 0..block_size {
                        acc += (logits[j] - lse).exp();
                        if u < acc {
                            chosen = j;
                            break;
                        }
                    }
                    out[k * block_size + chosen] = 1.0;
                }
                out
            }
        }
    }

    pub fn sample_plain_batch(&self, b: usize, rng: &mut impl Rng) -> Array {
        let dim = self.spec.total_dim();
        let mut data = Vec::with_capacity(b * dim);
        for _ in 0..b {
            data.extend(self.sample_plain(rng));
        }
        Array::new(vec![b, dim], data).unwrap()
    }
}

/// Expand a possibly (1, n) node to (b, n) by row repetition.
fn rows_to(tape: &mut Tape, x: NodeId, b: usize) -> Result<NodeId> {
    if tape.value(x).rows() == b {
        Ok(x)
    } else {
        tape.gather_rows(x, &vec![0u32; b])
    }
}

/// KL(p ‖ q) per batch row, (B, 1). Either side may have a single row that
/// broadcasts over the other's batch. Mixing latent kinds is an error.
pub fn kl_divergence(tape: &mut Tape, p: &LatentDist, q: &LatentDist) -> Result<NodeId> {
    match (p, q) {
        (
            LatentDist::Gaussian { mean: mp, logstd: lp },
            LatentDist::Gaussian { mean: mq, logstd: lq },
        ) => {
            let b = tape.value(*mp).rows().max(tape.value(*mq).rows());
            let mp = rows_to(tape, *mp, b)?;
            let lp = rows_to(tape, *lp, b)?;
            let mq = rows_to(tape, *mq, b)?;
            let lq = rows_to(tape, *lq, b)?;
            // log sq/sp + (sp^2 + (mp-mq)^2) / (2 sq^2) - 1/2, per dim
            let d1 = tape.sub(lq, lp)?;
            let two_lp = tape.scale(lp, 2.0);
            let two_lq = tape.scale(lq, 2.0);
            let ratio = tape.sub(two_lp, two_lq)?;
            let e1 = tape.exp(ratio);
            let e1 = tape.scale(e1, 0.5);
            let diff = tape.sub(mp, mq)?;
            let sq = tape.mul(diff, diff)?;
            let neg_two_lq = tape.scale(lq, -2.0);
            let inv_var_q = tape.exp(neg_two_lq);
            let e2 = tape.mul(sq, inv_var_q)?;
            let e2 = tape.scale(e2, 0.5);
            let s = tape.add(d1, e1)?;
            let s = tape.add(s, e2)?;
            let half = tape.constant(Array::scalar(0.5));
            let per_dim = tape.sub(s, half)?;
            tape.sum_axis(per_dim, 1)
        }
        (
            LatentDist::Categorical { block_logits: pb },
            LatentDist::Categorical { block_logits: qb },
        ) => {
            if pb.len() != qb.len() {
                return Err(Error::invalid(format!(
                    "categorical KL with {} vs {} blocks",
                    pb.len(),
                    qb.len()
                )));
            }
            let b = pb
                .iter()
                .chain(qb)
                .map(|&n| tape.value(n).rows())
                .max()
                .unwrap_or(1);
            let mut total: Option<NodeId> = None;
            for (&pl, &ql) in pb.iter().zip(qb) {
                let pl = rows_to(tape, pl, b)?;
                let ql = rows_to(tape, ql, b)?;
                let p_lse = tape.logsumexp_axis(pl, 1)?;
                let log_p = tape.sub(pl, p_lse)?;
                let q_lse = tape.logsumexp_axis(ql, 1)?;
                let log_q = tape.sub(ql, q_lse)?;
                let p = tape.exp(log_p);
                let diff = tape.sub(log_p, log_q)?;
                let terms = tape.mul(p, diff)?;
                let kl = tape.sum_axis(terms, 1)?;
                total = Some(match total {
                    None => kl,
                    Some(acc) => tape.add(acc, kl)?,
                });
            }
            Ok(total.expect("at least one block"))
        }
        _ => Err(Error::invalid("latent mode mismatch between prior and encoder")),
    }
}

/// log density (Gaussian) or log probability (categorical blocks) of a
/// constant latent sample under a distribution; (B, 1).
pub fn log_prob_under(tape: &mut Tape, dist: &LatentDist, sample: NodeId) -> Result<NodeId> {
    match dist {
        LatentDist::Gaussian { mean, logstd } => {
            let b = tape.value(sample).rows();
            let dim = tape.value(sample).cols();
            let mean = rows_to(tape, *mean, b)?;
            let logstd = rows_to(tape, *logstd, b)?;
            let diff = tape.sub(sample, mean)?;
            let neg_ls = tape.neg(logstd);
            let inv = tape.exp(neg_ls);
            let z = tape.mul(diff, inv)?;
            let z2 = tape.mul(z, z)?;
            let quad = tape.sum_axis(z2, 1)?;
            let logdet = tape.sum_axis(logstd, 1)?;
            let lp = tape.scale(quad, -0.5);
            let lp = tape.sub(lp, logdet)?;
            let c = tape.constant(Array::scalar(0.5 * std::f64::consts::TAU.ln() * dim as f64));
            tape.sub(lp, c)
        }
        LatentDist::Categorical { block_logits } => {
            let b = tape.value(sample).rows();
            let mut total: Option<NodeId> = None;
            let mut col = 0;
            for &logits in block_logits {
                let k = tape.value(logits).cols();
                let logits = rows_to(tape, logits, b)?;
                let lse = tape.logsumexp_axis(logits, 1)?;
                let log_p = tape.sub(logits, lse)?;
                let onehot = tape.slice_cols(sample, col, k)?;
                col += k;
                let picked = tape.mul(log_p, onehot)?;
                let lp = tape.sum_axis(picked, 1)?;
                total = Some(match total {
                    None => lp,
                    Some(acc) => tape.add(acc, lp)?,
                });
            }
            total.ok_or_else(|| Error::invalid("no categorical blocks"))
        }
    }
}

/// Standard-normal (continuous) or uniform (discrete) reference used by
/// the information-bottleneck KL mode and fixed InfoMGAIL priors.
pub fn reference_dist(tape: &mut Tape, spec: LatentSpec) -> LatentDist {
    match spec {
        LatentSpec::Continuous { dim } => {
            let mean = tape.constant(Array::matrix(1, dim, vec![0.0; dim]).unwrap());
            let logstd = tape.constant(Array::matrix(1, dim, vec![0.0; dim]).unwrap());
            LatentDist::Gaussian { mean, logstd }
        }
        LatentSpec::Discrete { blocks, block_size } => {
            let block_logits = (0..blocks)
                .map(|_| tape.constant(Array::matrix(1, block_size, vec![0.0; block_size]).unwrap()))
                .collect();
            LatentDist::Categorical { block_logits }
        }
    }
}
