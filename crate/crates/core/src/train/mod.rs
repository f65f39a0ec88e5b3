//! Training objectives (BC, adversarial, reconstruction, KL, InfoMGAIL
//! bonus) and the type-conditioned training loop with minibatch split.
//!
//! One `Trainer` owns all networks plus two Adam states (generator and
//! discriminator). Every step rebuilds a fresh tape, so generator updates
//! can never touch discriminator weights and vice versa.

mod losses;
#[cfg(test)]
mod tests;

pub use losses::{
    disc_log_likelihood, loss_adv, loss_bc, loss_info, loss_rec, rollout_features,
};

use rand::Rng;

use crate::env::{Dataset, EpisodeConfig, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::{goal_feature, jsd_hist, test_return, MetricReport, PolicyRunner};
use crate::models::{
    kl_divergence, log_prob_under, reference_dist, Checkpoint, DiscMode, Discriminator, GmmPolicy,
    LatentDist, LatentPrior, LatentSpec, ModelParams, PolicyNoise, Posterior, TrajectoryEncoder,
};
use crate::rng::{stream, substream};
use crate::tensor::{clip_global_norm, Array, AdamConfig, AdamState, NodeId, Tape};

/// The trained model family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    Bc,
    Mgail,
    InfoMgail,
    Rtc,
    NaiveHierarchy,
}

impl Algo {
    pub fn parse(s: &str) -> Result<Algo> {
        Ok(match s {
            "bc" => Algo::Bc,
            "mgail" => Algo::Mgail,
            "infomgail" => Algo::InfoMgail,
            "rtc" => Algo::Rtc,
            "naive" | "naive_hierarchy" => Algo::NaiveHierarchy,
            other => return Err(Error::invalid(format!("unknown algo `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Algo::Bc => "bc",
            Algo::Mgail => "mgail",
            Algo::InfoMgail => "infomgail",
            Algo::Rtc => "rtc",
            Algo::NaiveHierarchy => "naive",
        }
    }

    /// Hierarchical algos draw test-time types from a prior.
    pub fn is_hierarchical(&self) -> bool {
        matches!(self, Algo::InfoMgail | Algo::Rtc | Algo::NaiveHierarchy)
    }
}

/// Which KL composition regularises the latent channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlMode {
    /// beta * KL(prior || encoder), the printed objective. Default.
    PriorEncoder,
    /// beta * KL(encoder || prior).
    EncoderPrior,
    /// Prior cross-entropy on encoder samples plus beta * KL(encoder ||
    /// standard reference) information bottleneck.
    PriorCeBottleneck,
}

impl KlMode {
    pub fn parse(s: &str) -> Result<KlMode> {
        Ok(match s {
            "prior_encoder" => KlMode::PriorEncoder,
            "encoder_prior" => KlMode::EncoderPrior,
            "prior_ce_bottleneck" => KlMode::PriorCeBottleneck,
            other => return Err(Error::invalid(format!("unknown kl_mode `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            KlMode::PriorEncoder => "prior_encoder",
            KlMode::EncoderPrior => "encoder_prior",
            KlMode::PriorCeBottleneck => "prior_ce_bottleneck",
        }
    }
}

/// All training hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    /// Fraction of each minibatch rolled out under encoder types.
    pub f: f64,
    pub lambda_adv: f64,
    pub beta: f64,
    pub batch_size: usize,
    /// Learning rate for the adversarial algos.
    pub lr: f64,
    /// Learning rate for plain BC.
    pub lr_bc: f64,
    /// Discriminator learning rate; defaults to `lr`.
    pub disc_lr: f64,
    pub total_steps: u64,
    pub disc_updates: usize,
    pub bc_aux_weight: f64,
    pub grad_clip: f64,
    pub kl_mode: KlMode,
    pub disc_mode: DiscMode,
    pub latent: LatentSpec,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub infomgail_weight: f64,
    pub hidden: usize,
    pub disc_embed: usize,
    pub n_modes: usize,
    pub posemb_dim: usize,
    /// Linearly anneal f from 1 down to this floor when set.
    pub anneal_f_min: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            f: 0.5,
            lambda_adv: 1.0,
            beta: 0.01,
            batch_size: 1024,
            lr: 0.004,
            lr_bc: 0.01,
            disc_lr: 0.004,
            total_steps: 20_000,
            disc_updates: 1,
            bc_aux_weight: 0.1,
            grad_clip: 10.0,
            kl_mode: KlMode::PriorEncoder,
            disc_mode: DiscMode::Trajectory,
            latent: LatentSpec::Continuous { dim: 2 },
            eval_every: 100,
            eval_episodes: 10_000,
            infomgail_weight: 0.1,
            hidden: 256,
            disc_embed: 32,
            n_modes: 2,
            posemb_dim: 8,
            anneal_f_min: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.f) {
            return Err(Error::invalid("f outside [0,1]"));
        }
        if self.lambda_adv < 0.0 || self.beta < 0.0 {
            return Err(Error::invalid("lambda and beta must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// The full network stack. Every algo instantiates all of it so seeds and
/// checkpoints are uniform; unused parts simply never receive gradient.
pub struct Models {
    pub policy: GmmPolicy,
    pub encoder: TrajectoryEncoder,
    pub prior: LatentPrior,
    pub disc: Discriminator,
    pub posterior: Posterior,
}

impl Models {
    pub fn new(config: &TrainConfig, env: &EpisodeConfig, seed: u64) -> Self {
        let latent_dim = config.latent.total_dim();
        let policy = GmmPolicy::new(
            8,
            latent_dim,
            2,
            config.n_modes,
            config.hidden,
            &mut stream(seed, "init-policy"),
        );
        let encoder = TrajectoryEncoder::new(
            config.latent,
            env.horizon,
            10,
            config.posemb_dim,
            config.hidden,
            config.hidden,
            &mut stream(seed, "init-encoder"),
        );
        let prior = LatentPrior::new(config.latent);
        let disc = Discriminator::new(
            config.disc_mode,
            env.horizon,
            10,
            config.disc_embed,
            &mut stream(seed, "init-disc"),
        );
        let posterior = Posterior::new(
            config.latent,
            env.horizon,
            10,
            8,
            config.disc_embed,
            &mut stream(seed, "init-posterior"),
        );
        Models { policy, encoder, prior, disc, posterior }
    }

    /// Parameter counts per network, reported at startup.
    pub fn count_summary(&self) -> String {
        format!(
            "policy={} encoder={} prior={} disc={} posterior={}",
            self.policy.params.count(),
            self.encoder.params.count(),
            self.prior.params.count(),
            self.disc.params.count(),
            self.posterior.params.count()
        )
    }

    pub fn checkpoint(&self, config_echo: &str, seed: u64, step: u64) -> Checkpoint {
        Checkpoint::capture(
            config_echo,
            seed,
            step,
            &[
                ("policy", &self.policy.params),
                ("encoder", &self.encoder.params),
                ("prior", &self.prior.params),
                ("disc", &self.disc.params),
                ("posterior", &self.posterior.params),
            ],
        )
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.restore(&mut [
            ("policy", &mut self.policy.params),
            ("encoder", &mut self.encoder.params),
            ("prior", &mut self.prior.params),
            ("disc", &mut self.disc.params),
            ("posterior", &mut self.posterior.params),
        ])
    }
}

/// Losses recorded for one training step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepRecord {
    pub loss_total: f64,
    pub loss_rec: f64,
    pub loss_kl: f64,
    pub loss_adv: f64,
    pub loss_disc: f64,
}

/// One row of the learning curve CSV.
#[derive(Clone, Copy, Debug)]
pub struct CurveRow {
    pub step: u64,
    pub losses: StepRecord,
    pub eval_return: f64,
    pub eval_jsd: f64,
    pub eval_freq_lower: f64,
}

#[derive(Clone, Debug, Default)]
pub struct LearningCurve {
    pub rows: Vec<CurveRow>,
}

impl LearningCurve {
    pub const CSV_HEADER: &'static str =
        "step,loss_total,loss_rec,loss_kl,loss_adv,loss_disc,eval_return,eval_jsd,eval_freq_lower";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step,
                r.losses.loss_total,
                r.losses.loss_rec,
                r.losses.loss_kl,
                r.losses.loss_adv,
                r.losses.loss_disc,
                r.eval_return,
                r.eval_jsd,
                r.eval_freq_lower
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<LearningCurve> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::invalid(format!("curve row with {} fields", f.len())));
            }
            let p = |s: &str| s.parse::<f64>().map_err(|_| Error::invalid("bad curve value"));
            rows.push(CurveRow {
                step: f[0].parse().map_err(|_| Error::invalid("bad step"))?,
                losses: StepRecord {
                    loss_total: p(f[1])?,
                    loss_rec: p(f[2])?,
                    loss_kl: p(f[3])?,
                    loss_adv: p(f[4])?,
                    loss_disc: p(f[5])?,
                },
                eval_return: p(f[6])?,
                eval_jsd: p(f[7])?,
                eval_freq_lower: p(f[8])?,
            });
        }
        Ok(LearningCurve { rows })
    }
}

/// Trainer state: models, optimizers, step counter.
pub struct Trainer {
    pub algo: Algo,
    pub config: TrainConfig,
    pub env_config: EpisodeConfig,
    pub models: Models,
    pub step: u64,
    seed: u64,
    gen_adam: AdamState,
    disc_adam: AdamState,
    /// Fixed prior used by InfoMGAIL (never trained) and as the zero
    /// reference; constructed fresh so its parameters are the defaults.
    fixed_prior: LatentPrior,
    /// Expert goal features of the training set, the JSD reference.
    expert_features: Vec<f64>,
}

impl Trainer {
    pub fn new(
        algo: Algo,
        config: TrainConfig,
        env_config: EpisodeConfig,
        dataset: &Dataset,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        env_config.validate()?;
        let config = match algo {
            // the ablation trained only on encoder types
            Algo::NaiveHierarchy => TrainConfig { f: 1.0, anneal_f_min: None, ..config },
            _ => config,
        };
        let models = Models::new(&config, &env_config, seed);
        let lr = if algo == Algo::Bc { config.lr_bc } else { config.lr };
        let expert_features = dataset.trajectories.iter().map(goal_feature).collect();
        Ok(Trainer {
            algo,
            config,
            env_config,
            models,
            step: 0,
            seed,
            gen_adam: AdamState::new(AdamConfig::with_lr(lr)),
            disc_adam: AdamState::new(AdamConfig::with_lr(config.disc_lr)),
            fixed_prior: LatentPrior::new(config.latent),
            expert_features,
        })
    }

    /// Effective encoder fraction at the current step.
    fn f_now(&self) -> f64 {
        match self.config.anneal_f_min {
            None => self.config.f,
            Some(fmin) => {
                let t = self.step as f64 / self.config.total_steps.max(1) as f64;
                (1.0 - (1.0 - fmin) * t).max(fmin)
            }
        }
    }

    fn sample_batch<'d>(&self, dataset: &'d Dataset, rng: &mut impl Rng) -> Vec<&'d Trajectory> {
        (0..self.config.batch_size)
            .map(|_| &dataset.trajectories[rng.random_range(0..dataset.trajectories.len())])
            .collect()
    }

    /// One generator update followed by `disc_updates` discriminator
    /// updates on fresh rollouts. Non-finite losses abort with the step.
    pub fn training_step(&mut self, dataset: &Dataset) -> Result<StepRecord> {
        let mut rng = substream(self.seed, "train-step", self.step);
        let batch = self.sample_batch(dataset, &mut rng);
        let mut record = match self.algo {
            Algo::Bc => self.bc_step(&batch, &mut rng)?,
            Algo::Mgail => self.adv_step(&batch, false, &mut rng)?,
            Algo::InfoMgail => self.adv_step(&batch, true, &mut rng)?,
            Algo::Rtc | Algo::NaiveHierarchy => self.rtc_step(&batch, &mut rng)?,
        };
        if self.algo != Algo::Bc {
            let mut disc_loss = 0.0;
            for _ in 0..self.config.disc_updates {
                let fresh = self.sample_batch(dataset, &mut rng);
                disc_loss = self.disc_step(&fresh, &mut rng)?;
            }
            record.loss_disc = disc_loss;
        }
        if !record.loss_total.is_finite() || !record.loss_disc.is_finite() {
            return Err(Error::Divergence { what: "training loss".into(), step: self.step as usize });
        }
        self.step += 1;
        Ok(record)
    }

    /// Supervised BC step: -mean log pi(a | s) with a zero latent.
    fn bc_step(&mut self, batch: &[&Trajectory], _rng: &mut impl Rng) -> Result<StepRecord> {
        let mut tape = Tape::new();
        let policy_ids = self.models.policy.params.bind(&mut tape, true);
        let loss = loss_bc(
            &mut tape,
            &self.models.policy,
            &policy_ids,
            batch,
            self.config.latent.total_dim(),
        )?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        self.apply_generator_grads(&grads, &policy_ids, None, None, None)?;
        Ok(StepRecord { loss_total: value, loss_rec: value, ..Default::default() })
    }

    /// MGAIL / InfoMGAIL generator step: adversarial loss on rollouts from
    /// replayed data scenarios plus a BC auxiliary, and for InfoMGAIL the
    /// posterior bonus under fixed-prior types.
    fn adv_step(
        &mut self,
        batch: &[&Trajectory],
        info: bool,
        rng: &mut impl Rng,
    ) -> Result<StepRecord> {
        let b = batch.len();
        let latent_dim = self.config.latent.total_dim();
        let mut tape = Tape::new();
        let policy_ids = self.models.policy.params.bind(&mut tape, true);
        let posterior_ids = self.models.posterior.params.bind(&mut tape, info);
        let disc_ids = self.models.disc.params.bind(&mut tape, false);

        // latent: zeros for MGAIL, fixed-prior samples for InfoMGAIL
        let latents = if info {
            self.fixed_prior.sample_plain_batch(b, rng)
        } else {
            Array::zeros(vec![b, latent_dim])
        };
        let latent_node = tape.constant(latents.clone());
        let (_roll, feats) = self.rollout_on_tape(&mut tape, batch, &policy_ids, latent_node, rng)?;
        let adv = loss_adv(
            &mut tape,
            &self.models.disc,
            &disc_ids,
            feats,
            b,
            self.env_config.horizon,
        )?;
        let bc = loss_bc(&mut tape, &self.models.policy, &policy_ids, batch, latent_dim)?;
        let adv_w = tape.scale(adv, self.config.lambda_adv);
        let bc_w = tape.scale(bc, self.config.bc_aux_weight);
        let mut total = tape.add(adv_w, bc_w)?;
        if info {
            let obs0 = tape.constant(initial_obs(batch));
            let latent_const = tape.constant(latents);
            let li = loss_info(
                &mut tape,
                &self.models.posterior,
                &posterior_ids,
                feats,
                obs0,
                latent_const,
            )?;
            let li_w = tape.scale(li, self.config.infomgail_weight);
            total = tape.add(total, li_w)?;
        }
        let loss_total = tape.value(total).item();
        let loss_adv_v = tape.value(adv).item();
        let grads = tape.backward(total)?;
        self.apply_generator_grads(
            &grads,
            &policy_ids,
            None,
            None,
            if info { Some(&posterior_ids) } else { None },
        )?;
        Ok(StepRecord {
            loss_total,
            loss_rec: tape.value(bc).item(),
            loss_adv: loss_adv_v,
            ..Default::default()
        })
    }

    /// The coupled objective: the first ceil(f * N) trajectories roll out
    /// under encoder types and pay adversarial + reconstruction + KL; the
    /// rest roll out under detached prior types and pay adversarial only.
    fn rtc_step(&mut self, batch: &[&Trajectory], rng: &mut impl Rng) -> Result<StepRecord> {
        let n = batch.len();
        let n_enc = ((self.f_now() * n as f64).ceil() as usize).min(n);
        let latent_dim = self.config.latent.total_dim();
        let mut tape = Tape::new();
        let policy_ids = self.models.policy.params.bind(&mut tape, true);
        let encoder_ids = self.models.encoder.params.bind(&mut tape, true);
        let prior_ids = self.models.prior.params.bind(&mut tape, true);
        let disc_ids = self.models.disc.params.bind(&mut tape, false);

        let mut total: Option<NodeId> = None;
        let mut rec_v = 0.0;
        let mut kl_v = 0.0;
        let mut adv_v = 0.0;

        if n_enc > 0 {
            let enc_batch = &batch[..n_enc];
            let enc_dist = self.models.encoder.dist(&mut tape, &encoder_ids, enc_batch)?;
            let noise = latent_noise(self.config.latent, n_enc, rng);
            let latent = self.models.encoder.sample(&mut tape, &enc_dist, &noise)?;
            let (_, feats) =
                self.rollout_on_tape(&mut tape, enc_batch, &policy_ids, latent, rng)?;
            let adv = loss_adv(
                &mut tape,
                &self.models.disc,
                &disc_ids,
                feats,
                n_enc,
                self.env_config.horizon,
            )?;
            let rec = loss_rec(
                &mut tape,
                &self.models.policy,
                &policy_ids,
                enc_batch,
                latent,
                latent_dim,
            )?;
            let kl = self.kl_term(&mut tape, &prior_ids, &enc_dist, latent)?;
            let adv_w = tape.scale(adv, self.config.lambda_adv);
            let kl_w = tape.scale(kl, self.config.beta);
            let part = tape.add(adv_w, rec)?;
            let part = tape.add(part, kl_w)?;
            total = Some(part);
            rec_v = tape.value(rec).item();
            kl_v = tape.value(kl).item();
            adv_v += self.config.lambda_adv * tape.value(adv).item();
        }

        if n_enc < n {
            let pri_batch = &batch[n_enc..];
            let m = pri_batch.len();
            // prior types are detached: the causal intervention do(g);
            // the prior itself trains only through the KL term
            let latents = self.models.prior.sample_plain_batch(m, rng);
            let latent = tape.constant(latents);
            let (_, feats) =
                self.rollout_on_tape(&mut tape, pri_batch, &policy_ids, latent, rng)?;
            let adv = loss_adv(
                &mut tape,
                &self.models.disc,
                &disc_ids,
                feats,
                m,
                self.env_config.horizon,
            )?;
            let adv_w = tape.scale(adv, self.config.lambda_adv);
            total = Some(match total {
                None => adv_w,
                Some(acc) => tape.add(acc, adv_w)?,
            });
            adv_v += self.config.lambda_adv * tape.value(adv).item();
        }

        let total = total.expect("batch is nonempty");
        let loss_total = tape.value(total).item();
        let grads = tape.backward(total)?;
        self.apply_generator_grads(
            &grads,
            &policy_ids,
            Some(&encoder_ids),
            Some(&prior_ids),
            None,
        )?;
        Ok(StepRecord {
            loss_total,
            loss_rec: rec_v,
            loss_kl: kl_v,
            loss_adv: adv_v,
            loss_disc: 0.0,
        })
    }

    /// KL composition per configured mode; scalar node (mean over batch).
    fn kl_term(
        &self,
        tape: &mut Tape,
        prior_ids: &[NodeId],
        enc_dist: &LatentDist,
        enc_sample: NodeId,
    ) -> Result<NodeId> {
        let prior_dist = self.models.prior.dist(tape, prior_ids);
        match self.config.kl_mode {
            KlMode::PriorEncoder => {
                let kl = kl_divergence(tape, &prior_dist, enc_dist)?;
                Ok(tape.mean(kl))
            }
            KlMode::EncoderPrior => {
                let kl = kl_divergence(tape, enc_dist, &prior_dist)?;
                Ok(tape.mean(kl))
            }
            KlMode::PriorCeBottleneck => {
                // cross-entropy trains the prior on detached encoder
                // samples; the bottleneck presses the encoder toward the
                // standard reference. beta already multiplies this whole
                // term, so the cross-entropy is rescaled to full weight.
                let enc_vals = tape.value(enc_sample).clone();
                let detached = tape.constant(enc_vals);
                let lp = log_prob_under(tape, &prior_dist, detached)?;
                let ce = tape.mean(lp);
                let ce = tape.neg(ce);
                let reference = reference_dist(tape, self.config.latent);
                let ib = kl_divergence(tape, enc_dist, &reference)?;
                let ib = tape.mean(ib);
                let beta = self.config.beta.max(1e-12);
                let ce_scaled = tape.scale(ce, 1.0 / beta);
                tape.add(ce_scaled, ib)
            }
        }
    }

    /// Roll the batch's scenarios on the tape under the given latent node
    /// and return the rollout plus discriminator features (B*T, 10).
    fn rollout_on_tape(
        &self,
        tape: &mut Tape,
        batch: &[&Trajectory],
        policy_ids: &[NodeId],
        latent: NodeId,
        rng: &mut impl Rng,
    ) -> Result<(crate::env::DiffRollout, NodeId)> {
        let inits: Vec<_> = batch.iter().map(|t| t.init).collect();
        let b = batch.len();
        let horizon = self.env_config.horizon;
        let mut noises = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            noises.push(PolicyNoise::draw(b, 2, rng));
        }
        let policy = &self.models.policy;
        let roll = crate::env::differentiable_rollout(tape, &inits, &self.env_config, |tape, obs, t| {
            policy.sample(tape, policy_ids, obs, latent, &noises[t])
        })?;
        let feats = rollout_features(tape, &roll, b)?;
        Ok((roll, feats))
    }

    /// Discriminator update: maximize E_data[log D] + E_rollout[log(1-D)]
    /// on fresh rollouts vs fresh data, implemented as minimizing the
    /// negation. Rollout features are detached so no gradient reaches the
    /// generator networks.
    fn disc_step(&mut self, batch: &[&Trajectory], rng: &mut impl Rng) -> Result<f64> {
        let b = batch.len();
        let latent_dim = self.config.latent.total_dim();
        let mut tape = Tape::new();
        let policy_ids = self.models.policy.params.bind(&mut tape, false);
        let encoder_ids = self.models.encoder.params.bind(&mut tape, false);
        let disc_ids = self.models.disc.params.bind(&mut tape, true);

        // fake pool: fresh rollouts with the same latent mix as training
        let latent = match self.algo {
            Algo::Mgail => tape.constant(Array::zeros(vec![b, latent_dim])),
            Algo::InfoMgail => {
                let l = self.fixed_prior.sample_plain_batch(b, rng);
                tape.constant(l)
            }
            _ => {
                let n_enc = ((self.f_now() * b as f64).ceil() as usize).min(b);
                let mut latents = Array::zeros(vec![b, latent_dim]);
                if n_enc > 0 {
                    let enc_dist =
                        self.models.encoder.dist(&mut tape, &encoder_ids, &batch[..n_enc])?;
                    let noise = latent_noise(self.config.latent, n_enc, rng);
                    let enc_sample = self.models.encoder.sample(&mut tape, &enc_dist, &noise)?;
                    let vals = tape.value(enc_sample);
                    latents.data_mut()[..n_enc * latent_dim]
                        .copy_from_slice(&vals.data()[..n_enc * latent_dim]);
                }
                for i in n_enc..b {
                    let z = self.models.prior.sample_plain(rng);
                    latents.data_mut()[i * latent_dim..(i + 1) * latent_dim].copy_from_slice(&z);
                }
                tape.constant(latents)
            }
        };
        let (_, fake_feats) = self.rollout_on_tape(&mut tape, batch, &policy_ids, latent, rng)?;
        // detach: the discriminator loss must not backpropagate into the
        // policy or encoder
        let fake_vals = tape.value(fake_feats).clone();
        let fake_const = tape.constant(fake_vals);
        let real_const = tape.constant(crate::models::step_features(batch));
        let objective = disc_log_likelihood(
            &mut tape,
            &self.models.disc,
            &disc_ids,
            real_const,
            fake_const,
        )?;
        let loss = tape.neg(objective);
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let mut g = self.models.disc.params.grads_or_zeros(&disc_ids, &grads);
        clip_global_norm(&mut g, self.config.grad_clip);
        let mut values: Vec<Array> = self
            .models
            .disc
            .params
            .entries
            .iter_mut()
            .map(|p| std::mem::replace(&mut p.value, Array::zeros(vec![1])))
            .collect();
        self.disc_adam.step(&mut values, &g)?;
        for (p, v) in self.models.disc.params.entries.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(value)
    }

    /// Clip and apply generator-side gradients in one Adam step over the
    /// concatenated [policy, encoder, prior, posterior] group.
    fn apply_generator_grads(
        &mut self,
        grads: &crate::tensor::GradientMap,
        policy_ids: &[NodeId],
        encoder_ids: Option<&[NodeId]>,
        prior_ids: Option<&[NodeId]>,
        posterior_ids: Option<&[NodeId]>,
    ) -> Result<()> {
        let mut all_grads = self.models.policy.params.grads_or_zeros(policy_ids, grads);
        let mut group: Vec<&mut ModelParams> = vec![&mut self.models.policy.params];
        if let Some(ids) = encoder_ids {
            all_grads.extend(self.models.encoder.params.grads_or_zeros(ids, grads));
        } else {
            all_grads.extend(zero_like(&self.models.encoder.params));
        }
        group.push(&mut self.models.encoder.params);
        if let Some(ids) = prior_ids {
            all_grads.extend(self.models.prior.params.grads_or_zeros(ids, grads));
        } else {
            all_grads.extend(zero_like(&self.models.prior.params));
        }
        group.push(&mut self.models.prior.params);
        if let Some(ids) = posterior_ids {
            all_grads.extend(self.models.posterior.params.grads_or_zeros(ids, grads));
        } else {
            all_grads.extend(zero_like(&self.models.posterior.params));
        }
        group.push(&mut self.models.posterior.params);

        clip_global_norm(&mut all_grads, self.config.grad_clip);
        let mut values: Vec<Array> = Vec::new();
        for m in &mut group {
            for p in &mut m.entries {
                values.push(std::mem::replace(&mut p.value, Array::zeros(vec![1])));
            }
        }
        self.gen_adam.step(&mut values, &all_grads)?;
        let mut it = values.into_iter();
        for m in &mut group {
            for p in &mut m.entries {
                p.value = it.next().expect("value count preserved");
            }
        }
        Ok(())
    }

    /// Evaluation under test-time conditions: fresh episodes, types from
    /// the learned prior (hierarchical), the fixed prior (InfoMGAIL) or a
    /// zero latent (flat).
    pub fn evaluate(&self, n_episodes: usize, eval_seed: u64) -> MetricReport {
        let prior = match self.algo {
            Algo::Rtc | Algo::NaiveHierarchy => Some(&self.models.prior),
            Algo::InfoMgail => Some(&self.fixed_prior),
            _ => None,
        };
        let runner = PolicyRunner { policy: &self.models.policy, prior };
        let (mean_return, feats) = test_return(&runner, &self.env_config, n_episodes, eval_seed);
        let freq_lower = feats.iter().filter(|&&f| f < 0.0).count() as f64 / feats.len() as f64;
        let jsd_goal = jsd_hist(&feats, &self.expert_features, &[0.0]).unwrap_or(f64::NAN);
        MetricReport {
            mean_return,
            jsd_goal,
            freq_lower,
            min_ade: None,
            n_episodes,
            minade_k: 0,
        }
    }
}

fn zero_like(params: &ModelParams) -> Vec<Option<Array>> {
    params.entries.iter().map(|p| Some(Array::zeros(p.value.shape().to_vec()))).collect()
}

/// Noise for one encoder sampling pass: standard normal for continuous
/// latents, uniforms (for Gumbel perturbation) for discrete ones.
pub fn latent_noise(spec: LatentSpec, b: usize, rng: &mut impl Rng) -> Array {
    use rand_distr::{Distribution, StandardNormal};
    match spec {
        LatentSpec::Continuous { dim } => Array::new(
            vec![b, dim],
            (0..b * dim).map(|_| StandardNormal.sample(rng)).collect(),
        )
        .unwrap(),
        LatentSpec::Discrete { blocks, block_size } => Array::new(
            vec![b, blocks * block_size],
            (0..b * blocks * block_size).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap(),
    }
}

/// Initial observations of a batch, (B, 8).
pub fn initial_obs(batch: &[&Trajectory]) -> Array {
    let mut data = Vec::with_capacity(batch.len() * 8);
    for t in batch {
        data.extend_from_slice(&t.observations[0]);
    }
    Array::new(vec![batch.len(), 8], data).unwrap()
}

/// Exponential smoothing with the given decay: each new value enters with
/// weight (1 - decay). Returns the final smoothed value.
pub fn ema(values: &[f64], decay: f64) -> f64 {
    let mut it = values.iter();
    let Some(&first) = it.next() else { return f64::NAN };
    it.fold(first, |acc, &v| decay * acc + (1.0 - decay) * v)
}

impl LearningCurve {
    /// Final exponentially smoothed (return, jsd, freq_lower).
    pub fn smoothed_final(&self, decay: f64) -> (f64, f64, f64) {
        let rets: Vec<f64> = self.rows.iter().map(|r| r.eval_return).collect();
        let jsds: Vec<f64> = self.rows.iter().map(|r| r.eval_jsd).collect();
        let freqs: Vec<f64> = self.rows.iter().map(|r| r.eval_freq_lower).collect();
        (ema(&rets, decay), ema(&jsds, decay), ema(&freqs, decay))
    }
}

/// Full training driver: periodic evaluation every `eval_every` steps
/// (including step 0 and the final step), divergence abort with the last
/// good state kept.
pub fn train(
    algo: Algo,
    config: TrainConfig,
    env_config: EpisodeConfig,
    dataset: &Dataset,
    seed: u64,
    mut progress: impl FnMut(&CurveRow),
) -> Result<(LearningCurve, Trainer)> {
    let mut trainer = Trainer::new(algo, config, env_config, dataset, seed)?;
    let mut curve = LearningCurve::default();
    let mut last = StepRecord::default();
    loop {
        let step = trainer.step;
        if step % trainer.config.eval_every == 0 || step == trainer.config.total_steps {
            let report = trainer.evaluate(trainer.config.eval_episodes, seed ^ 0x5eed_0e7a);
            let row = CurveRow {
                step,
                losses: last,
                eval_return: report.mean_return,
                eval_jsd: report.jsd_goal,
                eval_freq_lower: report.freq_lower,
            };
            progress(&row);
            curve.rows.push(row);
        }
        if step >= trainer.config.total_steps {
            break;
        }
        last = trainer.training_step(dataset)?;
    }
    Ok((curve, trainer))
}
