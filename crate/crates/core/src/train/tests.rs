use super::*;
use crate::env::generate_dataset;
use crate::models::LatentSpec;
use crate::rng::stream;
use crate::tensor::grad_check;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        hidden: 16,
        disc_embed: 8,
        eval_episodes: 50,
        eval_every: 10,
        total_steps: 30,
        ..TrainConfig::default()
    }
}

fn tiny_dataset(n: usize) -> Dataset {
    generate_dataset(n, 77, &EpisodeConfig::default()).unwrap()
}

#[test]
fn adv_loss_is_t_ln2_for_an_uninformed_discriminator() {
    // zero-weight discriminator scores 0.5 everywhere; per-step mode gives
    // sum_t -log 0.5 = 30 * ln 2, trajectory mode the same by convention
    let env = EpisodeConfig::default();
    for mode in [DiscMode::PerStep, DiscMode::Trajectory] {
        let mut disc = Discriminator::new(mode, env.horizon, 10, 8, &mut stream(1, "d"));
        for p in &mut disc.params.entries {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let ids = disc.params.bind(&mut tape, false);
        let b = 4;
        let feats = tape.constant(Array::zeros(vec![b * env.horizon, 10]));
        let l = loss_adv(&mut tape, &disc, &ids, feats, b, env.horizon).unwrap();
        let want = 30.0 * std::f64::consts::LN_2;
        assert!(
            (tape.value(l).item() - want).abs() < 1e-9,
            "mode {:?}: {} vs {}",
            mode,
            tape.value(l).item(),
            want
        );
    }
}

#[test]
fn adv_loss_reaches_clamp_floor_when_discriminator_is_fooled() {
    let env = EpisodeConfig::default();
    let mut disc = Discriminator::new(DiscMode::PerStep, env.horizon, 10, 8, &mut stream(2, "d"));
    for p in &mut disc.params.entries {
        for v in p.value.data_mut() {
            *v = 0.0;
        }
    }
    // drive logits far past the clamp: D -> sigmoid(20) on everything
    let bias = disc.params.entries.iter_mut().find(|p| p.name == "disc.head.head.b").unwrap();
    bias.value.data_mut()[0] = 500.0;
    let mut tape = Tape::new();
    let ids = disc.params.bind(&mut tape, false);
    let feats = tape.constant(Array::zeros(vec![30, 10]));
    let l = loss_adv(&mut tape, &disc, &ids, feats, 1, env.horizon).unwrap();
    // fully fooled: the cost bottoms out at (or below) the clamped-score
    // residual T * -log sigmoid(20) instead of diverging
    let ceiling = -30.0 * (1.0f64 / (1.0 + (-20.0f64).exp())).ln();
    let v = tape.value(l).item();
    assert!(v >= 0.0 && v <= ceiling, "floor value {}", v);
}

#[test]
fn adv_loss_sends_no_gradient_to_discriminator() {
    let env = EpisodeConfig::default();
    let config = tiny_config();
    let data = tiny_dataset(8);
    let mut trainer = Trainer::new(Algo::Rtc, config, env, &data, 3).unwrap();
    let before: Vec<Vec<f64>> =
        trainer.models.disc.params.entries.iter().map(|p| p.value.data().to_vec()).collect();
    let batch: Vec<&Trajectory> = data.trajectories.iter().take(8).collect();
    let mut rng = stream(4, "step");
    trainer.rtc_step(&batch, &mut rng).unwrap();
    for (p, b) in trainer.models.disc.params.entries.iter().zip(&before) {
        assert_eq!(p.value.data(), &b[..], "generator update moved discriminator weights");
    }
}

#[test]
fn disc_update_leaves_generator_untouched() {
    let env = EpisodeConfig::default();
    let config = tiny_config();
    let data = tiny_dataset(8);
    let mut trainer = Trainer::new(Algo::Rtc, config, env, &data, 5).unwrap();
    let pol: Vec<Vec<f64>> =
        trainer.models.policy.params.entries.iter().map(|p| p.value.data().to_vec()).collect();
    let enc: Vec<Vec<f64>> =
        trainer.models.encoder.params.entries.iter().map(|p| p.value.data().to_vec()).collect();
    let batch: Vec<&Trajectory> = data.trajectories.iter().take(8).collect();
    let mut rng = stream(6, "step");
    trainer.disc_step(&batch, &mut rng).unwrap();
    for (p, b) in trainer.models.policy.params.entries.iter().zip(&pol) {
        assert_eq!(p.value.data(), &b[..]);
    }
    for (p, b) in trainer.models.encoder.params.entries.iter().zip(&enc) {
        assert_eq!(p.value.data(), &b[..]);
    }
}

#[test]
fn disc_log_likelihood_is_ln_quarter_for_uninformed_scores() {
    let env = EpisodeConfig::default();
    let mut disc = Discriminator::new(DiscMode::Trajectory, env.horizon, 10, 8, &mut stream(7, "d"));
    for p in &mut disc.params.entries {
        for v in p.value.data_mut() {
            *v = 0.0;
        }
    }
    let mut tape = Tape::new();
    let ids = disc.params.bind(&mut tape, false);
    let real = tape.constant(Array::zeros(vec![2 * env.horizon, 10]));
    let fake = tape.constant(Array::zeros(vec![2 * env.horizon, 10]));
    let obj = disc_log_likelihood(&mut tape, &disc, &ids, real, fake).unwrap();
    assert!((tape.value(obj).item() - 2.0 * 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn identical_pools_drive_the_discriminator_toward_half() {
    use crate::tensor::{AdamConfig, AdamState};
    let disc = Discriminator::new(DiscMode::PerStep, 1, 10, 8, &mut stream(8, "d"));
    let mut params = disc.params.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(0.01));
    let rows =
        Array::new(vec![32, 10], (0..320).map(|i| ((i % 13) as f64) * 0.1 - 0.6).collect()).unwrap();
    for _ in 0..300 {
        let mut tape = Tape::new();
        let mut d = disc.clone();
        d.params = params.clone();
        let ids = d.params.bind(&mut tape, true);
        let real = tape.constant(rows.clone());
        let fake = tape.constant(rows.clone());
        let obj = disc_log_likelihood(&mut tape, &d, &ids, real, fake).unwrap();
        let loss = tape.neg(obj);
        let grads = tape.backward(loss).unwrap();
        let g = d.params.grads_or_zeros(&ids, &grads);
        let mut values: Vec<Array> = params.entries.iter().map(|p| p.value.clone()).collect();
        adam.step(&mut values, &g).unwrap();
        for (p, v) in params.entries.iter_mut().zip(values) {
            p.value = v;
        }
    }
    let mut d = disc.clone();
    d.params = params;
    let mut tape = Tape::new();
    let ids = d.params.bind(&mut tape, false);
    let f = tape.constant(rows);
    let s = d.score(&mut tape, &ids, f).unwrap();
    let mean: f64 = tape.value(s).data().iter().sum::<f64>() / 32.0;
    assert!((mean - 0.5).abs() < 0.05, "mean score {}", mean);
}

#[test]
fn separable_pools_are_classified_within_500_steps() {
    use crate::tensor::{AdamConfig, AdamState};
    let disc = Discriminator::new(DiscMode::PerStep, 1, 10, 16, &mut stream(9, "d"));
    let mut params = disc.params.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(0.01));
    let mut rng = stream(10, "sep");
    use rand::Rng;
    let mut draw = |center: f64| -> Vec<f64> {
        (0..32 * 10).map(|_| center + rng.random::<f64>() * 0.5 - 0.25).collect()
    };
    let real_rows = Array::new(vec![32, 10], draw(1.0)).unwrap();
    let fake_rows = Array::new(vec![32, 10], draw(-1.0)).unwrap();
    for _ in 0..500 {
        let mut tape = Tape::new();
        let mut d = disc.clone();
        d.params = params.clone();
        let ids = d.params.bind(&mut tape, true);
        let real = tape.constant(real_rows.clone());
        let fake = tape.constant(fake_rows.clone());
        let obj = disc_log_likelihood(&mut tape, &d, &ids, real, fake).unwrap();
        let loss = tape.neg(obj);
        let grads = tape.backward(loss).unwrap();
        let g = d.params.grads_or_zeros(&ids, &grads);
        let mut values: Vec<Array> = params.entries.iter().map(|p| p.value.clone()).collect();
        adam.step(&mut values, &g).unwrap();
        for (p, v) in params.entries.iter_mut().zip(values) {
            p.value = v;
        }
    }
    let mut d = disc.clone();
    d.params = params;
    let mut tape = Tape::new();
    let ids = d.params.bind(&mut tape, false);
    let rf = tape.constant(real_rows);
    let ff = tape.constant(fake_rows);
    let rs = d.score(&mut tape, &ids, rf).unwrap();
    let fs = d.score(&mut tape, &ids, ff).unwrap();
    let correct = tape.value(rs).data().iter().filter(|&&v| v > 0.5).count()
        + tape.value(fs).data().iter().filter(|&&v| v < 0.5).count();
    let acc = correct as f64 / 64.0;
    assert!(acc > 0.99, "accuracy {}", acc);
}

#[test]
fn bc_loss_matches_hand_computed_average() {
    let env = EpisodeConfig::default();
    let data = tiny_dataset(3);
    let policy = GmmPolicy::new(8, 2, 2, 2, 16, &mut stream(11, "p"));
    let mut tape = Tape::new();
    let ids = policy.params.bind(&mut tape, false);
    let batch: Vec<&Trajectory> = data.trajectories.iter().collect();
    let loss = loss_bc(&mut tape, &policy, &ids, &batch, 2).unwrap();
    let mut acc = 0.0;
    let mut count = 0.0;
    for traj in &data.trajectories {
        for t in 0..env.horizon {
            let mut ol = Array::zeros(vec![1, 10]);
            ol.data_mut()[..8].copy_from_slice(&traj.observations[t]);
            acc += policy.log_prob_plain(&ol, &[traj.actions[t].x, traj.actions[t].y]);
            count += 1.0;
        }
    }
    let want = -acc / count;
    assert!((tape.value(loss).item() - want).abs() < 1e-10);
    let empty: Vec<&Trajectory> = Vec::new();
    assert!(loss_bc(&mut tape, &policy, &ids, &empty, 2).is_err());
}

#[test]
fn bc_loss_prefers_the_matching_policy() {
    // a policy whose mean head reproduces expert-scale actions scores a
    // strictly lower loss than one pinned far away
    let data = tiny_dataset(4);
    let batch: Vec<&Trajectory> = data.trajectories.iter().collect();
    let mut good = GmmPolicy::new(8, 2, 2, 2, 8, &mut stream(12, "p"));
    let mut bad = good.clone();
    for (pol, mean) in [(&mut good, 0.05), (&mut bad, 5.0)] {
        for p in &mut pol.params.entries {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let bias = pol.params.entries.iter_mut().find(|p| p.name == "policy.head.b").unwrap();
        bias.value
            .data_mut()
            .copy_from_slice(&[0.0, 0.0, mean, 0.0, mean, 0.0, -5.0, -5.0, -5.0, -5.0]);
    }
    let mut tape = Tape::new();
    let gi = good.params.bind(&mut tape, false);
    let bi = bad.params.bind(&mut tape, false);
    let lg = loss_bc(&mut tape, &good, &gi, &batch, 2).unwrap();
    let lb = loss_bc(&mut tape, &bad, &bi, &batch, 2).unwrap();
    assert!(tape.value(lg).item() < tape.value(lb).item());
}

#[test]
fn rec_loss_equals_bc_when_the_type_pathway_is_zeroed() {
    let data = tiny_dataset(3);
    let batch: Vec<&Trajectory> = data.trajectories.iter().collect();
    let mut policy = GmmPolicy::new(8, 2, 2, 2, 8, &mut stream(13, "p"));
    // zero the latent input rows of the first layer
    let w0 = policy.params.entries.iter_mut().find(|p| p.name == "policy.w0").unwrap();
    let cols = w0.value.cols();
    for r in 8..10 {
        for c in 0..cols {
            w0.value.set(r, c, 0.0);
        }
    }
    let mut tape = Tape::new();
    let ids = policy.params.bind(&mut tape, false);
    let bc = loss_bc(&mut tape, &policy, &ids, &batch, 2).unwrap();
    let latent =
        tape.constant(Array::new(vec![3, 2], vec![0.7, -0.3, 0.1, 0.9, -0.5, 0.2]).unwrap());
    let rec = loss_rec(&mut tape, &policy, &ids, &batch, latent, 2).unwrap();
    assert_eq!(tape.value(bc).item(), tape.value(rec).item());
}

#[test]
fn rec_loss_gradient_matches_fd_through_the_encoder() {
    let data = tiny_dataset(2);
    let batch: Vec<&Trajectory> = data.trajectories.iter().collect();
    let policy = GmmPolicy::new(8, 2, 2, 2, 6, &mut stream(14, "p"));
    let encoder = TrajectoryEncoder::new(
        LatentSpec::Continuous { dim: 2 },
        30,
        10,
        4,
        6,
        6,
        &mut stream(15, "e"),
    );
    let noise = latent_noise(LatentSpec::Continuous { dim: 2 }, 2, &mut stream(16, "n"));
    let n_pol = policy.params.entries.len();
    let values: Vec<Array> = policy
        .params
        .entries
        .iter()
        .chain(&encoder.params.entries)
        .map(|p| p.value.clone())
        .collect();
    let eval = |vals: &[Array], want_grad: bool| {
        let mut pol = policy.clone();
        let mut enc = encoder.clone();
        for (e, v) in
            pol.params.entries.iter_mut().chain(enc.params.entries.iter_mut()).zip(vals)
        {
            e.value = v.clone();
        }
        let mut tape = Tape::new();
        let pids = pol.params.bind(&mut tape, want_grad);
        let eids = enc.params.bind(&mut tape, want_grad);
        let dist = enc.dist(&mut tape, &eids, &batch).unwrap();
        let latent = enc.sample(&mut tape, &dist, &noise).unwrap();
        let loss = loss_rec(&mut tape, &pol, &pids, &batch, latent, 2).unwrap();
        let v = tape.value(loss).item();
        if want_grad {
            let grads = tape.backward(loss).unwrap();
            let mut g = pol.params.grads_or_zeros(&pids, &grads);
            g.extend(enc.params.grads_or_zeros(&eids, &grads));
            (v, g.into_iter().map(|x| x.unwrap()).collect::<Vec<_>>())
        } else {
            (v, Vec::new())
        }
    };
    let analytic = eval(&values, true).1;
    assert_eq!(analytic.len(), n_pol + encoder.params.entries.len());
    let err = grad_check(|vals| eval(vals, false).0, &values, &analytic, 1e-5);
    assert!(err < 1e-4, "rec loss fd error {}", err);
}

#[test]
fn autoencoder_mode_overfits_a_tiny_dataset() {
    // lambda = 0, f = 1: pure reconstruction + KL; the loss must drop by
    // at least half on 10 trajectories within 2000 steps
    let env = EpisodeConfig::default();
    let config = TrainConfig {
        batch_size: 10,
        hidden: 16,
        disc_embed: 8,
        lambda_adv: 0.0,
        f: 1.0,
        total_steps: 2000,
        eval_every: 1_000_000,
        eval_episodes: 10,
        disc_updates: 0,
        ..TrainConfig::default()
    };
    let data = tiny_dataset(10);
    let mut trainer = Trainer::new(Algo::Rtc, config, env, &data, 17).unwrap();
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..2000 {
        let rec = trainer.training_step(&data).unwrap();
        if first.is_none() {
            first = Some(rec.loss_rec);
        }
        last = rec.loss_rec;
    }
    let first = first.unwrap();
    assert!(last <= 0.5 * first, "reconstruction did not halve: {} -> {}", first, last);
}

#[test]
fn f_zero_trains_neither_encoder_nor_prior() {
    let env = EpisodeConfig::default();
    let config = TrainConfig { f: 0.0, beta: 0.0, ..tiny_config() };
    let data = tiny_dataset(8);
    let mut trainer = Trainer::new(Algo::Rtc, config, env, &data, 18).unwrap();
    let enc: Vec<Vec<f64>> =
        trainer.models.encoder.params.entries.iter().map(|p| p.value.data().to_vec()).collect();
    let pri: Vec<Vec<f64>> =
        trainer.models.prior.params.entries.iter().map(|p| p.value.data().to_vec()).collect();
    let pol: Vec<Vec<f64>> =
        trainer.models.policy.params.entries.iter().map(|p| p.value.data().to_vec()).collect();
    for _ in 0..3 {
        trainer.training_step(&data).unwrap();
    }
    for (p, b) in trainer.models.encoder.params.entries.iter().zip(&enc) {
        assert_eq!(p.value.data(), &b[..], "encoder must be untouched at f=0");
    }
    for (p, b) in trainer.models.prior.params.entries.iter().zip(&pri) {
        assert_eq!(p.value.data(), &b[..], "prior must be untouched at f=0, beta=0");
    }
    let moved = trainer
        .models
        .policy
        .params
        .entries
        .iter()
        .zip(&pol)
        .any(|(p, b)| p.value.data() != &b[..]);
    assert!(moved, "policy must train at f=0");
}

#[test]
fn rtc_with_f_one_is_naive_hierarchy_step_for_step() {
    let env = EpisodeConfig::default();
    let config = TrainConfig { f: 1.0, total_steps: 20, ..tiny_config() };
    let data = tiny_dataset(16);
    let (curve_rtc, _) = train(Algo::Rtc, config, env, &data, 21, |_| {}).unwrap();
    let (curve_naive, _) = train(Algo::NaiveHierarchy, config, env, &data, 21, |_| {}).unwrap();
    assert_eq!(curve_rtc.to_csv(), curve_naive.to_csv());
}

#[test]
fn training_is_deterministic_under_a_fixed_seed() {
    let env = EpisodeConfig::default();
    let config = tiny_config();
    let data = tiny_dataset(16);
    let (a, _) = train(Algo::Rtc, config, env, &data, 22, |_| {}).unwrap();
    let (b, _) = train(Algo::Rtc, config, env, &data, 22, |_| {}).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert!(a.rows.len() >= 3);
    for w in a.rows.windows(2) {
        assert!(w[1].step > w[0].step, "steps must strictly increase");
    }
}

#[test]
fn nan_parameters_abort_with_a_divergence_error() {
    let env = EpisodeConfig::default();
    let config = tiny_config();
    let data = tiny_dataset(8);
    let mut trainer = Trainer::new(Algo::Mgail, config, env, &data, 23).unwrap();
    trainer.models.policy.params.entries[0].value.data_mut()[0] = f64::NAN;
    match trainer.training_step(&data) {
        Err(Error::Divergence { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|_| ()).err()),
    }
}

#[test]
fn bc_smoke_run_improves_over_the_untrained_policy() {
    let env = EpisodeConfig::default();
    let config = TrainConfig {
        batch_size: 32,
        hidden: 32,
        disc_embed: 8,
        total_steps: 400,
        eval_every: 400,
        eval_episodes: 300,
        ..TrainConfig::default()
    };
    let data = tiny_dataset(500);
    let (curve, _) = train(Algo::Bc, config, env, &data, 24, |_| {}).unwrap();
    let first = curve.rows.first().unwrap().eval_return;
    let final_ = curve.rows.last().unwrap().eval_return;
    assert!(final_ > first, "bc did not improve: {} -> {}", first, final_);
}

#[test]
fn info_loss_is_ln2_for_a_uniform_posterior_over_two_types() {
    let mut post = Posterior::new(
        LatentSpec::Discrete { blocks: 1, block_size: 2 },
        4,
        10,
        8,
        8,
        &mut stream(25, "post"),
    );
    for p in &mut post.params.entries {
        for v in p.value.data_mut() {
            *v = 0.0;
        }
    }
    let mut tape = Tape::new();
    let ids = post.params.bind(&mut tape, false);
    let feats = tape.constant(Array::zeros(vec![8, 10]));
    let obs0 = tape.constant(Array::zeros(vec![2, 8]));
    let latents = tape.constant(Array::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let li = loss_info(&mut tape, &post, &ids, feats, obs0, latents).unwrap();
    assert!((tape.value(li).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn all_algos_run_one_step_and_record_finite_losses() {
    let env = EpisodeConfig::default();
    let data = tiny_dataset(8);
    for algo in [Algo::Bc, Algo::Mgail, Algo::InfoMgail, Algo::Rtc, Algo::NaiveHierarchy] {
        let mut trainer = Trainer::new(algo, tiny_config(), env, &data, 26).unwrap();
        let rec = trainer.training_step(&data).unwrap();
        assert!(rec.loss_total.is_finite(), "{:?}", algo);
        let config = TrainConfig {
            latent: LatentSpec::Discrete { blocks: 2, block_size: 4 },
            ..tiny_config()
        };
        let mut trainer = Trainer::new(algo, config, env, &data, 27).unwrap();
        let rec = trainer.training_step(&data).unwrap();
        assert!(rec.loss_total.is_finite(), "{:?} discrete", algo);
    }
}

#[test]
fn anneal_schedule_interpolates_from_one_to_floor() {
    let env = EpisodeConfig::default();
    let data = tiny_dataset(4);
    let config = TrainConfig { anneal_f_min: Some(0.5), total_steps: 100, ..tiny_config() };
    let mut trainer = Trainer::new(Algo::Rtc, config, env, &data, 28).unwrap();
    assert_eq!(trainer.f_now(), 1.0);
    trainer.step = 50;
    assert!((trainer.f_now() - 0.75).abs() < 1e-12);
    trainer.step = 100;
    assert_eq!(trainer.f_now(), 0.5);
    trainer.step = 200;
    assert_eq!(trainer.f_now(), 0.5);
}

#[test]
fn curve_csv_roundtrip() {
    let env = EpisodeConfig::default();
    let config = TrainConfig { total_steps: 10, eval_every: 5, ..tiny_config() };
    let data = tiny_dataset(8);
    let (curve, _) = train(Algo::Bc, config, env, &data, 29, |_| {}).unwrap();
    let text = curve.to_csv();
    let loaded = LearningCurve::from_csv(&text).unwrap();
    assert_eq!(loaded.to_csv(), text);
}
