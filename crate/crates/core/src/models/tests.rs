use super::*;
use crate::env::{expert_rollout, EpisodeConfig};
use crate::models::latent::reference_dist;
use crate::models::policy::LOGSTD_RANGE;
use crate::rng::stream;
use crate::tensor::grad_check;

/// Zero every weight and bias, then overwrite the final head bias so the
/// network output is exactly `head_bias` regardless of input.
fn pin_head_bias(params: &mut ModelParams, head_name: &str, head_bias: &[f64]) {
    for p in &mut params.entries {
        for v in p.value.data_mut() {
            *v = 0.0;
        }
    }
    let p = params
        .entries
        .iter_mut()
        .find(|p| p.name == head_name)
        .expect("head bias present");
    p.value.data_mut().copy_from_slice(head_bias);
}

fn test_policy(seed: u64) -> GmmPolicy {
    GmmPolicy::new(8, 2, 2, 2, 16, &mut stream(seed, "policy-init"))
}

#[test]
fn degenerate_mixture_collapses_to_first_mean() {
    // weights ~ (1, 0), logstd driven to the clamp floor: the sample sits
    // within 3 * exp(-5) of mean_0 for |noise| <= 3.
    let mut policy = test_policy(1);
    // head: [logit0, logit1, mean0 (2), mean1 (2), logstd0 (2), logstd1 (2)]
    let head = [30.0, -30.0, 0.7, -0.3, 9.0, 9.0, -10.0, -10.0, -10.0, -10.0];
    pin_head_bias(&mut policy.params, "policy.head.b", &head);
    let mut tape = Tape::new();
    let ids = policy.params.bind(&mut tape, false);
    let obs = tape.constant(Array::matrix(1, 8, vec![0.1; 8]).unwrap());
    let latent = tape.constant(Array::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    let noise = PolicyNoise {
        uniform: vec![0.5],
        normal: Array::matrix(1, 2, vec![2.5, -2.0]).unwrap(),
    };
    let a = policy.sample(&mut tape, &ids, obs, latent, &noise).unwrap();
    let v = tape.value(a);
    assert!((v.at(0, 0) - 0.7).abs() <= 3.0 * (-5.0f64).exp());
    assert!((v.at(0, 1) + 0.3).abs() <= 3.0 * (-5.0f64).exp());
}

#[test]
fn sampling_is_deterministic_given_noise() {
    let policy = test_policy(2);
    let noise = PolicyNoise::draw(3, 2, &mut stream(7, "noise"));
    let run = || {
        let mut tape = Tape::new();
        let ids = policy.params.bind(&mut tape, false);
        let obs = tape.constant(Array::matrix(3, 8, (0..24).map(|i| i as f64 * 0.01).collect()).unwrap());
        let latent = tape.constant(Array::zeros(vec![3, 2]));
        let a = policy.sample(&mut tape, &ids, obs, latent, &noise).unwrap();
        tape.value(a).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn taped_and_plain_samples_agree_exactly() {
    let policy = test_policy(3);
    let mut rng = stream(8, "noise");
    for trial in 0..20 {
        let noise = PolicyNoise::draw(5, 2, &mut rng);
        let obs_data: Vec<f64> = (0..40).map(|i| ((i * 13 + trial) % 11) as f64 * 0.05 - 0.2).collect();
        let lat_data: Vec<f64> = (0..10).map(|i| (i as f64) * 0.1 - 0.5).collect();
        let mut tape = Tape::new();
        let ids = policy.params.bind(&mut tape, false);
        let obs = tape.constant(Array::matrix(5, 8, obs_data.clone()).unwrap());
        let latent = tape.constant(Array::matrix(5, 2, lat_data.clone()).unwrap());
        let taped = policy.sample(&mut tape, &ids, obs, latent, &noise).unwrap();
        let mut ol = Array::zeros(vec![5, 10]);
        for i in 0..5 {
            ol.data_mut()[i * 10..i * 10 + 8].copy_from_slice(&obs_data[i * 8..(i + 1) * 8]);
            ol.data_mut()[i * 10 + 8..i * 10 + 10].copy_from_slice(&lat_data[i * 2..(i + 1) * 2]);
        }
        let plain = policy.sample_plain(&ol, &noise);
        assert_eq!(tape.value(taped).data(), plain.data());
    }
}

#[test]
fn sample_mean_matches_mixture_mean() {
    // Monte Carlo over 1e5 draws against the closed-form mixture mean.
    let mut policy = test_policy(4);
    let head = [0.4, -0.6, 1.0, 2.0, -1.0, 0.5, -1.0, -1.2, -0.8, -1.5];
    pin_head_bias(&mut policy.params, "policy.head.b", &head);
    let w0 = (0.4f64 - crate::tensor::logsumexp(&[0.4, -0.6])).exp();
    let w1 = 1.0 - w0;
    let mus = [[1.0, 2.0], [-1.0, 0.5]];
    let sigmas = [[(-1.0f64).exp(), (-1.2f64).exp()], [(-0.8f64).exp(), (-1.5f64).exp()]];
    let mean = [w0 * mus[0][0] + w1 * mus[1][0], w0 * mus[0][1] + w1 * mus[1][1]];
    // mixture variance: sum_k w_k (sigma_k^2 + mu_k^2) - mu_mix^2
    let var: Vec<f64> = (0..2)
        .map(|d| {
            w0 * (sigmas[0][d] * sigmas[0][d] + mus[0][d] * mus[0][d])
                + w1 * (sigmas[1][d] * sigmas[1][d] + mus[1][d] * mus[1][d])
                - mean[d] * mean[d]
        })
        .collect();
    let n = 100_000;
    let mut rng = stream(9, "mc");
    let obs_latent = Array::zeros(vec![n, 10]);
    let noise = PolicyNoise::draw(n, 2, &mut rng);
    let samples = policy.sample_plain(&obs_latent, &noise);
    for d in 0..2 {
        let emp: f64 = (0..n).map(|i| samples.at(i, d)).sum::<f64>() / n as f64;
        let tol = 3.0 * var[d].sqrt() / (n as f64).sqrt();
        assert!(
            (emp - mean[d]).abs() < tol,
            "dim {}: empirical {} vs {} (tol {})",
            d,
            emp,
            mean[d],
            tol
        );
    }
}

#[test]
fn log_prob_single_mode_equals_gaussian_pdf() {
    let mut policy = test_policy(5);
    let head = [40.0, -40.0, 0.3, -0.2, 0.0, 0.0, -1.0, -0.5, 0.0, 0.0];
    pin_head_bias(&mut policy.params, "policy.head.b", &head);
    let mut tape = Tape::new();
    let ids = policy.params.bind(&mut tape, false);
    let obs = tape.constant(Array::zeros(vec![1, 8]));
    let latent = tape.constant(Array::zeros(vec![1, 2]));
    let action = tape.constant(Array::matrix(1, 2, vec![0.5, 0.1]).unwrap());
    let lp = policy.log_prob(&mut tape, &ids, obs, latent, action).unwrap();
    let manual = |x: f64, mu: f64, ls: f64| {
        let z = (x - mu) * (-ls).exp();
        -0.5 * z * z - ls - 0.5 * std::f64::consts::TAU.ln()
    };
    let want = manual(0.5, 0.3, -1.0) + manual(0.1, -0.2, -0.5);
    assert!((tape.value(lp).item() - want).abs() < 1e-9);
}

#[test]
fn log_prob_orders_near_and_far_points() {
    let policy = test_policy(6);
    let mut tape = Tape::new();
    let ids = policy.params.bind(&mut tape, false);
    let obs = tape.constant(Array::zeros(vec![1, 8]));
    let latent = tape.constant(Array::zeros(vec![1, 2]));
    // mixture mean of the actual (random-weight) policy
    let x = tape.concat_cols(&[obs, latent]).unwrap();
    let heads = policy.heads(&mut tape, &ids, x).unwrap();
    let logits = tape.value(heads.logits).row(0).to_vec();
    let means = tape.value(heads.means).row(0).to_vec();
    let lse = crate::tensor::logsumexp(&logits);
    let mut mix_mean = [0.0; 2];
    for k in 0..2 {
        let w = (logits[k] - lse).exp();
        mix_mean[0] += w * means[k * 2];
        mix_mean[1] += w * means[k * 2 + 1];
    }
    let near = tape.constant(Array::matrix(1, 2, mix_mean.to_vec()).unwrap());
    let far = tape.constant(Array::matrix(1, 2, vec![mix_mean[0] + 60.0, mix_mean[1] - 60.0]).unwrap());
    let lp_near = policy.log_prob(&mut tape, &ids, obs, latent, near).unwrap();
    let lp_far = policy.log_prob(&mut tape, &ids, obs, latent, far).unwrap();
    assert!(tape.value(lp_near).item() > tape.value(lp_far).item());
}

#[test]
fn log_prob_density_integrates_to_one() {
    // 2-d trapezoid quadrature of exp(log_prob) on a wide grid.
    let mut policy = test_policy(7);
    let head = [0.3, -0.1, 0.4, -0.3, -0.6, 0.2, -0.7, -1.0, -0.3, -1.2];
    pin_head_bias(&mut policy.params, "policy.head.b", &head);
    let ol = Array::zeros(vec![1, 10]);
    let (lo, hi, steps) = (-6.0, 6.0, 400usize);
    let h = (hi - lo) / steps as f64;
    let mut integral = 0.0;
    for i in 0..=steps {
        for j in 0..=steps {
            let x = [lo + i as f64 * h, lo + j as f64 * h];
            let p = policy.log_prob_plain(&ol, &x).exp();
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 }
                * if j == 0 || j == steps { 0.5 } else { 1.0 };
            integral += w * p;
        }
    }
    integral *= h * h;
    assert!((integral - 1.0).abs() < 1e-3, "density integral {}", integral);
}

#[test]
fn gmm_log_prob_gradient_matches_fd() {
    // GMM negative log-likelihood gradient against central differences.
    let policy = GmmPolicy::new(8, 2, 2, 2, 6, &mut stream(10, "gmm-fd"));
    let obs = Array::matrix(3, 8, (0..24).map(|i| (i % 7) as f64 * 0.1 - 0.3).collect()).unwrap();
    let latent = Array::matrix(3, 2, vec![0.2, -0.4, 0.0, 0.1, -0.2, 0.3]).unwrap();
    let actions = Array::matrix(3, 2, vec![0.05, -0.02, 0.1, 0.0, -0.07, 0.03]).unwrap();
    let values: Vec<Array> = policy.params.entries.iter().map(|p| p.value.clone()).collect();
    let eval = |vals: &[Array], want_grad: bool| {
        let mut p = policy.clone();
        for (e, v) in p.params.entries.iter_mut().zip(vals) {
            e.value = v.clone();
        }
        let mut tape = Tape::new();
        let ids = p.params.bind(&mut tape, want_grad);
        let o = tape.constant(obs.clone());
        let l = tape.constant(latent.clone());
        let a = tape.constant(actions.clone());
        let lp = p.log_prob(&mut tape, &ids, o, l, a).unwrap();
        let m = tape.mean(lp);
        let loss = tape.neg(m);
        let v = tape.value(loss).item();
        if want_grad {
            let grads = tape.backward(loss).unwrap();
            let gs = p.params.grads_or_zeros(&ids, &grads);
            (v, gs.into_iter().map(|g| g.unwrap()).collect::<Vec<_>>())
        } else {
            (v, Vec::new())
        }
    };
    let analytic = eval(&values, true).1;
    let err = grad_check(|vals| eval(vals, false).0, &values, &analytic, 1e-5);
    assert!(err < 1e-4, "gmm nll fd error {}", err);
}

#[test]
fn zero_weight_encoder_emits_head_bias() {
    let spec = LatentSpec::Continuous { dim: 2 };
    let mut enc = TrajectoryEncoder::new(spec, 30, 10, 8, 16, 16, &mut stream(11, "enc"));
    pin_head_bias(&mut enc.params, "encoder.head.head.b", &[0.25, -0.75, -1.0, -2.0]);
    let config = EpisodeConfig::default();
    let traj = expert_rollout(&mut stream(12, "enc-roll"), &config);
    let mut tape = Tape::new();
    let ids = enc.params.bind(&mut tape, false);
    let dist = enc.dist(&mut tape, &ids, &[&traj]).unwrap();
    match dist {
        LatentDist::Gaussian { mean, logstd } => {
            assert_eq!(tape.value(mean).data(), &[0.25, -0.75]);
            assert_eq!(tape.value(logstd).data(), &[-1.0, -2.0]);
        }
        _ => panic!("wrong dist kind"),
    }
}

#[test]
fn pooled_embedding_ignores_exact_duplicates_but_not_dominating_ones() {
    let enc = TrajectoryEncoder::new(
        LatentSpec::Continuous { dim: 2 },
        4,
        10,
        8,
        16,
        16,
        &mut stream(13, "pool"),
    );
    let mut rng = stream(14, "pool-data");
    use rand::Rng;
    let feats: Vec<f64> = (0..40).map(|_| rng.random::<f64>() - 0.5).collect();
    let pool_of = |rows: &[f64], idx: &[u32]| {
        let mut tape = Tape::new();
        let ids = enc.params.bind(&mut tape, false);
        let f = tape.constant(Array::new(vec![idx.len(), 10], rows.to_vec()).unwrap());
        let pos = tape.gather_rows(ids[enc.params.entries.len() - 1], idx).unwrap();
        let x = tape.concat_cols(&[f, pos]).unwrap();
        let emb = enc.embedder.forward(&mut tape, &ids, x).unwrap();
        let pooled = tape.max_pool_rows(emb, idx.len()).unwrap();
        tape.value(pooled).clone()
    };
    let base = pool_of(&feats, &[0, 1, 2, 3]);
    // append an exact duplicate of step 2 with the same positional index
    let mut dup = feats.clone();
    dup.extend_from_slice(&feats[20..30]);
    let with_dup = pool_of(&dup, &[0, 1, 2, 3, 2]);
    assert_eq!(base.data(), with_dup.data(), "exact duplicate must not move the max");
    // make the duplicate dominate: huge feature values swamp some channel
    let mut dom = feats.clone();
    dom.extend(std::iter::repeat(25.0).take(10));
    let with_dom = pool_of(&dom, &[0, 1, 2, 3, 2]);
    assert_ne!(base.data(), with_dom.data(), "dominating duplicate must move the max");
}

#[test]
fn discrete_encoder_sample_is_one_hot_per_block() {
    let spec = LatentSpec::Discrete { blocks: 3, block_size: 4 };
    let enc = TrajectoryEncoder::new(spec, 30, 10, 8, 16, 16, &mut stream(15, "enc-d"));
    let config = EpisodeConfig::default();
    let trajs: Vec<_> = (0..5).map(|i| expert_rollout(&mut stream(20 + i, "roll-d"), &config)).collect();
    let refs: Vec<&_> = trajs.iter().collect();
    let mut tape = Tape::new();
    let ids = enc.params.bind(&mut tape, false);
    let dist = enc.dist(&mut tape, &ids, &refs).unwrap();
    let mut rng = stream(16, "gumbel");
    use rand::Rng;
    let noise = Array::new(vec![5, 12], (0..60).map(|_| rng.random::<f64>()).collect()).unwrap();
    let latent = enc.sample(&mut tape, &dist, &noise).unwrap();
    let v = tape.value(latent);
    assert_eq!(v.shape(), &[5, 12]);
    for i in 0..5 {
        for b in 0..3 {
            let block = &v.row(i)[b * 4..(b + 1) * 4];
            let sum: f64 = block.iter().sum();
            assert_eq!(sum, 1.0);
            assert!(block.iter().all(|&x| x == 0.0 || x == 1.0));
        }
    }
}

#[test]
fn kl_zero_for_identical_gaussians() {
    let prior = LatentPrior::new(LatentSpec::Continuous { dim: 3 });
    let mut tape = Tape::new();
    let ids = prior.params.bind(&mut tape, false);
    let d1 = prior.dist(&mut tape, &ids);
    let d2 = prior.dist(&mut tape, &ids);
    let kl = kl_divergence(&mut tape, &d1, &d2).unwrap();
    assert!(tape.value(kl).item().abs() < 1e-15);
}

#[test]
fn kl_unit_gaussians_shifted_by_one_is_half_per_dim() {
    let mut tape = Tape::new();
    let m0 = tape.constant(Array::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    let s0 = tape.constant(Array::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    let m1 = tape.constant(Array::matrix(1, 2, vec![1.0, 1.0]).unwrap());
    let s1 = tape.constant(Array::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    let p = LatentDist::Gaussian { mean: m0, logstd: s0 };
    let q = LatentDist::Gaussian { mean: m1, logstd: s1 };
    let kl = kl_divergence(&mut tape, &p, &q).unwrap();
    assert!((tape.value(kl).item() - 1.0).abs() < 1e-12, "0.5 per dim over 2 dims");
}

#[test]
fn kl_closed_form_matches_monte_carlo() {
    use rand_distr::{Distribution, StandardNormal};
    let (mp, sp) = ([0.3, -0.5], [0.2f64, -0.4]);
    let (mq, sq) = ([-0.2, 0.1], [0.5f64, 0.0]);
    let mut tape = Tape::new();
    let a = tape.constant(Array::matrix(1, 2, mp.to_vec()).unwrap());
    let b = tape.constant(Array::matrix(1, 2, sp.to_vec()).unwrap());
    let c = tape.constant(Array::matrix(1, 2, mq.to_vec()).unwrap());
    let d = tape.constant(Array::matrix(1, 2, sq.to_vec()).unwrap());
    let p = LatentDist::Gaussian { mean: a, logstd: b };
    let q = LatentDist::Gaussian { mean: c, logstd: d };
    let kl = kl_divergence(&mut tape, &p, &q).unwrap();
    let closed = tape.value(kl).item();
    let mut rng = stream(17, "kl-mc");
    let n = 1_000_000;
    let mut acc = 0.0;
    let lp = |x: f64, m: f64, ls: f64| {
        let z = (x - m) * (-ls).exp();
        -0.5 * z * z - ls - 0.5 * std::f64::consts::TAU.ln()
    };
    for _ in 0..n {
        for dim in 0..2 {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let x = mp[dim] + sp[dim].exp() * eps;
            acc += lp(x, mp[dim], sp[dim]) - lp(x, mq[dim], sq[dim]);
        }
    }
    let mc = acc / n as f64;
    assert!(
        (closed - mc).abs() / closed.abs() < 0.01,
        "closed {} vs mc {}",
        closed,
        mc
    );
}

#[test]
fn kl_mode_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let m = tape.constant(Array::matrix(1, 2, vec![0.0; 2]).unwrap());
    let s = tape.constant(Array::matrix(1, 2, vec![0.0; 2]).unwrap());
    let l = tape.constant(Array::matrix(1, 4, vec![0.0; 4]).unwrap());
    let p = LatentDist::Gaussian { mean: m, logstd: s };
    let q = LatentDist::Categorical { block_logits: vec![l] };
    assert!(kl_divergence(&mut tape, &p, &q).is_err());
}

#[test]
fn discriminator_zero_weights_scores_half() {
    let horizon = 6;
    let mut disc = Discriminator::new(DiscMode::Trajectory, horizon, 10, 8, &mut stream(18, "disc"));
    for p in &mut disc.params.entries {
        for v in p.value.data_mut() {
            *v = 0.0;
        }
    }
    let mut tape = Tape::new();
    let ids = disc.params.bind(&mut tape, false);
    let feats = tape.constant(Array::new(vec![2 * horizon, 10], vec![0.33; 2 * horizon * 10]).unwrap());
    let s = disc.score(&mut tape, &ids, feats).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn discriminator_scores_stay_inside_clamp_range() {
    let horizon = 4;
    let mut disc = Discriminator::new(DiscMode::PerStep, horizon, 10, 8, &mut stream(19, "disc2"));
    pin_head_bias(&mut disc.params, "disc.head.head.b", &[1000.0]);
    let mut tape = Tape::new();
    let ids = disc.params.bind(&mut tape, false);
    let feats = tape.constant(Array::new(vec![horizon, 10], vec![0.0; 40]).unwrap());
    let s = disc.score(&mut tape, &ids, feats).unwrap();
    let hi = 1.0 / (1.0 + (-20.0f64).exp());
    for &v in tape.value(s).data() {
        assert!(v <= hi && v > 0.0);
    }
}

#[test]
fn per_step_scores_permute_with_timesteps() {
    let horizon = 5;
    let disc = Discriminator::new(DiscMode::PerStep, horizon, 10, 8, &mut stream(20, "disc3"));
    let mut rng = stream(21, "feats");
    use rand::Rng;
    let feats: Vec<f64> = (0..horizon * 10).map(|_| rng.random::<f64>()).collect();
    let score_of = |rows: &[f64]| {
        let mut tape = Tape::new();
        let ids = disc.params.bind(&mut tape, false);
        let f = tape.constant(Array::new(vec![horizon, 10], rows.to_vec()).unwrap());
        let s = disc.score(&mut tape, &ids, f).unwrap();
        tape.value(s).data().to_vec()
    };
    let base = score_of(&feats);
    let mut permuted = Vec::new();
    for t in [3usize, 0, 4, 1, 2] {
        permuted.extend_from_slice(&feats[t * 10..(t + 1) * 10]);
    }
    let perm = score_of(&permuted);
    let mut a = base.clone();
    let mut b = perm.clone();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a, b, "multiset of per-step scores is permutation invariant");
    assert_eq!(perm[0], base[3]);
}

#[test]
fn posterior_uniform_gives_log_k_and_peaked_gives_zero() {
    let horizon = 4;
    let spec = LatentSpec::Discrete { blocks: 1, block_size: 8 };
    let mut post = Posterior::new(spec, horizon, 10, 8, 8, &mut stream(22, "post"));
    for p in &mut post.params.entries {
        for v in p.value.data_mut() {
            *v = 0.0;
        }
    }
    let mut tape = Tape::new();
    let ids = post.params.bind(&mut tape, false);
    let feats = tape.constant(Array::zeros(vec![horizon, 10]));
    let obs0 = tape.constant(Array::zeros(vec![1, 8]));
    let mut onehot = Array::zeros(vec![1, 8]);
    onehot.set(0, 2, 1.0);
    let latent = tape.constant(onehot.clone());
    let lp = post.log_prob(&mut tape, &ids, feats, obs0, latent).unwrap();
    assert!((tape.value(lp).item() + (8.0f64).ln()).abs() < 1e-12);
    // a near-delta posterior on the right type gives log prob ~ 0
    let mut head = vec![0.0; 8];
    head[2] = 60.0;
    pin_head_bias(&mut post.params, "posterior.head.head.b", &head);
    let mut tape = Tape::new();
    let ids = post.params.bind(&mut tape, false);
    let feats = tape.constant(Array::zeros(vec![horizon, 10]));
    let obs0 = tape.constant(Array::zeros(vec![1, 8]));
    let latent = tape.constant(onehot);
    let lp = post.log_prob(&mut tape, &ids, feats, obs0, latent).unwrap();
    assert!(tape.value(lp).item().abs() < 1e-9);
}

#[test]
fn posterior_gradient_matches_fd() {
    let horizon = 3;
    let spec = LatentSpec::Continuous { dim: 2 };
    let post = Posterior::new(spec, horizon, 10, 8, 6, &mut stream(23, "post-fd"));
    let feats = Array::new(vec![horizon * 2, 10], (0..60).map(|i| (i % 5) as f64 * 0.1 - 0.2).collect()).unwrap();
    let obs0 = Array::new(vec![2, 8], (0..16).map(|i| (i % 3) as f64 * 0.2).collect()).unwrap();
    let latent = Array::matrix(2, 2, vec![0.3, -0.1, 0.0, 0.4]).unwrap();
    let values: Vec<Array> = post.params.entries.iter().map(|p| p.value.clone()).collect();
    let eval = |vals: &[Array], want_grad: bool| {
        let mut p = post.clone();
        for (e, v) in p.params.entries.iter_mut().zip(vals) {
            e.value = v.clone();
        }
        let mut tape = Tape::new();
        let ids = p.params.bind(&mut tape, want_grad);
        let f = tape.constant(feats.clone());
        let o = tape.constant(obs0.clone());
        let l = tape.constant(latent.clone());
        let lp = p.log_prob(&mut tape, &ids, f, o, l).unwrap();
        let m = tape.mean(lp);
        let loss = tape.neg(m);
        let v = tape.value(loss).item();
        if want_grad {
            let grads = tape.backward(loss).unwrap();
            let gs = p.params.grads_or_zeros(&ids, &grads);
            (v, gs.into_iter().map(|g| g.unwrap()).collect::<Vec<_>>())
        } else {
            (v, Vec::new())
        }
    };
    let analytic = eval(&values, true).1;
    let err = grad_check(|vals| eval(vals, false).0, &values, &analytic, 1e-5);
    assert!(err < 1e-4, "posterior fd error {}", err);
}

#[test]
fn parameter_counts_are_stable_across_seeds() {
    let a = test_policy(100);
    let b = test_policy(101);
    assert_eq!(a.params.count(), b.params.count());
    let ea = TrajectoryEncoder::new(LatentSpec::Continuous { dim: 2 }, 30, 10, 8, 32, 32, &mut stream(1, "e"));
    let eb = TrajectoryEncoder::new(LatentSpec::Continuous { dim: 2 }, 30, 10, 8, 32, 32, &mut stream(2, "e"));
    assert_eq!(ea.params.count(), eb.params.count());
}

#[test]
fn checkpoints_roundtrip_bit_exactly() {
    let policy = test_policy(30);
    let prior = LatentPrior::new(LatentSpec::Continuous { dim: 2 });
    let ckpt = Checkpoint::capture("cfg-echo", 42, 7, &[("policy", &policy.params), ("prior", &prior.params)]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.seed, 42);
    assert_eq!(loaded.step, 7);
    let mut policy2 = test_policy(31);
    let mut prior2 = LatentPrior::new(LatentSpec::Continuous { dim: 2 });
    assert_ne!(policy2.params.entries[0].value.data(), policy.params.entries[0].value.data());
    loaded
        .restore(&mut [("policy", &mut policy2.params), ("prior", &mut prior2.params)])
        .unwrap();
    for (a, b) in policy.params.entries.iter().zip(&policy2.params.entries) {
        assert_eq!(a.value.data(), b.value.data());
    }
}

#[test]
fn reference_dist_matches_spec_shapes() {
    let mut tape = Tape::new();
    match reference_dist(&mut tape, LatentSpec::Continuous { dim: 2 }) {
        LatentDist::Gaussian { mean, .. } => assert_eq!(tape.value(mean).shape(), &[1, 2]),
        _ => panic!(),
    }
    match reference_dist(&mut tape, LatentSpec::Discrete { blocks: 3, block_size: 16 }) {
        LatentDist::Categorical { block_logits } => assert_eq!(block_logits.len(), 3),
        _ => panic!(),
    }
}

#[test]
fn logstd_clamp_is_respected() {
    let mut policy = test_policy(40);
    let head = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -100.0, 100.0, 3.0, -7.0];
    pin_head_bias(&mut policy.params, "policy.head.b", &head);
    let mut tape = Tape::new();
    let ids = policy.params.bind(&mut tape, false);
    let obs = tape.constant(Array::zeros(vec![1, 8]));
    let latent = tape.constant(Array::zeros(vec![1, 2]));
    let x = tape.concat_cols(&[obs, latent]).unwrap();
    let heads = policy.heads(&mut tape, &ids, x).unwrap();
    let ls = tape.value(heads.logstds);
    for &v in ls.data() {
        assert!(v >= LOGSTD_RANGE.0 && v <= LOGSTD_RANGE.1);
    }
}
