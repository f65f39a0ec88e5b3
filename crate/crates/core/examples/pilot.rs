use imlab::env::{generate_dataset, EpisodeConfig};
use imlab::train::{train, Algo, TrainConfig};

fn ema(values: &[f64], decay: f64) -> f64 {
    let mut acc = values[0];
    for &v in &values[1..] {
        acc = decay * acc + (1.0 - decay) * v;
    }
    acc
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let algo = Algo::parse(&args[1]).unwrap();
    let seed: u64 = args[2].parse().unwrap();
    let steps: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(64);
    let hidden: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(32);
    let env = EpisodeConfig::default();
    let data = generate_dataset(10_000, 12345, &env).unwrap();
    let config = TrainConfig {
        batch_size: batch,
        hidden,
        disc_embed: 32,
        total_steps: steps,
        eval_every: 100,
        eval_episodes: 500,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (curve, _trainer) = train(algo, config, env, &data, seed, |row| {
        if row.step % 2000 == 0 {
            eprintln!(
                "[{} s{}] step {} return {:.2} jsd {:.4} freq {:.3} losses tot {:.3} rec {:.3} adv {:.3} kl {:.4} disc {:.3}",
                algo.name(), seed, row.step, row.eval_return, row.eval_jsd, row.eval_freq_lower,
                row.losses.loss_total, row.losses.loss_rec, row.losses.loss_adv, row.losses.loss_kl, row.losses.loss_disc
            );
        }
    })
    .unwrap();
    // diagnostic: how close does the policy get to a goal per episode
    {
        use imlab::env::{reset, Vec2};
        use imlab::metrics::PolicyRunner;
        use imlab::rng::substream;
        let trainer = &_trainer;
        let prior = match algo {
            Algo::Rtc | Algo::NaiveHierarchy => Some(&trainer.models.prior),
            _ => None,
        };
        let runner = PolicyRunner { policy: &trainer.models.policy, prior };
        let inits: Vec<_> = (0..200)
            .map(|i| reset(&mut substream(9090, "diag", i), &env))
            .collect();
        let trajs = runner.rollouts(&inits, &env, 9090, "diag-noise", 0);
        let mut mins: Vec<f64> = trajs
            .iter()
            .map(|tr| {
                (1..=env.horizon)
                    .map(|t| {
                        let o = tr.observations[t];
                        let a = Vec2::new(o[0], o[1]);
                        a.dist(Vec2::new(o[2], o[3])).min(a.dist(Vec2::new(o[4], o[5])))
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        mins.sort_by(f64::total_cmp);
        eprintln!(
            "[diag {}] min goal distance percentiles: p10 {:.3} p50 {:.3} p90 {:.3}",
            algo.name(), mins[20], mins[100], mins[180]
        );
    }
    let rets: Vec<f64> = curve.rows.iter().map(|r| r.eval_return).collect();
    let jsds: Vec<f64> = curve.rows.iter().map(|r| r.eval_jsd).collect();
    let freqs: Vec<f64> = curve.rows.iter().map(|r| r.eval_freq_lower).collect();
    println!(
        "FINAL {} seed {} steps {}: smoothed return {:.3} jsd {:.5} freq_lower {:.3} ({:.1} min)",
        algo.name(),
        seed,
        steps,
        ema(&rets, 0.9),
        ema(&jsds, 0.9),
        ema(&freqs, 0.9),
        t0.elapsed().as_secs_f64() / 60.0
    );
}
