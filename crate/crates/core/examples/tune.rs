use imlab::env::{generate_dataset, EpisodeConfig};
use imlab::models::DiscMode;
use imlab::train::{train, Algo, KlMode, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let algo = Algo::parse(&args[1]).unwrap();
    let seed: u64 = args[2].parse().unwrap();
    let steps: u64 = args[3].parse().unwrap();
    let disc_lr: f64 = args[4].parse().unwrap();
    let mode = if args[5] == "per_step" { DiscMode::PerStep } else { DiscMode::Trajectory };
    let batch: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(64);
    let hidden: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(64);
    let bc_aux: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let kl_mode = args.get(9).map(|s| KlMode::parse(s).unwrap()).unwrap_or(KlMode::PriorEncoder);
    let env = EpisodeConfig::default();
    let data = generate_dataset(10_000, 12345, &env).unwrap();
    let config = TrainConfig {
        batch_size: batch,
        hidden,
        disc_embed: 32,
        total_steps: steps,
        eval_every: 100,
        eval_episodes: 400,
        disc_lr,
        disc_mode: mode,
        bc_aux_weight: bc_aux,
        kl_mode,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (curve, _tr) = train(algo, config, env, &data, seed, |row| {
        if row.step % 1000 == 0 {
            eprintln!(
                "[{} dlr={} {:?} b{} h{}] {} ret {:.2} jsd {:.4} freq {:.3} adv {:.1} disc {:.3} rec {:.2}",
                algo.name(), disc_lr, mode, batch, hidden, row.step, row.eval_return, row.eval_jsd,
                row.eval_freq_lower, row.losses.loss_adv, row.losses.loss_disc, row.losses.loss_rec
            );
        }
    })
    .unwrap();
    let (r, j, f) = curve.smoothed_final(0.9);
    println!(
        "TUNE {} dlr={} mode={:?} b={} h={} bc={} kl={:?} : ret {:.3} jsd {:.5} freq {:.3} [{:.1} min]",
        algo.name(), disc_lr, mode, batch, hidden, bc_aux, kl_mode, r, j, f,
        t0.elapsed().as_secs_f64() / 60.0
    );
}
