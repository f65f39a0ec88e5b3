use imlab::env::{generate_dataset, EpisodeConfig};
use imlab::train::{train, Algo, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let batch: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let hidden: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let steps: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(50);
    let algo = match args.get(4).map(|s| s.as_str()).unwrap_or("rtc") {
        "bc" => Algo::Bc,
        "mgail" => Algo::Mgail,
        "infomgail" => Algo::InfoMgail,
        _ => Algo::Rtc,
    };
    let env = EpisodeConfig::default();
    let data = generate_dataset(2000, 1, &env).unwrap();
    let config = TrainConfig {
        batch_size: batch,
        hidden,
        total_steps: steps,
        eval_every: 1_000_000,
        eval_episodes: 10,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (_, _) = train(algo, config, env, &data, 0, |_| {}).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "algo={:?} batch={} hidden={} steps={}: {:.1} ms/step, 20k steps = {:.1} min",
        algo, batch, hidden, steps,
        dt / steps as f64 * 1e3,
        dt / steps as f64 * 20_000.0 / 60.0
    );
}
