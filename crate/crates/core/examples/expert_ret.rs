fn main() {
    let cfg = imlab::env::EpisodeConfig::default();
    println!("expert return over 2000 eps: {:.3}", imlab::metrics::expert_return(&cfg, 2000, 1));
}
