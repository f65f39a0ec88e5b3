//! Batch front-end: dataset generation, training runs, seed sweeps,
//! theorem analysis and plot-data emission.
//!
//! Exit codes: 0 success, 1 theorem violation, 2 usage error,
//! 3 training divergence, 4 IO failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{sha256_hex, unix_now, ExperimentConfig, RunManifest};
use crate::env::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{mean_min_ade, sign_test_p, PolicyRunner};
use crate::models::{load_checkpoint, save_checkpoint};
use crate::train::{Algo, CurveRow, LearningCurve, Trainer};
use crate::typeshift::{build_traffic_world, random_world_sweep, verify_theorem, InfoReport};

#[derive(Parser)]
#[command(name = "imlab", version, about = "Double Goal imitation-learning laboratory")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an expert dataset file plus manifest.
    GenData(GenDataArgs),
    /// Train one model and write curve, checkpoints and manifest.
    Train(TrainArgs),
    /// Train a grid of algos x seeds and aggregate the results.
    Sweep(SweepArgs),
    /// Exact conditional-type-shift analysis on finite worlds.
    AnalyzeTheorem(AnalyzeArgs),
    /// Collect run curves into one tidy long-format CSV.
    Plotdata(PlotdataArgs),
    /// Re-run a finished run from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    algo: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override config keys, e.g. --set train.batch_size=64
    #[arg(long = "set")]
    set: Vec<String>,
    /// Resume from a checkpoint, continuing the step count.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also estimate minADE at the end of training.
    #[arg(long, default_value_t = false)]
    minade: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated list, e.g. bc,mgail,rtc,naive
    #[arg(long)]
    algos: String,
    #[arg(long)]
    seeds: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "set")]
    set: Vec<String>,
    /// First seed of the sweep range.
    #[arg(long, default_value_t = 0)]
    seed0: u64,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Epsilon values for the hand-built worlds.
    #[arg(long, num_args = 1.., value_delimiter = ' ')]
    epsilon: Vec<f64>,
    /// 1, 2, or "both".
    #[arg(long, default_value = "both")]
    solution: String,
    /// Run a random-world sweep of this size instead.
    #[arg(long)]
    sweep: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotdataArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Map crate errors onto the documented exit codes.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => 3,
        Error::Io(_) => 4,
        _ => 2,
    }
}

pub fn run() -> Result<i32> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a).map(|_| 0),
        Command::Train(a) => cmd_train(a).map(|_| 0),
        Command::Sweep(a) => cmd_sweep(a).map(|_| 0),
        Command::AnalyzeTheorem(a) => cmd_analyze_theorem(a),
        Command::Plotdata(a) => cmd_plotdata(a).map(|_| 0),
        Command::Replay(a) => cmd_replay(a).map(|_| 0),
    }
}

fn out_root() -> PathBuf {
    std::env::var_os("IMLAB_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    base.with_overrides(overrides)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    if args.n == 0 {
        return Err(Error::invalid("--n must be at least 1"));
    }
    let config = crate::env::EpisodeConfig::default();
    let data = generate_dataset(args.n, args.seed, &config)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    data.save(&args.out)?;
    let manifest = format!(
        "kind = \"dataset\"\nn = {}\nseed = {}\nhorizon = {}\np_lower = {}\n",
        args.n, args.seed, config.horizon, config.p_lower
    );
    std::fs::write(manifest_path_for(&args.out), manifest)?;
    println!("wrote {} episodes to {}", args.n, args.out.display());
    Ok(())
}

fn manifest_path_for(data_path: &Path) -> PathBuf {
    let mut os = data_path.as_os_str().to_owned();
    os.push(".manifest.toml");
    PathBuf::from(os)
}

/// Outcome of one training run on disk.
pub struct RunResult {
    pub curve: LearningCurve,
    pub diverged: bool,
}

/// Drive one full training run, writing resolved config, manifest, curve
/// and checkpoints into `out`. On divergence the last-good checkpoint
/// stays behind and the manifest is marked.
pub fn run_training(
    algo: Algo,
    config: &ExperimentConfig,
    data: &Dataset,
    data_path: &str,
    data_hash: &str,
    seed: u64,
    out: &Path,
    resume: Option<&Path>,
    minade: bool,
    quiet: bool,
) -> Result<RunResult> {
    std::fs::create_dir_all(out)?;
    let config_text = config.to_toml();
    std::fs::write(out.join("config.toml"), &config_text)?;
    let mut manifest = RunManifest {
        algo: algo.name().into(),
        seed,
        data_file: data_path.into(),
        data_sha256: data_hash.into(),
        config_file: "config.toml".into(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        binary_version: env!("CARGO_PKG_VERSION").into(),
        started_unix: unix_now(),
        finished_unix: None,
        status: "running".into(),
        files: vec!["config.toml".into(), "curve.csv".into()],
    };
    manifest.save(&out.join("manifest.toml"))?;

    let train_config = config.train_config()?;
    let env_config = config.episode_config();
    let mut trainer = Trainer::new(algo, train_config, env_config, data, seed)?;
    if let Some(ckpt_path) = resume {
        let ckpt = load_checkpoint(ckpt_path)?;
        trainer.models.restore(&ckpt)?;
        trainer.step = ckpt.step;
        if !quiet {
            println!("resumed from {} at step {}", ckpt_path.display(), ckpt.step);
        }
    }
    if !quiet {
        println!("parameters: {}", trainer.models.count_summary());
    }

    let mut curve = LearningCurve::default();
    let mut last = crate::train::StepRecord::default();
    let mut best_return = f64::NEG_INFINITY;
    let mut diverged = false;
    loop {
        let step = trainer.step;
        if step % trainer.config.eval_every == 0 || step >= trainer.config.total_steps {
            let report = trainer.evaluate(trainer.config.eval_episodes, seed ^ 0x5eed_0e7a);
            let row = CurveRow {
                step,
                losses: last,
                eval_return: report.mean_return,
                eval_jsd: report.jsd_goal,
                eval_freq_lower: report.freq_lower,
            };
            curve.rows.push(row);
            std::fs::write(out.join("curve.csv"), curve.to_csv())?;
            if report.mean_return > best_return {
                best_return = report.mean_return;
                let ckpt = trainer.models.checkpoint(&config_text, seed, step);
                save_checkpoint(&out.join("checkpoint_best.json"), &ckpt)?;
            }
            let ckpt = trainer.models.checkpoint(&config_text, seed, step);
            save_checkpoint(&out.join("checkpoint_last.json"), &ckpt)?;
            if !quiet && step % (trainer.config.eval_every * 20) == 0 {
                println!(
                    "[{} seed {}] step {} return {:.2} jsd {:.4} freq {:.3}",
                    algo.name(),
                    seed,
                    step,
                    report.mean_return,
                    report.jsd_goal,
                    report.freq_lower
                );
            }
        }
        if step >= trainer.config.total_steps {
            break;
        }
        match trainer.training_step(data) {
            Ok(rec) => last = rec,
            Err(e @ Error::Divergence { .. }) => {
                manifest.status = "diverged".into();
                manifest.finished_unix = Some(unix_now());
                manifest.files.push("checkpoint_last.json".into());
                manifest.save(&out.join("manifest.toml"))?;
                eprintln!("{e}");
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }

    if !diverged {
        let ckpt = trainer.models.checkpoint(&config_text, seed, trainer.step);
        save_checkpoint(&out.join("checkpoint_final.json"), &ckpt)?;
        manifest.files.extend([
            "checkpoint_final.json".into(),
            "checkpoint_best.json".into(),
            "checkpoint_last.json".into(),
        ]);
        if minade {
            let prior = algo.is_hierarchical().then_some(&trainer.models.prior);
            let runner = PolicyRunner { policy: &trainer.models.policy, prior };
            let k = config.eval.minade_k;
            let n = config.eval.minade_episodes.min(data.trajectories.len());
            let v = mean_min_ade(&data.trajectories[..n], &runner, k, &env_config, seed ^ 0xade)?;
            std::fs::write(out.join("minade.csv"), format!("minade_k,n,value\n{k},{n},{v}\n"))?;
            manifest.files.push("minade.csv".into());
            if !quiet {
                println!("minADE(K={k}) over {n} episodes: {v:.4}");
            }
        }
        manifest.status = "complete".into();
        manifest.finished_unix = Some(unix_now());
        manifest.save(&out.join("manifest.toml"))?;
    }
    if diverged {
        return Err(Error::Divergence { what: "training".into(), step: trainer.step as usize });
    }
    Ok(RunResult { curve, diverged })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let algo = Algo::parse(&args.algo)?;
    let config = resolve_config(&args.config, &args.set)?;
    let data_bytes = std::fs::read(&args.data)?;
    let data_hash = sha256_hex(&data_bytes);
    let data = Dataset::from_file_string(
        std::str::from_utf8(&data_bytes).map_err(|_| Error::invalid("dataset is not utf-8"))?,
    )?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(format!("{}_seed{}", algo.name(), args.seed)));
    run_training(
        algo,
        &config,
        &data,
        &args.data.display().to_string(),
        &data_hash,
        args.seed,
        &out,
        args.resume.as_deref(),
        args.minade,
        false,
    )?;
    println!("run complete: {}", out.display());
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let manifest = RunManifest::load(&args.manifest)?;
    let run_dir = args
        .manifest
        .parent()
        .ok_or_else(|| Error::invalid("manifest has no parent directory"))?;
    let config = ExperimentConfig::load(&run_dir.join(&manifest.config_file))?;
    let data_bytes = std::fs::read(&manifest.data_file)?;
    if sha256_hex(&data_bytes) != manifest.data_sha256 {
        return Err(Error::invalid("dataset hash differs from the manifest"));
    }
    let data = Dataset::from_file_string(
        std::str::from_utf8(&data_bytes).map_err(|_| Error::invalid("dataset is not utf-8"))?,
    )?;
    let algo = Algo::parse(&manifest.algo)?;
    run_training(
        algo,
        &config,
        &data,
        &manifest.data_file,
        &manifest.data_sha256,
        manifest.seed,
        &args.out,
        None,
        false,
        false,
    )?;
    println!("replayed into {}", args.out.display());
    Ok(())
}

/// One sweep cell.
struct SweepCell {
    algo: Algo,
    seed: u64,
    status: String,
    final_row: Option<CurveRow>,
    smoothed: Option<(f64, f64, f64)>,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.seeds < 2 {
        return Err(Error::invalid("--seeds must be at least 2"));
    }
    let algos: Vec<Algo> = args
        .algos
        .split(',')
        .map(|s| Algo::parse(s.trim()))
        .collect::<Result<Vec<_>>>()?;
    let config = resolve_config(&args.config, &args.set)?;
    let data_bytes = std::fs::read(&args.data)?;
    let data_hash = sha256_hex(&data_bytes);
    let data = Dataset::from_file_string(
        std::str::from_utf8(&data_bytes).map_err(|_| Error::invalid("dataset is not utf-8"))?,
    )?;
    let out = args.out.clone().unwrap_or_else(|| out_root().join("sweep"));
    std::fs::create_dir_all(&out)?;
    let decay = config.eval.smoothing_decay;

    let grid: Vec<(Algo, u64)> = algos
        .iter()
        .flat_map(|&a| (0..args.seeds as u64).map(move |s| (a, args.seed0 + s)))
        .collect();
    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|&(algo, seed)| {
            let run_dir = out.join(format!("{}_seed{}", algo.name(), seed));
            let res = run_training(
                algo,
                &config,
                &data,
                &args.data.display().to_string(),
                &data_hash,
                seed,
                &run_dir,
                None,
                false,
                true,
            );
            match res {
                Ok(r) => SweepCell {
                    algo,
                    seed,
                    status: "complete".into(),
                    final_row: r.curve.rows.last().copied(),
                    smoothed: Some(r.curve.smoothed_final(decay)),
                },
                Err(e) => {
                    eprintln!("{} seed {} failed: {e}", algo.name(), seed);
                    SweepCell { algo, seed, status: format!("failed: {e}"), final_row: None, smoothed: None }
                }
            }
        })
        .collect();

    // per-run rows
    let mut agg = String::from(
        "algo,seed,status,final_return,final_jsd,final_freq_lower,smoothed_return,smoothed_jsd,smoothed_freq_lower\n",
    );
    for c in &cells {
        let (fr, fj, ff) = c
            .final_row
            .map(|r| (r.eval_return, r.eval_jsd, r.eval_freq_lower))
            .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        let (sr, sj, sf) = c.smoothed.unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        let _ = writeln!(
            agg,
            "{},{},{},{},{},{},{},{},{}",
            c.algo.name(),
            c.seed,
            c.status.replace(',', ";"),
            fr,
            fj,
            ff,
            sr,
            sj,
            sf
        );
    }
    std::fs::write(out.join("aggregate.csv"), &agg)?;

    // per-algo summary over smoothed finals
    let mut summary = String::from(
        "algo,n,missing,mean_return,std_return,mean_jsd,std_jsd,mean_freq_lower,std_freq_lower\n",
    );
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    for &algo in &algos {
        let ok: Vec<&SweepCell> =
            cells.iter().filter(|c| c.algo == algo && c.smoothed.is_some()).collect();
        let missing = args.seeds - ok.len();
        if ok.is_empty() {
            let _ = writeln!(summary, "{},0,{},,,,,,", algo.name(), missing);
            continue;
        }
        let r: Vec<f64> = ok.iter().map(|c| c.smoothed.unwrap().0).collect();
        let j: Vec<f64> = ok.iter().map(|c| c.smoothed.unwrap().1).collect();
        let fl: Vec<f64> = ok.iter().map(|c| c.smoothed.unwrap().2).collect();
        let (mr, sr) = stats(&r);
        let (mj, sj) = stats(&j);
        let (mf, sf) = stats(&fl);
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{},{}",
            algo.name(),
            ok.len(),
            missing,
            mr,
            sr,
            mj,
            sj,
            mf,
            sf
        );
    }
    // paired one-sided sign test on JSD where both algos finished the seed
    if algos.contains(&Algo::Rtc) && algos.contains(&Algo::Mgail) {
        let mut wins = 0usize;
        let mut n = 0usize;
        for s in 0..args.seeds as u64 {
            let seed = args.seed0 + s;
            let get = |a: Algo| {
                cells
                    .iter()
                    .find(|c| c.algo == a && c.seed == seed)
                    .and_then(|c| c.smoothed)
                    .map(|x| x.1)
            };
            if let (Some(rj), Some(mj)) = (get(Algo::Rtc), get(Algo::Mgail)) {
                if rj != mj {
                    n += 1;
                    if rj < mj {
                        wins += 1;
                    }
                }
            }
        }
        let p = sign_test_p(wins, n);
        let line = format!("# sign_test rtc_jsd_below_mgail wins={wins} n={n} p={p}\n");
        summary.push_str(&line);
        print!("{line}");
    }
    std::fs::write(out.join("summary.csv"), &summary)?;
    println!("sweep complete: {}", out.display());
    Ok(())
}

fn info_csv_header() -> &'static str {
    "epsilon,solution,h_a_given_ge,i_s_a,i_s_ahat,h_ahat_given_gp,h_a_given_s,h_ahat_given_s,interaction_train,interaction_test,h_joint_a_ge,h_joint_ahat_gp,rec_ok,pre_info,pre_entropy,corollary,conclusion"
}

fn info_csv_row(eps: f64, solution: u8, r: &InfoReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        eps,
        solution,
        r.h_a_given_ge,
        r.i_s_a,
        r.i_s_ahat,
        r.h_ahat_given_gp,
        r.h_a_given_s,
        r.h_ahat_given_s,
        r.interaction_train,
        r.interaction_test,
        r.h_joint_a_ge,
        r.h_joint_ahat_gp,
        r.rec_ok,
        r.precondition_info,
        r.precondition_entropy,
        r.corollary_applies,
        r.conclusion_holds
    )
}

fn cmd_analyze_theorem(args: AnalyzeArgs) -> Result<i32> {
    let mut violations = 0usize;
    if let Some(n) = args.sweep {
        let summary = random_world_sweep(n, args.seed)?;
        println!(
            "sweep n={} rec_failed={} preconditions_met={} conclusion_violations={} corollary_cases={} corollary_violations={}",
            summary.n,
            summary.rec_failed,
            summary.preconditions_met,
            summary.conclusion_violations,
            summary.corollary_cases,
            summary.corollary_violations
        );
        violations += summary.conclusion_violations + summary.corollary_violations;
    }
    let epsilons = if args.epsilon.is_empty() && args.sweep.is_none() {
        vec![0.0, 0.1, 0.25, 0.4]
    } else {
        args.epsilon.clone()
    };
    let solutions: Vec<u8> = match args.solution.as_str() {
        "1" => vec![1],
        "2" => vec![2],
        "both" => vec![1, 2],
        other => return Err(Error::invalid(format!("--solution must be 1, 2 or both, got `{other}`"))),
    };
    let mut csv = String::from(info_csv_header());
    csv.push('\n');
    if args.sweep.is_none() || !epsilons.is_empty() {
        for &eps in &epsilons {
            for &sol in &solutions {
                let world = build_traffic_world(eps, sol)?;
                let r = verify_theorem(&world)?;
                println!(
                    "eps={:<5} solution {}: H(A|Ge)={:.4} I(S,A)={:.4} I(S,Ah)={:.4} H(Ah|Gp)={:.4} \
                     inter_train={:+.4} inter_test={:+.4} pre=({}, {}) rec_ok={} conclusion={} corollary=({}, {})",
                    eps,
                    sol,
                    r.h_a_given_ge,
                    r.i_s_a,
                    r.i_s_ahat,
                    r.h_ahat_given_gp,
                    r.interaction_train,
                    r.interaction_test,
                    r.precondition_info,
                    r.precondition_entropy,
                    r.rec_ok,
                    r.conclusion_holds,
                    r.corollary_applies,
                    r.corollary_holds
                );
                if r.theorem_violated() || r.corollary_violated() {
                    violations += 1;
                }
                csv.push_str(&info_csv_row(eps, sol, &r));
                csv.push('\n');
            }
        }
    }
    if let Some(path) = &args.out {
        std::fs::write(path, csv)?;
    }
    if violations > 0 {
        eprintln!("{violations} theorem violation(s) found");
        return Ok(1);
    }
    Ok(0)
}

fn cmd_plotdata(args: PlotdataArgs) -> Result<()> {
    let mut rows: Vec<(String, u64, u64, &'static str, f64)> = Vec::new();
    if args.runs.is_dir() {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&args.runs)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for dir in dirs {
            let manifest_path = dir.join("manifest.toml");
            if !manifest_path.exists() {
                continue;
            }
            let manifest = match RunManifest::load(&manifest_path) {
                Ok(m) => m,
                Err(e) => {
                    eprintln!("skipping {}: {e}", dir.display());
                    continue;
                }
            };
            let curve = match std::fs::read_to_string(dir.join("curve.csv"))
                .map_err(Error::from)
                .and_then(|t| LearningCurve::from_csv(&t))
            {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("skipping {}: {e}", dir.display());
                    continue;
                }
            };
            for r in &curve.rows {
                rows.push((manifest.algo.clone(), manifest.seed, r.step, "eval_return", r.eval_return));
                rows.push((manifest.algo.clone(), manifest.seed, r.step, "eval_jsd", r.eval_jsd));
                rows.push((
                    manifest.algo.clone(),
                    manifest.seed,
                    r.step,
                    "eval_freq_lower",
                    r.eval_freq_lower,
                ));
            }
        }
    }
    let mut out = String::from("algo,seed,step,metric,value\n");
    for (algo, seed, step, metric, value) in rows {
        let _ = writeln!(out, "{algo},{seed},{step},{metric},{value}");
    }
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&args.out, out)?;
    Ok(())
}
